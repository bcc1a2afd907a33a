"""Turn a predicted encoding into a SIC ranking, an amount, and nearby merchants."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence, TextIO

import numpy as np

from .autoencoder import AutoencoderModel, decode
from .errors import DomainError, ParseError, ShapeError
from .features import N_FEATURES, NormStats, SicEmbeddingTable

EARTH_RADIUS_KM = 6371.0
MERCHANT_COLUMNS = ("supplier_id", "sic", "latitude", "longitude", "median_price")


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cosine: shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


class SicScore(NamedTuple):
    sic: int
    score: float


@dataclass(frozen=True)
class SicRanking:
    entries: tuple[SicScore, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def sics(self) -> list[int]:
        return [e.sic for e in self.entries]

    def rank_of(self, sic: int) -> int | None:
        for i, e in enumerate(self.entries, 1):
            if e.sic == sic:
                return i
        return None


def _order(scores: np.ndarray, codes: np.ndarray) -> np.ndarray:
    # primary: score descending; secondary: SIC ascending
    return np.lexsort((codes, -scores))


def rank_sics(emb: np.ndarray, table: SicEmbeddingTable, K: int | None = None) -> SicRanking:
    """Top-K SICs by cosine similarity to ``emb``; ties go to the smaller code."""
    emb = np.asarray(emb, dtype=np.float64)
    n = np.linalg.norm(emb)
    if n == 0.0 or not np.isfinite(n):
        raise DomainError("cannot rank against a zero or non-finite embedding")
    if len(table) == 0:
        raise DomainError("empty SIC embedding table")
    scores = np.clip(table.matrix @ (emb / n), -1.0, 1.0)
    order = _order(scores, table.codes)
    if K is not None:
        order = order[:K]
    return SicRanking(tuple(SicScore(int(table.codes[i]), float(scores[i])) for i in order))


def rank_sics_batch(embs: np.ndarray, table: SicEmbeddingTable, K: int | None = None) -> list[SicRanking]:
    embs = np.asarray(embs, dtype=np.float64)
    norms = np.linalg.norm(embs, axis=1, keepdims=True)
    if (norms == 0.0).any():
        raise DomainError("cannot rank against a zero embedding")
    scores = np.clip((embs / norms) @ table.matrix.T, -1.0, 1.0)
    out = []
    for row in scores:
        order = _order(row, table.codes)[:K]
        out.append(SicRanking(tuple(SicScore(int(table.codes[i]), float(row[i])) for i in order)))
    return out


def decode_prediction(
    enc: np.ndarray, ae: AutoencoderModel, norm: NormStats | None
) -> tuple[np.ndarray, np.ndarray]:
    """Decoder output split into raw-scale transaction features (16) and SIC embedding (768)."""
    if norm is None:
        raise DomainError("decoding needs fitted normalization statistics")
    out = decode(ae, enc)
    return norm.invert(out[..., :N_FEATURES]), out[..., N_FEATURES:]


def predict_amount(features16: np.ndarray) -> float:
    """Predicted dollars: decoded amount slot floored at zero."""
    a = float(np.asarray(features16)[0])
    if not math.isfinite(a):
        raise DomainError("decoded amount is not finite")
    return max(0.0, a)


# ---- geography ----------------------------------------------------------------


class GeoPoint(NamedTuple):
    latitude: float
    longitude: float


def haversine(a: Sequence[float], b: Sequence[float]) -> float:
    """Great-circle distance in km between (lat, lon) points."""
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


@dataclass(frozen=True)
class Merchant:
    supplier_id: str
    sic: int
    latitude: float
    longitude: float
    median_price: float

    def __post_init__(self) -> None:
        if not -90.0 <= self.latitude <= 90.0 or not -180.0 <= self.longitude <= 180.0:
            raise DomainError(f"merchant {self.supplier_id}: coordinates out of range")
        if not self.median_price > 0:
            raise DomainError(f"merchant {self.supplier_id}: median price must be positive")

    @property
    def location(self) -> GeoPoint:
        return GeoPoint(self.latitude, self.longitude)


def load_merchants(source: TextIO | str) -> list[Merchant]:
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != MERCHANT_COLUMNS:
        raise ParseError(f"merchant header must be {','.join(MERCHANT_COLUMNS)}", 1)
    out = []
    for row in reader:
        if not row:
            continue
        if len(row) != len(MERCHANT_COLUMNS):
            raise ParseError(f"expected {len(MERCHANT_COLUMNS)} fields", reader.line_num)
        try:
            out.append(Merchant(row[0].strip(), int(row[1]), float(row[2]), float(row[3]), float(row[4])))
        except (ValueError, DomainError) as exc:
            raise ParseError(str(exc), reader.line_num) from None
    return out


def write_merchants(merchants: Iterable[Merchant], sink: TextIO) -> None:
    w = csv.writer(sink, lineterminator="\n")
    w.writerow(MERCHANT_COLUMNS)
    for m in merchants:
        w.writerow([m.supplier_id, m.sic, repr(m.latitude), repr(m.longitude), repr(m.median_price)])


@dataclass(frozen=True)
class RankedMerchant:
    supplier_id: str
    sic: int
    sic_rank: int
    distance_km: float
    median_price: float


@dataclass(frozen=True)
class Offer:
    card_id: str
    generated_at: str
    merchants: tuple[RankedMerchant, ...]
    predicted_amount: float
    sics: tuple[int, ...] = field(default=())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["merchants"] = [asdict(m) for m in self.merchants]
        d["sics"] = list(self.sics)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Offer":
        return cls(
            d["card_id"],
            d["generated_at"],
            tuple(RankedMerchant(**m) for m in d["merchants"]),
            float(d["predicted_amount"]),
            tuple(d.get("sics", ())),
        )


def filter_merchants(
    ranking: SicRanking,
    user_loc: Sequence[float],
    merchants: Iterable[Merchant],
    radius_km: float,
    reservation: Mapping[int, float] | None = None,
    price_tolerance: float = 0.2,
    *,
    category_of: Mapping[int, int] | None = None,
    card_id: str = "",
    generated_at: str = "",
    predicted_amount: float = 0.0,
) -> Offer:
    """Keep merchants in a ranked SIC, within ``radius_km``, and affordable.

    ``reservation`` maps a merchant category (MCC) to the user's highest past
    spend there; ``category_of`` maps SIC to MCC (identity when omitted).  A
    merchant whose category the user never bought from passes the price test.
    """
    reservation = reservation or {}
    rank = {sic: i for i, sic in enumerate(ranking.sics, 1)}
    kept = []
    for m in merchants:
        r = rank.get(m.sic)
        if r is None:
            continue
        dist = haversine(user_loc, m.location)
        if dist > radius_km:
            continue
        cat = category_of.get(m.sic, m.sic) if category_of is not None else m.sic
        limit = reservation.get(cat)
        if limit is not None and m.median_price > (1.0 + price_tolerance) * limit:
            continue
        kept.append(RankedMerchant(m.supplier_id, m.sic, r, dist, m.median_price))
    kept.sort(key=lambda k: (k.sic_rank, k.distance_km, k.supplier_id))
    return Offer(card_id, generated_at, tuple(kept), predicted_amount, tuple(ranking.sics))
