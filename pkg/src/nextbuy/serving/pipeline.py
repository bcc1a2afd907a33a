"""Location-triggered offer generation over the feature stores and frozen models.

The scoring path for one location event is: qualify the move, read the
user's last L encoded transactions from the online store, predict the next
encoding, decode and rank SICs, keep nearby affordable merchants, and persist
the resulting offer to the insights store.
"""

from __future__ import annotations

import json
import logging
import statistics
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field, fields
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Iterator, Mapping, TextIO

import numpy as np

from ..autoencoder import AutoencoderModel, ae_load, encode
from ..datamodel import SIC_CATALOG, Dataset, SyntheticCorpus, Transaction
from ..errors import ConfigError, DataError, DomainError, OrderingError, ParseError, PipelineError
from ..features import FeatureContext, temporal_features, temporal_for_date
from ..recommend import Merchant, Offer, decode_prediction, filter_merchants, haversine, load_merchants, \
    predict_amount, rank_sics
from ..seqmodel import SeqModel, build_histories, predict_next, seq_load
from .stores import InsightsStore, OfflineFeatureStore, OnlineStore

log = logging.getLogger(__name__)

FIRST_LOCATION = "first location"
MOVED = "moved"
BELOW_MOVE = "below movement threshold"
COOLDOWN = "cooldown"
STALE_EVENT = "out-of-order timestamp"
INSUFFICIENT_HISTORY = "insufficient history"
NO_MERCHANTS = "no qualifying merchants"
DUPLICATE_EVENT = "duplicate event"

SIC_MCC_KEY = "catalog/sic_mcc"
RESERVATION_KEY = "catalog/reservations"


@dataclass
class PipelineConfig:
    L: int = 5
    top_k_sics: int = 5
    radius_km: float = 5.0
    min_move_km: float = 1.0
    cooldown_minutes: float = 15.0
    price_tolerance: float = 0.2
    ae_model: str | None = None
    seq_model: str | None = None
    offline_store: str | None = None
    online_snapshot: str | None = None
    insights: str | None = None
    merchants: str | None = None

    def __post_init__(self) -> None:
        for name in ("L", "top_k_sics", "radius_km", "min_move_km", "cooldown_minutes", "price_tolerance"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"pipeline setting {name} must be positive")

    @classmethod
    def from_mapping(cls, data: Mapping) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown pipeline settings: {sorted(unknown)}")
        return cls(**data)


def _utc(ts: datetime) -> datetime:
    return ts.replace(tzinfo=timezone.utc) if ts.tzinfo is None else ts.astimezone(timezone.utc)


@dataclass(frozen=True)
class LocationEvent:
    card_id: str
    latitude: float
    longitude: float
    timestamp: datetime

    def __post_init__(self) -> None:
        if not self.card_id:
            raise DomainError("location event needs a card_id")
        if not -90.0 <= self.latitude <= 90.0 or not -180.0 <= self.longitude <= 180.0:
            raise DomainError(f"coordinates ({self.latitude}, {self.longitude}) out of range")
        object.__setattr__(self, "timestamp", _utc(self.timestamp))


@dataclass(frozen=True)
class Qualification:
    qualified: bool
    reason: str


def qualify_location(user: str, event: LocationEvent, online: OnlineStore, cfg: PipelineConfig) -> Qualification:
    """Geofence rule: a first sighting qualifies; later ones need a real move and an elapsed cooldown."""
    stored = online.location(user)
    if stored is None:
        result = Qualification(True, FIRST_LOCATION)
    else:
        last = datetime.fromisoformat(stored["qualified_at"])
        moved = haversine((stored["latitude"], stored["longitude"]), (event.latitude, event.longitude))
        if event.timestamp < last:
            result = Qualification(False, STALE_EVENT)
        elif moved < cfg.min_move_km:
            result = Qualification(False, BELOW_MOVE)
        elif event.timestamp - last < timedelta(minutes=cfg.cooldown_minutes):
            result = Qualification(False, COOLDOWN)
        else:
            result = Qualification(True, MOVED)
    if result.qualified:
        online.set_location(user, event.latitude, event.longitude, event.timestamp.isoformat())
    return result


@dataclass(frozen=True)
class ScoringModels:
    """Frozen models plus fitted feature state; shared read-only across requests."""

    autoencoder: AutoencoderModel
    seqnbt: SeqModel
    features: FeatureContext
    sic_to_mcc: Mapping[int, int] = field(default_factory=dict)


@dataclass
class Stores:
    offline: OfflineFeatureStore
    online: OnlineStore
    insights: InsightsStore


@dataclass
class Decision:
    event_id: object
    decision: str  # "offer", "no_offer", "ingested" or "error"
    reason: str | None = None
    offer: Offer | None = None
    latency_ms: float = 0.0

    def to_record(self) -> dict:
        rec = {"event_id": self.event_id, "decision": self.decision}
        if self.offer is not None:
            rec["offer"] = self.offer.to_dict()
        else:
            rec["reason"] = self.reason
        return rec


def _score(user: str, event: LocationEvent, stores: Stores, models: ScoringModels,
           merchants: Iterable[Merchant], cfg: PipelineConfig) -> Offer:
    window = stores.online.window(user)[-cfg.L:]
    try:
        enc = predict_next(models.seqnbt, window)
        feats, emb = decode_prediction(enc, models.autoencoder, models.features.norm)
        ranking = rank_sics(emb, models.features.table, cfg.top_k_sics)
        amount = predict_amount(feats)
    except DomainError as exc:
        raise PipelineError(f"scoring failed for {user}: {exc}") from exc
    return filter_merchants(
        ranking,
        (event.latitude, event.longitude),
        merchants,
        cfg.radius_km,
        stores.online.reservation(user),
        cfg.price_tolerance,
        category_of=models.sic_to_mcc,
        card_id=user,
        generated_at=event.timestamp.isoformat(),
        predicted_amount=amount,
    )


def handle_event(event: LocationEvent, stores: Stores, models: ScoringModels, merchants: Iterable[Merchant],
                 cfg: PipelineConfig, event_id: object = None, client_id: bool = False) -> Decision:
    """Run one location event through the scoring path; at most one offer is persisted."""
    user = event.card_id
    q = qualify_location(user, event, stores.online, cfg)
    if not q.qualified:
        return Decision(event_id, "no_offer", q.reason)
    if stores.online.history_len(user) < cfg.L:
        return Decision(event_id, "no_offer", INSUFFICIENT_HISTORY)
    offer = _score(user, event, stores, models, merchants, cfg)
    if not offer.merchants:
        return Decision(event_id, "no_offer", NO_MERCHANTS)
    record = {"event_id": event_id, "offer": offer.to_dict()}
    if client_id:
        record["client_id"] = True  # lets a restarted service rebuild its duplicate check
    stores.insights.append(record)
    return Decision(event_id, "offer", q.reason, offer)


def ingest_new_transaction(txn: Transaction, models: ScoringModels, stores: Stores) -> np.ndarray:
    """Encode a new transaction and append it to both stores; returns its encoding."""
    user = txn.card_id
    prev = stores.online.last_date(user)
    if prev is not None and txn.date < prev:
        raise OrderingError(f"{user}: transaction dated {txn.date} precedes stored {prev}")
    if txn.sic not in models.features.table:
        raise DataError(f"SIC {txn.sic} has no embedding")
    tf = temporal_features(txn, prev)
    code = encode(models.autoencoder, models.features.input_for(txn))
    stores.offline.put_encodings({txn.key: code})
    stores.online.append_step(user, (txn.date.isoformat(), txn.seq_no), code,
                              models.features.norm.temporal_vector(tf), txn.date.isoformat())
    stores.online.update_reservation(user, txn.mcc, txn.amount)
    return code


class ScoringService:
    """Stores, models and merchants bundled behind per-user serialization."""

    def __init__(self, models: ScoringModels, stores: Stores, merchants: Iterable[Merchant], cfg: PipelineConfig):
        self.models = models
        self.stores = stores
        self.merchants = list(merchants)
        self.cfg = cfg
        self.latencies_ms: list[float] = []
        self._seen: set = {r["event_id"] for r in stores.insights.scan() if r.get("client_id")}
        self._guard = threading.Lock()
        self._user_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)

    def _lock_for(self, user: str) -> threading.Lock:
        with self._guard:
            return self._user_locks[user]

    def handle_event(self, event: LocationEvent, event_id: object = None, dedupe: bool = True) -> Decision:
        """Score one event.  A repeated caller-supplied ``event_id`` is ignored when ``dedupe`` is set;
        stream positions are not identities across runs, so callers pass ``dedupe=False`` for those."""
        dedupe = dedupe and event_id is not None
        with self._lock_for(event.card_id):
            if dedupe and event_id in self._seen:
                return Decision(event_id, "no_offer", DUPLICATE_EVENT)
            t0 = time.perf_counter()
            decision = handle_event(event, self.stores, self.models, self.merchants, self.cfg, event_id, dedupe)
            decision.latency_ms = (time.perf_counter() - t0) * 1e3
            self.latencies_ms.append(decision.latency_ms)
            if decision.offer is not None and dedupe:
                self._seen.add(event_id)
            if decision.offer is None:
                log.info("event %s for %s: no offer (%s)", event_id, event.card_id, decision.reason)
            return decision

    def ingest(self, txn: Transaction, event_id: object = None) -> Decision:
        with self._lock_for(txn.card_id):
            ingest_new_transaction(txn, self.models, self.stores)
        return Decision(event_id, "ingested", None)

    def offers(self, card_id: str | None = None) -> list[dict]:
        return [r for r in self.stores.insights.scan() if card_id is None or r["offer"]["card_id"] == card_id]

    def mean_latency_ms(self) -> float:
        return statistics.fmean(self.latencies_ms) if self.latencies_ms else 0.0

    def save_snapshot(self, path: str | None = None) -> bytes:
        data = self.stores.online.snapshot()
        target = path or self.cfg.online_snapshot
        if target:
            Path(target).write_bytes(data)
        return data

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "ScoringService":
        missing = [n for n in ("ae_model", "seq_model", "offline_store", "merchants") if not getattr(cfg, n)]
        if missing:
            raise ConfigError(f"pipeline config is missing paths: {missing}")
        try:
            offline = OfflineFeatureStore(cfg.offline_store)
            features = offline.load_features()
            models = ScoringModels(ae_load(cfg.ae_model), seq_load(cfg.seq_model), features, load_sic_mcc(offline))
            with open(cfg.merchants, encoding="utf-8") as fh:
                merchants = load_merchants(fh)
            if cfg.online_snapshot and Path(cfg.online_snapshot).exists():
                online = OnlineStore.load(cfg.online_snapshot)
            else:
                online = online_from_offline(offline, features, cfg.L)
        except OSError as exc:
            raise PipelineError(f"cannot open pipeline inputs: {exc}") from exc
        return cls(models, Stores(offline, online, InsightsStore(cfg.insights)), merchants, cfg)


# ---- store population ------------------------------------------------------------


def sic_mcc_map(txns: Iterable[Transaction]) -> dict[int, int]:
    out: dict[int, int] = {}
    for t in txns:
        out.setdefault(t.sic, t.mcc)
    return out


def reservation_prices(txns: Iterable[Transaction]) -> dict[str, dict[int, float]]:
    """Highest amount each user has paid in each merchant category."""
    out: dict[str, dict[int, float]] = defaultdict(dict)
    for t in txns:
        r = out[t.card_id]
        r[t.mcc] = max(t.amount, r.get(t.mcc, 0.0))
    return dict(out)


def load_sic_mcc(offline: OfflineFeatureStore) -> dict[int, int]:
    if SIC_MCC_KEY not in offline:
        return {}
    return {int(k): int(v) for k, v in offline.get(SIC_MCC_KEY).items()}


def publish_catalog(offline: OfflineFeatureStore, ds: Dataset) -> None:
    """Write the SIC-to-MCC map and per-user reservation prices next to the encodings."""
    offline.put_many([
        (SIC_MCC_KEY, {str(k): v for k, v in sorted(sic_mcc_map(ds).items())}),
        (RESERVATION_KEY, {u: {str(m): p for m, p in sorted(r.items())}
                           for u, r in sorted(reservation_prices(ds).items())}),
    ])


def online_from_offline(offline: OfflineFeatureStore, features: FeatureContext, L: int) -> OnlineStore:
    """Warm the online store with each user's last L encodings from the offline store.

    Temporal features only need the transaction dates, which the encoding keys carry.
    """
    online = OnlineStore(L)
    by_user: dict[str, list[tuple[date, int]]] = defaultdict(list)
    encodings = offline.encodings()
    for card, d, seq in encodings:
        by_user[card].append((d, seq))
    for card in sorted(by_user):
        keys = sorted(by_user[card])
        for i, (d, seq) in enumerate(keys):
            if i < len(keys) - L:
                continue
            tf = temporal_for_date(d, keys[i - 1][0] if i > 0 else None)
            online.append_step(card, (d.isoformat(), seq), encodings[(card, d, seq)],
                               features.norm.temporal_vector(tf), d.isoformat())
    if RESERVATION_KEY in offline:
        for card, r in sorted(offline.get(RESERVATION_KEY).items()):
            for mcc, price in sorted(r.items()):
                online.update_reservation(card, int(mcc), float(price))
    return online


def online_from_histories(ds: Dataset, encodings: Mapping[tuple, np.ndarray], features: FeatureContext,
                          L: int) -> OnlineStore:
    """Online store built straight from a dataset (same content as ``online_from_offline``)."""
    online = OnlineStore(L)
    for card, steps in build_histories(ds, encodings, features.norm).items():
        for st in steps[-L:]:
            online.append_step(card, (st.key[0].isoformat(), st.key[1]), st.encoding, st.temporal,
                               st.key[0].isoformat())
    for card, r in sorted(reservation_prices(ds).items()):
        for mcc, price in sorted(r.items()):
            online.update_reservation(card, mcc, price)
    return online


# ---- merchants and simulated events ------------------------------------------------


def synthetic_merchants(corpus: SyntheticCorpus) -> list[Merchant]:
    """Merchant catalog for a synthetic corpus; price is the median amount actually paid there."""
    paid: dict[str, list[float]] = defaultdict(list)
    for t in corpus.dataset:
        paid[t.supplier_id].append(t.amount)
    typical = {sic: amount for sic, _, _, amount in SIC_CATALOG}
    return [
        Merchant(m.supplier_id, m.sic, m.latitude, m.longitude,
                 statistics.median(paid[m.supplier_id]) if paid[m.supplier_id] else typical.get(m.sic, 50.0))
        for m in corpus.merchants
    ]


def simulate_events(
    users: Iterable[str],
    n_events: int,
    seed: int = 0,
    center: tuple[float, float] = (40.7128, -74.0060),
    start: datetime = datetime(2019, 4, 1, 8, 0, tzinfo=timezone.utc),
    spread_deg: float = 0.04,
) -> list[LocationEvent]:
    """Random walk of location pings for the given users, with time strictly increasing overall."""
    users = sorted(set(users))
    if not users:
        raise DataError("no users to simulate events for")
    rng = np.random.default_rng([seed, 0xE7])
    pos: dict[str, tuple[float, float]] = {}
    now = start
    out = []
    for _ in range(n_events):
        u = users[int(rng.integers(len(users)))]
        now += timedelta(seconds=int(rng.integers(30, 600)))
        if u in pos and rng.random() < 0.3:
            lat, lon = pos[u][0] + rng.normal(0, 0.001), pos[u][1] + rng.normal(0, 0.001)
        else:
            lat, lon = center[0] + rng.normal(0, spread_deg), center[1] + rng.normal(0, spread_deg)
        pos[u] = (lat, lon)
        out.append(LocationEvent(u, round(float(lat), 6), round(float(lon), 6), now))
    return out


# ---- line-delimited stream ---------------------------------------------------------


def event_to_line(event: LocationEvent) -> str:
    return f"{event.card_id} {event.latitude!r} {event.longitude!r} {event.timestamp.isoformat()}"


def _transaction_from(rec: Mapping) -> Transaction:
    try:
        return Transaction(
            str(rec["card_id"]), date.fromisoformat(rec["date"]), int(rec["seq_no"]), float(rec["amount"]),
            str(rec["supplier_id"]), int(rec["mcc"]), int(rec["sic"]), str(rec["sic_description"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad transaction record: {exc}") from None


@dataclass(frozen=True)
class StreamItem:
    """A parsed stream line.  ``explicit`` says whether the record carried its own event_id;
    otherwise ``event_id`` is the line number."""

    event_id: object
    item: LocationEvent | Transaction
    explicit: bool = False


def parse_event_line(line: str, lineno: int) -> StreamItem:
    """Either ``card lat lon timestamp`` or a JSON object with ``type`` location/transaction."""
    text = line.strip()
    try:
        if text.startswith("{"):
            rec = json.loads(text)
            if not isinstance(rec, dict):
                raise ParseError("record must be an object", lineno)
            explicit = rec.get("event_id") is not None
            event_id = rec["event_id"] if explicit else lineno
            if rec.get("type", "location") == "transaction":
                return StreamItem(event_id, _transaction_from(rec), explicit)
            return StreamItem(event_id, LocationEvent(
                str(rec["card_id"]), float(rec["latitude"]), float(rec["longitude"]),
                datetime.fromisoformat(rec["timestamp"]),
            ), explicit)
        parts = text.split()
        if len(parts) != 4:
            raise ParseError("expected 'card_id latitude longitude timestamp'", lineno)
        return StreamItem(lineno, LocationEvent(parts[0], float(parts[1]), float(parts[2]),
                                                datetime.fromisoformat(parts[3])))
    except ParseError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(str(exc), lineno) from None


@dataclass
class ServeSummary:
    n_lines: int = 0
    n_offers: int = 0
    n_errors: int = 0
    mean_latency_ms: float = 0.0


def serve_records(lines: Iterable[str], service: ScoringService) -> Iterator[dict]:
    """One output record per non-blank input line, in input order; bad lines become error records."""
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        event_id: object = lineno
        try:
            parsed = parse_event_line(line, lineno)
            event_id = parsed.event_id
            if isinstance(parsed.item, Transaction):
                decision = service.ingest(parsed.item, event_id)
            else:
                decision = service.handle_event(parsed.item, event_id, dedupe=parsed.explicit)
        except (DataError, DomainError) as exc:
            decision = Decision(event_id, "error", str(exc))
        yield decision.to_record()


def serve(lines: Iterable[str], service: ScoringService, sink: TextIO) -> ServeSummary:
    """Stream results as JSON lines; pipeline failures other than bad input propagate."""
    summary = ServeSummary()
    n_before = len(service.latencies_ms)
    for rec in serve_records(lines, service):
        summary.n_lines += 1
        summary.n_offers += rec["decision"] == "offer"
        summary.n_errors += rec["decision"] == "error"
        sink.write(json.dumps(rec, sort_keys=True) + "\n")
    lat = service.latencies_ms[n_before:]
    summary.mean_latency_ms = statistics.fmean(lat) if lat else 0.0
    return summary

