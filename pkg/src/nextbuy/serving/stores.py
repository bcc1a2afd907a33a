"""Feature and insight stores backing the scoring pipeline.

All three are plain-file structures: the offline store and the insights store
are append-only JSON-lines logs, the online store is an in-memory table set
with a canonical JSON snapshot.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from collections import deque
from datetime import date
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

import numpy as np

from ..errors import FormatError, NotFoundError
from ..features import Aggregates, CategoryAggregates, FeatureContext, MerchantAggregates, NormStats, \
    SicEmbeddingTable, UserAggregates

log = logging.getLogger(__name__)


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


class OfflineFeatureStore:
    """Append-only key/value log; the latest record for a key wins.

    Reopening the file rebuilds the same index by replaying the log.  A torn
    final line (crash mid-append) is dropped with a warning.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._values: dict[str, Any] = {}
        self._offsets: dict[str, int] = {}
        self._order: list[str] = []
        self._lock = threading.Lock()
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if self.path.exists():
                self._replay()
            self._fh = open(self.path, "a", encoding="utf-8")

    def _replay(self) -> None:
        with open(self.path, "rb") as fh:
            data = fh.read()
        pos = 0
        lineno = 0
        while pos < len(data):
            end = data.find(b"\n", pos)
            lineno += 1
            if end == -1:
                log.warning("%s: dropping torn trailing record at byte %d", self.path, pos)
                with open(self.path, "r+b") as fh:
                    fh.truncate(pos)
                break
            try:
                rec = json.loads(data[pos:end])
                key, value = rec["k"], rec["v"]
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{self.path}: bad record on line {lineno}: {exc}") from None
            self._index(key, value, pos)
            pos = end + 1

    def _index(self, key: str, value: Any, offset: int) -> None:
        if key not in self._values:
            self._order.append(key)
        self._values[key] = value
        self._offsets[key] = offset

    def put(self, key: str, value: Any) -> None:
        self.put_many([(key, value)])

    def put_many(self, items: Iterable[tuple[str, Any]]) -> None:
        with self._lock:
            lines = []
            offset = self._fh.tell() if self._fh is not None else 0
            for key, value in items:
                line = _dumps({"k": key, "v": value}) + "\n"
                lines.append(line)
                self._index(key, value, offset)
                offset += len(line.encode("utf-8"))
            if self._fh is not None:
                self._fh.write("".join(lines))
                self._fh.flush()

    def get(self, key: str) -> Any:
        try:
            return self._values[key]
        except KeyError:
            raise NotFoundError(f"offline store has no key {key!r}") from None

    def __contains__(self, key: str) -> bool:
        return key in self._values

    def __len__(self) -> int:
        return len(self._values)

    def keys(self, prefix: str = "") -> list[str]:
        return [k for k in self._order if k.startswith(prefix)]

    def index(self) -> dict[str, int]:
        return dict(self._offsets)

    def scan(self) -> Iterator[tuple[str, Any]]:
        """Every record in append order, including superseded ones."""
        if self.path is None:
            yield from ((k, self._values[k]) for k in self._order)
            return
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                if line.endswith("\n"):
                    rec = json.loads(line)
                    yield rec["k"], rec["v"]

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # ---- typed helpers ----

    @staticmethod
    def encoding_key(card_id: str, d: date | str, seq_no: int) -> str:
        return f"enc/{card_id}/{d if isinstance(d, str) else d.isoformat()}/{seq_no}"

    def put_encodings(self, encodings: Mapping[tuple, np.ndarray]) -> None:
        self.put_many(
            (self.encoding_key(*key), [float(x) for x in vec]) for key, vec in sorted(encodings.items())
        )

    def get_encoding(self, card_id: str, d: date | str, seq_no: int) -> np.ndarray:
        return np.array(self.get(self.encoding_key(card_id, d, seq_no)), dtype=np.float64)

    def encodings(self) -> dict[tuple[str, date, int], np.ndarray]:
        out = {}
        for k in self.keys("enc/"):
            _, card, d, seq = k.split("/")
            out[(card, date.fromisoformat(d), int(seq))] = np.array(self._values[k], dtype=np.float64)
        return out

    def put_features(self, ctx: FeatureContext) -> None:
        aggs = ctx.aggregates
        self.put_many(
            [
                ("features/users", {u: [a.txn_count, a.mean_amount, a.median_amount, a.total_amount,
                                        a.distinct_mcc_count] for u, a in sorted(aggs.users.items())}),
                ("features/categories", {f"{u}|{m}": [a.txn_count, a.mean_amount, a.reservation_price]
                                         for (u, m), a in sorted(aggs.categories.items())}),
                ("features/merchants", {m: [a.txn_count, a.mean_amount, a.median_amount, a.total_amount]
                                        for m, a in sorted(aggs.merchants.items())}),
                ("features/norm", ctx.norm.to_dict()),
                ("features/sic_table", {str(int(c)): [float(x) for x in v]
                                        for c, v in zip(ctx.table.codes, ctx.table.matrix)}),
            ]
        )

    def load_features(self) -> FeatureContext:
        users = {u: UserAggregates(int(v[0]), v[1], v[2], v[3], int(v[4]))
                 for u, v in self.get("features/users").items()}
        cats = {}
        for k, v in self.get("features/categories").items():
            u, m = k.rsplit("|", 1)
            cats[(u, int(m))] = CategoryAggregates(int(v[0]), v[1], v[2])
        merchants = {m: MerchantAggregates(int(v[0]), v[1], v[2], v[3])
                     for m, v in self.get("features/merchants").items()}
        table = SicEmbeddingTable({int(c): np.array(v) for c, v in self.get("features/sic_table").items()})
        return FeatureContext(Aggregates(users, cats, merchants), table, NormStats.from_dict(self.get("features/norm")))


class OnlineStore:
    """Low-latency per-user state: last qualified location, rolling window, reservation prices."""

    def __init__(self, L: int = 5):
        if L < 1:
            raise ValueError("rolling buffer length must be >= 1")
        self.L = L
        self.locations: dict[str, dict] = {}
        self.buffers: dict[str, deque] = {}
        self.last_dates: dict[str, str] = {}
        self.reservations: dict[str, dict[str, float]] = {}
        self._lock = threading.RLock()

    # locations
    def location(self, card_id: str) -> dict | None:
        return self.locations.get(card_id)

    def set_location(self, card_id: str, latitude: float, longitude: float, qualified_at: str) -> None:
        with self._lock:
            self.locations[card_id] = {"latitude": latitude, "longitude": longitude, "qualified_at": qualified_at}

    # rolling window
    def append_step(self, card_id: str, key: tuple[str, int], encoding: np.ndarray, temporal: np.ndarray,
                    txn_date: str) -> None:
        with self._lock:
            buf = self.buffers.setdefault(card_id, deque(maxlen=self.L))
            buf.append({"key": [key[0], int(key[1])],
                        "encoding": [float(x) for x in encoding],
                        "temporal": [float(x) for x in temporal]})
            self.last_dates[card_id] = txn_date

    def window(self, card_id: str) -> np.ndarray:
        buf = self.buffers.get(card_id, ())
        if not buf:
            return np.empty((0, 0))
        return np.array([r["encoding"] + r["temporal"] for r in buf], dtype=np.float64)

    def history_len(self, card_id: str) -> int:
        return len(self.buffers.get(card_id, ()))

    def last_date(self, card_id: str) -> date | None:
        d = self.last_dates.get(card_id)
        return date.fromisoformat(d) if d else None

    # reservation prices, keyed by MCC
    def reservation(self, card_id: str) -> dict[int, float]:
        return {int(k): v for k, v in self.reservations.get(card_id, {}).items()}

    def update_reservation(self, card_id: str, mcc: int, amount: float) -> None:
        with self._lock:
            r = self.reservations.setdefault(card_id, {})
            r[str(mcc)] = max(amount, r.get(str(mcc), 0.0))

    # persistence
    def snapshot(self) -> bytes:
        with self._lock:
            state = {
                "L": self.L,
                "locations": self.locations,
                "buffers": {k: list(v) for k, v in self.buffers.items()},
                "last_dates": self.last_dates,
                "reservations": self.reservations,
            }
            return _dumps(state).encode("utf-8")

    @classmethod
    def restore(cls, data: bytes) -> "OnlineStore":
        try:
            state = json.loads(data)
            store = cls(int(state["L"]))
            store.locations = {k: dict(v) for k, v in state["locations"].items()}
            store.buffers = {k: deque(v, maxlen=store.L) for k, v in state["buffers"].items()}
            store.last_dates = dict(state["last_dates"])
            store.reservations = {k: dict(v) for k, v in state["reservations"].items()}
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"bad online store snapshot: {exc}") from None
        return store

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes(self.snapshot())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "OnlineStore":
        return cls.restore(Path(path).read_bytes())


class InsightsStore:
    """Append-only log of emitted offers."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._records: list[dict] = []
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if self.path.exists():
                with open(self.path, encoding="utf-8") as fh:
                    self._records = [json.loads(line) for line in fh if line.endswith("\n")]

    def append(self, record: Mapping) -> None:
        rec = json.loads(_dumps(record))  # stored records are detached copies
        with self._lock:
            self._records.append(rec)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(_dumps(rec) + "\n")

    def scan(self) -> Iterator[dict]:
        return iter([dict(r) for r in self._records])

    def __len__(self) -> int:
        return len(self._records)
