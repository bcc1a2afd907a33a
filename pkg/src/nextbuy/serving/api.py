"""HTTP front end for the scoring service."""

from __future__ import annotations

from datetime import date, datetime
from typing import Literal, Union

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from ..datamodel import Transaction
from ..errors import DataError, DomainError, PipelineError
from .pipeline import Decision, LocationEvent, ScoringService

EventId = Union[int, str, None]


class LocationEventIn(BaseModel):
    card_id: str = Field(min_length=1)
    latitude: float = Field(ge=-90.0, le=90.0)
    longitude: float = Field(ge=-180.0, le=180.0)
    timestamp: datetime
    event_id: EventId = None


class TransactionIn(BaseModel):
    card_id: str = Field(min_length=1)
    date: date
    seq_no: int
    amount: float = Field(gt=0.0)
    supplier_id: str
    mcc: int
    sic: int
    sic_description: str
    event_id: EventId = None


class RankedMerchantOut(BaseModel):
    supplier_id: str
    sic: int
    sic_rank: int
    distance_km: float
    median_price: float


class OfferOut(BaseModel):
    card_id: str
    generated_at: str
    merchants: list[RankedMerchantOut]
    predicted_amount: float
    sics: list[int]


class DecisionOut(BaseModel):
    event_id: EventId
    decision: Literal["offer", "no_offer", "ingested", "error"]
    reason: str | None = None
    offer: OfferOut | None = None
    latency_ms: float = 0.0


class InsightOut(BaseModel):
    event_id: EventId
    offer: OfferOut


class HealthOut(BaseModel):
    status: str
    users_online: int
    offers: int


class StatsOut(BaseModel):
    events: int
    mean_latency_ms: float


class SnapshotOut(BaseModel):
    path: str | None
    size_bytes: int


def _decision_out(d: Decision) -> DecisionOut:
    return DecisionOut(
        event_id=d.event_id,
        decision=d.decision,
        reason=d.reason if d.offer is None else None,
        offer=OfferOut(**d.offer.to_dict()) if d.offer is not None else None,
        latency_ms=d.latency_ms,
    )


def create_app(service: ScoringService) -> FastAPI:
    app = FastAPI(title="nextbuy scoring service")

    def run(fn, *args):
        try:
            return fn(*args)
        except PipelineError as exc:
            raise HTTPException(status_code=503, detail=str(exc)) from exc
        except (DataError, DomainError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    @app.get("/health", response_model=HealthOut)
    def health() -> HealthOut:
        return HealthOut(status="ok", users_online=len(service.stores.online.buffers),
                         offers=len(service.stores.insights))

    @app.post("/events", response_model=DecisionOut)
    def post_event(ev: LocationEventIn) -> DecisionOut:
        event = run(LocationEvent, ev.card_id, ev.latitude, ev.longitude, ev.timestamp)
        return _decision_out(run(service.handle_event, event, ev.event_id))

    @app.post("/transactions", response_model=DecisionOut)
    def post_transaction(tx: TransactionIn) -> DecisionOut:
        txn = Transaction(tx.card_id, tx.date, tx.seq_no, tx.amount, tx.supplier_id, tx.mcc, tx.sic,
                          tx.sic_description)
        return _decision_out(run(service.ingest, txn, tx.event_id))

    @app.get("/offers/{card_id}", response_model=list[InsightOut])
    def get_offers(card_id: str) -> list[InsightOut]:
        return [InsightOut(**r) for r in service.offers(card_id)]

    @app.post("/snapshot", response_model=SnapshotOut)
    def post_snapshot() -> SnapshotOut:
        data = service.save_snapshot()
        return SnapshotOut(path=service.cfg.online_snapshot, size_bytes=len(data))

    @app.get("/stats", response_model=StatsOut)
    def stats() -> StatsOut:
        return StatsOut(events=len(service.latencies_ms), mean_latency_ms=service.mean_latency_ms())

    return app
