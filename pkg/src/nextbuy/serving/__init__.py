"""Location-triggered scoring: feature stores, the event pipeline and its HTTP service."""

from .pipeline import (
    LocationEvent,
    PipelineConfig,
    ScoringModels,
    ScoringService,
    Stores,
    handle_event,
    ingest_new_transaction,
    qualify_location,
    serve,
)
from .stores import InsightsStore, OfflineFeatureStore, OnlineStore
