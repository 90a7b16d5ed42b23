//! Bubble-in-tip quality control data engine.
//!
//! Real frames pass a quality gate, get a bubble posterior from a linear
//! scorer and are routed to auto-accept, human review or drop. Synthetic
//! frames come from prompted batch generation and are kept by a consistency
//! rule with human spot-checks. Both tracks land in an append-only manifest
//! from which splits, mixes and training listings are derived.

pub mod curator;
pub mod eval;
pub mod fixtures;
pub mod gate;
pub mod pipeline;
pub mod raster;
pub mod router;
pub mod scorer;
pub mod synth;

pub use curator::{
    AugmentConfig, Event, EventKind, ImageRecord, Manifest, ManifestState, ManifestStats, Source, Split, SplitSpec, Status,
};
pub use eval::{AblationConfig, AblationTable, ConfusionMatrix, CostReport, Metrics};
pub use gate::{GateConfig, GateReport};
pub use pipeline::{Engine, IngestOutcome, PipelineConfig, PipelineError};
pub use router::{HumanVerdict, ItemState, ReviewItem, ReviewQueue, Route, RouteDecision, RoutingConfig};
pub use scorer::{FeatureConfig, Scorer, ScorerModel, TrainConfig};
pub use synth::{ConsistencyConfig, PromptSpec, Verdict};
