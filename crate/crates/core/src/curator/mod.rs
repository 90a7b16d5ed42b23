//! Dataset preparation and the manifest.

mod augment;
mod manifest;
mod record;
mod split;
mod standardize;

use thiserror::Error;

pub use augment::{apply as apply_augment, augment, sample_params, AugmentConfig, AugmentParams};
pub use manifest::{
    fold, format_listing, parse_events, parse_listing, replay, snapshot_path, Event, EventKind, ListingRow, Manifest,
    ManifestError, ManifestState, ManifestStats, MixState, RouteCounts, SplitState, SyntheticCounts,
    DEFAULT_SNAPSHOT_EVERY, MANIFEST_FORMAT, MANIFEST_VERSION,
};
pub use record::{ImageRecord, Source, Status};
pub use split::{mix, split_counts, stratified_split, ClassCounts, Labeled, MixSelection, Split, SplitSpec};
pub use standardize::{resize_nearest, standardize, upscaled_size, StandardizeMode, MIN_SIDE_PX};

#[derive(Debug, Error, PartialEq)]
pub enum CuratorError {
    #[error("degenerate image {width}x{height}: both sides must be at least {MIN_SIDE_PX} px")]
    Degenerate { width: u32, height: u32 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid label {0}")]
    InvalidLabel(u8),
    #[error("infeasible split: {0}")]
    Infeasible(String),
    #[error("{pool} pool short: need {needed}, have {available}")]
    PoolShortfall { pool: String, needed: usize, available: usize },
}
