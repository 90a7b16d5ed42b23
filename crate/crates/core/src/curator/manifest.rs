//! Append-only dataset manifest.
//!
//! The log is one JSON event per line. Record state, the review queue, the
//! split and the mix are a fold over the events; a snapshot file next to
//! the log caches the folded state together with the digest of the log
//! prefix it covers.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::record::{ImageRecord, Source, Status};
use super::split::{ClassCounts, Split, SplitSpec};
use crate::router::{HumanVerdict, ItemState, QueueCounts, QueueError, ReviewItem, ReviewKind, ReviewQueue, Route, RoutingConfig};
use crate::scorer::confidence;
use crate::synth::{ConsistencyConfig, Verdict};

pub const MANIFEST_FORMAT: &str = "tipqc-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_SNAPSHOT_EVERY: u64 = 1000;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("manifest already exists at {0}")]
    Exists(PathBuf),
    #[error("unsupported manifest format {format} v{version}")]
    Version { format: String, version: u32 },
    #[error("unknown record {0}")]
    UnknownRecord(String),
    #[error("record {0} already exists")]
    DuplicateRecord(String),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error("rejected event: {0}")]
    Rejected(String),
    #[error("manifest write failed earlier; reopen it")]
    Poisoned,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub ts_ms: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    Created {
        format: String,
        version: u32,
        seed: u64,
    },
    /// A new record with its gate, scores and routing or filter verdict.
    /// The thresholds in force are kept for provenance.
    Ingested {
        record: Box<ImageRecord>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        routing: Option<RoutingConfig>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        consistency: Option<ConsistencyConfig>,
    },
    Claimed {
        record_id: String,
        reviewer: String,
        lease_ms: u64,
    },
    Released {
        record_id: String,
        reviewer: String,
    },
    HumanLabeled {
        record_id: String,
        reviewer: String,
        label: HumanVerdict,
    },
    /// Puts a resolved item back in the queue and clears its human label.
    Reopened {
        record_id: String,
    },
    /// New posterior from a retrained scorer; the original routing decision
    /// is kept.
    Rescored {
        record_id: String,
        f: f64,
        scorer_id: String,
    },
    /// Ingest that failed inside the pipeline after the request was
    /// accepted. No record is created.
    IngestFailed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source_hint: Option<String>,
        error: String,
    },
    SplitAssigned {
        spec: SplitSpec,
        seed: u64,
        assignment: BTreeMap<String, Split>,
    },
    Mixed {
        budget: usize,
        synthetic_fraction: f64,
        seed: u64,
        real: Vec<String>,
        syn: Vec<String>,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Created { .. } => "created",
            EventKind::Ingested { .. } => "ingested",
            EventKind::Claimed { .. } => "claimed",
            EventKind::Released { .. } => "released",
            EventKind::HumanLabeled { .. } => "human_labeled",
            EventKind::Reopened { .. } => "reopened",
            EventKind::Rescored { .. } => "rescored",
            EventKind::IngestFailed { .. } => "ingest_failed",
            EventKind::SplitAssigned { .. } => "split_assigned",
            EventKind::Mixed { .. } => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitState {
    pub spec: SplitSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixState {
    pub budget: usize,
    pub synthetic_fraction: f64,
    pub seed: u64,
    pub real: Vec<String>,
    pub syn: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestState {
    pub seed: u64,
    pub events: u64,
    pub last_ts_ms: u64,
    pub records: BTreeMap<String, ImageRecord>,
    pub queue: ReviewQueue,
    pub split: Option<SplitState>,
    pub mix: Option<MixState>,
    pub human_label_events: u64,
    pub ingest_failures: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteCounts {
    #[serde(rename = "A")]
    pub a: usize,
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(rename = "D")]
    pub d: usize,
}

impl RouteCounts {
    pub fn total(&self) -> usize {
        self.a + self.r + self.d
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticCounts {
    pub total: usize,
    pub auto_kept: usize,
    pub spot_pending: usize,
    pub spot_recovered: usize,
    pub spot_rejected: usize,
    pub in_dsyn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub events: u64,
    pub records: usize,
    pub real: usize,
    pub r#virtual: usize,
    pub dropped: usize,
    pub routes: RouteCounts,
    pub queue: QueueCounts,
    pub human_label_events: u64,
    pub ingest_failures: u64,
    /// Resolved over enqueued.
    pub review_rate: Option<f64>,
    /// Human-resolved real records over routed real records.
    pub audit_fraction: Option<f64>,
    /// Labeled, active real records over routed real records.
    pub real_acceptance_rate: Option<f64>,
    pub synthetic: SyntheticCounts,
    /// Automatically kept over generated.
    pub synthetic_acceptance_rate: Option<f64>,
    pub labeled: ClassCounts,
    pub splits: BTreeMap<Split, ClassCounts>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// One row of the training listing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListingRow {
    pub path: String,
    pub final_label: u8,
    pub source: Source,
    pub record_id: String,
}

impl ManifestState {
    pub fn record(&self, id: &str) -> Result<&ImageRecord, ManifestError> {
        self.records.get(id).ok_or_else(|| ManifestError::UnknownRecord(id.into()))
    }

    fn record_mut(&mut self, id: &str) -> Result<&mut ImageRecord, ManifestError> {
        self.records.get_mut(id).ok_or_else(|| ManifestError::UnknownRecord(id.into()))
    }

    /// Next sequential id; ids are never reused.
    pub fn next_record_id(&self, prefix: &str) -> String {
        format!("{prefix}-{:06}", self.records.len() + 1)
    }

    /// Folds one event. Every check runs before any mutation, so a rejected
    /// event leaves the state untouched.
    pub fn apply(&mut self, ev: &Event) -> Result<(), ManifestError> {
        if ev.seq != self.events {
            return Err(ManifestError::Rejected(format!("expected seq {}, got {}", self.events, ev.seq)));
        }
        let now = ev.ts_ms;
        match &ev.kind {
            EventKind::Created { format, version, seed } => {
                if ev.seq != 0 {
                    return Err(ManifestError::Rejected("created must be the first event".into()));
                }
                if format != MANIFEST_FORMAT || *version != MANIFEST_VERSION {
                    return Err(ManifestError::Version { format: format.clone(), version: *version });
                }
                self.seed = *seed;
            }
            _ if ev.seq == 0 => return Err(ManifestError::Rejected("first event must be created".into())),
            EventKind::Ingested { record, .. } => {
                if self.records.contains_key(&record.record_id) {
                    return Err(ManifestError::DuplicateRecord(record.record_id.clone()));
                }
                let mut rec = (**record).clone();
                rec.split = Split::None;
                rec.human_label = None;
                rec.refresh();
                let kind = match rec.source {
                    Source::Real if rec.route.map(|r| r.decision) == Some(Route::R) => Some(ReviewKind::Borderline),
                    Source::Virtual if rec.synth_verdict == Some(Verdict::SpotCheckPending) => Some(ReviewKind::SpotCheck),
                    _ => None,
                };
                if let Some(kind) = kind {
                    let q = rec.gate.as_ref().map(|g| g.q).or(rec.route.map(|r| r.q)).unwrap_or(0.0);
                    let item = ReviewItem::new(&rec.record_id, &rec.image_path, rec.f.unwrap_or(f64::NAN), q, kind, now);
                    self.queue.enqueue(item)?;
                }
                self.records.insert(rec.record_id.clone(), rec);
            }
            EventKind::Claimed { record_id, reviewer, lease_ms } => {
                self.record(record_id)?;
                self.queue.claim(record_id, reviewer, now, *lease_ms)?;
            }
            EventKind::Released { record_id, reviewer } => {
                self.record(record_id)?;
                self.queue.release(record_id, reviewer, now)?;
            }
            EventKind::HumanLabeled { record_id, reviewer, label } => {
                self.record(record_id)?;
                self.queue.submit(record_id, reviewer, *label, now)?;
                let rec = self.record_mut(record_id)?;
                rec.human_label = Some(*label);
                if rec.source == Source::Virtual {
                    let approved = label.label().is_some() && label.label() == rec.intended_label;
                    rec.synth_verdict = Some(if approved { Verdict::SpotRecovered } else { Verdict::SpotRejected });
                }
                rec.refresh();
                self.human_label_events += 1;
            }
            EventKind::Reopened { record_id } => {
                let rec = self.record(record_id)?;
                match self.queue.get(record_id) {
                    Some(it) if it.state == ItemState::Resolved => {}
                    _ => return Err(ManifestError::Rejected(format!("{record_id} has no resolved review to reopen"))),
                }
                let q = rec.gate.as_ref().map(|g| g.q).unwrap_or(0.0);
                let item = ReviewItem::new(record_id, &rec.image_path, rec.f.unwrap_or(f64::NAN), q, ReviewKind::Reopened, now);
                self.queue.enqueue(item)?;
                let rec = self.record_mut(record_id)?;
                rec.human_label = None;
                if rec.source == Source::Virtual {
                    rec.synth_verdict = Some(Verdict::SpotCheckPending);
                }
                rec.refresh();
            }
            EventKind::Rescored { record_id, f, scorer_id } => {
                let rec = self.record(record_id)?;
                if rec.source != Source::Real {
                    return Err(ManifestError::Rejected(format!("{record_id} is not a real record")));
                }
                if !(0.0..=1.0).contains(f) {
                    return Err(ManifestError::Rejected(format!("posterior {f} outside [0, 1]")));
                }
                let rec = self.record_mut(record_id)?;
                rec.f = Some(*f);
                rec.c = Some(confidence(*f));
                rec.scorer_id = Some(scorer_id.clone());
                rec.refresh();
            }
            EventKind::IngestFailed { .. } => self.ingest_failures += 1,
            EventKind::SplitAssigned { spec, seed, assignment } => {
                for (id, s) in assignment {
                    let rec = self.record(id)?;
                    if *s == Split::None {
                        continue;
                    }
                    if !rec.usable() {
                        return Err(ManifestError::Rejected(format!("{id} is not an active labeled record")));
                    }
                    if rec.source == Source::Virtual && *s != Split::Train {
                        return Err(ManifestError::Rejected(format!("virtual record {id} cannot be in {s:?}")));
                    }
                }
                for rec in self.records.values_mut() {
                    rec.split = assignment.get(&rec.record_id).copied().unwrap_or(Split::None);
                }
                self.split = Some(SplitState { spec: *spec, seed: *seed });
                self.mix = None;
            }
            EventKind::Mixed { budget, synthetic_fraction, seed, real, syn } => {
                if real.len() + syn.len() != *budget {
                    return Err(ManifestError::Rejected(format!("mix of {} records for budget {budget}", real.len() + syn.len())));
                }
                for (ids, source) in [(real, Source::Real), (syn, Source::Virtual)] {
                    for id in ids {
                        let rec = self.record(id)?;
                        if rec.source != source || !rec.usable() || rec.split != Split::Train {
                            return Err(ManifestError::Rejected(format!("{id} is not an active {source:?} training record")));
                        }
                    }
                }
                self.mix = Some(MixState {
                    budget: *budget,
                    synthetic_fraction: *synthetic_fraction,
                    seed: *seed,
                    real: real.clone(),
                    syn: syn.clone(),
                });
            }
        }
        self.events += 1;
        self.last_ts_ms = now;
        Ok(())
    }

    pub fn stats(&self, now_ms: u64) -> ManifestStats {
        let mut routes = RouteCounts::default();
        let mut synthetic = SyntheticCounts::default();
        let (mut real, mut dropped, mut real_usable, mut real_audited) = (0, 0, 0, 0);
        let mut labeled = ClassCounts::default();
        let mut splits: BTreeMap<Split, ClassCounts> = BTreeMap::new();
        for rec in self.records.values() {
            if rec.status == Status::Dropped {
                dropped += 1;
            }
            if let Some(y) = rec.final_label.filter(|_| rec.status == Status::Active) {
                let bump = |c: &mut ClassCounts| if y == 1 { c.bubble += 1 } else { c.no_bubble += 1 };
                bump(&mut labeled);
                bump(splits.entry(rec.split).or_default());
            }
            match rec.source {
                Source::Real => {
                    real += 1;
                    match rec.route.map(|r| r.decision) {
                        Some(Route::A) => routes.a += 1,
                        Some(Route::R) => routes.r += 1,
                        Some(Route::D) => routes.d += 1,
                        None => {}
                    }
                    if rec.route.is_some() && rec.usable() {
                        real_usable += 1;
                    }
                    if self.queue.get(&rec.record_id).is_some_and(|it| it.state == ItemState::Resolved) {
                        real_audited += 1;
                    }
                }
                Source::Virtual => {
                    synthetic.total += 1;
                    if rec.auto_keep == Some(true) {
                        synthetic.auto_kept += 1;
                    }
                    match rec.synth_verdict {
                        Some(Verdict::SpotCheckPending) => synthetic.spot_pending += 1,
                        Some(Verdict::SpotRecovered) => synthetic.spot_recovered += 1,
                        Some(Verdict::SpotRejected) => synthetic.spot_rejected += 1,
                        _ => {}
                    }
                    if rec.synth_verdict.is_some_and(|v| v.in_dsyn()) {
                        synthetic.in_dsyn += 1;
                    }
                }
            }
        }
        let queue = self.queue.counts(now_ms);
        ManifestStats {
            events: self.events,
            records: self.records.len(),
            real,
            r#virtual: synthetic.total,
            dropped,
            routes,
            queue,
            human_label_events: self.human_label_events,
            ingest_failures: self.ingest_failures,
            review_rate: ratio(queue.resolved, queue.enqueued),
            audit_fraction: ratio(real_audited, routes.total()),
            real_acceptance_rate: ratio(real_usable, routes.total()),
            synthetic,
            synthetic_acceptance_rate: ratio(synthetic.auto_kept, synthetic.total),
            labeled,
            splits,
        }
    }

    /// Active labeled records, optionally restricted to one split, in id order.
    pub fn listing(&self, split: Option<Split>) -> Vec<ListingRow> {
        self.records
            .values()
            .filter(|r| r.usable() && split.is_none_or(|s| r.split == s))
            .map(row)
            .collect()
    }

    /// The current mix selection, real records first.
    pub fn mix_listing(&self) -> Option<Vec<ListingRow>> {
        let mix = self.mix.as_ref()?;
        Some(mix.real.iter().chain(&mix.syn).filter_map(|id| self.records.get(id)).map(row).collect())
    }

    /// Canonical serialization used for replay comparisons.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("state serializes")
    }
}

fn row(r: &ImageRecord) -> ListingRow {
    ListingRow {
        path: r.image_path.clone(),
        final_label: r.final_label.unwrap_or(0),
        source: r.source,
        record_id: r.record_id.clone(),
    }
}

/// `path<TAB>final_label<TAB>source<TAB>record_id` lines.
pub fn format_listing(rows: &[ListingRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let src = match r.source {
            Source::Real => "REAL",
            Source::Virtual => "VIRTUAL",
        };
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.path, r.final_label, src, r.record_id));
    }
    out
}

pub fn parse_listing(text: &str) -> Result<Vec<ListingRow>, ManifestError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| ManifestError::Corrupt { line: i + 1, message: m.into() };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(bad("expected path, label and source columns"));
        }
        let final_label = match cols[1] {
            "0" => 0,
            "1" => 1,
            _ => return Err(bad("label must be 0 or 1")),
        };
        let source = match cols[2] {
            "REAL" => Source::Real,
            "VIRTUAL" => Source::Virtual,
            _ => return Err(bad("source must be REAL or VIRTUAL")),
        };
        rows.push(ListingRow {
            path: cols[0].into(),
            final_label,
            source,
            record_id: cols.get(3).unwrap_or(&"").to_string(),
        });
    }
    Ok(rows)
}

/// Parses a log into events, checking line syntax only.
pub fn parse_events(text: &str) -> Result<Vec<Event>, ManifestError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ManifestError::Corrupt { line: i + 1, message: e.to_string() }))
        .collect()
}

/// Folds events from an empty state.
pub fn fold<'a>(events: impl IntoIterator<Item = &'a Event>) -> Result<ManifestState, ManifestError> {
    let mut st = ManifestState::default();
    for ev in events {
        st.apply(ev).map_err(|e| ManifestError::Corrupt { line: ev.seq as usize + 1, message: e.to_string() })?;
    }
    Ok(st)
}

/// Full replay of a log file, ignoring any snapshot.
pub fn replay(path: &Path) -> Result<ManifestState, ManifestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    fold(&parse_events(&text)?)
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    log_len: u64,
    log_sha256: String,
    state: ManifestState,
}

pub fn snapshot_path(log: &Path) -> PathBuf {
    let mut s = log.as_os_str().to_owned();
    s.push(".snapshot");
    PathBuf::from(s)
}

enum Sink {
    File { path: PathBuf, file: File },
    Memory(Vec<u8>),
}

/// The single writer. Each commit folds the event into the state, then
/// appends it to the log.
pub struct Manifest {
    sink: Sink,
    state: ManifestState,
    log_len: u64,
    hasher: Sha256,
    snapshot_every: u64,
    poisoned: bool,
}

impl Manifest {
    pub fn in_memory(seed: u64, ts_ms: u64) -> Self {
        let mut m = Self::with_sink(Sink::Memory(Vec::new()), ManifestState::default(), 0, Sha256::new());
        m.commit(ts_ms, created(seed)).expect("fresh manifest accepts created");
        m
    }

    pub fn create(path: &Path, seed: u64, ts_ms: u64) -> Result<Self, ManifestError> {
        if path.exists() {
            return Err(ManifestError::Exists(path.to_path_buf()));
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = OpenOptions::new().create_new(true).append(true).open(path).map_err(io_err(path))?;
        let _ = fs::remove_file(snapshot_path(path));
        let mut m = Self::with_sink(Sink::File { path: path.to_path_buf(), file }, ManifestState::default(), 0, Sha256::new());
        m.commit(ts_ms, created(seed))?;
        Ok(m)
    }

    /// Opens an existing log, resuming from the snapshot when it matches the
    /// log prefix.
    pub fn open(path: &Path) -> Result<Self, ManifestError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let (mut state, mut hasher, start) = match load_snapshot(path, &bytes) {
            Some(s) => {
                let mut h = Sha256::new();
                h.update(&bytes[..s.log_len as usize]);
                (s.state, h, s.log_len as usize)
            }
            None => (ManifestState::default(), Sha256::new(), 0),
        };
        let tail = std::str::from_utf8(&bytes[start..]).map_err(|e| ManifestError::Corrupt { line: 0, message: e.to_string() })?;
        if !tail.is_empty() && !tail.ends_with('\n') {
            let line = state.events as usize + tail.lines().count();
            return Err(ManifestError::Corrupt { line, message: "truncated final line".into() });
        }
        for ev in parse_events(tail)? {
            state.apply(&ev).map_err(|e| ManifestError::Corrupt { line: ev.seq as usize + 1, message: e.to_string() })?;
        }
        if state.events == 0 {
            return Err(ManifestError::Corrupt { line: 1, message: "empty manifest".into() });
        }
        hasher.update(&bytes[start..]);
        let file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        Ok(Self::with_sink(Sink::File { path: path.to_path_buf(), file }, state, bytes.len() as u64, hasher))
    }

    pub fn open_or_create(path: &Path, seed: u64, ts_ms: u64) -> Result<Self, ManifestError> {
        if path.exists() {
            Self::open(path)
        } else {
            Self::create(path, seed, ts_ms)
        }
    }

    fn with_sink(sink: Sink, state: ManifestState, log_len: u64, hasher: Sha256) -> Self {
        Self { sink, state, log_len, hasher, snapshot_every: DEFAULT_SNAPSHOT_EVERY, poisoned: false }
    }

    /// Snapshot cadence in events; 0 disables automatic snapshots.
    pub fn set_snapshot_every(&mut self, n: u64) {
        self.snapshot_every = n;
    }

    pub fn state(&self) -> &ManifestState {
        &self.state
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.sink {
            Sink::File { path, .. } => Some(path),
            Sink::Memory(_) => None,
        }
    }

    /// Log text of an in-memory manifest.
    pub fn memory_log(&self) -> Option<&str> {
        match &self.sink {
            Sink::Memory(b) => Some(std::str::from_utf8(b).expect("utf-8 log")),
            Sink::File { .. } => None,
        }
    }

    /// Validates and applies the event, then appends it. A failed append
    /// poisons the writer.
    pub fn commit(&mut self, ts_ms: u64, kind: EventKind) -> Result<Event, ManifestError> {
        if self.poisoned {
            return Err(ManifestError::Poisoned);
        }
        let ev = Event { seq: self.state.events, ts_ms, kind };
        let mut line = serde_json::to_string(&ev).expect("event serializes");
        line.push('\n');
        self.state.apply(&ev)?;
        let written = match &mut self.sink {
            Sink::File { path, file } => file.write_all(line.as_bytes()).map_err(io_err(path)),
            Sink::Memory(buf) => {
                buf.extend_from_slice(line.as_bytes());
                Ok(())
            }
        };
        if let Err(e) = written {
            self.poisoned = true;
            return Err(e);
        }
        self.hasher.update(line.as_bytes());
        self.log_len += line.len() as u64;
        if self.snapshot_every > 0 && self.state.events % self.snapshot_every == 0 {
            self.snapshot()?;
        }
        Ok(ev)
    }

    /// Writes the snapshot file atomically. No-op in memory.
    pub fn snapshot(&mut self) -> Result<(), ManifestError> {
        let Sink::File { path, file } = &self.sink else {
            return Ok(());
        };
        file.sync_data().map_err(io_err(path))?;
        let snap = Snapshot {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            log_len: self.log_len,
            log_sha256: hex::encode(self.hasher.clone().finalize()),
            state: self.state.clone(),
        };
        let target = snapshot_path(path);
        let mut tmp = target.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        fs::write(&tmp, serde_json::to_vec(&snap).expect("snapshot serializes")).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &target).map_err(io_err(&target))?;
        Ok(())
    }
}

fn created(seed: u64) -> EventKind {
    EventKind::Created { format: MANIFEST_FORMAT.into(), version: MANIFEST_VERSION, seed }
}

fn load_snapshot(log: &Path, bytes: &[u8]) -> Option<Snapshot> {
    let raw = fs::read(snapshot_path(log)).ok()?;
    let snap: Snapshot = serde_json::from_slice(&raw).ok()?;
    if snap.format != MANIFEST_FORMAT || snap.version != MANIFEST_VERSION || snap.log_len as usize > bytes.len() {
        return None;
    }
    let digest = hex::encode(Sha256::digest(&bytes[..snap.log_len as usize]));
    (digest == snap.log_sha256).then_some(snap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::{decide, DEFAULT_LEASE_MS};

    fn real(id: &str, q: f64, f: f64) -> EventKind {
        let mut r = ImageRecord::real(id, format!("{id}.png"), "00", 0);
        r.f = Some(f);
        r.c = Some(confidence(f));
        r.route = Some(decide(q, f, &RoutingConfig::default(), 0));
        EventKind::Ingested { record: Box::new(r), routing: Some(RoutingConfig::default()), consistency: None }
    }

    fn label(id: &str, y: HumanVerdict) -> EventKind {
        EventKind::HumanLabeled { record_id: id.into(), reviewer: "ann".into(), label: y }
    }

    fn claim(id: &str) -> EventKind {
        EventKind::Claimed { record_id: id.into(), reviewer: "ann".into(), lease_ms: DEFAULT_LEASE_MS }
    }

    #[test]
    fn review_lineage_and_stats() {
        let mut m = Manifest::in_memory(1, 0);
        m.commit(1, real("a", 0.9, 0.99)).unwrap();
        m.commit(2, real("b", 0.9, 0.7)).unwrap();
        m.commit(3, real("c", 0.1, 0.5)).unwrap();
        assert!(m.commit(4, label("b", HumanVerdict::Label(1))).is_err(), "label without claim");
        m.commit(5, claim("b")).unwrap();
        m.commit(6, label("b", HumanVerdict::Label(1))).unwrap();
        let b = m.state().record("b").unwrap();
        assert_eq!((b.human_label, b.final_label), (Some(HumanVerdict::Label(1)), Some(1)));
        let s = m.state().stats(10);
        assert_eq!(s.routes, RouteCounts { a: 1, r: 1, d: 1 });
        assert_eq!((s.queue.enqueued, s.queue.resolved), (1, 1));
        assert_eq!(s.review_rate, Some(1.0));
        assert_eq!(s.audit_fraction, Some(1.0 / 3.0));
        assert_eq!(s.real_acceptance_rate, Some(2.0 / 3.0));
        assert_eq!(s.events, 6);
    }

    #[test]
    fn rejected_event_is_not_logged() {
        let mut m = Manifest::in_memory(0, 0);
        m.commit(1, real("a", 0.9, 0.99)).unwrap();
        let before = m.memory_log().unwrap().to_string();
        assert!(matches!(m.commit(2, real("a", 0.9, 0.99)), Err(ManifestError::DuplicateRecord(_))));
        assert!(matches!(m.commit(2, claim("zzz")), Err(ManifestError::UnknownRecord(_))));
        assert_eq!(m.memory_log().unwrap(), before);
        assert_eq!(m.state().events, 2);
    }

    #[test]
    fn file_replay_matches_and_snapshot_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut m = Manifest::create(&path, 9, 0).unwrap();
        m.set_snapshot_every(4);
        for i in 0..10 {
            let f = if i % 2 == 0 { 0.99 } else { 0.7 };
            m.commit(i + 1, real(&format!("r{i}"), 0.9, f)).unwrap();
        }
        m.commit(20, claim("r1")).unwrap();
        m.commit(21, label("r1", HumanVerdict::Unqualified)).unwrap();
        let live = m.state().canonical_bytes();
        drop(m);
        assert!(snapshot_path(&path).exists());
        assert_eq!(replay(&path).unwrap().canonical_bytes(), live);
        let reopened = Manifest::open(&path).unwrap();
        assert_eq!(reopened.state().canonical_bytes(), live);
        // a stale snapshot is ignored
        let mut m = reopened;
        m.set_snapshot_every(0);
        m.commit(30, claim("r3")).unwrap();
        let live = m.state().canonical_bytes();
        drop(m);
        assert_eq!(Manifest::open(&path).unwrap().state().canonical_bytes(), live);
    }

    #[test]
    fn split_rules() {
        let mut m = Manifest::in_memory(0, 0);
        m.commit(1, real("a", 0.9, 0.99)).unwrap();
        let mut v = ImageRecord::virtual_("v", "v.png", "00", 0);
        v.intended_label = Some(1);
        v.synth_verdict = Some(Verdict::Kept);
        m.commit(2, EventKind::Ingested { record: Box::new(v), routing: None, consistency: None }).unwrap();
        let split = |pairs: &[(&str, Split)]| EventKind::SplitAssigned {
            spec: SplitSpec::reference(),
            seed: 0,
            assignment: pairs.iter().map(|(k, s)| (k.to_string(), *s)).collect(),
        };
        assert!(m.commit(3, split(&[("a", Split::Test), ("v", Split::Val)])).is_err());
        m.commit(3, split(&[("a", Split::Test), ("v", Split::Train)])).unwrap();
        assert_eq!(m.state().listing(Some(Split::Test)).len(), 1);
        let mix = EventKind::Mixed { budget: 1, synthetic_fraction: 1.0, seed: 0, real: vec![], syn: vec!["v".into()] };
        m.commit(4, mix).unwrap();
        assert_eq!(m.state().mix_listing().unwrap()[0].source, Source::Virtual);
    }

    #[test]
    fn listing_round_trip() {
        let rows = vec![ListingRow { path: "x/a.png".into(), final_label: 1, source: Source::Virtual, record_id: "v-1".into() }];
        assert_eq!(parse_listing(&format_listing(&rows)).unwrap(), rows);
    }
}
