//! Confidence routing, label assignment and the human review queue.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::scorer::confidence;

pub const DEFAULT_LEASE_MS: u64 = 300_000;

#[derive(Debug, Error, PartialEq)]
pub enum RouterError {
    #[error("invalid routing config: {0}")]
    InvalidConfig(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    #[serde(alias = "tau_A")]
    pub tau_a: f64,
    #[serde(alias = "tau_R")]
    pub tau_r: f64,
    pub tau_q: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self { tau_a: 0.95, tau_r: 0.6, tau_q: 0.5 }
    }
}

impl RoutingConfig {
    pub fn new(tau_a: f64, tau_r: f64, tau_q: f64) -> Result<Self, RouterError> {
        let c = Self { tau_a, tau_r, tau_q };
        c.validate()?;
        Ok(c)
    }

    /// `0.5 <= tau_r < tau_a <= 1` and `0 <= tau_q <= 1`.
    pub fn validate(&self) -> Result<(), RouterError> {
        if !(0.5 <= self.tau_r && self.tau_r < self.tau_a && self.tau_a <= 1.0) {
            return Err(RouterError::InvalidConfig(format!(
                "need 0.5 <= tau_R < tau_A <= 1, got tau_R={} tau_A={}",
                self.tau_r, self.tau_a
            )));
        }
        if !(0.0..=1.0).contains(&self.tau_q) {
            return Err(RouterError::InvalidConfig(format!("tau_q {} outside [0, 1]", self.tau_q)));
        }
        Ok(())
    }
}

/// Auto-accept, human review, or drop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Route {
    A,
    R,
    D,
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::A => "A",
            Route::R => "R",
            Route::D => "D",
        })
    }
}

pub fn route(q: f64, c: f64, config: &RoutingConfig) -> Route {
    if q >= config.tau_q && c >= config.tau_a {
        Route::A
    } else if q >= config.tau_q && c >= config.tau_r {
        Route::R
    } else {
        Route::D
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub decision: Route,
    pub q: f64,
    pub c: f64,
    pub f: f64,
    pub timestamp_ms: u64,
}

/// Routes a frame from its gate score and posterior.
pub fn decide(q: f64, f: f64, config: &RoutingConfig, timestamp_ms: u64) -> RouteDecision {
    let c = confidence(f);
    RouteDecision { decision: route(q, c, config), q, c, f, timestamp_ms }
}

/// A reviewer's verdict: bubble (1), no bubble (0), or not a usable frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HumanVerdict {
    Label(u8),
    Unqualified,
}

impl HumanVerdict {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "0" => Some(Self::Label(0)),
            "1" => Some(Self::Label(1)),
            s if s.eq_ignore_ascii_case("unqualified") || s.eq_ignore_ascii_case("x") => Some(Self::Unqualified),
            _ => None,
        }
    }

    pub fn label(&self) -> Option<u8> {
        match self {
            Self::Label(y) => Some(*y),
            Self::Unqualified => None,
        }
    }
}

impl fmt::Display for HumanVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Label(y) => write!(f, "{y}"),
            Self::Unqualified => f.write_str("UNQUALIFIED"),
        }
    }
}

impl Serialize for HumanVerdict {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Label(y) => s.serialize_u8(*y),
            Self::Unqualified => s.serialize_str("UNQUALIFIED"),
        }
    }
}

impl<'de> Deserialize<'de> for HumanVerdict {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        let bad = || serde::de::Error::custom("label must be 0, 1 or \"UNQUALIFIED\"");
        match Raw::deserialize(d)? {
            Raw::Num(n @ (0 | 1)) => Ok(Self::Label(n as u8)),
            Raw::Num(_) => Err(bad()),
            Raw::Text(t) if t == "UNQUALIFIED" => Ok(Self::Unqualified),
            Raw::Text(t) => match t.as_str() {
                "0" => Ok(Self::Label(0)),
                "1" => Ok(Self::Label(1)),
                _ => Err(bad()),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssignedLabel {
    Label(u8),
    /// Human marked the frame unusable; the record is dropped.
    Unqualified,
    /// Review-routed and still waiting for a human.
    Pending,
}

/// `A -> 1[f >= 0.5]`, `R -> human verdict`.
pub fn assign_label(decision: &RouteDecision, human: Option<HumanVerdict>) -> Result<AssignedLabel, RouterError> {
    match (decision.decision, human) {
        (Route::A, None) => Ok(AssignedLabel::Label((decision.f >= 0.5) as u8)),
        (Route::A, Some(_)) => Err(RouterError::Contract("auto-accepted frame given a human label".into())),
        (Route::R, None) => Ok(AssignedLabel::Pending),
        (Route::R, Some(HumanVerdict::Label(y))) => Ok(AssignedLabel::Label(y)),
        (Route::R, Some(HumanVerdict::Unqualified)) => Ok(AssignedLabel::Unqualified),
        (Route::D, _) => Err(RouterError::Contract("dropped frames receive no label".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ItemState {
    Pending,
    Claimed,
    Resolved,
}

/// Why an item is in the queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReviewKind {
    Borderline,
    SpotCheck,
    Reopened,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub record_id: String,
    pub image_path: String,
    pub f: f64,
    pub q: f64,
    pub kind: ReviewKind,
    pub enqueued_at_ms: u64,
    pub state: ItemState,
    pub claimant: Option<String>,
    pub lease_expiry_ms: Option<u64>,
    pub human_label: Option<HumanVerdict>,
}

impl ReviewItem {
    pub fn new(record_id: impl Into<String>, image_path: impl Into<String>, f: f64, q: f64, kind: ReviewKind, now_ms: u64) -> Self {
        Self {
            record_id: record_id.into(),
            image_path: image_path.into(),
            f,
            q,
            kind,
            enqueued_at_ms: now_ms,
            state: ItemState::Pending,
            claimant: None,
            lease_expiry_ms: None,
            human_label: None,
        }
    }

    /// State as seen at `now_ms`: an expired claim counts as pending.
    pub fn state_at(&self, now_ms: u64) -> ItemState {
        match (self.state, self.lease_expiry_ms) {
            (ItemState::Claimed, Some(exp)) if now_ms >= exp => ItemState::Pending,
            (s, _) => s,
        }
    }

    /// Copy with the lease view applied at `now_ms`.
    pub fn view_at(&self, now_ms: u64) -> ReviewItem {
        let mut v = self.clone();
        if v.state_at(now_ms) != v.state {
            v.state = ItemState::Pending;
            v.claimant = None;
            v.lease_expiry_ms = None;
        }
        v
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueueError {
    #[error("no review item {0}")]
    UnknownItem(String),
    #[error("item {0} is already queued")]
    Duplicate(String),
    #[error("item {id} is claimed by another reviewer until {until_ms}")]
    Conflict { id: String, until_ms: u64 },
    #[error("item {id} is not claimed by {reviewer}")]
    NotClaimant { id: String, reviewer: String },
    #[error("item {0} is already resolved")]
    AlreadyResolved(String),
    #[error("lease must be positive")]
    InvalidLease,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueCounts {
    pub enqueued: usize,
    pub pending: usize,
    pub claimed: usize,
    pub resolved: usize,
}

/// Review queue state machine. Time is always passed in; the caller owns
/// the clock and the serialization point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewQueue {
    items: BTreeMap<String, ReviewItem>,
    /// Enqueue order, for FIFO claiming.
    order: Vec<String>,
}

impl ReviewQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&mut self, item: ReviewItem) -> Result<(), QueueError> {
        match self.items.get(&item.record_id) {
            Some(existing) if existing.state != ItemState::Resolved => {
                return Err(QueueError::Duplicate(item.record_id));
            }
            Some(_) => {
                // re-opened: keep its place at the back of the line
                self.order.retain(|id| id != &item.record_id);
            }
            None => {}
        }
        self.order.push(item.record_id.clone());
        self.items.insert(item.record_id.clone(), item);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ReviewItem> {
        self.items.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.items.contains_key(id)
    }

    /// Items in enqueue order, optionally filtered by their state at `now_ms`.
    pub fn list(&self, state: Option<ItemState>, now_ms: u64) -> Vec<ReviewItem> {
        self.order
            .iter()
            .map(|id| self.items[id].view_at(now_ms))
            .filter(|it| state.is_none_or(|s| it.state == s))
            .collect()
    }

    pub fn claim(&mut self, id: &str, reviewer: &str, now_ms: u64, lease_ms: u64) -> Result<ReviewItem, QueueError> {
        if lease_ms == 0 {
            return Err(QueueError::InvalidLease);
        }
        let item = self.items.get_mut(id).ok_or_else(|| QueueError::UnknownItem(id.into()))?;
        match item.state_at(now_ms) {
            ItemState::Resolved => return Err(QueueError::AlreadyResolved(id.into())),
            ItemState::Claimed if item.claimant.as_deref() != Some(reviewer) => {
                return Err(QueueError::Conflict { id: id.into(), until_ms: item.lease_expiry_ms.unwrap_or(0) });
            }
            _ => {}
        }
        item.state = ItemState::Claimed;
        item.claimant = Some(reviewer.into());
        item.lease_expiry_ms = Some(now_ms + lease_ms);
        Ok(item.clone())
    }

    /// Oldest claimable item, claimed for `reviewer`.
    pub fn next_claimable(&self, now_ms: u64) -> Option<String> {
        self.order.iter().find(|id| self.items[*id].state_at(now_ms) == ItemState::Pending).cloned()
    }

    /// Gives up a claim before the lease runs out.
    pub fn release(&mut self, id: &str, reviewer: &str, now_ms: u64) -> Result<ReviewItem, QueueError> {
        let item = self.items.get_mut(id).ok_or_else(|| QueueError::UnknownItem(id.into()))?;
        Self::check_claimant(item, id, reviewer, now_ms)?;
        item.state = ItemState::Pending;
        item.claimant = None;
        item.lease_expiry_ms = None;
        Ok(item.clone())
    }

    pub fn submit(&mut self, id: &str, reviewer: &str, verdict: HumanVerdict, now_ms: u64) -> Result<ReviewItem, QueueError> {
        let item = self.items.get_mut(id).ok_or_else(|| QueueError::UnknownItem(id.into()))?;
        Self::check_claimant(item, id, reviewer, now_ms)?;
        item.state = ItemState::Resolved;
        item.human_label = Some(verdict);
        item.lease_expiry_ms = None;
        Ok(item.clone())
    }

    fn check_claimant(item: &ReviewItem, id: &str, reviewer: &str, now_ms: u64) -> Result<(), QueueError> {
        match item.state_at(now_ms) {
            ItemState::Resolved => Err(QueueError::AlreadyResolved(id.into())),
            ItemState::Claimed if item.claimant.as_deref() == Some(reviewer) => Ok(()),
            _ => Err(QueueError::NotClaimant { id: id.into(), reviewer: reviewer.into() }),
        }
    }

    pub fn counts(&self, now_ms: u64) -> QueueCounts {
        let mut c = QueueCounts { enqueued: self.items.len(), ..QueueCounts::default() };
        for it in self.items.values() {
            match it.state_at(now_ms) {
                ItemState::Pending => c.pending += 1,
                ItemState::Claimed => c.claimed += 1,
                ItemState::Resolved => c.resolved += 1,
            }
        }
        c
    }
}
