//! One tip image and its label lineage.

use serde::{Deserialize, Serialize};

use super::split::Split;
use crate::gate::GateReport;
use crate::router::{HumanVerdict, Route, RouteDecision};
use crate::synth::Verdict;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Source {
    Real,
    Virtual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Active,
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub record_id: String,
    pub source: Source,
    pub image_path: String,
    /// sha256 of the stored PNG.
    pub digest: String,
    /// Free-form origin supplied at ingest (camera, batch key, file name).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_hint: Option<String>,
    pub gate: Option<GateReport>,
    pub f: Option<f64>,
    pub c: Option<f64>,
    /// Consistency with the intended class, virtual records only.
    pub kappa: Option<f64>,
    pub intended_label: Option<u8>,
    pub auto_label: Option<u8>,
    pub human_label: Option<HumanVerdict>,
    pub final_label: Option<u8>,
    pub route: Option<RouteDecision>,
    pub synth_verdict: Option<Verdict>,
    /// Outcome of the automatic keep rule, virtual records only.
    pub auto_keep: Option<bool>,
    pub split: Split,
    pub status: Status,
    pub scorer_id: Option<String>,
    pub created_ms: u64,
}

impl ImageRecord {
    pub fn real(record_id: impl Into<String>, image_path: impl Into<String>, digest: impl Into<String>, created_ms: u64) -> Self {
        Self::blank(record_id.into(), Source::Real, image_path.into(), digest.into(), created_ms)
    }

    pub fn virtual_(record_id: impl Into<String>, image_path: impl Into<String>, digest: impl Into<String>, created_ms: u64) -> Self {
        Self::blank(record_id.into(), Source::Virtual, image_path.into(), digest.into(), created_ms)
    }

    fn blank(record_id: String, source: Source, image_path: String, digest: String, created_ms: u64) -> Self {
        Self {
            record_id,
            source,
            image_path,
            digest,
            source_hint: None,
            gate: None,
            f: None,
            c: None,
            kappa: None,
            intended_label: None,
            auto_label: None,
            human_label: None,
            final_label: None,
            route: None,
            synth_verdict: None,
            auto_keep: None,
            split: Split::None,
            status: Status::Active,
            scorer_id: None,
            created_ms,
        }
    }

    /// Recomputes `auto_label`, `final_label` and `status` from the rest.
    ///
    /// Real: a human verdict wins over the automatic label; drop-routed and
    /// unqualified frames are dropped. Virtual: the intended label when the
    /// keep verdict admits the image, dropped when it is filtered or
    /// rejected.
    pub fn refresh(&mut self) {
        match self.source {
            Source::Real => {
                let route = self.route.map(|r| r.decision);
                self.auto_label = match (route, self.f) {
                    (Some(Route::A), Some(f)) => Some((f >= 0.5) as u8),
                    _ => None,
                };
                let dropped = route == Some(Route::D) || self.human_label == Some(HumanVerdict::Unqualified);
                self.final_label = if dropped {
                    None
                } else {
                    match self.human_label {
                        Some(HumanVerdict::Label(y)) => Some(y),
                        _ => self.auto_label,
                    }
                };
                self.status = if dropped { Status::Dropped } else { Status::Active };
            }
            Source::Virtual => {
                self.auto_label = None;
                let v = self.synth_verdict;
                self.final_label = if v.is_some_and(|v| v.in_dsyn()) { self.intended_label } else { None };
                self.status = match v {
                    Some(Verdict::Filtered | Verdict::SpotRejected) => Status::Dropped,
                    _ => Status::Active,
                };
            }
        }
    }

    /// Labeled and active: usable for training or evaluation.
    pub fn usable(&self) -> bool {
        self.status == Status::Active && self.final_label.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::{decide, RoutingConfig};

    fn routed(q: f64, f: f64) -> ImageRecord {
        let mut r = ImageRecord::real("r1", "r1.png", "00", 0);
        r.f = Some(f);
        r.route = Some(decide(q, f, &RoutingConfig::default(), 0));
        r.refresh();
        r
    }

    #[test]
    fn real_label_precedence() {
        let a = routed(0.9, 0.99);
        assert_eq!((a.auto_label, a.final_label, a.status), (Some(1), Some(1), Status::Active));
        let mut r = routed(0.9, 0.7);
        assert_eq!((r.auto_label, r.final_label), (None, None));
        r.human_label = Some(HumanVerdict::Label(0));
        r.refresh();
        assert_eq!(r.final_label, Some(0));
        r.human_label = Some(HumanVerdict::Unqualified);
        r.refresh();
        assert_eq!((r.final_label, r.status), (None, Status::Dropped));
        let d = routed(0.1, 0.99);
        assert_eq!((d.final_label, d.status), (None, Status::Dropped));
    }

    #[test]
    fn virtual_label_follows_verdict() {
        let mut v = ImageRecord::virtual_("v1", "v1.png", "00", 0);
        v.intended_label = Some(1);
        for (verdict, label, status) in [
            (Verdict::Kept, Some(1), Status::Active),
            (Verdict::SpotRecovered, Some(1), Status::Active),
            (Verdict::SpotCheckPending, None, Status::Active),
            (Verdict::Filtered, None, Status::Dropped),
            (Verdict::SpotRejected, None, Status::Dropped),
        ] {
            v.synth_verdict = Some(verdict);
            v.refresh();
            assert_eq!((v.final_label, v.status), (label, status), "{verdict:?}");
        }
    }
}
