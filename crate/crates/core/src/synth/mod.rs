//! Virtual track: prompt specs, batch request files, consistency scoring
//! and the keep rule with human spot-checks.

mod batch;
mod mock;

use std::collections::BTreeSet;

use image::GrayImage;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixtures::{MAX_BUBBLES, MIN_BUBBLES, PALETTE};
use crate::gate::{quality_score, GateConfig};
use crate::router::HumanVerdict;
use crate::scorer::Scorer;

pub use batch::{
    build_batch, encode_result_error, encode_result_image, parse_batch, parse_results, BatchLine, Blob, Content,
    FileData, GenerateContentRequest, GenerationConfig, LineError, ParsedResults, Part, ResultImage,
    IMAGE_MIME, REFERENCE_MIME,
};
pub use mock::{MockTransport, Transport};

pub const BUBBLE_TEMPLATE: &str = "Use the provided reference photo of a pipette tip with bubbles to create a photorealistic variation. Only edit the liquid inside the tip. Set the liquid level to ~{level_pct}% of the tip length. Set the liquid color to {liquid_color} with realistic translucency/absorption matching the scene illumination. Insert {bubble_count} small, realistic air bubbles inside the liquid column only; bubbles should be spherical to slightly oblate (~0.2–1.5 mm) with correct refraction, soft internal caustics, and specular highlights consistent with scene lighting. Distribute some near the inner wall/meniscus and some in the central volume. Keep the tip geometry, markings, background, camera viewpoint, exposure, depth-of-field, and sensor noise unchanged. Keep the meniscus physically plausible for the chosen level and color. Do not add foam, droplets on the exterior, text, or artifacts. Preserve the original image resolution (e.g., 600×1500) and cropping. Return only the final edited image; no text output.";

pub const NO_BUBBLE_TEMPLATE: &str = "Use the provided reference photo of a pipette tip to create a photorealistic variation. Only edit the liquid inside the tip. Set the liquid level to ~{level_pct}% of the tip length. Set the liquid color to {liquid_color} with realistic translucency/absorption matching the scene illumination. Remove all air bubbles inside the liquid column; the liquid must be perfectly bubble-free. Keep the tip geometry, markings, background, camera viewpoint, exposure, depth-of-field, and sensor noise unchanged. Keep the meniscus physically plausible for the chosen level and color. Do not add foam, droplets on the exterior, text, or artifacts. Preserve the original image resolution (e.g., 600×1500) and cropping. Return only the final edited image; no text output.";

pub const MIN_LEVEL_PCT: u32 = 20;
pub const MAX_LEVEL_PCT: u32 = 90;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid prompt spec: {0}")]
    InvalidSpec(String),
    #[error("prompt serialization: {0}")]
    Serialization(String),
    #[error("duplicate request key {0}")]
    DuplicateKey(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The class a prompt asks the generator to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Intent {
    Bubble,
    NoBubble,
}

impl Intent {
    pub fn label(&self) -> u8 {
        match self {
            Intent::Bubble => 1,
            Intent::NoBubble => 0,
        }
    }

    pub fn from_label(y: u8) -> Self {
        if y == 1 {
            Intent::Bubble
        } else {
            Intent::NoBubble
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub intent: Intent,
    pub liquid_color: String,
    pub level_pct: u32,
    pub bubble_count: Option<u32>,
    pub reference_uri: String,
    pub request_key: String,
    pub seed_nonce: u64,
}

impl PromptSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        match (self.intent, self.bubble_count) {
            (Intent::Bubble, Some(n)) if (MIN_BUBBLES..=MAX_BUBBLES).contains(&n) => {}
            (Intent::Bubble, Some(n)) => {
                return Err(SynthError::InvalidSpec(format!("bubble count {n} outside [{MIN_BUBBLES}, {MAX_BUBBLES}]")))
            }
            (Intent::Bubble, None) => return Err(SynthError::InvalidSpec("BUBBLE intent needs a bubble count".into())),
            (Intent::NoBubble, Some(_)) => {
                return Err(SynthError::InvalidSpec("NO_BUBBLE intent must not carry a bubble count".into()))
            }
            (Intent::NoBubble, None) => {}
        }
        if self.level_pct > 100 {
            return Err(SynthError::InvalidSpec(format!("level {}% above 100", self.level_pct)));
        }
        if self.liquid_color.trim().is_empty() || self.liquid_color.contains(['{', '}', '\n']) {
            return Err(SynthError::InvalidSpec(format!("bad liquid color {:?}", self.liquid_color)));
        }
        if self.request_key.is_empty() {
            return Err(SynthError::InvalidSpec("empty request key".into()));
        }
        Ok(())
    }

    pub fn intended_label(&self) -> u8 {
        self.intent.label()
    }
}

/// Draws one spec: intent is BUBBLE with probability `intent_mix`, bubble
/// count uniform on 1..=15, level uniform on 20..=90, color and reference
/// uniform.
pub fn sample_prompt_spec(
    rng: &mut impl Rng,
    refs: &[String],
    intent_mix: f64,
    request_key: impl Into<String>,
) -> Result<PromptSpec, SynthError> {
    if refs.is_empty() {
        return Err(SynthError::InvalidConfig("no reference images".into()));
    }
    if !(0.0..=1.0).contains(&intent_mix) {
        return Err(SynthError::InvalidConfig(format!("intent mix {intent_mix} outside [0, 1]")));
    }
    let intent = if rng.random::<f64>() < intent_mix { Intent::Bubble } else { Intent::NoBubble };
    let bubble_count = (intent == Intent::Bubble).then(|| rng.random_range(MIN_BUBBLES..=MAX_BUBBLES));
    let level_pct = rng.random_range(MIN_LEVEL_PCT..=MAX_LEVEL_PCT);
    let liquid_color = PALETTE[rng.random_range(0..PALETTE.len())].0.to_string();
    let reference_uri = refs[rng.random_range(0..refs.len())].clone();
    Ok(PromptSpec {
        intent,
        liquid_color,
        level_pct,
        bubble_count,
        reference_uri,
        request_key: request_key.into(),
        // generator seeds are 32-bit signed
        seed_nonce: rng.random_range(0..=i32::MAX as u64),
    })
}

/// `n` specs with keys `{prefix}-{i:06}` from a seeded stream.
pub fn plan(n: usize, refs: &[String], intent_mix: f64, seed: u64, prefix: &str) -> Result<Vec<PromptSpec>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| sample_prompt_spec(&mut rng, refs, intent_mix, format!("{prefix}-{i:06}"))).collect()
}

/// Substitutes the spec's factors into the matching template.
pub fn render_prompt(spec: &PromptSpec) -> Result<String, SynthError> {
    spec.validate().map_err(|e| SynthError::Serialization(e.to_string()))?;
    let template = match spec.intent {
        Intent::Bubble => BUBBLE_TEMPLATE,
        Intent::NoBubble => NO_BUBBLE_TEMPLATE,
    };
    let mut text = template
        .replace("{level_pct}", &spec.level_pct.to_string())
        .replace("{liquid_color}", &spec.liquid_color);
    if let Some(n) = spec.bubble_count {
        text = text.replace("{bubble_count}", &n.to_string());
    }
    if text.contains('{') {
        return Err(SynthError::Serialization("unfilled placeholder".into()));
    }
    Ok(text)
}

/// Factors recovered from a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptFactors {
    pub intent: Intent,
    pub liquid_color: String,
    pub level_pct: u32,
    pub bubble_count: Option<u32>,
}

/// Matches `text` against a template, returning the placeholder values.
fn match_template(template: &str, text: &str) -> Option<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut rest_t = template;
    let mut rest = text;
    loop {
        match rest_t.find('{') {
            None => return (rest == rest_t).then_some(out),
            Some(open) => {
                let (lit, tail) = rest_t.split_at(open);
                rest = rest.strip_prefix(lit)?;
                let close = tail.find('}')?;
                let name = &tail[1..close];
                rest_t = &tail[close + 1..];
                // value runs to the next literal chunk
                let next_lit = rest_t.split('{').next().unwrap_or("");
                let end = if next_lit.is_empty() { rest.len() } else { rest.find(next_lit)? };
                out.push((name.to_string(), rest[..end].to_string()));
                rest = &rest[end..];
            }
        }
    }
}

/// Inverse of [`render_prompt`].
pub fn parse_prompt(text: &str) -> Option<PromptFactors> {
    let (intent, vals) = match_template(BUBBLE_TEMPLATE, text)
        .map(|v| (Intent::Bubble, v))
        .or_else(|| match_template(NO_BUBBLE_TEMPLATE, text).map(|v| (Intent::NoBubble, v)))?;
    let get = |k: &str| vals.iter().find(|(n, _)| n == k).map(|(_, v)| v.as_str());
    Some(PromptFactors {
        intent,
        liquid_color: get("liquid_color")?.to_string(),
        level_pct: get("level_pct")?.parse().ok()?,
        bubble_count: match get("bubble_count") {
            Some(v) => Some(v.parse().ok()?),
            None => None,
        },
    })
}

/// `kappa = f` for an intended bubble, `1 - f` otherwise.
pub fn consistency(f: f64, intended: u8) -> f64 {
    if intended == 1 {
        f
    } else {
        1.0 - f
    }
}

/// Which candidates the spot-check sample is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpotCheckPool {
    #[default]
    All,
    KeptOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub tau_k: f64,
    pub rho: f64,
    pub seed: u64,
    pub spot_check_pool: SpotCheckPool,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self { tau_k: 0.7, rho: 0.05, seed: 0, spot_check_pool: SpotCheckPool::All }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.tau_k) {
            return Err(SynthError::InvalidConfig(format!("tau_k {} outside [0, 1]", self.tau_k)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(SynthError::InvalidConfig(format!("rho {} outside [0, 1]", self.rho)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Kept,
    Filtered,
    SpotCheckPending,
    SpotRejected,
    SpotRecovered,
}

impl Verdict {
    /// Whether the candidate belongs to the synthetic training set.
    pub fn in_dsyn(&self) -> bool {
        matches!(self, Verdict::Kept | Verdict::SpotRecovered)
    }
}

/// A parsed generator output awaiting filtering.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub key: String,
    pub image_path: String,
    pub intended_label: u8,
    /// Standardized grayscale frame.
    pub image: GrayImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub key: String,
    pub image_path: String,
    pub intended_label: u8,
    pub f: f64,
    pub kappa: f64,
    pub q: f64,
    /// Outcome of the automatic rule alone.
    pub auto_keep: bool,
    pub verdict: Verdict,
}

impl CandidateResult {
    /// Applies a spot-check verdict. The human approves when they confirm
    /// the intended class, and their decision overrides the automatic rule.
    /// Returns whether it overrode the automatic outcome.
    pub fn resolve_spot_check(&mut self, human: HumanVerdict) -> Result<bool, SynthError> {
        if self.verdict != Verdict::SpotCheckPending {
            return Err(SynthError::InvalidSpec(format!("{} is not awaiting a spot-check", self.key)));
        }
        let approved = human.label() == Some(self.intended_label);
        self.verdict = if approved { Verdict::SpotRecovered } else { Verdict::SpotRejected };
        Ok(approved != self.auto_keep)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub total: usize,
    /// Candidates passing `kappa >= tau_k` and `q >= tau_q`.
    pub kept: usize,
    pub filtered: usize,
    pub spot_checks: usize,
    pub acceptance_rate: f64,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub results: Vec<CandidateResult>,
    /// Keys sent to human spot-check, in candidate order.
    pub spot_checks: Vec<String>,
    pub stats: AcceptanceStats,
}

impl FilterOutcome {
    pub fn dsyn(&self) -> impl Iterator<Item = &CandidateResult> {
        self.results.iter().filter(|r| r.verdict.in_dsyn())
    }
}

/// Keep rule `kappa >= tau_k and q >= tau_q`, plus a seeded uniform
/// `round(rho * N)` spot-check sample that is held for a human verdict.
pub fn filter_candidates(
    candidates: &[Candidate],
    scorer: &dyn Scorer,
    gate: &GateConfig,
    config: &ConsistencyConfig,
) -> Result<FilterOutcome, SynthError> {
    config.validate()?;
    gate.validate().map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let mut results: Vec<CandidateResult> = candidates
        .par_iter()
        .map(|c| {
            let q = quality_score(&c.image, gate).map(|r| r.q).unwrap_or(0.0);
            let f = scorer.posterior(&c.image).map_err(|e| SynthError::Transport(format!("{}: {e}", c.key)))?;
            let kappa = consistency(f, c.intended_label);
            let auto_keep = kappa >= config.tau_k && gate.passes(q);
            Ok(CandidateResult {
                key: c.key.clone(),
                image_path: c.image_path.clone(),
                intended_label: c.intended_label,
                f,
                kappa,
                q,
                auto_keep,
                verdict: if auto_keep { Verdict::Kept } else { Verdict::Filtered },
            })
        })
        .collect::<Result<_, SynthError>>()?;

    let pool: Vec<usize> = match config.spot_check_pool {
        SpotCheckPool::All => (0..results.len()).collect(),
        SpotCheckPool::KeptOnly => (0..results.len()).filter(|&i| results[i].auto_keep).collect(),
    };
    let k = (config.rho * pool.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let chosen: BTreeSet<usize> = sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    for &i in &chosen {
        results[i].verdict = Verdict::SpotCheckPending;
    }
    let kept = results.iter().filter(|r| r.auto_keep).count();
    let total = results.len();
    Ok(FilterOutcome {
        spot_checks: chosen.iter().map(|&i| results[i].key.clone()).collect(),
        stats: AcceptanceStats {
            total,
            kept,
            filtered: total - kept,
            spot_checks: chosen.len(),
            acceptance_rate: if total == 0 { 0.0 } else { kept as f64 / total as f64 },
        },
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::ScorerError;

    fn spec(intent: Intent, count: Option<u32>) -> PromptSpec {
        PromptSpec {
            intent,
            liquid_color: "red".into(),
            level_pct: 60,
            bubble_count: count,
            reference_uri: "files/ref-1".into(),
            request_key: "k1".into(),
            seed_nonce: 3,
        }
    }

    #[test]
    fn bubble_prompt_substitution() {
        let t = render_prompt(&spec(Intent::Bubble, Some(7))).unwrap();
        assert!(t.contains("Insert 7 small, realistic air bubbles"));
        assert!(t.contains("Set the liquid level to ~60% of the tip length."));
        assert!(t.contains("Set the liquid color to red with"));
        assert!(t.ends_with("no text output."));
    }

    #[test]
    fn no_bubble_prompt() {
        let t = render_prompt(&spec(Intent::NoBubble, None)).unwrap();
        assert!(t.contains("Remove all air bubbles inside the liquid column"));
        assert!(!t.contains("{bubble_count}"));
        assert!(!t.contains('{'));
        assert!(t.ends_with("no text output."));
    }

    #[test]
    fn intent_and_count_must_agree() {
        assert!(render_prompt(&spec(Intent::Bubble, None)).is_err());
        assert!(render_prompt(&spec(Intent::NoBubble, Some(2))).is_err());
        assert!(render_prompt(&spec(Intent::Bubble, Some(16))).is_err());
    }

    #[test]
    fn prompt_parses_back() {
        for s in [spec(Intent::Bubble, Some(12)), spec(Intent::NoBubble, None)] {
            let f = parse_prompt(&render_prompt(&s).unwrap()).unwrap();
            assert_eq!(f.intent, s.intent);
            assert_eq!(f.liquid_color, s.liquid_color);
            assert_eq!(f.level_pct, s.level_pct);
            assert_eq!(f.bubble_count, s.bubble_count);
        }
        assert!(parse_prompt("draw a cat").is_none());
    }

    #[test]
    fn forced_mix() {
        let refs = vec!["files/a".to_string()];
        let specs = plan(200, &refs, 1.0, 9, "c").unwrap();
        assert!(specs.iter().all(|s| s.intent == Intent::Bubble && (1..=15).contains(&s.bubble_count.unwrap())));
        let specs = plan(200, &refs, 0.0, 9, "c").unwrap();
        assert!(specs.iter().all(|s| s.intent == Intent::NoBubble && s.bubble_count.is_none()));
        assert!(specs.iter().all(|s| (20..=90).contains(&s.level_pct)));
        assert!(plan(1, &[], 0.5, 0, "c").is_err());
    }

    #[test]
    fn bubble_count_is_uniform() {
        let refs = vec!["files/a".to_string()];
        let specs = plan(10_000, &refs, 1.0, 21, "c").unwrap();
        let mut counts = [0f64; 15];
        for s in &specs {
            counts[s.bubble_count.unwrap() as usize - 1] += 1.0;
        }
        let e = 10_000.0 / 15.0;
        let chi2: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
        // 14 degrees of freedom, alpha = 0.01
        assert!(chi2 < 29.141, "chi2 {chi2}");
    }

    #[test]
    fn consistency_examples() {
        assert_eq!(consistency(0.8, 1), 0.8);
        assert!((consistency(0.8, 0) - 0.2).abs() < 1e-15);
        assert_eq!(consistency(0.5, 0), 0.5);
        assert_eq!(consistency(0.5, 1), 0.5);
    }

    /// Scorer that returns a fixed posterior per mean intensity bucket.
    struct ByPixel;
    impl Scorer for ByPixel {
        fn posterior(&self, g: &GrayImage) -> Result<f64, ScorerError> {
            Ok(g.get_pixel(0, 0)[0] as f64 / 256.0 + 1.0 / 512.0)
        }
        fn id(&self) -> String {
            "by-pixel".into()
        }
    }

    fn cand(key: &str, y: u8, px: u8) -> Candidate {
        Candidate { key: key.into(), image_path: String::new(), intended_label: y, image: GrayImage::from_pixel(16, 16, image::Luma([px])) }
    }

    #[test]
    fn spot_check_size_and_determinism() {
        let cands: Vec<Candidate> = (0..101).map(|i| cand(&format!("k{i}"), (i % 2) as u8, (i * 2) as u8)).collect();
        let gate = GateConfig { tau_q: 0.0, ..GateConfig::default() };
        let cfg = ConsistencyConfig { rho: 0.1, seed: 4, ..ConsistencyConfig::default() };
        let a = filter_candidates(&cands, &ByPixel, &gate, &cfg).unwrap();
        let b = filter_candidates(&cands, &ByPixel, &gate, &cfg).unwrap();
        assert_eq!(a.spot_checks.len(), 10);
        assert_eq!(a.spot_checks, b.spot_checks);
        assert_eq!(a.results, b.results);
        assert_eq!(a.stats.kept + a.stats.filtered, 101);
        let kept_only = ConsistencyConfig { spot_check_pool: SpotCheckPool::KeptOnly, ..cfg };
        let c = filter_candidates(&cands, &ByPixel, &gate, &kept_only).unwrap();
        assert!(c.results.iter().filter(|r| r.verdict == Verdict::SpotCheckPending).all(|r| r.auto_keep));
    }

    #[test]
    fn keep_rule_and_overrides() {
        // px 230 -> f ~ 0.9; intended 1 keeps, intended 0 filters
        let cands = vec![cand("a", 1, 230), cand("b", 0, 230)];
        let gate = GateConfig { tau_q: 0.0, ..GateConfig::default() };
        let cfg = ConsistencyConfig { rho: 0.0, ..ConsistencyConfig::default() };
        let out = filter_candidates(&cands, &ByPixel, &gate, &cfg).unwrap();
        assert_eq!(out.results[0].verdict, Verdict::Kept);
        assert_eq!(out.results[1].verdict, Verdict::Filtered);
        assert_eq!(out.stats.acceptance_rate, 0.5);

        let mut r = out.results[1].clone();
        r.verdict = Verdict::SpotCheckPending;
        assert!(r.resolve_spot_check(HumanVerdict::Label(0)).unwrap());
        assert_eq!(r.verdict, Verdict::SpotRecovered);
        assert!(r.verdict.in_dsyn());
        let mut k = out.results[0].clone();
        k.verdict = Verdict::SpotCheckPending;
        assert!(k.resolve_spot_check(HumanVerdict::Unqualified).unwrap());
        assert_eq!(k.verdict, Verdict::SpotRejected);
        assert!(k.resolve_spot_check(HumanVerdict::Label(1)).is_err());
    }

    #[test]
    fn quality_gate_filters_blank_frames() {
        let cands = vec![cand("a", 1, 230)];
        let out = filter_candidates(&cands, &ByPixel, &GateConfig::default(), &ConsistencyConfig { rho: 0.0, ..Default::default() }).unwrap();
        assert_eq!(out.results[0].q, 0.0);
        assert_eq!(out.results[0].verdict, Verdict::Filtered);
    }
}
