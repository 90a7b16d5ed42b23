//! Line-delimited batch request and result files.
//!
//! Request line:
//! `{"key":K,"request":{"contents":[{"parts":[{"file_data":{"file_uri":U,"mime_type":"image/png"}},{"text":T}]}],"generation_config":{"seed":S}}}`
//!
//! Result line, success:
//! `{"key":K,"response":{"candidates":[{"content":{"parts":[{"inline_data":{"mime_type":"image/png","data":B64}}]}}]}}`
//!
//! Result line, failure: `{"key":K,"error":{"code":C,"message":M}}`

use std::collections::{BTreeMap, HashSet};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{parse_prompt, render_prompt, PromptSpec, SynthError};

pub const REFERENCE_MIME: &str = "image/png";
pub const IMAGE_MIME: &str = "image/png";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileData {
    pub file_uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mime_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blob {
    pub mime_type: String,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Part {
    File { file_data: FileData },
    Text { text: String },
    Inline { inline_data: Blob },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Content {
    pub parts: Vec<Part>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateContentRequest {
    pub contents: Vec<Content>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_config: Option<GenerationConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLine {
    pub key: String,
    pub request: GenerateContentRequest,
}

impl BatchLine {
    pub fn from_spec(spec: &PromptSpec) -> Result<Self, SynthError> {
        let text = render_prompt(spec)?;
        Ok(BatchLine {
            key: spec.request_key.clone(),
            request: GenerateContentRequest {
                contents: vec![Content {
                    parts: vec![
                        Part::File {
                            file_data: FileData {
                                file_uri: spec.reference_uri.clone(),
                                mime_type: Some(REFERENCE_MIME.into()),
                            },
                        },
                        Part::Text { text },
                    ],
                }],
                generation_config: Some(GenerationConfig { seed: spec.seed_nonce }),
            },
        })
    }

    pub fn reference_uri(&self) -> Option<&str> {
        self.parts().find_map(|p| match p {
            Part::File { file_data } => Some(file_data.file_uri.as_str()),
            _ => None,
        })
    }

    pub fn prompt_text(&self) -> Option<&str> {
        self.parts().find_map(|p| match p {
            Part::Text { text } => Some(text.as_str()),
            _ => None,
        })
    }

    fn parts(&self) -> impl Iterator<Item = &Part> {
        self.request.contents.iter().flat_map(|c| c.parts.iter())
    }

    /// Recovers the spec that produced this line.
    pub fn to_spec(&self) -> Result<PromptSpec, String> {
        let uri = self.reference_uri().ok_or("no file_data part")?;
        let text = self.prompt_text().ok_or("no text part")?;
        let f = parse_prompt(text).ok_or("text matches neither prompt template")?;
        let spec = PromptSpec {
            intent: f.intent,
            liquid_color: f.liquid_color,
            level_pct: f.level_pct,
            bubble_count: f.bubble_count,
            reference_uri: uri.to_string(),
            request_key: self.key.clone(),
            seed_nonce: self.request.generation_config.as_ref().map_or(0, |g| g.seed),
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    /// 1-based line number in the file.
    pub line: usize,
    pub key: Option<String>,
    pub message: String,
}

/// One JSON object per line, in spec order. Keys must be unique.
pub fn build_batch(specs: &[PromptSpec]) -> Result<String, SynthError> {
    let mut seen = HashSet::new();
    let mut out = String::new();
    for s in specs {
        if !seen.insert(s.request_key.as_str()) {
            return Err(SynthError::DuplicateKey(s.request_key.clone()));
        }
        let line = BatchLine::from_spec(s)?;
        out.push_str(&serde_json::to_string(&line).map_err(|e| SynthError::Serialization(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a request file back into specs; bad lines are reported and skipped.
pub fn parse_batch(text: &str) -> (Vec<PromptSpec>, Vec<LineError>) {
    let mut specs = Vec::new();
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<BatchLine>(raw) {
            Err(e) => errors.push(LineError { line: i + 1, key: None, message: e.to_string() }),
            Ok(line) => match line.to_spec() {
                Ok(s) => specs.push(s),
                Err(m) => errors.push(LineError { line: i + 1, key: Some(line.key), message: m }),
            },
        }
    }
    (specs, errors)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResultStatus {
    #[serde(default)]
    code: i64,
    #[serde(default)]
    message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResponseCandidate {
    content: Content,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GenerateContentResponse {
    candidates: Vec<ResponseCandidate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResultLine {
    key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response: Option<GenerateContentResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<ResultStatus>,
}

pub fn encode_result_image(key: &str, png: &[u8]) -> String {
    let line = ResultLine {
        key: key.into(),
        response: Some(GenerateContentResponse {
            candidates: vec![ResponseCandidate {
                content: Content {
                    parts: vec![Part::Inline { inline_data: Blob { mime_type: IMAGE_MIME.into(), data: B64.encode(png) } }],
                },
            }],
        }),
        error: None,
    };
    serde_json::to_string(&line).expect("result line serializes")
}

pub fn encode_result_error(key: &str, code: i64, message: &str) -> String {
    let line = ResultLine { key: key.into(), response: None, error: Some(ResultStatus { code, message: message.into() }) };
    serde_json::to_string(&line).expect("result line serializes")
}

#[derive(Debug, Clone)]
pub struct ResultImage {
    pub key: String,
    pub line: usize,
    pub intended_label: u8,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedResults {
    pub images: Vec<ResultImage>,
    pub errors: Vec<LineError>,
    /// Requested keys with no image in the file.
    pub unmatched_keys: Vec<String>,
    /// Keys in the file that were never requested.
    pub unknown_keys: Vec<String>,
}

/// Matches result lines to the requested specs. Each bad line produces one
/// [`LineError`] and parsing continues.
pub fn parse_results(text: &str, specs: &[PromptSpec]) -> ParsedResults {
    let wanted: BTreeMap<&str, &PromptSpec> = specs.iter().map(|s| (s.request_key.as_str(), s)).collect();
    let mut out = ParsedResults::default();
    let mut got: HashSet<String> = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |key: Option<String>, message: String| LineError { line: line_no, key, message };
        let parsed: ResultLine = match serde_json::from_str(raw) {
            Ok(p) => p,
            Err(e) => {
                out.errors.push(err(None, e.to_string()));
                continue;
            }
        };
        let key = parsed.key.clone();
        let Some(spec) = wanted.get(key.as_str()) else {
            out.unknown_keys.push(key);
            continue;
        };
        if got.contains(&key) {
            out.errors.push(err(Some(key), "duplicate key".into()));
            continue;
        }
        if let Some(status) = parsed.error {
            out.errors.push(err(Some(key), format!("generator error {}: {}", status.code, status.message)));
            continue;
        }
        let blob = parsed.response.as_ref().and_then(|r| {
            r.candidates.iter().flat_map(|c| c.content.parts.iter()).find_map(|p| match p {
                Part::Inline { inline_data } if inline_data.mime_type.starts_with("image/") => Some(inline_data),
                _ => None,
            })
        });
        let Some(blob) = blob else {
            out.errors.push(err(Some(key), "response has no image part".into()));
            continue;
        };
        match B64.decode(&blob.data) {
            Ok(bytes) => {
                got.insert(key.clone());
                out.images.push(ResultImage { key, line: line_no, intended_label: spec.intended_label(), bytes });
            }
            Err(e) => out.errors.push(err(Some(key), format!("bad base64: {e}"))),
        }
    }
    out.unmatched_keys = wanted.keys().filter(|k| !got.contains(**k)).map(|k| k.to_string()).collect();
    out
}

#[cfg(test)]
mod tests {
    use super::super::{plan, Intent};
    use super::*;

    fn specs(n: usize) -> Vec<PromptSpec> {
        plan(n, &["files/ref-a".into(), "files/ref-b".into()], 0.5, 1, "k").unwrap()
    }

    #[test]
    fn one_line_per_spec_and_round_trip() {
        let s = specs(3);
        let text = build_batch(&s).unwrap();
        assert_eq!(text.lines().count(), 3);
        let (back, errors) = parse_batch(&text);
        assert!(errors.is_empty());
        assert_eq!(back, s);
    }

    #[test]
    fn exact_line_shape() {
        let spec = PromptSpec {
            intent: Intent::NoBubble,
            liquid_color: "blue".into(),
            level_pct: 40,
            bubble_count: None,
            reference_uri: "files/r".into(),
            request_key: "x".into(),
            seed_nonce: 17,
        };
        let text = build_batch(&[spec.clone()]).unwrap();
        let prompt = serde_json::to_string(&render_prompt(&spec).unwrap()).unwrap();
        let expected = format!(
            "{{\"key\":\"x\",\"request\":{{\"contents\":[{{\"parts\":[{{\"file_data\":{{\"file_uri\":\"files/r\",\"mime_type\":\"image/png\"}}}},{{\"text\":{prompt}}}]}}],\"generation_config\":{{\"seed\":17}}}}}}\n"
        );
        assert_eq!(text, expected);
    }

    #[test]
    fn duplicate_keys_rejected() {
        let mut s = specs(2);
        s[1].request_key = s[0].request_key.clone();
        assert!(matches!(build_batch(&s), Err(SynthError::DuplicateKey(_))));
    }

    #[test]
    fn results_partial_failure() {
        let s = specs(4);
        let mut lines = vec![
            encode_result_image(&s[0].request_key, b"png0"),
            "{not json".to_string(),
            encode_result_error(&s[2].request_key, 13, "internal"),
            encode_result_image("stray", b"x"),
        ];
        lines.push(encode_result_image(&s[0].request_key, b"again"));
        let r = parse_results(&lines.join("\n"), &s);
        assert_eq!(r.images.len(), 1);
        assert_eq!(r.images[0].bytes, b"png0");
        assert_eq!(r.errors.iter().map(|e| e.line).collect::<Vec<_>>(), vec![2, 3, 5]);
        assert_eq!(r.unknown_keys, vec!["stray".to_string()]);
        assert_eq!(r.unmatched_keys.len(), 3);
    }
}
