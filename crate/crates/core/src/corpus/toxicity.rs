//! Toxicity score acquisition.
//!
//! Scores normally ship inside the corpus; this module fills them in when
//! they are missing, either from a local fixture file (hermetic, the
//! default) or from a scoring service over HTTP. The core pipeline never
//! requires network access.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

use super::Utterance;

#[derive(Debug, Error)]
pub enum ToxicityError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("fixture line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("utterance {id} not found in toxicity fixture")]
    Lookup { id: String },
    #[error("utterance {id}: service returned {field} = {value} outside [0,1]")]
    OutOfRange { id: String, field: &'static str, value: f64 },
    #[error("toxicity service failed after {attempts} attempt(s): {message} (retryable)")]
    Retryable { attempts: u32, message: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureRecord {
    id: String,
    toxicity: f64,
    severe_toxicity: f64,
}

/// Scores keyed by utterance id, loaded from a line-delimited file.
#[derive(Debug, Clone, Default)]
pub struct ToxicityFixture {
    map: HashMap<String, (f64, f64)>,
}

impl ToxicityFixture {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ToxicityError> {
        let content = std::fs::read_to_string(path)?;
        let mut map = HashMap::new();
        for (i, line) in content.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(trimmed)
                .map_err(|source| ToxicityError::Parse { line: i + 1, source })?;
            map.insert(rec.id, (rec.toxicity, rec.severe_toxicity));
        }
        Ok(ToxicityFixture { map })
    }

    pub fn from_map(map: HashMap<String, (f64, f64)>) -> Self {
        ToxicityFixture { map }
    }

    fn get(&self, id: &str) -> Result<(f64, f64), ToxicityError> {
        self.map.get(id).copied().ok_or_else(|| ToxicityError::Lookup { id: id.to_string() })
    }
}

/// HTTP client for a scoring service.
///
/// The service receives `{"id": ..., "text": ...}` by POST and answers
/// `{"toxicity": ..., "severe_toxicity": ...}`. Failures are retried up to
/// `max_retries` additional times before surfacing a retryable error.
#[derive(Debug, Clone)]
pub struct HttpToxicityClient {
    pub endpoint: String,
    pub max_retries: u32,
}

impl HttpToxicityClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpToxicityClient { endpoint: endpoint.into(), max_retries: 2 }
    }
}

#[derive(Debug, Serialize)]
struct ScoreRequest<'a> {
    id: &'a str,
    text: &'a str,
}

#[derive(Debug, Deserialize)]
struct ScoreResponse {
    toxicity: f64,
    severe_toxicity: f64,
}

/// Where [`fetch_toxicity`] gets its scores.
#[derive(Debug, Clone)]
pub enum ToxicitySource {
    Fixture(ToxicityFixture),
    Http(HttpToxicityClient),
}

fn check_range(id: &str, field: &'static str, value: f64) -> Result<f64, ToxicityError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(ToxicityError::OutOfRange { id: id.to_string(), field, value })
    }
}

/// Return a copy of `u` with both toxicity fields set.
pub fn fetch_toxicity(u: &Utterance, source: &ToxicitySource) -> Result<Utterance, ToxicityError> {
    let (tox, severe) = match source {
        ToxicitySource::Fixture(fix) => fix.get(&u.id)?,
        ToxicitySource::Http(client) => fetch_http(u, client)?,
    };
    let mut out = u.clone();
    out.toxicity = Some(check_range(&u.id, "toxicity", tox)?);
    out.severe_toxicity = Some(check_range(&u.id, "severe_toxicity", severe)?);
    Ok(out)
}

fn fetch_http(u: &Utterance, client: &HttpToxicityClient) -> Result<(f64, f64), ToxicityError> {
    let attempts = client.max_retries + 1;
    let mut last_err = String::new();
    for _ in 0..attempts {
        let result = ureq::post(&client.endpoint)
            .send_json(ScoreRequest { id: &u.id, text: &u.text })
            .and_then(|mut resp| resp.body_mut().read_json::<ScoreResponse>());
        match result {
            Ok(resp) => return Ok((resp.toxicity, resp.severe_toxicity)),
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(ToxicityError::Retryable { attempts, message: last_err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::UtteranceKind;

    fn utt(id: &str) -> Utterance {
        Utterance {
            id: id.to_string(),
            author: "A".to_string(),
            timestamp: 0,
            text: "hello there".to_string(),
            kind: UtteranceKind::TalkPost,
            toxicity: None,
            severe_toxicity: None,
        }
    }

    #[test]
    fn fixture_lookup_sets_fields() {
        let fix = ToxicityFixture::from_map([("u1".to_string(), (0.2, 0.05))].into_iter().collect());
        let out = fetch_toxicity(&utt("u1"), &ToxicitySource::Fixture(fix)).unwrap();
        assert_eq!(out.toxicity, Some(0.2));
        assert_eq!(out.severe_toxicity, Some(0.05));
    }

    #[test]
    fn fixture_missing_id_is_lookup_error() {
        let fix = ToxicityFixture::from_map(HashMap::new());
        let err = fetch_toxicity(&utt("u9"), &ToxicitySource::Fixture(fix)).unwrap_err();
        assert!(matches!(err, ToxicityError::Lookup { id } if id == "u9"));
    }

    #[test]
    fn boundary_score_accepted() {
        let fix = ToxicityFixture::from_map([("u1".to_string(), (1.0, 0.0))].into_iter().collect());
        let out = fetch_toxicity(&utt("u1"), &ToxicitySource::Fixture(fix)).unwrap();
        assert_eq!(out.toxicity, Some(1.0));
    }

    #[test]
    fn out_of_range_score_rejected() {
        let fix = ToxicityFixture::from_map([("u1".to_string(), (1.5, 0.0))].into_iter().collect());
        let err = fetch_toxicity(&utt("u1"), &ToxicitySource::Fixture(fix)).unwrap_err();
        assert!(matches!(err, ToxicityError::OutOfRange { .. }));
    }

    #[test]
    fn fixture_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tox.jsonl");
        std::fs::write(
            &path,
            "# header\n{\"id\":\"u1\",\"toxicity\":0.2,\"severe_toxicity\":0.05}\n",
        )
        .unwrap();
        let fix = ToxicityFixture::load(&path).unwrap();
        let out = fetch_toxicity(&utt("u1"), &ToxicitySource::Fixture(fix)).unwrap();
        assert_eq!(out.toxicity, Some(0.2));
    }

    #[test]
    fn unreachable_service_is_retryable_error() {
        let client = HttpToxicityClient { endpoint: "http://127.0.0.1:1/score".to_string(), max_retries: 1 };
        let err = fetch_toxicity(&utt("u1"), &ToxicitySource::Http(client)).unwrap_err();
        match err {
            ToxicityError::Retryable { attempts, .. } => assert_eq!(attempts, 2),
            other => panic!("expected retryable error, got {other:?}"),
        }
    }
}
