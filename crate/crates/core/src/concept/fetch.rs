//! Client for the embedding-service protocol:
//!
//! ```text
//! POST /v1/expand {"concept": str, "k": int}  -> {"synonyms": [str], "antonyms": [str]}
//! POST /v1/embed  {"texts": [str]}            -> {"embeddings": [[[float]]], "shape": [L, n]}
//! ```
//!
//! Uses blocking I/O; do not call from inside an async runtime worker.

use std::path::Path;
use std::thread;
use std::time::Duration;

use nalgebra::DMatrix;
use reqwest::blocking::{Client, Response};
use reqwest::header::RETRY_AFTER;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{write_concept_spec, ConceptSpec, MAX_K};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EmbeddingClient {
    base_url: String,
    encoder_id: String,
    attempts: u32,
    initial_backoff: Duration,
    http: Client,
}

impl EmbeddingClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        let base_url = base_url.into().trim_end_matches('/').to_string();
        Self {
            encoder_id: format!("embedding-service:{base_url}"),
            base_url,
            attempts: 3,
            initial_backoff: Duration::from_millis(500),
            http: Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("static client configuration"),
        }
    }

    /// Identifier recorded in the bundle's `encoder_id` metadata.
    pub fn with_encoder_id(mut self, encoder_id: impl Into<String>) -> Self {
        self.encoder_id = encoder_id.into();
        self
    }

    pub fn with_retries(mut self, attempts: u32, initial_backoff: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.initial_backoff = initial_backoff;
        self
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp> {
        let url = format!("{}{}", self.base_url, path);
        let mut backoff = self.initial_backoff;
        let mut last_error = String::new();
        for attempt in 1..=self.attempts {
            let wait = match self.http.post(&url).json(body).send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp
                        .json()
                        .map_err(|e| Error::ProtocolError(format!("{path}: {e}")));
                }
                Ok(resp) if is_retryable(resp.status()) => {
                    last_error = format!("{path} returned {}", resp.status());
                    retry_after(&resp).unwrap_or(backoff)
                }
                Ok(resp) => {
                    return Err(Error::ProtocolError(format!(
                        "{path} rejected the request with {}",
                        resp.status()
                    )));
                }
                Err(e) => {
                    last_error = format!("{path}: {e}");
                    backoff
                }
            };
            log::warn!("embedding service attempt {attempt}/{} failed: {last_error}", self.attempts);
            if attempt < self.attempts {
                thread::sleep(wait);
                backoff *= 2;
            }
        }
        Err(Error::ServiceUnavailable(format!(
            "{last_error} (after {} attempts)",
            self.attempts
        )))
    }

    pub fn expand(&self, concept: &str, k: usize) -> Result<(Vec<String>, Vec<String>)> {
        let resp: ExpandResponse = self.post("/v1/expand", &ExpandRequest { concept, k })?;
        Ok((resp.synonyms, resp.antonyms))
    }

    /// Embeds one text and returns its `L × n` matrix.
    pub fn embed(&self, text: &str) -> Result<DMatrix<f64>> {
        let resp: EmbedResponse = self.post("/v1/embed", &EmbedRequest { texts: vec![text] })?;
        let [rows, cols] = resp.shape;
        let [matrix] = <[Vec<Vec<f64>>; 1]>::try_from(resp.embeddings).map_err(|v| {
            Error::ProtocolError(format!("expected 1 embedding, got {}", v.len()))
        })?;
        if matrix.len() != rows || matrix.iter().any(|row| row.len() != cols) {
            return Err(Error::ProtocolError(format!(
                "embedding does not match declared shape [{rows}, {cols}]"
            )));
        }
        Ok(DMatrix::from_row_iterator(rows, cols, matrix.into_iter().flatten()))
    }
}

fn is_retryable(status: StatusCode) -> bool {
    status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS
}

fn retry_after(resp: &Response) -> Option<Duration> {
    let secs: u64 = resp.headers().get(RETRY_AFTER)?.to_str().ok()?.trim().parse().ok()?;
    Some(Duration::from_secs(secs))
}

#[derive(Serialize)]
struct ExpandRequest<'a> {
    concept: &'a str,
    k: usize,
}

#[derive(Deserialize)]
struct ExpandResponse {
    synonyms: Vec<String>,
    antonyms: Vec<String>,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<Vec<f64>>>,
    shape: [usize; 2],
}

/// Expands `concept` into `k` synonym/antonym phrases, embeds each phrase and
/// the empty prompt, and assembles a validated bundle. Missing antonyms are
/// flagged absent. When `out` is given the bundle is also written there.
pub fn fetch_concept_bundle(
    client: &EmbeddingClient,
    concept: &str,
    k: usize,
    out: Option<&Path>,
) -> Result<ConceptSpec> {
    if !(1..=MAX_K).contains(&k) {
        return Err(Error::invalid_config("k", format!("must be in 1..={MAX_K}")));
    }
    let (mut synonyms, mut antonyms) = client.expand(concept, k)?;
    if synonyms.len() < k {
        return Err(Error::ProtocolError(format!(
            "asked for {k} synonyms of `{concept}`, got {}",
            synonyms.len()
        )));
    }
    synonyms.truncate(k);
    antonyms.truncate(k);

    let synonym_embeddings = synonyms
        .iter()
        .map(|s| client.embed(s))
        .collect::<Result<Vec<_>>>()?;
    let mut antonym_slots = antonyms
        .iter()
        .map(|a| if a.trim().is_empty() { Ok(None) } else { client.embed(a).map(Some) })
        .collect::<Result<Vec<_>>>()?;
    antonym_slots.resize(k, None);
    let neutral = client.embed("")?;

    let mut spec = ConceptSpec::new(concept, synonym_embeddings, antonym_slots, neutral)
        .map_err(|e| Error::ProtocolError(format!("service returned an invalid bundle: {e}")))?;
    spec.encoder_id = client.encoder_id.clone();
    if let Some(path) = out {
        write_concept_spec(&spec, path)?;
    }
    Ok(spec)
}
