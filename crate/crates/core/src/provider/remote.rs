//! JSON-over-HTTP logits client.
//!
//! Wire protocol: `POST {base}/v1/logits` with body
//! `{"vocab_hash": str, "requests": [{"query": [int], "reference": [int] | null, "prefix": [int]}]}`,
//! answered by `{"logits": [[float, ...], ...]}`. Logits are sent raw, as the
//! model produced them: clipping is not shift invariant, so servers must not
//! normalize or re-center them. A server whose vocabulary hash differs
//! answers `409 Conflict`, and the client fails without retrying.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{validate_batch, LogitProvider, ProviderError};
use crate::vocab::{LogitRequest, LogitVector, TokenId, TokenSequence, Vocabulary};

pub const LOGITS_PATH: &str = "/v1/logits";
/// Environment variable holding the bearer token sent to the server.
pub const TOKEN_ENV: &str = "DPDECODE_REMOTE_TOKEN";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    pub query: Vec<TokenId>,
    pub reference: Option<Vec<TokenId>>,
    pub prefix: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitsRequestBody {
    pub vocab_hash: String,
    pub requests: Vec<WireRequest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitsResponseBody {
    pub logits: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl From<&LogitRequest> for WireRequest {
    fn from(r: &LogitRequest) -> Self {
        Self {
            query: r.query.0.clone(),
            reference: r.reference.as_ref().map(|s| s.0.clone()),
            prefix: r.prefix.0.clone(),
        }
    }
}

impl From<WireRequest> for LogitRequest {
    fn from(w: WireRequest) -> Self {
        Self {
            query: TokenSequence(w.query),
            reference: w.reference.map(TokenSequence),
            prefix: TokenSequence(w.prefix),
        }
    }
}

/// Server-side handling of one decoded request body, independent of the HTTP
/// stack. Returns the HTTP status and JSON body to send back.
pub fn handle_request<P: LogitProvider + ?Sized>(provider: &P, body: &str) -> (u16, String) {
    let reply_err = |status: u16, msg: String| {
        (
            status,
            serde_json::to_string(&ErrorBody { error: msg }).unwrap(),
        )
    };
    let parsed: LogitsRequestBody = match serde_json::from_str(body) {
        Ok(b) => b,
        Err(e) => return reply_err(400, format!("malformed request: {e}")),
    };
    let expected = provider.vocabulary().hash();
    if parsed.vocab_hash != expected {
        return reply_err(
            409,
            format!(
                "vocab_hash {} does not match server vocabulary {expected}",
                parsed.vocab_hash
            ),
        );
    }
    let batch: Vec<LogitRequest> = parsed.requests.into_iter().map(Into::into).collect();
    match provider.logits(&batch) {
        Ok(out) => {
            let logits = out.into_iter().map(LogitVector::into_inner).collect();
            (
                200,
                serde_json::to_string(&LogitsResponseBody { logits }).unwrap(),
            )
        }
        Err(e @ ProviderError::Transport { .. }) => reply_err(503, e.to_string()),
        Err(e) => reply_err(422, e.to_string()),
    }
}

/// Client for a remote logits server.
///
/// `ureq::Agent` is shareable across threads, so concurrent generation
/// workers can have independent requests in flight.
#[derive(Debug, Clone)]
pub struct RemoteProvider {
    endpoint: String,
    vocab: Vocabulary,
    vocab_hash: String,
    agent: ureq::Agent,
    auth_token: Option<String>,
    max_retries: u32,
    retry_backoff: Duration,
    max_context: usize,
}

impl RemoteProvider {
    pub fn new(base_url: &str, vocab: Vocabulary) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        let vocab_hash = vocab.hash();
        Self {
            endpoint: format!("{}{}", base_url.trim_end_matches('/'), LOGITS_PATH),
            vocab,
            vocab_hash,
            agent,
            auth_token: None,
            max_retries: 2,
            retry_backoff: Duration::from_millis(100),
            max_context: usize::MAX,
        }
    }

    /// Picks up the bearer token from `DPDECODE_REMOTE_TOKEN` when set.
    pub fn with_env_token(mut self) -> Self {
        self.auth_token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        self
    }

    pub fn with_auth_token(mut self, token: impl Into<String>) -> Self {
        self.auth_token = Some(token.into());
        self
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.retry_backoff = backoff;
        self
    }

    pub fn with_max_context(mut self, max_context: usize) -> Self {
        self.max_context = max_context;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn call_once(&self, body: &LogitsRequestBody) -> Result<LogitsResponseBody, ProviderError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(token) = &self.auth_token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| ProviderError::Transport {
            message: e.to_string(),
            retryable: true,
        })?;
        let status = resp.status().as_u16();
        if status == 200 {
            return resp
                .body_mut()
                .read_json::<LogitsResponseBody>()
                .map_err(|e| ProviderError::Protocol(format!("bad response body: {e}")));
        }
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text)
            .map(|b| b.error)
            .unwrap_or(text);
        Err(match status {
            409 => ProviderError::VocabularyMismatch(message),
            408 | 429 | 500..=599 => ProviderError::Transport {
                message: format!("HTTP {status}: {message}"),
                retryable: true,
            },
            _ => ProviderError::Protocol(format!("HTTP {status}: {message}")),
        })
    }
}

impl LogitProvider for RemoteProvider {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn max_context(&self) -> usize {
        self.max_context
    }

    fn logits(&self, batch: &[LogitRequest]) -> Result<Vec<LogitVector>, ProviderError> {
        validate_batch(&self.vocab, self.max_context, batch)?;
        let body = LogitsRequestBody {
            vocab_hash: self.vocab_hash.clone(),
            requests: batch.iter().map(WireRequest::from).collect(),
        };
        let mut attempt = 0;
        let response = loop {
            match self.call_once(&body) {
                Ok(r) => break r,
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    log::warn!("remote logits attempt {} failed: {e}", attempt + 1);
                    std::thread::sleep(self.retry_backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        if response.logits.len() != batch.len() {
            return Err(ProviderError::Protocol(format!(
                "expected {} logit vectors, got {}",
                batch.len(),
                response.logits.len()
            )));
        }
        response
            .logits
            .into_iter()
            .map(|v| {
                if v.len() != self.vocab.size() {
                    return Err(ProviderError::VocabularyMismatch(format!(
                        "server returned {} logits for a vocabulary of {}",
                        v.len(),
                        self.vocab.size()
                    )));
                }
                LogitVector::new(v).map_err(|e| ProviderError::Protocol(e.to_string()))
            })
            .collect()
    }
}
