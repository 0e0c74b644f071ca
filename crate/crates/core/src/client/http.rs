use std::fmt;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use serde_json::{json, Value};

use super::{build_prompt, ModelEndpoint, ModelReply, QueryError, VqaModel};
use crate::corpus::{DocumentImage, VqaItem};

/// Spaces request starts at least `1 / rps` seconds apart across threads.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    pub fn new(requests_per_second: f64) -> Self {
        RateLimiter {
            interval: Duration::from_secs_f64(1.0 / requests_per_second),
            next: Mutex::new(Instant::now()),
        }
    }

    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

#[derive(Debug)]
struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Chat-completions client for OpenAI-compatible endpoints.
pub struct HttpModel {
    endpoint: ModelEndpoint,
    api_key: Option<String>,
    agent: ureq::Agent,
    in_flight: Semaphore,
    limiter: Option<RateLimiter>,
}

impl fmt::Debug for HttpModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpModel")
            .field("endpoint", &self.endpoint)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

enum Attempt {
    Done(String),
    Retry { reason: String, after: Option<Duration> },
    Fail(QueryError),
}

impl HttpModel {
    /// Fails with [`QueryError::Auth`] if the endpoint names a key variable that is unset.
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, QueryError> {
        endpoint.validate().map_err(|reason| QueryError::Aborted(reason))?;
        let api_key = match &endpoint.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| QueryError::Auth(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build();
        Ok(HttpModel {
            in_flight: Semaphore::new(endpoint.max_in_flight),
            limiter: endpoint.requests_per_second.map(RateLimiter::new),
            endpoint,
            api_key,
            agent,
        })
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.endpoint.base_url.trim_end_matches('/'))
    }

    fn body(&self, item: &VqaItem, png: &[u8]) -> Value {
        let data_uri = format!(
            "data:image/png;base64,{}",
            base64::engine::general_purpose::STANDARD.encode(png)
        );
        json!({
            "model": self.endpoint.model_name,
            "temperature": 0,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "image_url", "image_url": {"url": data_uri}},
                    {"type": "text", "text": build_prompt(item)},
                ],
            }],
        })
    }

    fn attempt(&self, body: &Value) -> Attempt {
        if let Some(l) = &self.limiter {
            l.acquire();
        }
        let mut req = self.agent.post(&self.url()).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body) {
            Ok(resp) => match resp.into_json::<Value>() {
                Ok(v) => match reply_text(&v) {
                    Some(text) => Attempt::Done(text),
                    None => Attempt::Fail(QueryError::Unanswered {
                        attempts: 0,
                        reason: "response has no message content".into(),
                    }),
                },
                Err(e) => Attempt::Retry {
                    reason: format!("malformed response body: {e}"),
                    after: None,
                },
            },
            Err(ureq::Error::Status(code, resp)) => {
                let after = resp
                    .header("Retry-After")
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .filter(|s| s.is_finite() && *s >= 0.0)
                    .map(Duration::from_secs_f64);
                match code {
                    401 | 403 => Attempt::Fail(QueryError::Auth(format!("HTTP {code}"))),
                    429 | 500..=599 => Attempt::Retry {
                        reason: format!("HTTP {code}"),
                        after,
                    },
                    _ => Attempt::Fail(QueryError::Unanswered {
                        attempts: 0,
                        reason: format!("HTTP {code}"),
                    }),
                }
            }
            Err(ureq::Error::Transport(t)) => Attempt::Retry {
                reason: t.to_string(),
                after: None,
            },
        }
    }
}

/// Extracts the assistant text from a chat-completions response. Content may be a
/// string or a list of typed parts.
fn reply_text(v: &Value) -> Option<String> {
    let content = v.pointer("/choices/0/message/content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => {
            let text: Vec<&str> = parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect();
            (!text.is_empty()).then(|| text.join(""))
        }
        _ => None,
    }
}

impl VqaModel for HttpModel {
    fn model_name(&self) -> &str {
        &self.endpoint.model_name
    }

    fn query(
        &self,
        item: &VqaItem,
        image: &DocumentImage,
        condition_id: &str,
    ) -> Result<ModelReply, QueryError> {
        let png = image.encode_png().map_err(|e| QueryError::Unanswered {
            attempts: 0,
            reason: e.to_string(),
        })?;
        let body = self.body(item, &png);
        let _permit = self.in_flight.acquire();
        let start = Instant::now();
        let max_attempts = self.endpoint.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=max_attempts {
            match self.attempt(&body) {
                Attempt::Done(raw_text) => {
                    return Ok(ModelReply {
                        item_id: item.id.clone(),
                        condition_id: condition_id.to_string(),
                        raw_text,
                        latency_secs: start.elapsed().as_secs_f64(),
                        attempt_count: attempt,
                    })
                }
                Attempt::Fail(QueryError::Unanswered { reason, .. }) => {
                    return Err(QueryError::Unanswered {
                        attempts: attempt,
                        reason,
                    })
                }
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry { reason, after } => {
                    log::warn!(
                        "{} item {} attempt {attempt}/{max_attempts}: {reason}",
                        self.endpoint.model_name,
                        item.id
                    );
                    last = reason;
                    if attempt < max_attempts {
                        let backoff = Duration::from_millis(
                            self.endpoint.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16)),
                        );
                        thread::sleep(after.unwrap_or(backoff).max(backoff));
                    }
                }
            }
        }
        Err(QueryError::Unanswered {
            attempts: max_attempts,
            reason: last,
        })
    }
}
