//! Captioning requests to a multimodal chat endpoint.
//!
//! The request body follows the widely used chat-completions shape: one user
//! message holding the prompt text and the image as a base64 data URL. The
//! caption is read from `choices[0].message.content`.

use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use base64::Engine;

use crate::error::{CaptionError, Result};
use crate::record::CaptionRecord;
use crate::template::prompt_hash;

pub const ENV_URL: &str = "MLLM_API_URL";
pub const ENV_KEY: &str = "MLLM_API_KEY";

#[derive(Clone, Debug, PartialEq)]
pub struct ClientConfig {
    pub url: String,
    pub api_key: String,
    pub model_id: String,
    /// Total tries per request, including the first.
    pub max_attempts: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl ClientConfig {
    pub fn new(url: impl Into<String>, api_key: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key: api_key.into(),
            model_id: model_id.into(),
            max_attempts: 4,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(60),
        }
    }

    /// Endpoint and key from `MLLM_API_URL` / `MLLM_API_KEY`.
    pub fn from_env(model_id: &str) -> Result<Self> {
        Self::from_lookup(model_id, |k| std::env::var(k).ok())
    }

    pub fn from_lookup(model_id: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let get = |k: &str| {
            lookup(k)
                .filter(|v| !v.trim().is_empty())
                .ok_or_else(|| CaptionError::Config(format!("environment variable {k} is not set")))
        };
        Ok(Self::new(get(ENV_URL)?, get(ENV_KEY)?, model_id))
    }
}

/// A caption plus how many tries it took.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub record: CaptionRecord,
    pub attempts: u32,
    /// One message per failed try that was retried.
    pub retries: Vec<String>,
}

/// Anything that turns (image, prompt) into a caption.
pub trait CaptionService: Sync {
    fn model_id(&self) -> &str;
    fn caption(&self, image_path: &Path, image_id: &str, species: &str, prompt: &str) -> Result<Generated>;
}

pub(crate) fn is_timeout(e: &ureq::Error) -> bool {
    match e {
        ureq::Error::Timeout(_) => true,
        ureq::Error::Io(io) => matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock),
        _ => false,
    }
}

pub(crate) fn transport_error(e: ureq::Error) -> CaptionError {
    if is_timeout(&e) {
        CaptionError::Timeout { attempts: 1 }
    } else {
        CaptionError::Exhausted {
            attempts: 1,
            last: e.to_string(),
        }
    }
}

fn mime_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

pub fn request_body(model_id: &str, prompt: &str, image: &[u8], mime: &str) -> String {
    let data = base64::engine::general_purpose::STANDARD.encode(image);
    serde_json::json!({
        "model": model_id,
        "messages": [{
            "role": "user",
            "content": [
                { "type": "text", "text": prompt },
                { "type": "image_url", "image_url": { "url": format!("data:{mime};base64,{data}") } }
            ]
        }]
    })
    .to_string()
}

/// Caption text from a chat-completions reply.
pub fn parse_caption_response(body: &str) -> Result<String> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| CaptionError::Malformed(e.to_string()))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| CaptionError::Malformed("no choices[0].message.content string".into()))?
        .trim();
    if text.is_empty() {
        return Err(CaptionError::Malformed("empty caption".into()));
    }
    Ok(text.to_string())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

enum Outcome {
    Done(String),
    Retry { message: String, timeout: bool },
}

pub struct MllmClient {
    cfg: ClientConfig,
    agent: ureq::Agent,
    clock: fn() -> u64,
}

impl MllmClient {
    pub fn new(cfg: ClientConfig) -> Self {
        let agent = ureq::Agent::new_with_config(
            ureq::Agent::config_builder()
                .timeout_global(Some(cfg.timeout))
                .http_status_as_error(false)
                .build(),
        );
        Self {
            cfg,
            agent,
            clock: unix_now,
        }
    }

    /// Replaces the timestamp source.
    pub fn with_clock(mut self, clock: fn() -> u64) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    fn attempt(&self, body: &str) -> Result<Outcome> {
        let sent = self
            .agent
            .post(&self.cfg.url)
            .header("Authorization", format!("Bearer {}", self.cfg.api_key))
            .header("Content-Type", "application/json")
            .send(body);
        let mut resp = match sent {
            Ok(r) => r,
            Err(e) => {
                return Ok(Outcome::Retry {
                    timeout: is_timeout(&e),
                    message: e.to_string(),
                })
            }
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => {
                return Ok(Outcome::Retry {
                    timeout: is_timeout(&e),
                    message: e.to_string(),
                })
            }
        };
        match status {
            200..=299 => Ok(Outcome::Done(parse_caption_response(&text)?)),
            401 | 403 => Err(CaptionError::Auth(status)),
            408 | 429 | 500..=599 => Ok(Outcome::Retry {
                message: format!("HTTP {status}"),
                timeout: status == 408,
            }),
            _ => Err(CaptionError::Rejected { status, body: text }),
        }
    }
}

impl CaptionService for MllmClient {
    fn model_id(&self) -> &str {
        &self.cfg.model_id
    }

    fn caption(&self, image_path: &Path, image_id: &str, species: &str, prompt: &str) -> Result<Generated> {
        let image = std::fs::read(image_path)?;
        let body = request_body(&self.cfg.model_id, prompt, &image, mime_type(image_path));
        let attempts = self.cfg.max_attempts.max(1);
        let mut retries = Vec::new();
        for attempt in 1..=attempts {
            match self.attempt(&body)? {
                Outcome::Done(caption) => {
                    let record = CaptionRecord {
                        image_id: image_id.to_string(),
                        species_label: species.to_string(),
                        caption,
                        prompt_hash: prompt_hash(prompt),
                        model_id: self.cfg.model_id.clone(),
                        timestamp: (self.clock)(),
                    };
                    return Ok(Generated {
                        record,
                        attempts: attempt,
                        retries,
                    });
                }
                Outcome::Retry { message, timeout } => {
                    if attempt < attempts {
                        let delay = self.cfg.initial_backoff * 2u32.saturating_pow(attempt - 1);
                        log::warn!("{image_id}: attempt {attempt} failed ({message}); retrying in {delay:?}");
                        retries.push(message);
                        std::thread::sleep(delay);
                    } else if timeout {
                        return Err(CaptionError::Timeout { attempts });
                    } else {
                        return Err(CaptionError::Exhausted { attempts, last: message });
                    }
                }
            }
        }
        unreachable!("loop returns on the last attempt")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_lookup() {
        let cfg = ClientConfig::from_lookup("m", |k| Some(format!("v-{k}"))).unwrap();
        assert_eq!(cfg.url, "v-MLLM_API_URL");
        assert_eq!(cfg.api_key, "v-MLLM_API_KEY");
        let err = ClientConfig::from_lookup("m", |k| (k == ENV_URL).then(|| "u".to_string())).unwrap_err();
        assert!(err.to_string().contains(ENV_KEY));
    }

    #[test]
    fn body_shape() {
        let v: serde_json::Value = serde_json::from_str(&request_body("gpt", "hi", b"\x89PNG", "image/png")).unwrap();
        assert_eq!(v["model"], "gpt");
        assert_eq!(v["messages"][0]["content"][0]["text"], "hi");
        assert_eq!(v["messages"][0]["content"][1]["image_url"]["url"], "data:image/png;base64,iVBORw==");
    }

    #[test]
    fn response_parsing() {
        assert_eq!(
            parse_caption_response(r#"{"choices":[{"message":{"content":" A beetle. "}}]}"#).unwrap(),
            "A beetle."
        );
        for bad in ["nope", "{}", r#"{"choices":[]}"#, r#"{"choices":[{"message":{"content":""}}]}"#] {
            assert!(matches!(parse_caption_response(bad), Err(CaptionError::Malformed(_))), "{bad}");
        }
    }
}
