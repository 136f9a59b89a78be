//! Text encoders producing caption embeddings.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{CaptionError, Result};
use crate::pvle::{caption_hash, EmbeddingStore};

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub encoder_id: String,
    pub dimension: usize,
}

impl TextEmbedding {
    pub fn new(vector: Vec<f64>, encoder_id: impl Into<String>) -> Result<Self> {
        if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
            return Err(CaptionError::Malformed("embedding is empty or non-finite".into()));
        }
        Ok(Self {
            dimension: vector.len(),
            vector,
            encoder_id: encoder_id.into(),
        })
    }
}

pub trait TextEncoder {
    fn id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn encode(&self, caption: &str) -> Result<TextEmbedding>;
}

/// Unit vector seeded from SHA-256 of the seed and caption.
#[derive(Clone, Debug)]
pub struct MockEncoder {
    dimension: usize,
    seed: u64,
    id: String,
}

impl MockEncoder {
    pub fn new(dimension: usize, seed: u64) -> Result<Self> {
        if dimension == 0 {
            return Err(CaptionError::Invalid("encoder dimension must be positive".into()));
        }
        Ok(Self {
            dimension,
            seed,
            id: format!("mock-sha256-{seed}"),
        })
    }
}

impl TextEncoder for MockEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn encode(&self, caption: &str) -> Result<TextEmbedding> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(caption.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        loop {
            let v: Vec<f64> = (0..self.dimension).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                return TextEmbedding::new(v.into_iter().map(|x| x / norm).collect(), self.id.clone());
            }
        }
    }
}

/// Precomputed vectors looked up by caption hash.
#[derive(Clone, Debug)]
pub struct FileEncoder {
    store: EmbeddingStore,
    id: String,
}

impl FileEncoder {
    pub fn new(store: EmbeddingStore, id: impl Into<String>) -> Self {
        Self { store, id: id.into() }
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }
}

impl TextEncoder for FileEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.store.dimension()
    }

    fn encode(&self, caption: &str) -> Result<TextEmbedding> {
        let h = caption_hash(caption);
        let v = self
            .store
            .get(&h)
            .ok_or_else(|| CaptionError::LookupMiss(hex::encode(h)))?;
        TextEmbedding::new(v.iter().map(|&x| x as f64).collect(), self.id.clone())
    }
}

/// Embedding service speaking the common `{"model", "input"}` →
/// `{"data": [{"embedding": [...]}]}` protocol.
pub struct RemoteEncoder {
    url: String,
    api_key: String,
    model: String,
    dimension: usize,
    agent: ureq::Agent,
}

impl RemoteEncoder {
    pub fn new(url: &str, api_key: &str, model: &str, dimension: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::new_with_config(
            ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .http_status_as_error(false)
                .build(),
        );
        Self {
            url: url.to_string(),
            api_key: api_key.to_string(),
            model: model.to_string(),
            dimension,
            agent,
        }
    }
}

/// Extracts `data[0].embedding` from an embedding-service reply.
pub fn parse_embedding_response(body: &str) -> Result<Vec<f64>> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| CaptionError::Malformed(e.to_string()))?;
    let arr = v
        .pointer("/data/0/embedding")
        .and_then(|e| e.as_array())
        .ok_or_else(|| CaptionError::Malformed("no data[0].embedding array".into()))?;
    arr.iter()
        .map(|x| x.as_f64().ok_or_else(|| CaptionError::Malformed("embedding entry is not a number".into())))
        .collect()
}

impl TextEncoder for RemoteEncoder {
    fn id(&self) -> &str {
        &self.model
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn encode(&self, caption: &str) -> Result<TextEmbedding> {
        let body = serde_json::json!({ "model": self.model, "input": caption }).to_string();
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Authorization", format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(crate::client::transport_error)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(crate::client::transport_error)?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(CaptionError::Auth(status)),
            _ => return Err(CaptionError::Rejected { status, body: text }),
        }
        let v = parse_embedding_response(&text)?;
        if v.len() != self.dimension {
            return Err(CaptionError::Malformed(format!(
                "embedding of length {}, expected {}",
                v.len(),
                self.dimension
            )));
        }
        TextEmbedding::new(v, self.model.clone())
    }
}
