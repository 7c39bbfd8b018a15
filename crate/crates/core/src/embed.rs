//! Text-embedding providers for conditioning the generator.
//!
//! Two providers share one interface: a deterministic offline fallback that
//! hashes token n-grams into a fixed-width vector (so the whole pipeline
//! trains and tests without network access), and a remote HTTP provider for
//! plugging in a real text encoder. Either way the result is a unit-norm
//! vector, cached on disk under the text's content hash.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default embedding width.
pub const DEFAULT_TEXT_DIM: usize = 512;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("text must be non-empty")]
    EmptyText,
    #[error("remote embedding service timed out after {0:?}")]
    Timeout(Duration),
    #[error("remote embedding service unreachable: {0}")]
    Unreachable(String),
    #[error("remote embedding service returned a malformed response: {0}")]
    MalformedResponse(String),
    #[error("remote embedding service returned status {0}")]
    ServiceStatus(u16),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A fixed-width, unit-norm embedding of one text.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f32>,
    pub provider_id: String,
    pub source_text_hash: String,
}

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn cosine(&self, other: &TextEmbedding) -> f32 {
        self.vector
            .iter()
            .zip(other.vector.iter())
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// SHA-256 of the exact text bytes; the cache key.
pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Anything that can map text to a raw (not yet normalized) vector.
pub trait EmbeddingProvider {
    fn name(&self) -> &str;
    fn dimensionality(&self) -> usize;
    /// Whether the same text is guaranteed to produce the same vector.
    fn deterministic(&self) -> bool;
    fn embed_raw(&self, text: &str) -> Result<Vec<f32>, EmbedError>;
}

/// Embed `text`, going through `cache` when one is provided.
///
/// The returned vector has unit Euclidean norm. Cache hits are returned
/// bit-exactly as stored; corrupted cache entries are treated as misses.
pub fn embed(
    text: &str,
    provider: &dyn EmbeddingProvider,
    cache: Option<&EmbeddingCache>,
) -> Result<TextEmbedding, EmbedError> {
    if text.is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let hash = text_hash(text);
    if let Some(cache) = cache {
        if let Some(hit) = cache.lookup(&hash)? {
            if hit.len() == provider.dimensionality() {
                return Ok(TextEmbedding {
                    vector: hit,
                    provider_id: provider.name().to_string(),
                    source_text_hash: hash,
                });
            }
            log::warn!(
                "cache entry {hash} has width {}, expected {}; re-embedding",
                hit.len(),
                provider.dimensionality()
            );
        }
    }
    let mut vector = provider.embed_raw(text)?;
    l2_normalize(&mut vector);
    if let Some(cache) = cache {
        cache.store(&hash, &vector)?;
    }
    Ok(TextEmbedding {
        vector,
        provider_id: provider.name().to_string(),
        source_text_hash: hash,
    })
}

fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

// ---------------------------------------------------------------------------
// Fallback provider
// ---------------------------------------------------------------------------

/// Deterministic, dependency-free embedding: lower-cased, whitespace-split
/// token n-grams (n = 1..3) are hashed into signed buckets of a `dim`-wide
/// vector. Not a learned representation; it exists so the conditioning
/// pathway can be exercised hermetically.
#[derive(Debug, Clone)]
pub struct FallbackProvider {
    dim: usize,
}

impl FallbackProvider {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Default for FallbackProvider {
    fn default() -> Self {
        Self::new(DEFAULT_TEXT_DIM)
    }
}

impl EmbeddingProvider for FallbackProvider {
    fn name(&self) -> &str {
        "fallback-ngram-v1"
    }

    fn dimensionality(&self) -> usize {
        self.dim
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let lowered = text.to_lowercase();
        let tokens: Vec<&str> = lowered.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut vector = vec![0.0f32; self.dim];
        for n in 1..=3usize {
            if tokens.len() < n {
                break;
            }
            for window in tokens.windows(n) {
                let gram = window.join("\u{1f}");
                let digest = Sha256::digest(gram.as_bytes());
                let bucket =
                    u64::from_le_bytes(digest[..8].try_into().unwrap()) as usize % self.dim;
                let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
                vector[bucket] += sign;
            }
        }
        if vector.iter().all(|&v| v == 0.0) {
            // pathological cancellation; pin a single deterministic bucket
            let digest = Sha256::digest(lowered.as_bytes());
            let bucket = u64::from_le_bytes(digest[..8].try_into().unwrap()) as usize % self.dim;
            vector[bucket] = 1.0;
        }
        Ok(vector)
    }
}

// ---------------------------------------------------------------------------
// Remote provider
// ---------------------------------------------------------------------------

/// HTTP provider: `POST {base_url}` with `{"text": "..."}`, expecting
/// `{"embedding": [floats]}` back.
#[derive(Debug, Clone)]
pub struct RemoteProvider {
    base_url: String,
    dim: usize,
    timeout: Duration,
    api_key: Option<String>,
}

impl RemoteProvider {
    pub fn new(base_url: String, dim: usize, timeout: Duration, api_key: Option<String>) -> Self {
        Self { base_url, dim, timeout, api_key }
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn name(&self) -> &str {
        "remote-http-v1"
    }

    fn dimensionality(&self) -> usize {
        self.dim
    }

    fn deterministic(&self) -> bool {
        false
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(self.timeout)
            .timeout(self.timeout)
            .build();
        let mut request = agent.post(&self.base_url);
        if let Some(key) = &self.api_key {
            request = request.set("authorization", &format!("Bearer {key}"));
        }
        let response = request
            .send_json(serde_json::json!({ "text": text }))
            .map_err(|e| match e {
                ureq::Error::Status(code, _) => EmbedError::ServiceStatus(code),
                ureq::Error::Transport(t) => {
                    let msg = t.to_string();
                    if matches!(t.kind(), ureq::ErrorKind::Io) && msg.contains("timed out") {
                        EmbedError::Timeout(self.timeout)
                    } else {
                        EmbedError::Unreachable(msg)
                    }
                }
            })?;
        let body: serde_json::Value = response
            .into_json()
            .map_err(|e| EmbedError::MalformedResponse(e.to_string()))?;
        let values = body
            .get("embedding")
            .and_then(|v| v.as_array())
            .ok_or_else(|| EmbedError::MalformedResponse("missing \"embedding\" array".into()))?;
        if values.is_empty() {
            return Err(EmbedError::MalformedResponse("empty embedding".into()));
        }
        values
            .iter()
            .map(|v| {
                v.as_f64()
                    .map(|f| f as f32)
                    .ok_or_else(|| EmbedError::MalformedResponse("non-numeric element".into()))
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

/// Write-once file cache: `<dir>/<text-hash>.emb`, little-endian f32 values.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

impl EmbeddingCache {
    pub fn new(dir: &Path) -> Result<Self, EmbedError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| EmbedError::Io { path: dir.to_path_buf(), source: e })?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn entry_path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.emb"))
    }

    /// A hit returns the stored vector bit-exactly; a corrupted entry (length
    /// not a multiple of 4, or unreadable) is a miss with a warning.
    pub fn lookup(&self, hash: &str) -> Result<Option<Vec<f32>>, EmbedError> {
        let path = self.entry_path(hash);
        let mut file = match std::fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(EmbedError::Io { path, source: e }),
        };
        let mut bytes = Vec::new();
        if let Err(e) = file.read_to_end(&mut bytes) {
            log::warn!("unreadable cache entry {}: {e}; treating as miss", path.display());
            return Ok(None);
        }
        if bytes.is_empty() || bytes.len() % 4 != 0 {
            log::warn!(
                "corrupted cache entry {} ({} bytes); treating as miss",
                path.display(),
                bytes.len()
            );
            return Ok(None);
        }
        let vector: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if vector.iter().any(|v| !v.is_finite()) {
            log::warn!("non-finite cache entry {}; treating as miss", path.display());
            return Ok(None);
        }
        Ok(Some(vector))
    }

    pub fn store(&self, hash: &str, vector: &[f32]) -> Result<(), EmbedError> {
        let path = self.entry_path(hash);
        let mut bytes = Vec::with_capacity(vector.len() * 4);
        for v in vector {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).map_err(|e| EmbedError::Io { path, source: e })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use std::net::TcpListener;
    use tempfile::tempdir;

    #[test]
    fn fallback_is_unit_norm() {
        let p = FallbackProvider::default();
        let e = embed("a person walks forward", &p, None).unwrap();
        let norm: f64 = e.vector.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        assert_eq!(e.dim(), DEFAULT_TEXT_DIM);
    }

    #[test]
    fn fallback_is_deterministic() {
        let p = FallbackProvider::default();
        let a = embed("A Person  Walks Forward", &p, None).unwrap();
        let b = embed("A Person  Walks Forward", &p, None).unwrap();
        assert_eq!(a.vector, b.vector);
    }

    #[test]
    fn distinct_texts_get_distinct_embeddings() {
        let p = FallbackProvider::default();
        let a = embed("a person walks forward", &p, None).unwrap();
        let b = embed("a person sits down", &p, None).unwrap();
        assert!(a.cosine(&b) < 0.99, "cosine {}", a.cosine(&b));
    }

    #[test]
    fn empty_text_rejected() {
        let p = FallbackProvider::default();
        assert!(matches!(embed("", &p, None), Err(EmbedError::EmptyText)));
        assert!(matches!(embed("   ", &p, None), Err(EmbedError::EmptyText)));
    }

    #[test]
    fn cache_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let cache = EmbeddingCache::new(dir.path()).unwrap();
        let p = FallbackProvider::new(16);
        let cold = embed("hello world", &p, Some(&cache)).unwrap();
        let warm = embed("hello world", &p, Some(&cache)).unwrap();
        for (a, b) in cold.vector.iter().zip(warm.vector.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn unknown_hash_is_a_miss() {
        let dir = tempdir().unwrap();
        let cache = EmbeddingCache::new(dir.path()).unwrap();
        assert!(cache.lookup(&text_hash("never stored")).unwrap().is_none());
    }

    #[test]
    fn corrupted_entry_is_a_miss_not_a_panic() {
        let dir = tempdir().unwrap();
        let cache = EmbeddingCache::new(dir.path()).unwrap();
        let hash = text_hash("poisoned");
        cache.store(&hash, &[0.5, 0.5, 0.5]).unwrap();
        // truncate to a non-multiple of 4 bytes
        let path = dir.path().join(format!("{hash}.emb"));
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..5]).unwrap();
        assert!(cache.lookup(&hash).unwrap().is_none());
        // embed falls back to recomputing and repairs the entry
        let p = FallbackProvider::new(8);
        let e = embed("poisoned", &p, Some(&cache)).unwrap();
        assert_eq!(cache.lookup(&hash).unwrap().unwrap(), e.vector);
    }

    fn spawn_server(body: &'static str) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            if let Ok((mut stream, _)) = listener.accept() {
                let mut buf = [0u8; 4096];
                let _ = std::io::Read::read(&mut stream, &mut buf);
                let response = format!(
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{}",
                    body.len(),
                    body
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        format!("http://{addr}")
    }

    #[test]
    fn remote_provider_parses_valid_response() {
        let url = spawn_server(r#"{"embedding": [3.0, 4.0]}"#);
        let p = RemoteProvider::new(url, 2, Duration::from_secs(2), None);
        let e = embed("hi", &p, None).unwrap();
        assert!((e.vector[0] - 0.6).abs() < 1e-6);
        assert!((e.vector[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn remote_malformed_response_is_distinct_error() {
        let url = spawn_server(r#"{"weights": [1.0]}"#);
        let p = RemoteProvider::new(url, 2, Duration::from_secs(2), None);
        assert!(matches!(
            embed("hi", &p, None),
            Err(EmbedError::MalformedResponse(_))
        ));
    }

    #[test]
    fn remote_unreachable_is_distinct_error() {
        // bind then drop to get a port that refuses connections
        let port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let p = RemoteProvider::new(
            format!("http://127.0.0.1:{port}"),
            2,
            Duration::from_millis(500),
            None,
        );
        match embed("hi", &p, None) {
            Err(EmbedError::Unreachable(_)) | Err(EmbedError::Timeout(_)) => {}
            other => panic!("expected connection failure, got {other:?}"),
        }
    }

    #[test]
    fn remote_timeout_is_distinct_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            // accept and stall without responding
            if let Ok((stream, _)) = listener.accept() {
                std::thread::sleep(Duration::from_secs(3));
                drop(stream);
            }
        });
        let p = RemoteProvider::new(
            format!("http://{addr}"),
            2,
            Duration::from_millis(300),
            None,
        );
        match embed("hi", &p, None) {
            Err(EmbedError::Timeout(_)) | Err(EmbedError::Unreachable(_)) => {}
            other => panic!("expected timeout, got {other:?}"),
        }
    }
}
