//! Temporal-coherence filtering over a pluggable embedding provider.
//!
//! A fixed number of equidistant frames is sampled per clip and embedded into
//! 768-dimensional feature vectors by an external model behind the
//! [`EmbeddingProvider`] trait. Clips whose consecutive-frame cosine
//! similarity averages below a threshold (black screens, cuts, stitching
//! corruption) are discarded.

use std::io::Read;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{GateDecision, RejectReason};
use crate::manifest::ClipRecord;
use crate::rng::derive_rng;

pub const EMBEDDING_DIM: usize = 768;

/// A 768-dimensional frame feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::MalformedResponse {
                message: format!(
                    "embedding has {} dimensions, expected {EMBEDDING_DIM}",
                    values.len()
                ),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding vector"));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(Error::ZeroNormVector);
        }
        Ok(EmbeddingVector { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Basis vector e_i, for tests and fixtures.
    pub fn basis(i: usize) -> Self {
        let mut values = vec![0.0; EMBEDDING_DIM];
        values[i] = 1.0;
        EmbeddingVector { values }
    }
}

/// Serves one embedding per (clip, frame index) request.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, record: &ClipRecord, frame_index: u32) -> Result<EmbeddingVector>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoherenceConfig {
    /// Equidistant frames sampled per clip.
    pub num_frames: u32,
    /// Accept iff the mean consecutive-pair cosine reaches this.
    pub min_mean_cosine: f64,
}

impl Default for CoherenceConfig {
    fn default() -> Self {
        CoherenceConfig {
            num_frames: 8,
            min_mean_cosine: 0.85,
        }
    }
}

impl CoherenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 2 {
            return Err(Error::InvalidConfig {
                field: "coherence.num_frames".into(),
                message: "must be at least 2".into(),
            });
        }
        if !(self.min_mean_cosine > -1.0 && self.min_mean_cosine <= 1.0) {
            return Err(Error::InvalidConfig {
                field: "coherence.min_mean_cosine".into(),
                message: "must lie in (-1, 1]".into(),
            });
        }
        Ok(())
    }
}

/// `k` equidistant indices over `0..frame_count`:
/// `floor(j * (frame_count - 1) / (k - 1))`, first 0, last `frame_count - 1`.
pub fn equidistant_indices(frame_count: u32, k: u32) -> Result<Vec<u32>> {
    if k < 2 || frame_count < k {
        return Err(Error::InsufficientFrames {
            clip_id: String::new(),
            got: frame_count as usize,
            need: k.max(2) as usize,
        });
    }
    Ok((0..k)
        .map(|j| (j as u64 * (frame_count as u64 - 1) / (k as u64 - 1)) as u32)
        .collect())
}

/// Cosine similarity in `[-1, 1]`; errors on a zero-norm input.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    let mut dot = 0f64;
    let mut na = 0f64;
    let mut nb = 0f64;
    for (x, y) in a.values.iter().zip(&b.values) {
        dot += *x as f64 * *y as f64;
        na += (*x as f64).powi(2);
        nb += (*y as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Scores one clip's temporal continuity and decides acceptance.
///
/// Returns the record with the score persisted under `scores["coherence"]`
/// alongside the decision.
pub fn coherence_filter(
    record: &ClipRecord,
    provider: &dyn EmbeddingProvider,
    cfg: &CoherenceConfig,
) -> Result<(ClipRecord, GateDecision)> {
    cfg.validate()?;
    let indices = match equidistant_indices(record.frame_count, cfg.num_frames) {
        Ok(v) => v,
        Err(Error::InsufficientFrames { got, need, .. }) => {
            return Err(Error::InsufficientFrames {
                clip_id: record.clip_id.clone(),
                got,
                need,
            })
        }
        Err(e) => return Err(e),
    };
    let embeddings: Vec<EmbeddingVector> = indices
        .iter()
        .map(|&i| provider.embed(record, i))
        .collect::<Result<_>>()?;
    let mut sum = 0f64;
    for pair in embeddings.windows(2) {
        sum += cosine_similarity(&pair[0], &pair[1])?;
    }
    let score = sum / (embeddings.len() - 1) as f64;

    let mut updated = record.clone();
    updated.scores.insert("coherence".to_string(), score);
    let decision = if score >= cfg.min_mean_cosine {
        GateDecision::accept()
    } else {
        GateDecision::reject(RejectReason::LowCoherence)
    };
    Ok((updated, decision))
}

/// Deterministic stand-in for a real embedding model.
///
/// Every vector is derived from stable hashes of the clip id and frame
/// index: a per-clip base direction plus a small per-frame perturbation, so
/// frames of one clip cohere while repeated calls are byte-identical.
#[derive(Debug, Default, Clone)]
pub struct DeterministicStubProvider;

impl EmbeddingProvider for DeterministicStubProvider {
    fn embed(&self, record: &ClipRecord, frame_index: u32) -> Result<EmbeddingVector> {
        let mut base_rng = derive_rng(0, &format!("stub-embed/{}", record.clip_id));
        let mut noise_rng = derive_rng(
            0,
            &format!("stub-embed/{}/{frame_index}", record.clip_id),
        );
        let values = (0..EMBEDDING_DIM)
            .map(|_| {
                let base: f32 = base_rng.gen_range(-1.0..1.0);
                let noise: f32 = noise_rng.gen_range(-1.0..1.0);
                base + 0.05 * noise
            })
            .collect();
        EmbeddingVector::new(values)
    }
}

/// Reads embeddings from per-clip sidecar files `<dir>/<clip_id>.emb`.
///
/// File layout, all little-endian: magic `EMB1`, `u32` entry count, the
/// `u32` frame indices, then the `f32` vectors in the same order.
#[derive(Debug, Clone)]
pub struct SidecarProvider {
    pub dir: PathBuf,
}

impl SidecarProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        SidecarProvider { dir: dir.into() }
    }

    fn sidecar_path(&self, clip_id: &str) -> PathBuf {
        self.dir.join(format!("{clip_id}.emb"))
    }
}

/// Writes a sidecar file in the layout [`SidecarProvider`] reads.
pub fn write_sidecar(path: &std::path::Path, entries: &[(u32, EmbeddingVector)]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + entries.len() * (4 + EMBEDDING_DIM * 4));
    buf.extend_from_slice(b"EMB1");
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (idx, _) in entries {
        buf.extend_from_slice(&idx.to_le_bytes());
    }
    for (_, vec) in entries {
        for v in vec.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

impl EmbeddingProvider for SidecarProvider {
    fn embed(&self, record: &ClipRecord, frame_index: u32) -> Result<EmbeddingVector> {
        let path = self.sidecar_path(&record.clip_id);
        let mut bytes = Vec::new();
        std::fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&path, e))?;
        let malformed = |message: String| Error::MalformedResponse { message };
        if bytes.len() < 8 || &bytes[..4] != b"EMB1" {
            return Err(malformed(format!("{}: bad sidecar header", path.display())));
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let index_end = 8 + count * 4;
        let expected = index_end + count * EMBEDDING_DIM * 4;
        if bytes.len() != expected {
            return Err(malformed(format!(
                "{}: sidecar is {} bytes, expected {expected}",
                path.display(),
                bytes.len()
            )));
        }
        let slot = (0..count).find(|&i| {
            u32::from_le_bytes(bytes[8 + i * 4..12 + i * 4].try_into().unwrap()) == frame_index
        });
        let Some(slot) = slot else {
            return Err(Error::MissingEmbedding {
                clip_id: record.clip_id.clone(),
                frame_index,
            });
        };
        let start = index_end + slot * EMBEDDING_DIM * 4;
        let values = (0..EMBEDDING_DIM)
            .map(|i| {
                let o = start + i * 4;
                f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap())
            })
            .collect();
        EmbeddingVector::new(values)
    }
}

/// Calls an external embedding service: `POST /embed` with the frame image,
/// retried with exponential backoff.
pub struct HttpEmbeddingProvider {
    endpoint: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    clip_id: &'a str,
    frame_index: u32,
    image_b64: String,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f32>,
}

impl HttpEmbeddingProvider {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpEmbeddingProvider {
            endpoint: endpoint.into(),
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn embed(&self, record: &ClipRecord, frame_index: u32) -> Result<EmbeddingVector> {
        use base64::Engine;
        let frame = record.frame_path(frame_index);
        let bytes = std::fs::read(&frame).map_err(|e| Error::io(&frame, e))?;
        let body = EmbedRequest {
            clip_id: &record.clip_id,
            frame_index,
            image_b64: base64::engine::general_purpose::STANDARD.encode(bytes),
        };
        let url = format!("{}/embed", self.endpoint.trim_end_matches('/'));
        let response: EmbedResponse = crate::vlm::retry_with_backoff(|| {
            let resp = self
                .client
                .post(&url)
                .json(&body)
                .send()
                .map_err(|e| e.to_string())?;
            if !resp.status().is_success() {
                return Err(format!("status {}", resp.status()));
            }
            resp.json().map_err(|e| e.to_string())
        })?;
        EmbeddingVector::new(response.vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::sample_record;

    #[test]
    fn equidistant_identity_when_k_equals_count() {
        assert_eq!(
            equidistant_indices(8, 8).unwrap(),
            vec![0, 1, 2, 3, 4, 5, 6, 7]
        );
    }

    #[test]
    fn equidistant_81_8_matches_floor_formula() {
        assert_eq!(
            equidistant_indices(81, 8).unwrap(),
            vec![0, 11, 22, 34, 45, 57, 68, 80]
        );
    }

    #[test]
    fn equidistant_too_few_frames_errors() {
        assert!(equidistant_indices(2, 8).is_err());
    }

    #[test]
    fn cosine_of_self_is_one() {
        let v = EmbeddingVector::basis(5);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_orthogonal_is_zero() {
        let a = EmbeddingVector::basis(0);
        let b = EmbeddingVector::basis(1);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cosine_matches_hand_dot_norm() {
        let a = EmbeddingVector::basis(0);
        let mut vals = vec![0.0; EMBEDDING_DIM];
        vals[0] = 1.0;
        vals[1] = 1.0;
        let b = EmbeddingVector::new(vals).unwrap();
        let got = cosine_similarity(&a, &b).unwrap();
        assert!((got - 1.0 / 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn zero_vector_is_rejected_at_construction() {
        assert!(matches!(
            EmbeddingVector::new(vec![0.0; EMBEDDING_DIM]),
            Err(Error::ZeroNormVector)
        ));
    }

    struct FixedProvider(Vec<(u32, EmbeddingVector)>);

    impl EmbeddingProvider for FixedProvider {
        fn embed(&self, record: &ClipRecord, frame_index: u32) -> Result<EmbeddingVector> {
            self.0
                .iter()
                .find(|(i, _)| *i == frame_index)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::MissingEmbedding {
                    clip_id: record.clip_id.clone(),
                    frame_index,
                })
        }
    }

    fn record_with_frames(n: u32) -> ClipRecord {
        let mut r = sample_record("c0");
        r.frame_count = n;
        r
    }

    #[test]
    fn identical_embeddings_score_one_and_pass() {
        let r = record_with_frames(8);
        let provider = FixedProvider((0..8).map(|i| (i, EmbeddingVector::basis(0))).collect());
        let (updated, decision) =
            coherence_filter(&r, &provider, &CoherenceConfig::default()).unwrap();
        assert!(decision.accepted);
        assert!((updated.scores["coherence"] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_orthogonal_frame_scores_five_sevenths_and_fails() {
        let r = record_with_frames(8);
        let provider = FixedProvider(
            (0..8)
                .map(|i| {
                    let v = if i == 3 {
                        EmbeddingVector::basis(1)
                    } else {
                        EmbeddingVector::basis(0)
                    };
                    (i, v)
                })
                .collect(),
        );
        let (updated, decision) =
            coherence_filter(&r, &provider, &CoherenceConfig::default()).unwrap();
        assert!(!decision.accepted);
        assert_eq!(decision.reason, RejectReason::LowCoherence);
        assert!((updated.scores["coherence"] - 5.0 / 7.0).abs() < 1e-9);
    }

    #[test]
    fn missing_embedding_names_clip_and_frame() {
        let mut r = record_with_frames(81);
        r.clip_id = "clip_x".into();
        // Serve everything except index 34.
        let provider = FixedProvider(
            [0u32, 11, 22, 45, 57, 68, 80]
                .iter()
                .map(|&i| (i, EmbeddingVector::basis(0)))
                .collect(),
        );
        let err = coherence_filter(&r, &provider, &CoherenceConfig::default()).unwrap_err();
        match err {
            Error::MissingEmbedding {
                clip_id,
                frame_index,
            } => {
                assert_eq!(clip_id, "clip_x");
                assert_eq!(frame_index, 34);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn score_is_invariant_under_uniform_scaling() {
        let r = record_with_frames(8);
        let scale = |v: &EmbeddingVector, s: f32| {
            EmbeddingVector::new(v.values().iter().map(|x| x * s).collect()).unwrap()
        };
        let base: Vec<(u32, EmbeddingVector)> = (0..8)
            .map(|i| {
                let mut vals = vec![0.0f32; EMBEDDING_DIM];
                vals[0] = 1.0;
                vals[(i % 4 + 1) as usize] = 0.3;
                (i, EmbeddingVector::new(vals).unwrap())
            })
            .collect();
        // Power-of-two scale stays exact in f32.
        let scaled: Vec<(u32, EmbeddingVector)> =
            base.iter().map(|(i, v)| (*i, scale(v, 8.0))).collect();
        let cfg = CoherenceConfig::default();
        let (a, _) = coherence_filter(&r, &FixedProvider(base), &cfg).unwrap();
        let (b, _) = coherence_filter(&r, &FixedProvider(scaled), &cfg).unwrap();
        assert!((a.scores["coherence"] - b.scores["coherence"]).abs() < 1e-9);
    }

    #[test]
    fn stub_provider_is_deterministic_and_coherent() {
        let r = record_with_frames(100);
        let stub = DeterministicStubProvider;
        let a = stub.embed(&r, 3).unwrap();
        let b = stub.embed(&r, 3).unwrap();
        assert_eq!(a, b);
        let (updated, decision) =
            coherence_filter(&r, &stub, &CoherenceConfig::default()).unwrap();
        assert!(decision.accepted, "score {}", updated.scores["coherence"]);
    }

    #[test]
    fn sidecar_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let r = record_with_frames(8);
        let entries: Vec<(u32, EmbeddingVector)> = (0..8)
            .map(|i| (i, EmbeddingVector::basis(i as usize)))
            .collect();
        write_sidecar(&dir.path().join("c0.emb"), &entries).unwrap();
        let provider = SidecarProvider::new(dir.path());
        let v = provider.embed(&r, 5).unwrap();
        assert_eq!(v, EmbeddingVector::basis(5));
        assert!(matches!(
            provider.embed(&r, 99).unwrap_err(),
            Error::MissingEmbedding {
                frame_index: 99,
                ..
            }
        ));
    }
}
