//! Dictionary-anchored semantic matching of paintings to photos.
//!
//! Each image is encoded, compared against every dictionary prompt, and
//! summarised as a softmax-normalised [`SemanticProfile`]. Photos are ranked
//! for a painting by cosine similarity between profiles, and the top `K`
//! become its training partners.

mod dataset;
mod dictionary;
mod encoder;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::{CorpusError, ImageRecord};
use crate::imaging::{Image, ImagingError};

pub use dataset::{build_clip_matched_dataset, profile_records, MatchingContext};
pub use dictionary::{
    build_dictionary, default_category_spec, default_dictionary, Dictionary, DictionaryEntry,
    PromptTemplate, DEFAULT_DICTIONARY_VERSION, DEFAULT_PROMPT_TEMPLATE,
};
pub use encoder::{
    CommandEncoder, EmbeddingCache, EmbeddingVector, ImageEncoder, StubImageEncoder,
    StubTextEncoder, TextEncoder, STUB_EMBEDDING_DIM,
};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("dictionary has no entries")]
    DictionaryEmpty,
    #[error("duplicate dictionary entry {category}/{keyword}")]
    DuplicateEntry { category: String, keyword: String },
    #[error("dictionary line {line}: {reason}")]
    DictionaryFormat { line: usize, reason: String },
    #[error("encoder backend {backend} unavailable: {diagnostics}")]
    EncoderUnavailable { backend: String, diagnostics: String },
    #[error("embedding is empty, zero or non-finite")]
    DegenerateEmbedding,
    #[error(transparent)]
    Decode(#[from] ImagingError),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionError { expected: usize, found: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("manifest `{0}` has no records of the required domain")]
    EmptyManifest(String),
    #[error("K must be at least 1")]
    InvalidK,
    #[error("K = {k} exceeds the {available} available candidates")]
    InsufficientCandidates { k: usize, available: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Softmax weights of one image over the dictionary axes.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticProfile {
    pub image_id: String,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub painting_id: String,
    /// `(photo_id, score)`, best first.
    pub matches: Vec<(String, f64)>,
}

/// An encoded image and whether it came from the cache.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    pub vector: EmbeddingVector,
    pub cache_hit: bool,
}

/// Encodes every dictionary prompt, in dictionary order.
pub fn encode_texts(
    dictionary: &Dictionary,
    encoder: &dyn TextEncoder,
) -> Result<Vec<EmbeddingVector>, MatchError> {
    let vectors = dictionary
        .entries
        .iter()
        .map(|e| EmbeddingVector::normalized(encoder.encode_text(&e.prompt)?))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(first) = vectors.first() {
        if let Some(bad) = vectors.iter().find(|v| v.dim() != first.dim()) {
            return Err(MatchError::DimensionError {
                expected: first.dim(),
                found: bad.dim(),
            });
        }
    }
    Ok(vectors)
}

/// Encodes one corpus image, consulting `cache` first.
pub fn encode_image(
    record: &ImageRecord,
    encoder: &dyn ImageEncoder,
    cache: &EmbeddingCache,
) -> Result<EncodedImage, MatchError> {
    if let Some(vector) = cache.get(&record.checksum, encoder.version()) {
        return Ok(EncodedImage {
            vector,
            cache_hit: true,
        });
    }
    let image = Image::open(&record.path)?;
    let vector = EmbeddingVector::normalized(encoder.encode_image(&record.path, &image)?)?;
    cache.put(&record.checksum, encoder.version(), &vector)?;
    Ok(EncodedImage {
        vector,
        cache_hit: false,
    })
}

/// Cosine similarity; zero when either side is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// `softmax(cosine(image, text_k) / temperature)` over the dictionary axes.
pub fn semantic_profile(
    image_id: &str,
    image_embedding: &[f64],
    text_embeddings: &[EmbeddingVector],
    temperature: f64,
) -> Result<SemanticProfile, MatchError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(MatchError::InvalidTemperature(temperature));
    }
    if text_embeddings.is_empty() {
        return Err(MatchError::DictionaryEmpty);
    }
    let logits = text_embeddings
        .iter()
        .map(|t| {
            if t.dim() != image_embedding.len() {
                return Err(MatchError::DimensionError {
                    expected: t.dim(),
                    found: image_embedding.len(),
                });
            }
            Ok(cosine(image_embedding, t.values()) / temperature)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SemanticProfile {
        image_id: image_id.to_owned(),
        weights: softmax(&logits),
    })
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Heap entry ordered so that the *worst* candidate is the heap maximum:
/// lower score is worse, and on equal score the larger id is worse.
struct Candidate<'a> {
    score: f64,
    id: &'a str,
}

impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.id.cmp(other.id))
    }
}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate<'_> {}

/// The `k` photos whose profiles are most cosine-similar to the painting's,
/// best first; equal scores are ordered by ascending photo id.
pub fn match_top_k(
    painting: &SemanticProfile,
    photos: &[SemanticProfile],
    k: usize,
) -> Result<MatchResult, MatchError> {
    if k == 0 {
        return Err(MatchError::InvalidK);
    }
    if k > photos.len() {
        return Err(MatchError::InsufficientCandidates {
            k,
            available: photos.len(),
        });
    }
    let mut heap: BinaryHeap<Candidate<'_>> = BinaryHeap::with_capacity(k + 1);
    for photo in photos {
        if photo.weights.len() != painting.weights.len() {
            return Err(MatchError::DimensionError {
                expected: painting.weights.len(),
                found: photo.weights.len(),
            });
        }
        let candidate = Candidate {
            score: cosine(&painting.weights, &photo.weights),
            id: &photo.image_id,
        };
        if heap.len() < k {
            heap.push(candidate);
        } else if heap.peek().is_some_and(|worst| candidate < *worst) {
            heap.pop();
            heap.push(candidate);
        }
    }
    let matches = heap
        .into_sorted_vec()
        .into_iter()
        .map(|c| (c.id.to_owned(), c.score))
        .collect();
    Ok(MatchResult {
        painting_id: painting.image_id.clone(),
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalized(values.to_vec()).unwrap()
    }

    fn basis(dim: usize) -> Vec<EmbeddingVector> {
        (0..dim)
            .map(|i| {
                let mut v = vec![0.0; dim];
                v[i] = 1.0;
                unit(&v)
            })
            .collect()
    }

    fn profile(id: &str, w: &[f64]) -> SemanticProfile {
        SemanticProfile {
            image_id: id.into(),
            weights: w.to_vec(),
        }
    }

    #[test]
    fn exact_text_match_dominates_at_low_temperature() {
        let texts = basis(3);
        let p = semantic_profile("i", texts[1].values(), &texts, 1e-3).unwrap();
        assert!(p.weights[1] > 1.0 - 1e-12);
    }

    #[test]
    fn equal_cosines_give_uniform_weights() {
        let texts = basis(4);
        let p = semantic_profile("i", &[1.0, 1.0, 1.0, 1.0], &texts, 0.07).unwrap();
        for w in p.weights {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_against_scalar_oracle() {
        // Image direction chosen so the cosines against the basis are
        // (0.9, 0.1, 0.1, 0.1) after normalization of the image vector.
        let raw = [0.9, 0.1, 0.1, 0.1];
        let texts = basis(4);
        let p = semantic_profile("i", &raw, &texts, 0.07).unwrap();
        let norm = raw.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        let cos: Vec<f64> = raw.iter().map(|v| v / norm).collect();
        let e: Vec<f64> = cos.iter().map(|c| (c / 0.07).exp()).collect();
        let z: f64 = e.iter().sum();
        for (w, ei) in p.weights.iter().zip(&e) {
            assert!((w - ei / z).abs() < 1e-9);
        }
    }

    #[test]
    fn profile_rejects_bad_inputs() {
        let texts = basis(3);
        assert!(matches!(
            semantic_profile("i", &[1.0, 0.0], &texts, 0.07),
            Err(MatchError::DimensionError { .. })
        ));
        assert!(matches!(
            semantic_profile("i", &[1.0, 0.0, 0.0], &texts, 0.0),
            Err(MatchError::InvalidTemperature(_))
        ));
    }

    #[test]
    fn identical_profile_is_retrieved_with_score_one() {
        let painting = profile("p", &[0.7, 0.2, 0.1]);
        let photos = vec![
            profile("a", &[0.1, 0.2, 0.7]),
            profile("b", &[0.7, 0.2, 0.1]),
            profile("c", &[0.3, 0.3, 0.4]),
        ];
        let r = match_top_k(&painting, &photos, 1).unwrap();
        assert_eq!(r.matches[0].0, "b");
        assert!((r.matches[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_equal_to_pool_returns_a_permutation() {
        let painting = profile("p", &[0.5, 0.5]);
        let photos = vec![
            profile("z", &[0.9, 0.1]),
            profile("y", &[0.5, 0.5]),
            profile("x", &[0.1, 0.9]),
        ];
        let r = match_top_k(&painting, &photos, 3).unwrap();
        let mut ids: Vec<&str> = r.matches.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids[0], "y");
        ids.sort();
        assert_eq!(ids, vec!["x", "y", "z"]);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let painting = profile("p", &[1.0, 0.0]);
        let photos = vec![
            profile("c", &[0.5, 0.5]),
            profile("a", &[0.5, 0.5]),
            profile("b", &[0.5, 0.5]),
        ];
        let r = match_top_k(&painting, &photos, 2).unwrap();
        let ids: Vec<&str> = r.matches.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
    }

    #[test]
    fn invalid_k() {
        let painting = profile("p", &[1.0]);
        let photos = vec![profile("a", &[1.0])];
        assert!(matches!(match_top_k(&painting, &photos, 0), Err(MatchError::InvalidK)));
        assert!(matches!(
            match_top_k(&painting, &photos, 2),
            Err(MatchError::InsufficientCandidates { k: 2, available: 1 })
        ));
    }

    #[test]
    fn encode_texts_with_fixed_orthonormal_backend() {
        struct Fixed;
        impl TextEncoder for Fixed {
            fn version(&self) -> &str {
                "fixed"
            }
            fn encode_text(&self, text: &str) -> Result<Vec<f64>, MatchError> {
                Ok(match text {
                    "a photo of a pond" => vec![1.0, 0.0, 0.0],
                    "a photo of a stream" => vec![0.0, 2.0, 0.0],
                    _ => vec![0.0, 0.0, 3.0],
                })
            }
        }
        let spec = [("water".to_string(), vec!["waterfall".into(), "stream".into(), "pond".into()])]
            .into_iter()
            .collect();
        let d = build_dictionary(&spec, &PromptTemplate::default(), "t").unwrap();
        let v = encode_texts(&d, &Fixed).unwrap();
        assert_eq!(v.len(), 3);
        assert!(v.iter().all(EmbeddingVector::is_unit));
        assert_eq!(v[0].values(), &[1.0, 0.0, 0.0]);
        assert_eq!(encode_texts(&d, &Fixed).unwrap(), v);
    }

    #[test]
    fn unavailable_text_backend() {
        struct Down;
        impl TextEncoder for Down {
            fn version(&self) -> &str {
                "down"
            }
            fn encode_text(&self, _: &str) -> Result<Vec<f64>, MatchError> {
                Err(MatchError::EncoderUnavailable {
                    backend: "down".into(),
                    diagnostics: "connection refused".into(),
                })
            }
        }
        assert!(matches!(
            encode_texts(&default_dictionary(), &Down),
            Err(MatchError::EncoderUnavailable { .. })
        ));
    }
}
