use rayon::prelude::*;

use super::{
    encode_image, encode_texts, match_top_k, semantic_profile, Dictionary, EmbeddingCache,
    EmbeddingVector, ImageEncoder, MatchError, SemanticProfile, TextEncoder,
};
use crate::corpus::{DatasetManifest, DomainTag, ImageRecord, Pair};

/// Encoders, cache and softmax temperature shared by a matching run.
pub struct MatchingContext<'a> {
    pub text_encoder: &'a dyn TextEncoder,
    pub image_encoder: &'a dyn ImageEncoder,
    pub cache: &'a EmbeddingCache,
    pub temperature: f64,
}

/// Profiles for `records`, in input order. Encoding fans out across threads;
/// every encoded image is written to the cache as soon as it is computed, so
/// an interrupted run resumes from the cache.
pub fn profile_records(
    records: &[&ImageRecord],
    text_embeddings: &[EmbeddingVector],
    ctx: &MatchingContext<'_>,
) -> Result<Vec<SemanticProfile>, MatchError> {
    records
        .par_iter()
        .map(|r| {
            let encoded = encode_image(r, ctx.image_encoder, ctx.cache)?;
            semantic_profile(&r.id, encoded.vector.values(), text_embeddings, ctx.temperature)
        })
        .collect()
}

/// Pairs every painting with its `k` best-matching photos.
///
/// The result holds all painting and photo records of both inputs and
/// exactly `k` pairs per painting, ranked `1..=k`.
pub fn build_clip_matched_dataset(
    paintings: &DatasetManifest,
    photos: &DatasetManifest,
    dictionary: &Dictionary,
    k: usize,
    ctx: &MatchingContext<'_>,
) -> Result<DatasetManifest, MatchError> {
    if k == 0 {
        return Err(MatchError::InvalidK);
    }
    let painting_records: Vec<&ImageRecord> = paintings.records_with_tag(DomainTag::Painting).collect();
    let photo_records: Vec<&ImageRecord> = photos.records_with_tag(DomainTag::Photo).collect();
    if painting_records.is_empty() {
        return Err(MatchError::EmptyManifest(paintings.name.clone()));
    }
    if photo_records.is_empty() {
        return Err(MatchError::EmptyManifest(photos.name.clone()));
    }
    if k > photo_records.len() {
        return Err(MatchError::InsufficientCandidates {
            k,
            available: photo_records.len(),
        });
    }

    let texts = encode_texts(dictionary, ctx.text_encoder)?;
    let painting_profiles = profile_records(&painting_records, &texts, ctx)?;
    let photo_profiles = profile_records(&photo_records, &texts, ctx)?;

    let results = painting_profiles
        .par_iter()
        .map(|p| match_top_k(p, &photo_profiles, k))
        .collect::<Result<Vec<_>, _>>()?;

    let mut manifest = DatasetManifest::new(
        format!("{}+{}-k{k}", paintings.name, photos.name),
        format!(
            "1-to-{k} matching; dictionary {} ({} entries); text encoder {}; image encoder {}; temperature {}",
            dictionary.version,
            dictionary.len(),
            ctx.text_encoder.version(),
            ctx.image_encoder.version(),
            ctx.temperature
        ),
    );
    manifest.records = painting_records
        .iter()
        .chain(&photo_records)
        .map(|r| (*r).clone())
        .collect();
    manifest.pairs = results
        .into_iter()
        .flat_map(|r| {
            let painting_id = r.painting_id;
            r.matches
                .into_iter()
                .enumerate()
                .map(move |(i, (photo_id, score))| Pair {
                    painting_id: painting_id.clone(),
                    photo_id,
                    rank: i as u32 + 1,
                    score,
                })
        })
        .collect();
    Ok(manifest)
}
