use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{write_checkpoint, CheckpointMetadata, LossLog};
use super::loss::{adversarial_term, record_objective, Batches, LossReport};
use super::{images_to_batch, TrainConfig, TranslationError, TranslatorPair};
use crate::autodiff::Tape;
use crate::corpus::{DatasetManifest, DomainTag};
use crate::imaging::Image;

/// Square training images of both domains.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub ori: Vec<Image>,
    pub photo: Vec<Image>,
}

impl TrainingData {
    /// Decodes the paired paintings and the matched photo subset of
    /// `manifest`. Without pairs, every painting and photo record is used.
    pub fn from_manifest(manifest: &DatasetManifest, image_size: usize) -> Result<Self, TranslationError> {
        let (ori_ids, photo_ids): (BTreeSet<&str>, BTreeSet<&str>) = if manifest.pairs.is_empty() {
            (
                manifest.records_with_tag(DomainTag::Painting).map(|r| r.id.as_str()).collect(),
                manifest.records_with_tag(DomainTag::Photo).map(|r| r.id.as_str()).collect(),
            )
        } else {
            (
                manifest.pairs.iter().map(|p| p.painting_id.as_str()).collect(),
                manifest.pairs.iter().map(|p| p.photo_id.as_str()).collect(),
            )
        };
        let load = |ids: &BTreeSet<&str>| -> Result<Vec<Image>, TranslationError> {
            let records = ids
                .iter()
                .map(|id| {
                    manifest.record(id).ok_or_else(|| {
                        TranslationError::Corpus(crate::corpus::CorpusError::Invalid(format!(
                            "pair references unknown id {id}"
                        )))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            records
                .par_iter()
                .map(|r| Ok(Image::open(&r.path)?.resized(image_size, image_size)))
                .collect()
        };
        let data = Self {
            ori: load(&ori_ids)?,
            photo: load(&photo_ids)?,
        };
        if data.ori.is_empty() || data.photo.is_empty() {
            return Err(TranslationError::MissingDomain);
        }
        Ok(data)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One descent step along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Where to persist checkpoints and the loss stream, plus provenance.
#[derive(Debug, Clone)]
pub struct RunTarget<'a> {
    pub root: &'a Path,
    pub dictionary_hash: Option<String>,
    pub manifest_hash: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
}

fn sample_batch<'a>(pool: &'a [Image], n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a Image> {
    (0..n).map(|_| &pool[rng.random_range(0..pool.len())]).collect()
}

/// Alternating optimization of the weighted objective: generators descend
/// on the full objective, then discriminators ascend on the adversarial
/// terms against freshly generated fakes.
///
/// Deterministic for a fixed seed, data order and platform.
pub fn train(
    pair: &mut TranslatorPair,
    data: &TrainingData,
    config: &TrainConfig,
    target: Option<RunTarget<'_>>,
) -> Result<TrainOutcome, TranslationError> {
    config.validate()?;
    if data.ori.is_empty() || data.photo.is_empty() {
        return Err(TranslationError::MissingDomain);
    }
    let gen_len = pair.gen_photo_to_ori.parameter_count() + pair.gen_ori_to_photo.parameter_count();
    let disc_len = pair.disc_ori.parameter_count() + pair.disc_photo.parameter_count();
    let mut gen_opt = Adam::new(gen_len, config.learning_rate, config.beta1, config.beta2);
    let mut disc_opt = Adam::new(disc_len, config.learning_rate, config.beta1, config.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut outcome = TrainOutcome::default();
    let mut log = match &target {
        Some(t) => Some(LossLog::open(t.root)?),
        None => None,
    };
    let save = |pair: &TranslatorPair, outcome: &mut TrainOutcome| -> Result<(), TranslationError> {
        if let Some(t) = &target {
            let meta = CheckpointMetadata {
                step: pair.step,
                config: config.clone(),
                dictionary_hash: t.dictionary_hash.clone(),
                manifest_hash: t.manifest_hash.clone(),
            };
            outcome.checkpoints.push(write_checkpoint(t.root, pair, &meta)?);
        }
        Ok(())
    };
    save(pair, &mut outcome)?;

    for i in 0..config.iterations {
        let step = pair.step + 1;
        let ori = images_to_batch(&sample_batch(&data.ori, config.batch_size, &mut rng))?;
        let photo = images_to_batch(&sample_batch(&data.photo, config.batch_size, &mut rng))?;

        let objective = record_objective(pair, Batches { ori: &ori, photo: &photo }, config)?;
        let report = objective.report(step);
        if !report.total.is_finite() {
            return Err(TranslationError::DivergedTraining {
                step,
                last_checkpoint: outcome.checkpoints.last().cloned(),
            });
        }
        let grad = objective.gradient();
        drop(objective);

        let mut gen_params = pair.gen_photo_to_ori.parameters();
        gen_params.extend(pair.gen_ori_to_photo.parameters());
        gen_opt.step(&mut gen_params, &grad[..gen_len]);
        let split = pair.gen_photo_to_ori.parameter_count();
        pair.gen_photo_to_ori.set_parameters(&gen_params[..split]);
        pair.gen_ori_to_photo.set_parameters(&gen_params[split..]);

        let disc_grad = discriminator_gradient(pair, &ori, &photo, config);
        let ascent: Vec<f64> = disc_grad.iter().map(|g| -g).collect();
        let mut disc_params = pair.disc_ori.parameters();
        disc_params.extend(pair.disc_photo.parameters());
        disc_opt.step(&mut disc_params, &ascent);
        let split = pair.disc_ori.parameter_count();
        pair.disc_ori.set_parameters(&disc_params[..split]);
        pair.disc_photo.set_parameters(&disc_params[split..]);

        pair.step = step;
        if let Some(log) = log.as_mut() {
            log.append(&report)?;
        }
        outcome.reports.push(report);
        if step % config.checkpoint_every == 0 || i + 1 == config.iterations {
            save(pair, &mut outcome)?;
        }
    }
    Ok(outcome)
}

/// Gradient of `adv_ori + lambda_adv * adv_photo` with respect to both
/// discriminators, with the generators' outputs held fixed.
fn discriminator_gradient(
    pair: &TranslatorPair,
    ori: &crate::autodiff::Tensor,
    photo: &crate::autodiff::Tensor,
    config: &TrainConfig,
) -> Vec<f64> {
    let fake_ori = pair.gen_photo_to_ori.apply(photo.clone());
    let fake_photo = pair.gen_ori_to_photo.apply(ori.clone());
    let mut tape = Tape::new();
    let d_ori = pair.disc_ori.bind(&mut tape);
    let d_photo = pair.disc_photo.bind(&mut tape);
    let (o, p) = (tape.leaf(ori.clone()), tape.leaf(photo.clone()));
    let (fo, fp) = (tape.leaf(fake_ori), tape.leaf(fake_photo));
    let a = adversarial_term(&mut tape, &pair.disc_ori, &d_ori, o, fo, config.adversarial);
    let b = adversarial_term(&mut tape, &pair.disc_photo, &d_photo, p, fp, config.adversarial);
    let root = tape.linear(&[(a, 1.0), (b, config.lambda_adv)]);
    let grads = tape.backward(root);
    let mut g = d_ori.gradient(&grads);
    g.extend(d_photo.gradient(&grads));
    g
}
