//! Pairwise knowledge fusion: fine-tune a copy of the pivot toward the
//! minimum-cross-entropy fusion of its own and one source's distributions.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fusion::io::load_dist;
use crate::fusion::{fuse_mince, DistMatrix, MinceGranularity};
use crate::scalar::Element;

use super::data::DialogueSample;
use super::model::{shifted_labels, ToyLm, EMBED, OUT};
use super::TrainError;

/// Training knobs. The combination weight defaults to 0.9 and the block
/// length to 2048 tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Samples per update; 0 means the whole corpus.
    pub batch: usize,
    pub seed: u64,
    pub block_len: usize,
    pub mince: MinceGranularity,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.9,
            lr: 0.1,
            epochs: 20,
            batch: 0,
            seed: 0,
            block_len: 2048,
            mince: MinceGranularity::Sequence,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrainError::InvalidConfig(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::InvalidConfig(format!("lr must be a non-negative number, got {}", self.lr)));
        }
        if self.block_len < 2 {
            return Err(TrainError::InvalidConfig(format!("block_len must be at least 2, got {}", self.block_len)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean sample loss before this epoch's updates.
    pub loss: f64,
    pub clm: f64,
    pub fusion: f64,
}

#[derive(Debug, Clone)]
pub struct FuseOutcome<T> {
    pub model: ToyLm<T>,
    pub log: Vec<EpochLog>,
}

/// Fused teacher matrix for every sample, computed once from the untrained pivot.
pub fn fused_targets<T: Element>(
    pivot: &ToyLm<T>,
    teachers: &[DistMatrix<T>],
    corpus: &[DialogueSample],
    granularity: MinceGranularity,
) -> Result<Vec<DistMatrix<T>>, TrainError> {
    if teachers.len() != corpus.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} teacher matrices for {} samples",
            teachers.len(),
            corpus.len()
        )));
    }
    corpus
        .iter()
        .zip(teachers)
        .map(|(sample, teacher)| {
            let own = pivot.forward(&sample.token_ids)?;
            Ok(fuse_mince(&own, teacher, &shifted_labels(sample), granularity)?)
        })
        .collect()
}

/// Trains a copy of `pivot` on the combined objective by gradient descent.
/// Per-sample losses and gradients are averaged over each batch in corpus
/// order, so runs are bit-reproducible for a given seed.
pub fn pairwise_fuse<T: Element>(
    pivot: &ToyLm<T>,
    teachers: &[DistMatrix<T>],
    corpus: &[DialogueSample],
    config: &TrainConfig,
) -> Result<FuseOutcome<T>, TrainError> {
    config.validate()?;
    let fused = fused_targets(pivot, teachers, corpus, config.mince)?;
    train(pivot, corpus, Some(&fused), config)
}

/// Gradient descent on the combined objective, or on plain CLM when
/// `fused` is `None`.
pub fn train<T: Element>(
    init: &ToyLm<T>,
    corpus: &[DialogueSample],
    fused: Option<&[DistMatrix<T>]>,
    config: &TrainConfig,
) -> Result<FuseOutcome<T>, TrainError> {
    config.validate()?;
    let mut model = init.clone();
    let mut log = Vec::with_capacity(config.epochs);
    if corpus.is_empty() {
        return Ok(FuseOutcome { model, log });
    }
    let batch = if config.batch == 0 || config.batch >= corpus.len() {
        corpus.len()
    } else {
        config.batch
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let (v_n, d_n) = (model.vocab_size(), model.dim());
    for epoch in 0..config.epochs {
        if batch < corpus.len() {
            order.shuffle(&mut rng);
        }
        let (mut loss_sum, mut clm_sum, mut fusion_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(batch) {
            let mut g_embed = vec![0.0f64; v_n * d_n];
            let mut g_out = vec![0.0f64; d_n * v_n];
            for &s in chunk {
                let teacher = fused.map(|f| &f[s]);
                let eval = model.loss_and_grads(&corpus[s], teacher, config.lambda)?;
                if !eval.loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, sample: s });
                }
                loss_sum += eval.loss;
                clm_sum += eval.clm;
                fusion_sum += eval.fusion;
                for (acc, g) in g_embed.iter_mut().zip(eval.grads.tensors[EMBED].to_f64_vec()) {
                    *acc += g;
                }
                for (acc, g) in g_out.iter_mut().zip(eval.grads.tensors[OUT].to_f64_vec()) {
                    *acc += g;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            g_embed.iter_mut().chain(g_out.iter_mut()).for_each(|g| *g *= scale);
            model.apply_gradient(&g_embed, &g_out, config.lr);
        }
        let n = corpus.len() as f64;
        log.push(EpochLog {
            epoch,
            loss: loss_sum / n,
            clm: clm_sum / n,
            fusion: fusion_sum / n,
        });
    }
    Ok(FuseOutcome { model, log })
}

/// Mean combined loss of `model` over a corpus, without training.
pub fn evaluate<T: Element>(
    model: &ToyLm<T>,
    corpus: &[DialogueSample],
    fused: Option<&[DistMatrix<T>]>,
    lambda: f64,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (s, sample) in corpus.iter().enumerate() {
        total += model.loss_and_grads(sample, fused.map(|f| &f[s]), lambda)?.loss;
    }
    Ok(if corpus.is_empty() { 0.0 } else { total / corpus.len() as f64 })
}

/// Teacher file for sample `index` inside a teacher directory.
pub fn teacher_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("sample_{index:05}.st"))
}

/// Loads `sample_00000.st`, `sample_00001.st`, … for `count` samples.
pub fn load_teachers(dir: &Path, count: usize) -> Result<Vec<DistMatrix<f64>>, TrainError> {
    (0..count)
        .map(|i| {
            let path = teacher_path(dir, i);
            if !path.is_file() {
                return Err(TrainError::MissingTeacher {
                    index: i,
                    path: path.display().to_string(),
                });
            }
            Ok(load_dist(&path)?.matrix)
        })
        .collect()
}
