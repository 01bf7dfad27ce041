//! Joint optimization of the outline and report losses.
//!
//! Reduction: token losses are summed within an example and averaged over
//! the batch. Each step clips the global gradient norm and applies one Adam
//! update. All randomness comes from seeded ChaCha streams:
//!
//! * stream 0: parameter initialization
//! * stream 1: latent noise and teacher-forcing coin flips
//! * stream 2 + e: the shuffle of epoch `e`

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_batch, Batch, LengthCaps, NewsReportPair, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{batch_loss, joint_loss, BatchPass, ModelDims, ModelParams, BLOCK_NAMES};
use crate::numerics::{ParameterSet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: u64,
    pub clip_norm: f64,
    pub teacher_forcing: f64,
    pub kl_anneal_steps: u64,
    pub seed: u64,
    /// `None` picks `max(3, ⌈L_y / 8⌉)` per report.
    pub outline_k: Option<usize>,
    /// Weight on the outline loss in the optimized objective.
    pub outline_weight: f64,
    pub freeze_outline: bool,
    pub d_emb: usize,
    pub d_hid: usize,
    pub d_z: usize,
    pub caps: LengthCaps,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            max_epochs: 50,
            clip_norm: 5.0,
            teacher_forcing: 1.0,
            kl_anneal_steps: 500,
            seed: 0,
            outline_k: None,
            outline_weight: 1.0,
            freeze_outline: false,
            d_emb: 64,
            d_hid: 64,
            d_z: 32,
            caps: LengthCaps::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate >= 0.0),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("adam_eps", self.adam_eps > 0.0),
            ("batch_size", self.batch_size >= 1),
            ("clip_norm", self.clip_norm > 0.0),
            ("teacher_forcing", (0.0..=1.0).contains(&self.teacher_forcing)),
            ("outline_weight", self.outline_weight >= 0.0),
            ("d_emb", self.d_emb >= 1),
            ("d_hid", self.d_hid >= 1),
            ("d_z", self.d_z >= 1),
            ("outline_k", self.outline_k != Some(0)),
        ];
        for (key, ok) in positive {
            if !ok {
                return Err(Error::Invalid(format!("train.{key} is out of range")));
            }
        }
        Ok(())
    }

    pub fn dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            d_emb: self.d_emb,
            d_hid: self.d_hid,
            d_z: self.d_z,
        }
    }
}

/// One bias-corrected Adam update on a single tensor. `t` is 1-based.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    cfg: &TrainingConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let (p, g) = (param.data_mut(), grad.data());
    let (m, v) = (m.data_mut(), v.data_mut());
    for k in 0..p.len() {
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
        let m_hat = m[k] / bc1;
        let v_hat = v[k] / bc2;
        p[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

/// Scales `grads` so its global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.blocks_mut() {
            t.scale(s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub epoch: u64,
    /// Number of updates applied, this one included.
    pub step: u64,
    pub beta: f64,
    pub outline: f64,
    pub report: f64,
    pub kl: f64,
    pub model: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u64,
    pub step: u64,
    pub outline: f64,
    pub report: f64,
    pub model: f64,
}

/// Running sums for the epoch currently in progress.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochAccumulator {
    pub outline: f64,
    pub report: f64,
    pub batches: u64,
}

pub enum TrainEvent<'a> {
    Step(&'a StepReport),
    Epoch(&'a EpochReport),
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainingState {
    pub config: TrainingConfig,
    pub params: ModelParams,
    pub adam_m: ModelParams,
    pub adam_v: ModelParams,
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Batches already consumed in the epoch in progress.
    pub batch_cursor: usize,
    pub noise_rng: ChaCha8Rng,
    pub accumulator: EpochAccumulator,
}

impl TrainingState {
    pub fn new(config: TrainingConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(config.dims(vocab_size), config.seed);
        let adam_m = params.zeros_like();
        let adam_v = params.zeros_like();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
        noise_rng.set_stream(1);
        Ok(TrainingState {
            config,
            params,
            adam_m,
            adam_v,
            step: 0,
            epoch: 0,
            batch_cursor: 0,
            noise_rng,
            accumulator: EpochAccumulator::default(),
        })
    }

    /// Linear KL annealing from 0 to 1 over `kl_anneal_steps` updates.
    pub fn kl_weight(&self) -> f64 {
        if self.config.kl_anneal_steps == 0 {
            1.0
        } else {
            (self.step as f64 / self.config.kl_anneal_steps as f64).min(1.0)
        }
    }

    /// One forward/backward/update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let beta = self.kl_weight();
        let d_z = self.params.dims.d_z;
        let noise: Vec<Vec<f64>> = (0..batch.len())
            .map(|_| (0..d_z).map(|_| self.noise_rng.sample(StandardNormal)).collect())
            .collect();
        let ratio = self.config.teacher_forcing;
        let rng = &mut self.noise_rng;
        let mut use_gold = || ratio >= 1.0 || rng.random::<f64>() < ratio;
        let mut grads = self.params.zeros_like();
        let loss = batch_loss(
            &self.params,
            batch,
            BatchPass {
                noise: &noise,
                beta,
                outline_weight: self.config.outline_weight,
                use_gold: &mut use_gold,
            },
            Some(&mut grads),
        )?;
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let t = self.step + 1;
        let frozen = self.config.freeze_outline;
        let params = self.params.blocks_mut();
        let ms = self.adam_m.blocks_mut();
        let vs = self.adam_v.blocks_mut();
        let gs = grads.blocks();
        for (i, name) in BLOCK_NAMES.iter().enumerate() {
            if frozen && name.starts_with("outline.") {
                continue;
            }
            adam_step(params[i], gs[i], ms[i], vs[i], t, &self.config);
        }
        self.step = t;
        Ok(StepReport {
            epoch: self.epoch + 1,
            step: t,
            beta,
            outline: loss.parts.outline,
            report: loss.parts.report,
            kl: loss.parts.kl,
            model: loss.model,
            grad_norm,
        })
    }

    /// Example order for the epoch in progress.
    pub fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(2 + self.epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Trains until `epochs` epochs are complete or `stop_at_step` updates
    /// have been applied, whichever comes first. Resumes mid-epoch.
    pub fn train(
        &mut self,
        pairs: &[NewsReportPair],
        vocab: &Vocabulary,
        epochs: u64,
        stop_at_step: Option<u64>,
        observer: &mut dyn FnMut(TrainEvent<'_>),
    ) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::Empty("training pairs"));
        }
        let bs = self.config.batch_size;
        while self.epoch < epochs {
            let order = self.epoch_order(pairs.len());
            let batches: Vec<&[usize]> = order.chunks(bs).collect();
            while self.batch_cursor < batches.len() {
                if stop_at_step.is_some_and(|s| self.step >= s) {
                    return Ok(());
                }
                let chosen: Vec<NewsReportPair> =
                    batches[self.batch_cursor].iter().map(|&i| pairs[i].clone()).collect();
                let batch = encode_batch(&chosen, vocab, self.config.caps)?;
                let report = self.train_step(&batch)?;
                self.accumulator.outline += report.outline;
                self.accumulator.report += report.report;
                self.accumulator.batches += 1;
                self.batch_cursor += 1;
                observer(TrainEvent::Step(&report));
            }
            let n = self.accumulator.batches as f64;
            let outline = self.accumulator.outline / n;
            let report = self.accumulator.report / n;
            let epoch_report = EpochReport {
                epoch: self.epoch + 1,
                step: self.step,
                outline,
                report,
                model: joint_loss(self.config.outline_weight * outline, report)?,
            };
            self.epoch += 1;
            self.batch_cursor = 0;
            self.accumulator = EpochAccumulator::default();
            observer(TrainEvent::Epoch(&epoch_report));
        }
        Ok(())
    }
}

/// Deterministic corpus loss: gold inputs, latent noise fixed at zero.
pub fn evaluate_loss(
    params: &ModelParams,
    pairs: &[NewsReportPair],
    vocab: &Vocabulary,
    caps: LengthCaps,
    beta: f64,
    outline_weight: f64,
) -> Result<EpochReport> {
    let batch = encode_batch(pairs, vocab, caps)?;
    let noise = vec![vec![0.0; params.dims.d_z]; batch.len()];
    let loss = batch_loss(
        params,
        &batch,
        BatchPass {
            noise: &noise,
            beta,
            outline_weight,
            use_gold: &mut || true,
        },
        None,
    )?;
    Ok(EpochReport {
        epoch: 0,
        step: 0,
        outline: loss.parts.outline,
        report: loss.parts.report,
        model: loss.model,
    })
}
