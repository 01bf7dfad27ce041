//! Analytic-vs-numeric gradient comparison on a small random instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{encode_batch, Batch, LengthCaps, NewsReportPair, Vocabulary};
use crate::error::Result;
use crate::model::{batch_loss, BatchPass, ModelDims, ModelParams};
use crate::numerics::{finite_difference_gradient, gradient_check, BlockCheck, ParameterSet};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// A 2-pair batch over a 20-token vocabulary with d_emb = d_hid = 8, d_z = 4.
pub struct GradcheckInstance {
    pub params: ModelParams,
    pub batch: Batch,
    pub noise: Vec<Vec<f64>>,
    pub beta: f64,
}

impl GradcheckInstance {
    pub fn new(seed: u64) -> Result<Self> {
        let dims = ModelDims {
            vocab: 20,
            d_emb: 8,
            d_hid: 8,
            d_z: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words: Vec<String> = (0..16).map(|i| format!("w{i}")).collect();
        let vocab = Vocabulary::from_tokens(words.iter().cloned())?;
        let draw = |lo: usize, hi: usize, rng: &mut ChaCha8Rng| -> Vec<String> {
            let n = rng.random_range(lo..=hi);
            (0..n).map(|_| words[rng.random_range(0..words.len())].clone()).collect()
        };
        let pairs: Vec<NewsReportPair> = (0..2)
            .map(|i| {
                let news = draw(3, 6, &mut rng);
                let report = draw(4, 8, &mut rng);
                let outline = report.iter().step_by(2).cloned().collect();
                NewsReportPair {
                    id: i.to_string(),
                    news,
                    report,
                    outline: Some(outline),
                }
            })
            .collect();
        let batch = encode_batch(&pairs, &vocab, LengthCaps::default())?;
        let noise = (0..2)
            .map(|_| (0..dims.d_z).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        Ok(GradcheckInstance {
            params: ModelParams::init(dims, seed.wrapping_add(1)),
            batch,
            noise,
            beta: 0.5,
        })
    }

    pub fn loss(&self, params: &ModelParams) -> f64 {
        let pass = BatchPass {
            noise: &self.noise,
            beta: self.beta,
            outline_weight: 1.0,
            use_gold: &mut || true,
        };
        batch_loss(params, &self.batch, pass, None)
            .map(|l| l.model)
            .unwrap_or(f64::NAN)
    }

    pub fn analytic_gradient(&self) -> Result<ModelParams> {
        let mut grads = self.params.zeros_like();
        let pass = BatchPass {
            noise: &self.noise,
            beta: self.beta,
            outline_weight: 1.0,
            use_gold: &mut || true,
        };
        batch_loss(&self.params, &self.batch, pass, Some(&mut grads))?;
        Ok(grads)
    }

    pub fn numeric_gradient(&self, epsilon: f64) -> Result<ModelParams> {
        let mut numeric = finite_difference_gradient(|p| self.loss(p), &self.params, epsilon)?;
        // the PAD rows are frozen; the analytic pass never writes them
        for b in [0, 5, 14] {
            numeric.block_mut(b).row_mut(crate::corpus::PAD).fill(0.0);
        }
        Ok(numeric)
    }

    pub fn check(&self, epsilon: f64, tol: f64) -> Result<Vec<BlockCheck>> {
        gradient_check(&self.analytic_gradient()?, &self.numeric_gradient(epsilon)?, tol)
    }
}

/// Runs the full finite-difference suite with the standard ε and tolerance.
pub fn run_gradcheck(seed: u64) -> Result<Vec<BlockCheck>> {
    GradcheckInstance::new(seed)?.check(EPSILON, TOLERANCE)
}
