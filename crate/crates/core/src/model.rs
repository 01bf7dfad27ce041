//! The full news → outline → report network: parameters, forward pass
//! and hand-derived backward pass for one example or a batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, ExampleIds};
use crate::encoder::{encoder_backward, encoder_forward, EncoderParams, EncoderTrace};
use crate::error::{Error, Result};
use crate::numerics::{axpy, ParameterSet, Tensor};
use crate::outline_decoder::{outline_backward, outline_forward, OutlineDecoderParams, OutlineTrace};
use crate::report_decoder::{
    fuse_news_outline, report_backward, report_forward, ReportDecoderParams, ReportTrace,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_emb: usize,
    pub d_hid: usize,
    pub d_z: usize,
}

pub const BLOCK_NAMES: [&str; 25] = [
    "encoder.embedding",
    "encoder.fwd.W",
    "encoder.fwd.b",
    "encoder.bwd.W",
    "encoder.bwd.b",
    "outline.embedding",
    "outline.bridge.W",
    "outline.bridge.b",
    "outline.lstm.W",
    "outline.lstm.b",
    "outline.W_a",
    "outline.W_c",
    "outline.W_o",
    "outline.b_o",
    "report.embedding",
    "report.mu.W",
    "report.mu.b",
    "report.logvar.W",
    "report.logvar.b",
    "report.init.W",
    "report.init.b",
    "report.lstm.W",
    "report.lstm.b",
    "report.W_o",
    "report.b_o",
];

/// θ_E, θ_O and θ_R.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub encoder: EncoderParams,
    pub outline: OutlineDecoderParams,
    pub report: ReportDecoderParams,
}

impl ModelParams {
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ModelDims {
            vocab,
            d_emb,
            d_hid,
            d_z,
        } = dims;
        ModelParams {
            dims,
            encoder: EncoderParams::init(vocab, d_emb, d_hid, &mut rng),
            outline: OutlineDecoderParams::init(vocab, d_emb, d_hid, &mut rng),
            report: ReportDecoderParams::init(vocab, d_emb, d_hid, d_z, &mut rng),
        }
    }

    pub fn zeros(dims: ModelDims) -> Self {
        Self::init(dims, 0).zeros_like()
    }

    /// Shapes implied by `dims`, in [`BLOCK_NAMES`] order.
    pub fn expected_shapes(dims: ModelDims) -> Vec<Vec<usize>> {
        let p = Self::init(dims, 0);
        p.blocks().iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn blocks(&self) -> [&Tensor; 25] {
        let (e, o, r) = (&self.encoder, &self.outline, &self.report);
        [
            &e.embedding,
            &e.fwd.w,
            &e.fwd.b,
            &e.bwd.w,
            &e.bwd.b,
            &o.embedding,
            &o.bridge_w,
            &o.bridge_b,
            &o.lstm.w,
            &o.lstm.b,
            &o.w_a,
            &o.w_c,
            &o.w_o,
            &o.b_o,
            &r.embedding,
            &r.mu_w,
            &r.mu_b,
            &r.logvar_w,
            &r.logvar_b,
            &r.init_w,
            &r.init_b,
            &r.lstm.w,
            &r.lstm.b,
            &r.w_o,
            &r.b_o,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Tensor; 25] {
        let (e, o, r) = (&mut self.encoder, &mut self.outline, &mut self.report);
        [
            &mut e.embedding,
            &mut e.fwd.w,
            &mut e.fwd.b,
            &mut e.bwd.w,
            &mut e.bwd.b,
            &mut o.embedding,
            &mut o.bridge_w,
            &mut o.bridge_b,
            &mut o.lstm.w,
            &mut o.lstm.b,
            &mut o.w_a,
            &mut o.w_c,
            &mut o.w_o,
            &mut o.b_o,
            &mut r.embedding,
            &mut r.mu_w,
            &mut r.mu_b,
            &mut r.logvar_w,
            &mut r.logvar_b,
            &mut r.init_w,
            &mut r.init_b,
            &mut r.lstm.w,
            &mut r.lstm.b,
            &mut r.w_o,
            &mut r.b_o,
        ]
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks().iter().map(|t| t.norm_sq()).sum::<f64>().sqrt()
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|t| t.len()).sum()
    }
}

impl ParameterSet for ModelParams {
    fn block_count(&self) -> usize {
        BLOCK_NAMES.len()
    }

    fn block_name(&self, index: usize) -> String {
        BLOCK_NAMES[index].to_string()
    }

    fn block(&self, index: usize) -> &Tensor {
        self.blocks()[index]
    }

    fn block_mut(&mut self, index: usize) -> &mut Tensor {
        self.blocks_mut()
            .into_iter()
            .nth(index)
            .expect("block index in range")
    }
}

/// Loss components of one example or a batch average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub outline: f64,
    pub report_nll: f64,
    pub kl: f64,
    /// `report_nll + β · kl`
    pub report: f64,
}

/// Global objective: a plain sum of the two stage losses.
pub fn joint_loss(l_outline: f64, l_report: f64) -> Result<f64> {
    if !l_outline.is_finite() || !l_report.is_finite() {
        return Err(Error::NonFinite(format!(
            "joint loss inputs (outline {l_outline}, report {l_report})"
        )));
    }
    Ok(l_outline + l_report)
}

pub struct ExampleTrace {
    pub encoder: EncoderTrace,
    pub outline: OutlineTrace,
    pub fused: Vec<f64>,
    pub report: ReportTrace,
}

impl ExampleTrace {
    pub fn losses(&self) -> LossParts {
        LossParts {
            outline: self.outline.loss,
            report_nll: self.report.nll,
            kl: self.report.kl,
            report: self.report.loss,
        }
    }
}

/// Teacher-forced (per `use_gold`) training forward pass with fixed latent noise.
pub fn example_forward(
    params: &ModelParams,
    ex: ExampleIds<'_>,
    noise: &[f64],
    beta: f64,
    use_gold: &mut dyn FnMut() -> bool,
) -> Result<ExampleTrace> {
    let encoder = encoder_forward(&params.encoder, ex.news)?;
    if !encoder.output.states.iter().flatten().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("encoder states".into()));
    }
    let outline = outline_forward(&params.outline, &encoder.output, ex.outline, use_gold)?;
    let fused = fuse_news_outline(&encoder.output.states, &outline.states())?;
    let report = report_forward(&params.report, &fused, ex.report, noise, beta, use_gold)?;
    if !report.loss.is_finite() || !outline.loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "example loss (outline {}, report {})",
            outline.loss, report.loss
        )));
    }
    Ok(ExampleTrace {
        encoder,
        outline,
        fused,
        report,
    })
}

/// Accumulates `outline_scale · ∇L_outline + report_scale · ∇L_report` into `grads`.
pub fn example_backward(
    params: &ModelParams,
    trace: &ExampleTrace,
    outline_scale: f64,
    report_scale: f64,
    grads: &mut ModelParams,
) {
    let du = report_backward(&params.report, &trace.report, report_scale, &mut grads.report);
    let enc = &trace.encoder.output;
    let d_enc_dim = enc.dim();
    let m = enc.len() as f64;
    let mut d_enc_states: Vec<Vec<f64>> = (0..enc.len())
        .map(|_| du[..d_enc_dim].iter().map(|d| d / m).collect())
        .collect();
    let t_out = trace.outline.steps.len() as f64;
    let d_out_each: Vec<f64> = du[d_enc_dim..].iter().map(|d| d / t_out).collect();
    let d_out_states = vec![d_out_each; trace.outline.steps.len()];
    let d_final = outline_backward(
        &params.outline,
        enc,
        &trace.outline,
        outline_scale,
        &d_out_states,
        &mut grads.outline,
        &mut d_enc_states,
    );
    encoder_backward(
        &params.encoder,
        &trace.encoder,
        &d_enc_states,
        &d_final,
        &mut grads.encoder,
    );
}

/// Batch-mean loss components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub parts: LossParts,
    /// The optimized objective `outline_weight · outline + report`.
    pub model: f64,
}

/// Options for one pass over a batch.
pub struct BatchPass<'a> {
    /// One latent noise vector per example.
    pub noise: &'a [Vec<f64>],
    pub beta: f64,
    pub outline_weight: f64,
    pub use_gold: &'a mut dyn FnMut() -> bool,
}

/// Mean loss over the batch (token losses summed within each example) and,
/// when `grads` is given, its gradient accumulated there.
pub fn batch_loss(
    params: &ModelParams,
    batch: &Batch,
    pass: BatchPass<'_>,
    mut grads: Option<&mut ModelParams>,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if pass.noise.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            context: "noise per example",
            expected: batch.len(),
            found: pass.noise.len(),
        });
    }
    let n = batch.len() as f64;
    let mut sum = LossParts::default();
    for i in 0..batch.len() {
        let trace = example_forward(params, batch.example(i), &pass.noise[i], pass.beta, pass.use_gold)?;
        let l = trace.losses();
        sum.outline += l.outline;
        sum.report_nll += l.report_nll;
        sum.kl += l.kl;
        sum.report += l.report;
        if let Some(g) = grads.as_deref_mut() {
            example_backward(params, &trace, pass.outline_weight / n, 1.0 / n, g);
        }
    }
    let parts = LossParts {
        outline: sum.outline / n,
        report_nll: sum.report_nll / n,
        kl: sum.kl / n,
        report: sum.report / n,
    };
    let model = joint_loss(pass.outline_weight * parts.outline, parts.report)?;
    Ok(BatchLoss { parts, model })
}

/// Adds `src` into `dst` block by block.
pub fn accumulate(dst: &mut ModelParams, src: &ModelParams) {
    for (d, s) in dst.blocks_mut().into_iter().zip(src.blocks()) {
        axpy(d.data_mut(), 1.0, s.data());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_batch, LengthCaps, NewsReportPair, Vocabulary};

    fn dims() -> ModelDims {
        ModelDims {
            vocab: 9,
            d_emb: 3,
            d_hid: 2,
            d_z: 2,
        }
    }

    fn batch() -> Batch {
        let vocab = Vocabulary::from_tokens(["a", "b", "c", "d", "e"].map(String::from)).unwrap();
        let t = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        let pairs = vec![
            NewsReportPair {
                id: "1".into(),
                news: t("a b c"),
                report: t("d e d c"),
                outline: Some(t("d c")),
            },
            NewsReportPair {
                id: "2".into(),
                news: t("c"),
                report: t("a b a b a"),
                outline: Some(t("b")),
            },
        ];
        encode_batch(&pairs, &vocab, LengthCaps::default()).unwrap()
    }

    #[test]
    fn block_table_is_consistent() {
        let p = ModelParams::init(dims(), 1);
        assert_eq!(p.blocks().len(), BLOCK_NAMES.len());
        let shapes = ModelParams::expected_shapes(dims());
        assert_eq!(shapes[0], vec![9, 3]);
        assert_eq!(shapes[10], vec![4, 2]); // W_a: [2h × h]
        assert_eq!(shapes[11], vec![2, 6]); // W_c: [h × 3h]
        let mut q = p.clone();
        q.block_mut(13).fill(1.5);
        assert!(q.outline.b_o.data().iter().all(|&x| x == 1.5));
        assert_eq!(p.block_name(24), "report.b_o");
    }

    #[test]
    fn joint_loss_is_a_plain_sum() {
        assert_eq!(joint_loss(2.0, 3.0).unwrap(), 5.0);
        assert_eq!(joint_loss(0.0, 0.0).unwrap(), 0.0);
        assert!(joint_loss(f64::NAN, 1.0).is_err());
        assert!(joint_loss(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn batch_equals_per_example_average() {
        let p = ModelParams::init(dims(), 2);
        let b = batch();
        let noise = vec![vec![0.3, -0.2], vec![1.0, 0.5]];
        let both = batch_loss(
            &p,
            &b,
            BatchPass { noise: &noise, beta: 0.5, outline_weight: 1.0, use_gold: &mut || true },
            None,
        )
        .unwrap();
        let mut parts = Vec::new();
        for i in 0..2 {
            let t = example_forward(&p, b.example(i), &noise[i], 0.5, &mut || true).unwrap();
            parts.push(t.losses());
        }
        let mean_outline = (parts[0].outline + parts[1].outline) / 2.0;
        assert!((both.parts.outline - mean_outline).abs() < 1e-12);
        assert_eq!(both.model, both.parts.outline + both.parts.report);
    }
}
