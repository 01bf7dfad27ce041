//! Variational report decoder.
//!
//! The news and outline encodings are mean-pooled and concatenated into a
//! conditioning vector `u`. A recognition network maps `[u ; r]` (with `r`
//! the mean gold-report embedding) to a diagonal Gaussian over `z`; the
//! report LSTM starts from `tanh(W [z ; u] + b)`.

use rand::Rng;

use crate::encoder::{embed, embed_backward, init_embedding};
use crate::error::{Error, Result};
use crate::numerics::{
    argmax, axpy, concat, log_softmax, lstm_cell_backward, lstm_cell_step, softmax, tanh_affine,
    tanh_affine_backward, LstmParams, LstmStep, Tensor,
};
use crate::outline_decoder::{output_logits, sequence_nll};

#[derive(Clone, Debug, PartialEq)]
pub struct ReportDecoderParams {
    pub embedding: Tensor,
    /// [d_z × (d_fuse + d_emb)]
    pub mu_w: Tensor,
    pub mu_b: Tensor,
    pub logvar_w: Tensor,
    pub logvar_b: Tensor,
    /// [d_hid × (d_z + d_fuse)]
    pub init_w: Tensor,
    pub init_b: Tensor,
    pub lstm: LstmParams,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl ReportDecoderParams {
    pub fn init<R: Rng + ?Sized>(
        vocab: usize,
        d_emb: usize,
        d_hid: usize,
        d_z: usize,
        rng: &mut R,
    ) -> Self {
        let d_fuse = 3 * d_hid;
        ReportDecoderParams {
            embedding: init_embedding(vocab, d_emb, rng),
            mu_w: Tensor::uniform_fan_in(&[d_z, d_fuse + d_emb], rng),
            mu_b: Tensor::zeros(&[d_z]),
            logvar_w: Tensor::uniform_fan_in(&[d_z, d_fuse + d_emb], rng),
            logvar_b: Tensor::zeros(&[d_z]),
            init_w: Tensor::uniform_fan_in(&[d_hid, d_z + d_fuse], rng),
            init_b: Tensor::zeros(&[d_hid]),
            lstm: LstmParams::init(d_emb, d_hid, rng),
            w_o: Tensor::uniform_fan_in(&[vocab, d_hid], rng),
            b_o: Tensor::zeros(&[vocab]),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_b.len()
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden()
    }
}

fn mean_pool(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        axpy(&mut out, 1.0, r);
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    out
}

/// `[mean(H^e) ; mean(outline states)]`
pub fn fuse_news_outline(enc_states: &[Vec<f64>], outline_states: &[Vec<f64>]) -> Result<Vec<f64>> {
    if enc_states.is_empty() {
        return Err(Error::Empty("encoder states for fusion"));
    }
    if outline_states.is_empty() {
        return Err(Error::Empty("outline states for fusion"));
    }
    Ok(concat(&mean_pool(enc_states), &mean_pool(outline_states)))
}

/// Mean embedding of the gold report tokens, used by the recognition network.
pub fn report_summary(embedding: &Tensor, report_ids: &[usize]) -> Result<Vec<f64>> {
    if report_ids.is_empty() {
        return Err(Error::Empty("report for summary"));
    }
    Ok(mean_pool(&embed(report_ids, embedding)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
    pub z: Vec<f64>,
    pub noise: Vec<f64>,
}

/// `z = μ + exp(ℓ/2) ⊙ ε`. Without a report summary the prior `N(0, I)` is used.
pub fn infer_latent(
    u: &[f64],
    report_summary: Option<&[f64]>,
    params: &ReportDecoderParams,
    noise: &[f64],
) -> Result<LatentSample> {
    let d_z = params.latent_dim();
    if noise.len() != d_z {
        return Err(Error::DimensionMismatch {
            context: "latent noise",
            expected: d_z,
            found: noise.len(),
        });
    }
    let (mean, log_var) = match report_summary {
        Some(r) => {
            let joint = concat(u, r);
            if joint.len() != params.mu_w.cols() {
                return Err(Error::DimensionMismatch {
                    context: "recognition input",
                    expected: params.mu_w.cols(),
                    found: joint.len(),
                });
            }
            let mut mean = params.mu_w.matvec(&joint);
            axpy(&mut mean, 1.0, params.mu_b.data());
            let mut log_var = params.logvar_w.matvec(&joint);
            axpy(&mut log_var, 1.0, params.logvar_b.data());
            (mean, log_var)
        }
        None => (vec![0.0; d_z], vec![0.0; d_z]),
    };
    let z = mean
        .iter()
        .zip(&log_var)
        .zip(noise)
        .map(|((m, l), e)| m + (0.5 * l).exp() * e)
        .collect();
    Ok(LatentSample {
        mean,
        log_var,
        z,
        noise: noise.to_vec(),
    })
}

/// `KL(N(μ, diag e^ℓ) ‖ N(0, I))`
pub fn gaussian_kl(mean: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mean
        .iter()
        .zip(log_var)
        .map(|(m, l)| l.exp() + m * m - 1.0 - l)
        .sum::<f64>()
}

/// Report decoder initial hidden state `tanh(W [z ; u] + b)`.
pub fn report_initial_state(params: &ReportDecoderParams, z: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let joint = concat(z, u);
    if joint.len() != params.init_w.cols() {
        return Err(Error::DimensionMismatch {
            context: "report initial state input",
            expected: params.init_w.cols(),
            found: joint.len(),
        });
    }
    Ok(tanh_affine(&params.init_w, &params.init_b, &joint))
}

pub fn report_step(
    params: &ReportDecoderParams,
    prev_token: &[f64],
    state: (&[f64], &[f64]),
) -> Result<LstmStep> {
    lstm_cell_step(prev_token, state.0, state.1, &params.lstm)
}

pub fn report_token_distribution(params: &ReportDecoderParams, hidden: &[f64]) -> Result<Vec<f64>> {
    softmax(&output_logits(hidden, &params.w_o, &params.b_o))
}

/// Token NLL over unmasked steps plus `β · kl`.
pub fn report_loss(
    log_probs: &[Vec<f64>],
    targets: &[usize],
    mask: &[bool],
    kl: f64,
    beta: f64,
) -> Result<f64> {
    if beta < 0.0 {
        return Err(Error::Invalid(format!("KL weight must be >= 0, got {beta}")));
    }
    Ok(sequence_nll(log_probs, targets, mask)? + beta * kl)
}

#[derive(Clone, Debug)]
pub struct ReportStepTrace {
    pub input_id: usize,
    pub lstm: LstmStep,
    pub log_probs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ReportTrace {
    pub u: Vec<f64>,
    pub summary_ids: Vec<usize>,
    pub summary: Vec<f64>,
    pub latent: LatentSample,
    pub initial: Vec<f64>,
    pub steps: Vec<ReportStepTrace>,
    pub targets: Vec<usize>,
    pub nll: f64,
    pub kl: f64,
    pub beta: f64,
    pub loss: f64,
}

/// Training-mode forward over `row = [BOS, y_1, …, EOS]`.
pub fn report_forward(
    params: &ReportDecoderParams,
    u: &[f64],
    row: &[usize],
    noise: &[f64],
    beta: f64,
    use_gold: &mut dyn FnMut() -> bool,
) -> Result<ReportTrace> {
    if row.len() < 2 {
        return Err(Error::Empty("report target"));
    }
    let summary_ids = row[1..].to_vec();
    let summary = report_summary(&params.embedding, &summary_ids)?;
    let latent = infer_latent(u, Some(&summary), params, noise)?;
    if latent.z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent sample".into()));
    }
    let kl = gaussian_kl(&latent.mean, &latent.log_var);
    let initial = report_initial_state(params, &latent.z, u)?;
    let mut h = initial.clone();
    let mut c = vec![0.0; params.hidden()];
    let mut steps: Vec<ReportStepTrace> = Vec::with_capacity(row.len() - 1);
    for t in 1..row.len() {
        let input_id = match steps.last() {
            Some(prev) if !use_gold() => argmax(&prev.log_probs),
            _ => row[t - 1],
        };
        let x = embed(&[input_id], &params.embedding)?.remove(0);
        let lstm = report_step(params, &x, (&h, &c))?;
        let logits = output_logits(&lstm.h, &params.w_o, &params.b_o);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("report logits at step {t}")));
        }
        let log_probs = log_softmax(&logits)?;
        h.clone_from(&lstm.h);
        c.clone_from(&lstm.c);
        steps.push(ReportStepTrace {
            input_id,
            lstm,
            log_probs,
        });
    }
    let targets = row[1..].to_vec();
    let lps: Vec<Vec<f64>> = steps.iter().map(|s| s.log_probs.clone()).collect();
    let mask = vec![true; targets.len()];
    let nll = sequence_nll(&lps, &targets, &mask)?;
    let loss = report_loss(&lps, &targets, &mask, kl, beta)?;
    Ok(ReportTrace {
        u: u.to_vec(),
        summary_ids,
        summary,
        latent,
        initial,
        steps,
        targets,
        nll,
        kl,
        beta,
        loss,
    })
}

/// Backward through the report pathway scaled by `loss_scale`; returns the
/// gradient on the conditioning vector `u`.
pub fn report_backward(
    params: &ReportDecoderParams,
    trace: &ReportTrace,
    loss_scale: f64,
    grads: &mut ReportDecoderParams,
) -> Vec<f64> {
    let hd = params.hidden();
    let mut dh_next = vec![0.0; hd];
    let mut dc_next = vec![0.0; hd];
    let mut d_inputs = Vec::with_capacity(trace.steps.len());
    for (t, step) in trace.steps.iter().enumerate().rev() {
        let mut d_logits: Vec<f64> = step.log_probs.iter().map(|lp| lp.exp()).collect();
        d_logits[trace.targets[t]] -= 1.0;
        d_logits.iter_mut().for_each(|d| *d *= loss_scale);
        grads.w_o.add_outer(&d_logits, &step.lstm.h);
        grads.b_o.add_assign_slice(&d_logits);
        let mut dh = params.w_o.matvec_t(&d_logits);
        axpy(&mut dh, 1.0, &dh_next);
        let g = lstm_cell_backward(&step.lstm, &params.lstm, &dh, &dc_next, &mut grads.lstm);
        d_inputs.push(g.dx);
        dh_next = g.dh_prev;
        dc_next = g.dc_prev;
    }
    d_inputs.reverse();
    let ids: Vec<usize> = trace.steps.iter().map(|s| s.input_id).collect();
    embed_backward(&ids, &d_inputs, &mut grads.embedding);

    let d_z_len = params.latent_dim();
    let init_in = concat(&trace.latent.z, &trace.u);
    let d_init_in = tanh_affine_backward(
        &params.init_w,
        &init_in,
        &trace.initial,
        &dh_next,
        &mut grads.init_w,
        &mut grads.init_b,
    );
    let dz = &d_init_in[..d_z_len];
    let mut du = d_init_in[d_z_len..].to_vec();

    let kl_scale = trace.beta * loss_scale;
    let lat = &trace.latent;
    let d_mean: Vec<f64> = (0..d_z_len).map(|k| dz[k] + kl_scale * lat.mean[k]).collect();
    let d_log_var: Vec<f64> = (0..d_z_len)
        .map(|k| {
            let sigma = (0.5 * lat.log_var[k]).exp();
            dz[k] * 0.5 * sigma * lat.noise[k] + kl_scale * 0.5 * (lat.log_var[k].exp() - 1.0)
        })
        .collect();
    let joint = concat(&trace.u, &trace.summary);
    grads.mu_w.add_outer(&d_mean, &joint);
    grads.mu_b.add_assign_slice(&d_mean);
    grads.logvar_w.add_outer(&d_log_var, &joint);
    grads.logvar_b.add_assign_slice(&d_log_var);
    let mut d_joint = params.mu_w.matvec_t(&d_mean);
    axpy(&mut d_joint, 1.0, &params.logvar_w.matvec_t(&d_log_var));
    let d_fuse = trace.u.len();
    axpy(&mut du, 1.0, &d_joint[..d_fuse]);
    let n = trace.summary_ids.len() as f64;
    let d_each: Vec<f64> = d_joint[d_fuse..].iter().map(|d| d / n).collect();
    let spread = vec![d_each; trace.summary_ids.len()];
    embed_backward(&trace.summary_ids, &spread, &mut grads.embedding);
    du
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, gradient_check};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> ReportDecoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ReportDecoderParams::init(10, 3, 2, 2, &mut rng)
    }

    #[test]
    fn fusion_examples() {
        let z = vec![vec![0.0; 4]; 3];
        assert_eq!(fuse_news_outline(&z, &[vec![0.0; 2]]).unwrap(), vec![0.0; 6]);
        let h = vec![0.1, 0.2, 0.3, 0.4];
        let s = vec![0.5, 0.6];
        assert_eq!(
            fuse_news_outline(&[h.clone()], &[s.clone()]).unwrap(),
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
        );
        let a = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]];
        let mut b = a.clone();
        b.rotate_left(1);
        assert_eq!(
            fuse_news_outline(&a, &[s.clone()]).unwrap(),
            fuse_news_outline(&b, &[s.clone()]).unwrap()
        );
        assert!(fuse_news_outline(&[], &[s]).is_err());
        assert!(fuse_news_outline(&a, &[]).is_err());
    }

    #[test]
    fn reparameterization() {
        let p = params(1);
        let u = vec![0.3; 6];
        let r = vec![0.1, -0.2, 0.4];
        let s = infer_latent(&u, Some(&r), &p, &[0.0, 0.0]).unwrap();
        assert_eq!(s.z, s.mean);

        let mut zero = p.clone();
        for t in [&mut zero.mu_w, &mut zero.mu_b, &mut zero.logvar_w, &mut zero.logvar_b] {
            t.fill(0.0);
        }
        let e = [0.7, -1.3];
        let s = infer_latent(&u, Some(&r), &zero, &e).unwrap();
        assert_eq!(s.z, e.to_vec());
        let prior = infer_latent(&u, None, &p, &e).unwrap();
        assert_eq!(prior.z, e.to_vec());
        assert!(infer_latent(&u, Some(&r), &p, &[0.0]).is_err());
    }

    #[test]
    fn latent_sample_derivatives() {
        // z as a function of (μ, ℓ) for fixed ε: dz/dμ = I, dz/dℓ = diag(ε e^{ℓ/2} / 2)
        let eps = [0.8, -0.4];
        let point = Tensor::from_vec(&[4], vec![0.3, -0.1, 0.5, -0.9]).unwrap();
        for k in 0..2 {
            let z_k = |p: &Tensor| {
                let d = p.data();
                d[k] + (0.5 * d[2 + k]).exp() * eps[k]
            };
            let g = finite_difference_gradient(z_k, &point, 1e-6).unwrap();
            let mut expect = vec![0.0; 4];
            expect[k] = 1.0;
            expect[2 + k] = eps[k] * (0.5 * point.data()[2 + k]).exp() / 2.0;
            for (a, b) in g.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(gaussian_kl(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((gaussian_kl(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        let v = gaussian_kl(&[0.0], &[4f64.ln()]);
        assert!((v - 0.5 * (4.0 - 1.0 - 4f64.ln())).abs() < 1e-15);
        assert!((v - 0.80685).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn kl_nonnegative(m in prop::collection::vec(-5.0f64..5.0, 1..8), l in prop::collection::vec(-5.0f64..5.0, 8)) {
            let l = &l[..m.len()];
            let kl = gaussian_kl(&m, l);
            prop_assert!(kl >= 0.0);
            if m.iter().chain(l).any(|x| x.abs() > 1e-3) {
                prop_assert!(kl > 0.0);
            }
        }
    }

    #[test]
    fn report_loss_examples() {
        let certain = vec![vec![0.0, f64::NEG_INFINITY]; 3];
        let l = report_loss(&certain, &[0, 0, 0], &[true; 3], 0.6, 0.5).unwrap();
        assert!((l - 0.3).abs() < 1e-15);
        let uniform = vec![vec![(1.0f64 / 20.0).ln(); 20]; 2];
        let l = report_loss(&uniform, &[1, 2], &[true; 2], 0.0, 1.0).unwrap();
        assert!((l - 5.991).abs() < 1e-3);
        let l0 = report_loss(&uniform, &[1, 2], &[true; 2], 7.0, 0.0).unwrap();
        assert_eq!(l0, sequence_nll(&uniform, &[1, 2], &[true; 2]).unwrap());
        assert!(report_loss(&uniform, &[1, 20], &[true; 2], 0.0, 1.0).is_err());
        assert!(report_loss(&uniform, &[1, 2], &[true; 2], 0.0, -1.0).is_err());
        // NLL + KL bounds NLL from above
        let nll = sequence_nll(&uniform, &[1, 2], &[true; 2]).unwrap();
        assert!(report_loss(&uniform, &[1, 2], &[true; 2], gaussian_kl(&[0.3], &[0.2]), 1.0).unwrap() >= nll);
    }

    #[test]
    fn step_zero_weights_and_purity() {
        let mut p = params(2);
        let a = report_step(&p, &[0.1, 0.2, 0.3], (&[0.2, 0.1], &[0.0, 0.3])).unwrap();
        let b = report_step(&p, &[0.1, 0.2, 0.3], (&[0.2, 0.1], &[0.0, 0.3])).unwrap();
        assert_eq!(a.h, b.h);
        p.lstm = LstmParams::zeros(3, 2);
        let z = report_step(&p, &[0.1, 0.2, 0.3], (&[0.0; 2], &[0.0; 2])).unwrap();
        assert_eq!(z.h, vec![0.0; 2]);
        assert!(report_step(&p, &[0.1], (&[0.0; 2], &[0.0; 2])).is_err());
    }

    #[test]
    fn report_backward_matches_finite_differences() {
        let p = params(3);
        let row = [1usize, 5, 7, 5, 2];
        let noise = [0.6, -1.1];
        let beta = 0.7;
        let u0 = vec![0.2, -0.3, 0.1, 0.5, -0.4, 0.25];
        let mut gold = || true;
        let trace = report_forward(&p, &u0, &row, &noise, beta, &mut gold).unwrap();
        let mut grads = p.clone();
        for t in grads_blocks(&mut grads) {
            t.fill(0.0);
        }
        let du = report_backward(&p, &trace, 1.0, &mut grads);

        let u_t = Tensor::from_vec(&[6], u0.clone()).unwrap();
        let num_u = finite_difference_gradient(
            |u: &Tensor| report_forward(&p, u.data(), &row, &noise, beta, &mut || true).unwrap().loss,
            &u_t,
            1e-6,
        )
        .unwrap();
        let du_t = Tensor::from_vec(&[6], du).unwrap();
        assert!(gradient_check(&du_t, &num_u, 1e-6).unwrap()[0].passed);

        let num_lv = finite_difference_gradient(
            |w: &Tensor| {
                let mut q = p.clone();
                q.logvar_w = w.clone();
                report_forward(&q, &u0, &row, &noise, beta, &mut || true).unwrap().loss
            },
            &p.logvar_w,
            1e-6,
        )
        .unwrap();
        assert!(gradient_check(&grads.logvar_w, &num_lv, 1e-6).unwrap()[0].passed);
        let num_emb = finite_difference_gradient(
            |w: &Tensor| {
                let mut q = p.clone();
                q.embedding = w.clone();
                report_forward(&q, &u0, &row, &noise, beta, &mut || true).unwrap().loss
            },
            &p.embedding,
            1e-6,
        )
        .unwrap();
        let mut num_emb = num_emb;
        num_emb.row_mut(0).fill(0.0);
        assert!(gradient_check(&grads.embedding, &num_emb, 1e-6).unwrap()[0].passed);
    }

    fn grads_blocks(p: &mut ReportDecoderParams) -> Vec<&mut Tensor> {
        vec![
            &mut p.embedding,
            &mut p.mu_w,
            &mut p.mu_b,
            &mut p.logvar_w,
            &mut p.logvar_b,
            &mut p.init_w,
            &mut p.init_b,
            &mut p.lstm.w,
            &mut p.lstm.b,
            &mut p.w_o,
            &mut p.b_o,
        ]
    }
}
