//! Attention LSTM decoder that produces the outline distribution.
//!
//! Per step `t`:
//!
//! ```text
//! s_t   = LSTM(emb(o_{t-1}), s_{t-1})
//! e_j   = h_j · (W_a s_t)          masked positions get -inf
//! α     = softmax(e)
//! c_t   = Σ_j α_j h_j
//! ŝ_t   = tanh(W_c [c_t ; s_t])
//! P(o_t) = softmax(W_o ŝ_t + b_o)
//! ```
//!
//! The initial state is `tanh(W_b h_fwd_final + b_b)` with a zero cell.

use rand::Rng;

use crate::encoder::{embed, embed_backward, init_embedding, EncoderStates};
use crate::error::{Error, Result};
use crate::numerics::{
    argmax, axpy, concat, dot, log_softmax, lstm_cell_backward, lstm_cell_step, softmax,
    tanh_affine, tanh_affine_backward, LstmParams, LstmStep, Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub struct OutlineDecoderParams {
    pub embedding: Tensor,
    pub bridge_w: Tensor,
    pub bridge_b: Tensor,
    pub lstm: LstmParams,
    /// [d_enc × d_hid], maps the decoder state into encoder space for scoring.
    pub w_a: Tensor,
    /// [d_hid × (d_enc + d_hid)]
    pub w_c: Tensor,
    /// [vocab × d_hid]
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl OutlineDecoderParams {
    pub fn init<R: Rng + ?Sized>(vocab: usize, d_emb: usize, d_hid: usize, rng: &mut R) -> Self {
        let d_enc = 2 * d_hid;
        OutlineDecoderParams {
            embedding: init_embedding(vocab, d_emb, rng),
            bridge_w: Tensor::uniform_fan_in(&[d_hid, d_hid], rng),
            bridge_b: Tensor::zeros(&[d_hid]),
            lstm: LstmParams::init(d_emb, d_hid, rng),
            w_a: Tensor::uniform_fan_in(&[d_enc, d_hid], rng),
            w_c: Tensor::uniform_fan_in(&[d_hid, d_enc + d_hid], rng),
            w_o: Tensor::uniform_fan_in(&[vocab, d_hid], rng),
            b_o: Tensor::zeros(&[vocab]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden()
    }
}

/// Decoder initial hidden state bridged from the final forward encoder state.
pub fn initial_state(params: &OutlineDecoderParams, enc: &EncoderStates) -> Vec<f64> {
    tanh_affine(&params.bridge_w, &params.bridge_b, &enc.final_forward)
}

/// One recurrent step on the embedded previous token.
pub fn outline_step(
    params: &OutlineDecoderParams,
    prev_token: &[f64],
    state: (&[f64], &[f64]),
) -> Result<LstmStep> {
    lstm_cell_step(prev_token, state.0, state.1, &params.lstm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    /// `W_a s`
    pub query: Vec<f64>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
    /// The attention state ŝ.
    pub state: Vec<f64>,
}

pub fn attend(
    enc_states: &[Vec<f64>],
    s: &[f64],
    mask: &[bool],
    w_a: &Tensor,
    w_c: &Tensor,
) -> Result<Attention> {
    if mask.len() != enc_states.len() {
        return Err(Error::DimensionMismatch {
            context: "attention mask",
            expected: enc_states.len(),
            found: mask.len(),
        });
    }
    if s.len() != w_a.cols() {
        return Err(Error::DimensionMismatch {
            context: "attention decoder state",
            expected: w_a.cols(),
            found: s.len(),
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::AllMasked);
    }
    let query = w_a.matvec(s);
    let scores: Vec<f64> = enc_states
        .iter()
        .zip(mask)
        .map(|(h, &m)| {
            if m {
                dot(h, &query)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let weights = softmax(&scores)?;
    let mut context = vec![0.0; w_a.rows()];
    for (h, &a) in enc_states.iter().zip(&weights) {
        if a != 0.0 {
            axpy(&mut context, a, h);
        }
    }
    let state: Vec<f64> = w_c
        .matvec(&concat(&context, s))
        .into_iter()
        .map(f64::tanh)
        .collect();
    Ok(Attention {
        query,
        scores,
        weights,
        context,
        state,
    })
}

/// Backward through [`attend`]. Accumulates into `dw_a`, `dw_c` and
/// `d_enc_states`; returns the gradient on the decoder state `s`.
pub fn attend_backward(
    enc_states: &[Vec<f64>],
    s: &[f64],
    att: &Attention,
    d_state: &[f64],
    w_a: &Tensor,
    w_c: &Tensor,
    dw_a: &mut Tensor,
    dw_c: &mut Tensor,
    d_enc_states: &mut [Vec<f64>],
) -> Vec<f64> {
    let joint = concat(&att.context, s);
    let dpre: Vec<f64> = att
        .state
        .iter()
        .zip(d_state)
        .map(|(y, d)| d * (1.0 - y * y))
        .collect();
    dw_c.add_outer(&dpre, &joint);
    let d_joint = w_c.matvec_t(&dpre);
    let d_enc = att.context.len();
    let d_context = &d_joint[..d_enc];
    let mut ds = d_joint[d_enc..].to_vec();

    let d_weights: Vec<f64> = enc_states.iter().map(|h| dot(d_context, h)).collect();
    let mean: f64 = att.weights.iter().zip(&d_weights).map(|(a, d)| a * d).sum();
    let mut d_query = vec![0.0; d_enc];
    for (j, h) in enc_states.iter().enumerate() {
        let a = att.weights[j];
        if a == 0.0 {
            continue;
        }
        let d_score = a * (d_weights[j] - mean);
        axpy(&mut d_enc_states[j], a, d_context);
        axpy(&mut d_enc_states[j], d_score, &att.query);
        axpy(&mut d_query, d_score, h);
    }
    dw_a.add_outer(&d_query, s);
    axpy(&mut ds, 1.0, &w_a.matvec_t(&d_query));
    ds
}

pub fn output_logits(hidden: &[f64], w_o: &Tensor, b_o: &Tensor) -> Vec<f64> {
    let mut logits = w_o.matvec(hidden);
    axpy(&mut logits, 1.0, b_o.data());
    logits
}

/// `softmax(W_o ŝ + b_o)`
pub fn outline_token_distribution(s_hat: &[f64], w_o: &Tensor, b_o: &Tensor) -> Result<Vec<f64>> {
    if s_hat.len() != w_o.cols() {
        return Err(Error::DimensionMismatch {
            context: "output projection",
            expected: w_o.cols(),
            found: s_hat.len(),
        });
    }
    softmax(&output_logits(s_hat, w_o, b_o))
}

/// Σ over unmasked steps of `-log P(target)`, given per-step log-distributions.
pub fn sequence_nll(log_probs: &[Vec<f64>], targets: &[usize], mask: &[bool]) -> Result<f64> {
    if log_probs.len() != targets.len() || mask.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            context: "loss steps",
            expected: targets.len(),
            found: log_probs.len().min(mask.len()),
        });
    }
    let mut total = 0.0;
    for ((lp, &t), &m) in log_probs.iter().zip(targets).zip(mask) {
        if t >= lp.len() {
            return Err(Error::OutOfRange {
                context: "loss target",
                id: t,
                size: lp.len(),
            });
        }
        if m {
            total -= lp[t];
        }
    }
    Ok(total)
}

/// The outline objective: summed negative log-likelihood of the gold outline.
pub fn outline_loss(log_probs: &[Vec<f64>], targets: &[usize], mask: &[bool]) -> Result<f64> {
    sequence_nll(log_probs, targets, mask)
}

#[derive(Clone, Debug)]
pub struct OutlineStepTrace {
    pub input_id: usize,
    pub lstm: LstmStep,
    pub attention: Attention,
    pub log_probs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OutlineTrace {
    pub initial: Vec<f64>,
    pub steps: Vec<OutlineStepTrace>,
    pub targets: Vec<usize>,
    pub loss: f64,
}

impl OutlineTrace {
    /// Decoder hidden states s_1..s_T.
    pub fn states(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.lstm.h.clone()).collect()
    }
}

/// Runs the decoder over `row = [BOS, o_1, …, EOS]`, predicting `row[1..]`.
/// `use_gold` is asked before every step after the first; `false` feeds the
/// previous argmax instead of the gold token.
pub fn outline_forward(
    params: &OutlineDecoderParams,
    enc: &EncoderStates,
    row: &[usize],
    use_gold: &mut dyn FnMut() -> bool,
) -> Result<OutlineTrace> {
    if row.len() < 2 {
        return Err(Error::Empty("outline target"));
    }
    let initial = initial_state(params, enc);
    let mask = vec![true; enc.len()];
    let hd = params.hidden();
    let mut h = initial.clone();
    let mut c = vec![0.0; hd];
    let mut steps: Vec<OutlineStepTrace> = Vec::with_capacity(row.len() - 1);
    for t in 1..row.len() {
        let input_id = match steps.last() {
            Some(prev) if !use_gold() => argmax(&prev.log_probs),
            _ => row[t - 1],
        };
        let x = embed(&[input_id], &params.embedding)?.remove(0);
        let lstm = outline_step(params, &x, (&h, &c))?;
        let attention = attend(&enc.states, &lstm.h, &mask, &params.w_a, &params.w_c)?;
        let logits = output_logits(&attention.state, &params.w_o, &params.b_o);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("outline logits at step {t}")));
        }
        let log_probs = log_softmax(&logits)?;
        h.clone_from(&lstm.h);
        c.clone_from(&lstm.c);
        steps.push(OutlineStepTrace {
            input_id,
            lstm,
            attention,
            log_probs,
        });
    }
    let targets = row[1..].to_vec();
    let lps: Vec<Vec<f64>> = steps.iter().map(|s| s.log_probs.clone()).collect();
    let loss = outline_loss(&lps, &targets, &vec![true; targets.len()])?;
    Ok(OutlineTrace {
        initial,
        steps,
        targets,
        loss,
    })
}

/// Backward pass. `loss_scale` multiplies the NLL gradient; `d_states`
/// carries extra gradient on each s_t (from the report fusion). Returns
/// the gradient on the encoder's final forward state.
pub fn outline_backward(
    params: &OutlineDecoderParams,
    enc: &EncoderStates,
    trace: &OutlineTrace,
    loss_scale: f64,
    d_states: &[Vec<f64>],
    grads: &mut OutlineDecoderParams,
    d_enc_states: &mut [Vec<f64>],
) -> Vec<f64> {
    let hd = params.hidden();
    let mut dh_next = vec![0.0; hd];
    let mut dc_next = vec![0.0; hd];
    let mut d_inputs = Vec::with_capacity(trace.steps.len());
    for (t, step) in trace.steps.iter().enumerate().rev() {
        let mut ds = dh_next.clone();
        axpy(&mut ds, 1.0, &d_states[t]);
        if loss_scale != 0.0 {
            let mut d_logits: Vec<f64> = step.log_probs.iter().map(|lp| lp.exp()).collect();
            d_logits[trace.targets[t]] -= 1.0;
            d_logits.iter_mut().for_each(|d| *d *= loss_scale);
            grads.w_o.add_outer(&d_logits, &step.attention.state);
            grads.b_o.add_assign_slice(&d_logits);
            let d_att_state = params.w_o.matvec_t(&d_logits);
            let ds_att = attend_backward(
                &enc.states,
                &step.lstm.h,
                &step.attention,
                &d_att_state,
                &params.w_a,
                &params.w_c,
                &mut grads.w_a,
                &mut grads.w_c,
                d_enc_states,
            );
            axpy(&mut ds, 1.0, &ds_att);
        }
        let g = lstm_cell_backward(&step.lstm, &params.lstm, &ds, &dc_next, &mut grads.lstm);
        d_inputs.push(g.dx);
        dh_next = g.dh_prev;
        dc_next = g.dc_prev;
    }
    d_inputs.reverse();
    let ids: Vec<usize> = trace.steps.iter().map(|s| s.input_id).collect();
    embed_backward(&ids, &d_inputs, &mut grads.embedding);
    tanh_affine_backward(
        &params.bridge_w,
        &enc.final_forward,
        &trace.initial,
        &dh_next,
        &mut grads.bridge_w,
        &mut grads.bridge_b,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_states(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.row_mut(i)[i] = 1.0;
        }
        t
    }

    #[test]
    fn identical_states_attend_uniformly() {
        let v = vec![0.3, -0.2, 0.9, 0.1];
        let states = vec![v.clone(); 3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w_a = Tensor::uniform(&[4, 2], 1.0, &mut rng);
        let w_c = Tensor::uniform(&[2, 6], 1.0, &mut rng);
        let a = attend(&states, &[0.5, -0.5], &[true; 3], &w_a, &w_c).unwrap();
        for w in &a.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        for (c, x) in a.context.iter().zip(&v) {
            assert!((c - x).abs() < 1e-15);
        }
    }

    #[test]
    fn single_unmasked_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let states = random_states(&mut rng, 3, 4);
        let w_a = Tensor::uniform(&[4, 2], 1.0, &mut rng);
        let w_c = Tensor::uniform(&[2, 6], 1.0, &mut rng);
        let a = attend(&states, &[0.2, 0.7], &[false, true, false], &w_a, &w_c).unwrap();
        assert_eq!(a.weights, vec![0.0, 1.0, 0.0]);
        assert_eq!(a.context, states[1]);
        assert!(matches!(
            attend(&states, &[0.2, 0.7], &[false; 3], &w_a, &w_c),
            Err(Error::AllMasked)
        ));
    }

    #[test]
    fn orthogonal_states_hand_softmax() {
        // h_1 · s = ln 2, h_2 · s = 0 with W_a = I
        let s = vec![2f64.ln(), 0.0];
        let states = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let w_c = Tensor::zeros(&[2, 4]);
        let a = attend(&states, &s, &[true, true], &identity(2), &w_c).unwrap();
        assert!((a.weights[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((a.weights[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn attention_permutation_equivariance(seed in 0u64..1000, n in 1usize..7, shift in 0usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let states = random_states(&mut rng, n, 4);
            let mask: Vec<bool> = (0..n).map(|j| j == 0 || rng.random_bool(0.7)).collect();
            let s: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w_a = Tensor::uniform(&[4, 2], 1.5, &mut rng);
            let w_c = Tensor::uniform(&[2, 6], 1.0, &mut rng);
            let a = attend(&states, &s, &mask, &w_a, &w_c).unwrap();
            let perm: Vec<usize> = (0..n).map(|j| (j + shift) % n).collect();
            let ps: Vec<Vec<f64>> = perm.iter().map(|&j| states[j].clone()).collect();
            let pm: Vec<bool> = perm.iter().map(|&j| mask[j]).collect();
            let b = attend(&ps, &s, &pm, &w_a, &w_c).unwrap();
            for (k, &j) in perm.iter().enumerate() {
                prop_assert!((b.weights[k] - a.weights[j]).abs() < 1e-12);
            }
            for (x, y) in a.state.iter().zip(&b.state) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_projection_is_uniform() {
        let w_o = Tensor::zeros(&[20, 3]);
        let b_o = Tensor::zeros(&[20]);
        let p = outline_token_distribution(&[0.3, 0.2, -0.4], &w_o, &b_o).unwrap();
        assert!(p.iter().all(|x| (x - 0.05).abs() < 1e-15));
        assert!(outline_token_distribution(&[0.3], &w_o, &b_o).is_err());
    }

    #[test]
    fn distribution_argmax_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let w_o = Tensor::uniform(&[9, 3], 2.0, &mut rng);
            let b_o = Tensor::uniform(&[9], 1.0, &mut rng);
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = outline_token_distribution(&s, &w_o, &b_o).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut shifted = b_o.clone();
            shifted.data_mut().iter_mut().for_each(|x| *x += 3.7);
            let q = outline_token_distribution(&s, &w_o, &shifted).unwrap();
            assert_eq!(argmax(&p), argmax(&q));
        }
    }

    #[test]
    fn loss_examples() {
        let uniform = vec![vec![(1.0f64 / 20.0).ln(); 20]; 3];
        let l = outline_loss(&uniform, &[4, 7, 19], &[true; 3]).unwrap();
        assert!((l - 3.0 * 20f64.ln()).abs() < 1e-12);
        assert!((l - 8.987).abs() < 1e-3);

        let certain = vec![vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]; 2];
        assert_eq!(outline_loss(&certain, &[1, 1], &[true, true]).unwrap(), 0.0);

        let hand = vec![
            vec![0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()],
            vec![0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()],
        ];
        let l = outline_loss(&hand, &[0, 2], &[true, true]).unwrap();
        assert!((l - 2.0794).abs() < 1e-4);
        assert!((l - (-(0.5f64.ln()) - 0.25f64.ln())).abs() < 1e-15);

        let masked = outline_loss(&hand, &[0, 2], &[true, false]).unwrap();
        assert!((masked - 2f64.ln()).abs() < 1e-15);
        assert!(outline_loss(&hand, &[0, 3], &[true, true]).is_err());
        assert!(outline_loss(&hand, &[0], &[true]).is_err());
    }

    #[test]
    fn zero_weights_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = OutlineDecoderParams::init(10, 3, 2, &mut rng);
        p.lstm = LstmParams::zeros(3, 2);
        let s = outline_step(&p, &[0.1, 0.2, 0.3], (&[0.0, 0.0], &[0.0, 0.0])).unwrap();
        assert_eq!(s.h, vec![0.0, 0.0]);
        assert!(outline_step(&p, &[0.1], (&[0.0, 0.0], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        use crate::numerics::{finite_difference_gradient, gradient_check};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let states = random_states(&mut rng, 4, 6);
        let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w_a = Tensor::uniform(&[6, 3], 1.0, &mut rng);
        let w_c = Tensor::uniform(&[3, 9], 1.0, &mut rng);
        let probe: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = [true, true, false, true];
        let att = attend(&states, &s, &mask, &w_a, &w_c).unwrap();
        let mut dw_a = Tensor::zeros(&[6, 3]);
        let mut dw_c = Tensor::zeros(&[3, 9]);
        let mut d_enc = vec![vec![0.0; 6]; 4];
        let ds = attend_backward(&states, &s, &att, &probe, &w_a, &w_c, &mut dw_a, &mut dw_c, &mut d_enc);

        let num_wa = finite_difference_gradient(
            |w: &Tensor| dot(&attend(&states, &s, &mask, w, &w_c).unwrap().state, &probe),
            &w_a,
            1e-6,
        )
        .unwrap();
        assert!(gradient_check(&dw_a, &num_wa, 1e-7).unwrap()[0].passed);
        let num_wc = finite_difference_gradient(
            |w: &Tensor| dot(&attend(&states, &s, &mask, &w_a, w).unwrap().state, &probe),
            &w_c,
            1e-6,
        )
        .unwrap();
        assert!(gradient_check(&dw_c, &num_wc, 1e-7).unwrap()[0].passed);
        let s_t = Tensor::from_vec(&[3], s.clone()).unwrap();
        let num_s = finite_difference_gradient(
            |v: &Tensor| dot(&attend(&states, v.data(), &mask, &w_a, &w_c).unwrap().state, &probe),
            &s_t,
            1e-6,
        )
        .unwrap();
        let ds_t = Tensor::from_vec(&[3], ds).unwrap();
        assert!(gradient_check(&ds_t, &num_s, 1e-7).unwrap()[0].passed);
        assert!(d_enc[2].iter().all(|&x| x == 0.0));
    }
}
