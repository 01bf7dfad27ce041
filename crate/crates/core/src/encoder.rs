//! Word embeddings and the bidirectional LSTM over the news tokens.

use rand::Rng;

use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::numerics::{concat, lstm_cell_backward, lstm_cell_step, LstmParams, LstmStep, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// [vocab × d_emb]; the PAD row stays zero.
    pub embedding: Tensor,
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(vocab: usize, d_emb: usize, d_hid: usize, rng: &mut R) -> Self {
        EncoderParams {
            embedding: init_embedding(vocab, d_emb, rng),
            fwd: LstmParams::init(d_emb, d_hid, rng),
            bwd: LstmParams::init(d_emb, d_hid, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden()
    }
}

pub(crate) fn init_embedding<R: Rng + ?Sized>(vocab: usize, d_emb: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::uniform_fan_in(&[vocab, d_emb], rng);
    t.row_mut(PAD).fill(0.0);
    t
}

/// Row lookup; the PAD row is zero.
pub fn embed(ids: &[usize], table: &Tensor) -> Result<Vec<Vec<f64>>> {
    ids.iter()
        .map(|&id| {
            if id >= table.rows() {
                return Err(Error::OutOfRange {
                    context: "embedding lookup",
                    id,
                    size: table.rows(),
                });
            }
            Ok(table.row(id).to_vec())
        })
        .collect()
}

/// Scatter-add embedding gradients, skipping the frozen PAD row.
pub(crate) fn embed_backward(ids: &[usize], d_embedded: &[Vec<f64>], grad: &mut Tensor) {
    for (&id, d) in ids.iter().zip(d_embedded) {
        if id != PAD {
            crate::numerics::axpy(grad.row_mut(id), 1.0, d);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates {
    /// One `[forward ; backward]` vector per position.
    pub states: Vec<Vec<f64>>,
    pub final_forward: Vec<f64>,
    pub final_backward: Vec<f64>,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }
}

/// Forward pass with the per-step caches kept for backpropagation.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub ids: Vec<usize>,
    pub fwd_steps: Vec<LstmStep>,
    /// Indexed by position, not by processing order.
    pub bwd_steps: Vec<LstmStep>,
    pub output: EncoderStates,
}

fn run_direction(
    embedded: &[Vec<f64>],
    params: &LstmParams,
    reverse: bool,
) -> Result<Vec<LstmStep>> {
    let hd = params.hidden();
    let m = embedded.len();
    let mut steps: Vec<Option<LstmStep>> = vec![None; m];
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    for k in 0..m {
        let t = if reverse { m - 1 - k } else { k };
        let step = lstm_cell_step(&embedded[t], &h, &c, params)?;
        h.clone_from(&step.h);
        c.clone_from(&step.c);
        steps[t] = Some(step);
    }
    Ok(steps.into_iter().map(|s| s.expect("every position visited")).collect())
}

fn assemble(fwd: &[LstmStep], bwd: &[LstmStep]) -> EncoderStates {
    let states = fwd.iter().zip(bwd).map(|(f, b)| concat(&f.h, &b.h)).collect();
    EncoderStates {
        states,
        final_forward: fwd.last().map(|s| s.h.clone()).unwrap_or_default(),
        final_backward: bwd.first().map(|s| s.h.clone()).unwrap_or_default(),
    }
}

/// Runs both directions from zero initial states and concatenates per position.
pub fn encode_bilstm(
    embedded: &[Vec<f64>],
    fwd: &LstmParams,
    bwd: &LstmParams,
) -> Result<EncoderStates> {
    if embedded.is_empty() {
        return Err(Error::Empty("encoder input"));
    }
    let f = run_direction(embedded, fwd, false)?;
    let b = run_direction(embedded, bwd, true)?;
    Ok(assemble(&f, &b))
}

/// Embeds and encodes an unpadded id sequence, keeping caches.
pub fn encoder_forward(params: &EncoderParams, ids: &[usize]) -> Result<EncoderTrace> {
    if ids.is_empty() {
        return Err(Error::Empty("encoder input"));
    }
    let embedded = embed(ids, &params.embedding)?;
    let fwd_steps = run_direction(&embedded, &params.fwd, false)?;
    let bwd_steps = run_direction(&embedded, &params.bwd, true)?;
    let output = assemble(&fwd_steps, &bwd_steps);
    Ok(EncoderTrace {
        ids: ids.to_vec(),
        fwd_steps,
        bwd_steps,
        output,
    })
}

/// Backpropagates `d_states` (one 2h vector per position) and the gradient
/// on the final forward state into `grads`.
pub fn encoder_backward(
    params: &EncoderParams,
    trace: &EncoderTrace,
    d_states: &[Vec<f64>],
    d_final_forward: &[f64],
    grads: &mut EncoderParams,
) {
    let hd = params.hidden();
    let m = trace.ids.len();
    let d_emb = params.embedding.cols();
    let mut d_embedded = vec![vec![0.0; d_emb]; m];

    let mut dh = d_final_forward.to_vec();
    let mut dc = vec![0.0; hd];
    for t in (0..m).rev() {
        crate::numerics::axpy(&mut dh, 1.0, &d_states[t][..hd]);
        let g = lstm_cell_backward(&trace.fwd_steps[t], &params.fwd, &dh, &dc, &mut grads.fwd);
        crate::numerics::axpy(&mut d_embedded[t], 1.0, &g.dx);
        dh = g.dh_prev;
        dc = g.dc_prev;
    }

    let mut dh = vec![0.0; hd];
    let mut dc = vec![0.0; hd];
    for t in 0..m {
        crate::numerics::axpy(&mut dh, 1.0, &d_states[t][hd..]);
        let g = lstm_cell_backward(&trace.bwd_steps[t], &params.bwd, &dh, &dc, &mut grads.bwd);
        crate::numerics::axpy(&mut d_embedded[t], 1.0, &g.dx);
        dh = g.dh_prev;
        dc = g.dc_prev;
    }

    embed_backward(&trace.ids, &d_embedded, &mut grads.embedding);
}
