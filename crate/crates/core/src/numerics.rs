//! Dense vectors and matrices, activations, the LSTM cell and the
//! finite-difference gradient oracle.
//!
//! Everything is 64-bit. Matrices are row-major; vectors are plain slices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch {
                context: "tensor data",
                expected: n,
                found: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform(-r, r) with r = 1/sqrt(fan_in), fan_in being the column count
    /// (or the length for vectors).
    pub fn uniform_fan_in<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let fan_in = *shape.last().unwrap_or(&1);
        let r = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self::uniform(shape, r, rng)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], r: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-r..=r)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// `self · x` for a matrix of shape [r × c] and `x` of length c.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols());
        (0..self.rows()).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ · y` for a matrix of shape [r × c] and `y` of length r.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows());
        let mut out = vec![0.0; self.cols()];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(&mut out, yi, self.row(i));
            }
        }
        out
    }

    /// `self += a ⊗ b`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows());
        debug_assert_eq!(b.len(), self.cols());
        for (i, &ai) in a.iter().enumerate() {
            if ai != 0.0 {
                axpy(self.row_mut(i), ai, b);
            }
        }
    }

    pub fn add_assign_slice(&mut self, v: &[f64]) {
        axpy(&mut self.data, 1.0, v);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn max_finite(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Softmax with max subtraction. Entries equal to `-inf` get probability 0.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    let m = max_finite(v);
    if !m.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    Ok(out)
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("log_softmax input"));
    }
    let m = max_finite(v);
    if !m.is_finite() {
        return Err(Error::NonFinite("log_softmax input".into()));
    }
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    Ok(v.iter().map(|x| x - lse).collect())
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

/// Affine map followed by tanh, with the pre-activation discarded.
pub fn tanh_affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let mut y = w.matvec(x);
    for (yi, bi) in y.iter_mut().zip(b.data()) {
        *yi = (*yi + bi).tanh();
    }
    y
}

/// Backward through `y = tanh(Wx + b)`; returns dx.
pub fn tanh_affine_backward(
    w: &Tensor,
    x: &[f64],
    y: &[f64],
    dy: &[f64],
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Vec<f64> {
    let dpre: Vec<f64> = y.iter().zip(dy).map(|(y, d)| d * (1.0 - y * y)).collect();
    dw.add_outer(&dpre, x);
    db.add_assign_slice(&dpre);
    w.matvec_t(&dpre)
}

/// Weights of one LSTM cell. `w` has shape [4h × (input + h)] and acts on
/// `[x; h_prev]`; row blocks are ordered input, forget, output, candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w: Tensor::zeros(&[4 * hidden, input + hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Weights uniform by fan-in; biases zero except the forget gate at 1.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let w = Tensor::uniform_fan_in(&[4 * hidden, input + hidden], rng);
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmParams { w, b }
    }

    pub fn hidden(&self) -> usize {
        self.b.len() / 4
    }

    pub fn input(&self) -> usize {
        self.w.cols() - self.hidden()
    }
}

/// One evaluated LSTM step, keeping what the backward pass needs.
#[derive(Clone, Debug)]
pub struct LstmStep {
    pub input: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub g: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

pub fn lstm_cell_step(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    params: &LstmParams,
) -> Result<LstmStep> {
    let hd = params.hidden();
    if x.len() != params.input() {
        return Err(Error::DimensionMismatch {
            context: "lstm input",
            expected: params.input(),
            found: x.len(),
        });
    }
    if h_prev.len() != hd || c_prev.len() != hd {
        return Err(Error::DimensionMismatch {
            context: "lstm state",
            expected: hd,
            found: if h_prev.len() != hd {
                h_prev.len()
            } else {
                c_prev.len()
            },
        });
    }
    let input = concat(x, h_prev);
    let mut z = params.w.matvec(&input);
    axpy(&mut z, 1.0, params.b.data());
    let i: Vec<f64> = z[..hd].iter().map(|&v| sigmoid(v)).collect();
    let f: Vec<f64> = z[hd..2 * hd].iter().map(|&v| sigmoid(v)).collect();
    let o: Vec<f64> = z[2 * hd..3 * hd].iter().map(|&v| sigmoid(v)).collect();
    let g: Vec<f64> = z[3 * hd..].iter().map(|v| v.tanh()).collect();
    let c: Vec<f64> = (0..hd).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
    let h: Vec<f64> = (0..hd).map(|k| o[k] * c[k].tanh()).collect();
    Ok(LstmStep {
        input,
        c_prev: c_prev.to_vec(),
        i,
        f,
        o,
        g,
        c,
        h,
    })
}

/// Gradients flowing out of one LSTM step.
pub struct LstmGrad {
    pub dx: Vec<f64>,
    pub dh_prev: Vec<f64>,
    pub dc_prev: Vec<f64>,
}

/// Backward through one step given dL/dh and dL/dc at its outputs;
/// accumulates into `grads`.
pub fn lstm_cell_backward(
    step: &LstmStep,
    params: &LstmParams,
    dh: &[f64],
    dc: &[f64],
    grads: &mut LstmParams,
) -> LstmGrad {
    let hd = step.h.len();
    let mut dz = vec![0.0; 4 * hd];
    let mut dc_prev = vec![0.0; hd];
    for k in 0..hd {
        let tc = step.c[k].tanh();
        let d_o = dh[k] * tc;
        let dct = dc[k] + dh[k] * step.o[k] * (1.0 - tc * tc);
        let d_i = dct * step.g[k];
        let d_g = dct * step.i[k];
        let d_f = dct * step.c_prev[k];
        dc_prev[k] = dct * step.f[k];
        dz[k] = d_i * step.i[k] * (1.0 - step.i[k]);
        dz[hd + k] = d_f * step.f[k] * (1.0 - step.f[k]);
        dz[2 * hd + k] = d_o * step.o[k] * (1.0 - step.o[k]);
        dz[3 * hd + k] = d_g * (1.0 - step.g[k] * step.g[k]);
    }
    grads.w.add_outer(&dz, &step.input);
    grads.b.add_assign_slice(&dz);
    let mut dinput = params.w.matvec_t(&dz);
    let dh_prev = dinput.split_off(step.input.len() - hd);
    LstmGrad {
        dx: dinput,
        dh_prev,
        dc_prev,
    }
}

/// A collection of named parameter blocks that can be addressed by index.
pub trait ParameterSet: Clone {
    fn block_count(&self) -> usize;
    fn block_name(&self, index: usize) -> String;
    fn block(&self, index: usize) -> &Tensor;
    fn block_mut(&mut self, index: usize) -> &mut Tensor;

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for b in 0..out.block_count() {
            out.block_mut(b).fill(0.0);
        }
        out
    }
}

impl ParameterSet for Tensor {
    fn block_count(&self) -> usize {
        1
    }
    fn block_name(&self, _index: usize) -> String {
        "theta".to_string()
    }
    fn block(&self, _index: usize) -> &Tensor {
        self
    }
    fn block_mut(&mut self, _index: usize) -> &mut Tensor {
        self
    }
}

/// Central differences `(L(θ+ε) − L(θ−ε)) / 2ε` for every coordinate.
pub fn finite_difference_gradient<P, F>(mut loss: F, params: &P, epsilon: f64) -> Result<P>
where
    P: ParameterSet,
    F: FnMut(&P) -> f64,
{
    if epsilon <= 0.0 {
        return Err(Error::Invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut probe = params.clone();
    let mut grad = params.zeros_like();
    for b in 0..params.block_count() {
        for k in 0..params.block(b).len() {
            let orig = params.block(b).data()[k];
            probe.block_mut(b).data_mut()[k] = orig + epsilon;
            let up = loss(&probe);
            probe.block_mut(b).data_mut()[k] = orig - epsilon;
            let down = loss(&probe);
            probe.block_mut(b).data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss while perturbing {}[{k}]",
                    params.block_name(b)
                )));
            }
            grad.block_mut(b).data_mut()[k] = (up - down) / (2.0 * epsilon);
        }
    }
    Ok(grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub relative_error: f64,
    pub passed: bool,
}

/// Per-block relative error `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)`.
pub fn gradient_check<P: ParameterSet>(
    analytic: &P,
    numeric: &P,
    tol: f64,
) -> Result<Vec<BlockCheck>> {
    if analytic.block_count() != numeric.block_count() {
        return Err(Error::DimensionMismatch {
            context: "gradient_check blocks",
            expected: analytic.block_count(),
            found: numeric.block_count(),
        });
    }
    let mut out = Vec::with_capacity(analytic.block_count());
    for b in 0..analytic.block_count() {
        let (a, n) = (analytic.block(b), numeric.block(b));
        if a.shape() != n.shape() {
            return Err(Error::DimensionMismatch {
                context: "gradient_check block shape",
                expected: a.len(),
                found: n.len(),
            });
        }
        let diff: f64 = a
            .data()
            .iter()
            .zip(n.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let denom = (a.norm_sq().sqrt() + n.norm_sq().sqrt()).max(1e-12);
        let relative_error = diff / denom;
        out.push(BlockCheck {
            name: analytic.block_name(b),
            relative_error,
            passed: relative_error <= tol,
        });
    }
    Ok(out)
}
