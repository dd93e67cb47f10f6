//! Neural-network building blocks on top of the tape: dropout, focal loss,
//! the Adam optimizer, gradient clipping, and LSTM layers.

use crate::rng::SeededRng;
use rand::Rng;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::NdiffError;

/// How a dropout layer behaves.
///
/// `Train` and `MonteCarlo` both sample a fresh mask; the distinction is who
/// is asking. Training samples masks as regularization, while Monte-Carlo
/// inference keeps sampling at prediction time to estimate uncertainty.
/// `Eval` is the plain deterministic forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
    MonteCarlo,
}

/// Inverted dropout: surviving elements are scaled by `1/(1-p)` so the layer
/// is unbiased in expectation. `Eval` mode (or `p == 0`) is the identity.
/// Rates outside `[0, 1)` are rejected.
pub fn dropout(
    g: &mut Graph,
    x: NodeId,
    p: f64,
    mode: DropoutMode,
    rng: &mut SeededRng,
) -> Result<NodeId, NdiffError> {
    if !(0.0..1.0).contains(&p) {
        return Err(NdiffError::BadDropoutRate { rate: p });
    }
    if mode == DropoutMode::Eval || p == 0.0 {
        return Ok(x);
    }
    let (rows, cols) = g.value(x).shape();
    let keep_scale = 1.0 / (1.0 - p);
    let mut mask = Tensor::zeros(rows, cols);
    for v in mask.data_mut() {
        if rng.random::<f64>() >= p {
            *v = keep_scale;
        }
    }
    g.dropout_mask(x, mask)
}

/// Smallest probability the focal loss will accept; predictions are clamped
/// into `[EPS, 1-EPS]` before the log.
pub const FOCAL_EPS: f64 = 1e-7;

/// Focal loss for one example: `-alpha_t * (1 - p_t)^gamma * ln(p_t)` where
/// `p_t` is the predicted probability of the true class and `alpha_t` is
/// `alpha` for positives, `1 - alpha` for negatives. `gamma = 0` recovers
/// (alpha-weighted) cross-entropy.
///
/// `p` must be a 1×1 node holding the predicted probability of the positive
/// class; it is clamped away from 0 and 1 (with a warning if that fires).
pub fn focal_loss(
    g: &mut Graph,
    p: NodeId,
    positive: bool,
    gamma: f64,
    alpha: f64,
) -> Result<NodeId, NdiffError> {
    if g.value(p).shape() != (1, 1) {
        return Err(NdiffError::Shape {
            op: "focal_loss",
            detail: format!("probability must be 1x1, got {:?}", g.value(p).shape()),
        });
    }
    if !(gamma >= 0.0) {
        return Err(NdiffError::Shape {
            op: "focal_loss",
            detail: format!("gamma must be >= 0, got {gamma}"),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(NdiffError::Shape {
            op: "focal_loss",
            detail: format!("alpha must be in [0, 1], got {alpha}"),
        });
    }
    let clamped = g.clamp(p, FOCAL_EPS, 1.0 - FOCAL_EPS);
    let (p_t, alpha_t) = if positive {
        (clamped, alpha)
    } else {
        (g.affine(clamped, -1.0, 1.0), 1.0 - alpha)
    };
    let focus = {
        let one_minus = g.affine(p_t, -1.0, 1.0);
        g.pow_scalar(one_minus, gamma)?
    };
    let log_p = g.ln(p_t);
    let weighted = g.mul(focus, log_p)?;
    Ok(g.affine(weighted, -alpha_t, 0.0))
}

/// Mean of a batch of 1×1 nodes, itself a 1×1 node.
pub fn mean_of(g: &mut Graph, losses: &[NodeId]) -> Result<NodeId, NdiffError> {
    let stacked = g.stack_rows(losses)?;
    Ok(g.mean_all(stacked))
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig { learning_rate: 0.001, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam optimizer state: first/second moment estimates per parameter, plus
/// the step counter driving bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> AdamState {
        let zeros: Vec<Tensor> = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        AdamState { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One Adam update over every parameter, in place. The moment estimates
    /// are bias-corrected before the update is applied.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), NdiffError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NdiffError::Adam(format!(
                "state tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(NdiffError::Adam(format!(
                    "parameter {i} has shape {:?} with grad {:?}, state expects {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v))
        {
            for (((pv, &gv), mv), vv) in
                param.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Scale gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let sum_sq: f64 = grads.iter().flat_map(|g| g.data()).map(|&v| v * v).sum();
    let norm = sum_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Default cap on the global gradient norm during neural training.
pub const GRAD_CLIP_NORM: f64 = 5.0;

/// A single-direction LSTM scan.
pub struct LstmOutput {
    /// Hidden state per timestep in original sequence order, `[T × h]`.
    pub states: NodeId,
    /// Hidden state after the last scan step, `[1 × h]`. For a reversed scan
    /// this is the state at the first timestep.
    pub last: NodeId,
}

/// Run an LSTM over `seq` (`[T × d]`). The weight matrix `w` packs the four
/// gates as `[(d + h) × 4h]` with gate order input, forget, candidate,
/// output; `b` is `[1 × 4h]`. All-zero weights produce all-zero outputs.
pub fn lstm(
    g: &mut Graph,
    seq: NodeId,
    w: NodeId,
    b: NodeId,
    reverse: bool,
) -> Result<LstmOutput, NdiffError> {
    let (steps, d) = g.value(seq).shape();
    let (br, four_h) = g.value(b).shape();
    if br != 1 || four_h % 4 != 0 || four_h == 0 {
        return Err(NdiffError::Shape {
            op: "lstm",
            detail: format!("bias must be 1x4h, got {br}x{four_h}"),
        });
    }
    let h = four_h / 4;
    if g.value(w).shape() != (d + h, four_h) {
        return Err(NdiffError::Shape {
            op: "lstm",
            detail: format!(
                "weights must be {}x{four_h} for input width {d}, got {:?}",
                d + h,
                g.value(w).shape()
            ),
        });
    }

    let mut h_prev = g.input(Tensor::zeros(1, h));
    let mut c_prev = g.input(Tensor::zeros(1, h));
    let mut rows: Vec<NodeId> = vec![h_prev; steps];
    let order: Vec<usize> =
        if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
    for t in order {
        let x_t = g.slice_rows(seq, t, t + 1)?;
        let z = g.concat_cols(x_t, h_prev)?;
        let zw = g.matmul(z, w)?;
        let pre = g.add(zw, b)?;
        let i_gate = {
            let s = g.slice_cols(pre, 0, h)?;
            g.sigmoid(s)
        };
        let f_gate = {
            let s = g.slice_cols(pre, h, 2 * h)?;
            g.sigmoid(s)
        };
        let cand = {
            let s = g.slice_cols(pre, 2 * h, 3 * h)?;
            g.tanh(s)
        };
        let o_gate = {
            let s = g.slice_cols(pre, 3 * h, 4 * h)?;
            g.sigmoid(s)
        };
        let c_t = {
            let keep = g.mul(f_gate, c_prev)?;
            let write = g.mul(i_gate, cand)?;
            g.add(keep, write)?
        };
        let h_t = {
            let squashed = g.tanh(c_t);
            g.mul(o_gate, squashed)?
        };
        rows[t] = h_t;
        h_prev = h_t;
        c_prev = c_t;
    }
    let states = g.stack_rows(&rows)?;
    Ok(LstmOutput { states, last: h_prev })
}

/// A bidirectional LSTM scan.
pub struct BiLstmOutput {
    /// Forward and backward hidden states concatenated per timestep,
    /// `[T × 2h]`.
    pub states: NodeId,
    /// Forward state at the last timestep joined with the backward state at
    /// the first, `[1 × 2h]`.
    pub final_state: NodeId,
}

/// Run forward and reverse LSTM scans over `seq` and concatenate them.
pub fn bilstm(
    g: &mut Graph,
    seq: NodeId,
    fwd_w: NodeId,
    fwd_b: NodeId,
    bwd_w: NodeId,
    bwd_b: NodeId,
) -> Result<BiLstmOutput, NdiffError> {
    let fwd = lstm(g, seq, fwd_w, fwd_b, false)?;
    let bwd = lstm(g, seq, bwd_w, bwd_b, true)?;
    let states = g.concat_cols(fwd.states, bwd.states)?;
    let final_state = g.concat_cols(fwd.last, bwd.last)?;
    Ok(BiLstmOutput { states, final_state })
}
