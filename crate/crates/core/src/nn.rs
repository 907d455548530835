//! Actor and critic MLPs (12→64→64→4 and 12→64→64→1, tanh hidden units),
//! diagonal Gaussian policy head, hand-derived reverse-mode gradients of the
//! PPO loss, and Adam.
//!
//! All parameters live in one flat `Vec<f64>`; [`param_layout`] names each
//! tensor. Weight matrices are stored row-major as `fan_in × fan_out`.

use crate::env::{ACT_DIM, OBS_DIM};
use crate::exec::{self, Execution};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const HIDDEN: usize = 64;

/// ½·ln(2π)
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct NetSpec {
    base: usize,
    dims: [usize; 4],
    final_tanh: bool,
}

const fn net_len(dims: [usize; 4]) -> usize {
    dims[0] * dims[1] + dims[1] + dims[1] * dims[2] + dims[2] + dims[2] * dims[3] + dims[3]
}

const ACTOR_DIMS: [usize; 4] = [OBS_DIM, HIDDEN, HIDDEN, ACT_DIM];
const CRITIC_DIMS: [usize; 4] = [OBS_DIM, HIDDEN, HIDDEN, 1];
pub const ACTOR_LEN: usize = net_len(ACTOR_DIMS);
pub const CRITIC_LEN: usize = net_len(CRITIC_DIMS);
pub const LOG_STD_OFFSET: usize = ACTOR_LEN + CRITIC_LEN;
pub const PARAM_COUNT: usize = LOG_STD_OFFSET + ACT_DIM;

const ACTOR: NetSpec = NetSpec { base: 0, dims: ACTOR_DIMS, final_tanh: true };
const CRITIC: NetSpec = NetSpec { base: ACTOR_LEN, dims: CRITIC_DIMS, final_tanh: false };

impl NetSpec {
    /// (weight offset, bias offset, fan_in, fan_out) of layer `l`.
    fn layer(&self, l: usize) -> (usize, usize, usize, usize) {
        let mut off = self.base;
        for k in 0..l {
            off += self.dims[k] * self.dims[k + 1] + self.dims[k + 1];
        }
        let (fi, fo) = (self.dims[l], self.dims[l + 1]);
        (off, off + fi * fo, fi, fo)
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

pub fn param_layout() -> Vec<TensorSpec> {
    let mut out = Vec::new();
    for (prefix, net) in [("actor", ACTOR), ("critic", CRITIC)] {
        for l in 0..3 {
            let (w, b, fi, fo) = net.layer(l);
            out.push(TensorSpec { name: format!("{prefix}.{l}.weight"), shape: vec![fi, fo], offset: w, len: fi * fo });
            out.push(TensorSpec { name: format!("{prefix}.{l}.bias"), shape: vec![fo], offset: b, len: fo });
        }
    }
    out.push(TensorSpec { name: "log_std".into(), shape: vec![ACT_DIM], offset: LOG_STD_OFFSET, len: ACT_DIM });
    out
}

/// Which parameters belong to the actor (including log-std) or the critic.
pub fn is_actor_param(index: usize) -> bool {
    !(ACTOR_LEN..LOG_STD_OFFSET).contains(&index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros() -> Self {
        Self { data: vec![0.0; PARAM_COUNT] }
    }

    pub fn from_vec(data: Vec<f64>) -> Option<Self> {
        (data.len() == PARAM_COUNT).then_some(Self { data })
    }

    /// Orthogonal weights with gains (√2, √2, 0.01) for the actor and
    /// (√2, √2, 1) for the critic; zero biases and log-std.
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut p = Self::zeros();
        let s2 = std::f64::consts::SQRT_2;
        for (net, gains) in [(ACTOR, [s2, s2, 0.01]), (CRITIC, [s2, s2, 1.0])] {
            for (l, gain) in gains.into_iter().enumerate() {
                let (w, _, fi, fo) = net.layer(l);
                let m = orthogonal(fi, fo, gain, rng);
                p.data[w..w + fi * fo].copy_from_slice(&m);
            }
        }
        p
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn log_std(&self) -> [f64; ACT_DIM] {
        std::array::from_fn(|i| self.data[LOG_STD_OFFSET + i])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Deterministic action mean in [−1, 1].
    pub fn actor_mean(&self, obs: &[f64; OBS_DIM]) -> [f64; ACT_DIM] {
        let t = forward(ACTOR, &self.data, obs);
        std::array::from_fn(|i| t.out[i])
    }

    pub fn value(&self, obs: &[f64; OBS_DIM]) -> f64 {
        forward(CRITIC, &self.data, obs).out[0]
    }

    /// Weight matrix of layer `l` as a row-major `fan_in × fan_out` slice.
    pub fn layer_weights(&self, critic: bool, l: usize) -> (&[f64], usize, usize) {
        let net = if critic { CRITIC } else { ACTOR };
        let (w, _, fi, fo) = net.layer(l);
        (&self.data[w..w + fi * fo], fi, fo)
    }
}

/// Row-major `rows × cols` matrix with orthonormal rows or columns (whichever
/// is the shorter side) scaled by `gain`.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out[i * cols + j] = gain * v;
        }
    }
    out
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
struct Trace {
    h1: [f64; HIDDEN],
    h2: [f64; HIDDEN],
    out: [f64; ACT_DIM],
}

fn dense(params: &[f64], w: usize, b: usize, fi: usize, fo: usize, x: &[f64], y: &mut [f64]) {
    y[..fo].copy_from_slice(&params[b..b + fo]);
    for (i, xi) in x.iter().enumerate().take(fi) {
        let row = &params[w + i * fo..w + (i + 1) * fo];
        for (yj, wij) in y[..fo].iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
}

fn forward(net: NetSpec, params: &[f64], x: &[f64; OBS_DIM]) -> Trace {
    let mut t = Trace { h1: [0.0; HIDDEN], h2: [0.0; HIDDEN], out: [0.0; ACT_DIM] };
    let (w, b, fi, fo) = net.layer(0);
    dense(params, w, b, fi, fo, x, &mut t.h1);
    t.h1.iter_mut().for_each(|v| *v = v.tanh());
    let (w, b, fi, fo) = net.layer(1);
    dense(params, w, b, fi, fo, &t.h1, &mut t.h2);
    t.h2.iter_mut().for_each(|v| *v = v.tanh());
    let (w, b, fi, fo) = net.layer(2);
    dense(params, w, b, fi, fo, &t.h2, &mut t.out);
    if net.final_tanh {
        t.out[..fo].iter_mut().for_each(|v| *v = v.tanh());
    }
    t
}

/// Accumulates `dL/dθ` into `grad` given `dL/d(out)`.
fn backward(net: NetSpec, params: &[f64], x: &[f64; OBS_DIM], t: &Trace, d_out: &[f64], grad: &mut [f64]) {
    let fo_last = net.dims[3];
    let mut dz3 = [0.0; ACT_DIM];
    for k in 0..fo_last {
        dz3[k] = if net.final_tanh { d_out[k] * (1.0 - t.out[k] * t.out[k]) } else { d_out[k] };
    }
    let mut dh2 = [0.0; HIDDEN];
    dense_backward(params, net.layer(2), &t.h2, &dz3[..fo_last], &mut dh2, grad);
    let dz2: [f64; HIDDEN] = std::array::from_fn(|i| dh2[i] * (1.0 - t.h2[i] * t.h2[i]));
    let mut dh1 = [0.0; HIDDEN];
    dense_backward(params, net.layer(1), &t.h1, &dz2, &mut dh1, grad);
    let dz1: [f64; HIDDEN] = std::array::from_fn(|i| dh1[i] * (1.0 - t.h1[i] * t.h1[i]));
    let mut dx = [0.0; OBS_DIM];
    dense_backward(params, net.layer(0), x, &dz1, &mut dx, grad);
}

fn dense_backward(
    params: &[f64],
    (w, b, fi, fo): (usize, usize, usize, usize),
    x: &[f64],
    dz: &[f64],
    dx: &mut [f64],
    grad: &mut [f64],
) {
    for (g, d) in grad[b..b + fo].iter_mut().zip(dz) {
        *g += d;
    }
    for i in 0..fi {
        let row = w + i * fo;
        let xi = x[i];
        let mut acc = 0.0;
        for j in 0..fo {
            grad[row + j] += xi * dz[j];
            acc += params[row + j] * dz[j];
        }
        dx[i] = acc;
    }
}

/// Log-density of a diagonal Gaussian.
pub fn log_prob(mean: &[f64; ACT_DIM], log_std: &[f64; ACT_DIM], action: &[f64; ACT_DIM]) -> f64 {
    (0..ACT_DIM)
        .map(|i| {
            let z = (action[i] - mean[i]) * (-log_std[i]).exp();
            -0.5 * z * z - log_std[i] - HALF_LN_2PI
        })
        .sum()
}

pub fn entropy(log_std: &[f64; ACT_DIM]) -> f64 {
    log_std.iter().map(|s| s + 0.5 + HALF_LN_2PI).sum()
}

/// Unclamped draw from N(mean, exp(log_std)²).
pub fn sample<R: Rng + ?Sized>(mean: &[f64; ACT_DIM], log_std: &[f64; ACT_DIM], rng: &mut R) -> [f64; ACT_DIM] {
    std::array::from_fn(|i| {
        let n: f64 = rng.sample(StandardNormal);
        mean[i] + log_std[i].exp() * n
    })
}

pub fn clamp_action(action: &[f64; ACT_DIM]) -> [f64; ACT_DIM] {
    action.map(|a| a.clamp(-1.0, 1.0))
}

/// Coefficients of the combined PPO objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoeffs {
    pub clip_eps: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
}

/// One minibatch of training samples (struct of arrays, equal lengths).
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub obs: &'a [[f64; OBS_DIM]],
    pub actions: &'a [[f64; ACT_DIM]],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// −mean(min(ρA, clip(ρ)A))
    pub policy: f64,
    /// mean((V − R)²)
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Clipped surrogate `min(ρA, clip(ρ, 1−ε, 1+ε)A)` and whether the unclipped
/// branch is the active one.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

const GRAD_CHUNK: usize = 16;

/// Loss value and its exact gradient (written into `grad`, overwritten).
///
/// Samples are processed in fixed chunks whose partial gradients are summed
/// in chunk order, so the result does not depend on `exec`.
pub fn loss_and_grad(
    params: &PolicyParams,
    batch: &Batch<'_>,
    c: &LossCoeffs,
    exec: Execution,
    grad: &mut [f64],
) -> LossTerms {
    assert_eq!(grad.len(), PARAM_COUNT);
    let n = batch.len();
    let log_std = params.log_std();
    let chunks = n.div_ceil(GRAD_CHUNK);
    let partials = exec::map_range(exec, chunks, |ci| {
        let lo = ci * GRAD_CHUNK;
        let hi = (lo + GRAD_CHUNK).min(n);
        chunk_grad(params, batch, c, &log_std, lo..hi)
    });
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut sums = [0.0; 5];
    for (g, s) in partials {
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
        for k in 0..5 {
            sums[k] += s[k];
        }
    }
    let inv_n = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv_n);

    // Entropy is state independent: d/dlogσ_i of −c_e·H is −c_e.
    let ent = entropy(&log_std);
    for i in 0..ACT_DIM {
        grad[LOG_STD_OFFSET + i] -= c.entropy;
    }
    let policy = sums[0] * inv_n;
    let value = sums[1] * inv_n;
    LossTerms {
        policy,
        value,
        entropy: ent,
        total: c.policy * policy + c.value * value - c.entropy * ent,
        approx_kl: sums[2] * inv_n,
        clip_fraction: sums[3] * inv_n,
    }
}

fn chunk_grad(
    params: &PolicyParams,
    batch: &Batch<'_>,
    c: &LossCoeffs,
    log_std: &[f64; ACT_DIM],
    range: std::ops::Range<usize>,
) -> (Vec<f64>, [f64; 5]) {
    let p = params.as_slice();
    let mut grad = vec![0.0; PARAM_COUNT];
    let mut sums = [0.0; 5];
    let inv_var: [f64; ACT_DIM] = log_std.map(|s| (-2.0 * s).exp());
    for i in range {
        let obs = &batch.obs[i];
        let act = &batch.actions[i];
        if c.policy != 0.0 {
            let t = forward(ACTOR, p, obs);
            let mean: [f64; ACT_DIM] = t.out;
            let logp = log_prob(&mean, log_std, act);
            let log_ratio = logp - batch.old_log_probs[i];
            let ratio = log_ratio.exp();
            let adv = batch.advantages[i];
            let (surr, unclipped) = clipped_surrogate(ratio, adv, c.clip_eps);
            sums[0] -= surr;
            sums[2] += (ratio - 1.0) - log_ratio;
            if (ratio - 1.0).abs() > c.clip_eps {
                sums[3] += 1.0;
            }
            if unclipped && adv != 0.0 {
                // d(−c_p·ρA)/dlogp = −c_p·A·ρ
                let dlogp = -c.policy * adv * ratio;
                let mut d_mean = [0.0; ACT_DIM];
                for k in 0..ACT_DIM {
                    let diff = act[k] - mean[k];
                    d_mean[k] = dlogp * diff * inv_var[k];
                    grad[LOG_STD_OFFSET + k] += dlogp * (diff * diff * inv_var[k] - 1.0);
                }
                backward(ACTOR, p, obs, &t, &d_mean, &mut grad);
            }
        }
        if c.value != 0.0 {
            let t = forward(CRITIC, p, obs);
            let err = t.out[0] - batch.returns[i];
            sums[1] += err * err;
            backward(CRITIC, p, obs, &t, &[2.0 * c.value * err], &mut grad);
        }
    }
    (grad, sums)
}

/// Scales `grad` so its global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-5, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn reset_moments(&mut self) {
        self.step = 0;
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Gaussian density normalizer, exposed for tests: ln of (2π)^{d/2}.
pub fn log_normalizer(dim: usize) -> f64 {
    0.5 * dim as f64 * (2.0 * PI).ln()
}
