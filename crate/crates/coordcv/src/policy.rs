//! Stochastic policies over an MLP trunk: a diagonal Gaussian head for
//! continuous actions and a softmax head for discrete ones.
//!
//! Both expose per-example score rows, i.e. the gradient of
//! log pi(a|s) with respect to the full flat parameter vector. For the
//! Gaussian head the flat vector is the mean network's parameters followed by
//! a state-independent `log_std` block; the softmax head has no extra block.
//!
//! The Gaussian standard deviation is clamped to [e^-20, e^2] wherever it
//! enters a density or a score, so squared-score weights stay finite for
//! degenerate policies. Sampling uses the unclamped standard deviation: a
//! nearly deterministic policy should sample actions at its mean, and the
//! clamp exists to protect variance computations, not to inject noise.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Mlp, ParamLayout, Tape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Dense n x d matrix of score rows, with the layout that names the
/// d coordinates' tensors.
#[derive(Clone, Debug)]
pub struct ScoreMatrix {
    mat: Matrix,
    layout: ParamLayout,
}

impl ScoreMatrix {
    pub fn n(&self) -> usize {
        self.mat.rows()
    }

    pub fn dim(&self) -> usize {
        self.mat.cols()
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.mat.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.mat
    }
}

/// Common surface of both policy heads.
pub trait Policy {
    fn obs_dim(&self) -> usize;
    /// Entries in an action vector (1 for discrete actions).
    fn action_dim(&self) -> usize;
    fn param_count(&self) -> usize;
    fn layout(&self) -> &ParamLayout;
    fn params_flat(&self) -> Vec<f64>;
    fn set_params_flat(&mut self, flat: &[f64]);
    fn log_prob(&self, state: &[f64], action: &[f64]) -> f64;
    fn sample(&self, state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// Deterministic action (mean / argmax); used by evaluation modes.
    fn greedy_action(&self, state: &[f64]) -> Vec<f64>;
    /// Writes d log pi(a|s) / d theta into `out` (len = param_count).
    fn score_row(&self, state: &[f64], action: &[f64], out: &mut [f64]) -> Result<()>;
    fn entropy(&self, state: &[f64]) -> f64;
    /// Accumulates d entropy / d theta into `out`.
    fn entropy_grad_acc(&self, state: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Scores for samples i in [0, n), full matrix. Errors name the first sample
/// whose row comes out non-finite.
pub fn score_matrix<P: Policy>(policy: &P, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<ScoreMatrix> {
    assert_eq!(states.len(), actions.len(), "states/actions length mismatch");
    let d = policy.param_count();
    let mut mat = Matrix::zeros(states.len(), d);
    for i in 0..states.len() {
        policy.score_row(&states[i], &actions[i], mat.row_mut(i))?;
        if !mat.row(i).iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("score_matrix", i));
        }
    }
    Ok(ScoreMatrix { mat, layout: policy.layout().clone() })
}

/// Row provider for score-hungry consumers that cannot afford the full n x d
/// matrix. `ScoreMatrix` serves rows by copy; `LazyScores` recomputes them
/// from the policy on demand.
pub trait ScoreSource {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Writes the score row for sample `index` into `out`.
    fn row_into(&self, index: usize, out: &mut [f64]) -> Result<()>;
}

impl ScoreSource for ScoreMatrix {
    fn len(&self) -> usize {
        self.n()
    }

    fn dim(&self) -> usize {
        ScoreMatrix::dim(self)
    }

    fn row_into(&self, index: usize, out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(self.row(index));
        Ok(())
    }
}

pub struct LazyScores<'a, P: Policy> {
    policy: &'a P,
    states: &'a [Vec<f64>],
    actions: &'a [Vec<f64>],
}

impl<'a, P: Policy> LazyScores<'a, P> {
    pub fn new(policy: &'a P, states: &'a [Vec<f64>], actions: &'a [Vec<f64>]) -> Self {
        assert_eq!(states.len(), actions.len(), "states/actions length mismatch");
        LazyScores { policy, states, actions }
    }
}

impl<P: Policy> ScoreSource for LazyScores<'_, P> {
    fn len(&self) -> usize {
        self.states.len()
    }

    fn dim(&self) -> usize {
        self.policy.param_count()
    }

    fn row_into(&self, index: usize, out: &mut [f64]) -> Result<()> {
        self.policy.score_row(&self.states[index], &self.actions[index], out)
    }
}

// ─── Diagonal Gaussian policy ───────────────────────────────────────────────

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct GaussianPolicy {
    mean_net: Mlp,
    log_std: Vec<f64>,
    layout: ParamLayout,
}

impl GaussianPolicy {
    /// Hidden layers get gain sqrt(2); the mean head is scaled down to 0.01 so
    /// initial actions hover near zero. log_std starts at 0 (unit variance).
    pub fn new(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![obs_dim];
        dims.extend_from_slice(hidden);
        dims.push(act_dim);
        let mut gains = vec![std::f64::consts::SQRT_2; hidden.len()];
        gains.push(0.01);
        let mean_net = Mlp::new(&dims, &gains, rng);
        let layout = mean_net.layout().with_extra("log_std", act_dim);
        GaussianPolicy { mean_net, log_std: vec![0.0; act_dim], layout }
    }

    pub fn act_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn mean_net(&self) -> &Mlp {
        &self.mean_net
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn set_log_std(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.log_std.len());
        self.log_std.copy_from_slice(v);
    }

    /// Clamped standard deviations used by densities and scores.
    fn sigma_eff(&self) -> Vec<f64> {
        self.log_std.iter().map(|&l| l.clamp(LOG_STD_MIN, LOG_STD_MAX).exp()).collect()
    }

    pub fn mean(&self, state: &[f64]) -> Vec<f64> {
        self.mean_net.infer(state)
    }

    fn forward_mean(&self, state: &[f64]) -> (Vec<f64>, Tape) {
        self.mean_net.forward(state)
    }
}

impl Policy for GaussianPolicy {
    fn obs_dim(&self) -> usize {
        self.mean_net.in_dim()
    }

    fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    fn param_count(&self) -> usize {
        self.mean_net.param_count() + self.log_std.len()
    }

    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn params_flat(&self) -> Vec<f64> {
        let mut flat = self.mean_net.params_flat();
        flat.extend_from_slice(&self.log_std);
        flat
    }

    fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat vector has {} entries, policy has {}", flat.len(), self.param_count());
        let np = self.mean_net.param_count();
        self.mean_net.set_params_flat(&flat[..np]);
        self.log_std.copy_from_slice(&flat[np..]);
    }

    fn log_prob(&self, state: &[f64], action: &[f64]) -> f64 {
        assert_eq!(action.len(), self.log_std.len(), "action has {} dims, policy has {}", action.len(), self.log_std.len());
        let mu = self.mean(state);
        let sigma = self.sigma_eff();
        let mut lp = 0.0;
        for k in 0..action.len() {
            let z = (action[k] - mu[k]) / sigma[k];
            lp += -0.5 * z * z - sigma[k].ln() - HALF_LN_2PI;
        }
        lp
    }

    fn sample(&self, state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mu = self.mean(state);
        mu.iter()
            .zip(&self.log_std)
            .map(|(&m, &l)| m + l.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn greedy_action(&self, state: &[f64]) -> Vec<f64> {
        self.mean(state)
    }

    fn score_row(&self, state: &[f64], action: &[f64], out: &mut [f64]) -> Result<()> {
        assert_eq!(out.len(), self.param_count(), "score buffer has {} entries, policy has {} params", out.len(), self.param_count());
        out.fill(0.0);
        let (mu, tape) = self.forward_mean(state);
        let sigma = self.sigma_eff();
        let np = self.mean_net.param_count();
        // d log pi / d mu_k = (a_k - mu_k) / sigma_k^2
        let seed: Vec<f64> = (0..action.len()).map(|k| (action[k] - mu[k]) / (sigma[k] * sigma[k])).collect();
        self.mean_net.backward_per_example(&tape, &seed, &mut out[..np])?;
        // d log pi / d log_std_k = z_k^2 - 1 inside the clamp range, 0 outside
        for k in 0..action.len() {
            let z = (action[k] - mu[k]) / sigma[k];
            let inside = self.log_std[k] > LOG_STD_MIN && self.log_std[k] < LOG_STD_MAX;
            out[np + k] = if inside { z * z - 1.0 } else { 0.0 };
        }
        Ok(())
    }

    fn entropy(&self, _state: &[f64]) -> f64 {
        let sigma = self.sigma_eff();
        sigma.iter().map(|s| s.ln() + 0.5 + HALF_LN_2PI).sum()
    }

    fn entropy_grad_acc(&self, _state: &[f64], out: &mut [f64]) -> Result<()> {
        let np = self.mean_net.param_count();
        for (k, &l) in self.log_std.iter().enumerate() {
            if l > LOG_STD_MIN && l < LOG_STD_MAX {
                out[np + k] += 1.0;
            }
        }
        Ok(())
    }
}

// ─── Softmax policy ─────────────────────────────────────────────────────────

/// Softmax over a small discrete action set. Actions travel as
/// single-element vectors holding the action index.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SoftmaxPolicy {
    logit_net: Mlp,
    layout: ParamLayout,
}

impl SoftmaxPolicy {
    pub fn new(obs_dim: usize, n_actions: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(n_actions >= 2, "need at least two actions");
        let mut dims = vec![obs_dim];
        dims.extend_from_slice(hidden);
        dims.push(n_actions);
        let mut gains = vec![std::f64::consts::SQRT_2; hidden.len()];
        gains.push(0.01);
        let logit_net = Mlp::new(&dims, &gains, rng);
        let layout = logit_net.layout();
        SoftmaxPolicy { logit_net, layout }
    }

    pub fn n_actions(&self) -> usize {
        self.logit_net.out_dim()
    }

    pub fn probs(&self, state: &[f64]) -> Vec<f64> {
        softmax(&self.logit_net.infer(state))
    }

    fn action_index(&self, action: &[f64]) -> usize {
        assert_eq!(action.len(), 1, "discrete action must be a single index");
        let idx = action[0] as usize;
        assert!(
            action[0].fract() == 0.0 && idx < self.n_actions(),
            "action index {} out of range ({} actions)",
            action[0],
            self.n_actions()
        );
        idx
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    logits[idx] - lse
}

impl Policy for SoftmaxPolicy {
    fn obs_dim(&self) -> usize {
        self.logit_net.in_dim()
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn param_count(&self) -> usize {
        self.logit_net.param_count()
    }

    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn params_flat(&self) -> Vec<f64> {
        self.logit_net.params_flat()
    }

    fn set_params_flat(&mut self, flat: &[f64]) {
        self.logit_net.set_params_flat(flat);
    }

    fn log_prob(&self, state: &[f64], action: &[f64]) -> f64 {
        let idx = self.action_index(action);
        log_softmax_at(&self.logit_net.infer(state), idx)
    }

    fn sample(&self, state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let p = self.probs(state);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, &pk) in p.iter().enumerate() {
            acc += pk;
            if u < acc {
                return vec![k as f64];
            }
        }
        vec![(p.len() - 1) as f64]
    }

    fn greedy_action(&self, state: &[f64]) -> Vec<f64> {
        let logits = self.logit_net.infer(state);
        let mut best = 0;
        for k in 1..logits.len() {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        vec![best as f64]
    }

    fn score_row(&self, state: &[f64], action: &[f64], out: &mut [f64]) -> Result<()> {
        assert_eq!(out.len(), self.param_count(), "score buffer has {} entries, policy has {} params", out.len(), self.param_count());
        out.fill(0.0);
        let idx = self.action_index(action);
        let (logits, tape) = self.logit_net.forward(state);
        let p = softmax(&logits);
        // d log pi(a) / d logits = onehot(a) - p
        let mut seed: Vec<f64> = p.iter().map(|&pk| -pk).collect();
        seed[idx] += 1.0;
        self.logit_net.backward_per_example(&tape, &seed, out)
    }

    fn entropy(&self, state: &[f64]) -> f64 {
        self.probs(state).iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }

    fn entropy_grad_acc(&self, state: &[f64], out: &mut [f64]) -> Result<()> {
        let (logits, tape) = self.logit_net.forward(state);
        let p = softmax(&logits);
        let h: f64 = p.iter().filter(|&&pk| pk > 0.0).map(|&pk| -pk * pk.ln()).sum();
        // dH/dz_j = -p_j (ln p_j + H)
        let seed: Vec<f64> = p.iter().map(|&pj| if pj > 0.0 { -pj * (pj.ln() + h) } else { 0.0 }).collect();
        self.logit_net.backward_per_example(&tape, &seed, out)
    }
}
