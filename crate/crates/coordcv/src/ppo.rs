//! PPO with per-coordinate control variates.
//!
//! The surrogate objective is clipped per coordinate: sample i contributes
//! to coordinate j through the scalar ratio r_i, but the clip decision uses
//! that coordinate's advantage A_ij = q_i - c_j(s_i), so different
//! coordinates of one sample can be kept or dropped independently. With all
//! columns of A equal (a scalar baseline) the update reduces to standard
//! clipped PPO.
//!
//! One outer update: collect a rollout, compute GAE targets against the
//! critic, snapshot old log-probs and the old-policy score matrix, fit the
//! baseline net on the rollout (score-weighted regression), build the n x d
//! advantage matrix, run clipped policy epochs with fresh per-minibatch
//! ratios and score rows at the current parameters, then run value epochs
//! on the clipped value loss. Learning rate anneals linearly to zero over
//! the configured total steps.
//!
//! Advantage normalization defaults to one shared normalizer, the batch
//! mean/std of the scalar GAE advantage, applied to every coordinate column
//! so the offsets between columns survive. Per-column normalization exists
//! behind a flag for comparison; it rescales away most of what separates
//! the coordinate baselines from a scalar one.
//!
//! Every random stream is seeded independently (collection, minibatch
//! shuffles, baseline fitting), so runs are reproducible and checkpoints
//! resume bit-for-bit.

use crate::baseline_fit::{fit, BaselineNet, FitConfig, FitReport};
use crate::envs::{
    compute_targets, make_env, ActionSpace, Collector, CollectorState, EpisodeEnd, ObsNormalizer, RolloutBatch,
};
use crate::error::{Error, Result};
use crate::estimators::{BaselineValues, CvMode};
use crate::linalg::Matrix;
use crate::nn::Mlp;
use crate::opt::{clip_grad_norm, Adam};
use crate::policy::{score_matrix, GaussianPolicy, LazyScores, Policy, ScoreSource, SoftmaxPolicy};
use crate::rng::{restore_rng, rng_from, save_rng, RngState};
use crate::stats::TraceVarAccum;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// One-sided clip: a nonnegative advantage caps the ratio at 1 + eps, a
/// negative one floors it at 1 - eps. Zero advantage takes the nonnegative
/// branch. Returns the effective ratio and whether the clip engaged.
pub fn clipped_ratio(ratio: f64, advantage: f64, eps: f64) -> (f64, bool) {
    debug_assert!(ratio > 0.0, "importance ratio must be positive, got {ratio}");
    let omega = if advantage >= 0.0 { ratio.min(1.0 + eps) } else { ratio.max(1.0 - eps) };
    (omega, omega != ratio)
}

/// A_ij = q_i - c_j(s_i), with the baseline broadcast at its own
/// granularity (one column repeated for scalar baselines, group-constant
/// blocks for layer baselines).
pub fn coord_advantages(q_hat: &[f64], baseline: &BaselineValues, dim: usize) -> Matrix {
    let n = q_hat.len();
    assert_eq!(baseline.len(), n, "baseline rows must match samples");
    let mut adv = Matrix::zeros(n, dim);
    for (i, &q) in q_hat.iter().enumerate() {
        let row = adv.row_mut(i);
        for (j, a) in row.iter_mut().enumerate() {
            *a = q - baseline.value(i, j);
        }
    }
    adv
}

/// Surrogate ascent gradient over a row subset:
///
///   dL/dtheta_j = (1/k) sum_i r_i 1[unclipped_ij] u_ij A_ij
///
/// `scores` serves current-parameter score rows for the k subset samples in
/// order; `rows` maps them to rows of the full advantage matrix. Clipped
/// cells contribute nothing. Returns the gradient and the fraction of
/// clipped (sample, coordinate) cells.
pub fn coord_ppo_gradient_rows(
    scores: &impl ScoreSource,
    ratios: &[f64],
    adv: &Matrix,
    rows: &[usize],
    eps: f64,
) -> Result<(Vec<f64>, f64)> {
    let k = rows.len();
    let d = scores.dim();
    assert_eq!(scores.len(), k, "score rows must match the subset");
    assert_eq!(ratios.len(), k, "one ratio per subset sample");
    assert_eq!(adv.cols(), d, "advantage columns must match coordinates");
    assert!(k > 0, "empty minibatch");
    let mut grad = vec![0.0; d];
    let mut clipped_cells = 0usize;
    let mut u = vec![0.0; d];
    for (si, &i) in rows.iter().enumerate() {
        scores.row_into(si, &mut u)?;
        let r = ratios[si];
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::Diverged(format!("importance ratio {r} for sample {i}")));
        }
        let a_row = adv.row(i);
        for (j, (&uj, &aj)) in u.iter().zip(a_row).enumerate() {
            let (omega, clipped) = clipped_ratio(r, aj, eps);
            if clipped {
                clipped_cells += 1;
            } else {
                grad[j] += omega * uj * aj;
            }
        }
    }
    let inv = 1.0 / k as f64;
    for g in &mut grad {
        *g *= inv;
    }
    Ok((grad, clipped_cells as f64 / (k * d) as f64))
}

/// Whole-batch form: row i of `scores` pairs with row i of `adv`.
pub fn coord_ppo_gradient(scores: &impl ScoreSource, ratios: &[f64], adv: &Matrix, eps: f64) -> Result<(Vec<f64>, f64)> {
    let rows: Vec<usize> = (0..scores.len()).collect();
    coord_ppo_gradient_rows(scores, ratios, adv, &rows, eps)
}

/// Reference path for the standard scalar objective: one advantage per
/// sample, one clip decision shared by all coordinates.
pub fn scalar_ppo_gradient(scores: &impl ScoreSource, ratios: &[f64], adv: &[f64], eps: f64) -> Result<Vec<f64>> {
    let n = scores.len();
    assert_eq!(ratios.len(), n);
    assert_eq!(adv.len(), n);
    assert!(n > 0, "empty batch");
    let d = scores.dim();
    let mut grad = vec![0.0; d];
    let mut u = vec![0.0; d];
    for i in 0..n {
        let (omega, clipped) = clipped_ratio(ratios[i], adv[i], eps);
        if clipped {
            continue;
        }
        scores.row_into(i, &mut u)?;
        for (g, &uj) in grad.iter_mut().zip(&u) {
            *g += omega * uj * adv[i];
        }
    }
    let inv = 1.0 / n as f64;
    for g in &mut grad {
        *g *= inv;
    }
    Ok(grad)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub anneal_lr: bool,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub max_grad_norm: f64,
    pub steps_per_update: usize,
    pub total_steps: usize,
    pub hidden: Vec<usize>,
    pub baseline_hidden: Vec<usize>,
    pub cv_mode: CvMode,
    pub fit: FitConfig,
    pub normalize_obs: bool,
    pub norm_adv: bool,
    pub per_column_adv_norm: bool,
    /// Fit the baseline on a fresh rollout instead of the policy-update
    /// sample. Doubles the env steps consumed per update.
    #[serde(default)]
    pub independent_sample: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            epochs: 10,
            minibatches: 32,
            lr: 3e-4,
            anneal_lr: true,
            vf_coef: 0.5,
            ent_coef: 0.0,
            max_grad_norm: 0.5,
            steps_per_update: 2048,
            total_steps: 100_000,
            hidden: vec![64, 64],
            baseline_hidden: vec![64, 64],
            cv_mode: CvMode::Value,
            fit: FitConfig::default(),
            normalize_obs: false,
            norm_adv: true,
            per_column_adv_norm: false,
            independent_sample: false,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_eps <= 0.0 {
            return Err(Error::InvalidConfig(format!("clip_eps {} must be positive", self.clip_eps)));
        }
        if !(0.0 < self.gamma && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::InvalidConfig(format!("gae_lambda {} outside [0, 1]", self.gae_lambda)));
        }
        if self.cv_mode == CvMode::None {
            return Err(Error::InvalidConfig(
                "training requires a control variate mode: value, scalar, layer, or coord".to_string(),
            ));
        }
        if self.steps_per_update == 0 || self.minibatches == 0 {
            return Err(Error::InvalidConfig("steps_per_update and minibatches must be positive".to_string()));
        }
        if self.lr < 0.0 || self.vf_coef < 0.0 || self.ent_coef < 0.0 {
            return Err(Error::InvalidConfig("coefficients must be nonnegative".to_string()));
        }
        Ok(())
    }

    pub fn total_updates(&self) -> usize {
        self.total_steps.div_ceil(self.steps_per_update).max(1)
    }
}

/// Either policy head behind one serializable type.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(tag = "head")]
pub enum AnyPolicy {
    Gaussian(GaussianPolicy),
    Softmax(SoftmaxPolicy),
}

macro_rules! delegate {
    ($self:ident, $p:ident => $body:expr) => {
        match $self {
            AnyPolicy::Gaussian($p) => $body,
            AnyPolicy::Softmax($p) => $body,
        }
    };
}

impl Policy for AnyPolicy {
    fn obs_dim(&self) -> usize {
        delegate!(self, p => p.obs_dim())
    }
    fn action_dim(&self) -> usize {
        delegate!(self, p => p.action_dim())
    }
    fn param_count(&self) -> usize {
        delegate!(self, p => p.param_count())
    }
    fn layout(&self) -> &crate::nn::ParamLayout {
        delegate!(self, p => p.layout())
    }
    fn params_flat(&self) -> Vec<f64> {
        delegate!(self, p => p.params_flat())
    }
    fn set_params_flat(&mut self, flat: &[f64]) {
        delegate!(self, p => p.set_params_flat(flat))
    }
    fn log_prob(&self, state: &[f64], action: &[f64]) -> f64 {
        delegate!(self, p => p.log_prob(state, action))
    }
    fn sample(&self, state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        delegate!(self, p => p.sample(state, rng))
    }
    fn greedy_action(&self, state: &[f64]) -> Vec<f64> {
        delegate!(self, p => p.greedy_action(state))
    }
    fn score_row(&self, state: &[f64], action: &[f64], out: &mut [f64]) -> Result<()> {
        delegate!(self, p => p.score_row(state, action, out))
    }
    fn entropy(&self, state: &[f64]) -> f64 {
        delegate!(self, p => p.entropy(state))
    }
    fn entropy_grad_acc(&self, state: &[f64], out: &mut [f64]) -> Result<()> {
        delegate!(self, p => p.entropy_grad_acc(state, out))
    }
}

#[derive(Clone, Debug)]
pub struct UpdateReport {
    pub update: usize,
    pub global_step: usize,
    pub lr: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
    pub fit: Option<FitReport>,
    /// Trace variance of per-sample gradient rows under the old policy,
    /// estimated on a subsample of the rollout.
    pub trace_var: Option<f64>,
    pub mean_return: Option<f64>,
    pub episodes: Vec<EpisodeEnd>,
}

/// Inputs of one policy gradient step, handed to the observation hook
/// before the optimizer consumes the gradient. `grad` is the surrogate
/// ascent direction; `rows` indexes `batch` and `adv`.
pub struct PolicyGradInfo<'a> {
    pub update: usize,
    pub epoch: usize,
    pub minibatch: usize,
    pub rows: &'a [usize],
    pub grad: &'a [f64],
    pub ratios: &'a [f64],
    pub adv: &'a Matrix,
    pub q_hat: &'a [f64],
    pub batch: &'a RolloutBatch,
}

type GradHook<'h> = Box<dyn FnMut(&PolicyGradInfo) + 'h>;

#[derive(Default)]
pub struct TrainHooks<'h> {
    pub on_policy_grad: Option<GradHook<'h>>,
}

impl TrainHooks<'_> {
    pub fn none() -> Self {
        TrainHooks::default()
    }
}

/// Minibatch descent on the clipped value loss
///
///   0.5 vf_coef max((v - t)^2, (v_old + clamp(v - v_old, -eps, eps) - t)^2)
///
/// against fixed targets and fixed old predictions. The clipped branch has
/// zero gradient where the clamp is active. Returns the mean per-sample
/// loss over the final epoch.
#[allow(clippy::too_many_arguments)]
pub fn value_update(
    critic: &mut Mlp,
    adam: &mut Adam,
    states: &[Vec<f64>],
    v_old: &[f64],
    targets: &[f64],
    cfg: &PpoConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = states.len();
    assert_eq!(v_old.len(), n);
    assert_eq!(targets.len(), n);
    let mut order: Vec<usize> = (0..n).collect();
    let n_batches = cfg.minibatches.clamp(1, n);
    let mut grad = vec![0.0; critic.param_count()];
    let mut final_epoch_loss = 0.0;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let base = n / n_batches;
        let mut start = 0;
        for b in 0..n_batches {
            let end = start + base + usize::from(b < n % n_batches);
            if end == start {
                continue;
            }
            let rows = &order[start..end];
            let inv_k = 1.0 / rows.len() as f64;
            grad.fill(0.0);
            let mut loss = 0.0;
            for &i in rows {
                let (out, tape) = critic.forward(&states[i]);
                let v = out[0];
                let dv = v - v_old[i];
                let v_clip = v_old[i] + dv.clamp(-cfg.clip_eps, cfg.clip_eps);
                let e_raw = v - targets[i];
                let e_clip = v_clip - targets[i];
                let (sq, dsq) = if e_raw * e_raw >= e_clip * e_clip {
                    (e_raw * e_raw, 2.0 * e_raw)
                } else {
                    // clamp active means the clipped prediction ignores v
                    let pass = if dv.abs() < cfg.clip_eps { 2.0 * e_clip } else { 0.0 };
                    (e_clip * e_clip, pass)
                };
                loss += 0.5 * cfg.vf_coef * sq * inv_k;
                let seed = [0.5 * cfg.vf_coef * dsq * inv_k];
                critic.backward_per_example(&tape, &seed, &mut grad)?;
            }
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("value loss {loss}")));
            }
            if epoch + 1 == cfg.epochs {
                final_epoch_loss += loss * rows.len() as f64;
            }
            clip_grad_norm(&mut grad, cfg.max_grad_norm);
            let mut params = critic.params_flat();
            adam.step(&mut params, &grad, lr);
            critic.set_params_flat(&params);
            start = end;
        }
    }
    Ok(final_epoch_loss / n as f64)
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub env: String,
    pub cfg: PpoConfig,
    pub update_idx: usize,
    pub policy: AnyPolicy,
    pub critic: Mlp,
    pub baseline: Option<BaselineNet>,
    pub adam_policy: Adam,
    pub adam_critic: Adam,
    pub collector: CollectorState,
    pub rng_collect: RngState,
    pub rng_policy: RngState,
    pub rng_value: RngState,
    pub rng_fit: RngState,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub struct Trainer {
    cfg: PpoConfig,
    env_name: String,
    collector: Collector,
    policy: AnyPolicy,
    critic: Mlp,
    baseline: Option<BaselineNet>,
    adam_policy: Adam,
    adam_critic: Adam,
    rng_collect: ChaCha8Rng,
    rng_policy: ChaCha8Rng,
    rng_value: ChaCha8Rng,
    rng_fit: ChaCha8Rng,
    update_idx: usize,
}

impl Trainer {
    pub fn new(env_name: &str, cfg: PpoConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let env = make_env(env_name)?;
        let obs_dim = env.obs_dim();
        let mut init_rng = rng_from(seed, "policy-init");
        let policy = match env.action_space() {
            ActionSpace::Continuous(k) => AnyPolicy::Gaussian(GaussianPolicy::new(obs_dim, k, &cfg.hidden, &mut init_rng)),
            ActionSpace::Discrete(m) => AnyPolicy::Softmax(SoftmaxPolicy::new(obs_dim, m, &cfg.hidden, &mut init_rng)),
        };
        let mut critic_dims = vec![obs_dim];
        critic_dims.extend_from_slice(&cfg.hidden);
        critic_dims.push(1);
        let mut critic_gains = vec![std::f64::consts::SQRT_2; cfg.hidden.len()];
        critic_gains.push(1.0);
        let critic = Mlp::new(&critic_dims, &critic_gains, &mut rng_from(seed, "critic-init"));
        let baseline = match cfg.cv_mode {
            CvMode::Scalar | CvMode::Layer | CvMode::Coord => Some(BaselineNet::new(
                obs_dim,
                &cfg.baseline_hidden,
                cfg.cv_mode,
                policy.layout().clone(),
                &mut rng_from(seed, "baseline-init"),
            )?),
            CvMode::Value => None,
            CvMode::None => unreachable!("validate rejects cv_mode none"),
        };
        let adam_policy = Adam::new(policy.param_count());
        let adam_critic = Adam::new(critic.param_count());
        let mut collector = Collector::new(env);
        if cfg.normalize_obs {
            collector.normalizer = Some(ObsNormalizer::new(obs_dim));
        }
        Ok(Trainer {
            rng_collect: rng_from(seed, "collect"),
            rng_policy: rng_from(seed, "policy-shuffle"),
            rng_value: rng_from(seed, "value-shuffle"),
            rng_fit: rng_from(seed, "fit"),
            cfg,
            env_name: env_name.to_string(),
            collector,
            policy,
            critic,
            baseline,
            adam_policy,
            adam_critic,
            update_idx: 0,
        })
    }

    pub fn cfg(&self) -> &PpoConfig {
        &self.cfg
    }

    pub fn env_name(&self) -> &str {
        &self.env_name
    }

    pub fn policy(&self) -> &AnyPolicy {
        &self.policy
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    pub fn baseline(&self) -> Option<&BaselineNet> {
        self.baseline.as_ref()
    }

    pub fn baseline_mut(&mut self) -> Option<&mut BaselineNet> {
        self.baseline.as_mut()
    }

    pub fn collector_mut(&mut self) -> &mut Collector {
        &mut self.collector
    }

    pub fn global_step(&self) -> usize {
        self.collector.global_step()
    }

    pub fn update_idx(&self) -> usize {
        self.update_idx
    }

    fn current_lr(&self) -> f64 {
        if self.cfg.anneal_lr {
            let frac = 1.0 - self.update_idx as f64 / self.cfg.total_updates() as f64;
            self.cfg.lr * frac.max(0.0)
        } else {
            self.cfg.lr
        }
    }

    fn divergence_check(&self, update: usize) -> Result<()> {
        if let AnyPolicy::Gaussian(g) = &self.policy {
            let mean_abs: f64 = g.log_std().iter().map(|v| v.abs()).sum::<f64>() / g.log_std().len() as f64;
            if mean_abs > 20.0 {
                return Err(Error::Diverged(format!(
                    "update {update}: mean |log_std| {mean_abs:.3} (log_std {:?})",
                    g.log_std()
                )));
            }
        }
        if !self.policy.params_flat().iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged(format!("update {update}: non-finite policy parameters")));
        }
        Ok(())
    }

    /// One outer iteration: collect, fit, policy epochs, value epochs.
    pub fn step_update(&mut self, hooks: &mut TrainHooks) -> Result<UpdateReport> {
        let cfg = self.cfg.clone();
        let update = self.update_idx;
        let lr = self.current_lr();

        let (mut batch, mut episodes) = self.collector.collect(&self.policy, cfg.steps_per_update, &mut self.rng_collect);
        for e in &episodes {
            if !e.ret.is_finite() {
                return Err(Error::Diverged(format!("update {update}: episode return {}", e.ret)));
            }
        }
        compute_targets(&mut batch, |s| self.critic.infer_scalar(s), cfg.gamma, cfg.gae_lambda);
        let n = batch.len();
        let d = self.policy.param_count();

        // old-policy scores feed the baseline fit and the variance diagnostic
        let scores_old = score_matrix(&self.policy, &batch.states, &batch.actions)?;
        let fit_report = match &mut self.baseline {
            Some(net) if cfg.independent_sample => {
                // ablation: the baseline trains on its own fresh rollout so
                // the policy-update sample never touches the fit
                let (mut fit_batch, fit_eps) =
                    self.collector.collect(&self.policy, cfg.steps_per_update, &mut self.rng_collect);
                for e in &fit_eps {
                    if !e.ret.is_finite() {
                        return Err(Error::Diverged(format!("update {update}: episode return {}", e.ret)));
                    }
                }
                compute_targets(&mut fit_batch, |s| self.critic.infer_scalar(s), cfg.gamma, cfg.gae_lambda);
                let fit_scores = score_matrix(&self.policy, &fit_batch.states, &fit_batch.actions)?;
                let report = fit(net, &fit_batch.states, &fit_batch.q_targets, &fit_scores, &cfg.fit, &mut self.rng_fit)?;
                episodes.extend(fit_eps);
                Some(report)
            }
            Some(net) => Some(fit(net, &batch.states, &batch.q_targets, &scores_old, &cfg.fit, &mut self.rng_fit)?),
            None => None,
        };

        let bv = match cfg.cv_mode {
            CvMode::Value => BaselineValues::PerSample(batch.value_preds.clone()),
            _ => self.baseline.as_ref().expect("fitted modes carry a net").baseline_values(&batch.states),
        };
        let mut adv = coord_advantages(&batch.q_targets, &bv, d);

        let trace_var = {
            let k = n.min(512);
            if k >= 2 {
                let mut acc = TraceVarAccum::new(d);
                let mut g_row = vec![0.0; d];
                for i in 0..k {
                    let u = scores_old.row(i);
                    let a = adv.row(i);
                    for ((g, &uj), &aj) in g_row.iter_mut().zip(u).zip(a) {
                        *g = uj * aj;
                    }
                    acc.push(&g_row);
                }
                Some(acc.trace_variance())
            } else {
                None
            }
        };

        if cfg.norm_adv {
            if cfg.per_column_adv_norm {
                for j in 0..d {
                    let col: Vec<f64> = (0..n).map(|i| adv.get(i, j)).collect();
                    let mu = crate::linalg::mean(&col);
                    let sd = crate::linalg::sample_variance(&col).sqrt();
                    for i in 0..n {
                        adv.set(i, j, (adv.get(i, j) - mu) / (sd + 1e-8));
                    }
                }
            } else {
                let mu = crate::linalg::mean(&batch.advantages);
                let sd = crate::linalg::sample_variance(&batch.advantages).sqrt();
                let inv = 1.0 / (sd + 1e-8);
                for v in adv.data_mut() {
                    *v = (*v - mu) * inv;
                }
            }
        }

        let logp_old: Vec<f64> =
            (0..n).map(|i| self.policy.log_prob(&batch.states[i], &batch.actions[i])).collect();

        let mut order: Vec<usize> = (0..n).collect();
        let n_batches = cfg.minibatches.clamp(1, n);
        let mut clip_acc = 0.0;
        let mut clip_batches = 0usize;
        let mut ent_grad = vec![0.0; d];
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut self.rng_policy);
            let base = n / n_batches;
            let mut start = 0;
            for b in 0..n_batches {
                let end = start + base + usize::from(b < n % n_batches);
                if end == start {
                    continue;
                }
                let rows = &order[start..end];
                let ratios: Vec<f64> = rows
                    .iter()
                    .map(|&i| (self.policy.log_prob(&batch.states[i], &batch.actions[i]) - logp_old[i]).exp())
                    .collect();
                let lazy = LazyScores::new(&self.policy, &batch.states, &batch.actions);
                let sub = RowView { src: &lazy, rows };
                let (grad_ascent, clip_frac) = coord_ppo_gradient_rows(&sub, &ratios, &adv, rows, cfg.clip_eps)?;
                if let Some(hook) = hooks.on_policy_grad.as_mut() {
                    hook(&PolicyGradInfo {
                        update,
                        epoch,
                        minibatch: b,
                        rows,
                        grad: &grad_ascent,
                        ratios: &ratios,
                        adv: &adv,
                        q_hat: &batch.q_targets,
                        batch: &batch,
                    });
                }
                let mut step_grad: Vec<f64> = grad_ascent.iter().map(|g| -g).collect();
                if cfg.ent_coef > 0.0 {
                    ent_grad.fill(0.0);
                    for &i in rows {
                        self.policy.entropy_grad_acc(&batch.states[i], &mut ent_grad)?;
                    }
                    let scale = cfg.ent_coef / rows.len() as f64;
                    for (sg, eg) in step_grad.iter_mut().zip(&ent_grad) {
                        *sg -= scale * eg;
                    }
                }
                clip_grad_norm(&mut step_grad, cfg.max_grad_norm);
                let mut params = self.policy.params_flat();
                self.adam_policy.step(&mut params, &step_grad, lr);
                self.policy.set_params_flat(&params);
                clip_acc += clip_frac;
                clip_batches += 1;
                start = end;
            }
        }

        let value_loss = value_update(
            &mut self.critic,
            &mut self.adam_critic,
            &batch.states,
            &batch.value_preds,
            &batch.q_targets,
            &cfg,
            lr,
            &mut self.rng_value,
        )?;

        self.divergence_check(update)?;
        self.update_idx += 1;

        let mean_return = if episodes.is_empty() {
            None
        } else {
            Some(episodes.iter().map(|e| e.ret).sum::<f64>() / episodes.len() as f64)
        };
        Ok(UpdateReport {
            update,
            global_step: self.collector.global_step(),
            lr,
            clip_fraction: if clip_batches > 0 { clip_acc / clip_batches as f64 } else { 0.0 },
            value_loss,
            fit: fit_report,
            trace_var,
            mean_return,
            episodes,
        })
    }

    /// Runs updates until the configured total steps are collected.
    pub fn run(&mut self, hooks: &mut TrainHooks) -> Result<Vec<UpdateReport>> {
        let mut reports = Vec::new();
        while self.collector.global_step() < self.cfg.total_steps {
            reports.push(self.step_update(hooks)?);
        }
        Ok(reports)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            env: self.env_name.clone(),
            cfg: self.cfg.clone(),
            update_idx: self.update_idx,
            policy: self.policy.clone(),
            critic: self.critic.clone(),
            baseline: self.baseline.clone(),
            adam_policy: self.adam_policy.clone(),
            adam_critic: self.adam_critic.clone(),
            collector: self.collector.snapshot(),
            rng_collect: save_rng(&self.rng_collect),
            rng_policy: save_rng(&self.rng_policy),
            rng_value: save_rng(&self.rng_value),
            rng_fit: save_rng(&self.rng_fit),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.cfg.validate()?;
        let env = make_env(&ck.env)?;
        let mut collector = Collector::new(env);
        collector.restore(ck.collector);
        Ok(Trainer {
            cfg: ck.cfg,
            env_name: ck.env,
            collector,
            policy: ck.policy,
            critic: ck.critic,
            baseline: ck.baseline,
            adam_policy: ck.adam_policy,
            adam_critic: ck.adam_critic,
            rng_collect: restore_rng(&ck.rng_collect),
            rng_policy: restore_rng(&ck.rng_policy),
            rng_value: restore_rng(&ck.rng_value),
            rng_fit: restore_rng(&ck.rng_fit),
            update_idx: ck.update_idx,
        })
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(&self.checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&json)?;
        Trainer::from_checkpoint(ck)
    }
}

/// Convenience wrapper: build a trainer and run it to completion.
pub fn train(env_name: &str, cfg: PpoConfig, seed: u64) -> Result<(Trainer, Vec<UpdateReport>)> {
    let mut trainer = Trainer::new(env_name, cfg, seed)?;
    let reports = trainer.run(&mut TrainHooks::none())?;
    Ok((trainer, reports))
}

struct RowView<'a, S: ScoreSource> {
    src: &'a S,
    rows: &'a [usize],
}

impl<S: ScoreSource> ScoreSource for RowView<'_, S> {
    fn len(&self) -> usize {
        self.rows.len()
    }

    fn dim(&self) -> usize {
        self.src.dim()
    }

    fn row_into(&self, index: usize, out: &mut [f64]) -> Result<()> {
        self.src.row_into(self.rows[index], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::pg_estimate;
    use crate::rng::rng_from;
    use approx::assert_relative_eq;

    #[test]
    fn clip_truth_table() {
        let eps = 0.2;
        assert_eq!(clipped_ratio(1.5, 1.0, eps), (1.2, true));
        assert_eq!(clipped_ratio(0.5, -1.0, eps), (0.8, true));
        assert_eq!(clipped_ratio(1.0, 1.0, eps), (1.0, false));
        assert_eq!(clipped_ratio(1.0, -1.0, eps), (1.0, false));
        // one-sided: a low ratio with positive advantage passes through
        assert_eq!(clipped_ratio(0.5, 1.0, eps), (0.5, false));
        assert_eq!(clipped_ratio(1.5, -1.0, eps), (1.5, false));
        // zero advantage takes the nonnegative branch
        assert_eq!(clipped_ratio(1.5, 0.0, eps), (1.2, true));
    }

    #[test]
    fn advantages_broadcast_per_baseline_kind() {
        let q = vec![5.0, 2.0];
        let per_sample = BaselineValues::PerSample(vec![1.0, 1.0]);
        let adv = coord_advantages(&q, &per_sample, 3);
        for j in 0..3 {
            assert_eq!(adv.get(0, j), 4.0);
            assert_eq!(adv.get(1, j), 1.0);
        }
        let zero = BaselineValues::Zero { n: 2 };
        let adv0 = coord_advantages(&q, &zero, 2);
        assert_eq!(adv0.row(0), &[5.0, 5.0]);
    }

    struct Dense(Matrix);
    impl ScoreSource for Dense {
        fn len(&self) -> usize {
            self.0.rows()
        }
        fn dim(&self) -> usize {
            self.0.cols()
        }
        fn row_into(&self, i: usize, out: &mut [f64]) -> crate::Result<()> {
            out.copy_from_slice(self.0.row(i));
            Ok(())
        }
    }

    fn random_scores(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = rng_from(seed, "ppo-test-scores");
        Matrix::from_fn(n, d, |_, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
    }

    #[test]
    fn identical_columns_reduce_to_scalar_path() {
        let n = 40;
        let d = 9;
        let scores = random_scores(n, d, 1);
        let mut rng = rng_from(2, "ppo-test");
        let ratios: Vec<f64> = (0..n).map(|_| 0.6 + 0.8 * rand::Rng::gen::<f64>(&mut rng)).collect();
        let adv_scalar: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
        let mut adv = Matrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                adv.set(i, j, adv_scalar[i]);
            }
        }
        let (gc, _) = coord_ppo_gradient(&Dense(scores.clone()), &ratios, &adv, 0.2).unwrap();
        let gs = scalar_ppo_gradient(&Dense(scores), &ratios, &adv_scalar, 0.2).unwrap();
        for (a, b) in gc.iter().zip(&gs) {
            assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    #[test]
    fn unit_ratios_recover_plain_estimate() {
        let n = 60;
        let d = 7;
        let scores = random_scores(n, d, 3);
        let mut rng = rng_from(4, "ppo-test");
        let q: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..3.0)).collect();
        let baseline =
            BaselineValues::PerCoord(Matrix::from_fn(n, d, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0)));
        let adv = coord_advantages(&q, &baseline, d);
        let ratios = vec![1.0; n];
        let (g, clip_frac) = coord_ppo_gradient(&Dense(scores.clone()), &ratios, &adv, 0.2).unwrap();
        assert_eq!(clip_frac, 0.0);
        let expect = pg_estimate(&Dense(scores), &q, &baseline).unwrap();
        for (a, b) in g.iter().zip(&expect) {
            assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    #[test]
    fn clipped_cells_are_insensitive_to_q() {
        // sample 0 is clipped in every coordinate with a positive advantage;
        // nudging its advantage at fixed sign must not move the gradient
        let d = 5;
        let scores = random_scores(2, d, 5);
        let ratios = vec![1.6, 1.0];
        let mut adv = Matrix::zeros(2, d);
        for j in 0..d {
            adv.set(0, j, 1.0 + j as f64);
            adv.set(1, j, -0.5);
        }
        let (g1, _) = coord_ppo_gradient(&Dense(scores.clone()), &ratios, &adv, 0.2).unwrap();
        for j in 0..d {
            adv.set(0, j, 10.0 + j as f64);
        }
        let (g2, _) = coord_ppo_gradient(&Dense(scores), &ratios, &adv, 0.2).unwrap();
        assert_eq!(g1, g2);
    }

    fn tiny_cfg(cv: CvMode) -> PpoConfig {
        PpoConfig {
            steps_per_update: 96,
            total_steps: 96 * 3,
            hidden: vec![8],
            baseline_hidden: vec![8],
            epochs: 2,
            minibatches: 4,
            cv_mode: cv,
            fit: FitConfig { epochs: 1, minibatches: 2, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_leave_policy_untouched() {
        let mut cfg = tiny_cfg(CvMode::Coord);
        cfg.epochs = 0;
        cfg.fit.epochs = 0;
        let mut t = Trainer::new("point_mass", cfg, 11).unwrap();
        let before = t.policy().params_flat();
        let report = t.step_update(&mut TrainHooks::none()).unwrap();
        assert_eq!(t.policy().params_flat(), before);
        assert_eq!(report.value_loss, 0.0);
    }

    #[test]
    fn first_minibatch_gradient_equals_plain_estimate() {
        // theta == theta_old on the first pass, so every ratio is exactly 1
        // and the surrogate gradient must equal the plain estimate computed
        // from the same scores, q values, and baseline values
        let mut cfg = tiny_cfg(CvMode::Coord);
        cfg.epochs = 1;
        cfg.minibatches = 1;
        cfg.norm_adv = false;
        cfg.fit.epochs = 0;
        let mut t = Trainer::new("point_mass", cfg, 13).unwrap();
        let policy_before = t.policy().clone();
        let mut captured: Option<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> = None;
        let mut hooks = TrainHooks {
            on_policy_grad: Some(Box::new(|info: &PolicyGradInfo| {
                assert!(info.ratios.iter().all(|&r| r == 1.0), "first pass ratios must be exactly 1");
                if captured.is_none() {
                    captured = Some((
                        info.grad.to_vec(),
                        info.batch.states.clone(),
                        info.batch.actions.clone(),
                        info.q_hat.to_vec(),
                    ));
                }
            })),
        };
        t.step_update(&mut hooks).unwrap();
        drop(hooks);
        let (grad, states, actions, q) = captured.unwrap();
        let baseline = t.baseline().unwrap().baseline_values(&states);
        let scores = score_matrix(&policy_before, &states, &actions).unwrap();
        let expect = pg_estimate(&scores, &q, &baseline).unwrap();
        for (a, b) in grad.iter().zip(&expect) {
            assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-14);
        }
    }

    #[test]
    fn same_seed_runs_are_bitwise_identical() {
        let cfg = tiny_cfg(CvMode::Scalar);
        let (t1, r1) = train("chain_mdp", cfg.clone(), 21).unwrap();
        let (t2, r2) = train("chain_mdp", cfg, 21).unwrap();
        assert_eq!(t1.policy().params_flat(), t2.policy().params_flat());
        assert_eq!(t1.critic().params_flat(), t2.critic().params_flat());
        assert_eq!(r1.len(), r2.len());
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.value_loss, b.value_loss);
            assert_eq!(a.clip_fraction, b.clip_fraction);
            assert_eq!(a.mean_return, b.mean_return);
        }
    }

    #[test]
    fn checkpoint_resumes_bitwise() {
        let cfg = tiny_cfg(CvMode::Coord);
        let mut straight = Trainer::new("point_mass", cfg.clone(), 31).unwrap();
        for _ in 0..3 {
            straight.step_update(&mut TrainHooks::none()).unwrap();
        }

        let mut first = Trainer::new("point_mass", cfg, 31).unwrap();
        first.step_update(&mut TrainHooks::none()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        first.save_checkpoint(&path).unwrap();
        let mut resumed = Trainer::load_checkpoint(&path).unwrap();
        for _ in 0..2 {
            resumed.step_update(&mut TrainHooks::none()).unwrap();
        }

        assert_eq!(straight.policy().params_flat(), resumed.policy().params_flat());
        assert_eq!(straight.critic().params_flat(), resumed.critic().params_flat());
        assert_eq!(straight.global_step(), resumed.global_step());
        assert_eq!(
            straight.baseline().unwrap().params_flat(),
            resumed.baseline().unwrap().params_flat()
        );
    }

    #[test]
    fn value_update_converges_to_regression_fit() {
        // a linear critic makes the value loss convex, so the normal
        // equations give the exact least-squares fit as an independent
        // oracle for where the clipped updates must converge
        let mut rng = rng_from(41, "vu-data");
        let states: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..3).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect())
            .collect();
        let targets: Vec<f64> = states.iter().map(|s| s[0] - 0.5 * s[1] + 0.25 * s[2] + 0.3).collect();
        let mut critic = Mlp::new(&[3, 1], &[1.0], &mut rng_from(41, "vu-net"));
        let mut adam = Adam::new(critic.param_count());
        // full-batch steps so Adam settles instead of dithering
        let cfg = PpoConfig { epochs: 1, minibatches: 1, vf_coef: 0.5, max_grad_norm: 0.0, ..Default::default() };
        let mut shuffle_rng = rng_from(41, "vu-shuffle");
        // outer refresh of v_old mirrors training: each call clips against
        // the predictions the pass started from; decaying the rate lets Adam
        // settle instead of orbiting the minimum at a step-size radius
        for (iters, lr) in [(3000, 1e-2), (1500, 1e-3), (500, 1e-4)] {
            for _ in 0..iters {
                let v_old: Vec<f64> = states.iter().map(|s| critic.infer_scalar(s)).collect();
                value_update(&mut critic, &mut adam, &states, &v_old, &targets, &cfg, lr, &mut shuffle_rng).unwrap();
            }
        }

        // normal equations over [x, 1] features
        let k = 4;
        let mut xtx = Matrix::zeros(k, k);
        let mut xty = vec![0.0; k];
        for (s, &t) in states.iter().zip(&targets) {
            let f = [s[0], s[1], s[2], 1.0];
            for a in 0..k {
                for b in 0..k {
                    xtx.set(a, b, xtx.get(a, b) + f[a] * f[b]);
                }
                xty[a] += f[a] * t;
            }
        }
        let w = crate::linalg::solve(&xtx, &xty).unwrap();
        for s in &states {
            let oracle = w[0] * s[0] + w[1] * s[1] + w[2] * s[2] + w[3];
            let got = critic.infer_scalar(s);
            assert!((got - oracle).abs() < 1e-3, "pred {got} vs least-squares {oracle}");
        }
    }

    #[test]
    fn exact_value_function_takes_no_step() {
        let mut rng = rng_from(42, "vu2");
        let states: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..3).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect())
            .collect();
        let mut critic = Mlp::new(&[3, 8, 1], &[std::f64::consts::SQRT_2, 1.0], &mut rng);
        let targets: Vec<f64> = states.iter().map(|s| critic.infer_scalar(s)).collect();
        let v_old = targets.clone();
        let before = critic.params_flat();
        let mut adam = Adam::new(critic.param_count());
        let cfg = PpoConfig { epochs: 3, minibatches: 2, ..Default::default() };
        let loss =
            value_update(&mut critic, &mut adam, &states, &v_old, &targets, &cfg, 1e-2, &mut rng).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(critic.params_flat(), before);
    }

    #[test]
    fn coord_run_with_value_copies_matches_value_run() {
        // force every coord head to emit the critic's prediction; with the
        // fit disabled the coordinate advantages equal the scalar GAE
        // advantages and the two runs must take identical steps
        let mut cfg = tiny_cfg(CvMode::Value);
        cfg.fit.epochs = 0;
        let mut value_run = Trainer::new("point_mass", cfg.clone(), 51).unwrap();
        cfg.cv_mode = CvMode::Coord;
        let mut coord_run = Trainer::new("point_mass", cfg, 51).unwrap();

        let h = 8;
        let obs = 4;
        let body_len = obs * h + h;
        assert_eq!(value_run.critic().param_count(), body_len + h + 1);
        for _ in 0..2 {
            let cp = value_run.critic().params_flat();
            let head_w = cp[body_len..body_len + h].to_vec();
            let head_b = cp[body_len + h];
            let m = coord_run.baseline().unwrap().head_dim();
            let mut bp = coord_run.baseline().unwrap().params_flat();
            bp[..body_len].copy_from_slice(&cp[..body_len]);
            for j in 0..m {
                bp[body_len + j * h..body_len + (j + 1) * h].copy_from_slice(&head_w);
                bp[body_len + m * h + j] = head_b;
            }
            coord_run.baseline_mut().unwrap().set_params_flat(&bp);

            value_run.step_update(&mut TrainHooks::none()).unwrap();
            coord_run.step_update(&mut TrainHooks::none()).unwrap();
            let pv = value_run.policy().params_flat();
            let pc = coord_run.policy().params_flat();
            for (a, b) in pv.iter().zip(&pc) {
                assert!((a - b).abs() <= 1e-10, "policy params diverged: {a} vs {b}");
            }
            assert_eq!(value_run.critic().params_flat(), coord_run.critic().params_flat());
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = PpoConfig { clip_eps: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg.clip_eps = 0.2;
        cfg.cv_mode = CvMode::None;
        assert!(cfg.validate().is_err());
        cfg.cv_mode = CvMode::Value;
        assert!(cfg.validate().is_ok());
    }
}
