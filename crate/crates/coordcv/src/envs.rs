//! Self-contained environments and rollout machinery.
//!
//! Environments are functional: `step` maps (state, action) to (next state,
//! reward, done) without hidden state, which keeps them enumerable and easy
//! to test. Episode length limits are enforced by the `Collector`, which
//! distinguishes a dynamics terminal (`terminals`, value bootstrap is zero)
//! from a horizon or batch truncation (`dones` without terminal, the value
//! function bootstraps through the next state). Advantage propagation stops
//! at every episode end either way.
//!
//! Three environments ship: `point_mass` (2-D double integrator with
//! quadratic cost), `pendulum` (torque-limited swing-up), and `chain_mdp`
//! (a small random finite MDP whose transitions and rewards are exactly
//! enumerable, for oracle computations).

use crate::error::{Error, Result};
use crate::policy::Policy;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSpace {
    Continuous(usize),
    Discrete(usize),
}

impl ActionSpace {
    /// Entries in the action vector handed to `step`.
    pub fn action_dim(&self) -> usize {
        match self {
            ActionSpace::Continuous(d) => *d,
            ActionSpace::Discrete(_) => 1,
        }
    }
}

pub trait Env: Send + Sync {
    fn name(&self) -> &'static str;
    fn obs_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    /// Maximum episode length, enforced by the collector.
    fn horizon(&self) -> usize;
    fn reset(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// (next_state, reward, done). `done` here means a terminal state of the
    /// dynamics; running out of horizon is the collector's business.
    fn step(&self, state: &[f64], action: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, bool);
}

pub const ENV_NAMES: &[&str] = &["point_mass", "pendulum", "chain_mdp"];

/// Canonical instance of each named environment.
pub fn make_env(name: &str) -> Result<Box<dyn Env>> {
    match name {
        "point_mass" => Ok(Box::new(PointMass::default())),
        "pendulum" => Ok(Box::new(Pendulum::default())),
        "chain_mdp" => Ok(Box::new(ChainMdp::random(5, 3, 0xC0FFEE, 40))),
        _ => Err(Error::UnknownEnv { name: name.to_string(), valid: ENV_NAMES.join(", ") }),
    }
}

// ─── point_mass ─────────────────────────────────────────────────────────────

/// Double integrator on the plane. State [px, py, vx, vy]; acceleration
/// actions clamped to [-1, 1]^2; cost is squared distance from the origin
/// plus a small action penalty, so reward at the target with zero action is 0.
#[derive(Clone, Debug)]
pub struct PointMass {
    pub dt: f64,
    pub horizon: usize,
    pub max_speed: f64,
}

impl Default for PointMass {
    fn default() -> Self {
        PointMass { dt: 0.1, horizon: 200, max_speed: 3.0 }
    }
}

impl Env for PointMass {
    fn name(&self) -> &'static str {
        "point_mass"
    }

    fn obs_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(2)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0, 0.0]
    }

    fn step(&self, state: &[f64], action: &[f64], _rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, bool) {
        assert_eq!(state.len(), 4, "point_mass state has 4 entries");
        assert_eq!(action.len(), 2, "point_mass action has 2 entries");
        let ax = action[0].clamp(-1.0, 1.0);
        let ay = action[1].clamp(-1.0, 1.0);
        let vx = (state[2] + self.dt * ax).clamp(-self.max_speed, self.max_speed);
        let vy = (state[3] + self.dt * ay).clamp(-self.max_speed, self.max_speed);
        let px = state[0] + self.dt * vx;
        let py = state[1] + self.dt * vy;
        let reward = -(px * px + py * py + 0.01 * (ax * ax + ay * ay));
        (vec![px, py, vx, vy], reward, false)
    }
}

// ─── pendulum ───────────────────────────────────────────────────────────────

/// Torque-limited pendulum swing-up. State [cos th, sin th, th_dot] with
/// theta = 0 upright; torque clamped to [-2, 2].
#[derive(Clone, Debug)]
pub struct Pendulum {
    pub dt: f64,
    pub g: f64,
    pub m: f64,
    pub l: f64,
    pub max_torque: f64,
    pub max_speed: f64,
    pub horizon: usize,
}

impl Default for Pendulum {
    fn default() -> Self {
        Pendulum { dt: 0.05, g: 10.0, m: 1.0, l: 1.0, max_torque: 2.0, max_speed: 8.0, horizon: 200 }
    }
}

fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = (theta + std::f64::consts::PI) % two_pi;
    if t < 0.0 {
        t += two_pi;
    }
    t - std::f64::consts::PI
}

impl Env for Pendulum {
    fn name(&self) -> &'static str {
        "pendulum"
    }

    fn obs_dim(&self) -> usize {
        3
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(1)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let theta_dot = rng.gen_range(-1.0..1.0);
        vec![theta.cos(), theta.sin(), theta_dot]
    }

    fn step(&self, state: &[f64], action: &[f64], _rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, bool) {
        assert_eq!(state.len(), 3, "pendulum state has 3 entries");
        assert_eq!(action.len(), 1, "pendulum action has 1 entry");
        let theta = state[1].atan2(state[0]);
        let theta_dot = state[2];
        let u = action[0].clamp(-self.max_torque, self.max_torque);
        let cost = wrap_angle(theta).powi(2) + 0.1 * theta_dot * theta_dot + 0.001 * u * u;
        let accel = 3.0 * self.g / (2.0 * self.l) * theta.sin() + 3.0 / (self.m * self.l * self.l) * u;
        let new_dot = (theta_dot + accel * self.dt).clamp(-self.max_speed, self.max_speed);
        let new_theta = theta + new_dot * self.dt;
        (vec![new_theta.cos(), new_theta.sin(), new_dot], -cost, false)
    }
}

// ─── chain_mdp ──────────────────────────────────────────────────────────────

/// Finite MDP with K states and M actions, random but seeded transitions and
/// rewards, uniform initial distribution, one-hot observations. Rewards live
/// in [1.0, 1.5]: keeping them positive and within a factor two of each other
/// makes the per-state value function a variance-reducing baseline, which the
/// ordering diagnostics rely on.
#[derive(Clone, Debug)]
pub struct ChainMdp {
    n_states: usize,
    n_actions: usize,
    /// trans[s][a] is a distribution over next states
    trans: Vec<Vec<Vec<f64>>>,
    /// rewards[s][a]
    rewards: Vec<Vec<f64>>,
    horizon: usize,
}

impl ChainMdp {
    pub fn random(n_states: usize, n_actions: usize, seed: u64, horizon: usize) -> Self {
        assert!(n_states >= 2 && n_actions >= 2, "need at least 2 states and 2 actions");
        let mut rng = crate::rng::rng_from(seed, "chain-mdp");
        let mut trans = Vec::with_capacity(n_states);
        let mut rewards = Vec::with_capacity(n_states);
        for s in 0..n_states {
            let mut per_action = Vec::with_capacity(n_actions);
            let mut r_row = Vec::with_capacity(n_actions);
            for a in 0..n_actions {
                // 0.6 mass on a drift target, 0.4 spread at random
                let target = (s + a + 1) % n_states;
                let mut row: Vec<f64> = (0..n_states).map(|_| rng.gen_range(0.05..1.0)).collect();
                let total: f64 = row.iter().sum();
                for (j, p) in row.iter_mut().enumerate() {
                    *p = 0.4 * *p / total + if j == target { 0.6 } else { 0.0 };
                }
                per_action.push(row);
                r_row.push(rng.gen_range(1.0..1.5));
            }
            trans.push(per_action);
            rewards.push(r_row);
        }
        ChainMdp { n_states, n_actions, trans, rewards, horizon }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        &self.trans[s][a]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s][a]
    }

    /// Uniform initial distribution.
    pub fn p0(&self) -> Vec<f64> {
        vec![1.0 / self.n_states as f64; self.n_states]
    }

    pub fn state_obs(&self, s: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.n_states];
        obs[s] = 1.0;
        obs
    }

    pub fn state_index(&self, obs: &[f64]) -> usize {
        assert_eq!(obs.len(), self.n_states, "one-hot obs has {} entries, MDP has {} states", obs.len(), self.n_states);
        let mut best = 0;
        for k in 1..obs.len() {
            if obs[k] > obs[best] {
                best = k;
            }
        }
        best
    }
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

impl Env for ChainMdp {
    fn name(&self) -> &'static str {
        "chain_mdp"
    }

    fn obs_dim(&self) -> usize {
        self.n_states
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.n_actions)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = rng.gen_range(0..self.n_states);
        self.state_obs(s)
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, bool) {
        let s = self.state_index(state);
        let a = action[0] as usize;
        assert!(a < self.n_actions, "action index {a} out of range ({} actions)", self.n_actions);
        let s_next = sample_categorical(&self.trans[s][a], rng);
        (self.state_obs(s_next), self.rewards[s][a], false)
    }
}

// ─── Rollouts ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Default)]
pub struct RolloutBatch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<Vec<f64>>,
    /// episode ended after this step (terminal or horizon cut)
    pub dones: Vec<bool>,
    /// the dynamics ended the episode; excludes pure time limits
    pub terminals: Vec<bool>,
    /// V(s_t), filled by compute_targets
    pub value_preds: Vec<f64>,
    /// TD(lambda) targets Q(s_t, a_t), filled by compute_targets
    pub q_targets: Vec<f64>,
    /// GAE advantages, filled by compute_targets
    pub advantages: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn append(&mut self, mut other: RolloutBatch) {
        self.states.append(&mut other.states);
        self.actions.append(&mut other.actions);
        self.rewards.append(&mut other.rewards);
        self.next_states.append(&mut other.next_states);
        self.dones.append(&mut other.dones);
        self.terminals.append(&mut other.terminals);
        self.value_preds.append(&mut other.value_preds);
        self.q_targets.append(&mut other.q_targets);
        self.advantages.append(&mut other.advantages);
    }
}

/// A completed episode observed during collection.
#[derive(Clone, Debug)]
pub struct EpisodeEnd {
    /// Episodes completed by this collector so far (1-based at completion).
    pub episode: usize,
    /// Total env steps this collector has taken when the episode ended.
    pub global_step: usize,
    /// Undiscounted return.
    pub ret: f64,
    /// Index range [start, end) within the batch just collected, when the
    /// episode started inside it.
    pub span: Option<(usize, usize)>,
}

/// Resumable snapshot of a collector mid-stream.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CollectorState {
    pub state: Option<Vec<f64>>,
    pub obs: Option<Vec<f64>>,
    pub t_in_episode: usize,
    pub ep_return: f64,
    pub episodes_done: usize,
    pub global_step: usize,
    pub deterministic: bool,
    pub normalizer: Option<ObsNormalizer>,
}

/// Steps one environment across collect calls, resetting on episode ends and
/// enforcing the horizon.
///
/// The raw state drives the dynamics; when a normalizer is attached the
/// policy sees (and the batch records) normalized observations instead, with
/// the running statistics updated once per new observation.
pub struct Collector {
    env: Box<dyn Env>,
    state: Option<Vec<f64>>,
    obs: Option<Vec<f64>>,
    t_in_episode: usize,
    ep_return: f64,
    episodes_done: usize,
    global_step: usize,
    /// In deterministic mode actions come from the policy's greedy head.
    pub deterministic: bool,
    pub normalizer: Option<ObsNormalizer>,
}

impl Collector {
    pub fn new(env: Box<dyn Env>) -> Self {
        Collector {
            env,
            state: None,
            obs: None,
            t_in_episode: 0,
            ep_return: 0.0,
            episodes_done: 0,
            global_step: 0,
            deterministic: false,
            normalizer: None,
        }
    }

    pub fn env(&self) -> &dyn Env {
        self.env.as_ref()
    }

    pub fn global_step(&self) -> usize {
        self.global_step
    }

    pub fn episodes_done(&self) -> usize {
        self.episodes_done
    }

    pub fn snapshot(&self) -> CollectorState {
        CollectorState {
            state: self.state.clone(),
            obs: self.obs.clone(),
            t_in_episode: self.t_in_episode,
            ep_return: self.ep_return,
            episodes_done: self.episodes_done,
            global_step: self.global_step,
            deterministic: self.deterministic,
            normalizer: self.normalizer.clone(),
        }
    }

    pub fn restore(&mut self, s: CollectorState) {
        self.state = s.state;
        self.obs = s.obs;
        self.t_in_episode = s.t_in_episode;
        self.ep_return = s.ep_return;
        self.episodes_done = s.episodes_done;
        self.global_step = s.global_step;
        self.deterministic = s.deterministic;
        self.normalizer = s.normalizer;
    }

    fn observe(&mut self, raw: &[f64]) -> Vec<f64> {
        match &mut self.normalizer {
            Some(n) => {
                n.update(raw);
                n.normalize(raw)
            }
            None => raw.to_vec(),
        }
    }

    /// Collects exactly `n_steps` transitions, auto-resetting between
    /// episodes. Episodes may straddle calls; the trailing partial episode
    /// stays live for the next call.
    pub fn collect<P: Policy>(&mut self, policy: &P, n_steps: usize, rng: &mut ChaCha8Rng) -> (RolloutBatch, Vec<EpisodeEnd>) {
        let mut batch = RolloutBatch::default();
        let mut ends = Vec::new();
        let mut ep_start_in_batch: Option<usize> = if self.state.is_none() { Some(0) } else { None };
        for i in 0..n_steps {
            if self.state.is_none() {
                let raw = self.env.reset(rng);
                self.obs = Some(self.observe(&raw));
                self.state = Some(raw);
                self.t_in_episode = 0;
                self.ep_return = 0.0;
                ep_start_in_batch = Some(i);
            }
            let state = self.state.clone().unwrap();
            let obs = self.obs.clone().unwrap();
            let action = if self.deterministic { policy.greedy_action(&obs) } else { policy.sample(&obs, rng) };
            let (next_state, reward, terminal) = self.env.step(&state, &action, rng);
            let next_obs = self.observe(&next_state);
            self.t_in_episode += 1;
            self.global_step += 1;
            self.ep_return += reward;
            let done = terminal || self.t_in_episode >= self.env.horizon();

            batch.states.push(obs);
            batch.actions.push(action);
            batch.rewards.push(reward);
            batch.next_states.push(next_obs.clone());
            batch.dones.push(done);
            batch.terminals.push(terminal);

            if done {
                self.episodes_done += 1;
                ends.push(EpisodeEnd {
                    episode: self.episodes_done,
                    global_step: self.global_step,
                    ret: self.ep_return,
                    span: ep_start_in_batch.map(|s| (s, i + 1)),
                });
                self.state = None;
                self.obs = None;
            } else {
                self.state = Some(next_state);
                self.obs = Some(next_obs);
            }
        }
        (batch, ends)
    }
}

/// Fills value_preds, advantages, and q_targets in place.
///
/// delta_t = r_t + gamma V(s_{t+1}) (1 - terminal_t) - V(s_t)
/// A_t     = delta_t + gamma lambda (1 - done_t) A_{t+1}
/// Q_t     = A_t + V(s_t)
///
/// The recursion runs backward over the batch. A done without a terminal is
/// a truncation (horizon or batch cutoff): the advantage chain stops but the
/// delta still bootstraps through V(s_{t+1}), so targets estimate the
/// infinite-horizon values with no time-limit bias.
pub fn compute_targets(batch: &mut RolloutBatch, value_fn: impl Fn(&[f64]) -> f64, gamma: f64, lambda: f64) {
    let n = batch.len();
    assert_eq!(batch.terminals.len(), n, "terminals must be filled alongside dones");
    batch.value_preds = batch.states.iter().map(|s| value_fn(s)).collect();
    let next_values: Vec<f64> = batch.next_states.iter().map(|s| value_fn(s)).collect();
    batch.advantages = vec![0.0; n];
    batch.q_targets = vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        let not_terminal = if batch.terminals[t] { 0.0 } else { 1.0 };
        let not_done = if batch.dones[t] { 0.0 } else { 1.0 };
        let delta = batch.rewards[t] + gamma * next_values[t] * not_terminal - batch.value_preds[t];
        carry = delta + gamma * lambda * not_done * carry;
        batch.advantages[t] = carry;
        batch.q_targets[t] = carry + batch.value_preds[t];
    }
}

// ─── Observation normalizer ─────────────────────────────────────────────────

/// Running mean/std normalizer, off by default in training configs. When
/// enabled, observations are normalized with the statistics accumulated so
/// far and clipped to [-10, 10].
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ObsNormalizer {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl ObsNormalizer {
    pub fn new(dim: usize) -> Self {
        ObsNormalizer { count: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn update(&mut self, obs: &[f64]) {
        assert_eq!(obs.len(), self.mean.len());
        self.count += 1.0;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(obs) {
            let d1 = x - *m;
            *m += d1 / self.count;
            *s += d1 * (x - *m);
        }
    }

    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        if self.count < 2.0 {
            return obs.to_vec();
        }
        let var_denom = self.count - 1.0;
        obs.iter()
            .zip(self.mean.iter().zip(&self.m2))
            .map(|(&x, (&m, &s))| ((x - m) / (s / var_denom + 1e-8).sqrt()).clamp(-10.0, 10.0))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{GaussianPolicy, SoftmaxPolicy};
    use crate::rng::rng_from;
    use approx::assert_relative_eq;

    #[test]
    fn make_env_rejects_unknown_names() {
        let msg = match make_env("cartpole") {
            Ok(_) => panic!("cartpole should not resolve"),
            Err(e) => e.to_string(),
        };
        assert!(msg.contains("cartpole") && msg.contains("point_mass") && msg.contains("chain_mdp"), "{msg}");
    }

    #[test]
    fn point_mass_reward_is_zero_at_origin_with_zero_action() {
        let env = PointMass::default();
        let (_, r, done) = env.step(&[0.0, 0.0, 0.0, 0.0], &[0.0, 0.0], &mut rng_from(0, "pm"));
        assert_eq!(r, 0.0);
        assert!(!done);
    }

    #[test]
    fn point_mass_clamps_action_and_speed() {
        let env = PointMass::default();
        let mut rng = rng_from(0, "pm2");
        let (next, _, _) = env.step(&[0.0, 0.0, 2.95, 0.0], &[100.0, -100.0], &mut rng);
        assert!(next[2] <= env.max_speed);
        // clamped accel of 1.0 for dt = 0.1
        assert_relative_eq!(next[3], -0.1, max_relative = 1e-12);
    }

    #[test]
    fn pendulum_state_stays_on_unit_circle() {
        let env = Pendulum::default();
        let mut rng = rng_from(1, "pend");
        let mut s = env.reset(&mut rng);
        for _ in 0..50 {
            let (next, r, _) = env.step(&s, &[1.3], &mut rng);
            assert_relative_eq!(next[0] * next[0] + next[1] * next[1], 1.0, max_relative = 1e-12);
            assert!(r <= 0.0, "pendulum reward is a negative cost, got {r}");
            s = next;
        }
    }

    #[test]
    fn chain_rows_are_distributions() {
        let mdp = ChainMdp::random(5, 3, 7, 40);
        for s in 0..5 {
            for a in 0..3 {
                let row = mdp.transition(s, a);
                assert_relative_eq!(row.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
                assert!(row.iter().all(|&p| p >= 0.0));
                let r = mdp.reward(s, a);
                assert!((1.0..1.5).contains(&r));
            }
        }
    }

    #[test]
    fn chain_obs_round_trips_state_index() {
        let mdp = ChainMdp::random(6, 2, 8, 40);
        for s in 0..6 {
            assert_eq!(mdp.state_index(&mdp.state_obs(s)), s);
        }
    }

    #[test]
    fn collect_same_seed_gives_identical_trajectories() {
        let policy = GaussianPolicy::new(4, 2, &[8], &mut rng_from(2, "pol"));
        let run = |seed: u64| {
            let mut c = Collector::new(Box::new(PointMass::default()));
            let mut rng = rng_from(seed, "collect");
            c.collect(&policy, 300, &mut rng)
        };
        let (a, ea) = run(5);
        let (b, eb) = run(5);
        assert_eq!(a.states, b.states);
        assert_eq!(a.rewards, b.rewards);
        assert_eq!(ea.len(), eb.len());
        let (c, _) = run(6);
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn collector_enforces_horizon_and_counts_episodes() {
        let policy = SoftmaxPolicy::new(5, 3, &[8], &mut rng_from(3, "soft"));
        let mut c = Collector::new(Box::new(ChainMdp::random(5, 3, 9, 40)));
        let mut rng = rng_from(4, "collect2");
        let (batch, ends) = c.collect(&policy, 200, &mut rng);
        assert_eq!(batch.len(), 200);
        assert_eq!(ends.len(), 5);
        for (k, e) in ends.iter().enumerate() {
            assert_eq!(e.episode, k + 1);
            assert_eq!(e.global_step, (k + 1) * 40);
            let (s, t) = e.span.unwrap();
            assert_eq!(t - s, 40);
        }
        let done_count = batch.dones.iter().filter(|&&d| d).count();
        assert_eq!(done_count, 5);
    }

    #[test]
    fn gae_matches_hand_unrolled_three_step_episode() {
        // one episode of 3 steps, terminal at the end, V(s) = 0.5 everywhere
        let mut batch = RolloutBatch {
            states: vec![vec![0.0]; 3],
            actions: vec![vec![0.0]; 3],
            rewards: vec![1.0, -0.5, 2.0],
            next_states: vec![vec![0.0]; 3],
            dones: vec![false, false, true],
            terminals: vec![false, false, true],
            ..Default::default()
        };
        let (gamma, lam) = (0.9, 0.8);
        compute_targets(&mut batch, |_| 0.5, gamma, lam);
        let v = 0.5;
        let d2 = 2.0 - v; // terminal: no bootstrap
        let d1 = -0.5 + gamma * v - v;
        let d0 = 1.0 + gamma * v - v;
        let a2 = d2;
        let a1 = d1 + gamma * lam * a2;
        let a0 = d0 + gamma * lam * a1;
        for (got, expect) in batch.advantages.iter().zip([a0, a1, a2]) {
            assert_relative_eq!(*got, expect, max_relative = 1e-12);
        }
        for t in 0..3 {
            assert_relative_eq!(batch.q_targets[t], batch.advantages[t] + v, max_relative = 1e-12);
        }
    }

    #[test]
    fn horizon_truncation_bootstraps_but_stops_the_chain() {
        // two one-step episodes split by a horizon cut: the cut step keeps
        // its gamma V(next) bootstrap and the second episode's advantage
        // does not leak into the first
        let mut batch = RolloutBatch {
            states: vec![vec![1.0], vec![5.0]],
            actions: vec![vec![0.0]; 2],
            rewards: vec![1.0, 100.0],
            next_states: vec![vec![2.0], vec![6.0]],
            dones: vec![true, false],
            terminals: vec![false, false],
            ..Default::default()
        };
        compute_targets(&mut batch, |s| s[0], 0.9, 0.95);
        assert_relative_eq!(batch.advantages[0], 1.0 + 0.9 * 2.0 - 1.0, max_relative = 1e-12);
    }

    #[test]
    fn gae_lambda_one_zero_value_gives_discounted_sums() {
        // constant reward 1, V = 0, lambda = 1: Q_0 = (1 - gamma^H) / (1 - gamma)
        let h = 200;
        let gamma = 0.99;
        let mut batch = RolloutBatch {
            states: vec![vec![0.0]; h],
            actions: vec![vec![0.0]; h],
            rewards: vec![1.0; h],
            next_states: vec![vec![0.0]; h],
            dones: (0..h).map(|t| t == h - 1).collect(),
            terminals: (0..h).map(|t| t == h - 1).collect(),
            ..Default::default()
        };
        compute_targets(&mut batch, |_| 0.0, gamma, 1.0);
        let expect = (1.0 - gamma.powi(h as i32)) / (1.0 - gamma);
        assert_relative_eq!(batch.q_targets[0], expect, max_relative = 1e-10);
    }

    #[test]
    fn gae_lambda_zero_is_one_step_td() {
        let mut batch = RolloutBatch {
            states: vec![vec![1.0], vec![2.0]],
            actions: vec![vec![0.0]; 2],
            rewards: vec![1.0, 1.0],
            next_states: vec![vec![2.0], vec![3.0]],
            dones: vec![false, false],
            terminals: vec![false, false],
            ..Default::default()
        };
        let vf = |s: &[f64]| s[0] * 0.1;
        compute_targets(&mut batch, vf, 0.9, 0.0);
        let d0 = 1.0 + 0.9 * 0.2 - 0.1;
        assert_relative_eq!(batch.advantages[0], d0, max_relative = 1e-12);
    }

    #[test]
    fn batch_cutoff_bootstraps_from_next_value() {
        // batch ends mid-episode: last delta keeps the gamma V(next) term
        let mut batch = RolloutBatch {
            states: vec![vec![0.0]],
            actions: vec![vec![0.0]],
            rewards: vec![1.0],
            next_states: vec![vec![10.0]],
            dones: vec![false],
            terminals: vec![false],
            ..Default::default()
        };
        compute_targets(&mut batch, |s| s[0], 0.9, 0.95);
        assert_relative_eq!(batch.advantages[0], 1.0 + 0.9 * 10.0 - 0.0, max_relative = 1e-12);
    }

    #[test]
    fn obs_normalizer_tracks_mean_and_std() {
        let mut norm = ObsNormalizer::new(2);
        for i in 0..100 {
            norm.update(&[i as f64, 2.0 * i as f64 + 1.0]);
        }
        let z = norm.normalize(&[49.5, 100.0]);
        assert!(z[0].abs() < 1e-9, "mean input should normalize to 0, got {}", z[0]);
        let z = norm.normalize(&[1e9, 0.0]);
        assert_eq!(z[0], 10.0);
    }
}
