//! Central finite-difference audits of every hand-written gradient.
//!
//! Each check perturbs parameters one at a time, compares the analytic
//! gradient against (f(x+h) - f(x-h)) / 2h, and reports the worst relative
//! error. The surrogate checks evaluate away from the clip boundaries,
//! where the objective is differentiable; the per-coordinate objective is
//! probed along its own coordinate, matching the coordinate-parallel update
//! the optimizer performs.
//!
//! The negative control corrupts one gradient entry and asserts the
//! comparison notices, so a silently broken check cannot pass the suite.

use crate::baseline_fit::{column_means, loss_and_grad, loss_only, squared_scores, BaselineNet};
use crate::estimators::CvMode;
use crate::linalg::Matrix;
use crate::nn::Mlp;
use crate::policy::{score_matrix, GaussianPolicy, Policy, SoftmaxPolicy};
use crate::ppo::{coord_ppo_gradient, scalar_ppo_gradient};
use crate::rng::rng_from;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub worst_rel: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckResult {
    fn new(name: &'static str, worst_rel: f64, tolerance: f64) -> Self {
        CheckResult { name, worst_rel, tolerance, pass: worst_rel < tolerance }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checks: Vec<CheckResult>,
    /// true when the corrupted-gradient control was caught
    pub negative_control_detected: bool,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass) && self.negative_control_detected
    }

    pub fn worst_rel(&self) -> f64 {
        self.checks.iter().map(|c| c.worst_rel).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<18} worst rel {:.3e}  (tol {:.0e})  {}",
                c.name,
                c.worst_rel,
                c.tolerance,
                if c.pass { "ok" } else { "FAIL" }
            )?;
        }
        writeln!(
            f,
            "{:<18} {}",
            "negative-control",
            if self.negative_control_detected { "corruption detected, ok" } else { "NOT DETECTED" }
        )
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    let denom = analytic.abs().max(fd.abs()).max(1e-8);
    (analytic - fd).abs() / denom
}

/// Five-point central difference: fourth-order truncation lets a step of
/// 1e-4 keep roundoff near 1e-12 absolute, tight enough to certify small
/// gradient entries that a two-point stencil drowns in cancellation noise.
fn five_point(mut f: impl FnMut(&[f64]) -> f64, p: &mut [f64], k: usize, h: f64) -> f64 {
    let x = p[k];
    let mut eval = |t: f64| {
        p[k] = x + t;
        f(p)
    };
    // Pairwise differences before scaling, so a parameter the objective
    // ignores yields an exact zero instead of a 7v rounding residue.
    let inner = eval(h) - eval(-h);
    let outer = eval(2.0 * h) - eval(-2.0 * h);
    p[k] = x;
    (8.0 * inner - outer) / (12.0 * h)
}

/// Worst relative error of `grad` against finite differences of `f` over
/// every `stride`-th parameter.
fn fd_worst(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], grad: &[f64], h: f64, stride: usize) -> f64 {
    assert_eq!(params.len(), grad.len());
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for k in (0..params.len()).step_by(stride.max(1)) {
        let fd = five_point(&mut f, &mut p, k, h);
        worst = worst.max(rel_err(grad[k], fd));
    }
    worst
}

/// Per-example MLP backward on a random net and a few random inputs.
pub fn check_mlp(seed: u64) -> CheckResult {
    let mut rng = rng_from(seed, "gc-mlp");
    let mut net = Mlp::new(&[3, 5, 4, 2], &[1.3, 0.9, 1.0], &mut rng);
    let params = net.params_flat();
    let mut worst: f64 = 0.0;
    for trial in 0..3 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let seed_vec: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, tape) = net.forward(&x);
        let mut grad = vec![0.0; net.param_count()];
        net.backward_per_example(&tape, &seed_vec, &mut grad).unwrap();
        let w = fd_worst(
            |p| {
                net.set_params_flat(p);
                let out = net.infer(&x);
                net.set_params_flat(&params);
                out.iter().zip(&seed_vec).map(|(o, s)| o * s).sum()
            },
            &params,
            &grad,
            1e-4,
            1 + trial,
        );
        worst = worst.max(w);
    }
    CheckResult::new("mlp-backward", worst, 1e-5)
}

/// A one-weight linear net; degenerate sizes must not break the tape.
pub fn check_mlp_single_unit(seed: u64) -> CheckResult {
    let mut rng = rng_from(seed, "gc-mlp1");
    let mut net = Mlp::new(&[1, 1], &[1.0], &mut rng);
    let params = net.params_flat();
    let x = [0.7];
    let (_, tape) = net.forward(&x);
    let mut grad = vec![0.0; net.param_count()];
    net.backward_per_example(&tape, &[1.0], &mut grad).unwrap();
    let worst = fd_worst(
        |p| {
            net.set_params_flat(p);
            let out = net.infer(&x)[0];
            net.set_params_flat(&params);
            out
        },
        &params,
        &grad,
        1e-4,
        1,
    );
    CheckResult::new("mlp-single-unit", worst, 1e-5)
}

fn check_policy_score<P: Policy + Clone>(
    name: &'static str,
    policy: &P,
    state: &[f64],
    action: &[f64],
) -> CheckResult {
    let params = policy.params_flat();
    let mut grad = vec![0.0; policy.param_count()];
    policy.score_row(state, action, &mut grad).unwrap();
    let mut probe = policy.clone();
    let worst = fd_worst(
        |p| {
            probe.set_params_flat(p);
            probe.log_prob(state, action)
        },
        &params,
        &grad,
        1e-4,
        1,
    );
    CheckResult::new(name, worst, 1e-5)
}

fn check_policy_entropy<P: Policy + Clone>(name: &'static str, policy: &P, state: &[f64]) -> CheckResult {
    let params = policy.params_flat();
    let mut grad = vec![0.0; policy.param_count()];
    policy.entropy_grad_acc(state, &mut grad).unwrap();
    let mut probe = policy.clone();
    let worst = fd_worst(
        |p| {
            probe.set_params_flat(p);
            probe.entropy(state)
        },
        &params,
        &grad,
        1e-4,
        1,
    );
    CheckResult::new(name, worst, 1e-5)
}

pub fn check_gaussian_score(seed: u64) -> CheckResult {
    let mut rng = rng_from(seed, "gc-gauss");
    let policy = GaussianPolicy::new(3, 2, &[4], &mut rng);
    let state: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let action = policy.sample(&state, &mut rng);
    check_policy_score("gaussian-score", &policy, &state, &action)
}

pub fn check_softmax_score(seed: u64) -> CheckResult {
    let mut rng = rng_from(seed, "gc-soft");
    let policy = SoftmaxPolicy::new(3, 3, &[4], &mut rng);
    let state: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let action = policy.sample(&state, &mut rng);
    check_policy_score("softmax-score", &policy, &state, &action)
}

pub fn check_gaussian_entropy(seed: u64) -> CheckResult {
    let mut rng = rng_from(seed, "gc-gauss-ent");
    let policy = GaussianPolicy::new(3, 2, &[4], &mut rng);
    let state: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    check_policy_entropy("gaussian-entropy", &policy, &state)
}

pub fn check_softmax_entropy(seed: u64) -> CheckResult {
    let mut rng = rng_from(seed, "gc-soft-ent");
    let policy = SoftmaxPolicy::new(3, 3, &[4], &mut rng);
    let state: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    check_policy_entropy("softmax-entropy", &policy, &state)
}

/// Score-weighted baseline regression loss with both lambda and rho active.
pub fn check_baseline_loss(seed: u64) -> CheckResult {
    let mut rng = rng_from(seed, "gc-bl");
    let policy = SoftmaxPolicy::new(3, 2, &[2], &mut rng);
    let n = 12;
    let states: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let actions: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(0..2) as f64]).collect();
    let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..2.0)).collect();
    let scores = score_matrix(&policy, &states, &actions).unwrap();
    let mut net = BaselineNet::new(3, &[3], CvMode::Coord, policy.layout().clone(), &mut rng).unwrap();
    let raw = squared_scores(&scores).unwrap();
    let rows: Vec<usize> = (0..n).collect();
    let means = column_means(&raw, &rows);
    let mut c_old = Matrix::zeros(n, net.head_dim());
    for (i, s) in states.iter().enumerate() {
        for (j, v) in net.predict(s).iter().enumerate() {
            c_old.set(i, j, v + 0.2 * ((i * 3 + j) as f64 * 0.31).cos());
        }
    }
    let (lambda, rho) = (0.3, 0.2);
    let mut grad = vec![0.0; net.param_count()];
    loss_and_grad(&net, &states, &q, &raw, &rows, &means, lambda, rho, Some(&c_old), &mut grad).unwrap();
    let params = net.params_flat();
    let worst = fd_worst(
        |p| {
            net.set_params_flat(p);
            let l = loss_only(&net, &states, &q, &raw, &rows, &means, lambda, rho, Some(&c_old));
            net.set_params_flat(&params);
            l
        },
        &params,
        &grad,
        1e-4,
        1,
    );
    CheckResult::new("baseline-loss", worst, 1e-5)
}

struct SurrogateFixture {
    policy: GaussianPolicy,
    old: GaussianPolicy,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    adv: Matrix,
    eps: f64,
}

/// Small policy displaced from its rollout snapshot so ratios spread to
/// both sides of the clip window while staying off the boundaries. The
/// displacement grows until both conditions hold, so any seed works.
fn surrogate_fixture(seed: u64) -> SurrogateFixture {
    let mut rng = rng_from(seed, "gc-surr");
    let old = GaussianPolicy::new(2, 1, &[2], &mut rng);
    let d = old.param_count();
    let n = 10;
    let states: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let actions: Vec<Vec<f64>> = states.iter().map(|s| old.sample(s, &mut rng)).collect();
    let eps = 0.2;
    let base = old.params_flat();

    let mut policy = old.clone();
    'search: for attempt in 0..200 {
        let scale = 0.2 + 0.05 * attempt as f64;
        let mut p = base.clone();
        for v in &mut p {
            *v += rng.gen_range(-scale..scale);
        }
        policy.set_params_flat(&p);
        let mut n_outside = 0;
        for (s, a) in states.iter().zip(&actions) {
            let r = (policy.log_prob(s, a) - old.log_prob(s, a)).exp();
            let margin = (r - (1.0 + eps)).abs().min((r - (1.0 - eps)).abs());
            if !(r.is_finite() && r > 0.0) || margin <= 4e-3 {
                continue 'search;
            }
            if r > 1.0 + eps || r < 1.0 - eps {
                n_outside += 1;
            }
        }
        if n_outside >= 2 && n_outside <= n - 2 {
            let mut adv = Matrix::zeros(n, d);
            for i in 0..n {
                for j in 0..d {
                    let mag = 0.3 + 1.3 * rng.gen::<f64>();
                    adv.set(i, j, if rng.gen::<bool>() { mag } else { -mag });
                }
            }
            return SurrogateFixture { policy, old, states, actions, adv, eps };
        }
    }
    unreachable!("no displacement with mixed clipped/unclipped ratios found");
}

/// Independent statement of the clipped objective: pessimistic min with a
/// two-sided clamp, rather than the sign-branched form the gradient uses.
fn clip_objective(r: f64, a: f64, eps: f64) -> f64 {
    (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a)
}

/// Coordinate surrogate gradient against per-coordinate central differences
/// of each coordinate's own clipped objective.
pub fn check_coord_surrogate(seed: u64) -> CheckResult {
    let fx = surrogate_fixture(seed);
    let n = fx.states.len();
    let d = fx.policy.param_count();
    let ratios: Vec<f64> = (0..n)
        .map(|i| (fx.policy.log_prob(&fx.states[i], &fx.actions[i]) - fx.old.log_prob(&fx.states[i], &fx.actions[i])).exp())
        .collect();
    let scores = score_matrix(&fx.policy, &fx.states, &fx.actions).unwrap();
    let (grad, _) = coord_ppo_gradient(&scores, &ratios, &fx.adv, fx.eps).unwrap();

    let params = fx.policy.params_flat();
    let mut probe = fx.policy.clone();
    // Step kept small enough that the +-2h evaluations cannot carry any
    // ratio across a clip boundary (fixture guarantees margin > 4e-3).
    let h = 5e-5;
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    for j in 0..d {
        let objective_j = |pv: &[f64]| -> f64 {
            probe.set_params_flat(pv);
            let mut acc = 0.0;
            for i in 0..n {
                let r = (probe.log_prob(&fx.states[i], &fx.actions[i])
                    - fx.old.log_prob(&fx.states[i], &fx.actions[i]))
                .exp();
                acc += clip_objective(r, fx.adv.get(i, j), fx.eps);
            }
            acc / n as f64
        };
        let fd = five_point(objective_j, &mut p, j, h);
        worst = worst.max(rel_err(grad[j], fd));
    }
    CheckResult::new("coord-surrogate", worst, 1e-5)
}

/// Scalar clipped objective: one advantage per sample, full-gradient FD.
pub fn check_scalar_surrogate(seed: u64) -> CheckResult {
    let fx = surrogate_fixture(seed + 1);
    let n = fx.states.len();
    let adv: Vec<f64> = (0..n).map(|i| fx.adv.get(i, 0)).collect();
    let ratios: Vec<f64> = (0..n)
        .map(|i| (fx.policy.log_prob(&fx.states[i], &fx.actions[i]) - fx.old.log_prob(&fx.states[i], &fx.actions[i])).exp())
        .collect();
    let scores = score_matrix(&fx.policy, &fx.states, &fx.actions).unwrap();
    let grad = scalar_ppo_gradient(&scores, &ratios, &adv, fx.eps).unwrap();

    let params = fx.policy.params_flat();
    let mut probe = fx.policy.clone();
    let worst = fd_worst(
        |pv| {
            probe.set_params_flat(pv);
            let mut acc = 0.0;
            for i in 0..n {
                let r = (probe.log_prob(&fx.states[i], &fx.actions[i])
                    - fx.old.log_prob(&fx.states[i], &fx.actions[i]))
                .exp();
                acc += clip_objective(r, adv[i], fx.eps);
            }
            acc / n as f64
        },
        &params,
        &grad,
        5e-5,
        1,
    );
    CheckResult::new("scalar-surrogate", worst, 1e-5)
}

/// Corrupts one entry of a known-good gradient and reruns the comparison;
/// detection means the harness would catch a real regression.
pub fn negative_control(seed: u64) -> bool {
    let mut rng = rng_from(seed, "gc-neg");
    let mut net = Mlp::new(&[3, 4, 2], &[1.0, 1.0], &mut rng);
    let params = net.params_flat();
    let x = [0.3, -0.8, 0.5];
    let (_, tape) = net.forward(&x);
    let mut grad = vec![0.0; net.param_count()];
    net.backward_per_example(&tape, &[1.0, -0.7], &mut grad).unwrap();
    grad[3] += 0.5;
    let worst = fd_worst(
        |p| {
            net.set_params_flat(p);
            let out = net.infer(&x);
            net.set_params_flat(&params);
            out[0] - 0.7 * out[1]
        },
        &params,
        &grad,
        1e-4,
        1,
    );
    worst > 1e-5
}

pub fn run_all(seed: u64) -> GradCheckReport {
    let checks = vec![
        check_mlp(seed),
        check_mlp_single_unit(seed),
        check_gaussian_score(seed),
        check_softmax_score(seed),
        check_gaussian_entropy(seed),
        check_softmax_entropy(seed),
        check_baseline_loss(seed),
        check_coord_surrogate(seed),
        check_scalar_surrogate(seed),
    ];
    GradCheckReport { checks, negative_control_detected: negative_control(seed) }
}
