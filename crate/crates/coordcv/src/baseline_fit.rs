//! Fitted baselines: a small MLP maps a state to one value per baseline head
//! and is trained with a score-weighted regression loss.
//!
//! Head counts per family: scalar fits one head, layer fits one per
//! parameter group of the policy, coord fits one per policy coordinate.
//!
//! The loss over a batch of n samples and m heads is
//!
//!   L = (1/(n m)) sum_i sum_h [ (q_i - c_h(s_i))^2 ((1 - lambda) w_ih + lambda)
//!                               + rho (c_h(s_i) - c_h_old(s_i))^2 ]
//!
//! The weights come from squared scores in a fixed order: every coordinate
//! column u_ij^2 is first normalized to mean one over the batch rows, and a
//! head's weight is then the mean of its member coordinates' normalized
//! weights. Aggregating after normalization makes the scalar and layer
//! losses exactly the coordinate loss restricted to head-constant baselines,
//! and makes the whole term invariant to rescaling all scores. A column with
//! no mass normalizes to all ones.
//!
//! lambda = 1 ignores the scores entirely and reduces every head to plain
//! value regression. lambda = 0 in coord mode makes the per-state minimizer
//! of head j the variance-optimal baseline for coordinate j, because the
//! column normalization is a per-head constant that cancels from the
//! weighted mean. The rho term is a proximal penalty against the
//! predictions of a snapshot taken when fitting starts.
//!
//! Columns are normalized per minibatch by default; `full_batch_norm`
//! switches to batch-wide normalization, which keeps the minimizer exactly
//! at the closed form (per-minibatch means wobble around it).

use crate::error::{Error, Result};
use crate::estimators::{BaselineValues, CvMode};
use crate::linalg::Matrix;
use crate::nn::{Mlp, ParamLayout};
use crate::opt::{clip_grad_norm, Adam};
use crate::policy::ScoreSource;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct BaselineNet {
    body: Mlp,
    mode: CvMode,
    policy_layout: ParamLayout,
}

impl BaselineNet {
    pub fn new(obs_dim: usize, hidden: &[usize], mode: CvMode, policy_layout: ParamLayout, rng: &mut ChaCha8Rng) -> Result<Self> {
        let heads = match mode {
            CvMode::Scalar => 1,
            CvMode::Layer => policy_layout.n_segments(),
            CvMode::Coord => policy_layout.total(),
            CvMode::None | CvMode::Value => {
                return Err(Error::InvalidConfig(format!("{mode} has no fitted baseline net")))
            }
        };
        let mut dims = vec![obs_dim];
        dims.extend_from_slice(hidden);
        dims.push(heads);
        let mut gains = vec![std::f64::consts::SQRT_2; hidden.len()];
        gains.push(1.0);
        Ok(BaselineNet { body: Mlp::new(&dims, &gains, rng), mode, policy_layout })
    }

    pub fn mode(&self) -> CvMode {
        self.mode
    }

    pub fn head_dim(&self) -> usize {
        self.body.dims().last().copied().unwrap()
    }

    pub fn policy_layout(&self) -> &ParamLayout {
        &self.policy_layout
    }

    pub fn param_count(&self) -> usize {
        self.body.param_count()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.body.params_flat()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        self.body.set_params_flat(flat);
    }

    /// One value per head for a single state.
    pub fn predict(&self, state: &[f64]) -> Vec<f64> {
        self.body.infer(state)
    }

    /// Predictions for a batch, packed at the family's granularity.
    pub fn baseline_values(&self, states: &[Vec<f64>]) -> BaselineValues {
        let n = states.len();
        match self.mode {
            CvMode::Scalar => BaselineValues::PerSample(states.iter().map(|s| self.predict(s)[0]).collect()),
            CvMode::Layer => {
                let mut values = Matrix::zeros(n, self.head_dim());
                for (i, s) in states.iter().enumerate() {
                    let p = self.predict(s);
                    for (g, v) in p.iter().enumerate() {
                        values.set(i, g, *v);
                    }
                }
                BaselineValues::PerGroup { values, layout: self.policy_layout.clone() }
            }
            CvMode::Coord => {
                let mut values = Matrix::zeros(n, self.head_dim());
                for (i, s) in states.iter().enumerate() {
                    let p = self.predict(s);
                    values.row_mut(i).copy_from_slice(&p);
                }
                BaselineValues::PerCoord(values)
            }
            CvMode::None | CvMode::Value => unreachable!("constructor rejects these modes"),
        }
    }
}

/// The coordinate ranges each head of a family covers.
pub fn head_ranges(mode: CvMode, layout: &ParamLayout) -> Result<Vec<std::ops::Range<usize>>> {
    let dim = layout.total();
    match mode {
        CvMode::Scalar => Ok(vec![0..dim]),
        CvMode::Layer => Ok((0..layout.n_segments()).map(|g| layout.range(g)).collect()),
        CvMode::Coord => Ok((0..dim).map(|j| j..j + 1).collect()),
        CvMode::None | CvMode::Value => Err(Error::InvalidConfig(format!("{mode} has no score weights"))),
    }
}

/// Per-sample squared scores, one column per policy coordinate.
pub fn squared_scores(scores: &impl ScoreSource) -> Result<Matrix> {
    let n = scores.len();
    let dim = scores.dim();
    let mut raw = Matrix::zeros(n, dim);
    let mut row = vec![0.0; dim];
    for i in 0..n {
        scores.row_into(i, &mut row)?;
        for (j, u) in row.iter().enumerate() {
            raw.set(i, j, u * u);
        }
    }
    Ok(raw)
}

/// Column means over a row subset; the normalization denominators.
pub fn column_means(raw: &Matrix, rows: &[usize]) -> Vec<f64> {
    let mut means = vec![0.0; raw.cols()];
    for &i in rows {
        for (m, &w) in means.iter_mut().zip(raw.row(i)) {
            *m += w;
        }
    }
    let inv = 1.0 / rows.len().max(1) as f64;
    for m in &mut means {
        *m *= inv;
    }
    means
}

fn norm_w(raw: f64, col_mean: f64) -> f64 {
    if col_mean > 0.0 {
        raw / col_mean
    } else {
        1.0
    }
}

/// Squared scores with every column normalized to mean one over the whole
/// batch; a column with no mass becomes all ones.
pub fn normalized_weights(scores: &impl ScoreSource) -> Result<Matrix> {
    let mut raw = squared_scores(scores)?;
    let rows: Vec<usize> = (0..raw.rows()).collect();
    let means = column_means(&raw, &rows);
    for i in 0..raw.rows() {
        let r = raw.row_mut(i);
        for (w, m) in r.iter_mut().zip(&means) {
            *w = norm_w(*w, *m);
        }
    }
    Ok(raw)
}

/// Head weight for one sample: mean of member coordinates' normalized
/// weights, blended with lambda.
fn head_weight(raw_row: &[f64], col_means: &[f64], range: &std::ops::Range<usize>, lambda: f64) -> f64 {
    let mut acc = 0.0;
    for j in range.clone() {
        acc += norm_w(raw_row[j], col_means[j]);
    }
    let w = acc / range.len() as f64;
    (1.0 - lambda) * w + lambda
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FitConfig {
    pub lambda: f64,
    pub rho: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    /// normalize weight columns over the whole batch instead of per minibatch
    pub full_batch_norm: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lambda: 0.1,
            rho: 0.0,
            epochs: 3,
            minibatches: 8,
            lr: 3e-3,
            max_grad_norm: 0.5,
            full_batch_norm: false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FitReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs_run: usize,
}

/// Loss and its parameter gradient over the given rows. `raw_u2` holds the
/// per-coordinate squared scores; `col_means` are the normalization
/// denominators to use (minibatch or full batch). `c_old` is the proximal
/// snapshot's predictions for all samples; ignored when rho is zero.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad(
    net: &BaselineNet,
    states: &[Vec<f64>],
    q_hat: &[f64],
    raw_u2: &Matrix,
    rows: &[usize],
    col_means: &[f64],
    lambda: f64,
    rho: f64,
    c_old: Option<&Matrix>,
    grad: &mut [f64],
) -> Result<f64> {
    let m = net.head_dim();
    let ranges = head_ranges(net.mode(), net.policy_layout())?;
    assert_eq!(grad.len(), net.param_count());
    grad.fill(0.0);
    let scale = 1.0 / (rows.len() * m) as f64;
    let mut loss = 0.0;
    let mut seed = vec![0.0; m];
    for &i in rows {
        let (pred, tape) = net.body.forward(&states[i]);
        let u2_row = raw_u2.row(i);
        for (h, range) in ranges.iter().enumerate() {
            let w = head_weight(u2_row, col_means, range, lambda);
            let resid = q_hat[i] - pred[h];
            let mut term = resid * resid * w;
            let mut dc = -2.0 * resid * w;
            if rho > 0.0 {
                let old = c_old.expect("proximal term needs a snapshot").get(i, h);
                let drift = pred[h] - old;
                term += rho * drift * drift;
                dc += 2.0 * rho * drift;
            }
            loss += scale * term;
            seed[h] = scale * dc;
        }
        net.body.backward_per_example(&tape, &seed, grad)?;
    }
    if !loss.is_finite() {
        return Err(Error::FitFailed(format!("non-finite loss {loss}")));
    }
    Ok(loss)
}

/// Loss only, for monitoring.
#[allow(clippy::too_many_arguments)]
pub fn loss_only(
    net: &BaselineNet,
    states: &[Vec<f64>],
    q_hat: &[f64],
    raw_u2: &Matrix,
    rows: &[usize],
    col_means: &[f64],
    lambda: f64,
    rho: f64,
    c_old: Option<&Matrix>,
) -> f64 {
    let m = net.head_dim();
    let ranges = head_ranges(net.mode(), net.policy_layout()).expect("net mode always has ranges");
    let scale = 1.0 / (rows.len() * m) as f64;
    let mut loss = 0.0;
    for &i in rows {
        let pred = net.predict(&states[i]);
        let u2_row = raw_u2.row(i);
        for (h, range) in ranges.iter().enumerate() {
            let w = head_weight(u2_row, col_means, range, lambda);
            let resid = q_hat[i] - pred[h];
            loss += scale * resid * resid * w;
            if rho > 0.0 {
                let drift = pred[h] - c_old.expect("proximal term needs a snapshot").get(i, h);
                loss += scale * rho * drift * drift;
            }
        }
    }
    loss
}

/// Fits the baseline net in place. Returns an error if the loss blows up by
/// more than 10% over the run or turns non-finite; the net keeps whatever
/// parameters the last step left, so callers deciding to tolerate a failed
/// fit should snapshot first.
pub fn fit(
    net: &mut BaselineNet,
    states: &[Vec<f64>],
    q_hat: &[f64],
    scores: &impl ScoreSource,
    cfg: &FitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FitReport> {
    let n = states.len();
    assert_eq!(q_hat.len(), n, "q values must match states");
    assert_eq!(scores.len(), n, "score rows must match states");
    if n == 0 {
        return Err(Error::FitFailed("empty fit batch".to_string()));
    }
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(Error::InvalidConfig(format!("lambda {} outside [0, 1]", cfg.lambda)));
    }
    if cfg.rho < 0.0 {
        return Err(Error::InvalidConfig(format!("rho {} must be nonnegative", cfg.rho)));
    }

    let raw_u2 = squared_scores(scores)?;
    let all_rows: Vec<usize> = (0..n).collect();
    let full_means = column_means(&raw_u2, &all_rows);
    let c_old: Option<Matrix> = (cfg.rho > 0.0).then(|| {
        let mut m = Matrix::zeros(n, net.head_dim());
        for (i, s) in states.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&net.predict(s));
        }
        m
    });

    let initial_loss = loss_only(net, states, q_hat, &raw_u2, &all_rows, &full_means, cfg.lambda, cfg.rho, c_old.as_ref());
    let mut adam = Adam::new(net.param_count());
    let mut grad = vec![0.0; net.param_count()];
    let mut order = all_rows.clone();
    let n_batches = cfg.minibatches.clamp(1, n);

    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let base = n / n_batches;
        let mut start = 0;
        for b in 0..n_batches {
            let end = start + base + usize::from(b < n % n_batches);
            if end == start {
                continue;
            }
            let rows = &order[start..end];
            let means = if cfg.full_batch_norm { full_means.clone() } else { column_means(&raw_u2, rows) };
            loss_and_grad(net, states, q_hat, &raw_u2, rows, &means, cfg.lambda, cfg.rho, c_old.as_ref(), &mut grad)?;
            clip_grad_norm(&mut grad, cfg.max_grad_norm);
            let mut params = net.params_flat();
            adam.step(&mut params, &grad, cfg.lr);
            net.set_params_flat(&params);
            start = end;
        }
    }

    let final_loss = loss_only(net, states, q_hat, &raw_u2, &all_rows, &full_means, cfg.lambda, cfg.rho, c_old.as_ref());
    if !final_loss.is_finite() || final_loss > initial_loss * 1.1 + 1e-12 {
        return Err(Error::FitFailed(format!(
            "baseline fit diverged: loss {initial_loss} -> {final_loss}"
        )));
    }
    Ok(FitReport { initial_loss, final_loss, epochs_run: cfg.epochs })
}
