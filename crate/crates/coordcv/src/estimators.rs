//! Empirical policy-gradient estimators and the baseline families that plug
//! into them.
//!
//! A per-sample gradient row is score_ij (q_i - c_ij). The families differ
//! only in how much structure c has: nothing, one value per sample, one value
//! per parameter group per sample, or one value per coordinate per sample.
//! `BaselineValues` makes that broadcast explicit so every downstream
//! computation (estimates, variances, clipped-surrogate advantages) runs the
//! same code path for all families.
//!
//! Direct sample-optimal baselines are computed here for grouped (tabular)
//! states: within a state group, the baseline that minimizes the summed
//! second moment of the rows weights each q_i by the squared score mass of
//! the coordinates it covers. Zero weight falls back one structural level,
//! never to NaN.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::ParamLayout;
use crate::policy::ScoreSource;
use crate::stats::TraceVarAccum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum CvMode {
    None,
    Value,
    Scalar,
    Layer,
    Coord,
}

pub const CV_MODES: [CvMode; 5] = [CvMode::None, CvMode::Value, CvMode::Scalar, CvMode::Layer, CvMode::Coord];

impl CvMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CvMode::None => "none",
            CvMode::Value => "value",
            CvMode::Scalar => "scalar",
            CvMode::Layer => "layer",
            CvMode::Coord => "coord",
        }
    }
}

impl std::fmt::Display for CvMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CvMode::None),
            "value" => Ok(CvMode::Value),
            "scalar" => Ok(CvMode::Scalar),
            "layer" => Ok(CvMode::Layer),
            "coord" => Ok(CvMode::Coord),
            _ => Err(Error::InvalidConfig(format!("unknown cv mode '{s}', valid: none, value, scalar, layer, coord"))),
        }
    }
}

/// Baseline values for a batch, at whatever granularity the family uses.
#[derive(Clone, Debug)]
pub enum BaselineValues {
    /// no control variate
    Zero { n: usize },
    /// one value per sample, broadcast across all coordinates
    PerSample(Vec<f64>),
    /// one value per sample per parameter group
    PerGroup { values: Matrix, layout: ParamLayout },
    /// one value per sample per coordinate
    PerCoord(Matrix),
}

impl BaselineValues {
    pub fn len(&self) -> usize {
        match self {
            BaselineValues::Zero { n } => *n,
            BaselineValues::PerSample(v) => v.len(),
            BaselineValues::PerGroup { values, .. } => values.rows(),
            BaselineValues::PerCoord(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// c for sample i, coordinate j.
    pub fn value(&self, i: usize, j: usize) -> f64 {
        match self {
            BaselineValues::Zero { .. } => 0.0,
            BaselineValues::PerSample(v) => v[i],
            BaselineValues::PerGroup { values, layout } => values.get(i, layout.segment_of(j)),
            BaselineValues::PerCoord(m) => m.get(i, j),
        }
    }

    /// Writes the full coordinate expansion of sample i into `out`.
    pub fn row_into(&self, i: usize, out: &mut [f64]) {
        match self {
            BaselineValues::Zero { .. } => out.fill(0.0),
            BaselineValues::PerSample(v) => out.fill(v[i]),
            BaselineValues::PerGroup { values, layout } => {
                for g in 0..layout.n_segments() {
                    out[layout.range(g)].fill(values.get(i, g));
                }
            }
            BaselineValues::PerCoord(m) => out.copy_from_slice(m.row(i)),
        }
    }
}

/// Samples grouped by underlying state, for tabular baseline estimation.
#[derive(Clone, Debug)]
pub struct StateGroups {
    groups: Vec<Vec<usize>>,
    assignment: Vec<usize>,
}

impl StateGroups {
    /// Every sample alone in its own group.
    pub fn singletons(n: usize) -> Self {
        StateGroups { groups: (0..n).map(|i| vec![i]).collect(), assignment: (0..n).collect() }
    }

    /// All samples in one group.
    pub fn pooled(n: usize) -> Self {
        StateGroups { groups: vec![(0..n).collect()], assignment: vec![0; n] }
    }

    /// Groups one-hot observations by their active index.
    pub fn from_one_hot(states: &[Vec<f64>]) -> Self {
        let keys: Vec<usize> = states
            .iter()
            .map(|s| {
                let mut best = 0;
                for k in 1..s.len() {
                    if s[k] > s[best] {
                        best = k;
                    }
                }
                best
            })
            .collect();
        Self::from_keys(&keys)
    }

    pub fn from_keys(keys: &[usize]) -> Self {
        let mut index_of = std::collections::HashMap::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut assignment = Vec::with_capacity(keys.len());
        for (i, &k) in keys.iter().enumerate() {
            let g = *index_of.entry(k).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(i);
            assignment.push(g);
        }
        StateGroups { groups, assignment }
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn members(&self, g: usize) -> &[usize] {
        &self.groups[g]
    }

    pub fn group_of(&self, i: usize) -> usize {
        self.assignment[i]
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

fn coordinate_groups(mode: CvMode, layout: &ParamLayout, dim: usize) -> Vec<std::ops::Range<usize>> {
    match mode {
        CvMode::Scalar => vec![0..dim],
        CvMode::Layer => (0..layout.n_segments()).map(|g| layout.range(g)).collect(),
        CvMode::Coord => (0..dim).map(|j| j..j + 1).collect(),
        CvMode::None | CvMode::Value => unreachable!("no sample-optimal form for {mode}"),
    }
}

/// Direct sample-optimal baselines for the scalar, layer, or coordinate
/// family, estimated within each state group:
///
///   c = sum_i w_i q_i / sum_i w_i,  w_i = squared score mass over the
///   coordinates the baseline entry covers.
///
/// A zero-weight coordinate group falls back to the group's scalar optimum,
/// and a group with no score mass at all falls back to its plain mean q.
pub fn sample_optimal_baselines(
    mode: CvMode,
    scores: &impl ScoreSource,
    q_hat: &[f64],
    groups: &StateGroups,
    layout: &ParamLayout,
) -> Result<BaselineValues> {
    let n = scores.len();
    let dim = scores.dim();
    assert_eq!(q_hat.len(), n, "q values must match score rows");
    assert_eq!(groups.len(), n, "state groups must cover every sample");
    let coord_groups = coordinate_groups(mode, layout, dim);
    let k = coord_groups.len();

    // per state group: weights w[cg] = sum_i sum_{j in cg} u_ij^2 and wq
    let mut row = vec![0.0; dim];
    let mut per_group = vec![vec![0.0; k]; groups.n_groups()];
    let mut per_group_q = vec![vec![0.0; k]; groups.n_groups()];
    let mut plain_q = vec![0.0; groups.n_groups()];
    for g in 0..groups.n_groups() {
        for &i in groups.members(g) {
            scores.row_into(i, &mut row)?;
            plain_q[g] += q_hat[i];
            for (cg, range) in coord_groups.iter().enumerate() {
                let mass: f64 = row[range.clone()].iter().map(|u| u * u).sum();
                per_group[g][cg] += mass;
                per_group_q[g][cg] += mass * q_hat[i];
            }
        }
        plain_q[g] /= groups.members(g).len() as f64;
    }

    let mut values = Matrix::zeros(n, k);
    for g in 0..groups.n_groups() {
        let w_tot: f64 = per_group[g].iter().sum();
        let wq_tot: f64 = per_group_q[g].iter().sum();
        let scalar_opt = if w_tot > 0.0 { wq_tot / w_tot } else { plain_q[g] };
        for cg in 0..k {
            let c = if per_group[g][cg] > 0.0 { per_group_q[g][cg] / per_group[g][cg] } else { scalar_opt };
            for &i in groups.members(g) {
                values.set(i, cg, c);
            }
        }
    }

    Ok(match mode {
        CvMode::Scalar => BaselineValues::PerSample((0..n).map(|i| values.get(i, 0)).collect()),
        CvMode::Layer => BaselineValues::PerGroup { values, layout: layout.clone() },
        CvMode::Coord => BaselineValues::PerCoord(values),
        CvMode::None | CvMode::Value => unreachable!(),
    })
}

/// Mean of the per-sample gradient rows.
pub fn pg_estimate(scores: &impl ScoreSource, q_hat: &[f64], baseline: &BaselineValues) -> Result<Vec<f64>> {
    let n = scores.len();
    let dim = scores.dim();
    assert_eq!(q_hat.len(), n);
    assert_eq!(baseline.len(), n);
    assert!(n > 0, "cannot estimate from an empty batch");
    let mut row = vec![0.0; dim];
    let mut mean = vec![0.0; dim];
    for i in 0..n {
        scores.row_into(i, &mut row)?;
        for j in 0..dim {
            mean[j] += row[j] * (q_hat[i] - baseline.value(i, j));
        }
    }
    let inv = 1.0 / n as f64;
    for m in &mut mean {
        *m *= inv;
    }
    Ok(mean)
}

/// Streamed trace variance of the per-sample rows with its 95% interval.
pub fn trace_variance(scores: &impl ScoreSource, q_hat: &[f64], baseline: &BaselineValues) -> Result<(f64, (f64, f64))> {
    let n = scores.len();
    let dim = scores.dim();
    assert_eq!(q_hat.len(), n);
    assert_eq!(baseline.len(), n);
    let mut accum = TraceVarAccum::new(dim);
    let mut row = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    for i in 0..n {
        scores.row_into(i, &mut row)?;
        for j in 0..dim {
            grad[j] = row[j] * (q_hat[i] - baseline.value(i, j));
        }
        accum.push(&grad);
    }
    Ok(accum.trace_variance_with_ci())
}

/// Sum over coordinates of the second moment of the rows. The sample-optimal
/// baselines minimize exactly this, so it is the quantity to compare when
/// checking optimality on a fixed sample set.
pub fn second_moment_sum(scores: &impl ScoreSource, q_hat: &[f64], baseline: &BaselineValues) -> Result<f64> {
    let n = scores.len();
    let dim = scores.dim();
    let mut row = vec![0.0; dim];
    let mut total = 0.0;
    for i in 0..n {
        scores.row_into(i, &mut row)?;
        for j in 0..dim {
            let g = row[j] * (q_hat[i] - baseline.value(i, j));
            total += g * g;
        }
    }
    Ok(total / n as f64)
}

/// Mean squared error of chunked mean estimates against a reference
/// gradient. The rows are split into `chunks` contiguous pieces; each piece
/// contributes ||mean(piece) - reference||^2. Returns (mean, standard error).
pub fn mse_vs_reference(
    scores: &impl ScoreSource,
    q_hat: &[f64],
    baseline: &BaselineValues,
    reference: &[f64],
    chunks: usize,
) -> Result<(f64, f64)> {
    let n = scores.len();
    let dim = scores.dim();
    assert_eq!(reference.len(), dim, "reference gradient has wrong dimension");
    assert!(chunks >= 2 && n >= 2 * chunks, "need at least two samples per chunk");
    let mut row = vec![0.0; dim];
    let mut errs = Vec::with_capacity(chunks);
    let base = n / chunks;
    let mut start = 0;
    for c in 0..chunks {
        let extra = usize::from(c < n % chunks);
        let end = start + base + extra;
        let mut mean = vec![0.0; dim];
        for i in start..end {
            scores.row_into(i, &mut row)?;
            for j in 0..dim {
                mean[j] += row[j] * (q_hat[i] - baseline.value(i, j));
            }
        }
        let inv = 1.0 / (end - start) as f64;
        let err: f64 = mean.iter().zip(reference).map(|(m, r)| (m * inv - r) * (m * inv - r)).sum();
        errs.push(err);
        start = end;
    }
    let m = crate::linalg::mean(&errs);
    let se = (crate::linalg::sample_variance(&errs) / errs.len() as f64).sqrt();
    Ok((m, se))
}
