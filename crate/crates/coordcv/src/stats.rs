//! Statistical utilities: chi-square interval for the trace variance,
//! Gauss-Hermite quadrature, a streaming per-coordinate variance accumulator,
//! and plain histograms.

use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF};

/// Chi-square quantile. The generic inversion in the distribution library is
/// a bounded search whose absolute tolerance is too loose deep in the left
/// tail, so its estimate is polished with Newton steps on the exact CDF.
pub fn chi2_quantile(dof: f64, p: f64) -> f64 {
    assert!(dof > 0.0 && p > 0.0 && p < 1.0, "bad chi2 quantile args: dof {dof}, p {p}");
    let chi = ChiSquared::new(dof).expect("valid dof");
    let mut x = chi.inverse_cdf(p).max(f64::MIN_POSITIVE);
    for _ in 0..40 {
        let density = chi.pdf(x);
        if density <= 0.0 {
            break;
        }
        let step = (chi.cdf(x) - p) / density;
        let next = (x - step).max(x * 0.1);
        if (next - x).abs() <= 1e-14 * x.abs() {
            x = next;
            break;
        }
        x = next;
    }
    x
}

/// Two-sided 95% confidence interval for a variance estimate `v` computed
/// from `n` samples, using the chi-square distribution with n - 1 degrees of
/// freedom: [(n-1) v / q(0.975), (n-1) v / q(0.025)].
///
/// Applied to a trace variance (a sum of per-coordinate variances) this
/// treats the sum as if it had n - 1 degrees of freedom, which understates
/// the effective sample size; the interval is conservative in width, not a
/// calibrated joint interval.
pub fn variance_ci_95(v: f64, n: usize) -> (f64, f64) {
    assert!(n >= 2, "variance CI needs at least 2 samples, got {n}");
    let dof = (n - 1) as f64;
    let q_hi = chi2_quantile(dof, 0.975);
    let q_lo = chi2_quantile(dof, 0.025);
    (dof * v / q_hi, dof * v / q_lo)
}

// ─── Streaming per-coordinate variance ──────────────────────────────────────

/// Welford accumulator over d-dimensional rows. Tracks the per-coordinate
/// mean and sum of squared deviations, so the trace variance (sum of
/// per-coordinate unbiased variances) and the mean vector come out of one
/// streaming pass.
#[derive(Clone, Debug)]
pub struct TraceVarAccum {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl TraceVarAccum {
    pub fn new(dim: usize) -> Self {
        TraceVarAccum { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.mean.len(), "row has {} entries, accumulator has {}", row.len(), self.mean.len());
        self.n += 1;
        let inv = 1.0 / self.n as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(row) {
            let d1 = x - *m;
            *m += d1 * inv;
            *s += d1 * (x - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Sum over coordinates of the unbiased per-coordinate variance.
    pub fn trace_variance(&self) -> f64 {
        assert!(self.n >= 2, "trace variance needs at least 2 rows, got {}", self.n);
        self.m2.iter().sum::<f64>() / (self.n - 1) as f64
    }

    pub fn trace_variance_with_ci(&self) -> (f64, (f64, f64)) {
        let v = self.trace_variance();
        (v, variance_ci_95(v, self.n))
    }
}

// ─── Gauss-Hermite quadrature ───────────────────────────────────────────────

/// Nodes and weights for n-point Gauss-Hermite quadrature in the physicists'
/// convention (weight exp(-x^2)); the weights sum to sqrt(pi). Roots are
/// found by Newton iteration on the orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2, "need at least 2 quadrature nodes");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = (n + 1) / 2;
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = std::f64::consts::PI.powf(-0.25);
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Expectation of `f` under a scalar Gaussian N(mu, sigma^2) by Gauss-Hermite
/// quadrature with the given nodes and weights.
pub fn gh_expectation(nodes: &[f64], weights: &[f64], mu: f64, sigma: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    let mut acc = 0.0;
    for (&xi, &wi) in nodes.iter().zip(weights) {
        acc += wi * f(mu + std::f64::consts::SQRT_2 * sigma * xi);
    }
    acc * inv_sqrt_pi
}

// ─── Histogram ──────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub n: usize,
}

impl Histogram {
    pub fn from_values(values: &[f64], bins: usize) -> Self {
        assert!(bins >= 1, "need at least one bin");
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() || !(hi > lo) {
            let base = if values.is_empty() { 0.0 } else { lo };
            let mut counts = vec![0u64; bins];
            counts[0] = values.len() as u64;
            return Histogram { lo: base, hi: base + 1.0, counts, n: values.len() };
        }
        let mut counts = vec![0u64; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Histogram { lo, hi, counts, n: values.len() }
    }

    pub fn bin_edges(&self, k: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + k as f64 * width, self.lo + (k + 1) as f64 * width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Reference quantiles from standard chi-square tables.
    const TABLE: &[(f64, f64, f64)] = &[
        // dof, q(0.975), q(0.025)
        (1.0, 5.02389, 0.000982069),
        (4.0, 11.1433, 0.484419),
        (9.0, 19.0228, 2.70039),
        (100.0, 129.561, 74.2219),
    ];

    #[test]
    fn chi_square_quantiles_match_reference_tables() {
        for &(dof, hi, lo) in TABLE {
            assert_relative_eq!(chi2_quantile(dof, 0.975), hi, max_relative = 1e-4);
            assert_relative_eq!(chi2_quantile(dof, 0.025), lo, max_relative = 1e-4);
        }
    }

    #[test]
    fn variance_ci_reproduces_worked_example() {
        // n = 101 samples, v = 1.0: [100/129.561, 100/74.222]
        let (lo, hi) = variance_ci_95(1.0, 101);
        assert_relative_eq!(lo, 0.7718, max_relative = 1e-3);
        assert_relative_eq!(hi, 1.3474, max_relative = 1e-3);
        assert!(lo < 1.0 && 1.0 < hi);
    }

    #[test]
    fn trace_accum_matches_direct_computation() {
        use crate::linalg::sample_variance;
        let rows = [
            vec![1.0, -2.0, 0.5],
            vec![0.0, 1.0, 2.5],
            vec![-1.0, 4.0, -0.5],
            vec![2.0, 0.0, 1.5],
        ];
        let mut acc = TraceVarAccum::new(3);
        for r in &rows {
            acc.push(r);
        }
        let expect: f64 = (0..3)
            .map(|j| sample_variance(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
            .sum();
        assert_relative_eq!(acc.trace_variance(), expect, max_relative = 1e-12);
        assert_relative_eq!(acc.mean()[1], 0.75, max_relative = 1e-12);
    }

    #[test]
    fn gauss_hermite_weights_sum_to_sqrt_pi() {
        for n in [2, 5, 16, 64, 101] {
            let (x, w) = gauss_hermite(n);
            assert_eq!(x.len(), n);
            let total: f64 = w.iter().sum();
            assert_relative_eq!(total, std::f64::consts::PI.sqrt(), max_relative = 1e-12);
        }
    }

    #[test]
    fn gauss_hermite_integrates_gaussian_moments_exactly() {
        let (x, w) = gauss_hermite(64);
        let (mu, sigma) = (0.7, 1.3);
        let m0 = gh_expectation(&x, &w, mu, sigma, |_| 1.0);
        let m1 = gh_expectation(&x, &w, mu, sigma, |a| a);
        let m2 = gh_expectation(&x, &w, mu, sigma, |a| a * a);
        let m4 = gh_expectation(&x, &w, mu, sigma, |a| (a - mu).powi(4));
        assert_relative_eq!(m0, 1.0, max_relative = 1e-12);
        assert_relative_eq!(m1, mu, max_relative = 1e-12);
        assert_relative_eq!(m2, mu * mu + sigma * sigma, max_relative = 1e-12);
        assert_relative_eq!(m4, 3.0 * sigma.powi(4), max_relative = 1e-10);
    }

    #[test]
    fn histogram_counts_cover_all_values() {
        let vals = [0.0, 0.1, 0.5, 0.9, 1.0, 1.0];
        let h = Histogram::from_values(&vals, 4);
        assert_eq!(h.counts.iter().sum::<u64>(), 6);
        assert_eq!(h.n, 6);
        let h = Histogram::from_values(&[2.0, 2.0], 3);
        assert_eq!(h.counts.iter().sum::<u64>(), 2);
    }
}
