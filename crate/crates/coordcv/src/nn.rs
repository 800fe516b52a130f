//! Multilayer perceptron with explicit gradient tapes and flat parameter
//! views.
//!
//! Hidden layers use TanH, the output layer is linear. Forward passes return a
//! `Tape` holding the activations needed for the backward pass. Per-example
//! backward passes take an arbitrary seed vector `u` and return
//! d(u . output)/d(params) as a flat vector laid out per `ParamLayout`
//! (weights then bias, layer by layer). Tapes are invalidated whenever the
//! parameters change; using a stale tape is an error, not a silent wrong
//! answer.

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// ─── Parameter layout ───────────────────────────────────────────────────────

/// One named contiguous segment of the flat parameter vector. A segment
/// corresponds to a parameter tensor (a weight matrix, a bias vector, or an
/// extra block like a policy's log-std).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Map from flat coordinates to named tensors.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    total: usize,
}

impl ParamLayout {
    pub fn new(segments: Vec<Segment>) -> Self {
        let mut total = 0;
        for s in &segments {
            assert_eq!(s.offset, total, "segment {} not contiguous", s.name);
            total += s.len;
        }
        ParamLayout { segments, total }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    /// Index of the segment containing flat coordinate `j`.
    pub fn segment_of(&self, j: usize) -> usize {
        assert!(j < self.total, "coordinate {j} out of range ({} params)", self.total);
        match self.segments.binary_search_by(|s| s.offset.cmp(&j)) {
            Ok(k) => k,
            Err(k) => k - 1,
        }
    }

    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        let s = &self.segments[k];
        s.offset..s.offset + s.len
    }

    /// Appends an extra named block (e.g. log_std) and returns the new layout.
    pub fn with_extra(&self, name: &str, len: usize) -> ParamLayout {
        let mut segments = self.segments.clone();
        segments.push(Segment { name: name.to_string(), offset: self.total, len });
        ParamLayout::new(segments)
    }
}

// ─── MLP ────────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
struct Layer {
    /// (out_dim, in_dim)
    w: Matrix,
    b: Vec<f64>,
}

/// Fully connected network: TanH on hidden layers, linear output.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<Layer>,
    version: u64,
}

/// Activations recorded by a forward pass, consumed by the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    version: u64,
    input: Vec<f64>,
    /// Post-activation output of every layer; the last entry is the network
    /// output. TanH derivatives are recovered from these as 1 - post^2.
    post: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("tape from a network with no layers")
    }
}

impl Mlp {
    /// `dims` is [input, hidden..., output]; `gains` holds one scale per
    /// weight layer. Weights get an orthogonal-like init (Gram-Schmidt on a
    /// Gaussian draw, scaled by the gain); biases start at zero.
    pub fn new(dims: &[usize], gains: &[f64], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        assert_eq!(gains.len(), dims.len() - 1, "one gain per weight layer");
        let layers = dims
            .windows(2)
            .zip(gains)
            .map(|(io, &gain)| Layer {
                w: orthogonal_init(io[1], io[0], gain, rng),
                b: vec![0.0; io[1]],
            })
            .collect();
        Mlp { dims: dims.to_vec(), layers, version: 0 }
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|io| io[0] * io[1] + io[1]).sum()
    }

    pub fn layout(&self) -> ParamLayout {
        let mut segments = Vec::with_capacity(2 * self.layers.len());
        let mut offset = 0;
        for (i, io) in self.dims.windows(2).enumerate() {
            let wlen = io[0] * io[1];
            segments.push(Segment { name: format!("l{i}.w"), offset, len: wlen });
            offset += wlen;
            segments.push(Segment { name: format!("l{i}.b"), offset, len: io[1] });
            offset += io[1];
        }
        ParamLayout::new(segments)
    }

    /// Output without a tape; use for inference-only evaluation.
    pub fn infer(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim(), "input has {} entries, net expects {}", x.len(), self.in_dim());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.b.len()];
            layer.w.matvec(&cur, &mut next);
            for (n, &b) in next.iter_mut().zip(&layer.b) {
                *n += b;
                if l != last {
                    *n = n.tanh();
                }
            }
            cur = next;
        }
        cur
    }

    pub fn infer_scalar(&self, x: &[f64]) -> f64 {
        assert_eq!(self.out_dim(), 1, "infer_scalar on a net with {} outputs", self.out_dim());
        self.infer(x)[0]
    }

    /// Forward pass recording activations. The returned tape is tied to the
    /// current parameter version.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Tape) {
        assert_eq!(x.len(), self.in_dim(), "input has {} entries, net expects {}", x.len(), self.in_dim());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.b.len()];
            layer.w.matvec(&cur, &mut next);
            for (n, &b) in next.iter_mut().zip(&layer.b) {
                *n += b;
                if l != last {
                    *n = n.tanh();
                }
            }
            post.push(next.clone());
            cur = next;
        }
        let tape = Tape { version: self.version, input: x.to_vec(), post };
        (cur, tape)
    }

    /// Accumulates d(seed . output)/d(params) into `out` (flat, layout
    /// order). Errors if the tape predates the current parameters.
    pub fn backward_per_example(&self, tape: &Tape, seed: &[f64], out: &mut [f64]) -> Result<()> {
        if tape.version != self.version {
            return Err(Error::StaleTape);
        }
        assert_eq!(seed.len(), self.out_dim(), "seed has {} entries, net has {} outputs", seed.len(), self.out_dim());
        assert_eq!(out.len(), self.param_count(), "gradient buffer has {} entries, net has {} params", out.len(), self.param_count());

        // Segment offsets: [w0, b0, w1, b1, ...]
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for io in self.dims.windows(2) {
            offsets.push(off);
            off += io[0] * io[1] + io[1];
        }

        let mut delta = seed.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input: &[f64] = if l == 0 { &tape.input } else { &tape.post[l - 1] };
            let (in_dim, out_dim) = (layer.w.cols(), layer.w.rows());
            let woff = offsets[l];
            let boff = woff + in_dim * out_dim;
            // dW = delta (x) input, db = delta
            for (r, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    let grad_row = &mut out[woff + r * in_dim..woff + (r + 1) * in_dim];
                    for (g, &x) in grad_row.iter_mut().zip(input) {
                        *g = d.mul_add(x, *g);
                    }
                }
                out[boff + r] += d;
            }
            if l > 0 {
                let mut prev = vec![0.0; in_dim];
                layer.w.matvec_t_acc(&delta, &mut prev);
                // input here is tanh(pre), so tanh' = 1 - input^2
                for (p, &a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
        Ok(())
    }

    pub fn grad_per_example(&self, tape: &Tape, seed: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.param_count()];
        self.backward_per_example(tape, seed, &mut out)?;
        Ok(out)
    }

    /// Flat parameter vector in layout order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.w.data());
            out.extend_from_slice(&layer.b);
        }
        out
    }

    /// Installs a flat parameter vector; invalidates outstanding tapes.
    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat vector has {} entries, net has {} params", flat.len(), self.param_count());
        let mut off = 0;
        for layer in &mut self.layers {
            let wlen = layer.w.rows() * layer.w.cols();
            layer.w.data_mut().copy_from_slice(&flat[off..off + wlen]);
            off += wlen;
            let blen = layer.b.len();
            layer.b.copy_from_slice(&flat[off..off + blen]);
            off += blen;
        }
        self.version += 1;
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.is_finite() && l.b.iter().all(|v| v.is_finite()))
    }
}

/// Orthogonal-like init: draws a Gaussian matrix and orthonormalizes the
/// shorter side by modified Gram-Schmidt, then scales by `gain`. Degenerate
/// pivots (vanishing norm) are re-drawn.
fn orthogonal_init(out_dim: usize, in_dim: usize, gain: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let (n, m) = (out_dim.min(in_dim), out_dim.max(in_dim));
    // n orthonormal rows of length m
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for u in &basis {
            let c = dot(&v, u);
            for (vi, &ui) in v.iter_mut().zip(u) {
                *vi -= c * ui;
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-10 {
            continue;
        }
        for vi in &mut v {
            *vi /= norm;
        }
        basis.push(v);
    }
    if out_dim <= in_dim {
        Matrix::from_fn(out_dim, in_dim, |i, j| gain * basis[i][j])
    } else {
        Matrix::from_fn(out_dim, in_dim, |i, j| gain * basis[j][i])
    }
}
