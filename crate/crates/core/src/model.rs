//! Feedforward sigmoid network with a softmax / cross-entropy output.
//!
//! Parameters live in one flat vector: for each layer in order, the weight
//! matrix (`n_out × n_in`, row-major) followed by the bias vector. Losses and
//! gradients are *sums* over frames so that results over disjoint batches add.
//!
//! Curvature is the Gauss-Newton matrix `G = Jᵀ H_L J`, where `J` is the
//! Jacobian of the logits with respect to the parameters and
//! `H_L = diag(p) − p pᵀ` is the softmax cross-entropy Hessian per frame.
//! `G·v` is computed with a forward R-pass followed by an ordinary backward
//! pass, so `G` is never formed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, gemm, Layout};

pub type Label = u16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    pub init_seed: u64,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, init_seed: u64) -> Result<Self> {
        let spec = NetworkSpec { layer_sizes, init_seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "network needs at least 2 layers, got {}",
                self.layer_sizes.len()
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.classes() > Label::MAX as usize + 1 {
            return Err(Error::Config(format!(
                "at most {} output classes supported",
                Label::MAX as usize + 1
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Offsets of (weights, biases) of layer `l` inside the flat vector.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for k in 0..l {
            off += (self.layer_sizes[k] + 1) * self.layer_sizes[k + 1];
        }
        (off, off + self.layer_sizes[l] * self.layer_sizes[l + 1])
    }
}

pub fn param_count(spec: &NetworkSpec) -> usize {
    spec.layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

/// Flat parameter vector `θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// Uniform `[-1/√fan_in, 1/√fan_in]` weights, zero biases.
pub fn init_params(spec: &NetworkSpec) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut theta = vec![0.0; param_count(spec)];
    for l in 0..spec.num_layers() {
        let (w_off, b_off) = spec.layer_offsets(l);
        let r = 1.0 / (spec.layer_sizes[l] as f64).sqrt();
        for w in &mut theta[w_off..b_off] {
            *w = rng.random_range(-r..=r);
        }
    }
    ParamVector(theta)
}

/// Borrowed frames: `features` is `frame_count × dim`, row-major.
#[derive(Clone, Copy, Debug)]
pub struct Frames<'a> {
    pub features: &'a [f64],
    pub labels: &'a [Label],
    pub dim: usize,
}

impl<'a> Frames<'a> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Owned batch of labelled frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBatch {
    pub features: Vec<f64>,
    pub labels: Vec<Label>,
    pub dim: usize,
    pub source_utterance_ids: Vec<u64>,
}

impl FrameBatch {
    pub fn new(features: Vec<f64>, labels: Vec<Label>, dim: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Config(format!(
                "{} feature values do not form {} frames of dim {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        Ok(FrameBatch {
            features,
            labels,
            dim,
            source_utterance_ids: Vec::new(),
        })
    }

    pub fn frame_count(&self) -> usize {
        self.labels.len()
    }

    pub fn frames(&self) -> Frames<'_> {
        Frames {
            features: &self.features,
            labels: &self.labels,
            dim: self.dim,
        }
    }

    /// Appends another batch of the same dimension.
    pub fn extend(&mut self, other: Frames<'_>) {
        assert_eq!(self.dim, other.dim);
        self.features.extend_from_slice(other.features);
        self.labels.extend_from_slice(other.labels);
    }
}

/// Summed cross-entropy (nats) over `frame_count` frames.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossValue {
    pub total: f64,
    pub frame_count: usize,
}

impl LossValue {
    pub fn mean(&self) -> f64 {
        if self.frame_count == 0 {
            0.0
        } else {
            self.total / self.frame_count as f64
        }
    }

    pub fn add(&mut self, other: &LossValue) {
        self.total += other.total;
        self.frame_count += other.frame_count;
    }
}

fn check_dims(spec: &NetworkSpec, params: &[f64], frames: &Frames<'_>) -> Result<()> {
    let n = param_count(spec);
    if params.len() != n {
        return Err(Error::Config(format!(
            "parameter vector has length {}, network expects {}",
            params.len(),
            n
        )));
    }
    if frames.dim != spec.input_dim() {
        return Err(Error::Config(format!(
            "frames have dim {}, network input is {}",
            frames.dim,
            spec.input_dim()
        )));
    }
    if frames.features.len() != frames.len() * frames.dim {
        return Err(Error::Config("feature matrix does not match label count".into()));
    }
    let k = spec.classes();
    if let Some(&bad) = frames.labels.iter().find(|&&y| y as usize >= k) {
        return Err(Error::Config(format!("label {bad} outside [0, {k})")));
    }
    Ok(())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations of one forward pass. `acts[0]` is the input; the last entry
/// holds softmax probabilities.
struct Forward {
    acts: Vec<Vec<f64>>,
    loss: f64,
}

fn forward(spec: &NetworkSpec, params: &[f64], frames: &Frames<'_>) -> Forward {
    let b = frames.len();
    let nl = spec.num_layers();
    let mut acts = Vec::with_capacity(nl + 1);
    acts.push(frames.features.to_vec());
    for l in 0..nl {
        let (n_in, n_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let (w_off, b_off) = spec.layer_offsets(l);
        let mut z = vec![0.0; b * n_out];
        gemm(
            1.0,
            &acts[l],
            Layout::row_major(b, n_in),
            &params[w_off..b_off],
            Layout::row_major(n_out, n_in).t(),
            0.0,
            &mut z,
            Layout::row_major(b, n_out),
        );
        let bias = &params[b_off..b_off + n_out];
        for row in z.chunks_exact_mut(n_out) {
            for (zi, bi) in row.iter_mut().zip(bias) {
                *zi += bi;
            }
        }
        if l + 1 < nl {
            z.iter_mut().for_each(|v| *v = sigmoid(*v));
        }
        acts.push(z);
    }

    let k = spec.classes();
    let mut loss = 0.0;
    let out = acts.last_mut().unwrap();
    for (row, &y) in out.chunks_exact_mut(k).zip(frames.labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y as usize];
        row.iter_mut().for_each(|z| *z = (*z - lse).exp());
    }
    Forward { acts, loss }
}

/// Back-propagates output deltas `delta` (`B × K`) and accumulates `Jᵀ·delta`
/// into `out`.
fn backward(spec: &NetworkSpec, params: &[f64], acts: &[Vec<f64>], mut delta: Vec<f64>, out: &mut [f64]) {
    let b = acts[0].len() / spec.input_dim();
    for l in (0..spec.num_layers()).rev() {
        let (n_in, n_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let (w_off, b_off) = spec.layer_offsets(l);
        gemm(
            1.0,
            &delta,
            Layout::row_major(b, n_out).t(),
            &acts[l],
            Layout::row_major(b, n_in),
            1.0,
            &mut out[w_off..b_off],
            Layout::row_major(n_out, n_in),
        );
        let gb = &mut out[b_off..b_off + n_out];
        for row in delta.chunks_exact(n_out) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        if l == 0 {
            break;
        }
        let mut below = vec![0.0; b * n_in];
        gemm(
            1.0,
            &delta,
            Layout::row_major(b, n_out),
            &params[w_off..b_off],
            Layout::row_major(n_out, n_in),
            0.0,
            &mut below,
            Layout::row_major(b, n_in),
        );
        for (d, a) in below.iter_mut().zip(&acts[l]) {
            *d *= a * (1.0 - a);
        }
        delta = below;
    }
}

pub fn forward_loss(spec: &NetworkSpec, params: &ParamVector, frames: Frames<'_>) -> Result<LossValue> {
    check_dims(spec, params.as_slice(), &frames)?;
    let fwd = forward(spec, params.as_slice(), &frames);
    Ok(LossValue {
        total: fwd.loss,
        frame_count: frames.len(),
    })
}

/// Loss and its exact gradient in a single forward/backward pass.
pub fn loss_and_gradient(
    spec: &NetworkSpec,
    params: &ParamVector,
    frames: Frames<'_>,
) -> Result<(LossValue, ParamVector)> {
    check_dims(spec, params.as_slice(), &frames)?;
    let theta = params.as_slice();
    let mut grad = vec![0.0; theta.len()];
    if frames.is_empty() {
        return Ok((LossValue::default(), ParamVector(grad)));
    }
    let fwd = forward(spec, theta, &frames);
    let k = spec.classes();
    let mut delta = fwd.acts.last().unwrap().clone();
    for (row, &y) in delta.chunks_exact_mut(k).zip(frames.labels) {
        row[y as usize] -= 1.0;
    }
    backward(spec, theta, &fwd.acts, delta, &mut grad);
    let loss = LossValue {
        total: fwd.loss,
        frame_count: frames.len(),
    };
    if !fwd.loss.is_finite() || !linalg::all_finite(&grad) {
        return Err(Error::numeric("non-finite loss or gradient"));
    }
    Ok((loss, ParamVector(grad)))
}

pub fn gradient(spec: &NetworkSpec, params: &ParamVector, frames: Frames<'_>) -> Result<ParamVector> {
    loss_and_gradient(spec, params, frames).map(|(_, g)| g)
}

/// Forward activations cached for repeated Gauss-Newton products at fixed `θ`.
pub struct GaussNewton<'s> {
    spec: &'s NetworkSpec,
    params: Vec<f64>,
    acts: Vec<Vec<f64>>,
    frames: usize,
}

impl<'s> GaussNewton<'s> {
    pub fn new(spec: &'s NetworkSpec, params: &ParamVector, frames: Frames<'_>) -> Result<Self> {
        check_dims(spec, params.as_slice(), &frames)?;
        let fwd = forward(spec, params.as_slice(), &frames);
        Ok(GaussNewton {
            spec,
            params: params.0.clone(),
            acts: fwd.acts,
            frames: frames.len(),
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    /// `G·v` summed over the cached frames (no damping).
    pub fn apply_undamped(&self, v: &[f64]) -> Result<Vec<f64>> {
        let spec = self.spec;
        if v.len() != self.params.len() {
            return Err(Error::Config(format!(
                "direction has length {}, expected {}",
                v.len(),
                self.params.len()
            )));
        }
        let mut out = vec![0.0; v.len()];
        let b = self.frames;
        if b == 0 {
            return Ok(out);
        }
        let nl = spec.num_layers();
        // Forward R-pass: r_act holds R{a_l}; r_z ends as R{logits} = J·v.
        let mut r_act: Vec<f64> = Vec::new();
        let mut r_z = Vec::new();
        for l in 0..nl {
            let (n_in, n_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
            let (w_off, b_off) = spec.layer_offsets(l);
            let mut z = vec![0.0; b * n_out];
            gemm(
                1.0,
                &self.acts[l],
                Layout::row_major(b, n_in),
                &v[w_off..b_off],
                Layout::row_major(n_out, n_in).t(),
                0.0,
                &mut z,
                Layout::row_major(b, n_out),
            );
            if l > 0 {
                gemm(
                    1.0,
                    &r_act,
                    Layout::row_major(b, n_in),
                    &self.params[w_off..b_off],
                    Layout::row_major(n_out, n_in).t(),
                    1.0,
                    &mut z,
                    Layout::row_major(b, n_out),
                );
            }
            let vb = &v[b_off..b_off + n_out];
            for row in z.chunks_exact_mut(n_out) {
                for (zi, bi) in row.iter_mut().zip(vb) {
                    *zi += bi;
                }
            }
            if l + 1 < nl {
                for (zi, a) in z.iter_mut().zip(&self.acts[l + 1]) {
                    *zi *= a * (1.0 - a);
                }
                r_act = z;
            } else {
                r_z = z;
            }
        }
        // H_L·(J v) per frame: p ⊙ u − p (p·u)
        let k = spec.classes();
        let probs = self.acts.last().unwrap();
        for (u, p) in r_z.chunks_exact_mut(k).zip(probs.chunks_exact(k)) {
            let pu = linalg::dot(p, u);
            for (ui, pi) in u.iter_mut().zip(p) {
                *ui = pi * (*ui - pu);
            }
        }
        backward(spec, &self.params, &self.acts, r_z, &mut out);
        Ok(out)
    }

    /// `(G + λI)·v`.
    pub fn apply(&self, v: &[f64], lambda: f64) -> Result<Vec<f64>> {
        let mut out = self.apply_undamped(v)?;
        linalg::axpy(lambda, v, &mut out);
        if !linalg::all_finite(&out) {
            return Err(Error::numeric("non-finite Gauss-Newton product"));
        }
        Ok(out)
    }
}

/// `(G(θ) + λI)·v` over `frames`.
pub fn gnv_product(
    spec: &NetworkSpec,
    params: &ParamVector,
    frames: Frames<'_>,
    v: &ParamVector,
    lambda: f64,
) -> Result<ParamVector> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("damping must be nonnegative, got {lambda}")));
    }
    let gn = GaussNewton::new(spec, params, frames)?;
    gn.apply(v.as_slice(), lambda).map(ParamVector)
}

/// Class scores (softmax probabilities) for each frame.
pub fn predict(spec: &NetworkSpec, params: &ParamVector, frames: Frames<'_>) -> Result<Vec<f64>> {
    check_dims(spec, params.as_slice(), &frames)?;
    let fwd = forward(spec, params.as_slice(), &frames);
    Ok(fwd.acts.into_iter().last().unwrap())
}

/// Fraction of frames whose arg-max class equals the label.
pub fn accuracy(spec: &NetworkSpec, params: &ParamVector, frames: Frames<'_>) -> Result<f64> {
    if frames.is_empty() {
        return Ok(0.0);
    }
    let probs = predict(spec, params, frames)?;
    let k = spec.classes();
    let hits = probs
        .chunks_exact(k)
        .zip(frames.labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc },
                )
                .0;
            best == y as usize
        })
        .count();
    Ok(hits as f64 / frames.len() as f64)
}
