//! The Twincher invertible transform.
//!
//! `T_theta` maps an observation `y` to a latent pair `(u, h)` where `u`
//! (the first `n_p` coordinates) is trained to align bijectively with the
//! generative parameters and `h` carries the residual variability. The
//! transform is a composition of `n_layers` blocks, each of which applies
//!
//! 1. a fixed orthogonal rotation (seeded, non-trainable, det = +1),
//! 2. a coupling on an alternating half-split: the updated half
//!    (`m = n_y/2` components) is scaled by `exp(s)` and shifted by `t`,
//!    where both are read off a small shared conditioner over the other
//!    half — `hidden = tanh(W1 x_c + b1)`,
//!    `s = (s_max/n_layers) * tanh(W2s hidden)`, `t = W2t hidden + b2t`.
//!
//! The shift passes through a nonlinearity (the conditioner hidden layer)
//! but never touches the volume: the coupling Jacobian is triangular with
//! diagonal `exp(s)`, so the log-determinant is the sum of log-scales.
//! Every log-scale is bounded by `s_max/n_layers` and only `m` components
//! are scaled per layer, hence
//! `|log det dz/dy| <= m * s_max <= n_y * s_max` uniformly in `theta` and
//! `|det| >= exp(-s_max * n_y)`: the transform stays invertible for every
//! admissible parameter value.

use serde::Deserialize;
use std::path::Path;

use nalgebra::DMatrix;

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Current on-disk format for flow checkpoints.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Hidden width of each coupling's conditioner.
const COND_HIDDEN: usize = 2;

/// Output of [`TwincherModel::transform`]: the distilled latent `u` and the
/// residual latent `h`; their concatenation is the full transform output.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub u: Vec<f64>,
    pub h: Vec<f64>,
}

impl LatentPair {
    pub fn z(&self) -> Vec<f64> {
        self.u.iter().chain(self.h.iter()).copied().collect()
    }
}

/// Geometry of one coupling block.
#[derive(Clone, Copy, Debug)]
struct LayerShape {
    /// First index of the updated half (the conditioning half is the rest).
    upd_start: usize,
    upd_len: usize,
    cond_start: usize,
    cond_len: usize,
    /// Offset of this layer's parameters in the flat vector.
    theta_offset: usize,
}

/// Invertible observation-to-latent transform with exact Jacobians and
/// parameter gradients.
#[derive(Clone, Debug)]
pub struct TwincherModel {
    n_y: usize,
    n_p: usize,
    n_layers: usize,
    s_max: f64,
    arch_seed: u64,
    /// Per-coupling log-scale bound, `s_max / n_layers`.
    scale_bound: f64,
    /// Fixed rotations, row-major `n_y x n_y`, det = +1.
    rotations: Vec<Vec<f64>>,
    shapes: Vec<LayerShape>,
    theta: Vec<f64>,
}

impl TwincherModel {
    pub fn new(
        arch_seed: u64,
        n_y: usize,
        n_p: usize,
        n_layers: usize,
        s_max: f64,
        init_scale: f64,
    ) -> Result<Self> {
        if n_p == 0 || n_p >= n_y {
            return Err(Error::Contract(format!(
                "need 1 <= n_p < n_y, got n_p = {n_p}, n_y = {n_y}"
            )));
        }
        if n_layers == 0 {
            return Err(Error::Contract("n_layers must be >= 1".into()));
        }
        if !(s_max > 0.0) {
            return Err(Error::Contract(format!("s_max must be > 0, got {s_max}")));
        }
        if !(init_scale >= 0.0) {
            return Err(Error::Contract(format!(
                "init_scale must be >= 0, got {init_scale}"
            )));
        }

        let m = n_y / 2;
        let c = n_y - m;
        let h = COND_HIDDEN;
        let stride = h * c + h + 2 * m * h + m;
        let mut shapes = Vec::with_capacity(n_layers);
        for layer in 0..n_layers {
            let (upd_start, cond_start) = if layer % 2 == 0 { (c, 0) } else { (0, m) };
            shapes.push(LayerShape {
                upd_start,
                upd_len: m,
                cond_start,
                cond_len: c,
                theta_offset: layer * stride,
            });
        }

        let mix_root = Stream::new(arch_seed, "twincher.mixing");
        let rotations = (0..n_layers)
            .map(|layer| random_rotation(n_y, &mut mix_root.substream(layer as u64)))
            .collect();

        let mut init = Stream::new(arch_seed, "twincher.init");
        let theta = (0..n_layers * stride)
            .map(|_| {
                if init_scale == 0.0 {
                    0.0
                } else {
                    init.uniform(-init_scale, init_scale)
                }
            })
            .collect();

        Ok(Self {
            n_y,
            n_p,
            n_layers,
            s_max,
            arch_seed,
            scale_bound: s_max / n_layers as f64,
            rotations,
            shapes,
            theta,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.n_y
    }

    pub fn latent_dim(&self) -> usize {
        self.n_p
    }

    pub fn layer_count(&self) -> usize {
        self.n_layers
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    pub fn arch_seed(&self) -> u64 {
        self.arch_seed
    }

    /// Exact number of trainable parameters.
    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::Contract(format!(
                "theta length {} != {}",
                theta.len(),
                self.theta.len()
            )));
        }
        self.theta = theta;
        Ok(())
    }

    fn check_input(&self, y: &[f64], what: &str) -> Result<()> {
        if y.len() != self.n_y {
            return Err(Error::Contract(format!(
                "{what} length {} != n_y = {}",
                y.len(),
                self.n_y
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(())
    }

    /// `(u, h) = T_theta(y)`.
    pub fn transform(&self, y: &[f64]) -> Result<LatentPair> {
        self.check_input(y, "transform input")?;
        let z = forward_pass(self, &self.theta, y);
        Ok(LatentPair {
            u: z[..self.n_p].to_vec(),
            h: z[self.n_p..].to_vec(),
        })
    }

    /// Distilled latent only.
    pub fn latent(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.transform(y)?.u)
    }

    /// Exact algebraic inverse: `y` with `T_theta(y) = (u, h)`.
    pub fn inverse_transform(&self, u: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.n_p || h.len() != self.n_y - self.n_p {
            return Err(Error::Contract(format!(
                "latent lengths ({}, {}) != ({}, {})",
                u.len(),
                h.len(),
                self.n_p,
                self.n_y - self.n_p
            )));
        }
        let mut state: Vec<f64> = u.iter().chain(h.iter()).copied().collect();
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("inverse_transform input".into()));
        }

        for layer in (0..self.n_layers).rev() {
            let shape = self.shapes[layer];
            let (s, t) = self.coupling_terms(&self.theta, shape, &state);
            for i in 0..shape.upd_len {
                state[shape.upd_start + i] = (state[shape.upd_start + i] - t[i]) * (-s[i]).exp();
            }
            // Rotations are orthogonal: the inverse is the transpose.
            let rot = &self.rotations[layer];
            let mut prev = vec![0.0; self.n_y];
            for (i, p) in prev.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in 0..self.n_y {
                    acc += rot[k * self.n_y + i] * state[k];
                }
                *p = acc;
            }
            state = prev;
        }
        Ok(state)
    }

    /// Scale and shift of one coupling, computed from the conditioning half.
    fn coupling_terms(&self, theta: &[f64], shape: LayerShape, state: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = shape.upd_len;
        let c = shape.cond_len;
        let h = COND_HIDDEN;
        let (w1, rest) = theta[shape.theta_offset..].split_at(h * c);
        let (b1, rest) = rest.split_at(h);
        let (w2s, rest) = rest.split_at(m * h);
        let (w2t, rest) = rest.split_at(m * h);
        let b2t = &rest[..m];
        let cond = &state[shape.cond_start..shape.cond_start + c];
        let mut hidden = vec![0.0; h];
        for (j, hv) in hidden.iter_mut().enumerate() {
            let mut acc = b1[j];
            for k in 0..c {
                acc += w1[j * c + k] * cond[k];
            }
            *hv = acc.tanh();
        }
        let mut s = vec![0.0; m];
        let mut t = vec![0.0; m];
        for i in 0..m {
            let mut raw = 0.0;
            let mut shift = b2t[i];
            for j in 0..h {
                raw += w2s[i * h + j] * hidden[j];
                shift += w2t[i * h + j] * hidden[j];
            }
            s[i] = self.scale_bound * raw.tanh();
            t[i] = shift;
        }
        (s, t)
    }

    /// Exact `dz/dy` as a dense matrix (chained analytic layer Jacobians).
    pub fn jacobian(&self, y: &[f64]) -> Result<DMatrix<f64>> {
        self.check_input(y, "jacobian input")?;
        let (_, tangent) = forward_pass_with_tangent(self, &self.theta, y, &|c| c);
        let n = self.n_y;
        Ok(DMatrix::from_fn(n, n, |i, k| tangent[k][i]))
    }

    /// Rows of the Jacobian belonging to the distilled latent, `du/dy`
    /// (`n_p x n_y`).
    pub fn u_jacobian(&self, y: &[f64]) -> Result<DMatrix<f64>> {
        let full = self.jacobian(y)?;
        Ok(full.rows(0, self.n_p).into_owned())
    }

    /// `log |det dz/dy|`, accumulated analytically from the coupling
    /// log-scales. Always within `[-s_max * n_y, s_max * n_y]`.
    pub fn log_det_jacobian(&self, y: &[f64]) -> Result<f64> {
        self.check_input(y, "log_det input")?;
        let mut state = y.to_vec();
        let mut log_det = 0.0;
        for layer in 0..self.n_layers {
            let shape = self.shapes[layer];
            state = rotate(&self.rotations[layer], &state, self.n_y);
            let (s, t) = self.coupling_terms(&self.theta, shape, &state);
            for i in 0..shape.upd_len {
                log_det += s[i];
                state[shape.upd_start + i] = state[shape.upd_start + i] * s[i].exp() + t[i];
            }
        }
        Ok(log_det)
    }

    /// Exact reverse-mode gradients of `<upstream, T_theta(y)>` with
    /// respect to `theta` and `y`.
    pub fn backprop(&self, y: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(y, "backprop input")?;
        if upstream.len() != self.n_y {
            return Err(Error::Contract(format!(
                "upstream length {} != n_y = {}",
                upstream.len(),
                self.n_y
            )));
        }
        if upstream.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backprop upstream".into()));
        }

        // Forward, storing per layer the pre-coupling state, the
        // conditioner hidden activations, and the raw scales.
        let n = self.n_y;
        let h = COND_HIDDEN;
        let mut state = y.to_vec();
        let mut saved_w: Vec<Vec<f64>> = Vec::with_capacity(self.n_layers);
        let mut saved_hidden: Vec<Vec<f64>> = Vec::with_capacity(self.n_layers);
        let mut saved_raw: Vec<Vec<f64>> = Vec::with_capacity(self.n_layers);
        for layer in 0..self.n_layers {
            let shape = self.shapes[layer];
            state = rotate(&self.rotations[layer], &state, n);
            saved_w.push(state.clone());
            let m = shape.upd_len;
            let c = shape.cond_len;
            let base = shape.theta_offset;
            let (w1, rest) = self.theta[base..].split_at(h * c);
            let (b1, rest) = rest.split_at(h);
            let (w2s, rest) = rest.split_at(m * h);
            let (w2t, rest) = rest.split_at(m * h);
            let b2t = &rest[..m];

            let mut hidden = vec![0.0; h];
            for (j, hv) in hidden.iter_mut().enumerate() {
                let mut acc = b1[j];
                for k in 0..c {
                    acc += w1[j * c + k] * state[shape.cond_start + k];
                }
                *hv = acc.tanh();
            }
            let mut raw = vec![0.0; m];
            for i in 0..m {
                let mut acc_s = 0.0;
                let mut acc_t = b2t[i];
                for j in 0..h {
                    acc_s += w2s[i * h + j] * hidden[j];
                    acc_t += w2t[i * h + j] * hidden[j];
                }
                raw[i] = acc_s;
                let s = self.scale_bound * acc_s.tanh();
                let idx = shape.upd_start + i;
                state[idx] = state[idx] * s.exp() + acc_t;
            }
            saved_hidden.push(hidden);
            saved_raw.push(raw);
        }

        // Backward.
        let mut grad_theta = vec![0.0; self.theta.len()];
        let mut g = upstream.to_vec();
        for layer in (0..self.n_layers).rev() {
            let shape = self.shapes[layer];
            let m = shape.upd_len;
            let c = shape.cond_len;
            let base = shape.theta_offset;
            let w1_start = base;
            let b1_start = base + h * c;
            let w2s_start = b1_start + h;
            let w2t_start = w2s_start + m * h;
            let b2t_start = w2t_start + m * h;

            let w = &saved_w[layer];
            let hidden = &saved_hidden[layer];
            let raw = &saved_raw[layer];

            let mut g_w = vec![0.0; n];
            for k in 0..c {
                g_w[shape.cond_start + k] = g[shape.cond_start + k];
            }
            let mut g_hidden = vec![0.0; h];
            for i in 0..m {
                let gu = g[shape.upd_start + i];
                let tanh_raw = raw[i].tanh();
                let s = self.scale_bound * tanh_raw;
                let exp_s = s.exp();
                // shift path
                grad_theta[b2t_start + i] += gu;
                for j in 0..h {
                    grad_theta[w2t_start + i * h + j] += gu * hidden[j];
                    g_hidden[j] += gu * self.theta[w2t_start + i * h + j];
                }
                // scale path
                let g_s = gu * w[shape.upd_start + i] * exp_s;
                let g_raw = g_s * self.scale_bound * (1.0 - tanh_raw * tanh_raw);
                for j in 0..h {
                    grad_theta[w2s_start + i * h + j] += g_raw * hidden[j];
                    g_hidden[j] += g_raw * self.theta[w2s_start + i * h + j];
                }
                g_w[shape.upd_start + i] = gu * exp_s;
            }
            // conditioner reverse
            for j in 0..h {
                let gh = g_hidden[j] * (1.0 - hidden[j] * hidden[j]);
                grad_theta[b1_start + j] += gh;
                for k in 0..c {
                    grad_theta[w1_start + j * c + k] += gh * w[shape.cond_start + k];
                    g_w[shape.cond_start + k] += gh * self.theta[w1_start + j * c + k];
                }
            }

            // Rotation reverse: multiply by the transpose.
            let rot = &self.rotations[layer];
            let mut g_prev = vec![0.0; n];
            for (i, gp) in g_prev.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += rot[k * n + i] * g_w[k];
                }
                *gp = acc;
            }
            g = g_prev;
        }
        Ok((grad_theta, g))
    }

    /// Gradient with respect to `theta` of `<weights, du/dy>` for a fixed
    /// `n_p x n_y` weight matrix. Returns the functional value and the
    /// gradient. Used by losses that penalize functions of the latent
    /// Jacobian.
    pub fn u_jacobian_functional_grad(
        &self,
        y: &[f64],
        weights: &DMatrix<f64>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_input(y, "jacobian functional input")?;
        if weights.nrows() != self.n_p || weights.ncols() != self.n_y {
            return Err(Error::Contract(format!(
                "weight matrix shape {}x{} != {}x{}",
                weights.nrows(),
                weights.ncols(),
                self.n_p,
                self.n_y
            )));
        }
        let tape = Tape::new();
        let theta_vars: Vec<Var<'_>> = tape.vars(&self.theta);
        let y_vars: Vec<Var<'_>> = tape.vars(y);
        let (_, tangent) =
            forward_pass_with_tangent(self, &theta_vars, &y_vars, &|c| tape.var(c));
        let mut phi = tape.var(0.0);
        for i in 0..self.n_p {
            for k in 0..self.n_y {
                let w = weights[(i, k)];
                if w != 0.0 {
                    phi = phi + tangent[k][i] * w;
                }
            }
        }
        let grads = tape.gradients(phi);
        let grad = theta_vars.iter().map(|&v| grads.wrt(v)).collect();
        Ok((phi.value(), grad))
    }

    /// Versioned JSON checkpoint with parameters at 17 significant digits.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json())?;
        Ok(())
    }

    pub fn to_checkpoint_json(&self) -> String {
        let theta: Vec<String> = self.theta.iter().map(|&x| crate::report::fmt_f64(x)).collect();
        format!(
            "{{\"format_version\":{},\"arch_seed\":{},\"n_y\":{},\"n_p\":{},\"n_layers\":{},\"s_max\":{},\"theta\":[{}]}}",
            CHECKPOINT_FORMAT_VERSION,
            self.arch_seed,
            self.n_y,
            self.n_p,
            self.n_layers,
            crate::report::fmt_f64(self.s_max),
            theta.join(","),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint_json(&text)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct VersionOnly {
            format_version: u32,
        }
        #[derive(Deserialize)]
        struct Doc {
            format_version: u32,
            arch_seed: u64,
            n_y: usize,
            n_p: usize,
            n_layers: usize,
            s_max: f64,
            theta: Vec<f64>,
        }
        // Check the version first so version skew is reported even when
        // later fields changed shape.
        if let Ok(v) = serde_json::from_str::<VersionOnly>(text) {
            if v.format_version != CHECKPOINT_FORMAT_VERSION {
                return Err(Error::VersionMismatch {
                    found: v.format_version,
                    expected: CHECKPOINT_FORMAT_VERSION,
                });
            }
        }
        let doc: Doc = serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        if doc.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: doc.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let mut model = Self::new(doc.arch_seed, doc.n_y, doc.n_p, doc.n_layers, doc.s_max, 0.0)?;
        if doc.theta.len() != model.theta.len() {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint has {} parameters, architecture needs {}",
                doc.theta.len(),
                model.theta.len()
            )));
        }
        model.theta = doc.theta;
        Ok(model)
    }
}

fn rotate(rot: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let row = &rot[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for k in 0..n {
            acc += row[k] * x[k];
        }
        *o = acc;
    }
    out
}

/// Seeded random rotation: QR of a Gaussian matrix, columns sign-fixed so
/// the upper-triangular factor has a positive diagonal, then one column
/// flipped if needed to force det = +1.
fn random_rotation(n: usize, stream: &mut Stream) -> Vec<f64> {
    let gauss = DMatrix::from_fn(n, n, |_, _| stream.normal());
    let qr = gauss.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    if q.determinant() < 0.0 {
        for i in 0..n {
            q[(i, n - 1)] = -q[(i, n - 1)];
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = q[(i, j)];
        }
    }
    out
}

/// Layer stack over any differentiable scalar.
fn forward_pass<S: Scalar>(model: &TwincherModel, theta: &[S], y: &[S]) -> Vec<S> {
    let n = model.n_y;
    let mut state: Vec<S> = y.to_vec();
    for layer in 0..model.n_layers {
        let shape = model.shapes[layer];
        state = rotate_generic(&model.rotations[layer], &state, n);
        apply_coupling(model, theta, shape, &mut state, None);
    }
    state
}

/// Layer stack propagating input tangents alongside the values. The
/// tangent starts as the identity, so on exit `tangent[k][i]` equals
/// `d state_i / d y_k` — the full Jacobian, in whatever scalar type the
/// caller supplies.
fn forward_pass_with_tangent<S: Scalar>(
    model: &TwincherModel,
    theta: &[S],
    y: &[S],
    lift: &impl Fn(f64) -> S,
) -> (Vec<S>, Vec<Vec<S>>) {
    let n = model.n_y;
    let mut state: Vec<S> = y.to_vec();
    let mut tangent: Vec<Vec<S>> = (0..n)
        .map(|k| (0..n).map(|i| lift(if i == k { 1.0 } else { 0.0 })).collect())
        .collect();
    for layer in 0..model.n_layers {
        let shape = model.shapes[layer];
        state = rotate_generic(&model.rotations[layer], &state, n);
        for col in tangent.iter_mut() {
            *col = rotate_generic(&model.rotations[layer], col, n);
        }
        apply_coupling(model, theta, shape, &mut state, Some(&mut tangent));
    }
    (state, tangent)
}

/// One coupling, optionally pushing tangent columns through it.
fn apply_coupling<S: Scalar>(
    model: &TwincherModel,
    theta: &[S],
    shape: LayerShape,
    state: &mut [S],
    tangent: Option<&mut Vec<Vec<S>>>,
) {
    let m = shape.upd_len;
    let c = shape.cond_len;
    let h = COND_HIDDEN;
    let (w1, rest) = theta[shape.theta_offset..].split_at(h * c);
    let (b1, rest) = rest.split_at(h);
    let (w2s, rest) = rest.split_at(m * h);
    let (w2t, rest) = rest.split_at(m * h);
    let b2t = &rest[..m];

    let cond: Vec<S> = state[shape.cond_start..shape.cond_start + c].to_vec();
    let mut hidden = Vec::with_capacity(h);
    for j in 0..h {
        let mut acc = b1[j];
        for k in 0..c {
            acc = acc + w1[j * c + k] * cond[k];
        }
        hidden.push(acc.tanh());
    }
    let mut raws = Vec::with_capacity(m);
    let mut olds = Vec::with_capacity(m);
    let mut exps = Vec::with_capacity(m);
    for i in 0..m {
        let mut raw = w2s[i * h] * hidden[0];
        let mut t = b2t[i];
        for j in 0..h {
            if j > 0 {
                raw = raw + w2s[i * h + j] * hidden[j];
            }
            t = t + w2t[i * h + j] * hidden[j];
        }
        let tanh_raw = raw.tanh();
        let s = tanh_raw * model.scale_bound;
        let e = s.exp();
        let idx = shape.upd_start + i;
        let old = state[idx];
        state[idx] = old * e + t;
        raws.push(tanh_raw);
        olds.push(old);
        exps.push(e);
    }
    if let Some(tangent) = tangent {
        for col in tangent.iter_mut() {
            let dcond: Vec<S> = col[shape.cond_start..shape.cond_start + c].to_vec();
            // dhidden_j = (1 - hidden_j^2) * sum_k W1[j,k] dcond_k
            let mut dhidden = Vec::with_capacity(h);
            for j in 0..h {
                let mut acc = dcond[0] * w1[j * c];
                for k in 1..c {
                    acc = acc + w1[j * c + k] * dcond[k];
                }
                let sech2 = -(hidden[j] * hidden[j]) + 1.0;
                dhidden.push(sech2 * acc);
            }
            for i in 0..m {
                let mut draw = dhidden[0] * w2s[i * h];
                let mut dt = dhidden[0] * w2t[i * h];
                for j in 1..h {
                    draw = draw + w2s[i * h + j] * dhidden[j];
                    dt = dt + w2t[i * h + j] * dhidden[j];
                }
                // ds = scale_bound * (1 - tanh^2(raw)) * draw
                let sech2 = -(raws[i] * raws[i]) + 1.0;
                let ds = sech2 * model.scale_bound * draw;
                let idx = shape.upd_start + i;
                // d(out) = d(old) e^s + old e^s ds + dt
                col[idx] = col[idx] * exps[i] + olds[i] * exps[i] * ds + dt;
            }
        }
    }
}

fn rotate_generic<S: Scalar>(rot: &[f64], x: &[S], n: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &rot[i * n..(i + 1) * n];
        let mut acc = x[0] * row[0];
        for k in 1..n {
            acc = acc + x[k] * row[k];
        }
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use approx::assert_relative_eq;

    fn random_model(seed: u64, n_y: usize, n_p: usize, layers: usize) -> TwincherModel {
        let mut model = TwincherModel::new(seed, n_y, n_p, layers, 1.0, 0.0).unwrap();
        let mut rng = Stream::new(seed, "test.theta");
        let theta: Vec<f64> = (0..model.param_count())
            .map(|_| rng.uniform(-0.5, 0.5))
            .collect();
        model.set_theta(theta).unwrap();
        model
    }

    #[test]
    fn default_architecture_parameter_count() {
        let model = TwincherModel::new(0, 4, 2, 64, 1.0, 0.0).unwrap();
        let count = model.param_count();
        assert!(
            (900..=1100).contains(&count),
            "parameter count {count} outside [900, 1100]"
        );
    }

    #[test]
    fn zero_init_is_the_rotation_product() {
        let model = TwincherModel::new(3, 4, 2, 8, 1.0, 0.0).unwrap();
        let y = [0.3, -0.1, 0.7, 0.2];
        let z = model.transform(&y).unwrap().z();

        let mut expect = y.to_vec();
        for rot in &model.rotations {
            expect = rotate(rot, &expect, 4);
        }
        for (a, b) in z.iter().zip(&expect) {
            assert_relative_eq!(a, b, max_relative = 1e-14);
        }

        let jac = model.jacobian(&y).unwrap();
        assert_relative_eq!(jac.determinant().abs(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn architecture_is_deterministic() {
        let a = TwincherModel::new(5, 4, 2, 16, 1.0, 0.01).unwrap();
        let b = TwincherModel::new(5, 4, 2, 16, 1.0, 0.01).unwrap();
        assert_eq!(a.rotations, b.rotations);
        assert_eq!(a.theta, b.theta);
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(TwincherModel::new(0, 4, 4, 8, 1.0, 0.0).is_err());
        assert!(TwincherModel::new(0, 4, 0, 8, 1.0, 0.0).is_err());
        assert!(TwincherModel::new(0, 4, 2, 0, 1.0, 0.0).is_err());
        assert!(TwincherModel::new(0, 4, 2, 8, 0.0, 0.0).is_err());
    }

    #[test]
    fn round_trip() {
        let model = random_model(11, 4, 2, 32);
        let mut rng = Stream::new(2, "test.rt");
        for _ in 0..200 {
            let y = rng.uniform_vec(-1.5, 1.5, 4);
            let pair = model.transform(&y).unwrap();
            let back = model.inverse_transform(&pair.u, &pair.h).unwrap();
            for (a, b) in y.iter().zip(&back) {
                assert!((a - b).abs() < 1e-9, "round trip {a} vs {b}");
            }
        }
    }

    #[test]
    fn transform_matches_layerwise_recomputation() {
        // Independent recomputation: apply rotation and coupling directly
        // from the flat parameter vector, without the shared kernels.
        let model = random_model(17, 4, 2, 6);
        let y = [0.2, -0.4, 0.9, -0.1];
        let z = model.transform(&y).unwrap().z();

        let n = 4;
        let m = 2;
        let c = 2;
        let h = 2;
        let stride = h * c + h + 2 * m * h + m; // 16
        let mut state = y.to_vec();
        for layer in 0..6 {
            let rot = &model.rotations[layer];
            let mut v = vec![0.0; n];
            for i in 0..n {
                for k in 0..n {
                    v[i] += rot[i * n + k] * state[k];
                }
            }
            let th = &model.theta()[layer * stride..(layer + 1) * stride];
            let (w1, rest) = th.split_at(h * c);
            let (b1, rest) = rest.split_at(h);
            let (w2s, rest) = rest.split_at(m * h);
            let (w2t, rest) = rest.split_at(m * h);
            let b2t = rest;
            let (upd, cond) = if layer % 2 == 0 { (c, 0) } else { (0, m) };
            let hid: Vec<f64> = (0..h)
                .map(|j| {
                    (b1[j] + (0..c).map(|k| w1[j * c + k] * v[cond + k]).sum::<f64>()).tanh()
                })
                .collect();
            for i in 0..m {
                let raw: f64 = (0..h).map(|j| w2s[i * h + j] * hid[j]).sum();
                let t: f64 =
                    b2t[i] + (0..h).map(|j| w2t[i * h + j] * hid[j]).sum::<f64>();
                let s = (1.0 / 6.0) * raw.tanh();
                v[upd + i] = v[upd + i] * s.exp() + t;
            }
            state = v;
        }
        for (a, b) in z.iter().zip(&state) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let model = random_model(23, 4, 2, 16);
        let y = [0.3, 0.8, -0.5, 0.1];
        let jac = model.jacobian(&y).unwrap();
        let h = 1e-6;
        let mut err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for k in 0..4 {
            let mut yp = y;
            let mut ym = y;
            yp[k] += h;
            ym[k] -= h;
            let zp = model.transform(&yp).unwrap().z();
            let zm = model.transform(&ym).unwrap().z();
            for i in 0..4 {
                let fd = (zp[i] - zm[i]) / (2.0 * h);
                err = err.max((jac[(i, k)] - fd).abs());
                scale = scale.max(fd.abs());
            }
        }
        assert!(err / scale.max(1.0) < 1e-5, "jacobian fd error {err}");
    }

    #[test]
    fn log_det_bound_and_consistency() {
        let mut rng = Stream::new(31, "test.logdet");
        for seed in 0..5 {
            let model = random_model(seed, 4, 2, 16);
            for _ in 0..20 {
                let y = rng.uniform_vec(-1.5, 1.5, 4);
                let ld = model.log_det_jacobian(&y).unwrap();
                assert!(ld >= -model.s_max() * 4.0, "log det {ld} below bound");
                let det = model.jacobian(&y).unwrap().determinant();
                assert_relative_eq!(ld, det.abs().ln(), max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let model = random_model(41, 4, 2, 8);
        let y = [0.25, -0.15, 0.6, -0.7];
        let upstream = [0.7, -1.3, 0.4, 0.2];
        let (grad_theta, grad_y) = model.backprop(&y, &upstream).unwrap();

        let value = |m: &TwincherModel, y: &[f64]| {
            let z = m.transform(y).unwrap().z();
            z.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
        };

        let h = 1e-6;
        let mut fd_theta = vec![0.0; grad_theta.len()];
        let mut work = model.clone();
        for j in 0..grad_theta.len() {
            let orig = work.theta()[j];
            work.theta_mut()[j] = orig + h;
            let up = value(&work, &y);
            work.theta_mut()[j] = orig - h;
            let dn = value(&work, &y);
            work.theta_mut()[j] = orig;
            fd_theta[j] = (up - dn) / (2.0 * h);
        }
        let num = grad_theta
            .iter()
            .zip(&fd_theta)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den = fd_theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den.max(1e-12) < 1e-6, "theta grad rel err {}", num / den);

        for k in 0..4 {
            let mut yp = y;
            let mut ym = y;
            yp[k] += h;
            ym[k] -= h;
            let fd = (value(&model, &yp) - value(&model, &ym)) / (2.0 * h);
            assert!((grad_y[k] - fd).abs() < 1e-7, "grad_y[{k}] {} vs {fd}", grad_y[k]);
        }
    }

    #[test]
    fn grad_y_is_jacobian_transpose_times_upstream() {
        let model = random_model(43, 4, 2, 12);
        let y = [0.5, 0.1, -0.3, 0.9];
        let upstream = [1.0, -0.5, 0.25, 2.0];
        let (_, grad_y) = model.backprop(&y, &upstream).unwrap();
        let jac = model.jacobian(&y).unwrap();
        for k in 0..4 {
            let mut expect = 0.0;
            for i in 0..4 {
                expect += jac[(i, k)] * upstream[i];
            }
            assert!((grad_y[k] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let model = random_model(47, 4, 2, 8);
        let (gt, gy) = model.backprop(&[0.1, 0.2, 0.3, 0.4], &[0.0; 4]).unwrap();
        assert!(gt.iter().all(|&v| v == 0.0));
        assert!(gy.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jacobian_functional_grad_matches_finite_differences() {
        let model = random_model(53, 4, 2, 6);
        let y = [0.3, -0.2, 0.5, 0.7];
        let mut rng = Stream::new(4, "test.weights");
        let weights = DMatrix::from_fn(2, 4, |_, _| rng.uniform(-1.0, 1.0));
        let (value, grad) = model.u_jacobian_functional_grad(&y, &weights).unwrap();

        let phi = |m: &TwincherModel| {
            let jac = m.u_jacobian(&y).unwrap();
            let mut acc = 0.0;
            for i in 0..2 {
                for k in 0..4 {
                    acc += weights[(i, k)] * jac[(i, k)];
                }
            }
            acc
        };
        assert_relative_eq!(value, phi(&model), max_relative = 1e-12);

        let h = 1e-6;
        let mut work = model.clone();
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..grad.len() {
            let orig = work.theta()[j];
            work.theta_mut()[j] = orig + h;
            let up = phi(&work);
            work.theta_mut()[j] = orig - h;
            let dn = phi(&work);
            work.theta_mut()[j] = orig;
            let fd = (up - dn) / (2.0 * h);
            num += (grad[j] - fd) * (grad[j] - fd);
            den += fd * fd;
        }
        let rel = num.sqrt() / den.sqrt().max(1e-12);
        assert!(rel < 1e-5, "functional grad rel err {rel}");
    }

    #[test]
    fn inverse_jacobian_product_is_identity() {
        let model = random_model(59, 4, 2, 16);
        let y = [0.4, -0.6, 0.2, 0.8];
        let pair = model.transform(&y).unwrap();
        let jac = model.jacobian(&y).unwrap();

        // Finite-difference Jacobian of the inverse at z.
        let z = pair.z();
        let h = 1e-6;
        let mut inv_jac = DMatrix::zeros(4, 4);
        for k in 0..4 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[k] += h;
            zm[k] -= h;
            let yp = model.inverse_transform(&zp[..2], &zp[2..]).unwrap();
            let ym = model.inverse_transform(&zm[..2], &zm[2..]).unwrap();
            for i in 0..4 {
                inv_jac[(i, k)] = (yp[i] - ym[i]) / (2.0 * h);
            }
        }
        let product = jac * inv_jac;
        for i in 0..4 {
            for k in 0..4 {
                let expect = if i == k { 1.0 } else { 0.0 };
                assert!(
                    (product[(i, k)] - expect).abs() < 1e-8,
                    "product[{i},{k}] = {}",
                    product[(i, k)]
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_value_identical() {
        let model = random_model(61, 4, 2, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = TwincherModel::load(&path).unwrap();
        assert_eq!(model.theta(), loaded.theta());
        let y = [0.15, -0.35, 0.55, -0.75];
        assert_eq!(
            model.transform(&y).unwrap(),
            loaded.transform(&y).unwrap()
        );
        // save -> load -> save is byte-identical
        let again = loaded.to_checkpoint_json();
        assert_eq!(model.to_checkpoint_json(), again);
    }

    #[test]
    fn checkpoint_rejects_truncation_version_and_dimension_skew() {
        let model = random_model(67, 4, 2, 4);
        let doc = model.to_checkpoint_json();

        let truncated = &doc[..doc.len() / 2];
        assert!(matches!(
            TwincherModel::from_checkpoint_json(truncated),
            Err(Error::Malformed(_))
        ));

        let bumped = doc.replace("\"format_version\":1", "\"format_version\":9");
        match TwincherModel::from_checkpoint_json(&bumped) {
            Err(Error::VersionMismatch { found, expected }) => {
                assert_eq!((found, expected), (9, 1));
            }
            other => panic!("expected version mismatch, got {other:?}"),
        }

        let short = doc.replace("\"n_layers\":4", "\"n_layers\":5");
        assert!(matches!(
            TwincherModel::from_checkpoint_json(&short),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
