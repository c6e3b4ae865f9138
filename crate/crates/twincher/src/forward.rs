//! Seeded synthetic forward processes and query-budget accounting.
//!
//! The harmonic entangler is an exactly invertible black-box `y = E(p)`
//! built from sinusoidal coupling layers; its difficulty is tuned by the
//! frequency amplitude `w_amp`. All coefficients are regenerated from a
//! 64-bit seed through the documented streams below, so an instance is
//! fully described by `(seed, n_p, n_s, e_n, w_amp)`.
//!
//! Coefficient derivation (see [`crate::rng`] for the generator itself):
//! - padding: stream `(seed, "entangler.pad")`, `n_s - n_p` open-interval
//!   uniforms in (-1, 1), drawn in index order;
//! - frequencies: stream `(seed, "entangler.w")`, substream `4*layer + op`
//!   with `op` in `{0: sigma_y, 1: tau_y, 2: sigma_z, 3: tau_z}`,
//!   `(n_s/2)^2` uniforms in (-pi*w_amp, pi*w_amp), row-major;
//! - phases: stream `(seed, "entangler.b")`, same substream layout,
//!   uniforms in (-pi, pi);
//! - permutations: stream `(seed, "entangler.perm")`, substream `layer`,
//!   Fisher-Yates permutation of `n_s` indices.

use serde::Deserialize;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Current on-disk format for entangler documents.
pub const ENTANGLER_FORMAT_VERSION: u32 = 1;

/// Finite-difference probes may overshoot the parameter box by the
/// forward-difference step; forward models accept this much slack.
pub const BOX_SLACK: f64 = 1e-6;

/// Smoothly map any real into (-1, 1): `z / sqrt(1 + z^2)`.
pub fn squash(z: f64) -> f64 {
    z / (1.0 + z * z).sqrt()
}

/// Inverse of [`squash`] on (-1, 1).
pub fn unsquash(t: f64) -> Result<f64> {
    if !(t.abs() < 1.0) {
        return Err(Error::Domain(format!(
            "unsquash requires |t| < 1, got {t}"
        )));
    }
    Ok(t / (1.0 - t * t).sqrt())
}

/// One of the four fixed random operators inside an entangler layer:
/// `out_j = (2/n_s) * sum_k sin(w_jk x_k + b_jk)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HarmonicOperator {
    half: usize,
    scale: f64,
    /// Row-major `half x half`.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl HarmonicOperator {
    /// Build from explicit coefficient matrices (row-major, `half x half`).
    /// `n_s` fixes the `2/n_s` output normalization.
    pub fn new(n_s: usize, w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let half = n_s / 2;
        if n_s % 2 != 0 || w.len() != half * half || b.len() != half * half {
            return Err(Error::Contract(format!(
                "harmonic operator for n_s = {n_s} needs {0}x{0} coefficient matrices",
                half
            )));
        }
        Ok(Self {
            half,
            scale: 2.0 / n_s as f64,
            w,
            b,
        })
    }

    fn sampled(n_s: usize, w_amp: f64, w_stream: &mut Stream, b_stream: &mut Stream) -> Self {
        let half = n_s / 2;
        let n = half * half;
        let w = (0..n)
            .map(|_| w_stream.uniform(-std::f64::consts::PI * w_amp, std::f64::consts::PI * w_amp))
            .collect();
        let b = (0..n)
            .map(|_| b_stream.uniform(-std::f64::consts::PI, std::f64::consts::PI))
            .collect();
        Self {
            half,
            scale: 2.0 / n_s as f64,
            w,
            b,
        }
    }

    /// Evaluate the operator; `x` must have length `n_s/2`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.half {
            return Err(Error::Contract(format!(
                "harmonic operator input length {} != {}",
                x.len(),
                self.half
            )));
        }
        let mut out = vec![0.0; self.half];
        for (j, out_j) in out.iter_mut().enumerate() {
            let row = &self.w[j * self.half..(j + 1) * self.half];
            let brow = &self.b[j * self.half..(j + 1) * self.half];
            let mut acc = 0.0;
            for k in 0..self.half {
                acc += (row[k] * x[k] + brow[k]).sin();
            }
            *out_j = self.scale * acc;
        }
        Ok(out)
    }

    pub fn coefficients(&self) -> (&[f64], &[f64]) {
        (&self.w, &self.b)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct EntanglerLayer {
    sigma_y: HarmonicOperator,
    tau_y: HarmonicOperator,
    sigma_z: HarmonicOperator,
    tau_z: HarmonicOperator,
    /// Gather permutation: `out[i] = in[perm[i]]`.
    perm: Vec<usize>,
}

/// A seeded, exactly invertible synthetic forward process of tunable
/// complexity.
#[derive(Clone, Debug, PartialEq)]
pub struct HarmonicEntangler {
    seed: u64,
    n_p: usize,
    n_s: usize,
    e_n: usize,
    w_amp: f64,
    s_pad: Vec<f64>,
    layers: Vec<EntanglerLayer>,
}

impl HarmonicEntangler {
    pub fn new(seed: u64, n_p: usize, n_s: usize, e_n: usize, w_amp: f64) -> Result<Self> {
        if n_s == 0 || n_s % 2 != 0 {
            return Err(Error::Contract(format!("n_s must be even and > 0, got {n_s}")));
        }
        if n_p == 0 || n_p > n_s {
            return Err(Error::Contract(format!(
                "n_p must satisfy 1 <= n_p <= n_s, got n_p = {n_p}, n_s = {n_s}"
            )));
        }
        if e_n == 0 {
            return Err(Error::Contract("e_n must be >= 1".into()));
        }
        if !(w_amp > 0.0) {
            return Err(Error::Contract(format!("w_amp must be > 0, got {w_amp}")));
        }

        let mut pad_stream = Stream::new(seed, "entangler.pad");
        let s_pad = (0..n_s - n_p)
            .map(|_| open_uniform(&mut pad_stream))
            .collect();

        let w_root = Stream::new(seed, "entangler.w");
        let b_root = Stream::new(seed, "entangler.b");
        let perm_root = Stream::new(seed, "entangler.perm");
        let layers = (0..e_n)
            .map(|layer| {
                let op = |idx: usize| {
                    let mut ws = w_root.substream((4 * layer + idx) as u64);
                    let mut bs = b_root.substream((4 * layer + idx) as u64);
                    HarmonicOperator::sampled(n_s, w_amp, &mut ws, &mut bs)
                };
                let sigma_y = op(0);
                let tau_y = op(1);
                let sigma_z = op(2);
                let tau_z = op(3);
                let perm = perm_root.substream(layer as u64).permutation(n_s);
                EntanglerLayer {
                    sigma_y,
                    tau_y,
                    sigma_z,
                    tau_z,
                    perm,
                }
            })
            .collect();

        Ok(Self {
            seed,
            n_p,
            n_s,
            e_n,
            w_amp,
            s_pad,
            layers,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn w_amp(&self) -> f64 {
        self.w_amp
    }

    pub fn layer_count(&self) -> usize {
        self.e_n
    }

    pub fn padding(&self) -> &[f64] {
        &self.s_pad
    }

    /// Evaluate `y = E(p)`; `p` must lie in the parameter box (up to
    /// [`BOX_SLACK`] of overshoot for finite-difference probes).
    pub fn forward(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.n_p {
            return Err(Error::Contract(format!(
                "parameter length {} != n_p = {}",
                p.len(),
                self.n_p
            )));
        }
        for &x in p {
            if !x.is_finite() {
                return Err(Error::NonFinite("entangler forward input".into()));
            }
            if x.abs() > 1.0 + BOX_SLACK {
                return Err(Error::Contract(format!(
                    "parameter component {x} outside [-1, 1]"
                )));
            }
        }

        let mut s: Vec<f64> = p.iter().chain(self.s_pad.iter()).copied().collect();
        let half = self.n_s / 2;
        for layer in &self.layers {
            let (x1, x2) = s.split_at(half);
            // y1 = x1; y2 = x2 .* exp(sigma_y(x1)) + tau_y(x1)
            let sy = layer.sigma_y.apply(x1)?;
            let ty = layer.tau_y.apply(x1)?;
            let y2: Vec<f64> = (0..half).map(|i| x2[i] * sy[i].exp() + ty[i]).collect();
            // z2 = y2; z1 = y1 .* exp(sigma_z(y2)) + tau_z(y2)
            let sz = layer.sigma_z.apply(&y2)?;
            let tz = layer.tau_z.apply(&y2)?;
            let z1: Vec<f64> = (0..half).map(|i| x1[i] * sz[i].exp() + tz[i]).collect();

            let squashed: Vec<f64> = z1.iter().chain(y2.iter()).map(|&z| squash(z)).collect();
            s = layer.perm.iter().map(|&i| squashed[i]).collect();
        }
        Ok(s)
    }

    /// Exact inverse of [`HarmonicEntangler::forward`] (test oracle).
    ///
    /// Fails with a domain error when any component has magnitude >= 1 and
    /// with an image-membership error when the recovered padding deviates
    /// from `s_pad` by more than 1e-6.
    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.n_s {
            return Err(Error::Contract(format!(
                "observation length {} != n_s = {}",
                y.len(),
                self.n_s
            )));
        }
        for &t in y {
            if !(t.abs() < 1.0) {
                return Err(Error::Domain(format!(
                    "entangler image lies strictly inside (-1, 1); got component {t}"
                )));
            }
        }

        let half = self.n_s / 2;
        let mut s = y.to_vec();
        for layer in self.layers.iter().rev() {
            let mut squashed = vec![0.0; self.n_s];
            for (i, &pi) in layer.perm.iter().enumerate() {
                squashed[pi] = s[i];
            }
            let z: Vec<f64> = squashed
                .iter()
                .map(|&t| unsquash(t))
                .collect::<Result<_>>()?;
            let (z1, z2) = z.split_at(half);
            let y2 = z2;
            let sz = layer.sigma_z.apply(y2)?;
            let tz = layer.tau_z.apply(y2)?;
            let y1: Vec<f64> = (0..half)
                .map(|i| (z1[i] - tz[i]) * (-sz[i]).exp())
                .collect();
            let x1 = y1;
            let sy = layer.sigma_y.apply(&x1)?;
            let ty = layer.tau_y.apply(&x1)?;
            let x2: Vec<f64> = (0..half)
                .map(|i| (y2[i] - ty[i]) * (-sy[i]).exp())
                .collect();
            s = x1.into_iter().chain(x2).collect();
        }

        let mut deviation = 0.0f64;
        for (i, &pad) in self.s_pad.iter().enumerate() {
            deviation = deviation.max((s[self.n_p + i] - pad).abs());
        }
        if deviation > 1e-6 {
            return Err(Error::NotInImage { deviation });
        }
        s.truncate(self.n_p);
        Ok(s)
    }

    /// Versioned JSON document; coefficients are regenerated from the seed,
    /// never stored.
    pub fn to_json(&self) -> String {
        format!(
            "{{\"format_version\":{},\"seed\":{},\"n_p\":{},\"n_s\":{},\"e_n\":{},\"w_amp\":{}}}",
            ENTANGLER_FORMAT_VERSION,
            self.seed,
            self.n_p,
            self.n_s,
            self.e_n,
            crate::report::fmt_f64(self.w_amp),
        )
    }

    pub fn from_json(doc: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            format_version: u32,
            seed: u64,
            n_p: usize,
            n_s: usize,
            e_n: usize,
            w_amp: f64,
        }
        let doc: Doc =
            serde_json::from_str(doc).map_err(|e| Error::Malformed(e.to_string()))?;
        if doc.format_version != ENTANGLER_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: doc.format_version,
                expected: ENTANGLER_FORMAT_VERSION,
            });
        }
        Self::new(doc.seed, doc.n_p, doc.n_s, doc.e_n, doc.w_amp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

/// Uniform in the open interval (-1, 1); redraws the measure-zero endpoints.
fn open_uniform(stream: &mut Stream) -> f64 {
    loop {
        let x = stream.uniform(-1.0, 1.0);
        if x.abs() < 1.0 {
            return x;
        }
    }
}

/// A black-box forward process `p -> y`.
pub trait ForwardModel {
    fn param_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn eval(&self, p: &[f64]) -> Result<Vec<f64>>;
}

impl ForwardModel for HarmonicEntangler {
    fn param_dim(&self) -> usize {
        self.n_p
    }
    fn obs_dim(&self) -> usize {
        self.n_s
    }
    fn eval(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.forward(p)
    }
}

/// One-dimensional parameter traced along a planar spiral.
#[derive(Clone, Copy, Debug)]
pub struct SpiralProcess {
    pub turns: f64,
    pub r0: f64,
    pub r1: f64,
}

impl Default for SpiralProcess {
    fn default() -> Self {
        Self {
            turns: 1.75 * std::f64::consts::PI,
            r0: 0.4,
            r1: 0.35,
        }
    }
}

impl SpiralProcess {
    pub fn new(turns: f64, r0: f64, r1: f64) -> Result<Self> {
        if !(r0 - r1 > 0.0) {
            return Err(Error::Contract(format!(
                "spiral radius must stay positive: r0 - r1 = {}",
                r0 - r1
            )));
        }
        if r0 + r1.abs() >= 1.0 {
            return Err(Error::Contract(
                "spiral image must stay inside the unit box".into(),
            ));
        }
        Ok(Self { turns, r0, r1 })
    }

    /// `y = (r cos(theta), r sin(theta))` with `theta = turns * p`,
    /// `r = r0 + r1 * p`.
    pub fn forward(&self, p: f64) -> Result<[f64; 2]> {
        if !p.is_finite() || p.abs() > 1.0 + BOX_SLACK {
            return Err(Error::Contract(format!(
                "spiral parameter must lie in [-1, 1], got {p}"
            )));
        }
        let theta = self.turns * p;
        let r = self.r0 + self.r1 * p;
        Ok([r * theta.cos(), r * theta.sin()])
    }
}

impl ForwardModel for SpiralProcess {
    fn param_dim(&self) -> usize {
        1
    }
    fn obs_dim(&self) -> usize {
        2
    }
    fn eval(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != 1 {
            return Err(Error::Contract(format!(
                "spiral takes a single parameter, got length {}",
                p.len()
            )));
        }
        Ok(self.forward(p[0])?.to_vec())
    }
}

/// Observation perturbation: per-component neighbor swaps followed by
/// additive uniform noise.
#[derive(Clone, Debug)]
pub struct NoiseChannel {
    amplitude: f64,
    swap_prob: f64,
    stream: Stream,
}

impl NoiseChannel {
    pub fn new(amplitude: f64, swap_prob: f64, rng_seed: u64) -> Result<Self> {
        if !(amplitude >= 0.0) {
            return Err(Error::Contract(format!(
                "noise amplitude must be >= 0, got {amplitude}"
            )));
        }
        if !(0.0..=1.0).contains(&swap_prob) {
            return Err(Error::Contract(format!(
                "swap probability must lie in [0, 1], got {swap_prob}"
            )));
        }
        Ok(Self {
            amplitude,
            swap_prob,
            stream: Stream::new(rng_seed, "noise.channel"),
        })
    }

    /// Perturb one observation. Per component, three draws are consumed in
    /// a fixed order (swap decision, swap direction, additive offset)
    /// regardless of the parameter values, so draw alignment never depends
    /// on the data.
    pub fn apply(&mut self, y: &[f64]) -> Vec<f64> {
        let n = y.len();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let u_swap = self.stream.next_f64();
            let u_dir = self.stream.next_f64();
            let u_noise = self.stream.next_f64();
            let base = if u_swap < self.swap_prob {
                let j = if u_dir < 0.5 {
                    i.saturating_sub(1)
                } else {
                    (i + 1).min(n - 1)
                };
                y[j]
            } else {
                y[i]
            };
            out.push(base + (2.0 * u_noise - 1.0) * self.amplitude);
        }
        out
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }
}

/// Forward-evaluation budget for the exploration phase.
#[derive(Clone, Debug)]
pub struct QueryLedger {
    budget: u64,
    used: u64,
}

impl QueryLedger {
    pub fn new(budget: u64) -> Self {
        Self { budget, used: 0 }
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn remaining(&self) -> u64 {
        self.budget - self.used
    }

    /// Evaluate the forward process, charging one query.
    pub fn query(&mut self, model: &dyn ForwardModel, p: &[f64]) -> Result<Vec<f64>> {
        if self.used >= self.budget {
            return Err(Error::BudgetExhausted {
                used: self.used,
                budget: self.budget,
            });
        }
        let y = model.eval(p)?;
        self.used += 1;
        Ok(y)
    }
}
