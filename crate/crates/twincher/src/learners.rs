//! The two learners and their training machinery.
//!
//! The baseline learner couples an inverse-regression MLP with clipped
//! Gauss-Newton refinement in observation space. The Twincher learner
//! trains an invertible transform so that its distilled latent aligns
//! bijectively with the generative parameters, using adversarially mined
//! pair hinges plus Jacobian-conditioning and nuisance-robustness
//! penalties, then refines in the latent space.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::TwincherModel;
use crate::forward::{ForwardModel, QueryLedger};
use crate::nets::{train_supervised, AdamState, Mlp};
use crate::report::fmt_f64;
use crate::rng::Stream;
use crate::solve::{self, GnConfig, RefineAbort, RefinementTrace};

/// Hidden widths shared by the inverse and proposal networks.
pub const MLP_HIDDEN: [usize; 4] = [16, 16, 16, 16];
/// Output scaling guaranteeing the target box is attainable.
pub const MLP_OUT_SCALE: f64 = 1.5;
/// Supervised training caps.
pub const MLP_MAX_EPOCHS: usize = 1000;
pub const MLP_PATIENCE: usize = 10;
pub const MLP_VAL_FRACTION: f64 = 0.1;

/// Current on-disk format for learner checkpoints.
pub const LEARNER_FORMAT_VERSION: u32 = 1;

/// One exploration sample: parameters, observation, and (optionally) the
/// forward-difference Jacobian estimate at that point.
#[derive(Clone, Debug)]
pub struct SamplePoint {
    pub p: Vec<f64>,
    pub y: Vec<f64>,
    pub jac: Option<DMatrix<f64>>,
}

/// Exploration data acquired under a query budget.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub points: Vec<SamplePoint>,
    /// Forward queries actually consumed while acquiring the points.
    pub source_budget: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn param_dim(&self) -> usize {
        self.points.first().map_or(0, |pt| pt.p.len())
    }

    pub fn obs_dim(&self) -> usize {
        self.points.first().map_or(0, |pt| pt.y.len())
    }

    pub fn has_jacobians(&self) -> bool {
        !self.is_empty() && self.points.iter().all(|pt| pt.jac.is_some())
    }
}

/// One passive exploration pass: parameters drawn uniformly from the box,
/// one query per point, or `n_p + 1` queries per point when Jacobian
/// estimates are requested. A point that cannot be finished within the
/// budget is discarded; the returned `source_budget` reflects the exact
/// number of queries consumed.
pub fn explore_static(
    model: &dyn ForwardModel,
    budget: u64,
    rng: &mut Stream,
    with_jacobians: bool,
    fd_step: f64,
) -> Result<Dataset> {
    let n_p = model.param_dim();
    if with_jacobians && budget < (n_p + 1) as u64 {
        return Err(Error::Contract(format!(
            "budget {budget} below the {} queries one Jacobian point needs",
            n_p + 1
        )));
    }
    let mut ledger = QueryLedger::new(budget);
    let mut points = Vec::new();
    loop {
        let p = rng.uniform_vec(-1.0, 1.0, n_p);
        if with_jacobians {
            let mut f = |q: &[f64]| ledger.query(model, q);
            match solve::jacobian_with_value(&mut f, &p, fd_step) {
                Ok((jac, y)) => points.push(SamplePoint {
                    p,
                    y,
                    jac: Some(jac),
                }),
                Err(Error::BudgetExhausted { .. }) => break,
                Err(e) => return Err(e),
            }
        } else {
            match ledger.query(model, &p) {
                Ok(y) => points.push(SamplePoint { p, y, jac: None }),
                Err(Error::BudgetExhausted { .. }) => break,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(Dataset {
        points,
        source_budget: ledger.used(),
    })
}

/// MLP inverse regression plus observation-space Gauss-Newton.
#[derive(Clone, Debug)]
pub struct BaselineLearner {
    pub inverse_net: Mlp,
    pub gn_cfg: GnConfig,
}

/// Train the baseline: a `(n_y, 16, 16, 16, 16, n_p)` network with a
/// `1.5 tanh` output fitted to `y -> p` by early-stopped Adam.
pub fn train_baseline(dataset: &Dataset, gn_cfg: GnConfig, rng: &mut Stream) -> Result<BaselineLearner> {
    if dataset.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    let n_p = dataset.param_dim();
    let n_y = dataset.obs_dim();
    let mut widths = vec![n_y];
    widths.extend_from_slice(&MLP_HIDDEN);
    widths.push(n_p);
    let mut net = Mlp::new(rng.next_u64(), &widths, MLP_OUT_SCALE)?;
    let inputs: Vec<Vec<f64>> = dataset.points.iter().map(|pt| pt.y.clone()).collect();
    let targets: Vec<Vec<f64>> = dataset.points.iter().map(|pt| pt.p.clone()).collect();
    train_supervised(
        &mut net,
        &inputs,
        &targets,
        MLP_MAX_EPOCHS,
        MLP_PATIENCE,
        MLP_VAL_FRACTION,
        rng,
    )?;
    Ok(BaselineLearner {
        inverse_net: net,
        gn_cfg,
    })
}

/// Flow architecture knobs carried inside [`TrainConfig`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub n_layers: usize,
    pub s_max: f64,
    pub init_scale: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_layers: 64,
            s_max: 1.0,
            init_scale: 0.01,
        }
    }
}

/// Twincher training settings.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Co-Lipschitz margin `M` of the pair hinge.
    pub margin: f64,
    /// Smallest-singular-value floor for the local invertibility penalty.
    pub sigma_margin: f64,
    pub bij_weight: f64,
    pub jac_weight: f64,
    pub rob_weight: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Adversarially mined pairs fed to the bijection hinge per epoch.
    pub pairs_per_epoch: usize,
    /// Minibatch size for the Jacobian-based penalty means per epoch.
    pub samples_per_epoch: usize,
    /// Fraction of the epochs over which the effective margins grow
    /// linearly from zero to their targets. Training drives the pair
    /// separation first and raises the demanded margin as it is met; 0
    /// keeps both margins constant from the start.
    pub margin_ramp: f64,
    /// Fraction of the epochs over which the active training window grows
    /// from a small parameter-space neighborhood to the whole dataset
    /// (points ordered by distance from the box corner). Extending an
    /// already-aligned region orients each new slice and avoids the
    /// collapsed wave minima that whole-set training falls into; 0 trains
    /// on the whole dataset from the start.
    pub curriculum: f64,
    /// Reserved for the dynamic regime; must be 0 in static exploration.
    pub adversarial_refine_steps: usize,
    pub flow: FlowConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.25,
            sigma_margin: 0.1,
            bij_weight: 1.0,
            jac_weight: 1.0,
            rob_weight: 0.1,
            epochs: 2000,
            lr: 1e-3,
            pairs_per_epoch: 64,
            samples_per_epoch: 32,
            margin_ramp: 0.5,
            curriculum: 0.5,
            adversarial_refine_steps: 0,
            flow: FlowConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Contract(format!(
                "margin must be > 0, got {}",
                self.margin
            )));
        }
        for (name, w) in [
            ("bij_weight", self.bij_weight),
            ("jac_weight", self.jac_weight),
            ("rob_weight", self.rob_weight),
            ("sigma_margin", self.sigma_margin),
        ] {
            if !(w >= 0.0) {
                return Err(Error::Contract(format!("{name} must be >= 0, got {w}")));
            }
        }
        if !(0.0..=1.0).contains(&self.margin_ramp) {
            return Err(Error::Contract(format!(
                "margin_ramp must lie in [0, 1], got {}",
                self.margin_ramp
            )));
        }
        if !(0.0..=1.0).contains(&self.curriculum) {
            return Err(Error::Contract(format!(
                "curriculum must lie in [0, 1], got {}",
                self.curriculum
            )));
        }
        Ok(())
    }
}

/// Loss components recorded each training epoch.
#[derive(Clone, Copy, Debug)]
pub struct EpochLoss {
    pub bijection: f64,
    pub invertibility: f64,
    pub robustness: f64,
    pub total: f64,
    /// Samples skipped because their Jacobian estimate was rank-deficient.
    pub skipped_degenerate: usize,
}

/// Flow plus latent-to-parameter proposal model.
#[derive(Clone, Debug)]
pub struct TwincherLearner {
    pub model: TwincherModel,
    pub proposal_net: Mlp,
    pub train_cfg: TrainConfig,
    pub gn_cfg: GnConfig,
    pub loss_history: Vec<EpochLoss>,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean squared co-Lipschitz hinge over pairs:
/// `mean max(0, M ||p_a - p_b|| - ||u(y_a) - u(y_b)||)^2`,
/// with its exact gradient. At an exact latent collision the norm is not
/// differentiable; the zero subgradient is used there.
pub fn loss_bijection(
    model: &TwincherModel,
    dataset: &Dataset,
    pairs: &[(usize, usize)],
    margin: f64,
) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Contract("loss_bijection needs at least one pair".into()));
    }
    let n_p = model.latent_dim();
    let n_y = model.obs_dim();
    let inv_n = 1.0 / pairs.len() as f64;

    // Latents computed once per distinct point; pair contributions to the
    // gradient are accumulated into per-point upstream vectors so one
    // backprop per point covers every pair it participates in (backprop
    // is linear in the upstream).
    let mut latents: HashMap<usize, Vec<f64>> = HashMap::new();
    for &(ia, ib) in pairs {
        for idx in [ia, ib] {
            if let std::collections::hash_map::Entry::Vacant(e) = latents.entry(idx) {
                e.insert(model.latent(&dataset.points[idx].y)?);
            }
        }
    }

    let mut total = 0.0;
    let mut upstream: HashMap<usize, Vec<f64>> = HashMap::new();
    for &(ia, ib) in pairs {
        let a = &dataset.points[ia];
        let b = &dataset.points[ib];
        let ua = &latents[&ia];
        let ub = &latents[&ib];
        let dp = l2(&a.p, &b.p);
        let du_vec: Vec<f64> = ua.iter().zip(ub).map(|(x, y)| x - y).collect();
        let du = du_vec.iter().map(|v| v * v).sum::<f64>().sqrt();
        let hinge = margin * dp - du;
        if hinge <= 0.0 {
            continue;
        }
        total += hinge * hinge;
        // At an exact latent collision the norm has no derivative; use the
        // zero subgradient there.
        if du > 1e-15 {
            let coef = -2.0 * hinge * inv_n / du;
            let up_a = upstream.entry(ia).or_insert_with(|| vec![0.0; n_y]);
            for i in 0..n_p {
                up_a[i] += coef * du_vec[i];
            }
            let up_b = upstream.entry(ib).or_insert_with(|| vec![0.0; n_y]);
            for i in 0..n_p {
                up_b[i] -= coef * du_vec[i];
            }
        }
    }

    let mut grad = vec![0.0; model.param_count()];
    let mut touched: Vec<usize> = upstream.keys().copied().collect();
    touched.sort_unstable();
    for idx in touched {
        let (g, _) = model.backprop(&dataset.points[idx].y, &upstream[&idx])?;
        for (a, v) in grad.iter_mut().zip(&g) {
            *a += v;
        }
    }
    Ok((total * inv_n, grad))
}

/// Index of the smallest singular value, first occurrence on ties.
fn argmin_sigma(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Penalty pushing the smallest singular value of the latent-to-parameter
/// Jacobian `J_u = (du/dy) J` above `sigma_margin`:
/// `max(0, sigma_margin - sigma_min(J_u))^2`. The gradient uses the
/// singular-vector pair of the smallest singular value (first by index at
/// ties).
pub fn loss_local_invertibility(
    model: &TwincherModel,
    sample: &SamplePoint,
    sigma_margin: f64,
) -> Result<(f64, Vec<f64>)> {
    let jac_e = sample
        .jac
        .as_ref()
        .ok_or_else(|| Error::Contract("sample carries no Jacobian estimate".into()))?;
    let u_jac = model.u_jacobian(&sample.y)?;
    let j_u = &u_jac * jac_e;
    let svd = j_u.svd(true, true);
    let idx = argmin_sigma(svd.singular_values.as_slice());
    let sigma_min = svd.singular_values[idx];
    if sigma_min >= sigma_margin {
        return Ok((0.0, vec![0.0; model.param_count()]));
    }
    let penalty = (sigma_margin - sigma_min) * (sigma_margin - sigma_min);

    let u_mat = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v");
    let n_p = model.latent_dim();
    // d sigma = u^T (dU J) v  =>  weights[i,k] = u_i (J v)_k, scaled by
    // d penalty / d sigma = -2 (margin - sigma).
    let mut jv = vec![0.0; jac_e.nrows()];
    for r in 0..jac_e.nrows() {
        let mut acc = 0.0;
        for c in 0..n_p {
            acc += jac_e[(r, c)] * v_t[(idx, c)];
        }
        jv[r] = acc;
    }
    let scale = -2.0 * (sigma_margin - sigma_min);
    let weights = DMatrix::from_fn(n_p, model.obs_dim(), |i, k| scale * u_mat[(i, idx)] * jv[k]);
    let (_, grad) = model.u_jacobian_functional_grad(&sample.y, &weights)?;
    Ok((penalty, grad))
}

/// Sensitivity of the latent to nuisance directions: with `P` the
/// orthogonal projector onto the complement of `span(J)`, the loss is
/// `|| (du/dy) P ||_F^2`. Errors if the sample Jacobian is rank-deficient.
pub fn loss_robustness(model: &TwincherModel, sample: &SamplePoint) -> Result<(f64, Vec<f64>)> {
    let jac_e = sample
        .jac
        .as_ref()
        .ok_or_else(|| Error::Contract("sample carries no Jacobian estimate".into()))?;
    let n_y = model.obs_dim();
    let n_p_fwd = jac_e.ncols();

    let svd = jac_e.clone().svd(false, false);
    let sigma_max = svd
        .singular_values
        .iter()
        .cloned()
        .fold(0.0f64, f64::max);
    let sigma_min = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if svd.singular_values.len() < n_p_fwd || sigma_min <= 1e-10 * sigma_max.max(1.0) {
        return Err(Error::DegenerateJacobian {
            sigma_min: if sigma_min.is_finite() { sigma_min } else { 0.0 },
        });
    }

    // Orthonormal basis of span(J) via thin QR, then the complement
    // projector.
    let q = jac_e.clone().qr().q();
    let mut projector = DMatrix::identity(n_y, n_y);
    projector -= &q * q.transpose();

    let u_jac = model.u_jacobian(&sample.y)?;
    let a = &u_jac * &projector;
    let loss = a.iter().map(|v| v * v).sum::<f64>();
    // d ||U P||^2 / dU = 2 U P = 2 A (P is symmetric idempotent).
    let weights = a.scale(2.0);
    let (_, grad) = model.u_jacobian_functional_grad(&sample.y, &weights)?;
    Ok((loss, grad))
}

/// Top right-singular direction of `a` by power iteration on `a^T a`
/// (20 steps, tolerance 1e-8): the observation-space direction along which
/// the latent is most sensitive.
pub fn worst_case_direction(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.ncols();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 / (i + 1) as f64).collect();
    normalize(&mut v);
    let ata = a.transpose() * a;
    for _ in 0..20 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += ata[(i, k)] * v[k];
            }
            next[i] = acc;
        }
        normalize(&mut next);
        // Sign-align before the convergence test.
        let dot: f64 = next.iter().zip(&v).map(|(x, y)| x * y).sum();
        if dot < 0.0 {
            next.iter_mut().for_each(|x| *x = -*x);
        }
        let diff: f64 = next
            .iter()
            .zip(&v)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        v = next;
        if diff < 1e-8 {
            break;
        }
    }
    v
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Rank all within-dataset pairs by hinge violation score
/// `M ||p_a - p_b|| - ||u_a - u_b||` (descending) and return the top `k`.
/// Issues no forward queries; `adversarial_refine_steps` is reserved for
/// the dynamic regime and must be 0 here.
pub fn mine_pairs(
    model: &TwincherModel,
    dataset: &Dataset,
    k: usize,
    margin: f64,
    adversarial_refine_steps: usize,
) -> Result<Vec<(usize, usize)>> {
    if adversarial_refine_steps > 0 {
        // Static exploration closed the ledger; refining pairs would need
        // forward queries that are no longer available.
        return Err(Error::BudgetExhausted { used: 0, budget: 0 });
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    mine_pairs_within(model, dataset, &all, k, margin)
}

/// Pair mining over a subset of the dataset (the per-epoch batch).
fn mine_pairs_within(
    model: &TwincherModel,
    dataset: &Dataset,
    active: &[usize],
    k: usize,
    margin: f64,
) -> Result<Vec<(usize, usize)>> {
    let n = active.len();
    if n < 2 {
        return Err(Error::Contract("pair mining needs at least two points".into()));
    }
    let latents: Vec<Vec<f64>> = active
        .iter()
        .map(|&i| model.latent(&dataset.points[i].y))
        .collect::<Result<_>>()?;
    let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in (a + 1)..n {
            let (i, j) = (active[a].min(active[b]), active[a].max(active[b]));
            let score = margin * l2(&dataset.points[i].p, &dataset.points[j].p)
                - l2(&latents[a], &latents[b]);
            scored.push((score, i, j));
        }
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (a.1, a.2).cmp(&(b.1, b.2)))
    });
    scored.truncate(k);
    Ok(scored.into_iter().map(|(_, i, j)| (i, j)).collect())
}

/// Train the Twincher learner on a Jacobian-carrying dataset.
///
/// Each epoch mines the most-violating pairs, evaluates the weighted loss
/// `bij_weight * bijection + jac_weight * mean invertibility +
/// rob_weight * mean robustness` (the means over a seeded minibatch of
/// `samples_per_epoch` points), and takes one Adam step on the flow
/// parameters. The proposal network is then fitted to `(u(y_i), p_i)`.
pub fn train_twincher(
    dataset: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Stream,
) -> Result<TwincherLearner> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    if !dataset.has_jacobians() {
        return Err(Error::Contract(
            "twincher training needs Jacobian estimates on every sample".into(),
        ));
    }
    let n_p = dataset.param_dim();
    let n_y = dataset.obs_dim();
    if n_p >= n_y {
        return Err(Error::Contract(format!(
            "twincher needs n_p < n_y, got {n_p} >= {n_y}"
        )));
    }

    let arch_seed = rng.next_u64();
    let mut model = TwincherModel::new(
        arch_seed,
        n_y,
        n_p,
        cfg.flow.n_layers,
        cfg.flow.s_max,
        cfg.flow.init_scale,
    )?;
    let mut adam = AdamState::new(cfg.lr, model.param_count());
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let mut batch_rng = rng.substream(0x7ba7c4);

    if cfg.adversarial_refine_steps > 0 {
        return Err(Error::BudgetExhausted { used: 0, budget: 0 });
    }

    // Curriculum order: points sorted by distance from the box corner, so
    // the active window grows outward from one end of the parameter
    // domain.
    let corner = vec![-1.0; n_p];
    let mut curriculum_order: Vec<usize> = (0..dataset.len()).collect();
    curriculum_order.sort_by(|&a, &b| {
        l2(&dataset.points[a].p, &corner)
            .partial_cmp(&l2(&dataset.points[b].p, &corner))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let window_floor = 16.min(dataset.len()).max(2);
    let growth_epochs = (cfg.curriculum * cfg.epochs as f64).floor() as usize;

    let ramp_epochs = (cfg.margin_ramp * cfg.epochs as f64).floor() as usize;
    for epoch in 0..cfg.epochs {
        // Effective margins grow toward their targets over the ramp, per
        // the strategy of raising the demanded margin as training meets it.
        let ramp = if ramp_epochs == 0 {
            1.0
        } else {
            ((epoch + 1) as f64 / ramp_epochs as f64).min(1.0)
        };
        let margin = cfg.margin * ramp;
        let sigma_margin = cfg.sigma_margin * ramp;

        let grown = if growth_epochs == 0 {
            1.0
        } else {
            ((epoch + 1) as f64 / growth_epochs as f64).min(1.0)
        };
        let active_n = (window_floor as f64
            + grown * (dataset.len() - window_floor) as f64)
            .round() as usize;
        let active = &curriculum_order[..active_n.clamp(window_floor, dataset.len())];

        let pairs = mine_pairs_within(&model, dataset, active, cfg.pairs_per_epoch, margin)?;
        let mut grad = vec![0.0; model.param_count()];

        let (bij, g_bij) = loss_bijection(&model, dataset, &pairs, margin)?;
        for (g, v) in grad.iter_mut().zip(&g_bij) {
            *g += cfg.bij_weight * v;
        }

        let batch: Vec<usize> = (0..cfg.samples_per_epoch.min(active.len()))
            .map(|_| active[batch_rng.below(active.len() as u64) as usize])
            .collect();
        let mut jac_loss = 0.0;
        let mut rob_loss = 0.0;
        let mut skipped = 0usize;
        let mut rob_count = 0usize;
        if !batch.is_empty() && (cfg.jac_weight > 0.0 || cfg.rob_weight > 0.0) {
            let inv_b = 1.0 / batch.len() as f64;
            for &i in &batch {
                let sample = &dataset.points[i];
                if cfg.jac_weight > 0.0 {
                    let (l, g) = loss_local_invertibility(&model, sample, sigma_margin)?;
                    jac_loss += l * inv_b;
                    for (a, v) in grad.iter_mut().zip(&g) {
                        *a += cfg.jac_weight * inv_b * v;
                    }
                }
                if cfg.rob_weight > 0.0 {
                    match loss_robustness(&model, sample) {
                        Ok((l, g)) => {
                            rob_loss += l;
                            rob_count += 1;
                            for (a, v) in grad.iter_mut().zip(&g) {
                                *a += cfg.rob_weight * inv_b * v;
                            }
                        }
                        Err(Error::DegenerateJacobian { .. }) => skipped += 1,
                        Err(e) => return Err(e),
                    }
                }
            }
            if rob_count > 0 {
                rob_loss /= rob_count as f64;
            }
        }

        let total = cfg.bij_weight * bij + cfg.jac_weight * jac_loss + cfg.rob_weight * rob_loss;
        if !total.is_finite() {
            return Err(Error::NonFinite("twincher training loss".into()));
        }
        adam.step(model.theta_mut(), &grad)?;
        loss_history.push(EpochLoss {
            bijection: bij,
            invertibility: jac_loss,
            robustness: rob_loss,
            total,
            skipped_degenerate: skipped,
        });
    }

    // Proposal model on (u(y_i), p_i) pairs from the exploration data.
    let inputs: Vec<Vec<f64>> = dataset
        .points
        .iter()
        .map(|pt| model.latent(&pt.y))
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<f64>> = dataset.points.iter().map(|pt| pt.p.clone()).collect();
    let mut widths = vec![n_p];
    widths.extend_from_slice(&MLP_HIDDEN);
    widths.push(n_p);
    let mut proposal = Mlp::new(rng.next_u64(), &widths, MLP_OUT_SCALE)?;
    train_supervised(
        &mut proposal,
        &inputs,
        &targets,
        MLP_MAX_EPOCHS,
        MLP_PATIENCE,
        MLP_VAL_FRACTION,
        rng,
    )?;

    Ok(TwincherLearner {
        model,
        proposal_net: proposal,
        train_cfg: cfg.clone(),
        gn_cfg: GnConfig::default(),
        loss_history,
    })
}

/// Either trained learner, presenting the shared inference interface.
#[derive(Clone, Debug)]
pub enum Learner {
    Baseline(BaselineLearner),
    Twincher(TwincherLearner),
}

/// Learner discriminator used in records and CSV output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Baseline,
    Twincher,
}

impl std::fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LearnerKind::Baseline => write!(f, "baseline"),
            LearnerKind::Twincher => write!(f, "twincher"),
        }
    }
}

impl std::str::FromStr for LearnerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(LearnerKind::Baseline),
            "twincher" => Ok(LearnerKind::Twincher),
            other => Err(Error::Contract(format!("unknown learner kind '{other}'"))),
        }
    }
}

fn clip_box(mut p: Vec<f64>) -> Vec<f64> {
    for v in &mut p {
        *v = v.clamp(-1.0, 1.0);
    }
    p
}

impl Learner {
    pub fn kind(&self) -> LearnerKind {
        match self {
            Learner::Baseline(_) => LearnerKind::Baseline,
            Learner::Twincher(_) => LearnerKind::Twincher,
        }
    }

    pub fn gn_cfg(&self) -> &GnConfig {
        match self {
            Learner::Baseline(b) => &b.gn_cfg,
            Learner::Twincher(t) => &t.gn_cfg,
        }
    }

    /// Initial estimate from the observation alone; never queries the
    /// forward process, and the output is clipped into the box.
    pub fn propose(&self, y_star: &[f64]) -> Result<Vec<f64>> {
        match self {
            Learner::Baseline(b) => Ok(clip_box(b.inverse_net.forward(y_star)?)),
            Learner::Twincher(t) => {
                let u = t.model.latent(y_star)?;
                Ok(clip_box(t.proposal_net.forward(&u)?))
            }
        }
    }

    /// Propose then refine for `n_steps` Gauss-Newton iterations. The
    /// baseline refines the observation-space residual `y* - E(p)`; the
    /// Twincher computes `u* = u(y*)` once and refines `u* - u(E(p))`.
    pub fn solve_inverse(
        &self,
        model: &dyn ForwardModel,
        y_star: &[f64],
        n_steps: usize,
    ) -> std::result::Result<RefinementTrace, RefineAbort> {
        let p0 = self.propose(y_star).map_err(|error| RefineAbort {
            error,
            partial: RefinementTrace::default(),
        })?;
        let mut f = |p: &[f64]| model.eval(p);
        match self {
            Learner::Baseline(b) => solve::refine(&mut f, None, y_star, &p0, &b.gn_cfg, n_steps),
            Learner::Twincher(t) => {
                let u_star = t.model.latent(y_star).map_err(|error| RefineAbort {
                    error,
                    partial: RefinementTrace::default(),
                })?;
                let map = |y: &[f64]| t.model.latent(y);
                solve::refine(&mut f, Some(&map), &u_star, &p0, &t.gn_cfg, n_steps)
            }
        }
    }
}

/// Score a seeded pool of `64 * n` uniform candidates by the smallest
/// singular value of `du/dp` estimated from each candidate's nearest
/// stored Jacobian, ascending (least invertible first), and return the
/// `n` worst. Issues no forward queries.
pub fn acquire_candidates(
    learner: &TwincherLearner,
    dataset: &Dataset,
    n: usize,
    rng: &mut Stream,
) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::Contract("candidate count must be >= 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Contract("acquisition needs a non-empty dataset".into()));
    }
    let carriers: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.points[i].jac.is_some())
        .collect();
    if carriers.is_empty() {
        return Err(Error::Contract(
            "acquisition needs stored Jacobian estimates".into(),
        ));
    }

    let n_p = dataset.param_dim();
    let pool: Vec<Vec<f64>> = (0..64 * n)
        .map(|_| rng.uniform_vec(-1.0, 1.0, n_p))
        .collect();

    let mut u_jac_cache: HashMap<usize, DMatrix<f64>> = HashMap::new();
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(pool.len());
    for (ci, cand) in pool.iter().enumerate() {
        let nearest = *carriers
            .iter()
            .min_by(|&&a, &&b| {
                l2(&dataset.points[a].p, cand)
                    .partial_cmp(&l2(&dataset.points[b].p, cand))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap();
        let u_jac = match u_jac_cache.entry(nearest) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(learner.model.u_jacobian(&dataset.points[nearest].y)?)
            }
        };
        let j_u = &*u_jac * dataset.points[nearest].jac.as_ref().unwrap();
        let svd = j_u.svd(false, false);
        let sigma_min = svd
            .singular_values
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        scored.push((sigma_min, ci));
    }
    scored.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.1.cmp(&b.1))
    });
    Ok(scored
        .into_iter()
        .take(n)
        .map(|(_, ci)| pool[ci].clone())
        .collect())
}

fn mlp_json(net: &Mlp) -> String {
    let widths: Vec<String> = net.widths().iter().map(|w| w.to_string()).collect();
    let theta: Vec<String> = net.theta().iter().map(|&x| fmt_f64(x)).collect();
    format!(
        "{{\"widths\":[{}],\"out_scale\":{},\"theta\":[{}]}}",
        widths.join(","),
        fmt_f64(net.out_scale()),
        theta.join(","),
    )
}

#[derive(Deserialize)]
struct MlpDoc {
    widths: Vec<usize>,
    out_scale: f64,
    theta: Vec<f64>,
}

fn mlp_from_doc(doc: MlpDoc) -> Result<Mlp> {
    let mut net = Mlp::new(0, &doc.widths, doc.out_scale)?;
    if doc.theta.len() != net.param_count() {
        return Err(Error::DimensionMismatch(format!(
            "network document has {} parameters, widths need {}",
            doc.theta.len(),
            net.param_count()
        )));
    }
    net.set_theta(doc.theta)?;
    Ok(net)
}

fn gn_json(cfg: &GnConfig) -> String {
    format!(
        "{{\"lambda\":{},\"delta_max\":{},\"fd_step\":{},\"bounds\":[{},{}],\"max_steps\":{}}}",
        fmt_f64(cfg.lambda),
        fmt_f64(cfg.delta_max),
        fmt_f64(cfg.fd_step),
        fmt_f64(cfg.bounds.0),
        fmt_f64(cfg.bounds.1),
        cfg.max_steps,
    )
}

#[derive(Deserialize)]
struct GnDoc {
    lambda: f64,
    delta_max: f64,
    fd_step: f64,
    bounds: (f64, f64),
    max_steps: usize,
}

impl From<GnDoc> for GnConfig {
    fn from(d: GnDoc) -> Self {
        GnConfig {
            lambda: d.lambda,
            delta_max: d.delta_max,
            fd_step: d.fd_step,
            bounds: d.bounds,
            max_steps: d.max_steps,
        }
    }
}

impl Learner {
    /// One JSON container embedding the flow checkpoint, the network
    /// parameters, and the training configuration. Loss histories are
    /// transient diagnostics and are not persisted.
    pub fn to_checkpoint_json(&self) -> String {
        match self {
            Learner::Baseline(b) => format!(
                "{{\"format_version\":{},\"kind\":\"baseline\",\"gn\":{},\"inverse\":{}}}",
                LEARNER_FORMAT_VERSION,
                gn_json(&b.gn_cfg),
                mlp_json(&b.inverse_net),
            ),
            Learner::Twincher(t) => format!(
                "{{\"format_version\":{},\"kind\":\"twincher\",\"gn\":{},\"train_cfg\":{},\"flow\":{},\"proposal\":{}}}",
                LEARNER_FORMAT_VERSION,
                gn_json(&t.gn_cfg),
                serde_json::to_string(&t.train_cfg).expect("train config serializes"),
                t.model.to_checkpoint_json(),
                mlp_json(&t.proposal_net),
            ),
        }
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
            kind: LearnerKind,
        }
        let header: Header =
            serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        if header.format_version != LEARNER_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: header.format_version,
                expected: LEARNER_FORMAT_VERSION,
            });
        }
        match header.kind {
            LearnerKind::Baseline => {
                #[derive(Deserialize)]
                struct Doc {
                    gn: GnDoc,
                    inverse: MlpDoc,
                }
                let doc: Doc =
                    serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
                Ok(Learner::Baseline(BaselineLearner {
                    inverse_net: mlp_from_doc(doc.inverse)?,
                    gn_cfg: doc.gn.into(),
                }))
            }
            LearnerKind::Twincher => {
                #[derive(Deserialize)]
                struct Doc {
                    gn: GnDoc,
                    train_cfg: TrainConfig,
                    flow: serde_json::Value,
                    proposal: MlpDoc,
                }
                let doc: Doc =
                    serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
                let model = TwincherModel::from_checkpoint_json(&doc.flow.to_string())?;
                Ok(Learner::Twincher(TwincherLearner {
                    model,
                    proposal_net: mlp_from_doc(doc.proposal)?,
                    train_cfg: doc.train_cfg,
                    gn_cfg: doc.gn.into(),
                    loss_history: Vec::new(),
                }))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint_json(&text)
    }
}
