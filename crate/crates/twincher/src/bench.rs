//! Reproducible benchmark protocols: complexity estimation, the headline
//! trial/sweep experiments, the noise-robustness scan, and the spiral
//! demo, all emitting CSV.
//!
//! Seed discipline: every random quantity derives from named streams so
//! that repeated runs are bit-identical and independent trials can run in
//! parallel. Per trial,
//! - complexity estimation uses `(entangler_seed, "trial.complexity")`,
//! - test targets use `(entangler_seed, "trial.test")` (shared by both
//!   learners on the same instance),
//! - exploration and training use `(train_seed, "trial.explore")` and
//!   `(train_seed, "trial.train")`.

use rayon::prelude::*;
use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, HarmonicEntangler, NoiseChannel, SpiralProcess};
use crate::learners::{
    explore_static, train_baseline, train_twincher, Learner, LearnerKind, TrainConfig,
};
use crate::report::{fmt_f64, Csv};
use crate::rng::Stream;
use crate::solve::{self, GnConfig};

/// Monte-Carlo estimate of the problem complexity
/// `C = -log P(random start converges to a random target)`.
#[derive(Clone, Copy, Debug)]
pub struct ComplexityEstimate {
    /// Nats; zero exactly when every trial succeeds, floored at
    /// `-log(1/n_trials)` when none do.
    pub c: f64,
    pub n_trials: usize,
    pub successes: usize,
    pub entangler_seed: u64,
}

/// Settings for [`estimate_complexity`].
#[derive(Clone, Copy, Debug)]
pub struct ComplexitySettings {
    pub n_trials: usize,
    pub max_descent_steps: usize,
    pub tol: f64,
}

impl Default for ComplexitySettings {
    fn default() -> Self {
        Self {
            n_trials: 4000,
            max_descent_steps: 50,
            tol: 1e-2,
        }
    }
}

/// Per trial, draw a target and a start uniformly from the box and run
/// clipped Gauss-Newton descent in observation space; a trial succeeds if
/// the final residual beats `settings.tol`.
pub fn estimate_complexity(
    model: &dyn ForwardModel,
    entangler_seed: u64,
    settings: &ComplexitySettings,
    gn_cfg: &GnConfig,
    rng: &mut Stream,
) -> Result<ComplexityEstimate> {
    if settings.n_trials == 0 {
        return Err(Error::Contract("complexity needs n_trials >= 1".into()));
    }
    let n_p = model.param_dim();
    let mut successes = 0usize;
    for _ in 0..settings.n_trials {
        let p_star = rng.uniform_vec(-1.0, 1.0, n_p);
        let p_in = rng.uniform_vec(-1.0, 1.0, n_p);
        let target = model.eval(&p_star)?;
        let mut f = |p: &[f64]| model.eval(p);
        let trace = solve::refine(
            &mut f,
            None,
            &target,
            &p_in,
            gn_cfg,
            settings.max_descent_steps,
        )
        .map_err(|abort| abort.error)?;
        if trace.final_residual() < settings.tol {
            successes += 1;
        }
    }
    let fraction = successes.max(1) as f64 / settings.n_trials as f64;
    let c = if successes == settings.n_trials {
        0.0
    } else {
        -fraction.ln()
    };
    Ok(ComplexityEstimate {
        c,
        n_trials: settings.n_trials,
        successes,
        entangler_seed,
    })
}

/// Entangler dimensions (the seed varies per trial).
#[derive(Clone, Copy, Debug)]
pub struct EntanglerSpec {
    pub n_p: usize,
    pub n_s: usize,
    pub e_n: usize,
    pub w_amp: f64,
}

impl Default for EntanglerSpec {
    fn default() -> Self {
        Self {
            n_p: 2,
            n_s: 4,
            e_n: 3,
            w_amp: 1.0,
        }
    }
}

impl EntanglerSpec {
    pub fn build(&self, seed: u64) -> Result<HarmonicEntangler> {
        HarmonicEntangler::new(seed, self.n_p, self.n_s, self.e_n, self.w_amp)
    }
}

/// Everything one trial needs.
#[derive(Clone, Debug)]
pub struct TrialConfig {
    pub entangler_seed: u64,
    pub entangler: EntanglerSpec,
    pub learner: LearnerKind,
    pub n_calls: u64,
    pub n_test: usize,
    pub n_refine: usize,
    pub train_seed: u64,
    pub gn: GnConfig,
    pub train: TrainConfig,
    pub complexity: ComplexitySettings,
    /// Worst-case step-`n_refine` residual below this is a success.
    pub success_tol: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            entangler_seed: 0,
            entangler: EntanglerSpec::default(),
            learner: LearnerKind::Baseline,
            n_calls: 1024,
            n_test: 1000,
            n_refine: 5,
            train_seed: 0,
            gn: GnConfig::default(),
            train: TrainConfig::default(),
            complexity: ComplexitySettings::default(),
            success_tol: 1e-2,
        }
    }
}

/// Outcome of one trial. `worst_residuals[t]` is the maximum over test
/// tasks of the observation-space residual after `t` refinement steps;
/// the trial succeeds when the final worst residual beats the tolerance.
#[derive(Clone, Debug)]
pub struct TrialRecord {
    pub entangler_seed: u64,
    pub learner: LearnerKind,
    pub n_calls: u64,
    pub train_seed: u64,
    pub c_estimate: f64,
    /// Steps `0..=n_refine`.
    pub worst_residuals: Vec<f64>,
    /// Mean over tasks per step (diagnostic; not part of the CSV schema).
    pub mean_residuals: Vec<f64>,
    pub success: bool,
}

/// Run one trial end to end: build the instance, estimate its complexity,
/// explore under the ledger, train the chosen learner, and evaluate on
/// `n_test` targets.
pub fn run_trial(cfg: &TrialConfig) -> Result<TrialRecord> {
    let e = cfg.entangler.build(cfg.entangler_seed)?;
    let mut c_rng = Stream::new(cfg.entangler_seed, "trial.complexity");
    let c = estimate_complexity(&e, cfg.entangler_seed, &cfg.complexity, &cfg.gn, &mut c_rng)?.c;
    run_trial_with_complexity(cfg, c)
}

/// Trial with an already-known complexity estimate (used by sweeps, which
/// share one estimate across every budget and learner on an instance).
pub fn run_trial_with_complexity(cfg: &TrialConfig, c_estimate: f64) -> Result<TrialRecord> {
    let e = cfg.entangler.build(cfg.entangler_seed)?;
    let with_jacobians = cfg.learner == LearnerKind::Twincher;
    let mut explore_rng = Stream::new(cfg.train_seed, "trial.explore");
    let dataset = explore_static(&e, cfg.n_calls, &mut explore_rng, with_jacobians, cfg.gn.fd_step)?;

    let mut train_rng = Stream::new(cfg.train_seed, "trial.train");
    let learner = match cfg.learner {
        LearnerKind::Baseline => {
            Learner::Baseline(train_baseline(&dataset, cfg.gn.clone(), &mut train_rng)?)
        }
        LearnerKind::Twincher => {
            let mut l = train_twincher(&dataset, &cfg.train, &mut train_rng)?;
            l.gn_cfg = cfg.gn.clone();
            Learner::Twincher(l)
        }
    };

    let steps = cfg.n_refine;
    let mut worst = vec![0.0f64; steps + 1];
    let mut mean = vec![0.0f64; steps + 1];
    let mut test_rng = Stream::new(cfg.entangler_seed, "trial.test");
    for _ in 0..cfg.n_test {
        let p_star = test_rng.uniform_vec(-1.0, 1.0, cfg.entangler.n_p);
        let y_star = e.forward(&p_star)?;
        let trace = learner
            .solve_inverse(&e, &y_star, steps)
            .map_err(|abort| abort.error)?;
        for t in 0..=steps {
            let r: f64 = trace.observations[t]
                .iter()
                .zip(&y_star)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            worst[t] = worst[t].max(r);
            mean[t] += r;
        }
    }
    for v in &mut mean {
        *v /= cfg.n_test as f64;
    }
    let success = worst[steps] < cfg.success_tol;
    Ok(TrialRecord {
        entangler_seed: cfg.entangler_seed,
        learner: cfg.learner,
        n_calls: cfg.n_calls,
        train_seed: cfg.train_seed,
        c_estimate,
        worst_residuals: worst,
        mean_residuals: mean,
        success,
    })
}

/// Grid protocol configuration.
#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub master_seed: u64,
    pub w_amps: Vec<f64>,
    pub n_calls_grid: Vec<u64>,
    pub seeds_per_cell: usize,
    pub learners: Vec<LearnerKind>,
    pub entangler: EntanglerSpec,
    pub n_test: usize,
    pub n_refine: usize,
    pub gn: GnConfig,
    pub train: TrainConfig,
    pub complexity: ComplexitySettings,
    pub success_tol: f64,
    /// Worker threads; 1 keeps execution strictly sequential.
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            w_amps: vec![0.5, 0.75, 1.0, 1.25, 1.5],
            n_calls_grid: vec![512, 1024, 2048, 4096, 8192],
            seeds_per_cell: 3,
            learners: vec![LearnerKind::Baseline, LearnerKind::Twincher],
            entangler: EntanglerSpec::default(),
            n_test: 1000,
            n_refine: 5,
            gn: GnConfig::default(),
            train: TrainConfig::default(),
            complexity: ComplexitySettings::default(),
            success_tol: 1e-2,
        jobs: 1,
        }
    }
}

/// Transition-band edges for one `(learner, n_calls)` stratum: the
/// smallest complexity with a failure and the largest with a success
/// (absent when the stratum has none).
#[derive(Clone, Debug)]
pub struct BandEdge {
    pub learner: LearnerKind,
    pub n_calls: u64,
    pub c_fail_min: Option<f64>,
    pub c_success_max: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct SweepResult {
    pub records: Vec<TrialRecord>,
    pub bands: Vec<BandEdge>,
    /// Human-readable notes for trials that failed to run at all.
    pub failures: Vec<String>,
}

/// Deterministic per-cell seed derivation.
fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    Stream::new(master, tag).substream(index).next_u64()
}

/// Run the full grid. Instances are keyed by `(w_amp index, seed index)`
/// so a given entangler is shared — and its complexity estimated once —
/// across every budget and learner.
pub fn sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    if cfg.w_amps.is_empty() || cfg.n_calls_grid.is_empty() || cfg.seeds_per_cell == 0 {
        return Err(Error::Contract("sweep grid must be non-empty".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;

    // Complexity per instance, computed once.
    let instances: Vec<(usize, usize)> = (0..cfg.w_amps.len())
        .flat_map(|w| (0..cfg.seeds_per_cell).map(move |s| (w, s)))
        .collect();
    let complexities: Vec<Result<(u64, f64)>> = pool.install(|| {
        instances
            .par_iter()
            .map(|&(w, s)| {
                let entangler_seed =
                    derive_seed(cfg.master_seed, "sweep.entangler", (w * cfg.seeds_per_cell + s) as u64);
                let spec = EntanglerSpec {
                    w_amp: cfg.w_amps[w],
                    ..cfg.entangler
                };
                let e = spec.build(entangler_seed)?;
                let mut rng = Stream::new(entangler_seed, "trial.complexity");
                let est =
                    estimate_complexity(&e, entangler_seed, &cfg.complexity, &cfg.gn, &mut rng)?;
                Ok((entangler_seed, est.c))
            })
            .collect()
    });
    let mut c_by_instance: HashMap<(usize, usize), (u64, f64)> = HashMap::new();
    for (inst, res) in instances.iter().zip(complexities) {
        c_by_instance.insert(*inst, res?);
    }

    // Trial tasks in deterministic grid order.
    struct Task {
        cfg: TrialConfig,
        c: f64,
    }
    let mut tasks = Vec::new();
    for (w, &w_amp) in cfg.w_amps.iter().enumerate() {
        for (n_idx, &n_calls) in cfg.n_calls_grid.iter().enumerate() {
            for s in 0..cfg.seeds_per_cell {
                for (l_idx, &learner) in cfg.learners.iter().enumerate() {
                    let (entangler_seed, c) = c_by_instance[&(w, s)];
                    let flat = ((w * cfg.n_calls_grid.len() + n_idx) * cfg.seeds_per_cell + s)
                        * cfg.learners.len()
                        + l_idx;
                    let train_seed = derive_seed(cfg.master_seed, "sweep.train", flat as u64);
                    tasks.push(Task {
                        cfg: TrialConfig {
                            entangler_seed,
                            entangler: EntanglerSpec {
                                w_amp,
                                ..cfg.entangler
                            },
                            learner,
                            n_calls,
                            n_test: cfg.n_test,
                            n_refine: cfg.n_refine,
                            train_seed,
                            gn: cfg.gn.clone(),
                            train: cfg.train.clone(),
                            complexity: cfg.complexity,
                            success_tol: cfg.success_tol,
                        },
                        c,
                    });
                }
            }
        }
    }

    let outcomes: Vec<std::result::Result<TrialRecord, (TrialConfig, Error)>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|task| {
                run_trial_with_complexity(&task.cfg, task.c)
                    .map_err(|e| (task.cfg.clone(), e))
            })
            .collect()
    });

    let mut result = SweepResult::default();
    for outcome in outcomes {
        match outcome {
            Ok(record) => result.records.push(record),
            Err((cfg, e)) => {
                // Record the failure as an explicit non-success row so the
                // stratum stays visible, and keep the diagnostic.
                result.failures.push(format!(
                    "trial entangler_seed={} learner={} n_calls={} train_seed={}: {e}",
                    cfg.entangler_seed, cfg.learner, cfg.n_calls, cfg.train_seed
                ));
                result.records.push(TrialRecord {
                    entangler_seed: cfg.entangler_seed,
                    learner: cfg.learner,
                    n_calls: cfg.n_calls,
                    train_seed: cfg.train_seed,
                    c_estimate: f64::NAN,
                    worst_residuals: vec![f64::INFINITY; cfg.n_refine + 1],
                    mean_residuals: vec![f64::INFINITY; cfg.n_refine + 1],
                    success: false,
                });
            }
        }
    }
    result.bands = band_edges(&result.records);
    Ok(result)
}

/// Transition-band edges recomputed from records.
pub fn band_edges(records: &[TrialRecord]) -> Vec<BandEdge> {
    let mut keys: Vec<(LearnerKind, u64)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.learner, r.n_calls)) {
            keys.push((r.learner, r.n_calls));
        }
    }
    keys.sort_by_key(|&(l, n)| (l != LearnerKind::Baseline, n));
    keys.iter()
        .map(|&(learner, n_calls)| {
            let mut c_fail_min: Option<f64> = None;
            let mut c_success_max: Option<f64> = None;
            for r in records {
                if r.learner != learner || r.n_calls != n_calls || r.c_estimate.is_nan() {
                    continue;
                }
                if r.success {
                    c_success_max =
                        Some(c_success_max.map_or(r.c_estimate, |v: f64| v.max(r.c_estimate)));
                } else {
                    c_fail_min =
                        Some(c_fail_min.map_or(r.c_estimate, |v: f64| v.min(r.c_estimate)));
                }
            }
            BandEdge {
                learner,
                n_calls,
                c_fail_min,
                c_success_max,
            }
        })
        .collect()
}

/// One row of the per-step residual table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualRow {
    pub entangler_seed: u64,
    pub learner: LearnerKind,
    pub n_calls: u64,
    pub train_seed: u64,
    pub step: usize,
    pub residual: f64,
}

/// Project records with `C < c_max` and `n_calls >= n_min` into a
/// step-indexed residual table. Pure projection; nothing is recomputed.
pub fn residual_curves(records: &[TrialRecord], c_max: f64, n_min: u64) -> Vec<ResidualRow> {
    let mut rows = Vec::new();
    for r in records {
        if !(r.c_estimate < c_max) || r.n_calls < n_min {
            continue;
        }
        for (step, &residual) in r.worst_residuals.iter().enumerate() {
            rows.push(ResidualRow {
                entangler_seed: r.entangler_seed,
                learner: r.learner,
                n_calls: r.n_calls,
                train_seed: r.train_seed,
                step,
                residual,
            });
        }
    }
    rows
}

/// One amplitude level of the noise scan.
#[derive(Clone, Copy, Debug)]
pub struct EtaScanRecord {
    pub amplitude: f64,
    pub dy_rms: f64,
    pub dp_rms: f64,
    pub ratio: f64,
}

/// Through-origin least-squares fit over the scan records.
#[derive(Clone, Copy, Debug, Default)]
pub struct EtaFit {
    pub slope: f64,
    pub r_squared: f64,
    pub max_ratio: f64,
    /// Records entering the fit (degenerate `dy_rms = 0` rows excluded).
    pub used: usize,
}

/// Perturb clean observations at each amplitude, re-infer the parameters,
/// and record RMS observation perturbation vs RMS inference deviation.
/// Returns records sorted by amplitude ascending plus the through-origin
/// slope fit.
pub fn eta_scan(
    learner: &Learner,
    model: &dyn ForwardModel,
    amplitudes: &[f64],
    n_samples: usize,
    swap_prob: f64,
    n_refine: usize,
    rng: &mut Stream,
) -> Result<(Vec<EtaScanRecord>, EtaFit)> {
    if amplitudes.is_empty() || n_samples == 0 {
        return Err(Error::Contract("eta scan needs amplitudes and samples".into()));
    }
    let n_p = model.param_dim();
    let n_y = model.obs_dim();
    let mut sorted: Vec<f64> = amplitudes.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut records = Vec::with_capacity(sorted.len());
    for &amplitude in &sorted {
        let mut channel = NoiseChannel::new(amplitude, swap_prob, rng.next_u64())?;
        let mut dy_sq = 0.0;
        let mut dp_sq = 0.0;
        for _ in 0..n_samples {
            let p_true = rng.uniform_vec(-1.0, 1.0, n_p);
            let y_clean = model.eval(&p_true)?;
            let y_noisy = channel.apply(&y_clean);
            let trace = learner
                .solve_inverse(model, &y_noisy, n_refine)
                .map_err(|abort| abort.error)?;
            let p_hat = trace.iterates.last().unwrap();
            dy_sq += y_noisy
                .iter()
                .zip(&y_clean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n_y as f64;
            dp_sq += p_hat
                .iter()
                .zip(&p_true)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n_p as f64;
        }
        let dy_rms = (dy_sq / n_samples as f64).sqrt();
        let dp_rms = (dp_sq / n_samples as f64).sqrt();
        records.push(EtaScanRecord {
            amplitude,
            dy_rms,
            dp_rms,
            ratio: if dy_rms > 0.0 { dp_rms / dy_rms } else { f64::NAN },
        });
    }
    Ok((records.clone(), fit_eta(&records)))
}

/// `slope = sum(dy dp) / sum(dy^2)`; uncentered R^2 against that line.
pub fn fit_eta(records: &[EtaScanRecord]) -> EtaFit {
    let usable: Vec<&EtaScanRecord> = records.iter().filter(|r| r.dy_rms > 0.0).collect();
    if usable.is_empty() {
        return EtaFit::default();
    }
    let sum_xy: f64 = usable.iter().map(|r| r.dy_rms * r.dp_rms).sum();
    let sum_xx: f64 = usable.iter().map(|r| r.dy_rms * r.dy_rms).sum();
    let slope = sum_xy / sum_xx;
    let ss_res: f64 = usable
        .iter()
        .map(|r| {
            let e = r.dp_rms - slope * r.dy_rms;
            e * e
        })
        .sum();
    let ss_tot: f64 = usable.iter().map(|r| r.dp_rms * r.dp_rms).sum();
    EtaFit {
        slope,
        r_squared: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 },
        max_ratio: usable.iter().fold(0.0f64, |m, r| m.max(r.ratio)),
        used: usable.len(),
    }
}

/// Spiral demo settings.
#[derive(Clone, Debug)]
pub struct SpiralDemoConfig {
    pub spiral: SpiralProcess,
    pub train_budget: u64,
    pub grid_resolution: usize,
    pub train: TrainConfig,
    pub seed: u64,
    pub path_points: usize,
}

impl Default for SpiralDemoConfig {
    fn default() -> Self {
        Self {
            spiral: SpiralProcess::default(),
            train_budget: 512,
            grid_resolution: 64,
            train: TrainConfig::default(),
            seed: 0,
            path_points: 512,
        }
    }
}

/// Output of the spiral demo.
#[derive(Clone, Debug)]
pub struct SpiralDemoResult {
    /// `(y1, y2, u1)` over the square grid.
    pub grid: Vec<(f64, f64, f64)>,
    /// `(p, u1(y(p)))` along the spiral path.
    pub path: Vec<(f64, f64)>,
    pub monotone: bool,
    /// Same flag for the untrained (initialization-state) model.
    pub initial_monotone: bool,
    pub diverged: bool,
    pub final_loss: Option<f64>,
}

fn path_is_strictly_monotone(path: &[(f64, f64)]) -> bool {
    if path.len() < 2 {
        return false;
    }
    let first = path[1].1 - path[0].1;
    if first == 0.0 {
        return false;
    }
    let sign = first.signum();
    path.windows(2)
        .all(|w| (w[1].1 - w[0].1) * sign > 0.0)
}

/// Train a 2-to-1 Twincher on spiral samples and map its latent over the
/// observation plane plus along the spiral path, reporting whether
/// `u1(y(p))` is strictly monotone.
pub fn spiral_demo(cfg: &SpiralDemoConfig) -> Result<SpiralDemoResult> {
    if cfg.grid_resolution < 16 {
        return Err(Error::Contract(format!(
            "grid resolution must be >= 16, got {}",
            cfg.grid_resolution
        )));
    }
    let spiral = cfg.spiral;
    let mut explore_rng = Stream::new(cfg.seed, "spiral.explore");
    let dataset = explore_static(
        &spiral,
        cfg.train_budget,
        &mut explore_rng,
        true,
        GnConfig::default().fd_step,
    )?;

    let path_p: Vec<f64> = (0..cfg.path_points)
        .map(|i| -1.0 + 2.0 * i as f64 / (cfg.path_points - 1) as f64)
        .collect();
    let path_of = |model: &crate::flow::TwincherModel| -> Result<Vec<(f64, f64)>> {
        path_p
            .iter()
            .map(|&p| {
                let y = spiral.forward(p)?;
                Ok((p, model.latent(&y)?[0]))
            })
            .collect()
    };

    let mut train_rng = Stream::new(cfg.seed, "spiral.train");
    let learner = match train_twincher(&dataset, &cfg.train, &mut train_rng) {
        Ok(l) => l,
        Err(Error::NonFinite(_)) => {
            return Ok(SpiralDemoResult {
                grid: Vec::new(),
                path: Vec::new(),
                monotone: false,
                initial_monotone: false,
                diverged: true,
                final_loss: None,
            });
        }
        Err(e) => return Err(e),
    };

    let initial_model = crate::flow::TwincherModel::new(
        learner.model.arch_seed(),
        2,
        1,
        cfg.train.flow.n_layers,
        cfg.train.flow.s_max,
        cfg.train.flow.init_scale,
    )?;
    let initial_monotone = path_is_strictly_monotone(&path_of(&initial_model)?);

    let path = path_of(&learner.model)?;
    let monotone = path_is_strictly_monotone(&path);

    let res = cfg.grid_resolution;
    let mut grid = Vec::with_capacity(res * res);
    for i in 0..res {
        let y1 = -0.95 + 1.9 * i as f64 / (res - 1) as f64;
        for j in 0..res {
            let y2 = -0.95 + 1.9 * j as f64 / (res - 1) as f64;
            let u1 = learner.model.latent(&[y1, y2])?[0];
            grid.push((y1, y2, u1));
        }
    }

    Ok(SpiralDemoResult {
        grid,
        path,
        monotone,
        initial_monotone,
        diverged: false,
        final_loss: learner.loss_history.last().map(|l| l.total),
    })
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

/// `trials.csv`: one row per trial.
pub fn trials_csv(records: &[TrialRecord]) -> String {
    let n_steps = records
        .first()
        .map_or(6, |r| r.worst_residuals.len());
    let step_cols: Vec<String> = (0..n_steps).map(|t| format!("r{t}")).collect();
    let mut header = vec!["entangler_seed", "learner", "n_calls", "train_seed", "C"];
    header.extend(step_cols.iter().map(|s| s.as_str()));
    header.push("success");
    let mut csv = Csv::new(&header);
    for r in records {
        let mut row = vec![
            r.entangler_seed.to_string(),
            r.learner.to_string(),
            r.n_calls.to_string(),
            r.train_seed.to_string(),
            fmt_f64(r.c_estimate),
        ];
        row.extend(r.worst_residuals.iter().map(|&v| fmt_f64(v)));
        row.push(r.success.to_string());
        csv.row(&row);
    }
    csv.into_string()
}

/// `bands.csv`: transition-band edges, empty fields when undefined.
pub fn bands_csv(bands: &[BandEdge]) -> String {
    let mut csv = Csv::new(&["learner", "n_calls", "c_fail_min", "c_success_max"]);
    for b in bands {
        csv.row(&[
            b.learner.to_string(),
            b.n_calls.to_string(),
            b.c_fail_min.map_or(String::new(), fmt_f64),
            b.c_success_max.map_or(String::new(), fmt_f64),
        ]);
    }
    csv.into_string()
}

/// `residuals.csv`: step-indexed residual table.
pub fn residuals_csv(rows: &[ResidualRow]) -> String {
    let mut csv = Csv::new(&[
        "entangler_seed",
        "learner",
        "n_calls",
        "train_seed",
        "step",
        "residual",
    ]);
    for r in rows {
        csv.row(&[
            r.entangler_seed.to_string(),
            r.learner.to_string(),
            r.n_calls.to_string(),
            r.train_seed.to_string(),
            r.step.to_string(),
            fmt_f64(r.residual),
        ]);
    }
    csv.into_string()
}

/// `eta.csv`: one row per amplitude.
pub fn eta_csv(records: &[EtaScanRecord]) -> String {
    let mut csv = Csv::new(&["amplitude", "dy_rms", "dp_rms", "ratio"]);
    for r in records {
        csv.row(&[
            fmt_f64(r.amplitude),
            fmt_f64(r.dy_rms),
            fmt_f64(r.dp_rms),
            fmt_f64(r.ratio),
        ]);
    }
    csv.into_string()
}

/// `spiral_grid.csv` and `spiral_path.csv`.
pub fn spiral_grid_csv(result: &SpiralDemoResult) -> String {
    let mut csv = Csv::new(&["y1", "y2", "u1"]);
    for &(y1, y2, u1) in &result.grid {
        csv.row(&[fmt_f64(y1), fmt_f64(y2), fmt_f64(u1)]);
    }
    csv.into_string()
}

pub fn spiral_path_csv(result: &SpiralDemoResult) -> String {
    let mut csv = Csv::new(&["p", "u1"]);
    for &(p, u1) in &result.path {
        csv.row(&[fmt_f64(p), fmt_f64(u1)]);
    }
    csv.into_string()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}
