//! Clipped, regularized Gauss-Newton refinement over a generic residual
//! map, plus forward-difference numerical Jacobians.
//!
//! One refinement step spends `n_p + 1` forward evaluations: `n_p`
//! forward-difference probes around the current iterate (whose own value
//! is already known) and one evaluation at the updated iterate. A trace
//! therefore accounts `1` initial evaluation plus `steps * (n_p + 1)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Settings for the Gauss-Newton refiner.
#[derive(Clone, Debug)]
pub struct GnConfig {
    /// Tikhonov regularizer added to the normal equations.
    pub lambda: f64,
    /// Euclidean clip applied to every update step.
    pub delta_max: f64,
    /// Forward-difference step for numerical Jacobians.
    pub fd_step: f64,
    /// Component-wise parameter box.
    pub bounds: (f64, f64),
    /// Iteration cap for descent-style callers.
    pub max_steps: usize,
}

impl Default for GnConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            delta_max: 0.1,
            fd_step: 1e-7,
            bounds: (-1.0, 1.0),
            max_steps: 50,
        }
    }
}

impl GnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !(self.delta_max > 0.0) || !(self.fd_step > 0.0) {
            return Err(Error::Contract(format!(
                "lambda, delta_max, fd_step must be positive: {self:?}"
            )));
        }
        if !(self.bounds.0 < self.bounds.1) {
            return Err(Error::Contract(format!("empty bounds {:?}", self.bounds)));
        }
        Ok(())
    }
}

/// A forward map under refinement. Errors (budget exhaustion, domain
/// violations) propagate to the caller.
pub type ForwardFn<'a> = dyn FnMut(&[f64]) -> Result<Vec<f64>> + 'a;

fn check_finite(y: &[f64], what: &str) -> Result<()> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// Forward-difference Jacobian together with the base value `f(p)`.
/// Spends exactly `p.len() + 1` evaluations of `f`.
pub fn jacobian_with_value(
    f: &mut ForwardFn<'_>,
    p: &[f64],
    fd_step: f64,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let base = f(p)?;
    check_finite(&base, "forward value")?;
    let jac = jacobian_about(f, p, &base, fd_step)?;
    Ok((jac, base))
}

/// Forward-difference Jacobian reusing an already-known base value.
/// Spends exactly `p.len()` evaluations of `f`.
pub fn jacobian_about(
    f: &mut ForwardFn<'_>,
    p: &[f64],
    base: &[f64],
    fd_step: f64,
) -> Result<DMatrix<f64>> {
    let n_p = p.len();
    let m = base.len();
    let mut jac = DMatrix::zeros(m, n_p);
    let mut probe = p.to_vec();
    for j in 0..n_p {
        probe[j] = p[j] + fd_step;
        let shifted = f(&probe)?;
        check_finite(&shifted, "forward probe")?;
        probe[j] = p[j];
        for i in 0..m {
            jac[(i, j)] = (shifted[i] - base[i]) / fd_step;
        }
    }
    Ok(jac)
}

/// Forward-difference Jacobian `J_ij = (f(p + d e_j)_i - f(p)_i) / d`.
/// Spends exactly `p.len() + 1` evaluations of `f`.
pub fn numerical_jacobian(
    f: &mut ForwardFn<'_>,
    p: &[f64],
    fd_step: f64,
) -> Result<DMatrix<f64>> {
    Ok(jacobian_with_value(f, p, fd_step)?.0)
}

/// One Gauss-Newton update: solve `(J^T J + lambda I) dp = J^T r`, clip
/// `dp` to `delta_max`, move, and project into the bounds box.
pub fn gn_step(p: &[f64], jac: &DMatrix<f64>, residual: &[f64], cfg: &GnConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n_p = p.len();
    if jac.ncols() != n_p || jac.nrows() != residual.len() {
        return Err(Error::Contract(format!(
            "jacobian {}x{} incompatible with p ({}) and residual ({})",
            jac.nrows(),
            jac.ncols(),
            n_p,
            residual.len()
        )));
    }
    check_finite(p, "gn_step iterate")?;
    check_finite(residual, "gn_step residual")?;
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gn_step jacobian".into()));
    }

    let r = DVector::from_column_slice(residual);
    let mut normal = jac.transpose() * jac;
    for i in 0..n_p {
        normal[(i, i)] += cfg.lambda;
    }
    let rhs = jac.transpose() * r;
    // lambda > 0 keeps the system positive definite.
    let delta = normal
        .cholesky()
        .ok_or_else(|| Error::NonFinite("normal equations factorization".into()))?
        .solve(&rhs);

    let norm = delta.norm();
    let scale = if norm > cfg.delta_max {
        cfg.delta_max / norm
    } else {
        1.0
    };
    Ok(p.iter()
        .zip(delta.iter())
        .map(|(pi, di)| (pi + di * scale).clamp(cfg.bounds.0, cfg.bounds.1))
        .collect())
}

/// Iterate history from [`refine`].
#[derive(Clone, Debug, Default)]
pub struct RefinementTrace {
    /// `p^(0) .. p^(n_steps)`.
    pub iterates: Vec<Vec<f64>>,
    /// Residual norm at each iterate, in the refinement space.
    pub residual_norms: Vec<f64>,
    /// Raw forward value `f(p^(t))` at each iterate.
    pub observations: Vec<Vec<f64>>,
    /// Evaluations spent establishing the starting residual (one).
    pub initial_evals: usize,
    /// Evaluations spent on refinement steps, `steps * (n_p + 1)`.
    pub step_evals: usize,
}

impl RefinementTrace {
    pub fn forward_evals(&self) -> usize {
        self.initial_evals + self.step_evals
    }

    pub fn final_residual(&self) -> f64 {
        *self.residual_norms.last().unwrap_or(&f64::INFINITY)
    }
}

/// A refinement aborted by a forward-map failure; carries the partial
/// trace accumulated before the failure.
#[derive(Debug)]
pub struct RefineAbort {
    pub error: Error,
    pub partial: RefinementTrace,
}

impl std::fmt::Display for RefineAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "refinement aborted after {} iterates: {}",
            self.partial.iterates.len(),
            self.error
        )
    }
}

impl std::error::Error for RefineAbort {}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Run `n_steps` of clipped Gauss-Newton on the residual
/// `target - map(f(p))`, where `map` is the identity when `None`
/// (refinement directly in observation space) or an observation-to-latent
/// map (refinement in latent space).
pub fn refine(
    f: &mut ForwardFn<'_>,
    map: Option<&dyn Fn(&[f64]) -> Result<Vec<f64>>>,
    target: &[f64],
    p0: &[f64],
    cfg: &GnConfig,
    n_steps: usize,
) -> std::result::Result<RefinementTrace, RefineAbort> {
    let mut trace = RefinementTrace::default();
    let abort = |error, partial| RefineAbort { error, partial };

    if let Err(e) = cfg.validate() {
        return Err(abort(e, trace));
    }
    for &v in p0 {
        if !(cfg.bounds.0..=cfg.bounds.1).contains(&v) {
            return Err(abort(
                Error::Contract(format!("starting point component {v} outside bounds")),
                trace,
            ));
        }
    }

    let apply_map = |y: &[f64]| -> Result<Vec<f64>> {
        match map {
            Some(g) => g(y),
            None => Ok(y.to_vec()),
        }
    };
    let residual_of = |m: &[f64]| -> Vec<f64> {
        target.iter().zip(m).map(|(t, v)| t - v).collect()
    };

    let mut p = p0.to_vec();
    let mut y = match f(&p) {
        Ok(y) => y,
        Err(e) => return Err(abort(e, trace)),
    };
    trace.initial_evals = 1;
    let mut mapped = match apply_map(&y) {
        Ok(m) => m,
        Err(e) => return Err(abort(e, trace)),
    };
    if mapped.len() != target.len() {
        return Err(abort(
            Error::Contract(format!(
                "target length {} != mapped observation length {}",
                target.len(),
                mapped.len()
            )),
            trace,
        ));
    }
    trace.iterates.push(p.clone());
    trace.residual_norms.push(norm(&residual_of(&mapped)));
    trace.observations.push(y.clone());

    for _ in 0..n_steps {
        // Composite forward differences around p, reusing the known value.
        let mut composite = |q: &[f64]| -> Result<Vec<f64>> { apply_map(&f(q)?) };
        let jac = match jacobian_about(&mut composite, &p, &mapped, cfg.fd_step) {
            Ok(j) => j,
            Err(e) => return Err(abort(e, trace)),
        };
        trace.step_evals += p.len();

        let residual = residual_of(&mapped);
        p = match gn_step(&p, &jac, &residual, cfg) {
            Ok(next) => next,
            Err(e) => return Err(abort(e, trace)),
        };

        y = match f(&p) {
            Ok(y) => y,
            Err(e) => return Err(abort(e, trace)),
        };
        trace.step_evals += 1;
        mapped = match apply_map(&y) {
            Ok(m) => m,
            Err(e) => return Err(abort(e, trace)),
        };
        trace.iterates.push(p.clone());
        trace.residual_norms.push(norm(&residual_of(&mapped)));
        trace.observations.push(y.clone());
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{ForwardModel, HarmonicEntangler, QueryLedger};
    use crate::rng::Stream;
    use approx::assert_relative_eq;

    fn identity(p: &[f64]) -> Result<Vec<f64>> {
        Ok(p.to_vec())
    }

    #[test]
    fn jacobian_of_identity() {
        let jac = numerical_jacobian(&mut identity, &[0.2, -0.3], 1e-7).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((jac[(i, j)] - expect).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn jacobian_of_linear_map() {
        let a = [[1.0, 2.0], [-0.5, 0.25], [3.0, -1.0]];
        let mut f = |p: &[f64]| -> Result<Vec<f64>> {
            Ok(a.iter().map(|row| row[0] * p[0] + row[1] * p[1]).collect())
        };
        let jac = numerical_jacobian(&mut f, &[0.1, 0.9], 1e-7).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((jac[(i, j)] - a[i][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn jacobian_of_entangler_matches_central_difference_oracle() {
        let e = HarmonicEntangler::new(5, 2, 4, 3, 1.0).unwrap();
        let p = [0.3, -0.4];
        let mut f = |q: &[f64]| e.eval(q);
        let jac = numerical_jacobian(&mut f, &p, 1e-7).unwrap();

        // Independent stencil: central differences with a coarser step.
        let h = 1e-5;
        for j in 0..2 {
            let mut pp = p;
            let mut pm = p;
            pp[j] += h;
            pm[j] -= h;
            let yp = e.forward(&pp).unwrap();
            let ym = e.forward(&pm).unwrap();
            for i in 0..4 {
                let central = (yp[i] - ym[i]) / (2.0 * h);
                assert!(
                    (jac[(i, j)] - central).abs() < 1e-3,
                    "J[{i},{j}] {} vs {central}",
                    jac[(i, j)]
                );
            }
        }
    }

    #[test]
    fn jacobian_spends_exactly_np_plus_one_evals() {
        let mut count = 0usize;
        let mut f = |p: &[f64]| -> Result<Vec<f64>> {
            count += 1;
            Ok(p.to_vec())
        };
        numerical_jacobian(&mut f, &[0.0, 0.0, 0.0], 1e-7).unwrap();
        assert_eq!(count, 4);
    }

    #[test]
    fn jacobian_propagates_non_finite() {
        let mut f = |_: &[f64]| -> Result<Vec<f64>> { Ok(vec![f64::NAN]) };
        assert!(matches!(
            numerical_jacobian(&mut f, &[0.0], 1e-7),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn gn_step_zero_residual_is_fixed_point() {
        let jac = DMatrix::identity(2, 2);
        let p = gn_step(&[0.3, -0.2], &jac, &[0.0, 0.0], &GnConfig::default()).unwrap();
        assert_eq!(p, vec![0.3, -0.2]);
    }

    #[test]
    fn gn_step_hand_solved_system() {
        let jac = DMatrix::identity(2, 2);
        let p = gn_step(&[0.0, 0.0], &jac, &[0.05, 0.0], &GnConfig::default()).unwrap();
        assert_relative_eq!(p[0], 0.05 / 1.001, max_relative = 1e-12);
        assert_eq!(p[1], 0.0);
    }

    #[test]
    fn gn_step_clips_to_delta_max() {
        let jac = DMatrix::identity(2, 2);
        let p = gn_step(&[0.0, 0.0], &jac, &[0.3, 0.0], &GnConfig::default()).unwrap();
        let norm = (p[0] * p[0] + p[1] * p[1]).sqrt();
        assert_relative_eq!(norm, 0.1, max_relative = 1e-12);
    }

    #[test]
    fn gn_step_projects_into_bounds() {
        let jac = DMatrix::identity(1, 1);
        let cfg = GnConfig {
            delta_max: 10.0,
            ..GnConfig::default()
        };
        let p = gn_step(&[0.95, ], &jac, &[5.0], &cfg).unwrap();
        assert_eq!(p[0], 1.0);
    }

    #[test]
    fn gn_step_rejects_non_finite() {
        let jac = DMatrix::identity(2, 2);
        assert!(gn_step(&[f64::NAN, 0.0], &jac, &[0.0, 0.0], &GnConfig::default()).is_err());
        assert!(gn_step(&[0.0, 0.0], &jac, &[f64::INFINITY, 0.0], &GnConfig::default()).is_err());
    }

    #[test]
    fn refine_at_solution_has_zero_residuals() {
        let p0 = [0.4, -0.1];
        let trace = refine(&mut identity, None, &p0, &p0, &GnConfig::default(), 3).unwrap();
        for r in &trace.residual_norms {
            assert!(*r < 1e-14);
        }
    }

    #[test]
    fn refine_converges_on_identity() {
        let target = [0.25, -0.15];
        let p0 = [0.21, -0.12];
        let trace = refine(&mut identity, None, &target, &p0, &GnConfig::default(), 3).unwrap();
        assert!(trace.final_residual() < 1e-4, "{:?}", trace.residual_norms);
    }

    #[test]
    fn refine_eval_accounting() {
        let mut count = 0usize;
        let mut f = |p: &[f64]| -> Result<Vec<f64>> {
            count += 1;
            Ok(p.to_vec())
        };
        let trace = refine(&mut f, None, &[0.5, 0.5], &[0.0, 0.0], &GnConfig::default(), 5).unwrap();
        assert_eq!(trace.step_evals, 5 * 3);
        assert_eq!(trace.initial_evals, 1);
        assert_eq!(trace.forward_evals(), count);
        assert_eq!(trace.iterates.len(), 6);
        assert_eq!(trace.residual_norms.len(), 6);
    }

    #[test]
    fn refine_iterates_stay_in_bounds_and_steps_are_clipped() {
        let target = [8.0, -8.0];
        let trace = refine(&mut identity, None, &target, &[0.0, 0.0], &GnConfig::default(), 12)
            .unwrap();
        for pair in trace.iterates.windows(2) {
            let step: f64 = pair[0]
                .iter()
                .zip(&pair[1])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(step <= 0.1 + 1e-12);
        }
        for p in &trace.iterates {
            assert!(p.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn refine_linear_full_rank_residual_non_increasing() {
        let a = [[1.3, 0.2], [-0.4, 0.9], [0.1, 0.5]];
        let mut f = |p: &[f64]| -> Result<Vec<f64>> {
            Ok(a.iter().map(|row| row[0] * p[0] + row[1] * p[1]).collect())
        };
        let p_true = [0.35, -0.55];
        let target: Vec<f64> = a
            .iter()
            .map(|row| row[0] * p_true[0] + row[1] * p_true[1])
            .collect();
        let trace = refine(&mut f, None, &target, &[0.0, 0.0], &GnConfig::default(), 8).unwrap();
        for w in trace.residual_norms.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", trace.residual_norms);
        }
        assert!(trace.final_residual() < 1e-3);
    }

    #[test]
    fn refine_starting_outside_bounds_is_rejected() {
        let err = refine(&mut identity, None, &[0.0], &[1.5], &GnConfig::default(), 2)
            .err()
            .unwrap();
        assert!(matches!(err.error, Error::Contract(_)));
    }

    #[test]
    fn refine_propagates_budget_errors_with_partial_trace() {
        let e = HarmonicEntangler::new(9, 2, 4, 3, 0.8).unwrap();
        let mut ledger = QueryLedger::new(7); // 1 initial + 2 full steps = 7
        let target = e.forward(&[0.2, 0.2]).unwrap();
        let mut f = |p: &[f64]| ledger.query(&e, p);
        let err = refine(&mut f, None, &target, &[0.0, 0.0], &GnConfig::default(), 5)
            .err()
            .unwrap();
        assert!(matches!(err.error, Error::BudgetExhausted { .. }));
        assert_eq!(err.partial.forward_evals(), 7);
        assert_eq!(err.partial.iterates.len(), 3); // p0 and two completed steps
    }

    #[test]
    fn refine_in_latent_space_uses_the_map() {
        // map = scale by 2 on the first coordinate only
        let map = |y: &[f64]| -> Result<Vec<f64>> { Ok(vec![2.0 * y[0]]) };
        let target = [0.8]; // in mapped space; solution p = (0.4, anything)
        let mut f = |p: &[f64]| -> Result<Vec<f64>> { Ok(p.to_vec()) };
        let trace = refine(
            &mut f,
            Some(&map),
            &target,
            &[0.0, 0.0],
            &GnConfig::default(),
            8,
        )
        .unwrap();
        assert!(trace.final_residual() < 1e-3);
        let last = trace.iterates.last().unwrap();
        assert!((last[0] - 0.4).abs() < 1e-3);
    }

    #[test]
    fn trace_lengths_agree() {
        let trace = refine(&mut identity, None, &[0.3], &[0.0], &GnConfig::default(), 4).unwrap();
        assert_eq!(trace.iterates.len(), trace.residual_norms.len());
        assert_eq!(trace.iterates.len(), trace.observations.len());
    }
}
