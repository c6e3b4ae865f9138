//! Central finite-difference oracles for every analytic gradient.
//!
//! Each check builds a random configuration, evaluates the analytic
//! gradient, and compares against central differences of the value path.
//! The finite-difference side never touches the gradient code, so the two
//! routes stay independent.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::flow::TwincherModel;
use crate::learners::{
    loss_bijection, loss_local_invertibility, loss_robustness, Dataset, SamplePoint,
};
use crate::nets::Mlp;
use crate::rng::Stream;

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub rel_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tol
    }
}

const FD_STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

/// Relative L2 distance between the analytic and finite-difference
/// gradients.
fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let num: f64 = analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

fn fd_gradient(mut value: impl FnMut(&[f64]) -> f64, theta: &[f64]) -> Vec<f64> {
    let mut work = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for (j, g) in grad.iter_mut().enumerate() {
        let orig = work[j];
        work[j] = orig + FD_STEP;
        let up = value(&work);
        work[j] = orig - FD_STEP;
        let dn = value(&work);
        work[j] = orig;
        *g = (up - dn) / (2.0 * FD_STEP);
    }
    grad
}

fn random_flow(rng: &mut Stream, n_y: usize, n_p: usize, layers: usize) -> TwincherModel {
    let mut model = TwincherModel::new(rng.next_u64(), n_y, n_p, layers, 1.0, 0.0).unwrap();
    let theta: Vec<f64> = (0..model.param_count())
        .map(|_| rng.uniform(-0.6, 0.6))
        .collect();
    model.set_theta(theta).unwrap();
    model
}

/// Flow backprop (theta and input gradients) against central differences.
pub fn check_flow_backprop(seed: u64) -> Result<CheckReport> {
    let mut rng = Stream::new(seed, "gradcheck.flow");
    let model = random_flow(&mut rng, 4, 2, 6);
    let y = rng.uniform_vec(-1.0, 1.0, 4);
    let upstream = rng.uniform_vec(-1.0, 1.0, 4);

    let (grad_theta, grad_y) = model.backprop(&y, &upstream)?;
    let mut probe = model.clone();
    let fd_theta = fd_gradient(
        |theta| {
            probe.theta_mut().copy_from_slice(theta);
            let z = probe.transform(&y).unwrap().z();
            z.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        },
        model.theta(),
    );
    let fd_y = fd_gradient(
        |yy| {
            let z = model.transform(yy).unwrap().z();
            z.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        },
        &y,
    );
    let err = rel_err(&grad_theta, &fd_theta).max(rel_err(&grad_y, &fd_y));
    Ok(CheckReport {
        name: format!("flow backprop (seed {seed})"),
        rel_err: err,
        tol: TOL,
    })
}

/// MLP backprop against central differences.
pub fn check_mlp_backprop(seed: u64) -> Result<CheckReport> {
    let mut rng = Stream::new(seed, "gradcheck.mlp");
    let net = Mlp::new(rng.next_u64(), &[3, 8, 8, 2], 1.5)?;
    let x = rng.uniform_vec(-1.0, 1.0, 3);
    let upstream = rng.uniform_vec(-1.0, 1.0, 2);

    let (grad_theta, grad_x) = net.backprop(&x, &upstream)?;
    let mut probe = net.clone();
    let fd_theta = fd_gradient(
        |theta| {
            probe.theta_mut().copy_from_slice(theta);
            let yv = probe.forward(&x).unwrap();
            yv.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        },
        net.theta(),
    );
    let fd_x = fd_gradient(
        |xx| {
            let yv = net.forward(xx).unwrap();
            yv.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        },
        &x,
    );
    let err = rel_err(&grad_theta, &fd_theta).max(rel_err(&grad_x, &fd_x));
    Ok(CheckReport {
        name: format!("mlp backprop (seed {seed})"),
        rel_err: err,
        tol: TOL,
    })
}

/// Synthetic Jacobian-carrying dataset for the loss checks. The points do
/// not need to come from a real forward process; any full-rank Jacobians
/// exercise the gradient paths.
fn synthetic_dataset(rng: &mut Stream, n: usize, n_p: usize, n_y: usize) -> Dataset {
    let points = (0..n)
        .map(|_| {
            // Full-rank by construction: random matrix plus a scaled
            // identity block.
            let mut jac = DMatrix::from_fn(n_y, n_p, |_, _| rng.uniform(-0.5, 0.5));
            for d in 0..n_p {
                jac[(d, d)] += 1.0;
            }
            SamplePoint {
                p: rng.uniform_vec(-1.0, 1.0, n_p),
                y: rng.uniform_vec(-1.0, 1.0, n_y),
                jac: Some(jac),
            }
        })
        .collect();
    Dataset {
        points,
        source_budget: 0,
    }
}

/// Bijection hinge gradient against central differences. A large margin
/// keeps the hinge active so the gradient path is exercised.
pub fn check_loss_bijection(seed: u64) -> Result<CheckReport> {
    let mut rng = Stream::new(seed, "gradcheck.bij");
    let model = random_flow(&mut rng, 4, 2, 6);
    let dataset = synthetic_dataset(&mut rng, 4, 2, 4);
    let pairs = [(0usize, 1usize), (2, 3)];
    let margin = 4.0;

    let (_, grad) = loss_bijection(&model, &dataset, &pairs, margin)?;
    let mut probe = model.clone();
    let fd = fd_gradient(
        |theta| {
            probe.theta_mut().copy_from_slice(theta);
            loss_bijection(&probe, &dataset, &pairs, margin).unwrap().0
        },
        model.theta(),
    );
    Ok(CheckReport {
        name: format!("bijection loss (seed {seed})"),
        rel_err: rel_err(&grad, &fd),
        tol: TOL,
    })
}

/// Local-invertibility penalty gradient against central differences,
/// away from repeated singular values. The margin sits far above the
/// spectrum so the hinge stays active across the probe points.
pub fn check_loss_local_invertibility(seed: u64) -> Result<CheckReport> {
    let mut rng = Stream::new(seed, "gradcheck.jac");
    let model = random_flow(&mut rng, 4, 2, 6);
    let dataset = synthetic_dataset(&mut rng, 1, 2, 4);
    let sample = &dataset.points[0];
    let sigma_margin = 8.0;

    let (_, grad) = loss_local_invertibility(&model, sample, sigma_margin)?;
    let mut probe = model.clone();
    let fd = fd_gradient(
        |theta| {
            probe.theta_mut().copy_from_slice(theta);
            loss_local_invertibility(&probe, sample, sigma_margin)
                .unwrap()
                .0
        },
        model.theta(),
    );
    Ok(CheckReport {
        name: format!("local invertibility loss (seed {seed})"),
        rel_err: rel_err(&grad, &fd),
        tol: TOL,
    })
}

/// Robustness loss gradient against central differences.
pub fn check_loss_robustness(seed: u64) -> Result<CheckReport> {
    let mut rng = Stream::new(seed, "gradcheck.rob");
    let model = random_flow(&mut rng, 4, 2, 6);
    let dataset = synthetic_dataset(&mut rng, 1, 2, 4);
    let sample = &dataset.points[0];

    let (_, grad) = loss_robustness(&model, sample)?;
    let mut probe = model.clone();
    let fd = fd_gradient(
        |theta| {
            probe.theta_mut().copy_from_slice(theta);
            loss_robustness(&probe, sample).unwrap().0
        },
        model.theta(),
    );
    Ok(CheckReport {
        name: format!("robustness loss (seed {seed})"),
        rel_err: rel_err(&grad, &fd),
        tol: TOL,
    })
}

/// Run every check over `n_configs` seeded configurations.
pub fn run_all(base_seed: u64, n_configs: usize) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::with_capacity(5 * n_configs);
    for i in 0..n_configs as u64 {
        let seed = Stream::new(base_seed, "gradcheck.config")
            .substream(i)
            .next_u64();
        reports.push(check_flow_backprop(seed)?);
        reports.push(check_mlp_backprop(seed)?);
        reports.push(check_loss_bijection(seed)?);
        reports.push(check_loss_local_invertibility(seed)?);
        reports.push(check_loss_robustness(seed)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_on_a_few_seeds() {
        for report in run_all(7, 3).unwrap() {
            assert!(
                report.passed(),
                "{} failed: rel err {:.3e} (tol {:.0e})",
                report.name,
                report.rel_err,
                report.tol
            );
        }
    }
}
