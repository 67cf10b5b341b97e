//! Sampled closed-loop trajectories and the time-averaged cost estimator.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::BenchError;
use crate::linalg::psd_factor;
use crate::model::{Controller, ProblemInstance};

/// States beyond this magnitude abort the rollout.
pub const STATE_GUARD: f64 = 1e150;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutEstimate {
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    pub cost_mean: f64,
    pub cost_stderr: f64,
}

struct Sampler<'a> {
    problem: &'a ProblemInstance,
    ctrl: &'a Controller,
    w_factor: DMatrix<f64>,
    x0_factor: DMatrix<f64>,
}

impl Sampler<'_> {
    fn normal(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
        DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
    }

    /// Time-averaged cost of one trajectory of length `horizon`.
    fn trial(&self, index: usize, horizon: usize, seed: u64) -> Result<f64, BenchError> {
        let s = &self.problem.system;
        let (n, m, p) = (self.problem.n(), self.problem.m(), self.problem.p());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);

        let mut x = &self.x0_factor * Self::normal(&mut rng, n);
        let mut xhat = DVector::zeros(n);
        let mut xu = DVector::zeros(n + m);
        let mut a_t = DMatrix::zeros(n, n);
        let mut b_t = DMatrix::zeros(n, m);
        let mut c_t = DMatrix::zeros(p, n);
        let mut total = 0.0;

        for step in 0..horizon {
            let u = &self.ctrl.k * &xhat;
            xu.rows_mut(0, n).copy_from(&x);
            xu.rows_mut(n, m).copy_from(&u);
            total += xu.dot(&(&self.problem.cost.q * &xu));

            a_t.copy_from(&s.a);
            for t in &s.noise_a {
                let z: f64 = rng.sample(StandardNormal);
                a_t += &t.pattern * (t.sigma * z);
            }
            b_t.copy_from(&s.b);
            for t in &s.noise_b {
                let z: f64 = rng.sample(StandardNormal);
                b_t += &t.pattern * (t.sigma * z);
            }
            c_t.copy_from(&s.c);
            for t in &s.noise_c {
                let z: f64 = rng.sample(StandardNormal);
                c_t += &t.pattern * (t.sigma * z);
            }
            let wv = &self.w_factor * Self::normal(&mut rng, n + p);

            let y = &c_t * &x + wv.rows(n, p);
            let x_next = &a_t * &x + &b_t * &u + wv.rows(0, n);
            xhat = &self.ctrl.f * &xhat + &self.ctrl.l * y;
            x = x_next;

            if x.iter().chain(xhat.iter()).any(|v| !v.is_finite() || v.abs() > STATE_GUARD) {
                return Err(BenchError::UnstableRollout { trial: index, step });
            }
        }
        Ok(total / horizon as f64)
    }
}

/// Estimates the average cost of `ctrl` from `trials` rollouts of length
/// `horizon`. Trial `i` draws from its own stream of the seeded generator,
/// so the estimate does not depend on thread scheduling.
pub fn monte_carlo_cost(
    problem: &ProblemInstance,
    ctrl: &Controller,
    horizon: usize,
    trials: usize,
    seed: u64,
) -> Result<RolloutEstimate, BenchError> {
    if horizon == 0 || trials == 0 {
        return Err(BenchError::Config("horizon and trials must be at least 1".into()));
    }
    problem.check_dimensions()?;
    ctrl.check_dimensions(problem)?;
    let sampler = Sampler {
        problem,
        ctrl,
        w_factor: psd_factor(&problem.noise.w),
        x0_factor: psd_factor(&problem.noise.x0),
    };
    let costs = (0..trials)
        .into_par_iter()
        .map(|i| sampler.trial(i, horizon, seed))
        .collect::<Result<Vec<f64>, _>>()?;

    let count = costs.len() as f64;
    let mean = costs.iter().sum::<f64>() / count;
    let stderr = if costs.len() > 1 {
        let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (count - 1.0);
        (var / count).sqrt()
    } else {
        0.0
    };
    Ok(RolloutEstimate {
        horizon,
        trials,
        seed,
        cost_mean: mean,
        cost_stderr: stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostModel, NoiseModel, SystemModel};

    fn scalar(w: f64) -> ProblemInstance {
        let m1 = |v| DMatrix::from_element(1, 1, v);
        ProblemInstance::new(
            SystemModel {
                a: m1(0.5),
                b: m1(1.0),
                c: m1(1.0),
                noise_a: vec![],
                noise_b: vec![],
                noise_c: vec![],
            },
            CostModel {
                q: DMatrix::identity(2, 2),
            },
            NoiseModel {
                w: DMatrix::identity(2, 2) * w,
                x0: m1(0.0),
            },
        )
        .unwrap()
    }

    #[test]
    fn noiseless_zero_start_costs_nothing() {
        let p = scalar(0.0);
        let est = monte_carlo_cost(&p, &Controller::open_loop(&p), 50, 4, 1).unwrap();
        assert_eq!(est.cost_mean, 0.0);
        assert_eq!(est.cost_stderr, 0.0);
    }

    #[test]
    fn same_seed_same_estimate() {
        let p = scalar(0.01);
        let ctrl = Controller::open_loop(&p);
        let a = monte_carlo_cost(&p, &ctrl, 200, 8, 5).unwrap();
        let b = monte_carlo_cost(&p, &ctrl, 200, 8, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, monte_carlo_cost(&p, &ctrl, 200, 8, 6).unwrap());
    }

    #[test]
    fn unstable_controller_overflows() {
        let p = scalar(0.01);
        let ctrl = Controller {
            f: DMatrix::from_element(1, 1, 0.0),
            k: DMatrix::from_element(1, 1, 5.0),
            l: DMatrix::from_element(1, 1, 1.0),
        };
        assert!(matches!(
            monte_carlo_cost(&p, &ctrl, 100_000, 1, 0),
            Err(BenchError::UnstableRollout { trial: 0, .. })
        ));
    }

    #[test]
    fn zero_horizon_is_rejected() {
        let p = scalar(0.01);
        assert!(matches!(
            monte_carlo_cost(&p, &Controller::open_loop(&p), 0, 1, 0),
            Err(BenchError::Config(_))
        ));
    }
}
