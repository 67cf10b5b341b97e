#![allow(dead_code)]

use mlqc::model::{Controller, CostModel, NoiseModel, NoiseTerm, ProblemInstance, SystemModel};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn m1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// `a = 0.5`, `b = c = 1`, `Q = I`, `W = 0.01 I`, no multiplicative noise.
pub fn scalar_problem() -> ProblemInstance {
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
            w: DMatrix::identity(2, 2) * 0.01,
            x0: m1(0.0),
        },
    )
    .unwrap()
}

pub struct Decoupled {
    pub p: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub l: DMatrix<f64>,
}

/// Classical control and (one-step predictor) filter Riccati recursions,
/// iterated separately from zero. Ignores multiplicative noise.
pub fn decoupled_oracle(problem: &ProblemInstance) -> Decoupled {
    let (n, m, p) = (problem.n(), problem.m(), problem.p());
    let (a, b, c) = (&problem.system.a, &problem.system.b, &problem.system.c);
    let q = &problem.cost.q;
    let w = &problem.noise.w;
    let q_xx = q.view((0, 0), (n, n)).into_owned();
    let q_xu = q.view((0, n), (n, m)).into_owned();
    let q_uu = q.view((n, n), (m, m)).into_owned();
    let w_xx = w.view((0, 0), (n, n)).into_owned();
    let w_xy = w.view((0, n), (n, p)).into_owned();
    let w_yy = w.view((n, n), (p, p)).into_owned();

    let control = |x: &DMatrix<f64>| {
        let cross = a.transpose() * x * b + &q_xu;
        let inv = (&q_uu + b.transpose() * x * b).try_inverse().unwrap();
        &q_xx + a.transpose() * x * a - &cross * inv * cross.transpose()
    };
    let filter = |x: &DMatrix<f64>| {
        let cross = a * x * c.transpose() + &w_xy;
        let inv = (&w_yy + c * x * c.transpose()).try_inverse().unwrap();
        &w_xx + a * x * a.transpose() - &cross * inv * cross.transpose()
    };
    let iterate = |f: &dyn Fn(&DMatrix<f64>) -> DMatrix<f64>| {
        let mut x = DMatrix::zeros(n, n);
        for _ in 0..1_000_000 {
            let next = f(&x);
            let done = (&next - &x).norm() <= 1e-15 * (1.0 + next.norm());
            x = (&next + next.transpose()) * 0.5;
            if done {
                return x;
            }
        }
        panic!("decoupled recursion did not settle");
    };
    let pm = iterate(&control);
    let sm = iterate(&filter);
    let k = -(&q_uu + b.transpose() * &pm * b).try_inverse().unwrap() * (b.transpose() * &pm * a + q_xu.transpose());
    let l = (a * &sm * c.transpose() + &w_xy) * (&w_yy + c * &sm * c.transpose()).try_inverse().unwrap();
    Decoupled { p: pm, s: sm, k, l }
}

/// Compensator for the pendulum without multiplicative noise, with state
/// feedback poles at 0.6, 0.4 and estimator poles at 0.3, 0.5.
pub fn pendulum_pole_placement(problem: &ProblemInstance) -> Controller {
    let k = DMatrix::from_row_slice(1, 2, &[-34.0, -9.5]);
    let l = DMatrix::from_row_slice(2, 1, &[1.15, 3.925]);
    Controller::from_gains(problem, k, l)
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Random `n = 2, m = 1, p = 1` problem with one noise term per matrix and
/// a random compensator. Not necessarily stable.
pub fn random_system(seed: u64, scale: f64) -> (ProblemInstance, Controller) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let term = |rows, cols, rng: &mut ChaCha8Rng| NoiseTerm::new(rng.random::<f64>(), normal(rng, rows, cols, scale));
    let noise_a = vec![term(2, 2, &mut rng)];
    let noise_b = vec![term(2, 1, &mut rng)];
    let noise_c = vec![term(1, 2, &mut rng)];
    let system = SystemModel {
        a: normal(&mut rng, 2, 2, scale),
        b: normal(&mut rng, 2, 1, scale),
        c: normal(&mut rng, 1, 2, scale),
        noise_a,
        noise_b,
        noise_c,
    };
    let g = normal(&mut rng, 3, 3, 1.0);
    let h = normal(&mut rng, 3, 3, 0.1);
    let problem = ProblemInstance::new(
        system,
        CostModel {
            q: &g * g.transpose() + DMatrix::identity(3, 3) * 0.1,
        },
        NoiseModel {
            w: &h * h.transpose(),
            x0: DMatrix::zeros(2, 2),
        },
    )
    .unwrap();
    let ctrl = Controller {
        f: normal(&mut rng, 2, 2, scale),
        k: normal(&mut rng, 1, 2, scale),
        l: normal(&mut rng, 2, 1, scale),
    };
    (problem, ctrl)
}

pub fn random_symmetric(seed: u64, dim: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = normal(&mut rng, dim, dim, 1.0);
    &g + g.transpose()
}
