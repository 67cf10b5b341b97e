//! Experiment instances, PI/VI comparisons and their CSV output.

mod rollout;

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{BenchError, SolveError};
use crate::model::{Controller, CostModel, NoiseModel, NoiseTerm, ProblemInstance, SystemModel};
use crate::moments::{build_augmented, matrix_spectral_radius, ValueCovarianceTuple};
use crate::riccati::{policy_iteration_solve, value_iteration_solve, Method, SolveOptions, SolveReport};

pub use rollout::{monte_carlo_cost, RolloutEstimate};

/// Initial errors at or below this leave a block's relative error at 0.
pub const DELTA_GUARD: f64 = 1e-300;

/// Error tag for instances that could not be generated.
pub const INSTANCE_FAILURE: &str = "instance_generation";

/// Redraw budget for [`random_problem`].
pub const MAX_REDRAWS: usize = 100;

/// Relative width at which the variance-scale bisection stops.
pub const BISECTION_TOL: f64 = 1e-10;

fn check_eta(eta: f64) -> Result<(), BenchError> {
    if (0.0..=1.0).contains(&eta) {
        Ok(())
    } else {
        Err(BenchError::Config(format!("noise level {eta} outside [0, 1]")))
    }
}

/// Forward-Euler pendulum with an input-dependent noise term of size `eta`.
pub fn pendulum_problem(eta: f64) -> Result<ProblemInstance, BenchError> {
    check_eta(eta)?;
    let system = SystemModel {
        a: DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 1.0, 0.95]),
        b: DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
        c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        noise_a: vec![],
        noise_b: vec![NoiseTerm::new(eta, DMatrix::from_row_slice(2, 1, &[0.0, 1.0]))],
        noise_c: vec![],
    };
    let cost = CostModel {
        q: DMatrix::identity(3, 3),
    };
    let noise = NoiseModel {
        w: DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.0, 0.01, 0.001])),
        x0: DMatrix::zeros(2, 2),
    };
    Ok(ProblemInstance::new(system, cost, noise)?)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Open-loop value-side operator split as `base + scale * noise`.
fn open_loop_operator_parts(problem: &ProblemInstance) -> Result<(DMatrix<f64>, DMatrix<f64>), BenchError> {
    let aug = build_augmented(problem, &Controller::open_loop(problem))?;
    let phi_t = aug.phi.transpose();
    let base = phi_t.kronecker(&phi_t);
    let mut noise = DMatrix::zeros(base.nrows(), base.ncols());
    for lift in aug.lifts() {
        let t = lift.matrix.transpose();
        noise += t.kronecker(&t) * lift.variance;
    }
    Ok((base, noise))
}

/// Scale `s` with `rho(base + s * noise) = 1`, or `None` if no finite scale
/// reaches it.
fn unit_radius_scale(base: &DMatrix<f64>, noise: &DMatrix<f64>) -> Result<Option<f64>, BenchError> {
    let rho = |s: f64| matrix_spectral_radius(&(base + noise * s));
    if rho(0.0)? >= 1.0 {
        return Ok(None);
    }
    let mut hi = 1.0;
    while rho(hi)? < 1.0 {
        hi *= 2.0;
        if hi > 1e12 {
            return Ok(None);
        }
    }
    let mut lo = 0.0;
    while hi - lo > BISECTION_TOL * hi {
        let mid = 0.5 * (lo + hi);
        if rho(mid)? < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

fn random_instance(system: SystemModel) -> Result<ProblemInstance, BenchError> {
    Ok(ProblemInstance::new(
        system,
        CostModel {
            q: DMatrix::identity(3, 3),
        },
        NoiseModel {
            w: DMatrix::identity(3, 3) * 0.01,
            x0: DMatrix::zeros(2, 2),
        },
    )?)
}

/// Random two-state instance whose open loop sits exactly on the
/// mean-square stability boundary before the variances are shrunk by a
/// uniform noise level. Returns the instance and that level.
pub fn random_problem(seed: u64) -> Result<(ProblemInstance, f64), BenchError> {
    let (scaled, eta) = random_problem_unshrunk(seed)?;
    let mut problem = scaled;
    let s = &mut problem.system;
    for t in s.noise_a.iter_mut().chain(s.noise_b.iter_mut()).chain(s.noise_c.iter_mut()) {
        t.sigma *= eta.sqrt();
    }
    Ok((problem, eta))
}

/// [`random_problem`] before the noise-level factor is applied: the open
/// loop has unit second-moment spectral radius.
pub fn random_problem_unshrunk(seed: u64) -> Result<(ProblemInstance, f64), BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_REDRAWS {
        let mut a = normal_matrix(&mut rng, 2, 2);
        let b = normal_matrix(&mut rng, 2, 1);
        let c = normal_matrix(&mut rng, 1, 2);
        let pa = normal_matrix(&mut rng, 2, 2);
        let pb = normal_matrix(&mut rng, 2, 1);
        let pc = normal_matrix(&mut rng, 1, 2);
        let target: f64 = rng.random();
        let variances: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let eta: f64 = rng.random();

        let rho_a = matrix_spectral_radius(&a)?;
        if rho_a <= f64::MIN_POSITIVE || !rho_a.is_finite() {
            continue;
        }
        a *= target / rho_a;

        let system = |scale: f64| SystemModel {
            a: a.clone(),
            b: b.clone(),
            c: c.clone(),
            noise_a: vec![NoiseTerm::new((variances[0] * scale).sqrt(), pa.clone())],
            noise_b: vec![NoiseTerm::new((variances[1] * scale).sqrt(), pb.clone())],
            noise_c: vec![NoiseTerm::new((variances[2] * scale).sqrt(), pc.clone())],
        };
        let (base, noise) = open_loop_operator_parts(&random_instance(system(1.0))?)?;
        if let Some(scale) = unit_radius_scale(&base, &noise)? {
            return Ok((random_instance(system(scale))?, eta));
        }
    }
    Err(BenchError::RetryExhausted { attempts: MAX_REDRAWS })
}

/// Relative errors `e^k = max_blocks ||M^k - M*|| / ||M^0 - M*||`.
pub fn convergence_metric(history: &[ValueCovarianceTuple], reference: &ValueCovarianceTuple) -> Vec<f64> {
    let Some(first) = history.first() else {
        return Vec::new();
    };
    let initial: Vec<f64> = first
        .blocks()
        .iter()
        .zip(reference.blocks())
        .map(|(m0, ms)| (*m0 - ms).norm())
        .collect();
    history
        .iter()
        .map(|x| {
            x.blocks()
                .iter()
                .zip(reference.blocks())
                .zip(&initial)
                .map(|((mk, ms), &d0)| if d0 <= DELTA_GUARD { 0.0 } else { (*mk - ms).norm() / d0 })
                .fold(0.0, f64::max)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub etas: Vec<f64>,
    pub count: usize,
    pub seed: u64,
    pub tol: f64,
    /// Per-method defaults when `None`.
    pub max_iter: Option<usize>,
    pub methods: Vec<Method>,
    /// Worker threads for batches; 0 lets rayon decide.
    pub jobs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            etas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            count: 100,
            seed: 0,
            tol: crate::riccati::DEFAULT_TOL,
            max_iter: None,
            methods: vec![Method::PolicyIteration, Method::ValueIteration],
            jobs: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.methods.is_empty() {
            return Err(BenchError::Config("no methods selected".into()));
        }
        if self.count == 0 {
            return Err(BenchError::Config("count must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(BenchError::Config(format!("tolerance {} must be positive", self.tol)));
        }
        self.etas.iter().try_for_each(|&e| check_eta(e))
    }

    fn options(&self, method: Method) -> SolveOptions {
        let defaults = SolveOptions::for_method(method);
        SolveOptions {
            tol: self.tol,
            max_iter: self.max_iter.unwrap_or(defaults.max_iter),
            keep_iterates: true,
        }
    }
}

/// One method's run on one instance.
#[derive(Clone, Debug)]
pub struct ConvergenceRecord {
    pub method: Method,
    pub converged: bool,
    pub iterations: usize,
    pub wall_seconds: f64,
    pub final_residual: f64,
    pub cost: f64,
    /// Relative error per iterate; empty when there is no reference.
    pub e_k: Vec<f64>,
    pub cum_seconds: Vec<f64>,
    /// Error tag and message when the solve failed.
    pub error: Option<(&'static str, String)>,
    pub report: Option<SolveReport>,
}

impl ConvergenceRecord {
    fn failed(method: Method, kind: &'static str, message: String, iterations: usize) -> Self {
        Self {
            method,
            converged: false,
            iterations,
            wall_seconds: f64::NAN,
            final_residual: f64::NAN,
            cost: f64::NAN,
            e_k: Vec::new(),
            cum_seconds: Vec::new(),
            error: Some((kind, message)),
            report: None,
        }
    }

    fn from_result(method: Method, result: Result<SolveReport, SolveError>) -> Self {
        match result {
            Ok(report) => Self {
                method,
                converged: report.converged,
                iterations: report.iterations,
                wall_seconds: report.wall_seconds(),
                final_residual: report.residual_norm,
                cost: report.cost,
                e_k: Vec::new(),
                cum_seconds: report.history.iter().map(|r| r.seconds).collect(),
                error: None,
                report: Some(report),
            },
            Err(e) => {
                let iterations = match &e {
                    SolveError::MaxIterationsExceeded { max_iter, .. } => *max_iter,
                    SolveError::Diverged { iteration } | SolveError::IterateNotStabilizing { iteration, .. } => {
                        *iteration
                    }
                    _ => 0,
                };
                Self::failed(method, e.kind(), e.to_string(), iterations)
            }
        }
    }
}

/// All methods on one instance, with the VI/PI ratios when both converged.
#[derive(Clone, Debug)]
pub struct Comparison {
    /// Generator seed for random instances; `None` for the pendulum.
    pub seed: Option<u64>,
    pub eta: f64,
    pub records: Vec<ConvergenceRecord>,
    pub iteration_ratio: Option<f64>,
    pub time_ratio: Option<f64>,
}

impl Comparison {
    pub fn record(&self, method: Method) -> Option<&ConvergenceRecord> {
        self.records.iter().find(|r| r.method == method)
    }

    pub fn any_error(&self) -> bool {
        self.records.iter().any(|r| r.error.is_some())
    }
}

/// Runs every configured method on `problem`. Solver failures are kept in
/// the records. The e^k reference is the PI solution, or VI's if PI failed.
pub fn run_comparison(problem: &ProblemInstance, eta: f64, seed: Option<u64>, config: &BenchConfig) -> Comparison {
    let mut records: Vec<ConvergenceRecord> = config
        .methods
        .iter()
        .map(|&method| {
            let opts = config.options(method);
            let result = match method {
                Method::PolicyIteration => policy_iteration_solve(problem, &Controller::open_loop(problem), &opts),
                Method::ValueIteration => value_iteration_solve(problem, &opts),
            };
            ConvergenceRecord::from_result(method, result)
        })
        .collect();

    let reference = [Method::PolicyIteration, Method::ValueIteration]
        .iter()
        .find_map(|m| records.iter().find(|r| r.method == *m).and_then(|r| r.report.as_ref()))
        .map(|r| r.tuple.clone());
    if let Some(reference) = reference {
        for rec in &mut records {
            if let Some(report) = &rec.report {
                rec.e_k = convergence_metric(&report.iterates, &reference);
            }
        }
    }

    let converged = |m| {
        records
            .iter()
            .find(|r| r.method == m && r.converged)
            .map(|r| (r.iterations as f64, r.wall_seconds))
    };
    let (iteration_ratio, time_ratio) =
        match (converged(Method::ValueIteration), converged(Method::PolicyIteration)) {
            (Some((vi_it, vi_t)), Some((pi_it, pi_t))) => (Some(vi_it / pi_it), Some(vi_t / pi_t)),
            _ => (None, None),
        };
    Comparison {
        seed,
        eta,
        records,
        iteration_ratio,
        time_ratio,
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, BenchError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| BenchError::Config(e.to_string()))
}

/// Pendulum comparison for each configured noise level, in order.
pub fn run_pendulum_batch(config: &BenchConfig) -> Result<Vec<Comparison>, BenchError> {
    config.validate()?;
    let problems = config
        .etas
        .iter()
        .map(|&eta| pendulum_problem(eta).map(|p| (eta, p)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(pool(config.jobs)?.install(|| {
        problems
            .par_iter()
            .map(|(eta, p)| run_comparison(p, *eta, None, config))
            .collect()
    }))
}

/// Random-instance comparisons for seeds `seed, seed + 1, ...`, returned in
/// instance order whatever the scheduling.
pub fn run_random_batch(config: &BenchConfig) -> Result<Vec<Comparison>, BenchError> {
    config.validate()?;
    Ok(pool(config.jobs)?.install(|| {
        (0..config.count)
            .into_par_iter()
            .map(|i| {
                let seed = config.seed.wrapping_add(i as u64);
                match random_problem(seed) {
                    Ok((problem, eta)) => run_comparison(&problem, eta, Some(seed), config),
                    Err(e) => Comparison {
                        seed: Some(seed),
                        eta: f64::NAN,
                        records: config
                            .methods
                            .iter()
                            .map(|&m| ConvergenceRecord::failed(m, INSTANCE_FAILURE, e.to_string(), 0))
                            .collect(),
                        iteration_ratio: None,
                        time_ratio: None,
                    },
                }
            })
            .collect()
    }))
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, num)
}

fn seed_field(seed: Option<u64>) -> String {
    seed.map_or_else(String::new, |s| s.to_string())
}

pub const SUMMARY_HEADER: [&str; 11] = [
    "seed",
    "eta",
    "method",
    "iterations",
    "wall_seconds",
    "final_residual",
    "cost_J",
    "converged",
    "iteration_ratio",
    "time_ratio",
    "error",
];

pub const TRACE_HEADER: [&str; 6] = ["seed", "eta", "method", "k", "e_k", "cum_seconds"];

/// One row per (instance, method). Ratios repeat on each row of an instance.
pub fn write_summary_csv<W: Write>(out: W, comparisons: &[Comparison]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for c in comparisons {
        for r in &c.records {
            w.write_record([
                seed_field(c.seed),
                num(c.eta),
                r.method.to_string(),
                r.iterations.to_string(),
                num(r.wall_seconds),
                num(r.final_residual),
                num(r.cost),
                r.converged.to_string(),
                opt_num(c.iteration_ratio),
                opt_num(c.time_ratio),
                r.error.as_ref().map_or_else(String::new, |(kind, _)| kind.to_string()),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long format: one row per (instance, method, iterate).
pub fn write_trace_csv<W: Write>(out: W, comparisons: &[Comparison]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for c in comparisons {
        for r in &c.records {
            for (k, (e, t)) in r.e_k.iter().zip(&r.cum_seconds).enumerate() {
                w.write_record([
                    seed_field(c.seed),
                    num(c.eta),
                    r.method.to_string(),
                    k.to_string(),
                    num(*e),
                    num(*t),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{build_second_moment_matrix, is_ms_stable, spectral_radius, Side};

    fn tuple(v: f64) -> ValueCovarianceTuple {
        let d = DMatrix::identity(2, 2) * v;
        ValueCovarianceTuple {
            p: d.clone(),
            p_hat: d.clone(),
            s: d.clone(),
            s_hat: d,
        }
    }

    #[test]
    fn pendulum_noise_level() {
        assert_eq!(pendulum_problem(1.0).unwrap().system.noise_b[0].sigma, 1.0);
        assert_eq!(pendulum_problem(0.5).unwrap().system.noise_b[0].sigma, 0.5);
        let p = pendulum_problem(0.0).unwrap();
        assert!(!p.system.has_multiplicative_noise());
        assert!(matches!(pendulum_problem(1.5), Err(BenchError::Config(_))));
    }

    #[test]
    fn metric_definition() {
        let reference = tuple(1.0);
        let e = convergence_metric(&[tuple(0.0), tuple(0.5), tuple(1.0)], &reference);
        assert_eq!(e, vec![1.0, 0.5, 0.0]);
    }

    #[test]
    fn metric_guard_for_blocks_starting_at_reference() {
        let reference = tuple(1.0);
        let mut x0 = tuple(0.0);
        x0.p_hat = reference.p_hat.clone();
        let mut x1 = tuple(0.5);
        x1.p_hat = DMatrix::identity(2, 2) * 7.0;
        let e = convergence_metric(&[x0, x1], &reference);
        assert_eq!(e, vec![1.0, 0.5]);
    }

    #[test]
    fn random_problem_is_on_the_boundary_before_shrinking() {
        for seed in [0u64, 1, 2, 99] {
            let (p, _) = random_problem_unshrunk(seed).unwrap();
            let aug = build_augmented(&p, &Controller::open_loop(&p)).unwrap();
            let rho = spectral_radius(&build_second_moment_matrix(&aug, Side::Value)).unwrap();
            assert!((rho.sqrt() - 1.0).abs() < 1e-8, "seed {seed}: {rho}");
        }
    }

    #[test]
    fn random_problem_is_deterministic_and_open_loop_stable() {
        let (a, eta_a) = random_problem(7).unwrap();
        let (b, eta_b) = random_problem(7).unwrap();
        assert_eq!(a, b);
        assert_eq!(eta_a, eta_b);
        assert!((0.0..1.0).contains(&eta_a));
        let aug = build_augmented(&a, &Controller::open_loop(&a)).unwrap();
        assert!(is_ms_stable(&aug).unwrap().stable);
        assert_ne!(random_problem(8).unwrap().0, a);
    }

    #[test]
    fn unreachable_scale_is_rejected() {
        let base = DMatrix::identity(4, 4) * 0.5;
        let noise = DMatrix::zeros(4, 4);
        assert_eq!(unit_radius_scale(&base, &noise).unwrap(), None);
    }

    #[test]
    fn single_method_has_no_ratio() {
        let (p, eta) = random_problem(3).unwrap();
        let config = BenchConfig {
            methods: vec![Method::PolicyIteration],
            ..BenchConfig::default()
        };
        let c = run_comparison(&p, eta, Some(3), &config);
        assert_eq!(c.records.len(), 1);
        assert!(c.iteration_ratio.is_none() && c.time_ratio.is_none());
        let r = &c.records[0];
        assert!(r.converged);
        assert_eq!(r.e_k[0], 1.0);
        assert_eq!(*r.e_k.last().unwrap(), 0.0);
        assert_eq!(r.e_k.len(), r.iterations + 1);
    }

    #[test]
    fn config_validation() {
        let ok = BenchConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            BenchConfig { methods: vec![], ..ok.clone() },
            BenchConfig { count: 0, ..ok.clone() },
            BenchConfig { etas: vec![-0.1], ..ok.clone() },
            BenchConfig { tol: 0.0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(BenchError::Config(_))));
        }
    }

    #[test]
    fn csv_layout() {
        let config = BenchConfig {
            count: 2,
            seed: 11,
            ..BenchConfig::default()
        };
        let comps = run_random_batch(&config).unwrap();
        let mut summary = Vec::new();
        write_summary_csv(&mut summary, &comps).unwrap();
        let text = String::from_utf8(summary).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SUMMARY_HEADER.join(","));
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("11,"));
        assert!(lines[3].starts_with("12,"));

        let mut trace = Vec::new();
        write_trace_csv(&mut trace, &comps).unwrap();
        let text = String::from_utf8(trace).unwrap();
        let rows = comps.iter().flat_map(|c| &c.records).map(|r| r.e_k.len()).sum::<usize>();
        assert_eq!(text.lines().count(), rows + 1);
    }
}
