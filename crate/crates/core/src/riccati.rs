//! Coupled estimation/control Riccati equations and the two solvers for them.
//!
//! The unknown is `X = (P, Phat, S, Shat)`. The Q-function operators `G(X)`
//! (over `(x, u)`) and `H(X)` (over `(x, y)`) give the gains
//! `K(X) = -G_uu^-1 G_ux` and `L(X) = H_xy H_yy^-1`, and the residual
//!
//! ```text
//! R(X) = ( -P    + G_xx - G_xu G_uu^-1 G_ux,
//!          -Phat + E(X) + G_xu G_uu^-1 G_ux,
//!          -S    + H_xx - H_xy H_yy^-1 H_yx,
//!          -Shat + F(X) + H_xy H_yy^-1 H_yx )
//! E(X) = (A - L C)^T Phat (A - L C),   F(X) = (A + B K) Shat (A + B K)^T
//! ```
//!
//! Value iteration applies `X <- X + R(X)` from zero. Policy iteration
//! alternates exact evaluation of the compensator `(A + B K - L C, K, L)`
//! through the generalized Lyapunov equations with the gain update
//! `K <- K(X)`, `L <- L(X)`.

use std::fmt;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{MomentsError, SolveError};
use crate::linalg::{self, inner, symmetrize};
use crate::model::{Controller, ProblemInstance};
use crate::moments::{evaluate_policy, PolicyEvaluation, ValueCovarianceTuple, DUALITY_TOL};

/// Condition number above which `G_uu` or `H_yy` counts as singular.
pub const MAX_BLOCK_CONDITION: f64 = 1e12;

/// Value iteration reports divergence once any block norm passes this.
pub const OVERFLOW_GUARD: f64 = 1e100;

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER_VI: usize = 100_000;
pub const DEFAULT_MAX_ITER_PI: usize = 1_000;

/// `G(X)` of size `(n+m)^2` and `H(X)` of size `(n+p)^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct QFunctionPair {
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    n: usize,
}

impl QFunctionPair {
    pub fn g_xx(&self) -> DMatrix<f64> {
        self.g.view((0, 0), (self.n, self.n)).into_owned()
    }

    pub fn g_xu(&self) -> DMatrix<f64> {
        let m = self.g.ncols() - self.n;
        self.g.view((0, self.n), (self.n, m)).into_owned()
    }

    pub fn g_uu(&self) -> DMatrix<f64> {
        let m = self.g.ncols() - self.n;
        self.g.view((self.n, self.n), (m, m)).into_owned()
    }

    pub fn h_xx(&self) -> DMatrix<f64> {
        self.h.view((0, 0), (self.n, self.n)).into_owned()
    }

    pub fn h_xy(&self) -> DMatrix<f64> {
        let p = self.h.ncols() - self.n;
        self.h.view((0, self.n), (self.n, p)).into_owned()
    }

    pub fn h_yy(&self) -> DMatrix<f64> {
        let p = self.h.ncols() - self.n;
        self.h.view((self.n, self.n), (p, p)).into_owned()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gains {
    /// Control gain, `m x n`.
    pub k: DMatrix<f64>,
    /// Estimator gain, `n x p`.
    pub l: DMatrix<f64>,
}

fn weighted_congruences<'a>(
    terms: impl Iterator<Item = (f64, &'a DMatrix<f64>)>,
    inner_mat: &DMatrix<f64>,
    transpose_left: bool,
) -> Option<DMatrix<f64>> {
    terms
        .map(|(var, pat)| {
            if transpose_left {
                pat.transpose() * inner_mat * pat * var
            } else {
                pat * inner_mat * pat.transpose() * var
            }
        })
        .reduce(|a, b| a + b)
}

fn add_opt(base: &mut DMatrix<f64>, extra: Option<DMatrix<f64>>) {
    if let Some(e) = extra {
        *base += e;
    }
}

/// The four blocks the gains depend on. None of them involve the gains.
struct GainBlocks {
    g_ux: DMatrix<f64>,
    g_uu: DMatrix<f64>,
    h_xy: DMatrix<f64>,
    h_yy: DMatrix<f64>,
}

fn gain_blocks(x: &ValueCovarianceTuple, problem: &ProblemInstance) -> GainBlocks {
    let s = &problem.system;
    let (a, b, c) = (&s.a, &s.b, &s.c);
    let p_sum = &x.p + &x.p_hat;
    let s_sum = &x.s + &x.s_hat;

    let g_ux = problem.q_ux() + b.transpose() * &x.p * a;
    let mut g_uu = problem.q_uu() + b.transpose() * &x.p * b;
    add_opt(
        &mut g_uu,
        weighted_congruences(s.noise_b.iter().map(|t| (t.variance(), &t.pattern)), &p_sum, true),
    );

    let h_xy = problem.w_xy() + a * &x.s * c.transpose();
    let mut h_yy = problem.w_yy() + c * &x.s * c.transpose();
    add_opt(
        &mut h_yy,
        weighted_congruences(s.noise_c.iter().map(|t| (t.variance(), &t.pattern)), &s_sum, false),
    );

    GainBlocks {
        g_ux,
        g_uu: symmetrize(&g_uu),
        h_xy,
        h_yy: symmetrize(&h_yy),
    }
}

fn guard(block: &'static str, m: &DMatrix<f64>) -> Result<(), SolveError> {
    let condition = linalg::condition_number(m);
    if condition > MAX_BLOCK_CONDITION {
        Err(SolveError::SingularBlock { block, condition })
    } else {
        Ok(())
    }
}

fn gains_from_blocks(blocks: &GainBlocks) -> Result<Gains, SolveError> {
    guard("G_uu", &blocks.g_uu)?;
    guard("H_yy", &blocks.h_yy)?;
    let k = blocks
        .g_uu
        .clone()
        .lu()
        .solve(&(-&blocks.g_ux))
        .ok_or(SolveError::SingularBlock {
            block: "G_uu",
            condition: f64::INFINITY,
        })?;
    // L H_yy = H_xy  <=>  H_yy^T L^T = H_xy^T
    let l_t = blocks
        .h_yy
        .transpose()
        .lu()
        .solve(&blocks.h_xy.transpose())
        .ok_or(SolveError::SingularBlock {
            block: "H_yy",
            condition: f64::INFINITY,
        })?;
    Ok(Gains { k, l: l_t.transpose() })
}

/// `K(X) = -G_uu(X)^-1 G_ux(X)` and `L(X) = H_xy(X) H_yy(X)^-1`.
pub fn gain_operators(x: &ValueCovarianceTuple, problem: &ProblemInstance) -> Result<Gains, SolveError> {
    gains_from_blocks(&gain_blocks(x, problem))
}

/// Full `G(X)` and `H(X)`, with `l` entering `G_xx` and `k` entering `H_xx`.
pub fn q_operators(
    x: &ValueCovarianceTuple,
    problem: &ProblemInstance,
    k: &DMatrix<f64>,
    l: &DMatrix<f64>,
) -> QFunctionPair {
    let (n, m, p) = (problem.n(), problem.m(), problem.p());
    let s = &problem.system;
    let (a, b, c) = (&s.a, &s.b, &s.c);
    let blocks = gain_blocks(x, problem);
    let p_sum = &x.p + &x.p_hat;
    let s_sum = &x.s + &x.s_hat;

    let mut g_xx = problem.q_xx() + a.transpose() * &x.p * a;
    add_opt(
        &mut g_xx,
        weighted_congruences(s.noise_a.iter().map(|t| (t.variance(), &t.pattern)), &p_sum, true),
    );
    let lc: Vec<DMatrix<f64>> = s.noise_c.iter().map(|t| l * &t.pattern).collect();
    add_opt(
        &mut g_xx,
        weighted_congruences(s.noise_c.iter().map(|t| t.variance()).zip(lc.iter()), &x.p_hat, true),
    );
    let g_xu = problem.q_xu() + a.transpose() * &x.p * b;

    let mut h_xx = problem.w_xx() + a * &x.s * a.transpose();
    add_opt(
        &mut h_xx,
        weighted_congruences(s.noise_a.iter().map(|t| (t.variance(), &t.pattern)), &s_sum, false),
    );
    let bk: Vec<DMatrix<f64>> = s.noise_b.iter().map(|t| &t.pattern * k).collect();
    add_opt(
        &mut h_xx,
        weighted_congruences(s.noise_b.iter().map(|t| t.variance()).zip(bk.iter()), &x.s_hat, false),
    );
    let h_yx = problem.w_yx() + c * &x.s * a.transpose();

    let mut g = DMatrix::zeros(n + m, n + m);
    g.view_mut((0, 0), (n, n)).copy_from(&g_xx);
    g.view_mut((0, n), (n, m)).copy_from(&g_xu);
    g.view_mut((n, 0), (m, n)).copy_from(&blocks.g_ux);
    g.view_mut((n, n), (m, m)).copy_from(&blocks.g_uu);

    let mut h = DMatrix::zeros(n + p, n + p);
    h.view_mut((0, 0), (n, n)).copy_from(&h_xx);
    h.view_mut((0, n), (n, p)).copy_from(&blocks.h_xy);
    h.view_mut((n, 0), (p, n)).copy_from(&h_yx);
    h.view_mut((n, n), (p, p)).copy_from(&blocks.h_yy);

    QFunctionPair {
        g: symmetrize(&g),
        h: symmetrize(&h),
        n,
    }
}

/// `X + R(X)`, computed directly rather than as a difference.
fn riccati_map(x: &ValueCovarianceTuple, problem: &ProblemInstance) -> Result<ValueCovarianceTuple, SolveError> {
    let s = &problem.system;
    let gains = gain_operators(x, problem)?;
    let q = q_operators(x, problem, &gains.k, &gains.l);

    // G_xu G_uu^-1 G_ux = -G_xu K and H_xy H_yy^-1 H_yx = L H_yx
    let control_schur = -(q.g_xu() * &gains.k);
    let h_yx = q.h_xy().transpose();
    let estimation_schur = &gains.l * h_yx;

    let a_lc = &s.a - &gains.l * &s.c;
    let a_bk = &s.a + &s.b * &gains.k;
    let e = a_lc.transpose() * &x.p_hat * &a_lc;
    let f = &a_bk * &x.s_hat * a_bk.transpose();

    Ok(ValueCovarianceTuple {
        p: symmetrize(&(q.g_xx() - &control_schur)),
        p_hat: symmetrize(&(e + control_schur)),
        s: symmetrize(&(q.h_xx() - &estimation_schur)),
        s_hat: symmetrize(&(f + estimation_schur)),
    })
}

/// `R(X)`, one block per row of the coupled equations.
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiResidual(pub ValueCovarianceTuple);

impl RiccatiResidual {
    pub fn max_norm(&self) -> f64 {
        self.0.max_block_norm()
    }
}

pub fn riccati_residual(x: &ValueCovarianceTuple, problem: &ProblemInstance) -> Result<RiccatiResidual, SolveError> {
    let next = riccati_map(x, problem)?;
    Ok(RiccatiResidual(next.zip_with(x, |a, b| symmetrize(&(a - b)))))
}

/// One value iteration update `X + R(X)`.
pub fn value_iteration_step(x: &ValueCovarianceTuple, problem: &ProblemInstance) -> Result<ValueCovarianceTuple, SolveError> {
    riccati_map(x, problem)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PolicyIteration,
    ValueIteration,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::PolicyIteration => "policy_iteration",
            Method::ValueIteration => "value_iteration",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Keep every iterate in [`SolveReport::iterates`] (needed for traces).
    pub keep_iterates: bool,
}

impl SolveOptions {
    pub fn for_method(method: Method) -> Self {
        let max_iter = match method {
            Method::PolicyIteration => DEFAULT_MAX_ITER_PI,
            Method::ValueIteration => DEFAULT_MAX_ITER_VI,
        };
        Self {
            tol: DEFAULT_TOL,
            max_iter,
            keep_iterates: false,
        }
    }

    pub fn keep_iterates(mut self, keep: bool) -> Self {
        self.keep_iterates = keep;
        self
    }
}

/// Per-iterate bookkeeping. Entry `k` describes `X^k`; entry 0 is the
/// starting point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub k: usize,
    /// `max_block_distance(X^k, X^{k-1})`; absent for `k = 0`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Cumulative wall-clock seconds since the solve started.
    pub seconds: f64,
    /// Cost of the policy evaluated at this iterate (policy iteration).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
    /// `|<P',W'> - <S',Q'>|` of that evaluation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duality_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_k: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub method: Method,
    pub converged: bool,
    pub iterations: usize,
    #[serde(rename = "cost_J")]
    pub cost: f64,
    pub residual_norm: f64,
    /// Duality gap of the final controller's evaluation.
    pub duality_gap: f64,
    pub controller: Controller,
    pub tuple: ValueCovarianceTuple,
    pub history: Vec<IterationRecord>,
    #[serde(skip)]
    pub iterates: Vec<ValueCovarianceTuple>,
    #[serde(skip)]
    pub final_evaluation: Option<PolicyEvaluation>,
}

impl SolveReport {
    pub fn wall_seconds(&self) -> f64 {
        self.history.last().map_or(0.0, |r| r.seconds)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("solve report serializes")
    }
}

struct Trace {
    start: Instant,
    keep_iterates: bool,
    history: Vec<IterationRecord>,
    iterates: Vec<ValueCovarianceTuple>,
}

impl Trace {
    fn new(keep_iterates: bool) -> Self {
        Self {
            start: Instant::now(),
            keep_iterates,
            history: Vec::new(),
            iterates: Vec::new(),
        }
    }

    fn push(&mut self, x: &ValueCovarianceTuple, delta: Option<f64>, eval: Option<&PolicyEvaluation>) {
        self.history.push(IterationRecord {
            k: self.history.len(),
            delta,
            seconds: self.start.elapsed().as_secs_f64(),
            cost: eval.map(|e| e.cost),
            duality_gap: eval.map(|e| e.duality_gap),
            e_k: None,
        });
        if self.keep_iterates {
            self.iterates.push(x.clone());
        }
    }
}

fn finish(
    method: Method,
    problem: &ProblemInstance,
    x: ValueCovarianceTuple,
    trace: Trace,
) -> Result<SolveReport, SolveError> {
    let gains = gain_operators(&x, problem)?;
    let controller = Controller::from_gains(problem, gains.k, gains.l);
    let evaluation = evaluate_policy(problem, &controller).map_err(|e| match e {
        MomentsError::NotMsStable { radius } => SolveError::IterateNotStabilizing {
            iteration: trace.history.len(),
            radius,
        },
        other => other.into(),
    })?;
    let residual_norm = riccati_residual(&x, problem)?.max_norm();
    Ok(SolveReport {
        method,
        converged: true,
        iterations: trace.history.len() - 1,
        cost: evaluation.cost,
        residual_norm,
        duality_gap: evaluation.duality_gap,
        controller,
        tuple: x,
        history: trace.history,
        iterates: trace.iterates,
        final_evaluation: Some(evaluation),
    })
}

/// Value iteration `X^{k+1} = X^k + R(X^k)` from `X^0 = 0`, stopped when
/// the largest blockwise Frobenius change is at most `opts.tol`.
pub fn value_iteration_solve(problem: &ProblemInstance, opts: &SolveOptions) -> Result<SolveReport, SolveError> {
    problem.check_dimensions()?;
    let mut trace = Trace::new(opts.keep_iterates);
    let mut x = ValueCovarianceTuple::zeros(problem.n());
    trace.push(&x, None, None);

    let mut last_delta = f64::INFINITY;
    for iteration in 1..=opts.max_iter {
        let next = riccati_map(&x, problem)?;
        if !next.is_finite() || next.max_block_norm() > OVERFLOW_GUARD {
            return Err(SolveError::Diverged { iteration });
        }
        last_delta = next.max_block_distance(&x);
        x = next;
        trace.push(&x, Some(last_delta), None);
        if last_delta <= opts.tol {
            return finish(Method::ValueIteration, problem, x, trace);
        }
    }
    Err(SolveError::MaxIterationsExceeded {
        max_iter: opts.max_iter,
        last_delta,
    })
}

/// Policy iteration from an ms-stabilizing `initial` compensator.
pub fn policy_iteration_solve(
    problem: &ProblemInstance,
    initial: &Controller,
    opts: &SolveOptions,
) -> Result<SolveReport, SolveError> {
    problem.check_dimensions()?;
    initial.check_dimensions(problem)?;
    let mut trace = Trace::new(opts.keep_iterates);

    let first = evaluate_policy(problem, initial).map_err(|e| match e {
        MomentsError::NotMsStable { radius } => SolveError::InitialPolicyNotStabilizing { radius },
        other => other.into(),
    })?;
    trace.push(&first.tuple, None, Some(&first));
    let mut x = first.tuple;

    let mut last_delta = f64::INFINITY;
    for iteration in 1..=opts.max_iter {
        let gains = gain_operators(&x, problem)?;
        let ctrl = Controller::from_gains(problem, gains.k, gains.l);
        let eval = evaluate_policy(problem, &ctrl).map_err(|e| match e {
            MomentsError::NotMsStable { radius } => SolveError::IterateNotStabilizing { iteration, radius },
            other => other.into(),
        })?;
        last_delta = eval.tuple.max_block_distance(&x);
        trace.push(&eval.tuple, Some(last_delta), Some(&eval));
        x = eval.tuple;
        if last_delta <= opts.tol {
            return finish(Method::PolicyIteration, problem, x, trace);
        }
    }
    Err(SolveError::MaxIterationsExceeded {
        max_iter: opts.max_iter,
        last_delta,
    })
}

/// The two closed forms of the optimal cost: `(Q/S form, W/P form)`.
pub fn optimal_cost_forms(
    x: &ValueCovarianceTuple,
    k: &DMatrix<f64>,
    l: &DMatrix<f64>,
    problem: &ProblemInstance,
) -> (f64, f64) {
    let n = problem.n();
    let mut ik = DMatrix::zeros(n + problem.m(), n);
    ik.view_mut((0, 0), (n, n)).fill_with_identity();
    ik.view_mut((n, 0), (problem.m(), n)).copy_from(k);
    let mut il = DMatrix::zeros(n, n + problem.p());
    il.view_mut((0, 0), (n, n)).fill_with_identity();
    il.view_mut((0, n), (n, problem.p())).copy_from(&(-l));

    let qs = inner(&problem.q_xx(), &x.s) + inner(&(ik.transpose() * &problem.cost.q * &ik), &x.s_hat);
    let wp = inner(&problem.w_xx(), &x.p) + inner(&(&il * &problem.noise.w * il.transpose()), &x.p_hat);
    (qs, wp)
}

/// Optimal cost in the Q/S form, checked against the W/P form.
pub fn optimal_cost(
    x: &ValueCovarianceTuple,
    k: &DMatrix<f64>,
    l: &DMatrix<f64>,
    problem: &ProblemInstance,
) -> Result<f64, SolveError> {
    let (qs, wp) = optimal_cost_forms(x, k, l, problem);
    if (qs - wp).abs() > DUALITY_TOL * (1.0 + qs.abs()) {
        return Err(MomentsError::DualityViolation {
            value_side: wp,
            covariance_side: qs,
        }
        .into());
    }
    Ok(qs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostModel, NoiseModel, NoiseTerm, SystemModel};
    use nalgebra::DVector;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar(a: f64, w: DMatrix<f64>) -> ProblemInstance {
        ProblemInstance::new(
            SystemModel {
                a: m1(a),
                b: m1(1.0),
                c: m1(1.0),
                noise_a: vec![],
                noise_b: vec![],
                noise_c: vec![],
            },
            CostModel {
                q: DMatrix::identity(2, 2),
            },
            NoiseModel { w, x0: m1(0.0) },
        )
        .unwrap()
    }

    fn uniform_tuple(n: usize, p: f64, ph: f64, s: f64, sh: f64) -> ValueCovarianceTuple {
        let d = |v| DMatrix::identity(n, n) * v;
        ValueCovarianceTuple {
            p: d(p),
            p_hat: d(ph),
            s: d(s),
            s_hat: d(sh),
        }
    }

    /// Positive root of `p^2 - p/4 - 1 = 0` (scalar control ARE for a = 0.5, b = q = r = 1).
    fn scalar_are_root() -> f64 {
        (0.25 + (0.0625f64 + 4.0).sqrt()) / 2.0
    }

    #[test]
    fn zero_dynamics_give_zero_gains() {
        let mut p = scalar(0.0, DMatrix::identity(2, 2) * 0.01);
        p.system.a = m1(0.0);
        let x = uniform_tuple(1, 2.0, 1.0, 0.3, 0.1);
        let g = gain_operators(&x, &p).unwrap();
        assert_eq!(g.k, m1(0.0));
        assert_eq!(g.l, m1(0.0));
    }

    #[test]
    fn q_operators_at_zero_are_the_weights() {
        let p = scalar(0.5, DMatrix::identity(2, 2) * 0.01);
        let x = ValueCovarianceTuple::zeros(1);
        let g = gain_operators(&x, &p).unwrap();
        let q = q_operators(&x, &p, &g.k, &g.l);
        assert_eq!(q.g, p.cost.q);
        assert_eq!(q.h, p.noise.w);
    }

    #[test]
    fn q_operators_noise_terms_by_hand() {
        let mut p = scalar(0.5, DMatrix::identity(2, 2) * 0.01);
        p.system.noise_a.push(NoiseTerm::new(0.3, m1(1.0)));
        let x = uniform_tuple(1, 1.0, 1.0, 0.0, 0.0);
        let q = q_operators(&x, &p, &m1(0.0), &m1(0.0));
        assert!((q.g_xx()[(0, 0)] - 1.43).abs() < 1e-15);
    }

    #[test]
    fn classical_q_functions_without_multiplicative_noise() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.7]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let p = ProblemInstance::new(
            SystemModel {
                a: a.clone(),
                b: b.clone(),
                c: c.clone(),
                noise_a: vec![],
                noise_b: vec![],
                noise_c: vec![],
            },
            CostModel {
                q: DMatrix::identity(3, 3),
            },
            NoiseModel {
                w: DMatrix::identity(3, 3) * 0.1,
                x0: DMatrix::zeros(2, 2),
            },
        )
        .unwrap();
        let x = ValueCovarianceTuple {
            p: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            p_hat: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]),
            s: DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.3]),
            s_hat: DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.1]),
        };
        let g = gain_operators(&x, &p).unwrap();
        let q = q_operators(&x, &p, &g.k, &g.l);

        let mut ab = DMatrix::zeros(2, 3);
        ab.view_mut((0, 0), (2, 2)).copy_from(&a);
        ab.view_mut((0, 2), (2, 1)).copy_from(&b);
        let expected_g = &p.cost.q + ab.transpose() * &x.p * &ab;
        let mut ac = DMatrix::zeros(3, 2);
        ac.view_mut((0, 0), (2, 2)).copy_from(&a);
        ac.view_mut((2, 0), (1, 2)).copy_from(&c);
        let expected_h = &p.noise.w + &ac * &x.s * ac.transpose();
        assert!((q.g - expected_g).norm() < 1e-14);
        assert!((q.h - expected_h).norm() < 1e-14);
    }

    #[test]
    fn residual_at_zero() {
        let p = ProblemInstance::new(
            SystemModel {
                a: DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.7]),
                b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
                c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
                noise_a: vec![NoiseTerm::new(0.2, DMatrix::identity(2, 2))],
                noise_b: vec![NoiseTerm::new(0.3, DMatrix::from_row_slice(2, 1, &[1.0, 0.0]))],
                noise_c: vec![],
            },
            CostModel {
                q: DMatrix::identity(3, 3),
            },
            NoiseModel {
                w: DMatrix::identity(3, 3) * 0.01,
                x0: DMatrix::zeros(2, 2),
            },
        )
        .unwrap();
        let r = riccati_residual(&ValueCovarianceTuple::zeros(2), &p).unwrap();
        let expected = ValueCovarianceTuple {
            p: DMatrix::identity(2, 2),
            p_hat: DMatrix::zeros(2, 2),
            s: DMatrix::identity(2, 2) * 0.01,
            s_hat: DMatrix::zeros(2, 2),
        };
        assert_eq!(r.0, expected);
        assert_eq!(value_iteration_step(&ValueCovarianceTuple::zeros(2), &p).unwrap(), expected);
    }

    /// Noise-free scalar fixed point in closed form: control root `p`, the
    /// filter root `s = 0.01 p`, and `Phat`, `Shat` from their scalar
    /// Lyapunov equations.
    fn scalar_fixed_point() -> (ValueCovarianceTuple, f64, f64) {
        let p = scalar_are_root();
        let s = 0.01 * p;
        let k = -0.5 * p / (1.0 + p);
        let l = 0.5 * s / (0.01 + s);
        let m = p * p * 0.25 / (1.0 + p); // G_xu G_uu^-1 G_ux
        let n = s * s * 0.25 / (0.01 + s);
        let ph = m / (1.0 - (0.5 - l) * (0.5 - l));
        let sh = n / (1.0 - (0.5 + k) * (0.5 + k));
        (uniform_tuple(1, p, ph, s, sh), k, l)
    }

    #[test]
    fn scalar_noise_free_gains_and_residual() {
        let problem = scalar(0.5, DMatrix::identity(2, 2) * 0.01);
        let (x, k, l) = scalar_fixed_point();
        assert!((x.p[(0, 0)] - 1.132782).abs() < 1e-6);
        assert!((k + 0.265564).abs() < 1e-6);
        assert!((l - 0.265564).abs() < 1e-6);
        let g = gain_operators(&x, &problem).unwrap();
        assert!((g.k[(0, 0)] - k).abs() < 1e-14);
        assert!((g.l[(0, 0)] - l).abs() < 1e-14);
        let r = riccati_residual(&x, &problem).unwrap();
        assert!(r.max_norm() < 1e-9, "{}", r.max_norm());
        let step = value_iteration_step(&x, &problem).unwrap();
        assert!(step.max_block_distance(&x) < 1e-9);
    }

    #[test]
    fn scalar_solvers_reach_closed_form() {
        let problem = scalar(0.5, DMatrix::identity(2, 2) * 0.01);
        let (x, k, l) = scalar_fixed_point();

        let vi = value_iteration_solve(&problem, &SolveOptions::for_method(Method::ValueIteration)).unwrap();
        assert!(vi.tuple.max_block_distance(&x) < 1e-10);
        assert!((vi.controller.k[(0, 0)] - k).abs() < 1e-10);
        assert!((vi.controller.l[(0, 0)] - l).abs() < 1e-10);

        let pi = policy_iteration_solve(
            &problem,
            &Controller::open_loop(&problem),
            &SolveOptions::for_method(Method::PolicyIteration),
        )
        .unwrap();
        assert!(pi.tuple.max_block_distance(&x) < 1e-10);
        assert!((pi.controller.k[(0, 0)] - k).abs() < 1e-10);
        assert!(pi.iterations < vi.iterations);

        let (qs, wp) = optimal_cost_forms(&pi.tuple, &pi.controller.k, &pi.controller.l, &problem);
        assert!((qs - wp).abs() < 1e-12 * (1.0 + qs.abs()));
        assert!((optimal_cost(&pi.tuple, &pi.controller.k, &pi.controller.l, &problem).unwrap() - pi.cost).abs() < 1e-12);
    }

    #[test]
    fn optimal_cost_with_zero_gain() {
        let problem = scalar(0.5, DMatrix::identity(2, 2));
        let x = uniform_tuple(1, 0.0, 0.0, 0.3, 0.2);
        let (qs, _) = optimal_cost_forms(&x, &m1(0.0), &m1(0.0), &problem);
        assert!((qs - 0.5).abs() < 1e-15);

        let mut problem = scalar(0.5, DMatrix::zeros(2, 2));
        problem.noise.w = DMatrix::zeros(2, 2);
        let x = uniform_tuple(1, 2.0, 1.0, 0.0, 0.0);
        assert_eq!(optimal_cost(&x, &m1(-0.3), &m1(0.2), &problem).unwrap(), 0.0);
    }

    #[test]
    fn value_iteration_diverges_when_not_compensatable() {
        let mut problem = scalar(2.0, DMatrix::identity(2, 2) * 0.01);
        problem.system.noise_a.push(NoiseTerm::new(10.0, m1(1.0)));
        let err = value_iteration_solve(&problem, &SolveOptions::for_method(Method::ValueIteration)).unwrap_err();
        assert!(matches!(err, SolveError::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn unstable_initial_policy_is_rejected() {
        let problem = scalar(0.5, DMatrix::identity(2, 2) * 0.01);
        let ctrl = Controller {
            f: m1(2.0),
            k: m1(0.0),
            l: m1(0.0),
        };
        let err = policy_iteration_solve(&problem, &ctrl, &SolveOptions::for_method(Method::PolicyIteration)).unwrap_err();
        assert!(matches!(err, SolveError::InitialPolicyNotStabilizing { radius } if radius >= 4.0 - 1e-12));
    }

    #[test]
    fn singular_input_penalty_is_reported() {
        let mut problem = scalar(0.5, DMatrix::identity(2, 2) * 0.01);
        problem.cost.q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        let err = gain_operators(&ValueCovarianceTuple::zeros(1), &problem).unwrap_err();
        assert!(matches!(err, SolveError::SingularBlock { block: "G_uu", .. }));
    }

    #[test]
    fn max_iterations_is_reported() {
        let problem = scalar(0.5, DMatrix::identity(2, 2) * 0.01);
        let opts = SolveOptions {
            max_iter: 3,
            ..SolveOptions::for_method(Method::ValueIteration)
        };
        assert!(matches!(
            value_iteration_solve(&problem, &opts),
            Err(SolveError::MaxIterationsExceeded { max_iter: 3, .. })
        ));
    }
}
