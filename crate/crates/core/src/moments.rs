//! Second-moment analysis of the closed loop under a linear dynamic
//! compensator.
//!
//! The plant state and the compensator state are stacked into a `2n`
//! augmented state whose one-step map `Phi'_t` is random. Its value matrix
//! `P'` and second moment `S'` solve the generalized Lyapunov equations
//!
//! ```text
//! P' = E[Phi'_t^T P' Phi'_t] + Q'        S' = E[Phi'_t S' Phi'_t^T] + W'
//! ```
//!
//! which are solved here as dense linear systems on the column-stacked
//! unknowns.

use nalgebra::{DMatrix, DVector};

use crate::error::{ModelError, MomentsError};
use crate::linalg::{self, inner, stack, symmetrize, unstack};
use crate::model::{Controller, ProblemInstance};

/// Closed loops with spectral radius at or above `1 - MS_STABILITY_MARGIN`
/// are treated as not mean-square stable.
pub const MS_STABILITY_MARGIN: f64 = 1e-9;

/// Relative tolerance for `<P',W'> = <S',Q'>`.
pub const DUALITY_TOL: f64 = 1e-9;

/// Relative floor on the smallest eigenvalue of solver outputs.
pub const OUTPUT_PSD_TOL: f64 = 1e-8;

/// A lifted multiplicative noise direction with its variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Lift {
    pub variance: f64,
    pub matrix: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedClosedLoop {
    /// Mean closed-loop map `[[A, B K], [L C, F]]`.
    pub phi: DMatrix<f64>,
    pub q_prime: DMatrix<f64>,
    pub w_prime: DMatrix<f64>,
    pub lifts_a: Vec<Lift>,
    pub lifts_b: Vec<Lift>,
    pub lifts_c: Vec<Lift>,
}

impl AugmentedClosedLoop {
    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }

    pub fn lifts(&self) -> impl Iterator<Item = &Lift> {
        self.lifts_a.iter().chain(&self.lifts_b).chain(&self.lifts_c)
    }

    /// Applies the second-moment operator to `m` directly, without the
    /// Kronecker matrix: `E[Phi'^T M Phi']` on the value side and
    /// `E[Phi' M Phi'^T]` on the covariance side.
    pub fn apply(&self, m: &DMatrix<f64>, side: Side) -> DMatrix<f64> {
        let congruence = |t: &DMatrix<f64>| match side {
            Side::Value => t.transpose() * m * t,
            Side::Covariance => t * m * t.transpose(),
        };
        let mut out = congruence(&self.phi);
        for lift in self.lifts() {
            out += congruence(&lift.matrix) * lift.variance;
        }
        out
    }
}

/// Builds the augmented closed-loop data for `ctrl` acting on `problem`.
pub fn build_augmented(
    problem: &ProblemInstance,
    ctrl: &Controller,
) -> Result<AugmentedClosedLoop, ModelError> {
    problem.check_dimensions()?;
    ctrl.check_dimensions(problem)?;
    let (n, m, p) = (problem.n(), problem.m(), problem.p());
    let s = &problem.system;

    let mut phi = DMatrix::zeros(2 * n, 2 * n);
    phi.view_mut((0, 0), (n, n)).copy_from(&s.a);
    phi.view_mut((0, n), (n, n)).copy_from(&(&s.b * &ctrl.k));
    phi.view_mut((n, 0), (n, n)).copy_from(&(&ctrl.l * &s.c));
    phi.view_mut((n, n), (n, n)).copy_from(&ctrl.f);

    // Q' = T^T Q T with T = [[I, 0], [0, K]], W' = U W U^T with U = [[I, 0], [0, L]].
    let mut t = DMatrix::zeros(n + m, 2 * n);
    t.view_mut((0, 0), (n, n)).fill_with_identity();
    t.view_mut((n, n), (m, n)).copy_from(&ctrl.k);
    let q_prime = symmetrize(&(t.transpose() * &problem.cost.q * &t));

    let mut u = DMatrix::zeros(2 * n, n + p);
    u.view_mut((0, 0), (n, n)).fill_with_identity();
    u.view_mut((n, n), (n, p)).copy_from(&ctrl.l);
    let w_prime = symmetrize(&(&u * &problem.noise.w * u.transpose()));

    let place = |row: usize, col: usize, block: DMatrix<f64>| {
        let mut out = DMatrix::zeros(2 * n, 2 * n);
        out.view_mut((row, col), (n, n)).copy_from(&block);
        out
    };
    let lifts_a = s
        .noise_a
        .iter()
        .map(|t| Lift {
            variance: t.variance(),
            matrix: place(0, 0, t.pattern.clone()),
        })
        .collect();
    let lifts_b = s
        .noise_b
        .iter()
        .map(|t| Lift {
            variance: t.variance(),
            matrix: place(0, n, &t.pattern * &ctrl.k),
        })
        .collect();
    let lifts_c = s
        .noise_c
        .iter()
        .map(|t| Lift {
            variance: t.variance(),
            matrix: place(n, 0, &ctrl.l * &t.pattern),
        })
        .collect();

    Ok(AugmentedClosedLoop {
        phi,
        q_prime,
        w_prime,
        lifts_a,
        lifts_b,
        lifts_c,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    /// Cost-to-go recursion, operator `M -> E[Phi'^T M Phi']`.
    Value,
    /// Second-moment recursion, operator `M -> E[Phi' M Phi'^T]`.
    Covariance,
}

/// Matrix of the second-moment operator acting on column-stacked matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondMomentOperator {
    pub matrix: DMatrix<f64>,
    pub side: Side,
}

pub fn build_second_moment_matrix(aug: &AugmentedClosedLoop, side: Side) -> SecondMomentOperator {
    let term = |t: &DMatrix<f64>| match side {
        Side::Value => {
            let tt = t.transpose();
            tt.kronecker(&tt)
        }
        Side::Covariance => t.kronecker(t),
    };
    let mut matrix = term(&aug.phi);
    for lift in aug.lifts() {
        if lift.variance != 0.0 {
            matrix += term(&lift.matrix) * lift.variance;
        }
    }
    SecondMomentOperator { matrix, side }
}

/// Magnitude of the dominant eigenvalue.
pub fn spectral_radius(op: &SecondMomentOperator) -> Result<f64, MomentsError> {
    matrix_spectral_radius(&op.matrix)
}

pub(crate) fn matrix_spectral_radius(m: &DMatrix<f64>) -> Result<f64, MomentsError> {
    if m.is_empty() {
        return Ok(0.0);
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(MomentsError::Eigen("matrix has non-finite entries".into()));
    }
    let dense = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
    let radius = dense
        .eigenvalues()
        .map_err(|e| MomentsError::Eigen(format!("{e:?}")))?
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    if radius.is_finite() {
        Ok(radius)
    } else {
        Err(MomentsError::Eigen("non-finite eigenvalue".into()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stability {
    pub stable: bool,
    pub radius: f64,
}

fn classify(radius: f64) -> Stability {
    Stability {
        stable: radius < 1.0 - MS_STABILITY_MARGIN,
        radius,
    }
}

pub fn is_ms_stable(aug: &AugmentedClosedLoop) -> Result<Stability, MomentsError> {
    let op = build_second_moment_matrix(aug, Side::Value);
    Ok(classify(spectral_radius(&op)?))
}

/// `a * b` as an unevaluated sum `hi + lo`.
fn two_product(a: f64, b: f64) -> (f64, f64) {
    let hi = a * b;
    (hi, a.mul_add(b, -hi))
}

/// `a + b` as an unevaluated sum `hi + lo`.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let hi = a + b;
    let t = hi - a;
    (hi, (a - (hi - t)) + (b - t))
}

/// `b - M x` with each entry accumulated in double-double.
fn compensated_residual(m: &DMatrix<f64>, x: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(b.len(), |i, _| {
        let (mut hi, mut lo) = (b[i], 0.0);
        for j in 0..x.len() {
            let (p, pe) = two_product(-m[(i, j)], x[j]);
            let (s, se) = two_sum(hi, p);
            hi = s;
            lo += pe + se;
        }
        hi + lo
    })
}

/// Solves `(I - op) vec(X) = vec(rhs)` by LU with two refinement steps on
/// compensated residuals.
fn solve_fixed_point(op: &SecondMomentOperator, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, MomentsError> {
    let dim = rhs.nrows();
    let system = DMatrix::identity(dim * dim, dim * dim) - &op.matrix;
    let lu = system.clone().lu();
    let b = stack(rhs);
    let mut x = lu.solve(&b).ok_or(MomentsError::SingularLyapunov)?;
    for _ in 0..2 {
        let r = compensated_residual(&system, &x, &b);
        match lu.solve(&r) {
            Some(dx) => x += dx,
            None => break,
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MomentsError::SingularLyapunov);
    }
    Ok(symmetrize(&unstack(&x, dim, dim)))
}

/// Solves the value-side (`P'`) or covariance-side (`S'`) generalized
/// Lyapunov equation. Fails with `NotMsStable` when no finite solution
/// exists.
pub fn solve_lyapunov(aug: &AugmentedClosedLoop, side: Side) -> Result<DMatrix<f64>, MomentsError> {
    let stability = is_ms_stable(aug)?;
    if !stability.stable {
        return Err(MomentsError::NotMsStable {
            radius: stability.radius,
        });
    }
    let op = build_second_moment_matrix(aug, side);
    let rhs = match side {
        Side::Value => &aug.q_prime,
        Side::Covariance => &aug.w_prime,
    };
    solve_fixed_point(&op, rhs)
}

/// `P'` and `S'` of one policy.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSolution {
    pub p_prime: DMatrix<f64>,
    pub s_prime: DMatrix<f64>,
}

impl AugmentedSolution {
    pub fn solve(aug: &AugmentedClosedLoop) -> Result<Self, MomentsError> {
        Ok(Self {
            p_prime: solve_lyapunov(aug, Side::Value)?,
            s_prime: solve_lyapunov(aug, Side::Covariance)?,
        })
    }

    /// `|<P',W'> - <S',Q'>|`.
    pub fn duality_gap(&self, aug: &AugmentedClosedLoop) -> f64 {
        (inner(&self.p_prime, &aug.w_prime) - inner(&self.s_prime, &aug.q_prime)).abs()
    }
}

/// Average cost `<P', W'>`, cross-checked against `<S', Q'>`.
pub fn evaluate_cost(sol: &AugmentedSolution, aug: &AugmentedClosedLoop) -> Result<f64, MomentsError> {
    let value_side = inner(&sol.p_prime, &aug.w_prime);
    let covariance_side = inner(&sol.s_prime, &aug.q_prime);
    if (value_side - covariance_side).abs() > DUALITY_TOL * (1.0 + value_side.abs()) {
        return Err(MomentsError::DualityViolation {
            value_side,
            covariance_side,
        });
    }
    Ok(value_side)
}

/// The joint unknown `X = (P, Phat, S, Shat)` of the coupled Riccati
/// equations. `P`/`Phat` weight the state and the estimation error in the
/// cost-to-go; `S`/`Shat` are the second moments of the estimation error and
/// of the estimate.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ValueCovarianceTuple {
    #[serde(rename = "P", with = "linalg::nested")]
    pub p: DMatrix<f64>,
    #[serde(rename = "Phat", with = "linalg::nested")]
    pub p_hat: DMatrix<f64>,
    #[serde(rename = "S", with = "linalg::nested")]
    pub s: DMatrix<f64>,
    #[serde(rename = "Shat", with = "linalg::nested")]
    pub s_hat: DMatrix<f64>,
}

impl ValueCovarianceTuple {
    pub fn zeros(n: usize) -> Self {
        Self {
            p: DMatrix::zeros(n, n),
            p_hat: DMatrix::zeros(n, n),
            s: DMatrix::zeros(n, n),
            s_hat: DMatrix::zeros(n, n),
        }
    }

    pub fn blocks(&self) -> [&DMatrix<f64>; 4] {
        [&self.p, &self.p_hat, &self.s, &self.s_hat]
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>) -> Self {
        Self {
            p: f(&self.p, &other.p),
            p_hat: f(&self.p_hat, &other.p_hat),
            s: f(&self.s, &other.s),
            s_hat: f(&self.s_hat, &other.s_hat),
        }
    }

    /// Largest Frobenius norm among the four blocks.
    pub fn max_block_norm(&self) -> f64 {
        self.blocks().iter().map(|b| b.norm()).fold(0.0, f64::max)
    }

    /// Largest blockwise Frobenius distance to `other`.
    pub fn max_block_distance(&self, other: &Self) -> f64 {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .map(|(a, b)| (*a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn symmetrized(&self) -> Self {
        self.zip_with(self, |a, _| symmetrize(a))
    }

    pub fn is_symmetric(&self) -> bool {
        self.blocks().iter().all(|b| *b == &b.transpose())
    }

    /// All four blocks PSD within `-OUTPUT_PSD_TOL * (1 + ||M||_F)`.
    pub fn is_psd(&self) -> bool {
        self.blocks().iter().all(|b| linalg::is_psd(b, OUTPUT_PSD_TOL))
    }
}

/// Reads `(P, Phat, S, Shat)` off the augmented solution:
/// `P = [I I] P' [I I]^T`, `Phat = [0 I] P' [0 I]^T`,
/// `S = [I -I] S' [I -I]^T`, `Shat = [0 I] S' [0 I]^T`.
pub fn extract_tuple(sol: &AugmentedSolution) -> ValueCovarianceTuple {
    let n = sol.p_prime.nrows() / 2;
    let blocks = |m: &DMatrix<f64>| {
        (
            m.view((0, 0), (n, n)).into_owned(),
            m.view((0, n), (n, n)).into_owned(),
            m.view((n, 0), (n, n)).into_owned(),
            m.view((n, n), (n, n)).into_owned(),
        )
    };
    let (p11, p12, p21, p22) = blocks(&sol.p_prime);
    let (s11, s12, s21, s22) = blocks(&sol.s_prime);
    ValueCovarianceTuple {
        p: symmetrize(&(p11 + p12 + p21 + &p22)),
        p_hat: symmetrize(&p22),
        s: symmetrize(&(s11 - s12 - s21 + &s22)),
        s_hat: symmetrize(&s22),
    }
}

/// Everything policy evaluation produces for one controller.
#[derive(Clone, Debug)]
pub struct PolicyEvaluation {
    pub aug: AugmentedClosedLoop,
    pub solution: AugmentedSolution,
    pub tuple: ValueCovarianceTuple,
    pub cost: f64,
    pub radius: f64,
    pub duality_gap: f64,
}

/// Evaluates `ctrl`: stability check, both Lyapunov solves, cost and tuple.
/// The spectral radius is computed once, on the value side.
pub fn evaluate_policy(problem: &ProblemInstance, ctrl: &Controller) -> Result<PolicyEvaluation, MomentsError> {
    let aug = build_augmented(problem, ctrl)?;
    let psi = build_second_moment_matrix(&aug, Side::Value);
    let stability = classify(spectral_radius(&psi)?);
    if !stability.stable {
        return Err(MomentsError::NotMsStable {
            radius: stability.radius,
        });
    }
    let gamma = build_second_moment_matrix(&aug, Side::Covariance);
    let solution = AugmentedSolution {
        p_prime: solve_fixed_point(&psi, &aug.q_prime)?,
        s_prime: solve_fixed_point(&gamma, &aug.w_prime)?,
    };
    let cost = evaluate_cost(&solution, &aug)?;
    let duality_gap = solution.duality_gap(&aug);
    let tuple = extract_tuple(&solution);
    Ok(PolicyEvaluation {
        aug,
        solution,
        tuple,
        cost,
        radius: stability.radius,
        duality_gap,
    })
}
