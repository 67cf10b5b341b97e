//! Problem data for multiplicative-noise LQ output feedback control.
//!
//! The system evolves as
//!
//! ```text
//! x[t+1] = A_t x[t] + B_t u[t] + w[t],    y[t] = C_t x[t] + v[t]
//! A_t = A + sum_i alpha[t,i] A_i,  B_t = B + sum_i beta[t,i] B_i,  C_t = C + sum_i gamma[t,i] C_i
//! ```
//!
//! where the scalars `alpha`, `beta`, `gamma` are zero mean with standard
//! deviations given by the `sigma` of each [`NoiseTerm`]. The additive noise
//! `(w, v)` has joint covariance `W`, and the stage cost is the quadratic
//! form of `Q` in `(x, u)`.

mod io;

use std::fmt;

use nalgebra::DMatrix;

use crate::error::ModelError;
use crate::linalg;

pub use io::{load_controller, load_problem, save_controller, save_problem};

/// One multiplicative noise direction: a pattern matrix scaled by a zero
/// mean scalar with standard deviation `sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseTerm {
    pub sigma: f64,
    pub pattern: DMatrix<f64>,
}

impl NoiseTerm {
    pub fn new(sigma: f64, pattern: DMatrix<f64>) -> Self {
        Self { sigma, pattern }
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub noise_a: Vec<NoiseTerm>,
    pub noise_b: Vec<NoiseTerm>,
    pub noise_c: Vec<NoiseTerm>,
}

impl SystemModel {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    pub fn has_multiplicative_noise(&self) -> bool {
        self.noise_a
            .iter()
            .chain(&self.noise_b)
            .chain(&self.noise_c)
            .any(|t| t.sigma != 0.0)
    }
}

/// Stage cost weight over the stacked vector `(x, u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostModel {
    pub q: DMatrix<f64>,
}

/// Joint covariance of `(w, v)` and the initial state covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    pub w: DMatrix<f64>,
    pub x0: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemInstance {
    pub system: SystemModel,
    pub cost: CostModel,
    pub noise: NoiseModel,
}

impl ProblemInstance {
    /// Assembles an instance, rejecting inconsistent dimensions.
    pub fn new(system: SystemModel, cost: CostModel, noise: NoiseModel) -> Result<Self, ModelError> {
        let problem = Self {
            system,
            cost,
            noise,
        };
        problem.check_dimensions()?;
        Ok(problem)
    }

    pub fn n(&self) -> usize {
        self.system.n()
    }

    pub fn m(&self) -> usize {
        self.system.m()
    }

    pub fn p(&self) -> usize {
        self.system.p()
    }

    /// Fails with the first dimension mismatch found.
    pub fn check_dimensions(&self) -> Result<(), ModelError> {
        match self.dimension_violations().into_iter().next() {
            Some(v) => Err(ModelError::schema(v.field, v.check)),
            None => Ok(()),
        }
    }

    fn dimension_violations(&self) -> Vec<Violation> {
        let (n, m, p) = (self.n(), self.m(), self.p());
        let mut out = Vec::new();
        let mut expect = |field: String, mat: &DMatrix<f64>, rows: usize, cols: usize| {
            if mat.shape() != (rows, cols) {
                out.push(Violation::error(
                    field,
                    format!("expected shape {rows}x{cols}, found {}x{}", mat.nrows(), mat.ncols()),
                ));
            }
        };
        let s = &self.system;
        expect("A".into(), &s.a, n, n);
        expect("B".into(), &s.b, n, m);
        expect("C".into(), &s.c, p, n);
        for (i, t) in s.noise_a.iter().enumerate() {
            expect(format!("noise.A[{i}].pattern"), &t.pattern, n, n);
        }
        for (i, t) in s.noise_b.iter().enumerate() {
            expect(format!("noise.B[{i}].pattern"), &t.pattern, n, m);
        }
        for (i, t) in s.noise_c.iter().enumerate() {
            expect(format!("noise.C[{i}].pattern"), &t.pattern, p, n);
        }
        expect("Q".into(), &self.cost.q, n + m, n + m);
        expect("W".into(), &self.noise.w, n + p, n + p);
        expect("X0".into(), &self.noise.x0, n, n);
        for (field, dim) in [("n", n), ("m", m), ("p", p)] {
            if dim == 0 {
                out.push(Violation::error(field, "dimension must be positive"));
            }
        }
        out
    }

    pub fn q_xx(&self) -> DMatrix<f64> {
        let n = self.n();
        self.cost.q.view((0, 0), (n, n)).into_owned()
    }

    pub fn q_xu(&self) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        self.cost.q.view((0, n), (n, m)).into_owned()
    }

    pub fn q_ux(&self) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        self.cost.q.view((n, 0), (m, n)).into_owned()
    }

    pub fn q_uu(&self) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        self.cost.q.view((n, n), (m, m)).into_owned()
    }

    pub fn w_xx(&self) -> DMatrix<f64> {
        let n = self.n();
        self.noise.w.view((0, 0), (n, n)).into_owned()
    }

    pub fn w_xy(&self) -> DMatrix<f64> {
        let (n, p) = (self.n(), self.p());
        self.noise.w.view((0, n), (n, p)).into_owned()
    }

    pub fn w_yx(&self) -> DMatrix<f64> {
        let (n, p) = (self.n(), self.p());
        self.noise.w.view((n, 0), (p, n)).into_owned()
    }

    pub fn w_yy(&self) -> DMatrix<f64> {
        let (n, p) = (self.n(), self.p());
        self.noise.w.view((n, n), (p, p)).into_owned()
    }

    /// Checks every type invariant. Violations are returned as data.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = self.dimension_violations();
        if !violations.is_empty() {
            return ValidationReport { violations };
        }

        let s = &self.system;
        let mut matrices: Vec<(String, &DMatrix<f64>)> = vec![
            ("A".into(), &s.a),
            ("B".into(), &s.b),
            ("C".into(), &s.c),
            ("Q".into(), &self.cost.q),
            ("W".into(), &self.noise.w),
            ("X0".into(), &self.noise.x0),
        ];
        for (name, terms) in [("A", &s.noise_a), ("B", &s.noise_b), ("C", &s.noise_c)] {
            for (i, t) in terms.iter().enumerate() {
                matrices.push((format!("noise.{name}[{i}].pattern"), &t.pattern));
                if !(t.sigma.is_finite() && t.sigma >= 0.0) {
                    violations.push(Violation::error(
                        format!("noise.{name}[{i}].sigma"),
                        "sigma must be finite and nonnegative",
                    ));
                }
            }
        }
        for (field, mat) in matrices {
            if mat.iter().any(|v| !v.is_finite()) {
                violations.push(Violation::error(field, "contains non-finite entries"));
            }
        }
        if !violations.is_empty() {
            return ValidationReport { violations };
        }

        for (field, mat) in [("Q", &self.cost.q), ("W", &self.noise.w), ("X0", &self.noise.x0)] {
            if linalg::asymmetry(mat) > SYMMETRY_TOL * (1.0 + mat.norm()) {
                violations.push(Violation::error(field, "not symmetric"));
            }
        }

        let q_min = linalg::min_sym_eigenvalue(&self.cost.q);
        if q_min <= PD_TOL {
            violations.push(Violation::error(
                "Q",
                format!("Q not positive definite (smallest eigenvalue {q_min:e})"),
            ));
        }

        let w = &self.noise.w;
        let w_min = linalg::min_sym_eigenvalue(w);
        if w_min <= PD_TOL {
            if linalg::is_psd(w, PSD_TOL) {
                violations.push(Violation::warning(
                    "W",
                    format!("W not positive definite, only positive semidefinite (smallest eigenvalue {w_min:e})"),
                ));
            } else {
                violations.push(Violation::error(
                    "W",
                    format!("W not positive semidefinite (smallest eigenvalue {w_min:e})"),
                ));
            }
        }

        if !linalg::is_psd(&self.noise.x0, PSD_TOL) {
            violations.push(Violation::error("X0", "X0 not positive semidefinite"));
        }

        ValidationReport { violations }
    }
}

const SYMMETRY_TOL: f64 = 1e-12;
/// Smallest eigenvalue must exceed this for positive definiteness.
pub const PD_TOL: f64 = 1e-12;
/// Relative floor for positive semidefiniteness, scaled by `1 + ||M||_F`.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Severity {
    /// Accepted by the solvers; reported for the record.
    Warning,
    Error,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub field: String,
    pub check: String,
    pub severity: Severity,
}

impl Violation {
    fn error(field: impl Into<String>, check: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            check: check.into(),
            severity: Severity::Error,
        }
    }

    fn warning(field: impl Into<String>, check: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            check: check.into(),
            severity: Severity::Warning,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{tag}: {}: {}", self.field, self.check)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.violations.iter().any(|v| v.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.severity == Severity::Warning)
    }
}

/// Linear dynamic compensator `xhat[t+1] = F xhat[t] + L y[t]`, `u[t] = K xhat[t]`.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct Controller {
    #[serde(rename = "F", with = "linalg::nested")]
    pub f: DMatrix<f64>,
    #[serde(rename = "K", with = "linalg::nested")]
    pub k: DMatrix<f64>,
    #[serde(rename = "L", with = "linalg::nested")]
    pub l: DMatrix<f64>,
}

impl Controller {
    /// The open-loop policy `(A, 0, 0)`.
    pub fn open_loop(problem: &ProblemInstance) -> Self {
        let (n, m, p) = (problem.n(), problem.m(), problem.p());
        Self {
            f: problem.system.a.clone(),
            k: DMatrix::zeros(m, n),
            l: DMatrix::zeros(n, p),
        }
    }

    /// Observer-form compensator `(A + B K - L C, K, L)`.
    pub fn from_gains(problem: &ProblemInstance, k: DMatrix<f64>, l: DMatrix<f64>) -> Self {
        let s = &problem.system;
        let f = &s.a + &s.b * &k - &l * &s.c;
        Self { f, k, l }
    }

    pub fn check_dimensions(&self, problem: &ProblemInstance) -> Result<(), ModelError> {
        let (n, m, p) = (problem.n(), problem.m(), problem.p());
        for (field, mat, shape) in [("F", &self.f, (n, n)), ("K", &self.k, (m, n)), ("L", &self.l, (n, p))] {
            if mat.shape() != shape {
                return Err(ModelError::schema(
                    field,
                    format!(
                        "expected shape {}x{}, found {}x{}",
                        shape.0,
                        shape.1,
                        mat.nrows(),
                        mat.ncols()
                    ),
                ));
            }
        }
        Ok(())
    }
}
