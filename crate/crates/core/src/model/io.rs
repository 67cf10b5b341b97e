//! Canonical JSON documents for problems and controllers.
//!
//! Matrices are row-major nested arrays. In a problem document the noise
//! lists and `X0` are optional and default to empty / zero.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Controller, CostModel, NoiseModel, NoiseTerm, ProblemInstance, SystemModel};
use crate::error::ModelError;
use crate::linalg::{matrix_to_rows, rows_to_matrix};

type Rows = Vec<Vec<f64>>;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermDoc {
    sigma: f64,
    pattern: Rows,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseDoc {
    #[serde(rename = "A", default)]
    a: Vec<TermDoc>,
    #[serde(rename = "B", default)]
    b: Vec<TermDoc>,
    #[serde(rename = "C", default)]
    c: Vec<TermDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemDoc {
    n: usize,
    m: usize,
    p: usize,
    #[serde(rename = "A")]
    a: Rows,
    #[serde(rename = "B")]
    b: Rows,
    #[serde(rename = "C")]
    c: Rows,
    #[serde(default)]
    noise: NoiseDoc,
    #[serde(rename = "Q")]
    q: Rows,
    #[serde(rename = "W")]
    w: Rows,
    #[serde(rename = "X0", default)]
    x0: Option<Rows>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControllerDoc {
    #[serde(rename = "F")]
    f: Rows,
    #[serde(rename = "K")]
    k: Rows,
    #[serde(rename = "L")]
    l: Rows,
}

fn shaped(field: &str, rows: &Rows, nrows: usize, ncols: usize) -> Result<DMatrix<f64>, ModelError> {
    rows_to_matrix(rows, nrows, ncols).ok_or_else(|| {
        let found_cols = rows.first().map_or(0, Vec::len);
        ModelError::schema(
            field,
            format!("expected shape {nrows}x{ncols}, found {}x{found_cols}", rows.len()),
        )
    })
}

fn parse_value(text: &str) -> Result<serde_json::Value, ModelError> {
    serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))
}

fn schema_from_serde(e: serde_json::Error) -> ModelError {
    ModelError::schema("<document>", e.to_string())
}

fn terms(
    name: &str,
    docs: &[TermDoc],
    nrows: usize,
    ncols: usize,
) -> Result<Vec<NoiseTerm>, ModelError> {
    docs.iter()
        .enumerate()
        .map(|(i, t)| {
            let pattern = shaped(&format!("noise.{name}[{i}].pattern"), &t.pattern, nrows, ncols)?;
            Ok(NoiseTerm::new(t.sigma, pattern))
        })
        .collect()
}

/// Parses a problem document. Syntax errors give [`ModelError::Parse`];
/// missing fields and shape mismatches give [`ModelError::Schema`].
pub fn load_problem(text: &str) -> Result<ProblemInstance, ModelError> {
    let doc: ProblemDoc = serde_json::from_value(parse_value(text)?).map_err(schema_from_serde)?;
    let (n, m, p) = (doc.n, doc.m, doc.p);
    for (field, dim) in [("n", n), ("m", m), ("p", p)] {
        if dim == 0 {
            return Err(ModelError::schema(field, "dimension must be positive"));
        }
    }
    let system = SystemModel {
        a: shaped("A", &doc.a, n, n)?,
        b: shaped("B", &doc.b, n, m)?,
        c: shaped("C", &doc.c, p, n)?,
        noise_a: terms("A", &doc.noise.a, n, n)?,
        noise_b: terms("B", &doc.noise.b, n, m)?,
        noise_c: terms("C", &doc.noise.c, p, n)?,
    };
    let cost = CostModel {
        q: shaped("Q", &doc.q, n + m, n + m)?,
    };
    let x0 = match &doc.x0 {
        Some(rows) => shaped("X0", rows, n, n)?,
        None => DMatrix::zeros(n, n),
    };
    let noise = NoiseModel {
        w: shaped("W", &doc.w, n + p, n + p)?,
        x0,
    };
    ProblemInstance::new(system, cost, noise)
}

fn term_docs(terms: &[NoiseTerm]) -> Vec<TermDoc> {
    terms
        .iter()
        .map(|t| TermDoc {
            sigma: t.sigma,
            pattern: matrix_to_rows(&t.pattern),
        })
        .collect()
}

pub fn save_problem(problem: &ProblemInstance) -> String {
    let s = &problem.system;
    let doc = ProblemDoc {
        n: problem.n(),
        m: problem.m(),
        p: problem.p(),
        a: matrix_to_rows(&s.a),
        b: matrix_to_rows(&s.b),
        c: matrix_to_rows(&s.c),
        noise: NoiseDoc {
            a: term_docs(&s.noise_a),
            b: term_docs(&s.noise_b),
            c: term_docs(&s.noise_c),
        },
        q: matrix_to_rows(&problem.cost.q),
        w: matrix_to_rows(&problem.noise.w),
        x0: Some(matrix_to_rows(&problem.noise.x0)),
    };
    serde_json::to_string_pretty(&doc).expect("problem document serializes")
}

/// Parses a controller document and checks it against `problem`.
pub fn load_controller(text: &str, problem: &ProblemInstance) -> Result<Controller, ModelError> {
    let doc: ControllerDoc =
        serde_json::from_value(parse_value(text)?).map_err(schema_from_serde)?;
    let (n, m, p) = (problem.n(), problem.m(), problem.p());
    Ok(Controller {
        f: shaped("F", &doc.f, n, n)?,
        k: shaped("K", &doc.k, m, n)?,
        l: shaped("L", &doc.l, n, p)?,
    })
}

pub fn save_controller(ctrl: &Controller) -> String {
    let doc = ControllerDoc {
        f: matrix_to_rows(&ctrl.f),
        k: matrix_to_rows(&ctrl.k),
        l: matrix_to_rows(&ctrl.l),
    };
    serde_json::to_string_pretty(&doc).expect("controller document serializes")
}
