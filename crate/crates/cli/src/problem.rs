//! Problem files: a versioned TOML document with `model`, `cost`,
//! `constraints` and `options` tables. Constraint order is priority order.

use std::path::Path;

use ccsynth::linalg::Matrix;
use ccsynth::probbounds::{DisturbanceClass, Sidedness};
use ccsynth::sdp::SolverSettings;
use ccsynth::sim::NoiseClass;
use ccsynth::synthesis::{ChanceConstraint, ConstraintForm, CostSpec, SynthesisSettings, SystemModel, Target};
use nalgebra::DVector;
use serde::Deserialize;

use crate::CliError;

pub const PROBLEM_FORMAT: &str = "ccsynth-problem";
pub const PROBLEM_VERSION: u32 = 1;

/// The bundled spinning-satellite problem.
pub const SATELLITE: &str = include_str!("../problems/satellite.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feedback {
    #[default]
    State,
    Output,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    format: String,
    version: u32,
    model: RawModel,
    cost: RawCost,
    #[serde(default)]
    constraints: Vec<RawConstraint>,
    #[serde(default)]
    options: RawOptions,
}

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    #[serde(rename = "A")]
    a: Rows,
    #[serde(rename = "B")]
    b: Rows,
    #[serde(rename = "C")]
    c: Option<Rows>,
    #[serde(rename = "W")]
    w: Rows,
    #[serde(rename = "V")]
    v: Option<Rows>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    #[serde(rename = "Q")]
    q: Rows,
    #[serde(rename = "R")]
    r: Rows,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConstraint {
    label: Option<String>,
    target: Target,
    form: ConstraintForm,
    side: Option<Sidedness>,
    normal: Option<Vec<f64>>,
    shape_inv: Option<Rows>,
    bound: f64,
    eps: f64,
    class: DisturbanceClass,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptions {
    feedback: Option<Feedback>,
    feas_tol: Option<f64>,
    gap_tol: Option<f64>,
    max_iter: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
    burn_in: Option<usize>,
    replicas: Option<usize>,
    disturbance: Option<NoiseClass>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Options {
    pub feedback: Feedback,
    pub synthesis: SynthesisSettings,
    pub steps: usize,
    pub seed: u64,
    pub burn_in: Option<usize>,
    pub replicas: usize,
    pub disturbance: NoiseClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub model: SystemModel,
    pub cost: CostSpec,
    pub constraints: Vec<ChanceConstraint>,
    pub options: Options,
}

fn parse_err(path: impl Into<String>, message: impl std::fmt::Display) -> CliError {
    CliError::Parse(format!("{}: {message}", path.into()))
}

fn matrix(path: &str, rows: &Rows, shape: (Option<usize>, Option<usize>)) -> Result<Matrix, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(parse_err(path, "matrix is empty"));
    }
    if let Some((i, row)) = rows.iter().enumerate().find(|(_, row)| row.len() != c) {
        return Err(parse_err(format!("{path}[{i}]"), format!("row has {} entries, expected {c}", row.len())));
    }
    if let Some(want) = shape.0.filter(|&want| want != r) {
        return Err(parse_err(path, format!("expected {want} rows, found {r}")));
    }
    if let Some(want) = shape.1.filter(|&want| want != c) {
        return Err(parse_err(path, format!("expected {want} columns, found {c}")));
    }
    if let Some((i, j)) = (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).find(|&(i, j)| !rows[i][j].is_finite()) {
        return Err(parse_err(format!("{path}[{i}][{j}]"), "entry is not finite"));
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl Problem {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: RawProblem = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
        if raw.format != PROBLEM_FORMAT {
            return Err(parse_err("format", format!("expected \"{PROBLEM_FORMAT}\", found \"{}\"", raw.format)));
        }
        if raw.version != PROBLEM_VERSION {
            return Err(parse_err("version", format!("unsupported version {}", raw.version)));
        }

        let m = &raw.model;
        let a = matrix("model.A", &m.a, (None, None))?;
        let n = a.nrows();
        let b = matrix("model.B", &m.b, (Some(n), None))?;
        let w = matrix("model.W", &m.w, (Some(n), Some(n)))?;
        let mut model = SystemModel::new(a, b, w).map_err(|e| parse_err("model", e))?;
        match (&m.c, &m.v) {
            (Some(c), Some(v)) => {
                let c = matrix("model.C", c, (None, Some(n)))?;
                let v = matrix("model.V", v, (Some(c.nrows()), Some(c.nrows())))?;
                model = model.with_output(c, v).map_err(|e| parse_err("model", e))?;
            }
            (None, None) => {}
            (Some(_), None) => return Err(parse_err("model.V", "required when C is given")),
            (None, Some(_)) => return Err(parse_err("model.C", "required when V is given")),
        }
        model.validate().map_err(|e| parse_err("model", e))?;

        let q = matrix("cost.Q", &raw.cost.q, (Some(n), Some(n)))?;
        let r = matrix("cost.R", &raw.cost.r, (Some(model.m()), Some(model.m())))?;
        let cost = CostSpec::new(q, r).map_err(|e| parse_err("cost", e))?;

        let constraints = raw
            .constraints
            .iter()
            .enumerate()
            .map(|(i, c)| constraint(&model, i, c))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(dup) =
            constraints.iter().enumerate().find(|(i, c)| constraints[..*i].iter().any(|d| d.label == c.label))
        {
            return Err(parse_err(format!("constraints[{}].label", dup.0), format!("duplicate label '{}'", dup.1.label)));
        }

        let o = &raw.options;
        let mut synthesis = SynthesisSettings::default();
        let sdp: &mut SolverSettings = &mut synthesis.sdp;
        if let Some(t) = o.feas_tol {
            sdp.feas_tol = positive("options.feas_tol", t)?;
        }
        if let Some(t) = o.gap_tol {
            sdp.gap_tol = positive("options.gap_tol", t)?;
        }
        if let Some(it) = o.max_iter {
            sdp.max_iter = it;
        }
        let feedback = o.feedback.unwrap_or_default();
        if feedback == Feedback::Output && model.c.is_none() {
            return Err(parse_err("options.feedback", "output feedback needs model.C and model.V"));
        }
        let options = Options {
            feedback,
            synthesis,
            steps: o.steps.unwrap_or(1_000_000),
            seed: o.seed.unwrap_or(1),
            burn_in: o.burn_in,
            replicas: o.replicas.unwrap_or(1).max(1),
            disturbance: o.disturbance.unwrap_or(NoiseClass::Gaussian),
        };
        Ok(Problem { model, cost, constraints, options })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Parse(msg) => CliError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The constraints at the given indices, in file order.
    pub fn select(&self, indices: Option<&[usize]>) -> Result<Vec<ChanceConstraint>, CliError> {
        let Some(indices) = indices else {
            return Ok(self.constraints.clone());
        };
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        sorted
            .into_iter()
            .map(|i| {
                self.constraints.get(i).cloned().ok_or_else(|| {
                    CliError::Parse(format!("constraint index {i} out of range (file has {})", self.constraints.len()))
                })
            })
            .collect()
    }
}

fn positive(path: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(parse_err(path, format!("must be positive, got {v}")))
    }
}

fn constraint(model: &SystemModel, i: usize, raw: &RawConstraint) -> Result<ChanceConstraint, CliError> {
    let path = format!("constraints[{i}]");
    let label = raw.label.clone().unwrap_or_else(|| format!("c{i}"));
    let dim = match raw.target {
        Target::State => model.n(),
        Target::Input => model.m(),
    };
    let con = match raw.form {
        ConstraintForm::Scc => {
            if raw.shape_inv.is_some() {
                return Err(parse_err(format!("{path}.shape_inv"), "not allowed for form = \"scc\""));
            }
            let side = raw.side.ok_or_else(|| parse_err(format!("{path}.side"), "required for form = \"scc\""))?;
            let normal = raw.normal.as_ref().ok_or_else(|| parse_err(format!("{path}.normal"), "required for form = \"scc\""))?;
            if normal.len() != dim {
                return Err(parse_err(format!("{path}.normal"), format!("expected {dim} entries, found {}", normal.len())));
            }
            ChanceConstraint::scc(label, raw.target, side, DVector::from_column_slice(normal), raw.bound, raw.eps, raw.class)
        }
        ConstraintForm::Jcc => {
            if raw.normal.is_some() {
                return Err(parse_err(format!("{path}.normal"), "not allowed for form = \"jcc\""));
            }
            if raw.side.is_some() {
                return Err(parse_err(format!("{path}.side"), "not allowed for form = \"jcc\""));
            }
            let rows = raw.shape_inv.as_ref().ok_or_else(|| parse_err(format!("{path}.shape_inv"), "required for form = \"jcc\""))?;
            let shape_inv = matrix(&format!("{path}.shape_inv"), rows, (Some(dim), Some(dim)))?;
            ChanceConstraint::jcc(label, raw.target, shape_inv, raw.bound, raw.eps, raw.class)
        }
    };
    con.validate(model).map_err(|e| parse_err(path, e))?;
    Ok(con)
}
