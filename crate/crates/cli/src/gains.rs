//! Gains files: the output of `synth`, read back by `simulate`.
//!
//! Floats are written in shortest round-trip form, so a gain read back is
//! bit-identical to the one computed.

use std::path::Path;

use ccsynth::estimator::{EstimatorDesign, OutputFeedbackResult};
use ccsynth::linalg::Matrix;
use ccsynth::synthesis::{ConstraintReport, SynthesisResult};
use serde::{Deserialize, Serialize};

use crate::problem::Feedback;
use crate::CliError;

pub const GAINS_FORMAT: &str = "ccsynth-gains";
pub const GAINS_VERSION: u32 = 1;

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintEntry {
    pub label: String,
    pub eps: f64,
    pub factor: f64,
    pub relative_slack: f64,
    pub active: bool,
}

impl From<&ConstraintReport> for ConstraintEntry {
    fn from(c: &ConstraintReport) -> Self {
        Self { label: c.label.clone(), eps: c.eps, factor: c.factor, relative_slack: c.relative_slack, active: c.active }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsFile {
    pub format: String,
    pub version: u32,
    /// `"state"` or `"output"`.
    pub feedback: String,
    pub cost: f64,
    #[serde(rename = "K")]
    pub k: Rows,
    #[serde(rename = "Xbar")]
    pub xbar: Rows,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub l: Option<Rows>,
    #[serde(rename = "E", default, skip_serializing_if = "Option::is_none")]
    pub e: Option<Rows>,
    #[serde(rename = "Sbar", default, skip_serializing_if = "Option::is_none")]
    pub sbar: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator_iterations: Option<usize>,
    #[serde(default)]
    pub constraints: Vec<ConstraintEntry>,
}

fn rows(m: &Matrix) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(path: &str, rows: &Rows) -> Result<Matrix, CliError> {
    let c = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || c == 0 || rows.iter().any(|r| r.len() != c) {
        return Err(CliError::Parse(format!("{path}: malformed matrix")));
    }
    Ok(Matrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
}

/// A gain, plus the estimator for output feedback.
#[derive(Debug, Clone, PartialEq)]
pub struct Gains {
    pub k: Matrix,
    pub estimator: Option<EstimatorDesign>,
}

impl GainsFile {
    pub fn from_state(r: &SynthesisResult) -> Self {
        Self {
            format: GAINS_FORMAT.into(),
            version: GAINS_VERSION,
            feedback: "state".into(),
            cost: r.cost,
            k: rows(&r.k),
            xbar: rows(&r.xbar),
            l: None,
            e: None,
            sbar: None,
            estimator_iterations: None,
            constraints: r.constraints.iter().map(Into::into).collect(),
        }
    }

    pub fn from_output(r: &OutputFeedbackResult) -> Self {
        Self {
            format: GAINS_FORMAT.into(),
            version: GAINS_VERSION,
            feedback: "output".into(),
            cost: r.cost,
            k: rows(&r.k),
            xbar: rows(&r.xbar),
            l: Some(rows(&r.estimator.l)),
            e: Some(rows(&r.estimator.e)),
            sbar: Some(rows(&r.sbar)),
            estimator_iterations: Some(r.estimator.iterations),
            constraints: r.constraints.iter().map(Into::into).collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("gains serialize")
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let g: GainsFile = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
        if g.format != GAINS_FORMAT {
            return Err(CliError::Parse(format!("format: expected \"{GAINS_FORMAT}\", found \"{}\"", g.format)));
        }
        if g.version != GAINS_VERSION {
            return Err(CliError::Parse(format!("version: unsupported version {}", g.version)));
        }
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Parse(msg) => CliError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_toml()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    pub fn gains(&self) -> Result<Gains, CliError> {
        let k = matrix("K", &self.k)?;
        let estimator = match self.feedback.as_str() {
            "state" => None,
            "output" => {
                let (Some(l), Some(e)) = (&self.l, &self.e) else {
                    return Err(CliError::Parse("output-feedback gains need L and E".into()));
                };
                Some(EstimatorDesign {
                    l: matrix("L", l)?,
                    e: matrix("E", e)?,
                    iterations: self.estimator_iterations.unwrap_or(0),
                })
            }
            other => return Err(CliError::Parse(format!("feedback: expected \"state\" or \"output\", found \"{other}\""))),
        };
        Ok(Gains { k, estimator })
    }

    pub fn feedback(&self) -> Feedback {
        if self.feedback == "output" {
            Feedback::Output
        } else {
            Feedback::State
        }
    }
}
