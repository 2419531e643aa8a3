//! Domain types shared by every pass: observations, the count profile of the
//! observation pattern, variance components and the assembled fit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gls::GlsMode;
use crate::inference::Diagnostics;

/// One streamed record. `x[0]` is the intercept and is always 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub row_key: String,
    pub col_key: String,
    pub x: Vec<f64>,
    pub y: f64,
}

impl Observation {
    pub fn new(row_key: impl Into<String>, col_key: impl Into<String>, x: Vec<f64>, y: f64) -> Self {
        Self {
            row_key: row_key.into(),
            col_key: col_key.into(),
            x,
            y,
        }
    }
}

/// Checks the record invariants against the expected in-memory width
/// (intercept included).
pub fn validate_observation(obs: &Observation, width: usize) -> Result<()> {
    if !obs.y.is_finite() {
        return Err(Error::NonFinite("response".into()));
    }
    if let Some(k) = obs.x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("covariate {k}")));
    }
    if obs.x.len() != width || width == 0 {
        return Err(Error::WidthMismatch {
            expected: width,
            got: obs.x.len(),
        });
    }
    if obs.x[0] != 1.0 {
        return Err(Error::MissingIntercept(obs.x[0]));
    }
    Ok(())
}

/// Exact integer counts of the observation pattern.
///
/// `row_counts[i]` is N_i. (observations in row `i`), `col_counts[j]` is N_.j.
/// Real-valued ratios are derived on demand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetProfile {
    pub n: u64,
    pub row_counts: Vec<u64>,
    pub col_counts: Vec<u64>,
    pub max_row: u64,
    pub max_col: u64,
    pub sum_sq_row: u128,
    pub sum_sq_col: u128,
}

pub fn build_profile(row_counts: Vec<u64>, col_counts: Vec<u64>) -> Result<DatasetProfile> {
    if let Some(i) = row_counts.iter().position(|&c| c == 0) {
        return Err(Error::ZeroCount { axis: "row", index: i });
    }
    if let Some(j) = col_counts.iter().position(|&c| c == 0) {
        return Err(Error::ZeroCount {
            axis: "column",
            index: j,
        });
    }
    let n: u64 = row_counts.iter().sum();
    let n_cols: u64 = col_counts.iter().sum();
    if n == 0 || n_cols == 0 {
        return Err(Error::EmptyDataset);
    }
    if n != n_cols {
        return Err(Error::InvalidConfig(format!(
            "row counts total {n} but column counts total {n_cols}"
        )));
    }
    let sq = |c: &u64| (*c as u128) * (*c as u128);
    Ok(DatasetProfile {
        n,
        max_row: row_counts.iter().copied().max().unwrap_or(0),
        max_col: col_counts.iter().copied().max().unwrap_or(0),
        sum_sq_row: row_counts.iter().map(sq).sum(),
        sum_sq_col: col_counts.iter().map(sq).sum(),
        row_counts,
        col_counts,
    })
}

impl DatasetProfile {
    pub fn rows(&self) -> usize {
        self.row_counts.len()
    }

    pub fn cols(&self) -> usize {
        self.col_counts.len()
    }

    /// Largest row share of the observations.
    pub fn eps_r(&self) -> f64 {
        self.max_row as f64 / self.n as f64
    }

    pub fn eps_c(&self) -> f64 {
        self.max_col as f64 / self.n as f64
    }

    /// sum_i N_i.^2 / N^2
    pub fn row_concentration(&self) -> f64 {
        self.sum_sq_row as f64 / (self.n as f64 * self.n as f64)
    }

    pub fn col_concentration(&self) -> f64 {
        self.sum_sq_col as f64 / (self.n as f64 * self.n as f64)
    }

    pub fn summary(&self) -> ProfileSummary {
        ProfileSummary {
            n: self.n,
            r: self.rows() as u64,
            c: self.cols() as u64,
            max_row: self.max_row,
            max_col: self.max_col,
            sum_sq_row: self.sum_sq_row,
            sum_sq_col: self.sum_sq_col,
            eps_r: self.eps_r(),
            eps_c: self.eps_c(),
        }
    }
}

/// Scalar part of a [`DatasetProfile`], as reported in fit output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub n: u64,
    pub r: u64,
    pub c: u64,
    pub max_row: u64,
    pub max_col: u64,
    pub sum_sq_row: u128,
    pub sum_sq_col: u128,
    pub eps_r: f64,
    pub eps_c: f64,
}

/// Row, column and noise variances: the raw moment solution and its
/// projection onto the feasible region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    #[serde(rename = "raw_a")]
    pub sigma2_a_raw: f64,
    #[serde(rename = "raw_b")]
    pub sigma2_b_raw: f64,
    #[serde(rename = "raw_e")]
    pub sigma2_e_raw: f64,
    #[serde(rename = "a")]
    pub sigma2_a: f64,
    #[serde(rename = "b")]
    pub sigma2_b: f64,
    #[serde(rename = "e")]
    pub sigma2_e: f64,
    pub clamped: [bool; 3],
}

impl VarianceComponents {
    /// Clamps `a, b` at zero and `e` at `e_floor`.
    pub fn from_raw(raw: [f64; 3], e_floor: f64) -> Self {
        let feasible = [raw[0].max(0.0), raw[1].max(0.0), raw[2].max(e_floor)];
        Self {
            sigma2_a_raw: raw[0],
            sigma2_b_raw: raw[1],
            sigma2_e_raw: raw[2],
            sigma2_a: feasible[0],
            sigma2_b: feasible[1],
            sigma2_e: feasible[2],
            clamped: [raw[0] != feasible[0], raw[1] != feasible[1], raw[2] != feasible[2]],
        }
    }

    /// Known, already feasible components (simulation truth, user input).
    pub fn known(sigma2_a: f64, sigma2_b: f64, sigma2_e: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(sigma2_a) && ok(sigma2_b) && ok(sigma2_e) && sigma2_e > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "variance components ({sigma2_a}, {sigma2_b}, {sigma2_e}) must be nonnegative with a positive noise variance"
            )));
        }
        Ok(Self::from_raw([sigma2_a, sigma2_b, sigma2_e], 0.0))
    }

    pub fn raw(&self) -> [f64; 3] {
        [self.sigma2_a_raw, self.sigma2_b_raw, self.sigma2_e_raw]
    }

    pub fn feasible(&self) -> [f64; 3] {
        [self.sigma2_a, self.sigma2_b, self.sigma2_e]
    }

    /// The same components with the row and column roles exchanged.
    pub fn transposed(&self) -> Self {
        Self {
            sigma2_a_raw: self.sigma2_b_raw,
            sigma2_b_raw: self.sigma2_a_raw,
            sigma2_a: self.sigma2_b,
            sigma2_b: self.sigma2_a,
            clamped: [self.clamped[1], self.clamped[0], self.clamped[2]],
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepComponents {
    /// From OLS residuals; absent when the moment system was singular.
    pub vc_step2: Option<VarianceComponents>,
    pub vc_step4: VarianceComponents,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub ols: f64,
    pub moments_step2: f64,
    pub gls: f64,
    pub moments_step4: f64,
    pub covariance: f64,
    pub diagnostics: f64,
    pub total: f64,
}

/// Output of the full alternating fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: Vec<f64>,
    pub cov_beta: Vec<Vec<f64>>,
    #[serde(rename = "se")]
    pub se_beta: Vec<f64>,
    #[serde(rename = "sigma2")]
    pub vc: VarianceComponents,
    /// `None` when the fit fell back to OLS.
    pub mode: Option<GlsMode>,
    pub ols_beta: Vec<f64>,
    pub ols_naive_se: Vec<f64>,
    pub ols_sandwich_se: Vec<f64>,
    pub steps: StepComponents,
    pub diagnostics: Option<Diagnostics>,
    pub profile: ProfileSummary,
    pub warnings: Vec<String>,
    pub comparison: Option<crate::pipeline::ModeComparison>,
    pub passes: usize,
    pub timings: Timings,
}
