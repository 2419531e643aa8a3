//! The alternating fit: OLS, moments, one-factor GLS, moments again, then
//! the sandwich covariance of the GLS estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gls::{grouped_gls_fit, ols_fit_with_totals, select_gls_mode, Axis, GlsMode, NormalEquations};
use crate::inference::{
    clt_diagnostics_with_totals, naive_ols_se, ols_sandwich_from_totals, standard_errors, to_rows, var_beta_grouped,
    Diagnostics,
};
use crate::ingest::{DedupPolicy, DesignWarning, IndexedDataset};
use crate::model::{FitResult, StepComponents, Timings, VarianceComponents};
use crate::moments::{build_moment_matrix, e_floor, residual_moments, solve_variance_components};
use crate::scan::ScanPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeChoice {
    #[default]
    Auto,
    Row,
    Col,
    /// Fit both one-factor GLS variants and keep the one with the smaller
    /// standard error for `FitOptions::compare_coef`.
    BothCompare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub mode: ModeChoice,
    /// Recorded for reporting; deduplication happens when indexing.
    pub dedup_policy: DedupPolicy,
    pub emit_diagnostics: bool,
    pub deterministic_reduction: bool,
    pub shards: usize,
    /// Coefficient compared in both-compare mode. Defaults to the first
    /// non-intercept coefficient.
    pub compare_coef: Option<usize>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            mode: ModeChoice::Auto,
            dedup_policy: DedupPolicy::AssumeUnique,
            emit_diagnostics: false,
            deterministic_reduction: false,
            shards: 1,
            compare_coef: None,
        }
    }
}

impl FitOptions {
    pub fn plan(&self) -> ScanPlan {
        ScanPlan {
            shards: self.shards.max(1),
            deterministic: self.deterministic_reduction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub coef: usize,
    pub row_beta: Vec<f64>,
    pub row_se: Vec<f64>,
    pub col_beta: Vec<f64>,
    pub col_se: Vec<f64>,
    pub chosen: GlsMode,
}

/// Wall-clock timer that reads zero where no clock is available.
#[derive(Debug, Clone, Copy)]
pub struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    pub fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    pub fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.elapsed().as_secs_f64()
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }

    /// Seconds since the last lap (or start), restarting the lap.
    pub fn lap(&mut self) -> f64 {
        let s = self.seconds();
        *self = Self::start();
        s
    }
}

fn warning_text(w: DesignWarning) -> &'static str {
    match w {
        DesignWarning::FewRows => "fewer than two rows: the row variance is not identified",
        DesignWarning::FewColumns => "fewer than two columns: the column variance is not identified",
        DesignWarning::RowDominates => "one row holds more than half of the observations",
        DesignWarning::ColumnDominates => "one column holds more than half of the observations",
    }
}

struct GlsOutcome {
    mode: GlsMode,
    beta: Vec<f64>,
    vc: VarianceComponents,
    cov: nalgebra::DMatrix<f64>,
    neq: NormalEquations,
}

fn gls_branch(
    ds: &IndexedDataset,
    mode: GlsMode,
    vc_step2: &VarianceComponents,
    plan: ScanPlan,
    timings: &mut Timings,
    clock: &mut Stopwatch,
) -> Result<GlsOutcome> {
    let (beta, neq) = grouped_gls_fit(ds, mode.axis(), vc_step2, plan)?;
    timings.gls += clock.lap();
    let rm = residual_moments(ds, &beta, plan)?;
    let vc = solve_variance_components(&build_moment_matrix(ds.profile()), &rm.u)?;
    timings.moments_step4 += clock.lap();
    let cov = var_beta_grouped(ds, &vc, &neq, plan)?;
    timings.covariance += clock.lap();
    Ok(GlsOutcome {
        mode,
        beta,
        vc,
        cov,
        neq,
    })
}

/// Runs the full alternating fit.
pub fn fit(ds: &IndexedDataset, opts: &FitOptions) -> Result<FitResult> {
    if opts.shards == 0 {
        return Err(Error::InvalidConfig("shards must be at least 1".into()));
    }
    let plan = opts.plan();
    let passes_before = ds.passes();
    let total = Stopwatch::start();
    let mut clock = Stopwatch::start();
    let mut timings = Timings::default();
    let mut warnings: Vec<String> = ds.warnings().iter().map(|w| warning_text(*w).to_owned()).collect();
    let profile = ds.profile();
    let d = ds.width();

    // Step 1: OLS, keeping row and column covariate totals for the sandwich.
    let (ols, totals) = ols_fit_with_totals(ds, plan)?;
    timings.ols = clock.lap();

    // Step 2: moments of the OLS residuals.
    let rm = residual_moments(ds, &ols.beta, plan)?;
    let naive = naive_ols_se(&ols.xtx, rm.rss, profile.n)?;
    if naive.iter().any(|v| v.is_nan()) {
        warnings.push("too few observations for naive OLS standard errors".into());
    }
    let step2 = solve_variance_components(&build_moment_matrix(profile), &rm.u);
    timings.moments_step2 = clock.lap();

    let vc_step2 = match step2 {
        Ok(vc) => vc,
        Err(Error::SingularMomentSystem) => {
            warnings.push("moment system is singular; reporting OLS with noise-only variance".into());
            let s2 = if profile.n as usize > d {
                rm.rss / (profile.n as usize - d) as f64
            } else {
                rm.u.u_e / profile.n as f64
            };
            let vc = VarianceComponents::from_raw([0.0, 0.0, s2], e_floor(&rm.u, profile.n));
            let cov = ols_sandwich_from_totals(&vc, &ols.xtx, &totals)?;
            timings.covariance = clock.lap();
            let se = standard_errors(&cov);
            timings.total = total.seconds();
            return Ok(FitResult {
                beta: ols.beta.clone(),
                cov_beta: to_rows(&cov),
                se_beta: se.clone(),
                vc,
                mode: None,
                ols_beta: ols.beta,
                ols_naive_se: naive,
                ols_sandwich_se: se,
                steps: StepComponents {
                    vc_step2: None,
                    vc_step4: vc,
                },
                diagnostics: None,
                profile: profile.summary(),
                warnings,
                comparison: None,
                passes: ds.passes() - passes_before,
                timings,
            });
        }
        Err(e) => return Err(e),
    };

    // Steps 3 to 5.
    let (chosen, comparison) = match opts.mode {
        ModeChoice::Auto => (
            gls_branch(
                ds,
                select_gls_mode(&vc_step2, profile),
                &vc_step2,
                plan,
                &mut timings,
                &mut clock,
            )?,
            None,
        ),
        ModeChoice::Row => (
            gls_branch(ds, GlsMode::RowGls, &vc_step2, plan, &mut timings, &mut clock)?,
            None,
        ),
        ModeChoice::Col => (
            gls_branch(ds, GlsMode::ColumnGls, &vc_step2, plan, &mut timings, &mut clock)?,
            None,
        ),
        ModeChoice::BothCompare => {
            let coef = opts.compare_coef.unwrap_or(if d > 1 { 1 } else { 0 });
            if coef >= d {
                return Err(Error::InvalidConfig(format!(
                    "compare coefficient {coef} out of range for {d} coefficients"
                )));
            }
            let row = gls_branch(ds, GlsMode::RowGls, &vc_step2, plan, &mut timings, &mut clock)?;
            let col = gls_branch(ds, GlsMode::ColumnGls, &vc_step2, plan, &mut timings, &mut clock)?;
            let (row_se, col_se) = (standard_errors(&row.cov), standard_errors(&col.cov));
            let row_wins = row_se[coef] <= col_se[coef];
            let cmp = ModeComparison {
                coef,
                row_beta: row.beta.clone(),
                row_se,
                col_beta: col.beta.clone(),
                col_se,
                chosen: if row_wins { GlsMode::RowGls } else { GlsMode::ColumnGls },
            };
            (if row_wins { row } else { col }, Some(cmp))
        }
    };

    let vc = chosen.vc;
    let ols_cov = ols_sandwich_from_totals(&vc, &ols.xtx, &totals)?;
    timings.covariance += clock.lap();

    let diagnostics: Option<Diagnostics> = if opts.emit_diagnostics {
        let axis: Axis = chosen.mode.axis();
        let diag = clt_diagnostics_with_totals(ds, &vc, axis, &chosen.neq.group_x, plan)?;
        timings.diagnostics = clock.lap();
        Some(diag)
    } else {
        None
    };

    timings.total = total.seconds();
    Ok(FitResult {
        se_beta: standard_errors(&chosen.cov),
        cov_beta: to_rows(&chosen.cov),
        beta: chosen.beta,
        vc,
        mode: Some(chosen.mode),
        ols_beta: ols.beta,
        ols_naive_se: naive,
        ols_sandwich_se: standard_errors(&ols_cov),
        steps: StepComponents {
            vc_step2: Some(vc_step2),
            vc_step4: vc,
        },
        diagnostics,
        profile: profile.summary(),
        warnings,
        comparison,
        passes: ds.passes() - passes_before,
        timings,
    })
}
