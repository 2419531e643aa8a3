//! Ordinary and one-factor generalized least squares in a single pass.
//!
//! Row GLS weights by the inverse of `sigma2_e I + sigma2_a A_R`, where `A_R`
//! is block diagonal with all-ones blocks per row. By the Woodbury identity
//!
//! ```text
//! X' V^-1 X = X'X / se - (sa / se) sum_i X_i X_i' / (se + sa N_i)
//! ```
//!
//! with `X_i` the covariate total of row `i`, so one pass collecting the Gram
//! matrix and the per-row totals is enough. Column GLS is the mirror image.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{IndexedDataset, Record};
use crate::linalg::{Cholesky, GramAccumulator};
use crate::model::{DatasetProfile, VarianceComponents};
use crate::scan::{reduce, Accumulator, ScanPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GlsMode {
    #[serde(rename = "row")]
    RowGls,
    #[serde(rename = "col")]
    ColumnGls,
}

impl GlsMode {
    pub fn axis(self) -> Axis {
        match self {
            GlsMode::RowGls => Axis::Rows,
            GlsMode::ColumnGls => Axis::Cols,
        }
    }
}

/// Which grouping factor a pass aggregates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    Rows,
    Cols,
}

impl Axis {
    pub fn other(self) -> Axis {
        match self {
            Axis::Rows => Axis::Cols,
            Axis::Cols => Axis::Rows,
        }
    }

    #[inline]
    pub fn group(self, rec: &Record<'_>) -> usize {
        match self {
            Axis::Rows => rec.row as usize,
            Axis::Cols => rec.col as usize,
        }
    }

    pub fn counts(self, profile: &DatasetProfile) -> &[u64] {
        match self {
            Axis::Rows => &profile.row_counts,
            Axis::Cols => &profile.col_counts,
        }
    }

    pub fn max_count(self, profile: &DatasetProfile) -> u64 {
        match self {
            Axis::Rows => profile.max_row,
            Axis::Cols => profile.max_col,
        }
    }

    /// Variance of the random effect attached to this factor.
    pub fn sigma2(self, vc: &VarianceComponents) -> f64 {
        match self {
            Axis::Rows => vc.sigma2_a,
            Axis::Cols => vc.sigma2_b,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub beta: Vec<f64>,
    pub xtx: DMatrix<f64>,
    pub xty: DVector<f64>,
}

/// Covariate totals per row and per column, `dim` values per group.
#[derive(Debug, Clone)]
pub struct MarginalTotals {
    pub dim: usize,
    pub row_x: Vec<f64>,
    pub col_x: Vec<f64>,
}

impl MarginalTotals {
    pub fn group_x(&self, axis: Axis) -> &[f64] {
        match axis {
            Axis::Rows => &self.row_x,
            Axis::Cols => &self.col_x,
        }
    }
}

struct OlsAcc {
    gram: GramAccumulator,
    totals: Option<MarginalTotals>,
}

impl Accumulator for OlsAcc {
    #[inline]
    fn push(&mut self, rec: &Record<'_>) {
        self.gram.push(rec.x, rec.y);
        if let Some(t) = self.totals.as_mut() {
            let d = t.dim;
            let (i, j) = (rec.row as usize * d, rec.col as usize * d);
            for (k, &v) in rec.x.iter().enumerate() {
                t.row_x[i + k] += v;
                t.col_x[j + k] += v;
            }
        }
    }

    fn merge(&mut self, other: Self) {
        self.gram.merge(&other.gram);
        if let (Some(a), Some(b)) = (self.totals.as_mut(), other.totals) {
            a.row_x.iter_mut().zip(b.row_x).for_each(|(x, y)| *x += y);
            a.col_x.iter_mut().zip(b.col_x).for_each(|(x, y)| *x += y);
        }
    }
}

fn ols_pass(ds: &IndexedDataset, plan: ScanPlan, with_totals: bool) -> Result<(OlsFit, Option<MarginalTotals>)> {
    let d = ds.width();
    let p = ds.profile();
    let acc = reduce(ds, plan, || OlsAcc {
        gram: GramAccumulator::new(d),
        totals: with_totals.then(|| MarginalTotals {
            dim: d,
            row_x: vec![0.0; p.rows() * d],
            col_x: vec![0.0; p.cols() * d],
        }),
    })?;
    let xtx = acc.gram.gram();
    let xty = acc.gram.cross();
    let beta = Cholesky::new(&xtx)?.solve(&xty);
    Ok((
        OlsFit {
            beta: beta.iter().copied().collect(),
            xtx,
            xty,
        },
        acc.totals,
    ))
}

/// Ordinary least squares from one pass accumulating `X'X` and `X'y`.
pub fn ols_fit(ds: &IndexedDataset, plan: ScanPlan) -> Result<OlsFit> {
    ols_pass(ds, plan, false).map(|(fit, _)| fit)
}

/// OLS plus the per-row and per-column covariate totals, in the same pass.
pub fn ols_fit_with_totals(ds: &IndexedDataset, plan: ScanPlan) -> Result<(OlsFit, MarginalTotals)> {
    let (fit, totals) = ols_pass(ds, plan, true)?;
    Ok((fit, totals.expect("totals requested")))
}

/// Normal equations of a one-factor GLS fit together with the per-group
/// aggregates they were assembled from.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub axis: Axis,
    /// `X' W X` for the components it was assembled with.
    pub a: DMatrix<f64>,
    /// `X' W y`.
    pub b: DVector<f64>,
    /// Unweighted `X'X` and `X'y`.
    pub gram: DMatrix<f64>,
    pub xy: DVector<f64>,
    /// Per-group observation counts, covariate totals (`dim` per group) and
    /// response totals.
    pub group_counts: Vec<u64>,
    pub group_x: Vec<f64>,
    pub group_y: Vec<f64>,
    pub vc: VarianceComponents,
}

impl NormalEquations {
    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    /// `(X' W X, X' W y)` for `W = (se I + sg G)^-1`, `G` the group blocks.
    pub fn assemble(&self, sigma2_group: f64, sigma2_e: f64) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.dim();
        let mut a = &self.gram / sigma2_e;
        let mut b = &self.xy / sigma2_e;
        if sigma2_group > 0.0 {
            let lead = sigma2_group / sigma2_e;
            for (g, &n) in self.group_counts.iter().enumerate() {
                let w = lead / (sigma2_e + sigma2_group * n as f64);
                let xg = &self.group_x[g * d..(g + 1) * d];
                let yg = self.group_y[g];
                for r in 0..d {
                    let wr = w * xg[r];
                    b[r] -= wr * yg;
                    for c in r..d {
                        a[(r, c)] -= wr * xg[c];
                    }
                }
            }
            for r in 0..d {
                for c in 0..r {
                    a[(r, c)] = a[(c, r)];
                }
            }
        }
        (a, b)
    }

    /// `X' W X` for the given components on this factor.
    pub fn weighted_gram(&self, vc: &VarianceComponents) -> DMatrix<f64> {
        self.assemble(self.axis.sigma2(vc), vc.sigma2_e).0
    }
}

struct GroupAcc {
    axis: Axis,
    dim: usize,
    gram: GramAccumulator,
    group_x: Vec<f64>,
    group_y: Vec<f64>,
}

impl Accumulator for GroupAcc {
    #[inline]
    fn push(&mut self, rec: &Record<'_>) {
        self.gram.push(rec.x, rec.y);
        let g = self.axis.group(rec);
        let base = g * self.dim;
        for (slot, &v) in self.group_x[base..base + self.dim].iter_mut().zip(rec.x) {
            *slot += v;
        }
        self.group_y[g] += rec.y;
    }

    fn merge(&mut self, other: Self) {
        self.gram.merge(&other.gram);
        self.group_x.iter_mut().zip(other.group_x).for_each(|(a, b)| *a += b);
        self.group_y.iter_mut().zip(other.group_y).for_each(|(a, b)| *a += b);
    }
}

/// GLS accounting for the correlation induced by one factor.
pub fn grouped_gls_fit(
    ds: &IndexedDataset,
    axis: Axis,
    vc: &VarianceComponents,
    plan: ScanPlan,
) -> Result<(Vec<f64>, NormalEquations)> {
    if !(vc.sigma2_e > 0.0) {
        return Err(Error::InvalidConfig("GLS needs a positive noise variance".into()));
    }
    let d = ds.width();
    let counts = axis.counts(ds.profile());
    let groups = counts.len();
    let acc = reduce(ds, plan, || GroupAcc {
        axis,
        dim: d,
        gram: GramAccumulator::new(d),
        group_x: vec![0.0; groups * d],
        group_y: vec![0.0; groups],
    })?;
    let mut neq = NormalEquations {
        axis,
        a: DMatrix::zeros(d, d),
        b: DVector::zeros(d),
        gram: acc.gram.gram(),
        xy: acc.gram.cross(),
        group_counts: counts.to_vec(),
        group_x: acc.group_x,
        group_y: acc.group_y,
        vc: *vc,
    };
    let (a, b) = neq.assemble(axis.sigma2(vc), vc.sigma2_e);
    let beta = Cholesky::new(&a)?.solve(&b);
    neq.a = a;
    neq.b = b;
    Ok((beta.iter().copied().collect(), neq))
}

/// Row GLS: weights `(se I + sa A_R)^-1`. O(R p) memory.
pub fn rls_fit(ds: &IndexedDataset, vc: &VarianceComponents, plan: ScanPlan) -> Result<(Vec<f64>, NormalEquations)> {
    grouped_gls_fit(ds, Axis::Rows, vc, plan)
}

/// Column GLS: weights `(se I + sb B_C)^-1`. O(C p) memory.
pub fn cls_fit(ds: &IndexedDataset, vc: &VarianceComponents, plan: ScanPlan) -> Result<(Vec<f64>, NormalEquations)> {
    grouped_gls_fit(ds, Axis::Cols, vc, plan)
}

/// Row GLS iff `sigma2_a * max_row >= sigma2_b * max_col` (clamped values).
pub fn select_gls_mode(vc: &VarianceComponents, profile: &DatasetProfile) -> GlsMode {
    if vc.sigma2_a * profile.max_row as f64 >= vc.sigma2_b * profile.max_col as f64 {
        GlsMode::RowGls
    } else {
        GlsMode::ColumnGls
    }
}

/// Worst-case efficiency `4 se (se + s m) / (2 se + s m)^2` of a one-factor
/// GLS fit that ignores a factor with variance `s` and largest group `m`.
pub fn efficiency_lower_bound(sigma2_e: f64, sigma2_ignored: f64, max_ignored: u64) -> f64 {
    let t = sigma2_ignored * max_ignored as f64;
    4.0 * sigma2_e * (sigma2_e + t) / ((2.0 * sigma2_e + t) * (2.0 * sigma2_e + t))
}

/// `(eff_rls_lb, eff_cls_lb)` for a single predictor.
pub fn efficiency_lower_bounds(vc: &VarianceComponents, profile: &DatasetProfile) -> (f64, f64) {
    (
        efficiency_lower_bound(vc.sigma2_e, vc.sigma2_b, profile.max_col),
        efficiency_lower_bound(vc.sigma2_e, vc.sigma2_a, profile.max_row),
    )
}
