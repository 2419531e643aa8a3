//! Coefficient covariances and the central limit diagnostics.
//!
//! Row GLS ignores the column effect, so its covariance is the sandwich
//!
//! ```text
//! A^-1 + A^-1 W A^-1,   A = X' V_A^-1 X,   W = (sb / se^2) sum_j g_j g_j'
//! g_j = X_.j - sa sum_i Z_ij X_i. / (se + sa N_i.)
//! ```
//!
//! built from row and column totals (not means). Column GLS is the mirror.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gls::{efficiency_lower_bounds, Axis, MarginalTotals, NormalEquations};
use crate::ingest::{IndexedDataset, Record};
use crate::linalg::{min_eigenvalue, sandwich, symmetrize, trailing_block, Cholesky, GramAccumulator};
use crate::model::{DatasetProfile, VarianceComponents};
use crate::scan::{reduce, Accumulator, ScanPlan};

pub const PLUG_IN_NOTE: &str = "estimated clamped variance components substituted for the true ones";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub upsilon_hat: f64,
    pub eps_r: f64,
    pub eps_c: f64,
    pub eff_columns_stat: f64,
    pub c_j_concentration: f64,
    pub c_ij_concentration: f64,
    pub info_rowmeans_min_eig: f64,
    pub info_centered_min_eig: f64,
    pub info_colshrunk_min_eig: f64,
    pub eff_rls_lb: f64,
    pub eff_cls_lb: f64,
    /// Weighted mean of adjusted column means; the intercept entry is not used.
    pub k: Vec<f64>,
    /// The factor the GLS fit grouped by. For column GLS every row/column
    /// role above is exchanged.
    pub axis: Axis,
    pub plug_in: String,
}

fn outer_add(m: &mut DMatrix<f64>, v: &[f64], w: f64) {
    let d = v.len();
    for r in 0..d {
        let wr = w * v[r];
        for c in 0..d {
            m[(r, c)] += wr * v[c];
        }
    }
}

/// Per-group sums `sum_i Z_ij X_i. / (se + sg N_i.)` over the groups of
/// the ignored factor, plus the plain totals `X_.j`.
struct ProjectionAcc<'a> {
    axis: Axis,
    dim: usize,
    /// Group totals of the weighting factor, pre-scaled by `sg / (se + sg N)`.
    shrunk: &'a [f64],
    other_x: Vec<f64>,
}

impl Accumulator for ProjectionAcc<'_> {
    #[inline]
    fn push(&mut self, rec: &Record<'_>) {
        let g = self.axis.group(rec) * self.dim;
        let o = self.axis.other().group(rec) * self.dim;
        let slot = &mut self.other_x[o..o + self.dim];
        for k in 0..self.dim {
            slot[k] += rec.x[k] - self.shrunk[g + k];
        }
    }

    fn merge(&mut self, other: Self) {
        self.other_x.iter_mut().zip(other.other_x).for_each(|(a, b)| *a += b);
    }
}

/// Covariance of a one-factor GLS estimate under the full crossed model.
/// `neq` supplies the retained group totals; `vc` are the components to
/// evaluate at (normally those re-estimated after the GLS step).
pub fn var_beta_grouped(
    ds: &IndexedDataset,
    vc: &VarianceComponents,
    neq: &NormalEquations,
    plan: ScanPlan,
) -> Result<DMatrix<f64>> {
    let axis = neq.axis;
    let d = neq.dim();
    let (sg, se) = (axis.sigma2(vc), vc.sigma2_e);
    let so = axis.other().sigma2(vc);
    if !(se > 0.0) {
        return Err(Error::InvalidConfig(
            "covariance needs a positive noise variance".into(),
        ));
    }
    let (a, _) = neq.assemble(sg, se);
    let a_inv = Cholesky::new(&a)?.inverse();
    if so == 0.0 {
        return Ok(a_inv);
    }
    let shrunk: Vec<f64> = neq
        .group_counts
        .iter()
        .enumerate()
        .flat_map(|(g, &n)| {
            let w = sg / (se + sg * n as f64);
            neq.group_x[g * d..(g + 1) * d].iter().map(move |v| w * v)
        })
        .collect();
    let others = axis.other().counts(ds.profile()).len();
    let acc = reduce(ds, plan, || ProjectionAcc {
        axis,
        dim: d,
        shrunk: &shrunk,
        other_x: vec![0.0; others * d],
    })?;
    let mut w = DMatrix::zeros(d, d);
    for g in acc.other_x.chunks_exact(d) {
        outer_add(&mut w, g, 1.0);
    }
    w *= so / (se * se);
    let cov = &a_inv + sandwich(&a_inv, &w);
    Ok(symmetrize(&cov))
}

/// Covariance of the row GLS estimate.
pub fn var_beta_rls(
    ds: &IndexedDataset,
    vc: &VarianceComponents,
    neq: &NormalEquations,
    plan: ScanPlan,
) -> Result<DMatrix<f64>> {
    debug_assert_eq!(neq.axis, Axis::Rows);
    var_beta_grouped(ds, vc, neq, plan)
}

/// Covariance of the column GLS estimate.
pub fn var_beta_cls(
    ds: &IndexedDataset,
    vc: &VarianceComponents,
    neq: &NormalEquations,
    plan: ScanPlan,
) -> Result<DMatrix<f64>> {
    debug_assert_eq!(neq.axis, Axis::Cols);
    var_beta_grouped(ds, vc, neq, plan)
}

/// OLS sandwich from already collected row and column covariate totals:
/// `(X'X)^-1 [se X'X + sa sum_i X_i X_i' + sb sum_j X_j X_j'] (X'X)^-1`.
pub fn ols_sandwich_from_totals(
    vc: &VarianceComponents,
    xtx: &DMatrix<f64>,
    totals: &MarginalTotals,
) -> Result<DMatrix<f64>> {
    let d = totals.dim;
    let mut meat = xtx * vc.sigma2_e;
    if vc.sigma2_a > 0.0 {
        for t in totals.row_x.chunks_exact(d) {
            outer_add(&mut meat, t, vc.sigma2_a);
        }
    }
    if vc.sigma2_b > 0.0 {
        for t in totals.col_x.chunks_exact(d) {
            outer_add(&mut meat, t, vc.sigma2_b);
        }
    }
    let inv = Cholesky::new(xtx)?.inverse();
    Ok(symmetrize(&sandwich(&inv, &meat)))
}

struct TotalsAcc(MarginalTotals);

impl Accumulator for TotalsAcc {
    #[inline]
    fn push(&mut self, rec: &Record<'_>) {
        let d = self.0.dim;
        let (i, j) = (rec.row as usize * d, rec.col as usize * d);
        for (k, &v) in rec.x.iter().enumerate() {
            self.0.row_x[i + k] += v;
            self.0.col_x[j + k] += v;
        }
    }

    fn merge(&mut self, other: Self) {
        self.0.row_x.iter_mut().zip(other.0.row_x).for_each(|(a, b)| *a += b);
        self.0.col_x.iter_mut().zip(other.0.col_x).for_each(|(a, b)| *a += b);
    }
}

/// Per-row and per-column covariate totals in one pass.
pub fn marginal_totals(ds: &IndexedDataset, plan: ScanPlan) -> Result<MarginalTotals> {
    let d = ds.width();
    let p = ds.profile();
    reduce(ds, plan, || {
        TotalsAcc(MarginalTotals {
            dim: d,
            row_x: vec![0.0; p.rows() * d],
            col_x: vec![0.0; p.cols() * d],
        })
    })
    .map(|a| a.0)
}

/// Sandwich covariance of OLS under the crossed model; one pass.
pub fn var_beta_ols_sandwich(
    ds: &IndexedDataset,
    vc: &VarianceComponents,
    xtx: &DMatrix<f64>,
    plan: ScanPlan,
) -> Result<DMatrix<f64>> {
    let totals = marginal_totals(ds, plan)?;
    ols_sandwich_from_totals(vc, xtx, &totals)
}

/// Variance of the grand mean: `sa sum Ni^2/N^2 + sb sum Nj^2/N^2 + se/N`.
pub fn upsilon_diagnostic(vc: &VarianceComponents, profile: &DatasetProfile) -> f64 {
    vc.sigma2_a * profile.row_concentration()
        + vc.sigma2_b * profile.col_concentration()
        + vc.sigma2_e / profile.n as f64
}

struct ColumnAcc<'a> {
    axis: Axis,
    dim: usize,
    /// `w_g * xbar_g` per group of the GLS factor.
    shrunk_means: &'a [f64],
    /// `se / (se + sg N_g)` per group.
    c: &'a [f64],
    inv_count: &'a [f64],
    gram: GramAccumulator,
    sum_x: Vec<f64>,
    sum_shrunk: Vec<f64>,
    c_sum: Vec<f64>,
    inv_sum: Vec<f64>,
}

impl Accumulator for ColumnAcc<'_> {
    #[inline]
    fn push(&mut self, rec: &Record<'_>) {
        self.gram.push(rec.x, rec.y);
        let g = self.axis.group(rec);
        let o = self.axis.other().group(rec);
        let d = self.dim;
        for k in 0..d {
            self.sum_x[o * d + k] += rec.x[k];
            self.sum_shrunk[o * d + k] += self.shrunk_means[g * d + k];
        }
        self.c_sum[o] += self.c[g];
        self.inv_sum[o] += self.inv_count[g];
    }

    fn merge(&mut self, other: Self) {
        let add = |a: &mut Vec<f64>, b: Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        self.gram.merge(&other.gram);
        add(&mut self.sum_x, other.sum_x);
        add(&mut self.sum_shrunk, other.sum_shrunk);
        add(&mut self.c_sum, other.c_sum);
        add(&mut self.inv_sum, other.inv_sum);
    }
}

/// Diagnostics for the GLS fit grouped by `axis`, given that factor's
/// covariate totals (`dim` per group). One pass.
pub fn clt_diagnostics_with_totals(
    ds: &IndexedDataset,
    vc: &VarianceComponents,
    axis: Axis,
    group_x: &[f64],
    plan: ScanPlan,
) -> Result<Diagnostics> {
    let profile = ds.profile();
    let d = ds.width();
    let (sg, se) = (axis.sigma2(vc), vc.sigma2_e);
    if !(se > 0.0) {
        return Err(Error::InvalidConfig(
            "diagnostics need a positive noise variance".into(),
        ));
    }
    let counts = axis.counts(profile);
    let other_counts = axis.other().counts(profile);
    let groups = counts.len();

    let mut shrunk_means = vec![0.0; groups * d];
    let mut info_rowmeans = DMatrix::zeros(d, d);
    let mut between = DMatrix::zeros(d, d);
    let mut c = vec![0.0; groups];
    let mut inv_count = vec![0.0; groups];
    for (g, &n) in counts.iter().enumerate() {
        let n = n as f64;
        let total = &group_x[g * d..(g + 1) * d];
        let mean: Vec<f64> = total.iter().map(|v| v / n).collect();
        let w = if sg > 0.0 { sg / (sg + se / n) } else { 0.0 };
        for k in 0..d {
            shrunk_means[g * d + k] = w * mean[k];
        }
        outer_add(&mut info_rowmeans, &mean, 1.0);
        outer_add(&mut between, total, 1.0 / n);
        c[g] = se / (se + sg * n);
        inv_count[g] = 1.0 / n;
    }

    let acc = reduce(ds, plan, || ColumnAcc {
        axis,
        dim: d,
        shrunk_means: &shrunk_means,
        c: &c,
        inv_count: &inv_count,
        gram: GramAccumulator::new(d),
        sum_x: vec![0.0; other_counts.len() * d],
        sum_shrunk: vec![0.0; other_counts.len() * d],
        c_sum: vec![0.0; other_counts.len()],
        inv_sum: vec![0.0; other_counts.len()],
    })?;

    // Adjusted column means xbar_.j - xtilde_.j, then k.
    let mut adjusted = vec![0.0; other_counts.len() * d];
    let mut k = vec![0.0; d];
    let mut sq_total = 0.0;
    let mut sq_max = 0.0f64;
    for (j, &n) in other_counts.iter().enumerate() {
        let n = n as f64;
        for t in 0..d {
            adjusted[j * d + t] = (acc.sum_x[j * d + t] - acc.sum_shrunk[j * d + t]) / n;
            k[t] += n * n * adjusted[j * d + t];
        }
        sq_total += n * n;
        sq_max = sq_max.max(n * n);
    }
    k.iter_mut().for_each(|v| *v /= sq_total);
    let mut colshrunk = DMatrix::zeros(d, d);
    let mut dev = vec![0.0; d];
    for (j, &n) in other_counts.iter().enumerate() {
        for t in 0..d {
            dev[t] = adjusted[j * d + t] - k[t];
        }
        outer_add(&mut colshrunk, &dev, (n * n) as f64);
    }
    colshrunk /= sq_max;

    let centered = acc.gram.gram() - between;
    let r = groups as f64;
    let eff_columns_stat = acc.inv_sum.iter().map(|s| s * s).sum::<f64>() / (r * r);
    let c_j_sq: f64 = acc.c_sum.iter().map(|v| v * v).sum();
    let c_j_max = acc.c_sum.iter().fold(0.0f64, |m, v| m.max(v * v));
    let c_ij_sq: f64 = counts.iter().zip(&c).map(|(&n, v)| n as f64 * v * v).sum();
    let c_ij_max = c.iter().fold(0.0f64, |m, v| m.max(v * v));
    let (eff_rls_lb, eff_cls_lb) = efficiency_lower_bounds(vc, profile);

    Ok(Diagnostics {
        upsilon_hat: upsilon_diagnostic(vc, profile),
        eps_r: profile.eps_r(),
        eps_c: profile.eps_c(),
        eff_columns_stat,
        c_j_concentration: c_j_max / c_j_sq,
        c_ij_concentration: c_ij_max / c_ij_sq,
        info_rowmeans_min_eig: min_eigenvalue(&symmetrize(&info_rowmeans)),
        info_centered_min_eig: min_eigenvalue(&trailing_block(&symmetrize(&centered))),
        info_colshrunk_min_eig: min_eigenvalue(&trailing_block(&symmetrize(&colshrunk))),
        eff_rls_lb,
        eff_cls_lb,
        k,
        axis,
        plug_in: PLUG_IN_NOTE.to_owned(),
    })
}

/// Diagnostics for row GLS; two passes (row totals, then column sums).
pub fn clt_diagnostics(ds: &IndexedDataset, vc: &VarianceComponents, plan: ScanPlan) -> Result<Diagnostics> {
    let totals = marginal_totals(ds, plan)?;
    clt_diagnostics_with_totals(ds, vc, Axis::Rows, &totals.row_x, plan)
}

/// Standard errors from the diagonal of a covariance matrix.
pub fn standard_errors(cov: &DMatrix<f64>) -> Vec<f64> {
    (0..cov.nrows()).map(|k| cov[(k, k)].max(0.0).sqrt()).collect()
}

/// Classical OLS standard errors `sqrt(s^2 (X'X)^-1_kk)`, `s^2 = RSS/(N-d)`.
pub fn naive_ols_se(xtx: &DMatrix<f64>, rss: f64, n: u64) -> Result<Vec<f64>> {
    let d = xtx.nrows();
    if n as usize <= d {
        return Ok(vec![f64::NAN; d]);
    }
    let s2 = rss / (n as usize - d) as f64;
    let inv = Cholesky::new(xtx)?.inverse();
    Ok(standard_errors(&(inv * s2)))
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}
