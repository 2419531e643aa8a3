//! Dense reference computations for small instances.
//!
//! Everything here assembles the N x N covariance matrices explicitly and
//! uses plain dense factorizations, so it shares no code path with the
//! streaming estimators it is used to check.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gls::{cls_fit, ols_fit, rls_fit};
use crate::inference::{var_beta_cls, var_beta_ols_sandwich, var_beta_rls};
use crate::ingest::{DedupPolicy, IndexedDataset, OwnedRecord};
use crate::linalg::rel_diff;
use crate::model::{Observation, VarianceComponents};
use crate::moments::{compute_u_statistics, UStatistics};
use crate::pipeline::{fit, FitOptions};
use crate::scan::ScanPlan;

/// Largest N for which dense matrices are built.
pub const DENSE_LIMIT: usize = 5000;

/// Explicit matrices of a small design, with records in row ordering
/// (sorted by row, then column).
#[derive(Debug, Clone)]
pub struct DenseDesign {
    /// R x C incidence matrix.
    pub z: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// Same-row indicator in row ordering (block diagonal).
    pub a_r: DMatrix<f64>,
    /// Same-column indicator in row ordering.
    pub b_r: DMatrix<f64>,
    /// Same-column indicator in column ordering (block diagonal).
    pub b_c: DMatrix<f64>,
    /// Same-row indicator in column ordering.
    pub a_c: DMatrix<f64>,
    /// Maps column ordering to row ordering: `y_row = P y_col`.
    pub perm: DMatrix<f64>,
}

impl DenseDesign {
    pub fn from_dataset(ds: &IndexedDataset) -> Result<Self> {
        let n = ds.n() as usize;
        if n > DENSE_LIMIT {
            return Err(Error::TooLarge { n, limit: DENSE_LIMIT });
        }
        let recs = ds.collect_records()?;
        Self::from_records(&recs, ds.profile().rows(), ds.profile().cols())
    }

    pub fn from_records(recs: &[OwnedRecord], n_rows: usize, n_cols: usize) -> Result<Self> {
        let n = recs.len();
        if n > DENSE_LIMIT {
            return Err(Error::TooLarge { n, limit: DENSE_LIMIT });
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let d = recs[0].x.len();
        let mut by_row: Vec<&OwnedRecord> = recs.iter().collect();
        by_row.sort_by_key(|r| (r.row, r.col));
        let mut col_order: Vec<usize> = (0..n).collect();
        col_order.sort_by_key(|&k| (by_row[k].col, by_row[k].row));

        let mut z = DMatrix::zeros(n_rows, n_cols);
        let mut x = DMatrix::zeros(n, d);
        let mut y = DVector::zeros(n);
        for (k, r) in by_row.iter().enumerate() {
            z[(r.row as usize, r.col as usize)] = 1.0;
            for (c, &v) in r.x.iter().enumerate() {
                x[(k, c)] = v;
            }
            y[k] = r.y;
        }
        let rows: Vec<usize> = by_row.iter().map(|r| r.row as usize).collect();
        let cols: Vec<usize> = by_row.iter().map(|r| r.col as usize).collect();
        let same = |key: &[usize], order: &dyn Fn(usize) -> usize| {
            DMatrix::from_fn(n, n, |a, b| f64::from(key[order(a)] == key[order(b)]))
        };
        let id = |k: usize| k;
        let by_col = |k: usize| col_order[k];
        let mut perm = DMatrix::zeros(n, n);
        for (kc, &kr) in col_order.iter().enumerate() {
            perm[(kr, kc)] = 1.0;
        }
        Ok(Self {
            a_r: same(&rows, &id),
            b_r: same(&cols, &id),
            b_c: same(&cols, &by_col),
            a_c: same(&rows, &by_col),
            z,
            x,
            y,
            rows,
            cols,
            perm,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Covariance of y in row ordering: `se I + sa A_R + sb B_R`.
    pub fn v_r(&self, vc: &VarianceComponents) -> DMatrix<f64> {
        DMatrix::identity(self.n(), self.n()) * vc.sigma2_e + &self.a_r * vc.sigma2_a + &self.b_r * vc.sigma2_b
    }

    /// Covariance in column ordering: `se I + sa A_C + sb B_C`.
    pub fn v_c(&self, vc: &VarianceComponents) -> DMatrix<f64> {
        DMatrix::identity(self.n(), self.n()) * vc.sigma2_e + &self.a_c * vc.sigma2_a + &self.b_c * vc.sigma2_b
    }

    /// Row-only working covariance `se I + sa A_R` (row ordering).
    pub fn v_a(&self, vc: &VarianceComponents) -> DMatrix<f64> {
        DMatrix::identity(self.n(), self.n()) * vc.sigma2_e + &self.a_r * vc.sigma2_a
    }

    /// Column-only working covariance `se I + sb B_R`, expressed in row
    /// ordering so it pairs with `x` and `y`.
    pub fn v_b(&self, vc: &VarianceComponents) -> DMatrix<f64> {
        DMatrix::identity(self.n(), self.n()) * vc.sigma2_e + &self.b_r * vc.sigma2_b
    }
}

pub fn dense_covariance(design: &DenseDesign, vc: &VarianceComponents) -> Result<DMatrix<f64>> {
    if design.n() > DENSE_LIMIT {
        return Err(Error::TooLarge {
            n: design.n(),
            limit: DENSE_LIMIT,
        });
    }
    Ok(design.v_r(vc))
}

fn spd_solve(v: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = nalgebra::linalg::Cholesky::new(v.clone()).ok_or(Error::SingularCovariance)?;
    Ok(chol.solve(rhs))
}

fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = nalgebra::linalg::Cholesky::new(m.clone()).ok_or(Error::SingularCovariance)?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// `beta = (X' V^-1 X)^-1 X' V^-1 y` and `(X' V^-1 X)^-1`.
pub fn dense_gls(x: &DMatrix<f64>, y: &DVector<f64>, v: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let vinv_x = spd_solve(v, x)?;
    let info = x.transpose() * &vinv_x;
    let cov = spd_inverse(&info)?;
    let beta = &cov * (vinv_x.transpose() * y);
    Ok((beta, cov))
}

/// Covariance of the GLS estimator weighted by `w_cov^-1` when the true
/// covariance is `v_true`:
/// `(X' W X)^-1 X' W V W X (X' W X)^-1` with `W = w_cov^-1`.
pub fn dense_sandwich(x: &DMatrix<f64>, w_cov: &DMatrix<f64>, v_true: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let wx = spd_solve(w_cov, x)?;
    let bread = spd_inverse(&(x.transpose() * &wx))?;
    let meat = wx.transpose() * v_true * &wx;
    let s = &bread * meat * &bread;
    Ok((&s + s.transpose()) * 0.5)
}

/// Two-pass textbook U-statistics: explicit group means, then squared
/// deviations from them.
pub fn naive_u_statistics(records: &[OwnedRecord], beta: &[f64]) -> UStatistics {
    let eta: Vec<f64> = records
        .iter()
        .map(|r| r.y - r.x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let mut row_groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut col_groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (r, &e) in records.iter().zip(&eta) {
        row_groups.entry(r.row).or_default().push(e);
        col_groups.entry(r.col).or_default().push(e);
    }
    let ss = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>()
    };
    UStatistics {
        u_a: row_groups.values().map(|v| ss(v)).sum(),
        u_b: col_groups.values().map(|v| ss(v)).sum(),
        u_e: ss(&eta),
    }
}

/// Exact efficiencies of row GLS and column GLS relative to full GLS for a
/// single predictor `x` given in row ordering.
pub fn exact_efficiency(x: &DVector<f64>, vc: &VarianceComponents, design: &DenseDesign) -> Result<(f64, f64)> {
    if design.n() > 2000 {
        return Err(Error::TooLarge {
            n: design.n(),
            limit: 2000,
        });
    }
    let eff = |x: &DVector<f64>, v_work: &DMatrix<f64>, v_true: &DMatrix<f64>| -> Result<f64> {
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        let w = spd_solve(v_work, &xm)?;
        let t = spd_solve(v_true, &xm)?;
        let xwx = (xm.transpose() * &w)[(0, 0)];
        let xwvwx = (w.transpose() * v_true * &w)[(0, 0)];
        let xvx = (xm.transpose() * t)[(0, 0)];
        Ok(xwx * xwx / (xwvwx * xvx))
    };
    let eff_rls = eff(x, &design.v_a(vc), &design.v_r(vc))?;
    let x_col = design.perm.transpose() * x;
    let v_b_col = DMatrix::identity(design.n(), design.n()) * vc.sigma2_e + &design.b_c * vc.sigma2_b;
    let eff_cls = eff(&x_col, &v_b_col, &design.v_c(vc))?;
    Ok((eff_rls, eff_cls))
}

/// `(1/R^2) sum_{i,r} (Z Z')_{ir} / (N_i N_r)` by explicit double loop.
pub fn dense_effective_columns(design: &DenseDesign) -> f64 {
    let zz = &design.z * design.z.transpose();
    let counts: Vec<f64> = design.z.row_iter().map(|r| r.sum()).collect();
    let r = counts.len();
    let mut s = 0.0;
    for i in 0..r {
        for k in 0..r {
            s += zz[(i, k)] / (counts[i] * counts[k]);
        }
    }
    s / (r * r) as f64
}

/// Direction `x` (in row ordering) that makes row GLS as inefficient as
/// possible for this design: an equal mix of the extreme eigenvectors of
/// `V_A^{-1/2} V_R V_A^{-1/2}`, mapped back through `V_A^{1/2}`.
pub fn adversarial_direction(design: &DenseDesign, vc: &VarianceComponents) -> DVector<f64> {
    let va = SymmetricEigen::new(design.v_a(vc));
    let sqrt = &va.eigenvectors * DMatrix::from_diagonal(&va.eigenvalues.map(f64::sqrt)) * va.eigenvectors.transpose();
    let inv_sqrt = &va.eigenvectors
        * DMatrix::from_diagonal(&va.eigenvalues.map(|v| 1.0 / v.sqrt()))
        * va.eigenvectors.transpose();
    let k = &inv_sqrt * design.v_r(vc) * &inv_sqrt;
    let ke = SymmetricEigen::new((&k + k.transpose()) * 0.5);
    let (mut lo, mut hi) = (0, 0);
    for i in 0..ke.eigenvalues.len() {
        if ke.eigenvalues[i] < ke.eigenvalues[lo] {
            lo = i;
        }
        if ke.eigenvalues[i] > ke.eigenvalues[hi] {
            hi = i;
        }
    }
    let u = (ke.eigenvectors.column(lo) + ke.eigenvectors.column(hi)) / 2f64.sqrt();
    sqrt * u
}

/// Largest subsample `self_check` compares densely.
pub const VERIFY_LIMIT: usize = 2000;

/// Largest relative discrepancies between the streaming estimators and
/// their dense counterparts on one (sub)sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub n_source: u64,
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub downsampled: bool,
    /// Components the comparisons were run at.
    pub vc: [f64; 3],
    pub u_statistics: f64,
    pub rls_beta: f64,
    pub cls_beta: f64,
    pub rls_cov: f64,
    pub cls_cov: f64,
    pub ols_sandwich: f64,
}

impl VerifyReport {
    pub fn max_discrepancy(&self) -> f64 {
        [
            self.u_statistics,
            self.rls_beta,
            self.cls_beta,
            self.rls_cov,
            self.cls_cov,
            self.ols_sandwich,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn keep(index: u32, salt: u64, frac: f64) -> bool {
    let mut z = (index as u64).wrapping_add(salt).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ((z >> 11) as f64 / (1u64 << 53) as f64) < frac
}

/// Random rows and columns of `ds` holding at most `limit` records.
fn subsample(ds: &IndexedDataset, limit: usize, seed: u64) -> Result<Vec<Observation>> {
    let n = ds.n() as f64;
    let mut frac = (0.9 * limit as f64 / n).sqrt().min(1.0);
    loop {
        let mut kept = Vec::new();
        let mut over = false;
        ds.for_each(|r| {
            if over || !keep(r.row, seed, frac) || !keep(r.col, !seed, frac) {
                return;
            }
            if kept.len() == limit {
                over = true;
                return;
            }
            kept.push(Observation::new(
                ds.row_keys()[r.row as usize].clone(),
                ds.col_keys()[r.col as usize].clone(),
                r.x.to_vec(),
                r.y,
            ));
        })?;
        if !over {
            return Ok(kept);
        }
        frac *= 0.8;
    }
}

/// Streaming-versus-dense comparison on `ds`, or on a random subsample of
/// rows and columns when `ds` has more than [`VERIFY_LIMIT`] records.
///
/// Components come from a streaming fit of the sample; if that fit fails
/// the comparisons run at (1, 1, 1).
pub fn self_check(ds: &IndexedDataset, seed: u64, plan: ScanPlan) -> Result<VerifyReport> {
    let downsampled = ds.n() as usize > VERIFY_LIMIT;
    let owned;
    let sample = if downsampled {
        let obs = subsample(ds, VERIFY_LIMIT, seed)?;
        owned = IndexedDataset::from_observations(&obs, DedupPolicy::AssumeUnique)?;
        &owned
    } else {
        ds
    };
    let opts = FitOptions {
        shards: plan.shards,
        deterministic_reduction: plan.deterministic,
        ..FitOptions::default()
    };
    let vc = match fit(sample, &opts) {
        Ok(f) if f.mode.is_some() => f.vc,
        _ => VarianceComponents::known(1.0, 1.0, 1.0)?,
    };

    let ols = ols_fit(sample, plan)?;
    let fast = compute_u_statistics(sample, &ols.beta, plan)?;
    let recs = sample.collect_records()?;
    let slow = naive_u_statistics(&recs, &ols.beta);
    let d = DenseDesign::from_records(&recs, sample.profile().rows(), sample.profile().cols())?;
    let flat = |m: &DMatrix<f64>| m.iter().copied().collect::<Vec<_>>();

    let (rls, neq_r) = rls_fit(sample, &vc, plan)?;
    let (cls, neq_c) = cls_fit(sample, &vc, plan)?;
    let (dr, _) = dense_gls(&d.x, &d.y, &d.v_a(&vc))?;
    let (dc, _) = dense_gls(&d.x, &d.y, &d.v_b(&vc))?;
    let vr = d.v_r(&vc);
    let cov_r = var_beta_rls(sample, &vc, &neq_r, plan)?;
    let cov_c = var_beta_cls(sample, &vc, &neq_c, plan)?;
    let dense_r = dense_sandwich(&d.x, &d.v_a(&vc), &vr)?;
    let dense_c = dense_sandwich(&d.x, &d.v_b(&vc), &vr)?;
    let cov_ols = var_beta_ols_sandwich(sample, &vc, &ols.xtx, plan)?;
    let dense_ols = dense_sandwich(&d.x, &DMatrix::identity(d.n(), d.n()), &vr)?;

    Ok(VerifyReport {
        n_source: ds.n(),
        n: d.n(),
        rows: sample.profile().rows(),
        cols: sample.profile().cols(),
        downsampled,
        vc: vc.feasible(),
        u_statistics: rel_diff(&[fast.u_a, fast.u_b, fast.u_e], &[slow.u_a, slow.u_b, slow.u_e]),
        rls_beta: rel_diff(&rls, dr.as_slice()),
        cls_beta: rel_diff(&cls, dc.as_slice()),
        rls_cov: rel_diff(&flat(&cov_r), &flat(&dense_r)),
        cls_cov: rel_diff(&flat(&cov_c), &flat(&dense_c)),
        ols_sandwich: rel_diff(&flat(&cov_ols), &flat(&dense_ols)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vc(a: f64, b: f64, e: f64) -> VarianceComponents {
        VarianceComponents::known(a, b, e).unwrap()
    }

    fn small() -> DenseDesign {
        let obs = [
            Observation::new("r1", "c1", vec![1.0, 0.2], 1.0),
            Observation::new("r2", "c1", vec![1.0, -0.4], 3.0),
            Observation::new("r1", "c2", vec![1.0, 1.1], 5.0),
            Observation::new("r2", "c3", vec![1.0, 0.7], 2.0),
            Observation::new("r3", "c2", vec![1.0, -1.3], 0.5),
        ];
        DenseDesign::from_dataset(&IndexedDataset::from_observations(&obs, DedupPolicy::Error).unwrap()).unwrap()
    }

    #[test]
    fn noise_only_covariance_is_identity() {
        let d = small();
        let v = dense_covariance(&d, &vc(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(v, DMatrix::identity(5, 5));
    }

    #[test]
    fn two_records_in_one_row() {
        let obs = [
            Observation::new("r", "c1", vec![1.0], 1.0),
            Observation::new("r", "c2", vec![1.0], 2.0),
        ];
        let d =
            DenseDesign::from_dataset(&IndexedDataset::from_observations(&obs, DedupPolicy::Error).unwrap()).unwrap();
        let v = dense_covariance(&d, &vc(0.3, 0.5, 0.7)).unwrap();
        assert_eq!(v, DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 1.5]));
    }

    #[test]
    fn covariance_is_psd() {
        let d = small();
        let v = dense_covariance(&d, &vc(2.0, 0.5, 1.0)).unwrap();
        let min = SymmetricEigen::new(v).eigenvalues.min();
        assert!(min >= 1.0 - 1e-12);
    }

    #[test]
    fn column_ordering_is_a_permutation() {
        let d = small();
        let comps = vc(2.0, 0.5, 1.0);
        let vc_perm = d.perm.transpose() * d.v_r(&comps) * &d.perm;
        assert!((vc_perm - d.v_c(&comps)).abs().max() < 1e-15);
        assert!((&d.perm * &d.b_c * d.perm.transpose() - &d.b_r).abs().max() < 1e-15);
    }

    #[test]
    fn gls_with_scaled_identity() {
        let d = small();
        let eye = DMatrix::identity(5, 5);
        let (b1, c1) = dense_gls(&d.x, &d.y, &eye).unwrap();
        let (b2, c2) = dense_gls(&d.x, &d.y, &(&eye * 3.0)).unwrap();
        assert!((b1 - b2).abs().max() < 1e-12);
        assert!((c1 * 3.0 - c2).abs().max() < 1e-12);
    }

    #[test]
    fn gls_residual_orthogonality() {
        let d = small();
        let v = d.v_r(&vc(2.0, 0.5, 1.0));
        let (b, _) = dense_gls(&d.x, &d.y, &v).unwrap();
        let resid = &d.y - &d.x * b;
        let vinv_r = nalgebra::linalg::Cholesky::new(v).unwrap().solve(&resid);
        assert!((d.x.transpose() * vinv_r).abs().max() < 1e-9);
    }

    #[test]
    fn efficiency_is_one_without_column_effect() {
        let d = small();
        let x = d.x.column(1).into_owned();
        let (eff_rls, eff_cls) = exact_efficiency(&x, &vc(1.5, 0.0, 1.0), &d).unwrap();
        assert!((eff_rls - 1.0).abs() < 1e-12);
        assert!(eff_cls > 0.0 && eff_cls <= 1.0 + 1e-12);
    }

    #[test]
    fn guard_rejects_large() {
        let recs: Vec<OwnedRecord> = (0..DENSE_LIMIT + 1)
            .map(|k| OwnedRecord {
                row: k as u32,
                col: 0,
                x: vec![1.0],
                y: 0.0,
            })
            .collect();
        assert!(matches!(
            DenseDesign::from_records(&recs, DENSE_LIMIT + 1, 1),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn self_check_downsamples_large_input() {
        let (ds, _) =
            crate::simulator::simulate_crossed(&crate::simulator::SimConfig::square_design(10_000, 2, 8)).unwrap();
        let rep = self_check(&ds, 1, ScanPlan::sharded(3)).unwrap();
        assert!(rep.downsampled);
        assert!(rep.n <= VERIFY_LIMIT && rep.n > 100, "n = {}", rep.n);
        assert_eq!(rep.n_source, ds.n());
        assert!(rep.max_discrepancy() <= 1e-8, "{rep:?}");
    }

    #[test]
    fn self_check_small_input_is_whole() {
        let obs: Vec<Observation> = (0..60)
            .map(|k| {
                Observation::new(
                    format!("r{}", k % 7),
                    format!("c{}", k / 7),
                    vec![1.0, (k as f64).sin()],
                    (k as f64 * 0.3).cos(),
                )
            })
            .collect();
        let ds = IndexedDataset::from_observations(&obs, DedupPolicy::Error).unwrap();
        let rep = self_check(&ds, 0, ScanPlan::default()).unwrap();
        assert!(!rep.downsampled);
        assert_eq!(rep.n, 60);
        assert!(rep.max_discrepancy() <= 1e-8, "{rep:?}");
    }
}
