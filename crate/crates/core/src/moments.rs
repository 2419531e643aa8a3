//! Method-of-moments variance components from residual sums of squares.
//!
//! Three statistics are accumulated in one pass: the within-row and
//! within-column sums of squared deviations and the total sum of squared
//! deviations. Their expectations are linear in (sigma2_a, sigma2_b, sigma2_e)
//! with the count matrix
//!
//! ```text
//! [ 0              N - R          N - R   ]
//! [ N - C          0              N - C   ]
//! [ N^2 - sum Ni^2 N^2 - sum Nj^2 N^2 - N ]
//! ```
//!
//! whose last row is the expectation of `N * u_e` (the pairwise form of the
//! total sum of squares), so the right-hand side is `(u_a, u_b, N * u_e)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{IndexedDataset, Record};
use crate::linalg::Neumaier;
use crate::model::{DatasetProfile, VarianceComponents};
use crate::scan::{reduce, Accumulator, ScanPlan};

/// Relative determinant threshold of the row-equilibrated moment system.
pub const SINGULAR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UStatistics {
    /// Sum over rows of squared deviations from the row mean.
    pub u_a: f64,
    /// Sum over columns of squared deviations from the column mean.
    pub u_b: f64,
    /// Squared deviations from the grand mean.
    pub u_e: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentMatrix {
    pub m: [[f64; 3]; 3],
    pub n: u64,
}

pub fn build_moment_matrix(profile: &DatasetProfile) -> MomentMatrix {
    let n = profile.n as u128;
    let (r, c) = (profile.rows() as u128, profile.cols() as u128);
    let nn = n * n;
    let f = |v: u128| v as f64;
    MomentMatrix {
        m: [
            [0.0, f(n - r), f(n - r)],
            [f(n - c), 0.0, f(n - c)],
            [f(nn - profile.sum_sq_row), f(nn - profile.sum_sq_col), f(nn - n)],
        ],
        n: profile.n,
    }
}

/// Residual moments of one pass: the U-statistics plus the raw residual
/// sum of squares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualMoments {
    pub u: UStatistics,
    pub rss: f64,
}

struct ResidualAcc<'b> {
    beta: &'b [f64],
    row_sum: Vec<f64>,
    row_sq: Vec<f64>,
    col_sum: Vec<f64>,
    col_sq: Vec<f64>,
    sum: Neumaier,
    sq: Neumaier,
}

impl<'b> ResidualAcc<'b> {
    fn new(beta: &'b [f64], rows: usize, cols: usize) -> Self {
        Self {
            beta,
            row_sum: vec![0.0; rows],
            row_sq: vec![0.0; rows],
            col_sum: vec![0.0; cols],
            col_sq: vec![0.0; cols],
            sum: Neumaier::default(),
            sq: Neumaier::default(),
        }
    }
}

#[inline]
pub(crate) fn residual(rec: &Record<'_>, beta: &[f64]) -> f64 {
    rec.y - rec.x.iter().zip(beta).map(|(x, b)| x * b).sum::<f64>()
}

impl Accumulator for ResidualAcc<'_> {
    #[inline]
    fn push(&mut self, rec: &Record<'_>) {
        let eta = residual(rec, self.beta);
        let e2 = eta * eta;
        let (i, j) = (rec.row as usize, rec.col as usize);
        self.row_sum[i] += eta;
        self.row_sq[i] += e2;
        self.col_sum[j] += eta;
        self.col_sq[j] += e2;
        self.sum.add(eta);
        self.sq.add(e2);
    }

    fn merge(&mut self, other: Self) {
        let add = |a: &mut Vec<f64>, b: Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.row_sum, other.row_sum);
        add(&mut self.row_sq, other.row_sq);
        add(&mut self.col_sum, other.col_sum);
        add(&mut self.col_sq, other.col_sq);
        self.sum.merge(&other.sum);
        self.sq.merge(&other.sq);
    }
}

fn within(sums: &[f64], sqs: &[f64], counts: &[u64]) -> f64 {
    sums.iter()
        .zip(sqs)
        .zip(counts)
        .map(|((s, q), &n)| (q - s * s / n as f64).max(0.0))
        .sum()
}

pub fn residual_moments(ds: &IndexedDataset, beta: &[f64], plan: ScanPlan) -> Result<ResidualMoments> {
    assert_eq!(beta.len(), ds.width(), "coefficient length must match record width");
    let p = ds.profile();
    let acc = reduce(ds, plan, || ResidualAcc::new(beta, p.rows(), p.cols()))?;
    let n = p.n as f64;
    let (sum, sq) = (acc.sum.value(), acc.sq.value());
    let u = UStatistics {
        u_a: within(&acc.row_sum, &acc.row_sq, &p.row_counts),
        u_b: within(&acc.col_sum, &acc.col_sq, &p.col_counts),
        u_e: (sq - sum * sum / n).max(0.0),
    };
    if !(u.u_a.is_finite() && u.u_b.is_finite() && u.u_e.is_finite()) {
        return Err(Error::NonFinite("residual sums of squares".into()));
    }
    Ok(ResidualMoments { u, rss: sq })
}

/// One pass computing the U-statistics of `y - x^T beta`.
pub fn compute_u_statistics(ds: &IndexedDataset, beta: &[f64], plan: ScanPlan) -> Result<UStatistics> {
    residual_moments(ds, beta, plan).map(|r| r.u)
}

/// Solves a 3x3 system by Gaussian elimination with partial pivoting after
/// scaling every row (and its right-hand side) to unit max-norm.
pub fn solve_moment_system(m: &[[f64; 3]; 3], rhs: [f64; 3]) -> Result<[f64; 3]> {
    let mut a = *m;
    let mut b = rhs;
    for k in 0..3 {
        let s = a[k].iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        if s == 0.0 || !s.is_finite() {
            return Err(Error::SingularMomentSystem);
        }
        a[k].iter_mut().for_each(|v| *v /= s);
        b[k] /= s;
    }
    let norm: f64 = a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let mut det = 1.0;
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if piv != col {
            a.swap(piv, col);
            b.swap(piv, col);
            det = -det;
        }
        let d = a[col][col];
        det *= d;
        if d == 0.0 {
            return Err(Error::SingularMomentSystem);
        }
        for row in (col + 1)..3 {
            let f = a[row][col] / d;
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    if det.abs() <= SINGULAR_TOL * norm.powi(3) {
        return Err(Error::SingularMomentSystem);
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = ((row + 1)..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Ok(x)
}

/// Lower bound applied to the clamped noise variance.
pub fn e_floor(u: &UStatistics, n: u64) -> f64 {
    1e-12 * (u.u_e / (n.max(2) - 1) as f64 + 1.0)
}

pub fn solve_variance_components(m: &MomentMatrix, u: &UStatistics) -> Result<VarianceComponents> {
    let rhs = [u.u_a, u.u_b, m.n as f64 * u.u_e];
    let raw = solve_moment_system(&m.m, rhs)?;
    Ok(VarianceComponents::from_raw(raw, e_floor(u, m.n)))
}

/// Variance components of `y - x^T beta`: one pass plus a 3x3 solve.
pub fn estimate_components(ds: &IndexedDataset, beta: &[f64], plan: ScanPlan) -> Result<VarianceComponents> {
    let u = compute_u_statistics(ds, beta, plan)?;
    solve_variance_components(&build_moment_matrix(ds.profile()), &u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{DedupPolicy, IndexedDataset};
    use crate::model::{build_profile, Observation};
    use crate::oracle::naive_u_statistics;

    fn three_records() -> IndexedDataset {
        let obs = [
            Observation::new("r1", "c1", vec![1.0], 1.0),
            Observation::new("r1", "c2", vec![1.0], 3.0),
            Observation::new("r2", "c1", vec![1.0], 5.0),
        ];
        IndexedDataset::from_observations(&obs, DedupPolicy::Error).unwrap()
    }

    #[test]
    fn constant_residuals_give_zero() {
        let obs: Vec<_> = (0..6)
            .map(|k| Observation::new(format!("r{}", k % 2), format!("c{}", k % 3), vec![1.0], 4.25))
            .collect();
        let flat = IndexedDataset::from_observations(&obs, DedupPolicy::Error).unwrap();
        let u = compute_u_statistics(&flat, &[0.0], ScanPlan::default()).unwrap();
        assert_eq!((u.u_a, u.u_b, u.u_e), (0.0, 0.0, 0.0));
    }

    #[test]
    fn three_record_worked_case() {
        let ds = three_records();
        let u = compute_u_statistics(&ds, &[0.0], ScanPlan::default()).unwrap();
        assert!((u.u_a - 2.0).abs() < 1e-12);
        assert!((u.u_b - 8.0).abs() < 1e-12);
        assert!((u.u_e - 8.0).abs() < 1e-12);
        let m = build_moment_matrix(ds.profile());
        assert_eq!(m.m, [[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [4.0, 4.0, 6.0]]);
    }

    #[test]
    fn moment_matrix_full_grid() {
        let p = build_profile(vec![2, 2], vec![2, 2]).unwrap();
        assert_eq!(
            build_moment_matrix(&p).m,
            [[0.0, 2.0, 2.0], [2.0, 0.0, 2.0], [8.0, 8.0, 12.0]]
        );
    }

    #[test]
    fn singleton_rows_are_singular() {
        let p = build_profile(vec![1, 1, 1], vec![2, 1]).unwrap();
        let m = build_moment_matrix(&p);
        assert_eq!(m.m[0], [0.0, 0.0, 0.0]);
        let u = UStatistics {
            u_a: 0.0,
            u_b: 1.0,
            u_e: 1.0,
        };
        assert!(matches!(
            solve_variance_components(&m, &u),
            Err(Error::SingularMomentSystem)
        ));
    }

    #[test]
    fn bare_system_solution() {
        let m = [[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [4.0, 4.0, 6.0]];
        let x = solve_moment_system(&m, [2.0, 8.0, 8.0]).unwrap();
        let want = [-8.0, -14.0, 16.0];
        for k in 0..3 {
            assert!((x[k] - want[k]).abs() < 1e-12, "{x:?}");
        }
    }

    #[test]
    fn zero_statistics_clamp_to_floor() {
        let p = build_profile(vec![2, 2], vec![2, 2]).unwrap();
        let vc = solve_variance_components(
            &build_moment_matrix(&p),
            &UStatistics {
                u_a: 0.0,
                u_b: 0.0,
                u_e: 0.0,
            },
        )
        .unwrap();
        assert_eq!(vc.raw().map(|v| v.abs()), [0.0, 0.0, 0.0]);
        assert_eq!(vc.sigma2_e, 1e-12);
        assert!(vc.clamped[2]);
    }

    #[test]
    fn three_record_components() {
        let ds = three_records();
        let vc = estimate_components(&ds, &[0.0], ScanPlan::default()).unwrap();
        // M v = (2, 8, 3 * 8)
        let want = [0.0, -6.0, 8.0];
        for (got, w) in vc.raw().iter().zip(want) {
            assert!((got - w).abs() < 1e-12, "{:?}", vc.raw());
        }
        assert_eq!(vc.feasible(), [0.0, 0.0, 8.0]);
    }

    #[test]
    fn large_sparse_design_is_not_singular() {
        let rows = vec![6u64; 762_752];
        let n: u64 = rows.iter().sum();
        let (base, extra) = (n / 6_318, n % 6_318);
        let cols: Vec<u64> = (0..6_318).map(|j| base + u64::from(j < extra)).collect();
        let p = build_profile(rows, cols).unwrap();
        let m = build_moment_matrix(&p);
        let v = [1.1, 0.15, 4.5];
        let rhs = [
            m.m[0][1] * v[1] + m.m[0][2] * v[2],
            m.m[1][0] * v[0] + m.m[1][2] * v[2],
            m.m[2][0] * v[0] + m.m[2][1] * v[1] + m.m[2][2] * v[2],
        ];
        let x = solve_moment_system(&m.m, rhs).unwrap();
        for k in 0..3 {
            assert!((x[k] - v[k]).abs() < 1e-8 * v[k]);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn design() -> impl Strategy<Value = Vec<Observation>> {
            (2usize..12, 2usize..12, any::<u64>()).prop_map(|(r, c, seed)| {
                let mut s = seed | 1;
                let mut next = move || {
                    s ^= s << 13;
                    s ^= s >> 7;
                    s ^= s << 17;
                    s
                };
                let mut obs = Vec::new();
                for i in 0..r {
                    for j in 0..c {
                        if next() % 3 != 0 {
                            let x1 = (next() % 1000) as f64 / 100.0 - 5.0;
                            let y = (next() % 10_000) as f64 / 300.0 - 10.0;
                            obs.push(Observation::new(format!("r{i}"), format!("c{j}"), vec![1.0, x1], y));
                        }
                    }
                }
                if obs.is_empty() {
                    obs.push(Observation::new("r0", "c0", vec![1.0, 0.0], 1.0));
                }
                obs
            })
        }

        proptest! {
            #[test]
            fn streaming_matches_two_pass(obs in design(), b0 in -3.0..3.0f64, b1 in -2.0..2.0f64) {
                let ds = IndexedDataset::from_observations(&obs, DedupPolicy::Error).unwrap();
                let beta = [b0, b1];
                let fast = compute_u_statistics(&ds, &beta, ScanPlan::default()).unwrap();
                let slow = naive_u_statistics(&ds.collect_records().unwrap(), &beta);
                let close = |a: f64, b: f64| (a - b).abs() <= 1e-10 * b.abs().max(1e-300) + 1e-12;
                prop_assert!(close(fast.u_a, slow.u_a), "{} {}", fast.u_a, slow.u_a);
                prop_assert!(close(fast.u_b, slow.u_b));
                prop_assert!(close(fast.u_e, slow.u_e));
            }

            #[test]
            fn permutation_invariance(obs in design(), shift in 0usize..50) {
                let ds = IndexedDataset::from_observations(&obs, DedupPolicy::Error).unwrap();
                let mut rotated = obs.clone();
                rotated.rotate_left(shift % obs.len());
                rotated.reverse();
                let ds2 = IndexedDataset::from_observations(&rotated, DedupPolicy::Error).unwrap();
                let a = compute_u_statistics(&ds, &[0.3, -0.2], ScanPlan::default()).unwrap();
                let b = compute_u_statistics(&ds2, &[0.3, -0.2], ScanPlan::default()).unwrap();
                for (x, y) in [(a.u_a, b.u_a), (a.u_b, b.u_b), (a.u_e, b.u_e)] {
                    prop_assert!((x - y).abs() <= 1e-9 * y.abs().max(1e-12));
                }
            }

            #[test]
            fn matrix_row_sums(rows in proptest::collection::vec(1u64..9, 1..20), extra in 0u64..5) {
                let n: u64 = rows.iter().sum();
                let mut cols = vec![1u64; (extra as usize).min(n as usize - 1)];
                cols.push(n - cols.len() as u64);
                let p = build_profile(rows, cols).unwrap();
                let m = build_moment_matrix(&p);
                let (nf, rf) = (p.n as f64, p.rows() as f64);
                prop_assert_eq!(m.m[0].iter().sum::<f64>(), 2.0 * (nf - rf));
                let want = 3.0 * nf * nf - p.sum_sq_row as f64 - p.sum_sq_col as f64 - nf;
                prop_assert_eq!(m.m[2].iter().sum::<f64>(), want);
            }

            #[test]
            fn solve_round_trip(a in 0.0..5.0f64, b in 0.0..5.0f64, e in 0.01..5.0f64,
                                r in 2u64..30, c in 2u64..30, fill in 2u64..6) {
                // Balanced-ish counts: every row has `fill` obs, columns share them.
                let n = r * fill;
                let cols_n = c.min(n / 2).max(2);
                let mut cols = vec![n / cols_n; cols_n as usize];
                cols[0] += n - cols.iter().sum::<u64>();
                let p = build_profile(vec![fill; r as usize], cols).unwrap();
                let m = build_moment_matrix(&p).m;
                let v = [a, b, e];
                let rhs = [0, 1, 2].map(|k| (0..3).map(|l| m[k][l] * v[l]).sum::<f64>());
                match solve_moment_system(&m, rhs) {
                    Ok(x) => {
                        let scale = v.iter().fold(0.0f64, |s, t| s.max(t.abs()));
                        for k in 0..3 {
                            prop_assert!((x[k] - v[k]).abs() <= 1e-12 * scale * 10.0, "{x:?} vs {v:?}");
                        }
                    }
                    Err(_) => prop_assert!(p.eps_c() > 0.5 || p.eps_r() > 0.5),
                }
            }
        }
    }
}
