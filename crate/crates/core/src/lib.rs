//! Linear mixed models with crossed random effects, fitted in time linear
//! in the number of observations.
//!
//! ```text
//! y_ij = x_ij' beta + a_i + b_j + e_ij
//! ```
//!
//! Variance components come from method-of-moments U-statistics, the
//! coefficients from a GLS fit that accounts for one of the two factors,
//! and standard errors from a sandwich that accounts for both. Every step is
//! a scan over the data holding O(R + C) state.
//!
//! ```
//! use crossed_lmm::{fit, FitOptions, IndexedDataset, DedupPolicy, Observation};
//!
//! let obs = vec![
//!     Observation::new("u1", "item1", vec![1.0, 0.3], 2.0),
//!     Observation::new("u1", "item2", vec![1.0, -0.1], 1.2),
//!     Observation::new("u2", "item1", vec![1.0, 0.8], 3.1),
//!     Observation::new("u2", "item3", vec![1.0, 0.0], 0.9),
//!     Observation::new("u3", "item2", vec![1.0, 0.5], 2.2),
//!     Observation::new("u3", "item3", vec![1.0, -0.7], 0.1),
//! ];
//! let ds = IndexedDataset::from_observations(&obs, DedupPolicy::Error).unwrap();
//! let result = fit(&ds, &FitOptions::default()).unwrap();
//! assert_eq!(result.beta.len(), 2);
//! ```

pub mod error;
pub mod gls;
pub mod inference;
pub mod ingest;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod oracle;
pub mod pipeline;
pub mod scan;
pub mod simulator;

pub use error::{Error, Result};
pub use gls::{cls_fit, ols_fit, rls_fit, select_gls_mode, Axis, GlsMode};
pub use inference::{
    clt_diagnostics, upsilon_diagnostic, var_beta_cls, var_beta_ols_sandwich, var_beta_rls, Diagnostics,
};
pub use ingest::{index_dataset, open_path, DedupPolicy, IndexedDataset, ScanSource, Schema};
pub use model::{DatasetProfile, FitResult, Observation, VarianceComponents};
pub use moments::{build_moment_matrix, compute_u_statistics, solve_variance_components, UStatistics};
pub use pipeline::{fit, FitOptions, ModeChoice};
pub use scan::ScanPlan;
pub use simulator::{mc_study, simulate_crossed, simulate_replicate, EffectDist, Fill, SimConfig};
