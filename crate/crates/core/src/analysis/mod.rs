//! The experiment suite: robustness of decompositions across seeds,
//! generalization to held-out images, activation-factorization baselines,
//! coefficient sweeps and report emission.

pub mod baselines;
pub mod generalization;
pub mod report;
pub mod robustness;
pub mod sweep;

pub use baselines::{fit_activation_basis, sample_with_basis, ActivationBasis, BasisConfig, BasisMethod};
pub use generalization::{generalization_study, GeneralizationCurve};
pub use report::{emit_report, StudyReport};
pub use robustness::{intersection, robustness_study, IntersectionReport};
pub use sweep::{manipulation_sweep, ManipulationSweep};
