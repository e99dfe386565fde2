//! Model estimation: node-wise design assembly, the ADMM solver for the
//! L1-regularized nonnegative least-squares program, and cross-validated
//! selection of the regularization strength.

mod admm;
mod design;
mod select;

pub use admm::{
    admm_fit, coordinate_descent_oracle, fit_all, fit_all_with_gammas, kkt_violation, AdmmSolver,
    AdmmStep, FitConfig, FitResult, NodeFit,
};
pub use design::{build_design, FitError, NodeDesign, Quadrature};
pub use select::{default_gamma_grid, select_gamma, GammaSelection};
