//! Functional principal component analysis for sparsely observed
//! two-dimensional surfaces on irregular triangulated domains, with serially
//! correlated latent scores.
//!
//! The model couples an orthonormal bivariate spline basis over a
//! triangulation (spatial side) with a small temporal basis for the mean and
//! AR(p) dynamics on the principal component scores. Estimation is a
//! penalized EM iteration whose E-step runs a Kalman filter and smoother on
//! the companion-form state space, so time points with few or zero
//! observations are handled directly.

pub mod ar;
pub mod archive;
pub mod bootstrap;
pub mod demean;
pub mod basis2d;
pub mod bernstein;
pub mod em;
pub mod error;
pub mod metrics;
pub mod model;
pub mod mesh;
pub mod panel;
pub mod parallel;
pub mod rng;
pub mod selection;
pub mod simulate;
pub mod state_space;
pub mod temporal;

pub use basis2d::{orthonormal_basis, BivariateBasis};
pub use error::{Error, Result};
pub use mesh::{Point2, Triangle, Triangulation};
pub use panel::{ObservationPanel, RawPanel};
pub use temporal::{build_temporal_basis, TemporalBasis, TemporalBasisSpec};
