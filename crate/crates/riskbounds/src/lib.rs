//! Bounds on the risk premium of a one-dimensional Markovian pricing-kernel
//! market, computed from risk-neutral data only.
//!
//! The model is a diffusion `dX = k(X) dt + sigma(X) dW` on an interval,
//! together with a short-rate function `r(X)`. Positive solutions of the
//! second-order equation `L h = -lambda h`, where
//! `L h = 1/2 sigma^2 h'' + k h' - r h`, generate candidate pricing kernels;
//! the extremal solutions at each eigenvalue, the critical eigenvalue above
//! which no positive solution exists, and a martingale (non-explosion) test
//! for the transformed diffusion combine into pointwise envelopes for the
//! market price of risk `theta(x) = sigma(x) h'(x)/h(x)`.
//!
//! Pipeline stages, in dependency order:
//!
//! 1. [`expr`]: parse the coefficient formulas from configuration text.
//! 2. [`model`]: validate the diffusion and build the computational grid.
//! 3. [`odecore`]: integrate `L h = -lambda h` and track positivity.
//! 4. [`candidate`]: locate the interval of admissible initial slopes and
//!    the extremal solutions attaining its endpoints.
//! 5. [`spectral`]: bisect for the critical eigenvalue.
//! 6. [`admissibility`]: decide which candidate pairs induce true
//!    martingales (Feller explosion test) and derive the thresholds.
//! 7. [`bounds`]: assemble the bound curves for each variant.
//! 8. [`mcverify`]: Monte Carlo cross-checks of martingality and containment.
//! 9. [`cli`]: configuration ingestion, orchestration and file output.

pub mod admissibility;
pub mod bounds;
pub mod candidate;
pub mod cli;
pub mod error;
pub mod expr;
pub mod mcverify;
pub mod model;
pub mod numeric;
pub mod odecore;
pub mod spectral;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;
