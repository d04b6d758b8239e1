//! Numerical covariant stochastic calculus in vector bundles over a single
//! chart: connector and frame-lift transport, covariant Stratonovich and Itô
//! integrals, bundle-map pullback identities, curvature/commutation checks,
//! Hodge-Laplacian operators with gauge-twisted martingale tests, and a
//! seeded Monte Carlo harness around them.

pub mod covariant;
pub mod error;
pub mod fieldexpr;
pub mod geometry;
pub mod harmonic;
pub mod harness;
pub mod paths;

pub use error::{Error, Result};
