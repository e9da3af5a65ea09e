//! Numerical laboratory for a two-parameter family of polynomial vector
//! fields on the unit sphere S^3 whose flow unfolds a heteroclinic network
//! between two saddle-foci.
//!
//! The crate is organised around the objects of that study:
//!
//! * [`model`]: exact evaluation of the vector field, its Jacobian,
//!   equilibria, symmetry operators and the catalog of cubic perturbations
//!   tangent to the sphere.
//! * [`integrator`]: adaptive embedded Runge-Kutta 5(4) integration with
//!   dense output, sphere-drift monitoring, cross-section event location and
//!   periodic-orbit refinement.
//! * [`sections`]: cylindrical isolating blocks around the equilibria, the
//!   closed-form local and first-return maps, horseshoe strips and
//!   segment/spiral/helix curve classification.
//! * [`melnikov`]: the unperturbed connection profile, the splitting
//!   integrand and coefficients, and direct measurement of the manifold gap
//!   in the reduced system.
//! * [`manifolds`]: invariant-manifold tracing in the full flow:
//!   one-dimensional branches by eigen-shooting, section traces of the
//!   two-dimensional manifolds, transverse-connection and tangency
//!   detection, and Gauss linking numbers.
//! * [`switching`]: verification that trajectories follow prescribed paths
//!   on the network, itinerary extraction and shadowing searches.
//! * [`scanner`]: cartography of the (lambda1, lambda2) parameter plane:
//!   per-cell classification, homoclinic boundary tracing, codimension-two
//!   points and a deterministic resumable sweep.

pub mod geom;
pub mod integrator;
pub mod manifolds;
pub mod melnikov;
pub mod model;
pub mod scanner;
pub mod sections;
pub mod switching;

pub use model::{ModelParams, StateR4};

/// Crate version string stamped into exported data files.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
