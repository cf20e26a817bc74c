//! TD(0) policy evaluation with linear features and tail averaging, on
//! finite Markov reward processes whose instance quantities are computed
//! exactly.
//!
//! Module map:
//! - [`mrp_model`]: MRPs, features, exact derived quantities.
//! - [`samplers`]: seeded i.i.d. and trajectory streams.
//! - [`lsa_core`]: the generic constant-step recursion and matrix products.
//! - [`td_algorithms`]: plain TD(0) and the data-drop variant.
//! - [`stability_probe`]: random-product stability, exact matrix inequalities.
//! - [`bound_lab`]: Monte-Carlo error reports and bound evaluators.

pub mod bound_lab;
pub mod error;
pub mod linalg;
pub mod lsa_core;
pub mod mrp_model;
pub mod samplers;
pub mod stability_probe;
pub mod td_algorithms;

pub use nalgebra::{DMatrix, DVector};

pub use bound_lab::{BoundInputs, BoundShape, ErrorReport};
pub use error::{Error, Result};
pub use lsa_core::{LsaTrace, LsaUpdate};
pub use mrp_model::{FeatureMap, FiniteMrp, InstanceSnapshot, LsaInstance};
pub use samplers::{InitialState, Observation, SeedSpec};
pub use stability_probe::StabilityReport;
pub use td_algorithms::{TdEstimate, TdRunConfig};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Formats a double with 17 significant digits, enough to round-trip.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
