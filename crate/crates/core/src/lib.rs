//! Bandwidth allocation and topology planning for static peer-to-peer
//! networks that minimizes the weighted average download time (WADT).
//!
//! * [`model`]: instances, flow graphs, levels, taxonomy and metrics.
//! * [`waterfill`]: clamped water-filling, the two bounds built on it and
//!   per-level solvers.
//! * [`decompose`]: conversion of any valid flow graph into an equivalent
//!   strictly hierarchical network of sub-peers.
//! * [`placement`]: level placement of peers from a rate vector.
//! * [`convex`]: the full level-decomposed program and a brute-force oracle.
//! * [`harness`]: seeded experiments over the seven methods and reports.

pub mod convex;
pub mod decompose;
pub mod error;
pub mod harness;
pub mod model;
pub mod placement;
pub mod serde_f64;
pub mod waterfill;

pub use error::{Error, Result};
