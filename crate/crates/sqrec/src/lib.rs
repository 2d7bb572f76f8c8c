//! Probabilistic superquadric recovery from point clouds.
//!
//! The crate fits superquadric primitives to 3D point clouds with a
//! Gaussian-uniform mixture model solved by EMS (expectation,
//! maximization, switching), extends the single fit to hierarchical
//! multi-superquadric decomposition, and ships a synthetic benchmark
//! harness plus file I/O for the `sqrec` command line tool.

pub mod bench;
pub mod ems;
pub mod error;
pub mod geometry;
pub mod gum;
pub mod hier;
pub mod io;
pub mod math;
pub mod spatial;

pub use error::{Error, Result};
pub use geometry::{PointCloud, Superquadric, SurfaceSamples};
pub use math::{Point3, Pose, Quat, Vec3};
