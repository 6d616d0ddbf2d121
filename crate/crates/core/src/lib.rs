//! Bundle adjustment with a distributed reduced camera system.
//!
//! The reduced camera system is assembled point by point, stored in a
//! block-based sparse compression format, and solved with block-Jacobi
//! preconditioned conjugate gradients inside an exact Levenberg-Marquardt
//! loop. Assembly can run serially, across in-process workers, or across
//! socket-connected worker processes; all backends produce the same system
//! up to floating-point summation order.

pub mod bsmc;
pub mod dist;
pub mod geometry;
pub mod io;
pub mod lm;
pub mod normal_eq;
pub mod pcg;
pub mod problem;

pub use bsmc::{BlockLayout, BsmcMatrix, CsrMatrix, GlobalIdAnnotation};
pub use geometry::{CameraIntrinsics, CameraModel, CameraPose, Observation};
pub use normal_eq::{DampingState, PointSystem, RcsSystem};
pub use problem::{BaProblem, BlockModel};
