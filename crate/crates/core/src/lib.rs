#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod baseline;
pub mod cloudproc;
pub mod dataio;
pub mod diffnum;
pub mod encoder;
pub mod error;
pub mod evalbench;
pub mod geom3d;
mod layers;
pub mod model;
pub mod posedecode;

pub use error::{Error, Result};
pub use cloudproc::PointCloud;
pub use geom3d::{PoseSet, RigidTransform, Rotation3};
