pub mod aggregation;
pub mod brdf;
pub mod envmap;
pub mod error;
pub mod geometry;
pub mod image;
pub mod insertion;
pub mod io;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod scene;
pub mod sg;
pub mod sg_fit;
pub mod surface;
pub mod vsg;
pub mod vsg_fit;

pub use envmap::EnvMapGrid;
pub use error::{Error, Result};
pub use math::{Frame, Rgb, Vec3};
pub use sg::{SgEnvironment, SgLobe};
