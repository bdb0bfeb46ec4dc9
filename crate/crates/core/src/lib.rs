//! Differentiable 3D Gaussian splatting for targeted, sparse-view
//! reconstruction.
//!
//! The crate is `no_std` (with `alloc`). Enable `parallel` to render tiles on
//! a rayon pool; results are bit-identical either way.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod control;
pub mod depth;
pub mod error;
pub mod grid;
pub mod knn;
pub mod math;
pub mod optim;
pub mod photometric;
pub mod render;
pub mod scene;
pub mod semantics;
pub mod sh;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use grid::{Grid, IdMask, Image, Mask};
pub use render::{GradientSet, ParamMask, RenderOutput, RenderSettings};
pub use scene::{Aabb, Camera, ClassHead, GaussianCloud, ViewBundle, ID_DIM};
