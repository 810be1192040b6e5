//! Confidence-initialised rectified flow for camera-controlled video
//! interpolation, at toy scale.

pub mod backbone;
pub mod eval;
pub mod flow;
pub mod geometry;
pub mod latentcodec;
pub mod io;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scenegen;
