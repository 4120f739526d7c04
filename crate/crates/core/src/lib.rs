pub mod central;
pub mod clusters;
pub mod consensus;
pub mod error;
pub mod feeder;
pub mod harness;
pub mod scenario;
mod sdp;
