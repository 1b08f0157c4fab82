pub mod geometry;
pub mod pnp;
pub mod metrics;
pub mod dataset;
pub mod detector;
pub mod calibration;
