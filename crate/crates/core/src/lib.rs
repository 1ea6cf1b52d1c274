//! Vision-language tracking toolkit: box geometry, tagged reasoning replies,
//! reward scoring, group-relative advantages, dataset handling, one-pass
//! evaluation, the test-time tracking loop and the refiner client.

pub mod dataset;
pub mod exec;
pub mod geometry;
pub mod grpo;
pub mod metrics;
pub mod model_client;
pub mod response_format;
pub mod reward;
pub mod tracking;

pub use exec::Execution;
pub use geometry::BoundingBox;
