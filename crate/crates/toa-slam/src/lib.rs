//! Factor-graph back-end that fuses relative odometry with time-of-arrival
//! (ToA) range measurements to fixed radio base stations, producing a
//! globally referenced trajectory estimate together with the local-to-global
//! transform, per-station clock biases and (for monocular input) the metric
//! scale of the map.

pub mod cli;
pub mod eval;
pub mod factors;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod pipeline;
pub mod simulate;
