//! Filesystem side of slimgraph: the `.twnm` model container, plan and
//! calibration sidecars, and the `slimgraph` command-line driver.

pub mod cli;
pub mod modelio;
pub mod sidecar;
