//! File formats, synthetic test images and the `fkp` command line built on
//! [`fkp_core`].

pub mod cli;
pub mod config;
pub mod formats;
pub mod synth;
