//! Evaluation and I/O: segmentation metrics, the synthetic corpus, and the
//! HDT tensor / PGM image file formats.

pub mod hdt;
pub mod metrics;
pub mod pgm;
pub mod synth;
