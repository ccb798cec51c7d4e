//! ECG and report alignment: signal loading, waveform delineation, a
//! contrastive dual encoder with a caption decoder, retrieval, diagnosis
//! prompts, evaluation metrics and report assembly.

pub mod checkpoint;
pub mod ddp;
pub mod delineation;
pub mod error;
pub mod graph;
pub mod instruct;
pub mod metrics;
pub mod model;
pub mod params;
pub mod reportgen;
pub mod retrieval;
pub mod signal_io;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Error, Result};
