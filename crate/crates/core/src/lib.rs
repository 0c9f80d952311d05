//! Frame-level birdsong syllable detection and song-structure analysis.

pub mod analysis;
pub mod dataio;
pub mod dsp;
pub mod error;
pub mod model;
pub mod nn;
pub mod semisl;
pub mod ssl_mae;
pub mod ssl_osc;
pub mod supervised;
pub mod synth;

pub use error::{Error, Result};
