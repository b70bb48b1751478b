//! Keyed high-frequency signatures for speech audio.

pub mod audio_io;
pub mod checkpoint;
pub mod dsp;
pub mod keydp;
pub mod patch;
pub mod signet;
pub mod vernet;
pub mod threatlab;
pub mod trainer;
pub mod evalkit;
