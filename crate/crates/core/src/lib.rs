//! End-to-end speech-to-audio generation at desk scale.
//!
//! A spoken description of sound events is encoded into frame-level speech
//! embeddings, mapped by a bridge network to a fixed-size semantic
//! representation, and used to condition a latent flow-matching generator
//! whose output a waveform VAE decodes to audio. A cascaded ASR → text
//! baseline, representation probing and an evaluation/latency harness sit
//! alongside.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod matrix;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
pub mod speech_encoder;
pub mod train;
pub mod bridge;
pub mod gradcheck;
pub mod probe;
pub mod audio_vae;
pub mod flowmatch;
pub mod cascade;
pub mod pipeline;
