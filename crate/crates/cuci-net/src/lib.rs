//! Context-aware multimodal incongruity classifier.
//!
//! Three stages over a (text, audio, visual) conversation record:
//!
//! 1. **Structure encoding** — a joint context+utterance token layout shared
//!    by all modalities, role and segment embeddings, a text-anchored
//!    context-utterance relation representation with a learned consistency
//!    score, and relation-routed dual-expert encoders for audio and visual.
//! 2. **Interpretation cues** — gated sequence summaries per modality,
//!    pairwise cross-modal cue vectors, and a context-conditioned global
//!    readout, concatenated into one fused cue vector.
//! 3. **Cue-guided interaction** — the cue vector steers per-modality
//!    refinement and gated cross-modal exchange, followed by adaptive
//!    aggregation and classification.
//!
//! Everything runs on a small reverse-mode autodiff tape ([`tape`]) in f64,
//! single-threaded and bit-reproducible for a fixed seed.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod train;
pub mod nn;
pub mod tape;

pub use error::{Error, Result};
