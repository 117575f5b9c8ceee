//! Core engine for multi-scale spatiotemporal graph EEG emotion recognition.
//!
//! The pipeline: recordings are segmented at two temporal levels and turned
//! into relative power spectral density features ([`signal`]); per-scale
//! global/local adjacency priors are initialized from batch statistics and
//! kept as trainable parameters ([`graph`]); Chebyshev graph encoders fuse
//! filtered and unfiltered views into token embeddings ([`encoder`]); the
//! token sequences run through a residual selective state-space stack
//! ([`mamba`]); pooled stream embeddings feed a linear classifier
//! ([`model`]). Training, splits and metrics live in [`train`], synthetic
//! data and the EEGB container in [`data`]. Everything differentiable is
//! built on the reverse-mode tape in [`tensor`].

pub mod data;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod mamba;
pub mod model;
pub mod signal;
pub mod tensor;
pub mod train;

pub use error::{MsgmError, Result};
pub use tensor::{Tape, Tensor, VarId};
