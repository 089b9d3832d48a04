//! Summary-worthy visual representation learning for multimodal abstractive
//! summarization, built from scratch at desk scale.
//!
//! The crate trains a small Transformer summarizer whose transcript encoder
//! receives visual information at every layer, optionally through an
//! auxiliary visual encoder coupled by bi-directional attention and supervised
//! by the decoder's own pooled output. Everything down to the autodiff tape
//! lives here:
//!
//! - [`tensor`]: dense `f64` tensors, a reverse-mode tape, attention, and a
//!   finite-difference gradient checker.
//! - [`model`]: the encoder stacks, decoder, architecture variants and
//!   checkpoints.
//! - [`train`]: losses, Adam and the training loop.
//! - [`data`]: vocabulary, JSONL datasets and the synthetic visual-only-word task.
//! - [`metrics`]: ROUGE, BLEU and novel-token recall.
//! - [`run`]: configs, run directories and the command implementations.
//!
//! ```
//! use swvr::data::{generate_synthetic, SyntheticSpec};
//! use swvr::model::{FusionModel, ModelConfig};
//!
//! let ds = generate_synthetic(&SyntheticSpec { n_samples: 4, ..Default::default() })?;
//! let model = FusionModel::new(ModelConfig::default(), 0)?;
//! let s = &ds.samples[0];
//! let summary = model.generate(&s.transcript, s.video.as_ref())?;
//! assert!(summary.len() <= model.config().max_summary_len);
//! # Ok::<(), swvr::Error>(())
//! ```

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Runs the book's code samples as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/runs.md")]
    mod runs {}
}
