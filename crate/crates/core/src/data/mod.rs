//! Tokenization, dataset files, and the synthetic visual-only-word task.

mod jsonl;
mod sample;
mod synthetic;
mod vocab;

pub use jsonl::{load_jsonl, read_sidecar, save_jsonl, write_sidecar};
pub use sample::{Dataset, Sample};
pub use synthetic::{generate_synthetic, split, Pools, SyntheticSpec};
pub use vocab::{TokenId, Vocabulary, BOS, EOS, PAD, RESERVED_TOKENS, UNK};
