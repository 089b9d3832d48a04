use super::{TokenId, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One (transcript, video features, reference summary) triple.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub transcript: Vec<TokenId>,
    /// n_v × d_raw feature rows; `None` when the sample has no video.
    pub video: Option<Tensor>,
    /// Reference summary, terminated by EOS.
    pub summary: Vec<TokenId>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.transcript.is_empty() {
            return Err(Error::Data(format!("sample `{}` has an empty transcript", self.id)));
        }
        if self.summary.last() != Some(&EOS) || self.summary.len() < 2 {
            return Err(Error::Data(format!(
                "sample `{}` summary must be nonempty and end with EOS",
                self.id
            )));
        }
        if let Some(v) = &self.video {
            if v.shape().len() != 2 || !v.is_finite() {
                return Err(Error::Data(format!(
                    "sample `{}` video features must be a finite matrix",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Summary tokens without the trailing EOS.
    pub fn summary_content(&self) -> &[TokenId] {
        match self.summary.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.summary,
        }
    }

    /// Teacher-forcing pair `(BOS + summary[..n-1], summary)`, both cut to at
    /// most `max_len` positions.
    pub fn decoder_io(&self, max_len: usize) -> (Vec<TokenId>, Vec<TokenId>) {
        let n = self.summary.len().min(max_len);
        let mut inputs = Vec::with_capacity(n);
        inputs.push(BOS);
        inputs.extend_from_slice(&self.summary[..n - 1]);
        (inputs, self.summary[..n].to_vec())
    }
}

/// Samples sharing one vocabulary and feature width.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub d_raw: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// A dataset with the same vocabulary holding `samples`.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Dataset {
        Dataset {
            vocab: self.vocab.clone(),
            d_raw: self.d_raw,
            samples,
        }
    }
}
