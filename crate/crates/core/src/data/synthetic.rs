//! A synthetic summarization task in which some summary words can only be
//! recovered from the video.
//!
//! The vocabulary has three disjoint pools: keywords (`k…`), fillers (`f…`)
//! and visual-only words (`v…`). A transcript mixes keywords and fillers; its
//! summary lists the transcript keywords in order and then the visual-only
//! words, which never occur in any transcript. Each visual-only word owns a
//! fixed one-hot code of width `d_raw`, written into one random row of the
//! video features on top of Gaussian noise.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, TokenId, Vocabulary, EOS, RESERVED_TOKENS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub n_samples: usize,
    /// Inclusive range of transcript lengths.
    pub transcript_len: (usize, usize),
    /// Inclusive range of summary lengths, EOS excluded.
    pub summary_len: (usize, usize),
    pub n_visual_tokens: usize,
    pub d_raw: usize,
    pub visual_only_token_count: usize,
    /// Size of the visual-only word pool.
    pub visual_pool_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 64,
            n_samples: 256,
            transcript_len: (6, 10),
            summary_len: (2, 4),
            n_visual_tokens: 4,
            d_raw: 16,
            visual_only_token_count: 1,
            visual_pool_size: 8,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

/// Word lists of the three pools.
#[derive(Clone, Debug)]
pub struct Pools {
    pub keywords: Vec<String>,
    pub fillers: Vec<String>,
    pub visual: Vec<String>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let (t_lo, t_hi) = self.transcript_len;
        let (s_lo, s_hi) = self.summary_len;
        if t_lo == 0 || t_lo > t_hi || s_lo == 0 || s_lo > s_hi {
            return fail("length ranges must be nonempty with positive minimum".into());
        }
        if self.visual_only_token_count > s_lo {
            return fail(format!(
                "visual_only_token_count {} exceeds the minimum summary length {s_lo}",
                self.visual_only_token_count
            ));
        }
        if self.visual_only_token_count > self.visual_pool_size {
            return fail("visual-only pool is smaller than the per-sample draw".into());
        }
        if self.visual_only_token_count > self.n_visual_tokens {
            return fail("not enough visual rows to place every visual-only code".into());
        }
        if s_hi - self.visual_only_token_count > t_lo {
            return fail("the shortest transcript cannot hold the longest keyword list".into());
        }
        if self.visual_pool_size > self.d_raw {
            return fail("one-hot codes need d_raw >= visual_pool_size".into());
        }
        let common = self
            .vocab_size.saturating_sub(RESERVED_TOKENS + self.visual_pool_size);
        if common < 2 {
            return fail(format!(
                "vocab_size {} leaves no room for keyword and filler pools",
                self.vocab_size
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be a finite non-negative number".into());
        }
        Ok(())
    }

    pub fn pools(&self) -> Pools {
        let common = self.vocab_size - RESERVED_TOKENS - self.visual_pool_size;
        let n_kw = common / 2;
        Pools {
            keywords: (0..n_kw).map(|i| format!("k{i:03}")).collect(),
            fillers: (0..common - n_kw).map(|i| format!("f{i:03}")).collect(),
            visual: (0..self.visual_pool_size).map(|i| format!("v{i:03}")).collect(),
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let pools = spec.pools();
    let vocab = Vocabulary::from_words(
        pools
            .keywords
            .iter()
            .chain(&pools.fillers)
            .chain(&pools.visual)
            .cloned(),
    );
    let ids = |ws: &[String]| -> Vec<TokenId> { ws.iter().map(|w| vocab.id(w).unwrap()).collect() };
    let (kw_ids, filler_ids, visual_ids) = (ids(&pools.keywords), ids(&pools.fillers), ids(&pools.visual));

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Code k is one-hot at dims[k]; dims is a random injection of the pool into 0..d_raw.
    let mut dims: Vec<usize> = (0..spec.d_raw).collect();
    dims.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let width = (spec.n_samples.max(1) - 1).to_string().len();
    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let t_len = rng.random_range(spec.transcript_len.0..=spec.transcript_len.1);
        let s_len = rng.random_range(spec.summary_len.0..=spec.summary_len.1);
        let n_kw = s_len - spec.visual_only_token_count;

        let mut transcript: Vec<TokenId> = (0..t_len)
            .map(|_| *filler_ids.choose(&mut rng).unwrap())
            .collect();
        let mut positions = rand::seq::index::sample(&mut rng, t_len, n_kw).into_vec();
        positions.sort_unstable();
        let mut summary = Vec::with_capacity(s_len + 1);
        for &p in &positions {
            let k = *kw_ids.choose(&mut rng).unwrap();
            transcript[p] = k;
            summary.push(k);
        }

        let visual_picks =
            rand::seq::index::sample(&mut rng, visual_ids.len(), spec.visual_only_token_count).into_vec();
        let rows = rand::seq::index::sample(&mut rng, spec.n_visual_tokens, spec.visual_only_token_count).into_vec();
        let mut feats = vec![0.0; spec.n_visual_tokens * spec.d_raw];
        if spec.noise_sigma > 0.0 {
            feats.iter_mut().for_each(|f| *f = noise.sample(&mut rng));
        }
        for (&v, &row) in visual_picks.iter().zip(&rows) {
            summary.push(visual_ids[v]);
            feats[row * spec.d_raw + dims[v]] += 1.0;
        }
        summary.push(EOS);

        let sample = Sample {
            id: format!("s{i:0width$}"),
            transcript,
            video: Some(Tensor::new(vec![spec.n_visual_tokens, spec.d_raw], feats)?),
            summary,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(Dataset {
        vocab,
        d_raw: spec.d_raw,
        samples,
    })
}

/// Seeded shuffle followed by a contiguous cut into train, dev and test.
pub fn split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_dev = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let take = |idx: &[usize]| dataset.with_samples(idx.iter().map(|&i| dataset.samples[i].clone()).collect());
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_dev]),
        take(&order[n_train + n_dev..]),
    ))
}
