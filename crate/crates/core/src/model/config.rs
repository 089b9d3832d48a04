use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which route visual information takes into the transcript encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No visual input at all: a plain Transformer encoder-decoder.
    TextOnly,
    /// The projected features are injected unchanged into every text layer.
    DirectZv,
    /// A separate visual encoder stack feeds layer `l` of the text stack from
    /// its own layer `l`, through text-to-visual attention only.
    AuxEncoder,
    /// Auxiliary encoder plus bi-directional attention at `bvla_layers`.
    SwrFromTranscript,
    /// As [`Variant::SwrFromTranscript`], plus self-distillation from the
    /// decoder's pooled output at `sdm_layers`.
    SwrFromSummary,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::TextOnly,
        Variant::DirectZv,
        Variant::AuxEncoder,
        Variant::SwrFromTranscript,
        Variant::SwrFromSummary,
    ];

    /// The four visual variants, from simplest to full.
    pub const VISUAL: [Variant; 4] = [
        Variant::DirectZv,
        Variant::AuxEncoder,
        Variant::SwrFromTranscript,
        Variant::SwrFromSummary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TextOnly => "text_only",
            Variant::DirectZv => "direct_zv",
            Variant::AuxEncoder => "aux_encoder",
            Variant::SwrFromTranscript => "swr_from_transcript",
            Variant::SwrFromSummary => "swr_from_summary",
        }
    }

    pub fn uses_visual(self) -> bool {
        self != Variant::TextOnly
    }

    pub fn has_aux_encoder(self) -> bool {
        matches!(
            self,
            Variant::AuxEncoder | Variant::SwrFromTranscript | Variant::SwrFromSummary
        )
    }

    pub fn has_bvla(self) -> bool {
        matches!(self, Variant::SwrFromTranscript | Variant::SwrFromSummary)
    }

    pub fn has_sdm(self) -> bool {
        self == Variant::SwrFromSummary
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Architectural hyperparameters. Layer indices in `bvla_layers` and
/// `sdm_layers` are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub d_raw: usize,
    pub max_transcript_len: usize,
    pub max_visual_len: usize,
    pub max_summary_len: usize,
    pub bvla_layers: BTreeSet<usize>,
    pub sdm_layers: BTreeSet<usize>,
    pub variant: Variant,
}

pub const LN_EPS: f64 = 1e-5;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            d_model: 32,
            heads: 4,
            d_ff: 64,
            vocab_size: 64,
            d_raw: 16,
            max_transcript_len: 64,
            max_visual_len: 64,
            max_summary_len: 64,
            bvla_layers: top_layers(2, 0.5),
            sdm_layers: top_layers(2, 1.0 / 3.0),
            variant: Variant::SwrFromSummary,
        }
    }
}

/// `{from, ..., layers}`; empty when `from > layers`.
pub fn suffix_layers(from: usize, layers: usize) -> BTreeSet<usize> {
    (from.max(1)..=layers).collect()
}

/// The top `ceil(fraction * layers)` layers (at least one).
pub fn top_layers(layers: usize, fraction: f64) -> BTreeSet<usize> {
    let count = ((layers as f64 * fraction).ceil() as usize).clamp(1, layers);
    suffix_layers(layers - count + 1, layers)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_ff == 0 || self.d_raw == 0 {
            return fail("d_ff and d_raw must be positive".into());
        }
        if self.vocab_size <= crate::data::RESERVED_TOKENS {
            return fail(format!(
                "vocab_size {} leaves no room beyond the reserved tokens",
                self.vocab_size
            ));
        }
        if self.max_transcript_len == 0 || self.max_visual_len == 0 || self.max_summary_len == 0 {
            return fail("sequence caps must be positive".into());
        }
        for (name, set) in [("bvla_layers", &self.bvla_layers), ("sdm_layers", &self.sdm_layers)] {
            if let Some(&bad) = set.iter().find(|&&l| l == 0 || l > self.layers) {
                return fail(format!(
                    "{name} contains layer {bad}, outside 1..={}",
                    self.layers
                ));
            }
        }
        if !self.sdm_layers.is_empty() && !self.variant.has_sdm() {
            return fail(format!(
                "sdm_layers {:?} given but variant `{}` has no self-distillation",
                self.sdm_layers, self.variant
            ));
        }
        Ok(())
    }

    /// BVLA layers that are actually active for this variant.
    pub fn active_bvla(&self) -> BTreeSet<usize> {
        if self.variant.has_bvla() {
            self.bvla_layers.clone()
        } else {
            BTreeSet::new()
        }
    }

    /// SDM layers that are actually active for this variant.
    pub fn active_sdm(&self) -> BTreeSet<usize> {
        if self.variant.has_sdm() {
            self.sdm_layers.clone()
        } else {
            BTreeSet::new()
        }
    }

    /// The same architecture with a different variant; layer sets the new
    /// variant cannot use are cleared.
    pub fn with_variant(&self, variant: Variant) -> ModelConfig {
        let mut c = self.clone();
        c.variant = variant;
        if !variant.has_bvla() {
            c.bvla_layers.clear();
        }
        if !variant.has_sdm() {
            c.sdm_layers.clear();
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_helpers() {
        assert_eq!(top_layers(6, 0.5), [4, 5, 6].into());
        assert_eq!(top_layers(6, 1.0 / 3.0), [5, 6].into());
        assert_eq!(top_layers(2, 0.5), [2].into());
        assert_eq!(top_layers(2, 1.0 / 3.0), [2].into());
        assert!(suffix_layers(7, 6).is_empty());
        assert_eq!(suffix_layers(1, 3), [1, 2, 3].into());
    }

    #[test]
    fn validation() {
        let c = ModelConfig::default();
        c.validate().unwrap();

        let mut bad = c.clone();
        bad.heads = 5;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));

        let mut bad = c.clone();
        bad.bvla_layers.insert(3);
        assert!(bad.validate().is_err());

        let mut bad = c.clone();
        bad.variant = Variant::SwrFromTranscript;
        assert!(bad.validate().is_err(), "sdm layers without SDM variant");

        let ok = c.with_variant(Variant::AuxEncoder);
        ok.validate().unwrap();
        assert!(ok.active_bvla().is_empty());
    }

    #[test]
    fn variant_round_trips_through_json() {
        for v in Variant::ALL {
            let s = serde_json::to_string(&v).unwrap();
            assert_eq!(s, format!("\"{}\"", v.name()));
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }
}
