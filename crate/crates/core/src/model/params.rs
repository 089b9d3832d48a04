use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::tensor::{AttentionWeights, Tensor, Var};

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in a fixed creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        ParamStore { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttnIds {
    pub fn bind(&self, p: &[Var]) -> AttentionWeights {
        AttentionWeights {
            wq: p[self.wq.0],
            wk: p[self.wk.0],
            wv: p[self.wv.0],
            wo: p[self.wo.0],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Self-attention and feed-forward sub-layers of one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub attn: AttnIds,
    pub ln_attn: NormIds,
    pub ffn: FfnIds,
    pub ln_ffn: NormIds,
}

/// Cross-modal attention plus the `LN(cross · W + Z)` injection sub-layer.
#[derive(Clone, Copy, Debug)]
pub struct InjectIds {
    pub cross: AttnIds,
    pub w_inject: ParamId,
    pub ln: NormIds,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerIds {
    pub block: BlockIds,
    pub inject: InjectIds,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerIds {
    pub self_attn: AttnIds,
    pub ln_self: NormIds,
    pub cross_attn: AttnIds,
    pub ln_cross: NormIds,
    pub ffn: FfnIds,
    pub ln_ffn: NormIds,
}

/// Where each role lives in the [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Layout {
    pub token_embedding: ParamId,
    pub text_positions: ParamId,
    pub visual_positions: ParamId,
    pub decoder_positions: ParamId,
    pub visual_projection: ParamId,
    /// Text layer `l` holds the visual-to-text attention and `W_t`.
    pub text: Vec<EncoderLayerIds>,
    /// Visual layer `l` holds the text-to-visual attention and `W'_v`.
    pub visual: Vec<EncoderLayerIds>,
    pub decoder: Vec<DecoderLayerIds>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
    pub sdm_projector: ParamId,
}

impl Layout {
    /// Parameters that belong to the decoder or the output head.
    pub fn decoder_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.decoder_positions, self.head_weight, self.head_bias];
        for l in &self.decoder {
            ids.extend(attn_ids(&l.self_attn));
            ids.extend(attn_ids(&l.cross_attn));
            ids.extend(norm_ids(&l.ln_self));
            ids.extend(norm_ids(&l.ln_cross));
            ids.extend(norm_ids(&l.ln_ffn));
            ids.extend([l.ffn.w1, l.ffn.b1, l.ffn.w2, l.ffn.b2]);
        }
        ids
    }
}

fn attn_ids(a: &AttnIds) -> [ParamId; 4] {
    [a.wq, a.wk, a.wv, a.wo]
}

fn norm_ids(n: &NormIds) -> [ParamId; 2] {
    [n.gamma, n.beta]
}

struct Builder {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in ±1/sqrt(fan_in), where fan_in is the row count.
    fn uniform(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let bound = 1.0 / (rows as f64).sqrt();
        self.uniform_bounded(name, rows, cols, bound)
    }

    fn uniform_bounded(&mut self, name: String, rows: usize, cols: usize, bound: f64) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        let t = Tensor::new(vec![rows, cols], data).expect("positive dims");
        self.push(name, t)
    }

    fn zeros(&mut self, name: String, n: usize) -> ParamId {
        self.push(name, Tensor::zeros(vec![n]))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gamma: self.push(format!("{prefix}.gamma"), Tensor::full(vec![d], 1.0)),
            beta: self.zeros(format!("{prefix}.beta"), d),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.uniform(format!("{prefix}.wq"), d, d),
            wk: self.uniform(format!("{prefix}.wk"), d, d),
            wv: self.uniform(format!("{prefix}.wv"), d, d),
            wo: self.uniform(format!("{prefix}.wo"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfnIds {
        FfnIds {
            w1: self.uniform(format!("{prefix}.w1"), d, d_ff),
            b1: self.zeros(format!("{prefix}.b1"), d_ff),
            w2: self.uniform(format!("{prefix}.w2"), d_ff, d),
            b2: self.zeros(format!("{prefix}.b2"), d),
        }
    }

    fn encoder_layer(&mut self, prefix: &str, d: usize, d_ff: usize) -> EncoderLayerIds {
        let block = BlockIds {
            attn: self.attn(&format!("{prefix}.self_attn"), d),
            ln_attn: self.norm(&format!("{prefix}.ln_attn"), d),
            ffn: self.ffn(&format!("{prefix}.ffn"), d, d_ff),
            ln_ffn: self.norm(&format!("{prefix}.ln_ffn"), d),
        };
        let inject = InjectIds {
            cross: self.attn(&format!("{prefix}.cross_attn"), d),
            w_inject: self.uniform(format!("{prefix}.w_inject"), d, d),
            ln: self.norm(&format!("{prefix}.ln_inject"), d),
        };
        EncoderLayerIds { block, inject }
    }
}

/// Allocates and initializes every parameter. The set of tensors and the
/// order of random draws depend only on the dimensions in `cfg`, never on the
/// variant, so every variant starts from the same weights for a given seed.
pub(crate) fn init(cfg: &ModelConfig, seed: u64) -> (ParamStore, Layout) {
    let (d, d_ff) = (cfg.d_model, cfg.d_ff);
    let emb_bound = 1.0 / (d as f64).sqrt();
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let token_embedding = b.uniform_bounded("token_embedding".into(), cfg.vocab_size, d, emb_bound);
    let text_positions = b.uniform_bounded("text_positions".into(), cfg.max_transcript_len, d, emb_bound);
    let visual_positions = b.uniform_bounded("visual_positions".into(), cfg.max_visual_len, d, emb_bound);
    let decoder_positions = b.uniform_bounded("decoder_positions".into(), cfg.max_summary_len, d, emb_bound);
    let visual_projection = b.uniform("visual_projection".into(), cfg.d_raw, d);

    let text = (1..=cfg.layers)
        .map(|l| b.encoder_layer(&format!("text.{l}"), d, d_ff))
        .collect();
    let visual = (1..=cfg.layers)
        .map(|l| b.encoder_layer(&format!("visual.{l}"), d, d_ff))
        .collect();
    let decoder = (1..=cfg.layers)
        .map(|l| {
            let p = format!("decoder.{l}");
            DecoderLayerIds {
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                ln_self: b.norm(&format!("{p}.ln_self"), d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                ln_cross: b.norm(&format!("{p}.ln_cross"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, d_ff),
                ln_ffn: b.norm(&format!("{p}.ln_ffn"), d),
            }
        })
        .collect();
    let head_weight = b.uniform("head.weight".into(), d, cfg.vocab_size);
    let head_bias = b.zeros("head.bias".into(), cfg.vocab_size);
    let sdm_projector = b.uniform("sdm_projector".into(), d, d);

    let layout = Layout {
        token_embedding,
        text_positions,
        visual_positions,
        decoder_positions,
        visual_projection,
        text,
        visual,
        decoder,
        head_weight,
        head_bias,
        sdm_projector,
    };
    (ParamStore::from_parts(b.names, b.tensors), layout)
}

/// Rebuilds the layout for `cfg` by name lookup in an existing store.
pub(crate) fn layout_for(cfg: &ModelConfig, store: &ParamStore) -> Option<Layout> {
    // A fresh init yields the canonical names in canonical order; the loaded
    // store must match it exactly.
    let (reference, layout) = init(cfg, 0);
    let same = reference.names() == store.names()
        && reference
            .tensors()
            .iter()
            .zip(store.tensors())
            .all(|(a, b)| a.shape() == b.shape());
    same.then_some(layout)
}
