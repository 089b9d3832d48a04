//! The fusion architecture: a transcript encoder with per-layer visual
//! injection, an auxiliary visual encoder coupled to it through
//! bi-directional attention, and an autoregressive decoder.
//!
//! Forward computations are methods on [`Forward`], a view of the parameter
//! layout bound to leaves of a [`Graph`]. [`FusionModel`] owns the parameter
//! values and offers convenience entry points that build the graph.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{suffix_layers, top_layers, ModelConfig, Variant, LN_EPS};
pub use params::{
    AttnIds, BlockIds, DecoderLayerIds, EncoderLayerIds, FfnIds, InjectIds, Layout, NormIds,
    ParamId, ParamStore,
};

use crate::data::{TokenId, BOS, EOS};
use crate::error::{Error, Result};
use crate::tensor::{multi_head_attention, Attention, Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct FusionModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl FusionModel {
    /// Validates `config` and initializes parameters from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = params::init(&config, seed);
        Ok(FusionModel {
            config,
            params,
            layout,
        })
    }

    pub(crate) fn from_store(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = params::layout_for(&config, &params).ok_or_else(|| {
            Error::Checkpoint("stored tensors do not match the configured architecture".into())
        })?;
        Ok(FusionModel {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Records every parameter as a leaf of `g`. Trainable leaves collect
    /// gradients; frozen ones are constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t) })
            .collect()
    }

    /// A forward view over parameters already bound with [`FusionModel::bind`].
    pub fn forward<'a>(&'a self, bound: &'a [Var]) -> Forward<'a> {
        Forward::new(&self.config, &self.layout, bound)
    }

    /// Greedy decoding from BOS until EOS or `max_summary_len` tokens.
    /// The returned tokens exclude BOS and EOS.
    pub fn generate(&self, transcript: &[TokenId], visual: Option<&Tensor>) -> Result<Vec<TokenId>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let fwd = self.forward(&bound);
        let enc = fwd.encode(&mut g, transcript, visual)?;
        fwd.generate_from(&mut g, enc.text_final)
    }
}

/// Per-layer record of what the encoder did.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub text_injected: bool,
    pub bvla: bool,
    /// Mean row entropy (nats) of the visual-to-text attention, over heads.
    pub v2t_entropy: Option<f64>,
    /// Mean row entropy (nats) of the text-to-visual attention, over heads.
    pub t2v_entropy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct EncodeResult {
    /// Final transcript representation handed to the decoder.
    pub text_final: Var,
    /// Visual representation collected at each layer; empty for text-only.
    pub visual_per_layer: Vec<Var>,
    pub diagnostics: Vec<LayerDiagnostics>,
    /// Truncations applied to over-length inputs.
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// n_w × vocab.
    pub logits: Var,
    /// Final-layer decoder states before the output head, n_w × d.
    pub hidden: Var,
    /// Mean of `hidden` over positions: the pooled pseudo-summary vector.
    pub pooled: Var,
}

/// Forward computations over bound parameters.
#[derive(Clone, Copy)]
pub struct Forward<'a> {
    cfg: &'a ModelConfig,
    layout: &'a Layout,
    p: &'a [Var],
}

fn mean_row_entropy(g: &Graph, weights: &[Var]) -> f64 {
    let mut total = 0.0;
    let mut rows = 0usize;
    for &w in weights {
        let cols = g.shape(w)[1];
        for row in g.value(w).chunks(cols) {
            total -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
            rows += 1;
        }
    }
    total / rows.max(1) as f64
}

impl<'a> Forward<'a> {
    pub fn new(cfg: &'a ModelConfig, layout: &'a Layout, p: &'a [Var]) -> Self {
        Forward { cfg, layout, p }
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    pub fn layout(&self) -> &Layout {
        self.layout
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.p[id.index()]
    }

    fn norm(&self, g: &mut Graph, x: Var, n: &NormIds) -> Result<Var> {
        g.layer_norm(x, self.var(n.gamma), self.var(n.beta), LN_EPS)
    }

    fn attend(&self, g: &mut Graph, q: Var, kv: Var, ids: &AttnIds, causal: bool) -> Result<Attention> {
        multi_head_attention(g, q, kv, kv, &ids.bind(self.p), self.cfg.heads, causal)
    }

    pub fn ffn(&self, g: &mut Graph, x: Var, f: &FfnIds) -> Result<Var> {
        let h = g.matmul(x, self.var(f.w1))?;
        let h = g.add_row(h, self.var(f.b1))?;
        let h = g.gelu(h);
        let o = g.matmul(h, self.var(f.w2))?;
        g.add_row(o, self.var(f.b2))
    }

    /// Post-norm self-attention and feed-forward sub-layers.
    pub fn encoder_block(&self, g: &mut Graph, z: Var, b: &BlockIds) -> Result<Var> {
        let att = self.attend(g, z, z, &b.attn, false)?;
        let r = g.add(att.output, z)?;
        let z1 = self.norm(g, r, &b.ln_attn)?;
        let f = self.ffn(g, z1, &b.ffn)?;
        let r = g.add(f, z1)?;
        self.norm(g, r, &b.ln_ffn)
    }

    /// `LN(cross · W + z)`.
    pub fn inject(&self, g: &mut Graph, z: Var, cross: Var, ids: &InjectIds) -> Result<Var> {
        let c = g.matmul(cross, self.var(ids.w_inject))?;
        let r = g.add(c, z)?;
        self.norm(g, r, &ids.ln)
    }

    /// Visual-to-text attention at `layer` (1-based): text queries over
    /// visual keys and values. Output is n_t × d.
    pub fn vla(&self, g: &mut Graph, layer: usize, zt: Var, zv: Var) -> Result<Attention> {
        let ids = self.layout.text[layer - 1].inject.cross;
        self.attend(g, zt, zv, &ids, false)
    }

    /// Text-to-visual attention at `layer`: visual queries over text keys and
    /// values. Output is n_v × d.
    pub fn t2v(&self, g: &mut Graph, layer: usize, zt: Var, zv: Var) -> Result<Attention> {
        let ids = self.layout.visual[layer - 1].inject.cross;
        self.attend(g, zv, zt, &ids, false)
    }

    /// Bi-directional visual-language attention at `layer`. Returns
    /// `(text→visual: n_v×d, visual→text: n_t×d)`; the two directions use
    /// separate projections.
    pub fn bvla(&self, g: &mut Graph, layer: usize, zt: Var, zv: Var) -> Result<(Attention, Attention)> {
        let to_visual = self.t2v(g, layer, zt, zv)?;
        let to_text = self.vla(g, layer, zt, zv)?;
        Ok((to_visual, to_text))
    }

    /// Raw features (n_v × d_raw) to model width, without positions.
    pub fn project_visual(&self, g: &mut Graph, raw: Var) -> Result<Var> {
        if g.shape(raw).first() == Some(&0) {
            return Err(Error::EmptySequence("project_visual"));
        }
        g.matmul(raw, self.var(self.layout.visual_projection))
    }

    /// One transcript encoder layer. With `zv` present (the visual state at
    /// this layer), the visual-to-text injection sub-layer follows the block.
    pub fn text_encoder_layer(&self, g: &mut Graph, layer: usize, z_prev: Var, zv: Option<Var>) -> Result<Var> {
        let ids = &self.layout.text[layer - 1];
        let z = self.encoder_block(g, z_prev, &ids.block)?;
        match zv {
            Some(zv) => {
                let att = self.vla(g, layer, z, zv)?;
                self.inject(g, z, att.output, &ids.inject)
            }
            None => Ok(z),
        }
    }

    /// One visual encoder layer. With `zt` present (the transcript state at
    /// this layer before its own injection), the text-to-visual injection
    /// sub-layer follows the block.
    pub fn visual_encoder_layer(&self, g: &mut Graph, layer: usize, zv_prev: Var, zt: Option<Var>) -> Result<Var> {
        let ids = &self.layout.visual[layer - 1];
        let z = self.encoder_block(g, zv_prev, &ids.block)?;
        match zt {
            Some(zt) => {
                let att = self.t2v(g, layer, zt, z)?;
                self.inject(g, z, att.output, &ids.inject)
            }
            None => Ok(z),
        }
    }

    fn embed(&self, g: &mut Graph, ids: &[usize], positions: ParamId) -> Result<Var> {
        let tok = g.gather_rows(self.var(self.layout.token_embedding), ids)?;
        let pos_ids: Vec<usize> = (0..ids.len()).collect();
        let pos = g.gather_rows(self.var(positions), &pos_ids)?;
        g.add(tok, pos)
    }

    /// Runs both encoder stacks in lockstep.
    pub fn encode(&self, g: &mut Graph, transcript: &[TokenId], visual: Option<&Tensor>) -> Result<EncodeResult> {
        let cfg = self.cfg;
        let mut warnings = Vec::new();
        if transcript.is_empty() {
            return Err(Error::EmptySequence("encode"));
        }
        let mut ids: Vec<usize> = transcript.iter().map(|&t| t as usize).collect();
        if ids.len() > cfg.max_transcript_len {
            let msg = format!(
                "transcript of {} tokens truncated to {}",
                ids.len(),
                cfg.max_transcript_len
            );
            log::warn!("{msg}");
            warnings.push(msg);
            ids.truncate(cfg.max_transcript_len);
        }
        let mut zt = self.embed(g, &ids, self.layout.text_positions)?;

        let mut diagnostics = Vec::with_capacity(cfg.layers);
        let mut visual_per_layer = Vec::new();

        if !cfg.variant.uses_visual() {
            for l in 1..=cfg.layers {
                zt = self.text_encoder_layer(g, l, zt, None)?;
                diagnostics.push(LayerDiagnostics {
                    layer: l,
                    text_injected: false,
                    bvla: false,
                    v2t_entropy: None,
                    t2v_entropy: None,
                });
            }
            return Ok(EncodeResult {
                text_final: zt,
                visual_per_layer,
                diagnostics,
                warnings,
            });
        }

        let raw = visual.ok_or_else(|| {
            Error::Data(format!("variant `{}` needs video features", cfg.variant))
        })?;
        if raw.shape().len() != 2 || raw.cols() != cfg.d_raw {
            return Err(Error::Shape {
                op: "encode",
                lhs: raw.shape().to_vec(),
                rhs: vec![cfg.d_raw],
            });
        }
        let raw = if raw.rows() > cfg.max_visual_len {
            let msg = format!(
                "video of {} feature rows truncated to {}",
                raw.rows(),
                cfg.max_visual_len
            );
            log::warn!("{msg}");
            warnings.push(msg);
            raw.truncate_rows(cfg.max_visual_len)
        } else {
            raw.clone()
        };
        let n_v = raw.rows();
        let raw = g.constant(&raw);
        let projected = self.project_visual(g, raw)?;

        if cfg.variant == Variant::DirectZv {
            for l in 1..=cfg.layers {
                let ids = &self.layout.text[l - 1];
                let base = self.encoder_block(g, zt, &ids.block)?;
                let att = self.vla(g, l, base, projected)?;
                zt = self.inject(g, base, att.output, &ids.inject)?;
                visual_per_layer.push(projected);
                diagnostics.push(LayerDiagnostics {
                    layer: l,
                    text_injected: true,
                    bvla: false,
                    v2t_entropy: Some(mean_row_entropy(g, &att.weights)),
                    t2v_entropy: None,
                });
            }
        } else {
            let pos_ids: Vec<usize> = (0..n_v).collect();
            let pos = g.gather_rows(self.var(self.layout.visual_positions), &pos_ids)?;
            let mut zv = g.add(projected, pos)?;
            let bvla_layers = cfg.active_bvla();
            for l in 1..=cfg.layers {
                let t_ids = &self.layout.text[l - 1];
                let v_ids = &self.layout.visual[l - 1];
                let t_base = self.encoder_block(g, zt, &t_ids.block)?;
                let v_base = self.encoder_block(g, zv, &v_ids.block)?;
                let bvla = bvla_layers.contains(&l);
                let (to_text, t2v_entropy) = if bvla {
                    let (to_visual, to_text) = self.bvla(g, l, t_base, v_base)?;
                    zv = self.inject(g, v_base, to_visual.output, &v_ids.inject)?;
                    (to_text, Some(mean_row_entropy(g, &to_visual.weights)))
                } else {
                    zv = v_base;
                    (self.vla(g, l, t_base, v_base)?, None)
                };
                zt = self.inject(g, t_base, to_text.output, &t_ids.inject)?;
                visual_per_layer.push(zv);
                diagnostics.push(LayerDiagnostics {
                    layer: l,
                    text_injected: true,
                    bvla,
                    v2t_entropy: Some(mean_row_entropy(g, &to_text.weights)),
                    t2v_entropy,
                });
            }
        }
        Ok(EncodeResult {
            text_final: zt,
            visual_per_layer,
            diagnostics,
            warnings,
        })
    }

    /// Decoder over `inputs` (starting with BOS) attending to `text_final`.
    pub fn decode_teacher_forced(&self, g: &mut Graph, text_final: Var, inputs: &[TokenId]) -> Result<Decoded> {
        if inputs.is_empty() {
            return Err(Error::Contract("decoder input is empty".into()));
        }
        if inputs[0] != BOS {
            return Err(Error::Contract("decoder input must start with BOS".into()));
        }
        if inputs.len() > self.cfg.max_summary_len {
            return Err(Error::Contract(format!(
                "decoder input of {} tokens exceeds max_summary_len {}",
                inputs.len(),
                self.cfg.max_summary_len
            )));
        }
        let ids: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
        let mut x = self.embed(g, &ids, self.layout.decoder_positions)?;
        for layer in &self.layout.decoder {
            let att = self.attend(g, x, x, &layer.self_attn, true)?;
            let r = g.add(att.output, x)?;
            let a = self.norm(g, r, &layer.ln_self)?;
            let cross = self.attend(g, a, text_final, &layer.cross_attn, false)?;
            let r = g.add(cross.output, a)?;
            let c = self.norm(g, r, &layer.ln_cross)?;
            let f = self.ffn(g, c, &layer.ffn)?;
            let r = g.add(f, c)?;
            x = self.norm(g, r, &layer.ln_ffn)?;
        }
        let logits = g.matmul(x, self.var(self.layout.head_weight))?;
        let logits = g.add_row(logits, self.var(self.layout.head_bias))?;
        let pooled = g.avg_pool_rows(x)?;
        Ok(Decoded {
            logits,
            hidden: x,
            pooled,
        })
    }

    /// Greedy decoding; ties go to the lowest token id.
    pub fn generate_from(&self, g: &mut Graph, text_final: Var) -> Result<Vec<TokenId>> {
        let mut inputs = vec![BOS];
        let mut out = Vec::new();
        while out.len() < self.cfg.max_summary_len {
            let dec = self.decode_teacher_forced(g, text_final, &inputs)?;
            let vocab = self.cfg.vocab_size;
            let logits = g.value(dec.logits);
            let last = &logits[logits.len() - vocab..];
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            let tok = best as TokenId;
            if tok == EOS {
                break;
            }
            out.push(tok);
            if inputs.len() < self.cfg.max_summary_len {
                inputs.push(tok);
            } else {
                break;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
