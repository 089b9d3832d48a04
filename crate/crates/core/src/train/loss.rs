use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::data::{Sample, TokenId, PAD};
use crate::error::{Error, Result};
use crate::model::Forward;
use crate::tensor::{Graph, Tensor, Var};

/// Summed negative log-likelihood of `targets` (EOS included, BOS excluded).
/// PAD targets are skipped.
pub fn abs_loss(g: &mut Graph, logits: Var, targets: &[TokenId]) -> Result<Var> {
    let rows = g.shape(logits).first().copied().unwrap_or(0);
    if rows != targets.len() {
        return Err(Error::Contract(format!(
            "{rows} logit rows for {} targets",
            targets.len()
        )));
    }
    let t: Vec<Option<usize>> = targets
        .iter()
        .map(|&t| (t != PAD).then_some(t as usize))
        .collect();
    g.cross_entropy_sum(logits, &t)
}

/// Self-distillation terms `λ·‖teacher − P·avg(C_v[l])‖₂`, one per layer in
/// `layers` (1-based), in ascending layer order.
///
/// The caller decides whether `teacher` carries gradient.
pub fn sd_loss(
    g: &mut Graph,
    fwd: &Forward<'_>,
    teacher: Var,
    visual_per_layer: &[Var],
    layers: &BTreeSet<usize>,
    lambda: f64,
) -> Result<Vec<(usize, Var)>> {
    if !layers.is_empty() && !fwd.config().variant.has_sdm() {
        return Err(Error::Config(format!(
            "self-distillation at layers {layers:?} needs variant swr_from_summary, not `{}`",
            fwd.config().variant
        )));
    }
    let d = fwd.config().d_model;
    let projector = fwd.var(fwd.layout().sdm_projector);
    let mut terms = Vec::with_capacity(layers.len());
    for &l in layers {
        let zv = *visual_per_layer.get(l - 1).ok_or_else(|| {
            Error::Contract(format!("no visual representation for layer {l}"))
        })?;
        let pooled = g.avg_pool_rows(zv)?;
        let row = g.reshape(pooled, vec![1, d])?;
        let projected = g.matmul(row, projector)?;
        let projected = g.reshape(projected, vec![d])?;
        let diff = g.sub(teacher, projected)?;
        let norm = g.norm2(diff);
        terms.push((l, g.scale(norm, lambda)));
    }
    Ok(terms)
}

/// Decomposition of one step's objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub abs_loss: f64,
    pub sd_loss_per_layer: BTreeMap<usize, f64>,
    pub total: f64,
    pub token_count: usize,
    pub grad_norm: f64,
}

impl LossReport {
    pub fn per_token_abs(&self) -> f64 {
        self.abs_loss / self.token_count.max(1) as f64
    }
}

/// Tape handles of the objective's pieces.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub abs: Var,
    pub sd: Vec<(usize, Var)>,
    /// Pooled decoder output (the distillation teacher before any detach).
    pub pooled: Var,
}

/// Encodes, decodes with teacher forcing, and adds up the abstractive and
/// self-distillation losses. `total` sits on the tape ready for backward.
pub fn total_loss(g: &mut Graph, fwd: &Forward<'_>, sample: &Sample, tc: &TrainConfig) -> Result<(LossTerms, LossReport)> {
    total_loss_with_teacher(g, fwd, sample, tc, None)
}

/// As [`total_loss`], but with `fixed_teacher` standing in for the pooled
/// decoder output inside the distillation terms. Gradient checks of the
/// detached objective use this to hold the teacher constant.
pub fn total_loss_with_teacher(
    g: &mut Graph,
    fwd: &Forward<'_>,
    sample: &Sample,
    tc: &TrainConfig,
    fixed_teacher: Option<&Tensor>,
) -> Result<(LossTerms, LossReport)> {
    let cfg = fwd.config();
    let enc = fwd.encode(g, &sample.transcript, sample.video.as_ref())?;
    let (inputs, targets) = sample.decoder_io(cfg.max_summary_len);
    let dec = fwd.decode_teacher_forced(g, enc.text_final, &inputs)?;
    let abs = abs_loss(g, dec.logits, &targets)?;

    let layers = cfg.active_sdm();
    let mut report = LossReport {
        abs_loss: g.item(abs),
        token_count: targets.iter().filter(|&&t| t != PAD).count(),
        ..LossReport::default()
    };
    let mut total = abs;
    let mut sd = Vec::new();
    if !layers.is_empty() {
        if tc.lambda == 0.0 {
            // Switched off: nothing goes on the tape, so the run is identical
            // to one without distillation layers.
            report.sd_loss_per_layer = layers.iter().map(|&l| (l, 0.0)).collect();
        } else {
            let teacher = match fixed_teacher {
                Some(t) => g.constant(t),
                None if tc.sdm_detach_teacher => g.detach(dec.pooled),
                None => dec.pooled,
            };
            sd = sd_loss(g, fwd, teacher, &enc.visual_per_layer, &layers, tc.lambda)?;
            for &(l, term) in &sd {
                report.sd_loss_per_layer.insert(l, g.item(term));
                total = g.add(total, term)?;
            }
        }
    }
    report.total = g.item(total);
    Ok((
        LossTerms {
            total,
            abs,
            sd,
            pooled: dec.pooled,
        },
        report,
    ))
}
