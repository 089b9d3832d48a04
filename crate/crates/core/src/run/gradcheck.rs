use std::fmt::Write as _;

use super::{DataSource, RunConfig};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::{FusionModel, Forward, ModelConfig, Variant};
use crate::tensor::{check_gradients, GradCheckReport, Graph, Tensor};
use crate::train::{total_loss, total_loss_with_teacher};

/// A model small enough to finite-difference every parameter in seconds.
pub fn gradcheck_config() -> RunConfig {
    let data = SyntheticSpec {
        vocab_size: 32,
        n_samples: 4,
        transcript_len: (3, 5),
        summary_len: (2, 3),
        n_visual_tokens: 3,
        d_raw: 8,
        visual_only_token_count: 1,
        visual_pool_size: 8,
        noise_sigma: 0.1,
        seed: 7,
    };
    let mut cfg = RunConfig {
        data: DataSource::Synthetic(data),
        ..RunConfig::default()
    };
    cfg.model = ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        vocab_size: 32,
        d_raw: 8,
        max_transcript_len: 8,
        max_visual_len: 4,
        max_summary_len: 4,
        // Bi-directional attention at the last layer alone would leave its
        // text-to-visual half without influence on the loss when there is no
        // distillation, so both layers use it.
        bvla_layers: [1, 2].into(),
        sdm_layers: [1, 2].into(),
        variant: Variant::SwrFromSummary,
    };
    cfg.train.lambda = 0.5;
    cfg
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub variants: Vec<Variant>,
    pub step: f64,
    pub tolerance: f64,
    /// Test fixture: adds a term with zero value but unit gradient on this
    /// parameter, so the check must fail there.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            variants: Variant::ALL.to_vec(),
            step: 1e-4,
            tolerance: 1e-3,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VariantCheck {
    pub variant: Variant,
    pub names: Vec<String>,
    pub report: GradCheckReport,
}

impl VariantCheck {
    /// Worst relative error per parameter group (the name without its last
    /// component), in parameter order.
    pub fn groups(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for p in &self.report.per_param {
            let name = &self.names[p.param];
            let group = name.rsplit_once('.').map_or(name.as_str(), |(g, _)| g);
            match out.last_mut() {
                Some((g, e)) if g == group => *e = e.max(p.error),
                _ => out.push((group.to_string(), p.error)),
            }
        }
        out
    }

    pub fn worst(&self) -> (&str, f64) {
        self.report
            .worst()
            .map_or(("", 0.0), |w| (self.names[w.param].as_str(), w.error))
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    pub tolerance: f64,
    pub checks: Vec<VariantCheck>,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.worst().1 < self.tolerance)
    }

    /// The variant and parameter with the largest error.
    pub fn worst(&self) -> Option<(Variant, &str, f64)> {
        self.checks
            .iter()
            .map(|c| {
                let (n, e) = c.worst();
                (c.variant, n, e)
            })
            .max_by(|a, b| a.2.total_cmp(&b.2))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let (name, err) = c.worst();
            let verdict = if err < self.tolerance { "ok" } else { "FAIL" };
            writeln!(s, "{}: max relative error {err:.3e} at {name} [{verdict}]", c.variant).unwrap();
            for (g, e) in c.groups() {
                writeln!(s, "  {g:<28} {e:.3e}").unwrap();
            }
        }
        s
    }
}

fn check_variant(base: &RunConfig, variant: Variant, opts: &GradcheckOptions) -> Result<VariantCheck> {
    let mut run = base.clone();
    run.model = base.model.with_variant(variant);
    let sample = {
        let ds = run.prepare()?;
        run = ds.config.clone();
        ds.train
            .samples
            .first()
            .or(ds.test.samples.first())
            .cloned()
            .ok_or_else(|| Error::Data("no sample for the gradient check".into()))?
    };
    let model = FusionModel::new(run.model.clone(), run.train.seed)?;
    let tc = run.train.clone();

    // With a detached teacher, the analytic gradient treats the pooled decoder
    // output as a constant; pin it so the finite differences do too.
    let teacher: Option<Tensor> = if tc.sdm_detach_teacher && !model.config().active_sdm().is_empty() {
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let (terms, _) = total_loss(&mut g, &model.forward(&p), &sample, &tc)?;
        Some(g.tensor(terms.pooled))
    } else {
        None
    };
    let corrupt = match &opts.corrupt {
        Some(name) => Some(
            model
                .params()
                .find(name)
                .ok_or_else(|| Error::Config(format!("no parameter named `{name}`")))?,
        ),
        None => None,
    };

    let report = check_gradients(model.params().tensors(), opts.step, |g, vars| {
        let fwd = Forward::new(model.config(), model.layout(), vars);
        let (terms, _) = total_loss_with_teacher(g, &fwd, &sample, &tc, teacher.as_ref())?;
        match corrupt {
            Some(id) => {
                let x = vars[id.index()];
                let frozen = g.detach(x);
                let zero = g.sub(x, frozen)?;
                let zero = g.sum(zero);
                g.add(terms.total, zero)
            }
            None => Ok(terms.total),
        }
    })?;
    Ok(VariantCheck {
        variant,
        names: model.params().names().to_vec(),
        report,
    })
}

/// Finite-difference check of the full objective, one sample per variant.
pub fn cmd_gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<GradcheckOutcome> {
    let d = cfg.model.d_model;
    if d > 16 || cfg.model.layers > 2 {
        return Err(Error::Config(format!(
            "gradient checks need a tiny model (d_model <= 16, layers <= 2), got d_model {d}, layers {}",
            cfg.model.layers
        )));
    }
    let checks = opts
        .variants
        .iter()
        .map(|&v| check_variant(cfg, v, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckOutcome {
        tolerance: opts.tolerance,
        checks,
    })
}
