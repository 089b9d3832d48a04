use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{config_hash, create_dir, csv_err, evaluate, write_file, Evaluation, Prepared, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{suffix_layers, top_layers, FusionModel, ModelConfig, Variant};
use crate::train::{train, TrainConfig, TrainLog};

/// Distillation weights of the sensitivity study.
pub const LAMBDA_GRID: [f64; 5] = [0.01, 0.05, 0.1, 0.2, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    /// The four visual variants, from direct injection to the full model.
    Components,
    /// Bi-directional attention over suffixes of the layer stack.
    BvlaPlacement,
    /// Self-distillation over suffixes, with bi-directional attention everywhere.
    SdmPlacement,
    /// The distillation weight, plus a switched-off control.
    LambdaSweep,
}

impl Study {
    pub const ALL: [Study; 4] = [Study::Components, Study::BvlaPlacement, Study::SdmPlacement, Study::LambdaSweep];

    pub fn name(self) -> &'static str {
        match self {
            Study::Components => "components",
            Study::BvlaPlacement => "bvla_placement",
            Study::SdmPlacement => "sdm_placement",
            Study::LambdaSweep => "lambda_sweep",
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Study::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown study `{s}`")))
    }
}

/// One configuration of a study.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub name: String,
    pub model: ModelConfig,
    pub lambda: f64,
}

fn set_name(set: &std::collections::BTreeSet<usize>) -> String {
    match (set.first(), set.last()) {
        (Some(a), Some(b)) => format!("{a}-{b}"),
        _ => "none".into(),
    }
}

/// Placement sets: none, then `{k..L}` for k = 1..=L.
fn placements(layers: usize) -> Vec<std::collections::BTreeSet<usize>> {
    std::iter::once(Default::default())
        .chain((1..=layers).map(|k| suffix_layers(k, layers)))
        .collect()
}

/// The cells of `study` derived from `base`, in a fixed order.
pub fn ablation_plan(base: &RunConfig, study: Study) -> Vec<Cell> {
    let m = &base.model;
    let layers = m.layers;
    let bvla_default = if m.bvla_layers.is_empty() { top_layers(layers, 0.5) } else { m.bvla_layers.clone() };
    let sdm_default = if m.sdm_layers.is_empty() { top_layers(layers, 1.0 / 3.0) } else { m.sdm_layers.clone() };
    let with_sets = |variant: Variant| {
        let mut c = m.clone();
        c.variant = variant;
        c.bvla_layers = if variant.has_bvla() { bvla_default.clone() } else { Default::default() };
        c.sdm_layers = if variant.has_sdm() { sdm_default.clone() } else { Default::default() };
        c
    };
    let lambda = base.train.lambda;
    let cells: Vec<(String, ModelConfig, f64)> = match study {
        Study::Components => Variant::VISUAL
            .into_iter()
            .map(|v| (v.name().to_string(), with_sets(v), lambda))
            .collect(),
        Study::BvlaPlacement => placements(layers)
            .into_iter()
            .map(|set| {
                let mut c = with_sets(Variant::SwrFromTranscript);
                c.bvla_layers = set.clone();
                (set_name(&set), c, lambda)
            })
            .collect(),
        Study::SdmPlacement => placements(layers)
            .into_iter()
            .map(|set| {
                let mut c = with_sets(Variant::SwrFromSummary);
                c.bvla_layers = suffix_layers(1, layers);
                c.sdm_layers = set.clone();
                (set_name(&set), c, lambda)
            })
            .collect(),
        Study::LambdaSweep => std::iter::once(0.0)
            .chain(LAMBDA_GRID)
            .map(|l| (format!("lambda={l}"), with_sets(Variant::SwrFromSummary), l))
            .collect(),
    };
    cells
        .into_iter()
        .enumerate()
        .map(|(index, (name, model, lambda))| Cell {
            index,
            name,
            model,
            lambda,
        })
        .collect()
}

/// Trains one model on the train split and evaluates it on the test split.
pub fn train_and_evaluate(prepared: &Prepared, model: &ModelConfig, tc: &TrainConfig) -> Result<(Evaluation, TrainLog)> {
    let mut m = FusionModel::new(model.clone(), tc.seed)?;
    let log = train(&prepared.train, &mut m, tc)?;
    let ev = evaluate(&m, &prepared.test, false)?;
    Ok((ev, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub study: Study,
    pub cell_index: usize,
    pub cell: String,
    pub seed: u64,
    pub config_hash: String,
    pub report: MetricReport,
    pub final_loss: f64,
}

const HEADER: [&str; 14] = [
    "study",
    "cell",
    "seed",
    "config_hash",
    "rouge1_f",
    "rouge2_f",
    "rouge_l_f",
    "bleu1",
    "bleu2",
    "bleu3",
    "bleu4",
    "novel_token_recall",
    "final_loss",
    "cell_index",
];

fn write_rows(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(HEADER).map_err(csv_err(path))?;
    for r in rows {
        let m = &r.report;
        let novel = m.novel_token_recall.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            r.study.name().to_string(),
            r.cell.clone(),
            r.seed.to_string(),
            r.config_hash.clone(),
            m.rouge1_f.to_string(),
            m.rouge2_f.to_string(),
            m.rouge_l_f.to_string(),
            m.bleu1.to_string(),
            m.bleu2.to_string(),
            m.bleu3.to_string(),
            m.bleu4.to_string(),
            novel,
            r.final_loss.to_string(),
            r.cell_index.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| crate::error::Error::io(path, e))
}

/// Runs every cell of `study` for `base.ablation.seeds` seeds on a pool of
/// `workers` threads. Seed `k` of every cell is `train.seed + k`, so cells are
/// compared on identical initializations and sample orders. Rows come back in
/// plan order, then seed order, whatever the pool width.
///
/// With `out`, writes `results.csv` and the resolved base config there.
pub fn cmd_ablate(base: &RunConfig, study: Study, workers: usize, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let prepared = base.prepare()?;
    let resolved = &prepared.config;
    let plan = ablation_plan(resolved, study);
    let jobs: Vec<(&Cell, u64)> = plan
        .iter()
        .flat_map(|c| (0..resolved.ablation.seeds as u64).map(move |k| (c, resolved.train.seed + k)))
        .collect();
    log::info!("{study}: {} cells x {} seeds", plan.len(), resolved.ablation.seeds);

    let run_job = |&(cell, seed): &(&Cell, u64)| -> Result<AblationRow> {
        let mut cfg = resolved.clone();
        cfg.model = cell.model.clone();
        cfg.train.lambda = cell.lambda;
        cfg.train.seed = seed;
        let hash = config_hash(&cfg)?;
        let (ev, log) = train_and_evaluate(&prepared, &cfg.model, &cfg.train)?;
        log::info!("{study} {} seed {seed}: rouge-l {:.4}", cell.name, ev.report.rouge_l_f);
        Ok(AblationRow {
            study,
            cell_index: cell.index,
            cell: cell.name.clone(),
            seed,
            config_hash: hash,
            report: ev.report,
            final_loss: log.last().map_or(f64::NAN, |r| r.total),
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let rows = pool.install(|| jobs.par_iter().map(run_job).collect::<Result<Vec<_>>>())?;

    if let Some(out) = out {
        create_dir(out)?;
        write_file(&out.join(super::CONFIG_FILE), resolved.canonical()? + "\n")?;
        write_rows(&rows, &out.join("results.csv"))?;
    }
    Ok(rows)
}
