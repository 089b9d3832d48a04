//! Reproducible runs: configuration, run directories and the commands behind
//! the `swvr` binary.
//!
//! A [`RunConfig`] serializes to canonical JSON (sorted keys, no whitespace);
//! its SHA-256 identifies the run. Every run directory holds the resolved
//! config, so rerunning from it reproduces the outputs byte for byte.

mod ablate;
mod gradcheck;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use ablate::{ablation_plan, cmd_ablate, train_and_evaluate, AblationRow, Cell, Study, LAMBDA_GRID};
pub use gradcheck::{cmd_gradcheck, gradcheck_config, GradcheckOptions, GradcheckOutcome, VariantCheck};

use crate::data::{generate_synthetic, load_jsonl, save_jsonl, split, Dataset, SyntheticSpec, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{score_corpus, score_sample, MetricReport, SampleScores};
use crate::model::{load_checkpoint, save_checkpoint, FusionModel, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig, TrainLog};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.swvr";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

/// Serializes through `serde_json::Value`, whose maps keep keys sorted.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_value(value)?.to_string())
}

/// Hex SHA-256 of [`canonical_json`].
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(canonical_json(value)?.as_bytes())))
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Jsonl { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Train, dev and test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Seeds per cell, counted up from `train.seed`.
    pub seeds: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { seeds: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub split: SplitConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataSource::Synthetic(SyntheticSpec::default()),
            split: SplitConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Sets the dotted `path` inside `root` to `raw`, parsed as JSON when it is
/// valid JSON and taken as a string otherwise.
fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let mut keys = path.split('.').peekable();
    while let Some(key) = keys.next() {
        if key.is_empty() {
            return Err(Error::Config(format!("empty key in `{path}`")));
        }
        let map = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{path}`: `{key}` is not inside an object")))?;
        if keys.peek().is_none() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map.entry(key).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

impl RunConfig {
    /// Reads `path` (defaults when absent) and applies `KEY=VALUE` overrides
    /// in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        RunConfig::load_over(RunConfig::default(), path, overrides)
    }

    /// As [`RunConfig::load`], with `base` standing in when there is no file.
    pub fn load_over(base: RunConfig, path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(base)?,
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
            set_path(&mut value, k.trim(), v.trim())?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        if self.ablation.seeds == 0 {
            return Err(Error::Config("ablation.seeds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn canonical(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    /// Loads or generates the dataset, aligns `model.vocab_size` and
    /// `model.d_raw` with it, and splits it.
    pub fn prepare(&self) -> Result<Prepared> {
        let dataset = match &self.data {
            DataSource::Synthetic(spec) => generate_synthetic(spec)?,
            DataSource::Jsonl { path } => load_jsonl(path, None, None)?,
        };
        let mut config = self.clone();
        if config.model.vocab_size != dataset.vocab.len() || config.model.d_raw != dataset.d_raw {
            log::info!(
                "resolving vocab_size {} -> {} and d_raw {} -> {} from the data",
                config.model.vocab_size,
                dataset.vocab.len(),
                config.model.d_raw,
                dataset.d_raw
            );
            config.model.vocab_size = dataset.vocab.len();
            config.model.d_raw = dataset.d_raw.max(1);
        }
        config.validate()?;
        let (train, dev, test) = split(&dataset, self.split.ratios, self.split.seed)?;
        Ok(Prepared {
            config,
            train,
            dev,
            test,
        })
    }
}

/// A resolved config and its data splits.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: RunConfig,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

impl Prepared {
    pub fn split(&self, which: SplitName) -> &Dataset {
        match which {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "dev" => Ok(SplitName::Dev),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct TrainOutcome {
    pub config: RunConfig,
    pub model: FusionModel,
    pub log: TrainLog,
    pub checkpoint_sha256: String,
}

/// Trains on the train split and writes the run directory: resolved config,
/// checkpoint, training log and vocabulary.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let prepared = cfg.prepare()?;
    let config = prepared.config;
    let mut model = FusionModel::new(config.model.clone(), config.train.seed)?;
    log::info!(
        "training {} ({} parameters) on {} samples",
        config.model.variant,
        model.params().count(),
        prepared.train.len()
    );
    let log = train(&prepared.train, &mut model, &config.train)?;

    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), config.canonical()? + "\n")?;
    let mut buf = Vec::new();
    log.write_jsonl(&mut buf).map_err(|e| Error::io(out.join(TRAIN_LOG_FILE), e))?;
    write_file(&out.join(TRAIN_LOG_FILE), buf)?;
    write_file(&out.join(VOCAB_FILE), serde_json::to_string(&prepared.train.vocab)? + "\n")?;
    let ckpt = out.join(CHECKPOINT_FILE);
    save_checkpoint(&model, &ckpt)?;
    let checkpoint_sha256 = sha256_file(&ckpt)?;
    if let Some(last) = log.last() {
        log::info!("final step {}: total {:.5}, abs {:.5}", last.step, last.total, last.abs);
    }
    Ok(TrainOutcome {
        config,
        model,
        log,
        checkpoint_sha256,
    })
}

/// A trained run directory read back from disk.
pub struct LoadedRun {
    pub config: RunConfig,
    pub model: FusionModel,
    pub vocab: Vocabulary,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let config: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", cfg_path.display())))?;
    let model = load_checkpoint(&dir.join(CHECKPOINT_FILE), Some(&config.model))?;
    let vocab_path = dir.join(VOCAB_FILE);
    let text = std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
    let vocab: Vocabulary = serde_json::from_str(&text)?;
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Schema {
            line: 0,
            message: format!(
                "vocabulary has {} entries but the checkpoint expects {}",
                vocab.len(),
                model.config().vocab_size
            ),
        });
    }
    Ok(LoadedRun { config, model, vocab })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub candidate: String,
    pub reference: String,
    pub scores: SampleScores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub rows: Vec<EvalRow>,
}

/// Greedy-generates a summary for every sample and scores it against the
/// reference. With `reference_as_candidate` the references score themselves.
pub fn evaluate(model: &FusionModel, dataset: &Dataset, reference_as_candidate: bool) -> Result<Evaluation> {
    let mut cands: Vec<Vec<TokenId>> = Vec::with_capacity(dataset.len());
    let mut refs = Vec::with_capacity(dataset.len());
    let mut transcripts = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let reference = s.summary_content().to_vec();
        let cand = if reference_as_candidate {
            reference.clone()
        } else {
            let video = if model.config().variant.uses_visual() { s.video.as_ref() } else { None };
            model.generate(&s.transcript, video)?
        };
        cands.push(cand);
        refs.push(reference);
        transcripts.push(s.transcript.clone());
    }
    let report = score_corpus(&cands, &refs, Some(&transcripts));
    let rows = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| EvalRow {
            id: s.id.clone(),
            candidate: dataset.vocab.detokenize(&cands[i]),
            reference: dataset.vocab.detokenize(&refs[i]),
            scores: score_sample(&cands[i], &refs[i], Some(&transcripts[i])),
        })
        .collect();
    Ok(Evaluation { report, rows })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e))
}

/// Writes `metrics.json` and `samples.csv` into `out`.
pub fn write_evaluation(ev: &Evaluation, out: &Path) -> Result<()> {
    create_dir(out)?;
    write_file(&out.join("metrics.json"), serde_json::to_string_pretty(&ev.report)? + "\n")?;
    let path = out.join("samples.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["id", "candidate", "reference", "rouge1_f", "rouge2_f", "rouge_l_f", "novel_token_recall"])
        .map_err(csv_err(&path))?;
    for r in &ev.rows {
        let novel = r.scores.novel_token_recall.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            r.id.as_str(),
            &r.candidate,
            &r.reference,
            &r.scores.rouge1_f.to_string(),
            &r.scores.rouge2_f.to_string(),
            &r.scores.rouge_l_f.to_string(),
            &novel,
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// A JSONL file to evaluate instead of the run's own split.
    pub data: Option<PathBuf>,
    pub split: SplitName,
    pub reference_as_candidate: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            data: None,
            split: SplitName::Test,
            reference_as_candidate: false,
        }
    }
}

/// Evaluates the run in `run_dir` and writes the results to `out`.
pub fn cmd_eval(run_dir: &Path, opts: &EvalOptions, out: &Path) -> Result<Evaluation> {
    let run = load_run(run_dir)?;
    let dataset = match &opts.data {
        Some(path) => load_jsonl(path, Some(&run.vocab), Some(run.model.config().d_raw))?,
        None => {
            let prepared = run.config.prepare()?;
            if prepared.train.vocab != run.vocab {
                return Err(Error::Schema {
                    line: 0,
                    message: "regenerated data does not match the run's vocabulary".into(),
                });
            }
            prepared.split(opts.split).clone()
        }
    };
    let ev = evaluate(&run.model, &dataset, opts.reference_as_candidate)?;
    write_evaluation(&ev, out)?;
    Ok(ev)
}

/// Input for [`cmd_generate`].
#[derive(Clone, Debug)]
pub enum GenerateInput {
    Jsonl(PathBuf),
    Text { transcript: String, video: Option<Tensor> },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Generated {
    pub id: String,
    pub summary: String,
}

pub fn cmd_generate(run_dir: &Path, input: &GenerateInput) -> Result<Vec<Generated>> {
    let run = load_run(run_dir)?;
    let visual = run.model.config().variant.uses_visual();
    match input {
        GenerateInput::Jsonl(path) => {
            let ds = load_jsonl(path, Some(&run.vocab), Some(run.model.config().d_raw))?;
            ds.samples
                .iter()
                .map(|s| {
                    let video = if visual { s.video.as_ref() } else { None };
                    let out = run.model.generate(&s.transcript, video)?;
                    Ok(Generated {
                        id: s.id.clone(),
                        summary: run.vocab.detokenize(&out),
                    })
                })
                .collect()
        }
        GenerateInput::Text { transcript, video } => {
            let ids = run.vocab.tokenize(transcript);
            let video = if visual { video.as_ref() } else { None };
            let out = run.model.generate(&ids, video)?;
            Ok(vec![Generated {
                id: "input".into(),
                summary: run.vocab.detokenize(&out),
            }])
        }
    }
}

/// Writes the synthetic dataset's splits as JSONL plus its vocabulary.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Prepared> {
    if !matches!(cfg.data, DataSource::Synthetic(_)) {
        return Err(Error::Config("synth needs a synthetic data source".into()));
    }
    let prepared = cfg.prepare()?;
    create_dir(out)?;
    for (name, ds) in [("train", &prepared.train), ("dev", &prepared.dev), ("test", &prepared.test)] {
        save_jsonl(ds, &out.join(format!("{name}.jsonl")))?;
    }
    write_file(&out.join(VOCAB_FILE), serde_json::to_string(&prepared.train.vocab)? + "\n")?;
    write_file(&out.join(CONFIG_FILE), prepared.config.canonical()? + "\n")?;
    Ok(prepared)
}
