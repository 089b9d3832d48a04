use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use swvr::data::read_sidecar;
use swvr::run::{
    ablation_plan, cmd_ablate, cmd_eval, cmd_generate, cmd_gradcheck, cmd_synth, cmd_train, gradcheck_config,
    EvalOptions, GenerateInput, GradcheckOptions, RunConfig, SplitName, Study,
};
use swvr::{Error, Result};

/// Train, evaluate and ablate desk-scale multimodal summarizers.
#[derive(Parser)]
#[command(name = "swvr", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `train.lambda=0.2`.
    #[arg(long = "set", value_name = "K=V", global = true)]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for ablation cells.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train,
    /// Score a trained run on a split or a JSONL file.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// JSONL file to evaluate instead of the run's own split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: SplitName,
        /// Score the references against themselves.
        #[arg(long)]
        reference_as_candidate: bool,
    },
    /// Greedy-decode summaries with a trained run.
    Generate {
        #[arg(long)]
        run: PathBuf,
        /// JSONL file of inputs.
        #[arg(long, conflicts_with = "transcript")]
        data: Option<PathBuf>,
        /// A single transcript.
        #[arg(long)]
        transcript: Option<String>,
        /// Raw feature file for `--transcript`.
        #[arg(long, requires = "transcript")]
        video: Option<PathBuf>,
    },
    /// Run one ablation study over seeds and write results.csv.
    Ablate {
        #[arg(long)]
        study: Study,
        /// Print the cells without training.
        #[arg(long)]
        plan: bool,
    },
    /// Finite-difference check of the full objective for every variant.
    Gradcheck {
        /// Negative control: corrupt the gradient of this parameter.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write the synthetic dataset's splits as JSONL.
    Synth,
}

fn overrides(c: &Common) -> Vec<String> {
    let mut sets = c.set.clone();
    if let Some(seed) = c.seed {
        sets.push(format!("train.seed={seed}"));
    }
    sets
}

fn out_dir(c: &Common, fallback: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let load = || RunConfig::load(c.config.as_deref(), &overrides(c));
    match cli.command {
        Command::Train => {
            let out = out_dir(c, "runs/train");
            let outcome = cmd_train(&load()?, &out)?;
            println!("checkpoint {} sha256 {}", out.join(swvr::run::CHECKPOINT_FILE).display(), outcome.checkpoint_sha256);
        }
        Command::Eval {
            run,
            data,
            split,
            reference_as_candidate,
        } => {
            let opts = EvalOptions {
                data,
                split,
                reference_as_candidate,
            };
            let out = c.out.clone().unwrap_or_else(|| run.clone());
            let ev = cmd_eval(&run, &opts, &out)?;
            print_json(&ev.report)?;
        }
        Command::Generate {
            run,
            data,
            transcript,
            video,
        } => {
            let input = match (data, transcript) {
                (Some(path), _) => GenerateInput::Jsonl(path),
                (None, Some(transcript)) => GenerateInput::Text {
                    transcript,
                    video: video.as_deref().map(read_sidecar).transpose()?,
                },
                (None, None) => return Err(Error::Config("generate needs --data or --transcript".into())),
            };
            let generated = cmd_generate(&run, &input)?;
            let mut lines = String::new();
            for g in &generated {
                lines.push_str(&serde_json::to_string(g)?);
                lines.push('\n');
            }
            match &c.out {
                Some(dir) => write_into(dir, "generated.jsonl", &lines)?,
                None => print!("{lines}"),
            }
        }
        Command::Ablate { study, plan } => {
            let cfg = load()?;
            if plan {
                println!("cell,variant,bvla_layers,sdm_layers,lambda");
                for cell in ablation_plan(&cfg, study) {
                    let join = |s: &std::collections::BTreeSet<usize>| {
                        s.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" ")
                    };
                    println!(
                        "{},{},{},{},{}",
                        cell.name,
                        cell.model.variant,
                        join(&cell.model.bvla_layers),
                        join(&cell.model.sdm_layers),
                        cell.lambda
                    );
                }
                return Ok(());
            }
            let out = out_dir(c, &format!("runs/{study}"));
            let rows = cmd_ablate(&cfg, study, c.workers, Some(&out))?;
            println!("{} rows written to {}", rows.len(), out.join("results.csv").display());
        }
        Command::Gradcheck { corrupt } => {
            let cfg = RunConfig::load_over(gradcheck_config(), c.config.as_deref(), &overrides(c))?;
            let opts = GradcheckOptions {
                corrupt,
                ..GradcheckOptions::default()
            };
            let outcome = cmd_gradcheck(&cfg, &opts)?;
            print!("{}", outcome.render());
            if !outcome.passed() {
                let (variant, name, err) = outcome.worst().expect("at least one variant");
                return Err(Error::Verification(format!(
                    "{variant}: gradient of `{name}` is off by {err:.3e} (tolerance {:.0e})",
                    outcome.tolerance
                )));
            }
        }
        Command::Synth => {
            let out = out_dir(c, "data/synthetic");
            let prepared = cmd_synth(&load()?, &out)?;
            println!(
                "{} train, {} dev, {} test samples written to {}",
                prepared.train.len(),
                prepared.dev.len(),
                prepared.test.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn write_into(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let io = |e| Error::Io {
        path: dir.join(name),
        source: e,
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    std::fs::File::create(dir.join(name))
        .and_then(|mut f| f.write_all(contents.as_bytes()))
        .map_err(io)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SWVR_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
