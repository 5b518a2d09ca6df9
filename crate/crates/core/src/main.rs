//! Command-line front end: training, evaluation, parameter accounting,
//! routing statistics and the adapter comparison.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use moe_conformer::accounting::{count_params, published_table};
use moe_conformer::config::KvWriter;
use moe_conformer::harness::{
    compare_adapter_vs_moe, evaluate, load_checkpoint, save_checkpoint, train, ExperimentConfig,
    Model, SyntheticTask,
};

#[derive(Parser)]
#[command(
    name = "moe-conformer",
    version,
    about = "Mixture-of-experts Conformer toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the model and training seeds of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, a checkpoint and an evaluation.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint, or a freshly initialized model without one.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Count total and inference parameters of the configured encoder.
    CountParams {
        #[command(flatten)]
        common: Common,
        /// Also print every published model row with the fitted remainder.
        #[arg(long)]
        published_rows: bool,
    },
    /// Per-expert routing records of a checkpoint or fresh model.
    RouteStats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train an oracle-language adapter model and a MoE model of equal
    /// inference size and compare them.
    CompareAdapter {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;
    fs::write(common.out.join("config.txt"), cfg.to_kv_string())
        .with_context(|| format!("writing to {}", common.out.display()))?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn model_for(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> anyhow::Result<Model<f32>> {
    let model = match checkpoint {
        Some(path) => load_checkpoint(path)?.0,
        None => Model::build(&cfg.model_config(), cfg.seed)?,
    };
    let want = cfg.model_config();
    if model.config.num_labels != want.num_labels {
        bail!(
            "model has {} labels, task has {}",
            model.config.num_labels,
            want.num_labels
        );
    }
    if model.config.encoder.frontend.feature_dim != cfg.task.feature_dim {
        bail!(
            "model expects {}-D features, task has {}",
            model.config.encoder.frontend.feature_dim,
            cfg.task.feature_dim
        );
    }
    Ok(model)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = load(&common)?;
            let task = SyntheticTask::new(&cfg.task)?;
            let mut model = Model::<f32>::build(&cfg.model_config(), cfg.seed)?;
            let path = common.out.join("metrics.txt");
            let mut metrics = BufWriter::new(
                File::create(&path).with_context(|| format!("creating {}", path.display()))?,
            );
            let history = train(&mut model, &task, &cfg.train, |m| {
                writeln!(metrics, "{m}").map_err(|e| moe_conformer::Error::io(&path, e))
            })?;
            metrics
                .flush()
                .with_context(|| format!("writing {}", path.display()))?;
            save_checkpoint(
                &model,
                history.len() as u64,
                &common.out.join("checkpoint.bin"),
            )?;
            let report = evaluate(&model, &task, &cfg.eval)?;
            write(&common.out.join("eval.txt"), &report.to_kv_string())?;
            if let Some(last) = history.last() {
                println!("{last}");
            }
            println!(
                "accuracy={:.4} mi_top1_bits={:.4} max_load={:.4}",
                report.accuracy,
                report.routing.mi_top1,
                report.routing.max_load()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            let task = SyntheticTask::new(&cfg.task)?;
            let model = model_for(&cfg, checkpoint.as_deref())?;
            let report = evaluate(&model, &task, &cfg.eval)?;
            let text = report.to_kv_string();
            write(&common.out.join("eval.txt"), &text)?;
            print!("{text}");
        }
        Command::CountParams {
            common,
            published_rows,
        } => {
            let cfg = load(&common)?;
            let report = count_params(&cfg.encoder);
            let mut w = KvWriter::new();
            report.write_kv(&mut w);
            w.put(
                "activation_ratio",
                format!("{:.6}", report.activation_ratio()),
            );
            let kv = w.finish();
            let mut text = format!("{report}\n{kv}");
            if published_rows {
                text.push('\n');
                text.push_str(&published_table());
            }
            write(&common.out.join("params.txt"), &text)?;
            print!("{text}");
        }
        Command::RouteStats { common, checkpoint } => {
            let cfg = load(&common)?;
            if cfg.encoder.moe_module_count() == 0 {
                bail!("the configured encoder has no MoE modules");
            }
            let task = SyntheticTask::new(&cfg.task)?;
            let model = model_for(&cfg, checkpoint.as_deref())?;
            let report = evaluate(&model, &task, &cfg.eval)?;
            let mut text: String = report
                .routing
                .records()
                .iter()
                .map(|r| format!("{r}\n"))
                .collect();
            text.push_str(&report.to_kv_string());
            write(&common.out.join("routing.txt"), &text)?;
            print!("{text}");
        }
        Command::CompareAdapter { common } => {
            let cfg = load(&common)?;
            let mut files = Vec::new();
            for arm in ["adapter", "moe"] {
                let path = common.out.join(format!("metrics_{arm}.txt"));
                let f =
                    File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                files.push((arm, path, BufWriter::new(f)));
            }
            let report = compare_adapter_vs_moe(&cfg, |arm, m| {
                let (_, path, w) = files
                    .iter_mut()
                    .find(|(a, ..)| *a == arm)
                    .expect("known arm");
                writeln!(w, "{m}").map_err(|e| moe_conformer::Error::io(path.as_path(), e))
            })?;
            for (_, path, w) in &mut files {
                w.flush()
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            let text = format!("{report}\n");
            write(&common.out.join("compare.txt"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their source; skip repeats.
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            let msg = msg.replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
