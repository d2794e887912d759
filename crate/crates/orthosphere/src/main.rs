use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use toml::{Table, Value};

use orthosphere::commands;
use orthosphere::config::{self, RunConfig, Sources};
use orthosphere::{Error, Result};

/// Orthogonal-sphere regularized semi-supervised training and analysis.
///
/// Exit codes: 0 success, 2 configuration error, 3 runtime failure.
#[derive(Parser)]
#[command(name = "orthosphere", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from a shipped preset (desk-synth, desk-cifar4, paper-cifar10).
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for analysis.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override any key, e.g. `--set train.epochs=5`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write train_log.csv, model.ckpt and resolved_config.toml.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write correlation.csv and calibration.csv.
    Analyze {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Calibrate a `label,p0,...` prediction file instead.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        layer: Option<String>,
    },
    /// Write prune_sweep.csv.
    Prune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated percentages.
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        #[arg(long)]
        layer: Option<String>,
    },
    /// Write gradcam.pgm and gradcam_overlay.ppm.
    Gradcam {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Test-set index.
        #[arg(long)]
        image: Option<usize>,
        /// CIFAR-format file; its first record is used.
        #[arg(long, conflicts_with = "image")]
        image_file: Option<PathBuf>,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        layer: Option<String>,
        /// Prune the final layer at this rate first.
        #[arg(long)]
        prune_rate: Option<f64>,
    },
    /// Export the configured synthetic data as CIFAR-format batches.
    Synth,
    /// Print the resolved configuration.
    Config,
}

fn path_value(p: &std::path::Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn cli_table(cli: &Cli) -> Result<Table> {
    let mut t = Table::new();
    for item in &cli.set {
        let (key, raw) =
            item.split_once('=').ok_or_else(|| Error::config("--set", format!("{item:?} is not KEY=VALUE")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        config::set_path(&mut t, &path, config::parse_value(raw.trim()))?;
    }
    if let Some(seed) = cli.seed {
        t.insert("seed".into(), Value::Integer(seed as i64));
    }
    if let Some(out) = &cli.out {
        t.insert("out_dir".into(), path_value(out));
    }
    if let Some(n) = cli.threads {
        t.insert("threads".into(), Value::Integer(n as i64));
    }
    let mut a = Table::new();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            a.insert(k.into(), v);
        }
    };
    match &cli.command {
        Command::Analyze { checkpoint, predictions, layer } => {
            put("checkpoint", checkpoint.as_deref().map(path_value));
            put("predictions", predictions.as_deref().map(path_value));
            put("layer", layer.clone().map(Value::String));
        }
        Command::Prune { checkpoint, rates, layer } => {
            put("checkpoint", checkpoint.as_deref().map(path_value));
            put("prune_rates", rates.as_ref().map(|r| Value::Array(r.iter().map(|&x| Value::Float(x)).collect())));
            put("prune_layer", layer.clone().map(Value::String));
        }
        Command::Gradcam { checkpoint, image, image_file, class, layer, prune_rate } => {
            put("checkpoint", checkpoint.as_deref().map(path_value));
            put("gradcam_image", image.map(|i| Value::Integer(i as i64)));
            put("gradcam_image_file", image_file.as_deref().map(path_value));
            put("gradcam_class", class.map(|c| Value::Integer(c as i64)));
            put("gradcam_layer", layer.clone().map(Value::String));
            put("gradcam_prune_rate", prune_rate.map(Value::Float));
        }
        Command::Train { .. } | Command::Synth | Command::Config => {}
    }
    if !a.is_empty() {
        t.insert("analysis".into(), Value::Table(a));
    }
    Ok(t)
}

fn run(cli: Cli) -> Result<()> {
    let sources = Sources {
        file: cli.config.clone(),
        preset: cli.preset.clone(),
        env: config::env_table(std::env::vars())?,
        cli: cli_table(&cli)?,
    };
    let cfg: RunConfig = config::resolve(&sources)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Format(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Train { resume } => {
            let report = commands::cmd_train(&cfg, resume.as_deref())?;
            if let Some(acc) = report.log.last().and_then(|r| r.eval_acc) {
                println!("final test accuracy {acc:.4}");
            }
            println!("wrote {}", report.checkpoint.display());
        }
        Command::Analyze { .. } => {
            let r = commands::cmd_analyze(&cfg)?;
            if let Some(c) = &r.correlation {
                println!("mean |r| at {}: {:.4} over {} pairs", c.layer, c.mean_abs, c.pairs);
            }
            println!(
                "ECE {:.4}  OE {:.4}  BS {:.4}  (n = {})",
                r.calibration.ece, r.calibration.oe, r.calibration.brier, r.calibration.samples
            );
        }
        Command::Prune { .. } => {
            for row in commands::cmd_prune(&cfg)? {
                println!("{:>6.2}%  n={:<4} accuracy {:.4}", row.rate_pct, row.n, row.accuracy);
            }
        }
        Command::Gradcam { .. } => {
            let r = commands::cmd_gradcam(&cfg)?;
            println!("class {} at {}, written to {}", r.heatmap.class, r.heatmap.layer, cfg.out_dir.display());
        }
        Command::Synth => {
            println!("wrote {}", commands::cmd_synth(&cfg)?.display());
        }
        Command::Config => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
