use clap::{Parser, Subcommand};
use ofb_core::commands::{self, EXIT_INVALID};
use ofb_core::config::RunConfig;
use ofb_core::tensor::Primitive;
use ofb_core::Result;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "ofb", version, about = "Prunability search for small vision transformers")]
struct Cli {
    /// Run configuration (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training seed, overrides `trainer.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// FLOPs budget fraction, overrides `trainer.tau`.
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain, search and write the pruned architecture.
    Search,
    /// Materialize the searched architecture and fine-tune it.
    Retrain,
    /// Evaluate a checkpoint on the eval split.
    Eval {
        /// Checkpoint stem (without extension).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Two-stage threshold pruning baseline.
    Baseline,
    /// Empirical check of the regularizer properties.
    Theorems {
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7,8")]
        dims: Vec<usize>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Break one backward rule, e.g. `Softmax`.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// CSV tables from a search log.
    Plotdata {
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write the synthetic dataset to disk.
    Gendata,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.trainer.seed = s;
    }
    if let Some(t) = cli.tau {
        cfg.trainer.tau = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<i32> {
    if let Ok(t) = std::env::var("OFB_THREADS") {
        if t.parse::<usize>().map_or(true, |n| n == 0) {
            return Err(ofb_core::Error::Config(format!("OFB_THREADS must be a positive integer, got {t:?}")));
        }
    }
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::Search => commands::cmd_search(&cfg),
        Cmd::Retrain => commands::cmd_retrain(&cfg),
        Cmd::Eval { checkpoint } => commands::cmd_eval(&cfg, checkpoint.as_deref()),
        Cmd::Baseline => commands::cmd_baseline(&cfg),
        Cmd::Theorems { samples, dims } => {
            let (r, status) = commands::cmd_theorems(*samples, dims, cfg.trainer.seed, Some(&cfg.output_dir))?;
            println!(
                "theorems: {} vectors, max identity residual {:.3e}, {} violations",
                r.vectors_checked,
                r.max_identity_residual,
                r.violations.len()
            );
            for v in r.violations.iter().take(10) {
                println!("  {v:?}");
            }
            Ok(status)
        }
        Cmd::Gradcheck { corrupt } => {
            let prim = match corrupt {
                Some(s) => Some(
                    serde_json::from_str::<Primitive>(&format!("\"{s}\""))
                        .map_err(|_| ofb_core::Error::Config(format!("unknown primitive {s:?}")))?,
                ),
                None => None,
            };
            let report = commands::gradcheck_report(prim)?;
            for e in &report.entries {
                println!(
                    "{} {:<40} {:.3e}",
                    if e.passed { "ok  " } else { "FAIL" },
                    e.name,
                    e.max_rel_error
                );
            }
            std::fs::create_dir_all(&cfg.output_dir)?;
            std::fs::write(cfg.output_dir.join("gradcheck.json"), serde_json::to_string_pretty(&report)?)?;
            Ok(if report.passed() { 0 } else { EXIT_INVALID })
        }
        Cmd::Plotdata { log } => {
            let log = log.clone().unwrap_or_else(|| cfg.output_dir.join("search_log.jsonl"));
            commands::cmd_plotdata(&log, &cfg.output_dir.join("plots"))
        }
        Cmd::Gendata => commands::cmd_gendata(&cfg, &cfg.output_dir.join("data")),
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            commands::status_of(&e)
        }
    };
    std::process::exit(code);
}
