use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use earlyexit::bench::{BenchConfig, Pipeline};
use earlyexit::Error;

#[derive(Parser)]
#[command(name = "earlyexit", version, about = "Early-exit benchmark pipeline on synthetic data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs/desk")]
    out: PathBuf,
    /// Override any config key, e.g. `--set branches.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// seeds.data_seed
    #[arg(long, global = true)]
    data_seed: Option<u64>,
    /// seeds.encoder_seed
    #[arg(long, global = true)]
    encoder_seed: Option<u64>,
    /// seeds.train_seed
    #[arg(long, global = true)]
    train_seed: Option<u64>,
    /// downstream.rho (training-time threshold ratio)
    #[arg(long, global = true)]
    rho: Option<f64>,
    /// data.noise_kind (gaussian or tonal)
    #[arg(long, global = true)]
    noise_kind: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the four dataset splits.
    Synth,
    /// Train the final-layer teacher on ground-truth labels.
    TrainTeacher,
    /// Train one exit branch per layer on teacher pseudo-labels.
    TrainBranches,
    /// Per-layer mean branch entropy on the held-out split.
    ProfileEntropy,
    /// Set the exit threshold from the downstream split's entropy profile.
    Calibrate,
    /// Train the weighted-sum probe with exits active.
    TrainDownstream,
    /// Evaluate every span strategy at every inference-time ratio.
    Eval {
        /// eval.spans, comma separated
        #[arg(long, value_delimiter = ',')]
        spans: Option<Vec<String>>,
        /// eval.rhos, comma separated
        #[arg(long, value_delimiter = ',')]
        rhos: Option<Vec<f64>>,
    },
    /// Exit distribution across SNR levels.
    NoiseSweep {
        /// eval.snrs, comma separated (`clean` or dB values)
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snrs: Option<Vec<String>>,
    },
    /// Span strategies against a statically truncated encoder.
    CompareStatic {
        /// Baseline depth; defaults to eval.static_layer
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run every stage in order.
    Pipeline,
}

fn quote_list<T: ToString>(items: &[T], quote: bool) -> String {
    let cells: Vec<String> = items
        .iter()
        .map(|v| if quote { format!("\"{}\"", v.to_string()) } else { v.to_string() })
        .collect();
    format!("[{}]", cells.join(","))
}

fn overrides(common: &Common, command: &Command) -> Vec<String> {
    let mut out = common.overrides.clone();
    let mut push = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            out.push(format!("{key}={v}"));
        }
    };
    push("seeds.data_seed", common.data_seed.map(|v| v.to_string()));
    push("seeds.encoder_seed", common.encoder_seed.map(|v| v.to_string()));
    push("seeds.train_seed", common.train_seed.map(|v| v.to_string()));
    push("downstream.rho", common.rho.map(|v| format!("{v:?}")));
    push("data.noise_kind", common.noise_kind.as_ref().map(|v| format!("\"{v}\"")));
    match command {
        Command::Eval { spans, rhos } => {
            push("eval.spans", spans.as_deref().map(|s| quote_list(s, true)));
            push("eval.rhos", rhos.as_deref().map(|r| {
                let r: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
                quote_list(&r, false)
            }));
        }
        Command::NoiseSweep { snrs } => push("eval.snrs", snrs.as_deref().map(|s| quote_list(s, true))),
        _ => {}
    }
    out
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = BenchConfig::load(cli.common.config.as_deref(), &overrides(&cli.common, &cli.command))?;
    let mut pipeline = Pipeline::new(cfg, &cli.common.out)?;
    let stage = match &cli.command {
        Command::Synth => "synth",
        Command::TrainTeacher => "train-teacher",
        Command::TrainBranches => "train-branches",
        Command::ProfileEntropy => "profile-entropy",
        Command::Calibrate => "calibrate",
        Command::TrainDownstream => "train-downstream",
        Command::Eval { .. } => "eval",
        Command::NoiseSweep { .. } => "noise-sweep",
        Command::CompareStatic { .. } => "compare-static",
        Command::Pipeline => {
            let s = pipeline.run_all()?;
            println!(
                "pipeline ok out={} entropy_spearman={} tau={} mu={}",
                cli.common.out.display(),
                s.profile.spearman.map_or("n/a".to_string(), |r| format!("{r:.3}")),
                s.calibration.tau,
                s.downstream.stats.mu
            );
            for r in &s.sweep.rows {
                println!("noise-sweep snr={} mean_exit={:.3} accuracy={:.4}", r.snr, r.mean_exit, r.accuracy);
            }
            println!(
                "compare-static mean_avg_accuracy={:.4} static_matched_{}_avg_accuracy={:.4}",
                s.compare.mean_average_accuracy, s.compare.matched_layer, s.compare.matched_static_average_accuracy
            );
            return Ok(());
        }
    };
    let k = match cli.command {
        Command::CompareStatic { k } => k,
        _ => None,
    };
    pipeline.run_stage(stage, k)?;
    println!("{stage} ok out={}", cli.common.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = match &e {
                Error::Dependency { stage, .. } => format!(" stage={stage}"),
                _ => String::new(),
            };
            eprintln!("error kind={}{stage} message={:?}", e.kind(), e.to_string());
            ExitCode::from(2)
        }
    }
}
