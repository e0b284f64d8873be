use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use seanet_core::metrics::IncorrectConfig;
use seanet_core::signal::{generate_scenario_at, write_manifest, write_wav, ManifestEntry, Scenario};
use seanet_core::{build_network, NetworkConfig, Variant};
use seanet_harness::ablation::{run_ablation, AblationConfig, Suite};
use seanet_harness::checkpoint::Checkpoint;
use seanet_harness::config::TrainConfig;
use seanet_harness::data::example_seed;
use seanet_harness::evaluate::{evaluate_manifest, EvalReport};
use seanet_harness::plots::{emit_log_plot, emit_plots};
use seanet_harness::report::params_summary;
use seanet_harness::train::Trainer;

#[derive(Parser)]
#[command(name = "seanet", version, about = "Audio-visual target speaker extraction: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic mixture generation.
    Mix {
        #[command(subcommand)]
        command: MixCommand,
    },
    /// Train from a TOML config, or resume from a checkpoint.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Full-length evaluation of a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Train and rank the systems of an ablation suite.
    Ablate {
        #[arg(long, value_enum)]
        suite: Suite,
        /// Ablation config (TOML); desk-scale defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Spectrograms and charts from an evaluation report or a training log.
    Plots {
        /// `report.json` from `eval`, or a `train.jsonl` log.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Trainable-parameter breakdown of a network config.
    Params {
        /// Training config whose network section is reported; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
    },
}

#[derive(Subcommand)]
enum MixCommand {
    /// Write mixture, target and noise WAVs plus a `manifest.jsonl`.
    Generate {
        /// One of S, S_N, S_S, S_S_N, N, or `all` to cycle through the grid.
        #[arg(long, default_value = "all")]
        scenario: String,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 2.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16_000)]
        sample_rate: u32,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the JSON report.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Also write mixture, estimate and reference WAVs for plotting.
    #[arg(long)]
    audio_dir: Option<PathBuf>,
    #[arg(long, default_value_t = IncorrectConfig::default().segment_s)]
    segment_s: f64,
    #[arg(long, default_value_t = IncorrectConfig::default().mu_db)]
    mu_db: f64,
}

fn mix_generate(scenario: &str, count: usize, duration: f64, seed: u64, out: &PathBuf, sample_rate: u32) -> Result<()> {
    let scenarios: Vec<Scenario> = if scenario.eq_ignore_ascii_case("all") {
        Scenario::GRID.to_vec()
    } else {
        vec![scenario.parse().with_context(|| format!("unknown scenario {scenario}"))?]
    };
    std::fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let kind = scenarios[i % scenarios.len()];
        let sample = generate_scenario_at(kind, duration, example_seed(seed, "mix", i), sample_rate)?;
        let id = format!("mix-{i:05}-{}", kind.name());
        let name = |part: &str| format!("{id}_{part}.wav");
        write_wav(out.join(name("mix")), &sample.mixture)?;
        write_wav(out.join(name("target")), &sample.target)?;
        write_wav(out.join(name("noise")), &sample.noise)?;
        entries.push(ManifestEntry {
            id: id.clone(),
            mixture_path: name("mix").into(),
            target_path: name("target").into(),
            noise_path: name("noise").into(),
            visual_path: None,
            scenario: kind,
            snr_db: sample.snr_db,
        });
    }
    let manifest = out.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    println!("wrote {count} mixtures and {}", manifest.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<bool> {
    let ck = Checkpoint::load(&args.ckpt)?;
    let net = ck.network()?;
    let incorrect = IncorrectConfig { segment_s: args.segment_s, mu_db: args.mu_db, ..IncorrectConfig::default() };
    let report = evaluate_manifest(&net, &args.manifest, &net.cfg, &incorrect, args.audio_dir.as_deref())?;
    report.save(&args.out)?;
    print!("{}", report.metrics.to_table());
    for f in &report.metrics.failures {
        eprintln!("failed {}: {}", f.id, f.error);
    }
    println!("report written to {}", args.out.display());
    Ok(report.metrics.failures.is_empty())
}

fn plots(report: &PathBuf, out: &PathBuf) -> Result<()> {
    let result = if report.extension().is_some_and(|e| e == "jsonl") {
        emit_log_plot(report, out)?
    } else {
        emit_plots(&EvalReport::load(report)?, out)?
    };
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    for p in result.images.iter().chain(&result.tables) {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Mix { command: MixCommand::Generate { scenario, count, duration, seed, out, sample_rate } } => {
            mix_generate(&scenario, count, duration, seed, &out, sample_rate)?;
        }
        Command::Train { config, resume } => {
            let trainer = match (config, resume) {
                (_, Some(ckpt)) => Trainer::resume(&ckpt)?,
                (Some(cfg), None) => Trainer::new(TrainConfig::load(&cfg)?)?,
                (None, None) => bail!("either --config or --resume is required"),
            };
            let out = trainer.run()?;
            println!("best validation loss {:.3}; checkpoint {}", out.best_val_loss, out.best_checkpoint.display());
        }
        Command::Eval(args) => return eval(&args),
        Command::Ablate { suite, config, out } => {
            let mut cfg = match config {
                Some(p) => AblationConfig::load(&p)?,
                None => AblationConfig::default(),
            };
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let table = run_ablation(suite, &cfg)?;
            print!("{}", table.to_markdown());
        }
        Command::Plots { report, out } => plots(&report, &out)?,
        Command::Params { config, variant } => {
            let mut net = match config {
                Some(p) => TrainConfig::load(&p)?.network,
                None => NetworkConfig::default(),
            };
            if let Some(v) = variant {
                net.variant = v;
            }
            build_network(&net, 0)?;
            print!("{}", params_summary(&net, &[96, 128, 160])?.to_text());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
