use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use artictts::pipeline::{
    evaluate_stage, generate_stage, misalign_stage, parse_systems, pca_stage, prepare_stage, run_all, train_stage,
};
use artictts::synth::{generate_corpus, SynthSpec};
use artictts::ExperimentConfig;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "artictts", version, about = "Text and ultrasound tongue imaging to vocoder parameters")]
struct Cli {
    /// Experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// System list (`ult2wav`, `txt2wav`, `txt+ult2wav`, comma-separated, or `all`).
    #[arg(long, global = true)]
    system: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split, linguistic features and acoustic targets.
    Prepare,
    /// Fit EigenTongues on training frames and project every utterance.
    Pca,
    /// Fit normalization and train one model per system.
    Train,
    /// Generate parameter streams for dev and test utterances.
    Generate,
    /// Score generated streams and write reports.
    Evaluate,
    /// Pairwise mean-image MSE, heatmap and block summary.
    Misalign,
    /// Every stage in order.
    RunAll,
    /// Write a synthetic corpus and a matching config.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 60)]
        utterances: usize,
        /// Index of the first utterance recorded with a displaced probe.
        #[arg(long, requires = "shift_px")]
        shift_from: Option<usize>,
        /// Displacement in pixels along the scanline.
        #[arg(long)]
        shift_px: Option<f64>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let Some(path) = &cli.config else {
        bail!("--config is required for this command");
    };
    let mut cfg = ExperimentConfig::from_file(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = &cli.system {
        cfg.systems = parse_systems(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.schedule.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(out) = &cli.output {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Synth {
        dir,
        utterances,
        shift_from,
        shift_px,
    } = &cli.command
    {
        let spec = SynthSpec {
            n_utterances: *utterances,
            seed: cli.seed.unwrap_or(1),
            probe_shift: shift_from.zip(*shift_px),
            ..SynthSpec::default()
        };
        let corpus = generate_corpus(dir, &spec)?;
        println!("wrote {} utterances; config {}", corpus.ids.len(), corpus.config.display());
        return Ok(());
    }

    let cfg = load_config(cli)?;
    let started = Instant::now();
    match cli.command {
        Command::Prepare => {
            let split = prepare_stage(&cfg)?;
            println!("split {}/{}/{}", split.train.len(), split.dev.len(), split.test.len());
        }
        Command::Pca => {
            let model = pca_stage(&cfg)?;
            println!(
                "{} components retain {:.4} of the variance",
                model.n_components(),
                model.variance_retained
            );
        }
        Command::Train => {
            for &system in &cfg.systems {
                let (_, history) = train_stage(&cfg, system)?;
                println!(
                    "{system}: best epoch {} valid mse {:.6}",
                    history.best_epoch,
                    history.best_valid()
                );
            }
        }
        Command::Generate => {
            for &system in &cfg.systems {
                generate_stage(&cfg, system)?;
            }
        }
        Command::Evaluate => {
            evaluate_stage(&cfg)?;
            print!("{}", std::fs::read_to_string(cfg.output_dir.join("eval/tables_mlpg.txt"))?);
        }
        Command::Misalign => {
            let (matrix, summary) = misalign_stage(&cfg)?;
            println!("{} utterances", matrix.len());
            print!("{}", summary.to_text());
        }
        Command::RunAll => {
            run_all(&cfg)?;
            print!("{}", std::fs::read_to_string(cfg.output_dir.join("eval/tables_mlpg.txt"))?);
        }
        Command::Synth { .. } => unreachable!("handled above"),
    }
    eprintln!("done in {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
