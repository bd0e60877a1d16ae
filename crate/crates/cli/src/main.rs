use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedfn_core::experiment::{
    emit_plot_data, parse_config, run_experiment, seed_context, seed_dir, write_factor_artifacts,
    write_pfl_artifacts, Checkpoint, ExperimentConfig, ExperimentOutcome, PflConfig, PlotKind, CHECKPOINT_FILE,
    PARTITION_FILE,
};
use fedfn_core::pfl::pfl_evaluate;
use fedfn_core::Error;

/// Federated learning simulator with feature-normalized training.
#[derive(Parser, Debug)]
#[command(name = "fedfn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every seed and write metrics, reports, checkpoints and a summary.
    Run(Common),
    /// Export each seed's partition and datasets without training.
    Partition(Common),
    /// Recompute factor reports from saved checkpoints.
    Analyze(Common),
    /// Fine-tune saved global models per client and report personalized accuracy.
    Pfl(Common),
    /// Write long-format CSV for a figure from a finished run.
    PlotData {
        /// Seed directory (norm-curves, heatmaps) or experiment root (mu-sweep).
        #[arg(long)]
        run: PathBuf,
        /// norm-curves, heatmaps or mu-sweep.
        #[arg(long)]
        kind: PlotKind,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory, replacing the config's `out_dir`.
    #[arg(long, env = "FEDFN_OUT_DIR")]
    out: Option<PathBuf>,
    /// Run seeds concurrently.
    #[arg(long)]
    parallel: bool,
}

impl Common {
    fn load(&self) -> fedfn_core::Result<ExperimentConfig> {
        let mut config = parse_config(&self.config)?;
        if let Some(seeds) = &self.seeds {
            config.seeds = seeds.clone();
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        config.parallel_seeds |= self.parallel;
        config.validate()?;
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}

/// `Ok(false)` when the command finished but some seeds failed.
fn dispatch(command: Command) -> fedfn_core::Result<bool> {
    match command {
        Command::Run(args) => run(&args.load()?),
        Command::Partition(args) => partition(&args.load()?),
        Command::Analyze(args) => analyze(&args.load()?),
        Command::Pfl(args) => pfl(&args.load()?),
        Command::PlotData { run, kind } => {
            println!("{}", emit_plot_data(&run, kind)?.display());
            Ok(true)
        }
    }
}

fn run(config: &ExperimentConfig) -> fedfn_core::Result<bool> {
    let outcome = run_experiment(config)?;
    match &outcome {
        ExperimentOutcome::Single(summary) => {
            for s in &summary.seeds {
                match (&s.error, s.final_accuracy) {
                    (Some(e), _) => println!("seed {}: failed: {e}", s.seed),
                    (None, Some(acc)) => println!("seed {}: final accuracy {acc:.4}", s.seed),
                    (None, None) => println!("seed {}: no rounds", s.seed),
                }
            }
            if let (Some(m), Some(sd)) = (summary.mean_accuracy, summary.std_accuracy) {
                println!("{}: {m:.4} ± {sd:.4} over {} seeds", summary.algorithm, summary.seeds.len());
            }
        }
        ExperimentOutcome::Sweep(points) => {
            for p in points {
                let acc = p.mean_accuracy.map_or("n/a".to_string(), |a| format!("{a:.4}"));
                println!("mu {}: {acc}", p.mu);
            }
        }
    }
    Ok(outcome.failures(&config.out_dir)? == 0)
}

fn partition(config: &ExperimentConfig) -> fedfn_core::Result<bool> {
    for &seed in &config.seeds {
        let dir = seed_dir(&config.out_dir, seed);
        std::fs::create_dir_all(&dir)?;
        let ctx = seed_context(config, seed)?;
        ctx.partition.write_json(&dir.join(PARTITION_FILE))?;
        ctx.train.write_binary(&dir.join("train.bin"))?;
        ctx.test.write_binary(&dir.join("test.bin"))?;
        ctx.train.write_csv(&dir.join("train.csv"))?;
        ctx.test.write_csv(&dir.join("test.csv"))?;
        println!("{}", dir.display());
    }
    Ok(true)
}

fn load_checkpoint(dir: &Path) -> fedfn_core::Result<Checkpoint> {
    let path = dir.join(CHECKPOINT_FILE);
    if !path.is_file() {
        return Err(Error::MissingArtifact(path));
    }
    Checkpoint::read(&path)
}

fn analyze(config: &ExperimentConfig) -> fedfn_core::Result<bool> {
    for &seed in &config.seeds {
        let dir = seed_dir(&config.out_dir, seed);
        let ck = load_checkpoint(&dir)?;
        let ctx = seed_context(config, seed)?;
        let report = write_factor_artifacts(&dir, &ck.model()?, &ctx.test, Some(ck.rounds))?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "seed {seed}: intra-class {:.4}, alignment {:.4}",
            mean(&report.intra_class_similarity),
            mean(&report.prototype_weight_alignment)
        );
    }
    Ok(true)
}

fn pfl(config: &ExperimentConfig) -> fedfn_core::Result<bool> {
    let mut with_pfl = config.clone();
    with_pfl.pfl.get_or_insert_with(PflConfig::default);
    let spec = with_pfl.pfl_spec().expect("fine-tuning section present");
    for &seed in &config.seeds {
        let dir = seed_dir(&config.out_dir, seed);
        let ck = load_checkpoint(&dir)?;
        let ctx = seed_context(config, seed)?;
        let report = pfl_evaluate(
            &ck.algorithm.label(),
            &ck.model()?,
            &ctx.partition,
            &ctx.train,
            &ctx.test,
            &spec,
            seed,
        )?;
        write_pfl_artifacts(&dir, &report)?;
        let best = report.best_row();
        println!(
            "seed {seed}: global {:.4} -> best {:.4} (lr {})",
            report.global.mean,
            best.mean,
            best.lr.unwrap_or_default()
        );
    }
    Ok(true)
}
