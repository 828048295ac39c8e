use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dccd::experiment::{
    self, error_json, eval_stage, generate_stage, train_stage, ExperimentSpec, Metrics, Mode, Outcome,
    TheoremSummary, MANIFEST_FILE,
};
use dccd::{Error, Result};

#[derive(Parser)]
#[command(name = "dccd", version, about = "Synthetic domain-generalization experiments with DCCD interventions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the mode named in the spec end to end.
    Run(Common),
    /// Generate the synthetic world and write dataset.bin.
    Generate(Common),
    /// Generate and train per run.mode (baseline-dal or dccd).
    Train(Common),
    /// Evaluate the checkpoints left by `train` in the output directory.
    Eval(Common),
    /// Run the ablation rows and the beta/gamma sweeps.
    Grid(Common),
    /// Check the entropy bound on randomized discrete joints.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// Spec file (TOML); defaults apply to anything it leaves out.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory; overrides run.out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

impl Common {
    fn resolve(&self, mode: Option<Mode>) -> Result<(ExperimentSpec, PathBuf)> {
        let mut spec = match &self.spec {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        if let Some(mode) = mode {
            spec.run.mode = mode;
        }
        if let Some(seed) = self.seed {
            spec.train.seed = seed;
        }
        spec.validate()?;
        let out = self
            .out
            .clone()
            .or_else(|| spec.run.out_dir.clone())
            .ok_or_else(|| Error::Config("no output directory: pass --out or set run.out_dir".into()))?;
        Ok((spec, out))
    }
}

fn write_manifest(spec: &ExperimentSpec, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(MANIFEST_FILE), spec.manifest()?)?;
    Ok(())
}

fn print_metrics(m: &Metrics) {
    println!("rank-1: {:.4}", m.retrieval.rank1());
    println!("mAP: {:.4}", m.retrieval.mean_average_precision);
    println!(
        "entropy proxy: {:.4} of {:.4} bits",
        m.entropy_proxy.proxy_bits, m.entropy_proxy.domain_entropy_bits
    );
    if let Some(ate) = &m.ate {
        println!("ate_norm: {:.4}", ate.ate_norm);
    }
}

fn print_theorems(s: &TheoremSummary) {
    println!("joints: {}", s.joints);
    println!("violations: {}", s.violations);
    println!("min slack: {:.3e}", s.min_slack);
}

fn print_outcome(outcome: &Outcome) {
    match outcome {
        Outcome::Single(m) => print_metrics(m),
        Outcome::Theorems(s) => print_theorems(s),
        Outcome::Grid(g) => {
            for row in &g.rows {
                println!("{:<22} rank-1 {:.4}  mAP {:.4}", row.cell.name, row.mean_rank1, row.mean_map);
            }
        }
    }
}

fn execute(command: &Command) -> Result<()> {
    let (common, mode) = match command {
        Command::Run(c) | Command::Generate(c) | Command::Train(c) | Command::Eval(c) => (c, None),
        Command::Grid(c) => (c, Some(Mode::AblationGrid)),
        Command::Verify(c) => (c, Some(Mode::VerifyTheorems)),
    };
    let (spec, out) = common.resolve(mode)?;
    let quiet = common.quiet;
    match command {
        Command::Run(_) | Command::Grid(_) | Command::Verify(_) => {
            let outcome = experiment::run(&spec, &out)?;
            if !quiet {
                print_outcome(&outcome);
            }
        }
        Command::Generate(_) => {
            write_manifest(&spec, &out)?;
            let dataset = generate_stage(&spec, &out)?;
            if !quiet {
                println!("train samples: {}", dataset.train.len());
                println!("target samples: {}", dataset.target.len());
            }
        }
        Command::Train(_) => {
            write_manifest(&spec, &out)?;
            let dataset = generate_stage(&spec, &out)?;
            let report = train_stage(&spec, &dataset, &out)?;
            if !quiet {
                if let Some(last) = report.log.last() {
                    println!("epoch {}: total {:.4}  ce {:.4}", last.epoch, last.total, last.ce);
                }
            }
        }
        Command::Eval(_) => {
            let metrics = eval_stage(&spec, &out)?;
            if !quiet {
                print_metrics(&metrics);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
