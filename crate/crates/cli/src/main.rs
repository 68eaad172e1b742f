use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use wsnloc::harness::{
    monte_carlo, spectrum, write_rmse_csv, write_spectrum_csv, write_trials_csv, DecorrelateKind, DoaKind,
    EstimatorKind, Experiment, HarnessError, HybridScheme, ScenarioConfig,
};

/// Seeded Monte-Carlo experiments for RSS, DOA and hybrid localization.
#[derive(Parser, Debug)]
#[command(name = "wsnloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// RMSE vs SNR of RSS trilateration.
    Rss(RunArgs),
    /// RMSE vs SNR of DOA estimation, in degrees.
    Doa(RunArgs),
    /// RMSE vs SNR of hybrid RSS + DOA localization.
    Hybrid(RunArgs),
    /// MUSIC spectrum of one snapshot block at the first SNR point.
    Spectrum(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = PossibleValuesParser::new(EstimatorKind::NAMES))]
    estimator: Option<String>,
    #[arg(long, value_parser = PossibleValuesParser::new(DoaKind::NAMES))]
    doa: Option<String>,
    #[arg(long, value_parser = PossibleValuesParser::new(DecorrelateKind::NAMES))]
    decorrelate: Option<String>,
    #[arg(long, value_parser = PossibleValuesParser::new(HybridScheme::NAMES))]
    hybrid: Option<String>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Also write the per-trial log here.
    #[arg(long)]
    trials_out: Option<PathBuf>,
}

impl RunArgs {
    fn scenario(&self) -> Result<ScenarioConfig, HarnessError> {
        let mut cfg = ScenarioConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let m = &mut cfg.method;
        if let Some(s) = &self.estimator {
            m.estimator = s.parse()?;
        }
        if let Some(s) = &self.doa {
            m.doa = s.parse()?;
        }
        if let Some(s) = &self.decorrelate {
            m.decorrelate = s.parse()?;
        }
        if let Some(s) = &self.hybrid {
            m.hybrid = s.parse()?;
        }
        if self.workers == Some(0) {
            return Err(HarnessError::Config("--workers must be at least 1".into()));
        }
        Ok(cfg)
    }
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, HarnessError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cmd: Command) -> Result<(), HarnessError> {
    let (args, experiment) = match &cmd {
        Command::Rss(a) => (a, Experiment::Rss),
        Command::Doa(a) => (a, Experiment::Doa),
        Command::Hybrid(a) => (a, Experiment::Hybrid),
        Command::Spectrum(a) => (a, Experiment::Doa),
    };
    let cfg = args.scenario()?;
    if let Command::Spectrum(_) = cmd {
        let spec = spectrum(&cfg)?;
        return write_spectrum_csv(&spec, sink(args.out.as_deref())?);
    }
    let result = monte_carlo(&cfg, experiment, args.workers)?;
    if let Some(p) = &args.trials_out {
        write_trials_csv(&result.records, BufWriter::new(File::create(p)?))?;
    }
    write_rmse_csv(&result.rows, sink(args.out.as_deref())?)
}

fn main() -> ExitCode {
    // Usage errors count as config errors; exit code 2 is reserved for
    // all-trials-failed.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                HarnessError::AllTrialsFailed { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
