use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use ccsynth::probbounds::{CurveKind, DisturbanceClass, Sidedness};
use ccsynth::sim::{write_trace_csv, NoiseClass};
use ccsynth_cli::commands::{self, SimOptions, SynthOptions};
use ccsynth_cli::gains::GainsFile;
use ccsynth_cli::problem::{Problem, SATELLITE};
use ccsynth_cli::CliError;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ccsynth", version, about = "Chance-constrained linear feedback synthesis")]
struct Cli {
    /// Override the SDP feasibility tolerance.
    #[arg(long, global = true)]
    feas_tol: Option<f64>,
    /// Override the SDP relative duality-gap tolerance.
    #[arg(long, global = true)]
    gap_tol: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Minimum feasible violation level of each constraint, in priority order.
    Minlevel {
        file: PathBuf,
        /// Report only this constraint (0-based); earlier ones stay fixed.
        #[arg(long)]
        constraint: Option<usize>,
        /// Treat each constraint alone instead of in priority order.
        #[arg(long)]
        independent: bool,
    },
    /// Synthesize a gain and write it to a gains file.
    Synth {
        file: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Impose only these constraints (0-based, comma separated).
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<usize>>,
        /// Ignore all constraints (plain LQR / LQG).
        #[arg(long)]
        unconstrained: bool,
        /// Raise infeasible levels to their planned minimum.
        #[arg(long)]
        auto_level: bool,
    },
    /// Simulate the closed loop of a gains file.
    Simulate {
        file: PathBuf,
        gains: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        burn_in: Option<usize>,
        #[arg(long)]
        replicas: Option<usize>,
        /// Worker threads for replicas; results do not depend on it.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, value_enum)]
        disturbance: Option<Noise>,
        /// Write the report as CSV here.
        #[arg(long, short)]
        output: Option<PathBuf>,
        /// Write a state/input trace CSV here.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        stride: usize,
    },
    /// Tabulate a bound-factor curve as CSV on standard output.
    Curves {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, value_enum)]
        class: Class,
        /// Sidedness for SCC curves.
        #[arg(long, value_enum, default_value_t = Side::TwoSided)]
        side: Side,
        /// Dimension for JCC curves.
        #[arg(long, default_value_t = 1)]
        n: u32,
        /// `a:b:step`, all points inside (0, 1).
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
    },
    /// Run the bundled satellite example end to end.
    DemoSatellite {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Print the bundled problem file and exit.
        #[arg(long)]
        print_problem: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Scc,
    Jcc,
}

#[derive(Clone, Copy, ValueEnum)]
enum Class {
    Wss,
    Nrm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    OneSided,
    TwoSided,
}

#[derive(Clone, Copy, ValueEnum)]
enum Noise {
    Gaussian,
    UniformWss,
    TwoPointWss,
    ZeroTest,
}

impl From<Noise> for NoiseClass {
    fn from(n: Noise) -> Self {
        match n {
            Noise::Gaussian => NoiseClass::Gaussian,
            Noise::UniformWss => NoiseClass::UniformWss,
            Noise::TwoPointWss => NoiseClass::TwoPointWss,
            Noise::ZeroTest => NoiseClass::ZeroTest,
        }
    }
}

fn load(cli: &Cli, path: &PathBuf) -> Result<Problem, CliError> {
    let mut p = Problem::load(path)?;
    tolerances(cli, &mut p);
    Ok(p)
}

fn tolerances(cli: &Cli, p: &mut Problem) {
    if let Some(t) = cli.feas_tol {
        p.options.synthesis.sdp.feas_tol = t;
    }
    if let Some(t) = cli.gap_tol {
        p.options.synthesis.sdp.gap_tol = t;
    }
}

fn create(path: &PathBuf) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match &cli.command {
        Command::Minlevel { file, constraint, independent } => {
            commands::minlevel(&load(cli, file)?, *constraint, *independent, &mut out)?;
        }
        Command::Synth { file, output, only, unconstrained, auto_level } => {
            let opts = SynthOptions { only: only.clone(), unconstrained: *unconstrained, auto_level: *auto_level };
            let gains = commands::synth(&load(cli, file)?, &opts, &mut out)?;
            gains.save(output)?;
            writeln!(out, "gains written to {}", output.display())?;
        }
        Command::Simulate { file, gains, steps, seed, burn_in, replicas, jobs, disturbance, output, trace, stride } => {
            let problem = load(cli, file)?;
            let opts = SimOptions {
                steps: *steps,
                seed: *seed,
                burn_in: *burn_in,
                replicas: *replicas,
                jobs: Some(*jobs),
                disturbance: disturbance.map(Into::into),
                trace_stride: trace.as_ref().map(|_| *stride),
            };
            let report = commands::run_simulation(&problem, &GainsFile::load(gains)?, &opts)?;
            commands::print_report(&report, &mut out)?;
            if let Some(path) = output {
                let mut w = create(path)?;
                report.write_csv(&mut w)?;
                w.flush()?;
            }
            if let Some(path) = trace {
                let labels: Vec<&str> = problem.constraints.iter().map(|c| c.label.as_str()).collect();
                let mut w = create(path)?;
                write_trace_csv(&mut w, &report.trace, &labels)?;
                w.flush()?;
            }
        }
        Command::Curves { kind, class, side, n, grid } => {
            let kind = match kind {
                Kind::Scc => CurveKind::Scc(match side {
                    Side::OneSided => Sidedness::OneSided,
                    Side::TwoSided => Sidedness::TwoSided,
                }),
                Kind::Jcc => CurveKind::Jcc { n: *n },
            };
            let class = match class {
                Class::Wss => DisturbanceClass::Wss,
                Class::Nrm => DisturbanceClass::Nrm,
            };
            commands::curves(kind, class, commands::parse_grid(grid)?, &mut out)?;
        }
        Command::DemoSatellite { steps, seed, jobs, print_problem } => {
            if *print_problem {
                write!(out, "{SATELLITE}")?;
                return Ok(());
            }
            let mut problem = Problem::parse(SATELLITE)?;
            tolerances(cli, &mut problem);
            let opts = SimOptions { steps: *steps, seed: *seed, jobs: Some(*jobs), ..Default::default() };
            commands::satellite_demo(&problem, &opts, &mut out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
