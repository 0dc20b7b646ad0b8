use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stars_opt::ao::Scheme;
use stars_opt::config::{load_config, AlgorithmConfig, SystemConfig};
use stars_opt::experiments::{gradient_check, run_convergence_trace, run_sweep, SweepParam, SweepSpec};
use stars_opt::Result;

/// Movable-element STARS optimization: single solves, Monte-Carlo sweeps,
/// convergence traces and a gradient check.
#[derive(Parser)]
#[command(name = "stars-opt", version)]
struct Cli {
    /// `key = value` configuration file; defaults apply otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize one realization with one scheme and write its result record.
    Solve {
        #[command(flatten)]
        scheme: SchemeArg,
        /// Realization and initialization seed (defaults to the config seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average the WSR over seeded realizations for each value and scheme.
    Sweep {
        /// users, pmax, region, paths or elements.
        #[arg(long)]
        param: String,
        /// Comma-separated values of the swept parameter.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Comma-separated schemes: es, ms, ts, fpe-es, fpe-ms, fpe-ts, me-ris.
        #[arg(long, value_delimiter = ',', default_value = "es")]
        schemes: Vec<String>,
        /// Realizations per point.
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Master seed (defaults to the config seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-iteration WSR of one run.
    Trace {
        #[command(flatten)]
        scheme: SchemeArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic position gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Failure threshold on the worst relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
#[group(required = false, multiple = false)]
struct SchemeArg {
    /// es, ms or ts with movable elements.
    #[arg(long)]
    protocol: Option<String>,
    /// Any scheme, baselines included.
    #[arg(long)]
    scheme: Option<String>,
}

impl SchemeArg {
    fn resolve(&self) -> Result<Scheme> {
        match (&self.protocol, &self.scheme) {
            (Some(p), _) => {
                let s = Scheme::parse(p)?;
                if !matches!(s, Scheme::Es | Scheme::Ms | Scheme::Ts) {
                    return Err(stars_opt::Error::invalid("protocol", format!("`{p}` is not es, ms or ts")));
                }
                Ok(s)
            }
            (None, Some(s)) => Scheme::parse(s),
            (None, None) => Ok(Scheme::Es),
        }
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, text)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let (cfg, alg) = match &cli.config {
        Some(p) => load_config(p)?,
        None => (SystemConfig::default(), AlgorithmConfig::default()),
    };
    cfg.validate()?;
    alg.validate()?;
    match cli.command {
        Command::Solve { scheme, seed, out } => {
            let scheme = scheme.resolve()?;
            let seed = seed.unwrap_or(alg.rng_seed);
            let scenario = stars_opt::channel::Scenario::sample(&cfg, seed)?;
            let alg = AlgorithmConfig { rng_seed: seed, ..alg };
            let layout = stars_opt::experiments::default_layout(scheme);
            let r = stars_opt::ao::run_scheme(&scenario, &alg, scheme, layout)?;
            for v in stars_opt::ao::feasibility_violations(&scenario, &r) {
                eprintln!("warning: {v}");
            }
            println!(
                "{} seed {seed}: WSR {:.6} bit/s/Hz after {} iterations ({}converged, {:.2} s)",
                scheme.label(),
                r.wsr,
                r.iterations(),
                if r.converged { "" } else { "not " },
                r.seconds
            );
            write_out(out.as_deref(), &r.record())?;
        }
        Command::Sweep {
            param,
            values,
            schemes,
            n,
            seed,
            out,
        } => {
            let spec = SweepSpec {
                param: SweepParam::parse(&param)?,
                values,
                schemes: schemes.iter().map(|s| Scheme::parse(s)).collect::<Result<_>>()?,
                num_realizations: n,
                master_seed: seed.unwrap_or(alg.rng_seed),
            };
            let table = run_sweep(&spec, &cfg, &alg)?;
            for row in &table.rows {
                println!("{}", row.csv_line());
                for (k, e) in &row.errors {
                    eprintln!("  realization {k} failed: {e}");
                }
            }
            write_out(out.as_deref(), &table.csv())?;
        }
        Command::Trace { scheme, seed, out } => {
            let scheme = scheme.resolve()?;
            let seed = seed.unwrap_or(alg.rng_seed);
            let trace = run_convergence_trace(&cfg, &alg, scheme, seed)?;
            print!("{}", trace.csv());
            write_out(out.as_deref(), &trace.csv())?;
        }
        Command::Gradcheck { trials, seed, tol, out } => {
            let report = gradient_check(&cfg, trials, seed.unwrap_or(alg.rng_seed))?;
            println!("max relative error {:.3e} over {} trials", report.max_relative_error, report.trials);
            write_out(
                out.as_deref(),
                &format!("trials,max_relative_error\n{},{:e}\n", report.trials, report.max_relative_error),
            )?;
            if !(report.max_relative_error < tol) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
