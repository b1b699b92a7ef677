use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tvsysid::experiment::{self, emit_plot_data, load_records, run_method, ExperimentConfig, Method};
use tvsysid::metrics::aggregate;
use tvsysid::simulator::make_scenario_with;
use tvsysid::{validate, Error};

#[derive(Parser)]
#[command(name = "tvsysid", version, about = "Online identification of time-varying FIR systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo study and write the result files.
    Run(StudyArgs),
    /// Aggregate existing run files and write the summary tables.
    Report(StudyArgs),
    /// Trace a single seed, one line per update.
    Demo {
        #[command(flatten)]
        study: StudyArgs,
        /// Print every N-th update.
        #[arg(long, default_value_t = 10)]
        every: usize,
    },
    /// Run the oracle checks, and the study checks when `--runs` is given.
    Validate {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Seeds for the study checks (0 skips them).
        #[arg(long, default_value_t = 0)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        parallelism: usize,
    },
}

#[derive(Args)]
struct StudyArgs {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    runs: Option<usize>,
    /// Comma-separated, e.g. `tc_ff,tc_opt_ff`.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    checkpoints: Option<Vec<usize>>,
}

impl StudyArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
                other => other,
            })?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.runs {
            cfg.n_runs = v;
        }
        if let Some(v) = &self.methods {
            cfg.methods = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.base_seed = v;
        }
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.parallelism {
            cfg.parallelism = v;
        }
        if let Some(v) = &self.checkpoints {
            cfg.checkpoints = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_summary(cfg: &ExperimentConfig, records: &[tvsysid::metrics::RunRecord]) -> Result<(), Error> {
    let summary = aggregate(records, &cfg.checkpoints)?;
    println!("{:<14} {:>6} {:>9} {:>8} {:>9}", "method", "k", "mean", "std", "median");
    for f in &summary.fits {
        println!(
            "{:<14} {:>6} {:>9.2} {:>8.2} {:>9.2}",
            f.method, f.k, f.stats.mean, f.stats.std, f.stats.median
        );
    }
    for t in &summary.times {
        println!("{:<14} update time {:.3}s ± {:.3}s", t.method, t.mean, t.std);
    }
    let faults: usize = records.iter().flat_map(|r| r.faults.values()).map(Vec::len).sum();
    if faults > 0 {
        println!("{faults} estimator faults recorded (see run files)");
    }
    Ok(())
}

fn run(args: &StudyArgs) -> Result<(), Error> {
    let cfg = args.resolve()?;
    eprintln!(
        "running {} seeds from {} with {} into {}",
        cfg.n_runs,
        cfg.base_seed,
        cfg.methods.iter().map(Method::name).collect::<Vec<_>>().join(","),
        cfg.output_dir.display()
    );
    let records = experiment::run_experiment(&cfg)?;
    cfg.save(&cfg.output_dir.join("config.toml"))?;
    print_summary(&cfg, &records)
}

fn report(args: &StudyArgs) -> Result<(), Error> {
    let cfg = args.resolve()?;
    let records = load_records(&cfg.output_dir)?;
    if records.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no run files in {}", cfg.output_dir.display()),
        )));
    }
    let methods: Vec<Method> = cfg
        .methods
        .iter()
        .copied()
        .filter(|m| records[0].trace(m.name()).is_some())
        .collect();
    emit_plot_data(&records, &methods, &cfg.checkpoints, &cfg.output_dir)?;
    print_summary(&cfg, &records)
}

fn demo(args: &StudyArgs, every: usize) -> Result<(), Error> {
    let cfg = args.resolve()?;
    let every = every.max(1);
    let data = make_scenario_with(cfg.base_seed, &cfg.scenario());
    println!(
        "seed {}: switch at t={}, noise variance {:.4}",
        cfg.base_seed, data.switch_time, data.noise_sigma2
    );
    for &method in &cfg.methods {
        println!("== {method}");
        let mut count = 0;
        let out = run_method(&cfg, method, &data, |ev| {
            if count % every == 0 || ev.fault.is_some() {
                let mut line = format!("k={:<5} fit={:>8.2}", ev.k, ev.fit);
                if let Some(h) = ev.hyper {
                    line += &format!(
                        " λ={:.3e} β={:.4} γ={:.5} σ²={:.4}",
                        h.lambda, h.beta, h.gamma, h.sigma2
                    );
                }
                if let Some(e) = ev.fault {
                    line += &format!(" fault: {e}");
                }
                println!("{line}");
            }
            count += 1;
        });
        let total = out.times.last().map(|t| t.1).unwrap_or(0.0);
        println!("checkpoints {:?}, update time {total:.3}s", out.trace.checkpoints);
    }
    Ok(())
}

fn validate_all(seed: u64, runs: usize, parallelism: usize) -> Result<bool, Error> {
    let mut checks = validate::oracle_suite(seed);
    if runs > 0 {
        let cfg = ExperimentConfig {
            n_runs: runs,
            base_seed: seed,
            parallelism,
            methods: vec![Method::TcFf, Method::TcEstFf, Method::TcOptFf],
            ..ExperimentConfig::default()
        };
        let records = experiment::execute(&cfg)?;
        checks.push(validate::one_step_matches_opt(&records, &cfg.checkpoints));
        checks.push(validate::speedup(&records));
        checks.push(validate::adaptive_advantage(&records, 3000));
        checks.push(validate::switch_response(&records, 1000, 1050, 3000));
        checks.push(validate::step_invariants(&records));
    }
    for c in &checks {
        println!("{c}");
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Io(_) | Error::Serde(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Report(args) => report(args),
        Command::Demo { study, every } => demo(study, *every),
        Command::Validate { seed, runs, parallelism } => match validate_all(*seed, *runs, *parallelism) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
