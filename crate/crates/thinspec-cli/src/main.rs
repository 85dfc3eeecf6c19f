mod config;
mod error;
mod experiments;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{parse_floats, parse_seed, split_pair, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "thinspec", version, about = "Spectral asymptotics of PT-symmetric operators in thin layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Catalog problem (free, pt_well, shear, fullmix) or `inline`.
    #[arg(long, global = true)]
    problem: Option<String>,
    /// Parameter override, `name=value` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VAL")]
    set: Vec<String>,
    /// Coefficient expression, `a12=c12*xi` (repeatable).
    #[arg(long = "coeff", global = true, value_name = "KEY=EXPR")]
    coeff: Vec<String>,
    /// Grid `X,Nx,Nt`.
    #[arg(long, global = true, value_name = "X,NX,NT")]
    grid: Option<String>,
    /// Comma-separated, strictly decreasing ε values.
    #[arg(long, global = true)]
    eps: Option<String>,
    /// Spectral parameter of resolvent sweeps, `re,im`.
    #[arg(long, global = true, value_name = "RE,IM", allow_hyphen_values = true)]
    lambda: Option<String>,
    /// Eigensolver shift, `re` or `re,im`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    shift: Option<String>,
    /// Number of eigenpairs.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Truncation order of the residual experiment.
    #[arg(long, global = true)]
    order: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Print the resolved configuration and exit without writing files.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Check the parity hypotheses and ellipticity; estimate the enclosure constants.
    Validate,
    /// Tabulate the limiting coefficients.
    Limiting,
    /// Eigenvalues of the perturbed operator near a shift.
    Spectrum,
    /// Asymptotic corrections of a limiting eigenvalue.
    Asymptotics,
    /// Eigenvalue convergence sweep over ε.
    SweepEig,
    /// Resolvent convergence sweep over ε.
    SweepRes,
    /// Residual of the truncated asymptotic expansion over ε.
    Residual,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Limiting => "limiting",
            Command::Spectrum => "spectrum",
            Command::Asymptotics => "asymptotics",
            Command::SweepEig => "sweep-eig",
            Command::SweepRes => "sweep-res",
            Command::Residual => "residual",
        }
    }
}

fn usage(detail: String) -> CliError {
    CliError::Usage(format!("cli::parse_args: {detail}"))
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.experiment = cli.command.name().to_string();
    if let Some(p) = &cli.problem {
        if *p != cfg.problem.name {
            cfg.problem.coefficients.clear();
        }
        cfg.problem.name = p.clone();
    }
    for c in &cli.coeff {
        let (k, v) = split_pair(c)?;
        cfg.problem.coefficients.insert(k, v);
    }
    for s in &cli.set {
        let (k, v) = split_pair(s)?;
        let v: f64 = v.parse().map_err(|e| usage(format!("--set {k}: `{v}`: {e}")))?;
        cfg.params.insert(k, v);
    }
    if let Some(g) = &cli.grid {
        let v = parse_floats(g, "--grid")?;
        let as_count = |x: f64| -> Result<usize, CliError> {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(usage(format!("--grid: node count `{x}` is not a non-negative integer")))
            }
        };
        match v.as_slice() {
            [x, nx, nt] => {
                cfg.grid.x_half = *x;
                cfg.grid.nx = as_count(*nx)?;
                cfg.grid.nt = as_count(*nt)?;
            }
            _ => return Err(usage(format!("--grid expects X,Nx,Nt (got `{g}`)"))),
        }
    }
    if let Some(e) = &cli.eps {
        cfg.sweep.eps = parse_floats(e, "--eps")?;
    }
    if let Some(l) = &cli.lambda {
        match parse_floats(l, "--lambda")?.as_slice() {
            [re] => cfg.resolvent.lambda = Some([*re, 0.0]),
            [re, im] => cfg.resolvent.lambda = Some([*re, *im]),
            _ => return Err(usage(format!("--lambda expects re or re,im (got `{l}`)"))),
        }
    }
    if let Some(s) = &cli.shift {
        match parse_floats(s, "--shift")?.as_slice() {
            [re] => cfg.solver.shift = Some([*re, 0.0]),
            [re, im] => cfg.solver.shift = Some([*re, *im]),
            _ => return Err(usage(format!("--shift expects re or re,im (got `{s}`)"))),
        }
    }
    if let Some(k) = cli.k {
        cfg.solver.k = k;
    }
    if let Some(n) = cli.order {
        cfg.asymptotics.order = n;
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    if let Some(j) = cli.jobs {
        cfg.sweep.jobs = j;
    }
    if let Ok(seed) = std::env::var("THINSPEC_SEED") {
        cfg.solver.seed = parse_seed(&seed)?;
    }
    cfg.resolve()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = build_config(cli)?;
    if cli.dry_run {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let outcome = experiments::run(&cfg)?;
    for (name, bytes) in &outcome.files {
        output::write_atomic(&cfg.output, name, bytes)?;
    }
    let summary = serde_json::to_string_pretty(&outcome.summary).expect("summary serializes") + "\n";
    output::write_atomic(&cfg.output, "summary.json", summary.as_bytes())?;
    for (name, _) in &outcome.files {
        println!("{}", cfg.output.join(name).display());
    }
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
