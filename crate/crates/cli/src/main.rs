//! `gni`: run integrator experiments, convergence studies and list registries.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 bad configuration or unknown id,
//! 3 numerical failure (the message carries the step index).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gni_core::harness::{
    self, convergence, exit_code, parse_param, run, write_atomic, ExperimentConfig, IntegratorSpec, OutputFormat,
};
use gni_core::Result;

#[derive(Parser)]
#[command(name = "gni", version, about = "Structure-preserving integrator experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one problem and emit the per-step observable table.
    Run(RunArgs),
    /// Observed orders of one or more integrators at a fixed final time.
    Convergence(ConvergenceArgs),
    /// Print the ids and parameters of a registry.
    List {
        /// problems, integrators or diagnostics
        registry: String,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    /// Problem parameter `key=value`, repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv or json
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    integrator: Option<String>,
    /// Integrator parameter `key=value`, repeatable.
    #[arg(long = "iparam", value_name = "KEY=VALUE")]
    iparams: Vec<String>,
    #[arg(long, allow_negative_numbers = true)]
    h: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated observable names (default: all).
    #[arg(long, value_delimiter = ',')]
    observables: Option<Vec<String>>,
    /// Comma-separated diagnostic ids.
    #[arg(long, value_delimiter = ',')]
    diagnostics: Option<Vec<String>>,
    /// Record every k-th step.
    #[arg(long)]
    every: Option<usize>,
    /// Directory for `<column>.dat` files of (t, value) pairs.
    #[arg(long, value_name = "DIR")]
    emit_plot_data: Option<PathBuf>,
}

#[derive(Args)]
struct ConvergenceArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated integrator specs, each `id[:key=value...]`.
    #[arg(long, value_delimiter = ',', required = true)]
    integrators: Vec<String>,
    /// Comma-separated step sizes, at least three.
    #[arg(long = "h-list", value_delimiter = ',', required = true)]
    h_list: Vec<f64>,
    #[arg(long = "t-end")]
    t_end: f64,
}

fn base_config(common: &Common) -> Result<ExperimentConfig> {
    let mut c = match &common.config {
        Some(path) => ExperimentConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &common.problem {
        if *p != c.problem {
            c.problem_params.clear();
        }
        c.problem = p.clone();
    }
    for kv in &common.params {
        let (k, v) = parse_param(kv)?;
        c.problem_params.insert(k, v);
    }
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(f) = &common.format {
        c.format = OutputFormat::parse(f)?;
    }
    Ok(c)
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn run_cmd(args: RunArgs) -> Result<()> {
    let mut c = base_config(&args.common)?;
    if let Some(i) = args.integrator {
        if i != c.integrator {
            c.integrator_params.clear();
        }
        c.integrator = i;
    }
    for kv in &args.iparams {
        let (k, v) = parse_param(kv)?;
        c.integrator_params.insert(k, v);
    }
    if let Some(h) = args.h {
        c.h = h;
    }
    if let Some(n) = args.steps {
        c.n_steps = n;
    }
    if let Some(o) = args.observables {
        c.observables = o;
    }
    if let Some(d) = args.diagnostics {
        c.diagnostics = d;
    }
    if let Some(e) = args.every {
        c.every = e;
    }
    let report = run(&c)?;
    emit(&args.common.out, &report.render(c.format))?;
    if let Some(dir) = &args.emit_plot_data {
        report.write_plot_data(dir)?;
    }
    let s = &report.summary;
    for (name, drift) in &s.max_drift {
        log::info!("{name}: max drift {drift:.3e}, slope {:.3e}/step", s.drift_slope[name]);
    }
    log::info!("{} steps in {:.3} s", s.steps, s.wall_time_s);
    Ok(())
}

fn convergence_cmd(args: ConvergenceArgs) -> Result<()> {
    let c = base_config(&args.common)?;
    let specs = args
        .integrators
        .iter()
        .map(|s| IntegratorSpec::parse(s))
        .collect::<Result<Vec<_>>>()?;
    let table = convergence(&c, &specs, &args.h_list, args.t_end)?;
    let text = match c.format {
        OutputFormat::Csv => table.to_csv(),
        OutputFormat::Json => table.to_json(),
    };
    emit(&args.common.out, &text)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => run_cmd(a),
        Command::Convergence(a) => convergence_cmd(a),
        Command::List { registry } => emit(&None, &harness::list(&registry)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gni: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

