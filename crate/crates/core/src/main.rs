use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rfkde::config::{CoeffConfig, ExperimentName, RegionConfig, RunConfig};
use rfkde::kde::Grid;
use rfkde::runner::{self, OUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "rfkde", version, about = "Kernel density estimation for random fields on Z^d")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment or audit and write `<name>.csv` and `<name>.json`.
    Run(RunArgs),
    /// Estimate the marginal density from one simulated sample.
    Estimate(EstimateArgs),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Coefficient law: geometric:<rate>, polynomial:<exponent> or iid.
    #[arg(long)]
    coeff: Option<CoeffConfig>,
    /// Lattice dimension.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    kernel: Option<String>,
    /// beta=<b>, berry-esseen tau=<t> or fixed=<b>.
    #[arg(long)]
    bandwidth_rule: Option<String>,
    /// Evaluation grid lo:hi:step.
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    experiment: Option<ExperimentName>,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    replicates: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Run even if a required assumption fails.
    #[arg(long)]
    force: bool,
    /// Tail weight exponent w for the m_n audit.
    #[arg(long)]
    weight_exponent: Option<f64>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: Common,
    /// Side length of the cube region.
    #[arg(long, default_value_t = 1024)]
    side: usize,
}

fn base_config(common: &Common, experiment: Option<ExperimentName>) -> Result<RunConfig, String> {
    let mut c = match (&common.config, experiment) {
        (Some(path), _) => RunConfig::from_file(path).map_err(|e| e.to_string())?,
        (None, Some(e)) => RunConfig::minimal(e),
        (None, None) => return Err("either --experiment or --config is required".into()),
    };
    if let Some(e) = experiment {
        c.experiment = e;
    }
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(o) = &common.out {
        c.out = Some(o.clone());
    }
    if let Some(k) = &common.coeff {
        c.field.coeffs = k.clone();
    }
    if let Some(d) = common.d {
        c.field.d = d;
        if let Some(r) = c.region.as_mut() {
            r.d = Some(d);
        }
    }
    if let Some(k) = &common.kernel {
        c.kernel = k.clone();
    }
    if let Some(r) = &common.bandwidth_rule {
        c.bandwidth_rule = Some(r.clone());
    }
    if let Some(g) = &common.grid {
        c.grid = Some(g.clone());
        c.points = None;
    }
    Ok(c)
}

fn run(args: RunArgs) -> Result<bool, String> {
    let mut c = base_config(&args.common, args.experiment)?;
    if let Some(r) = args.replicates {
        c.replicates = Some(r);
    }
    if let Some(w) = args.workers {
        c.workers = Some(w);
    }
    if args.force {
        c.force = true;
    }
    if let Some(w) = args.weight_exponent {
        c.audit.weight_exponent = Some(w);
    }
    // a --d override invalidates the dimension of a default region
    if args.common.d.is_some() && args.common.config.is_none() {
        c.region = None;
    }
    c.fill_defaults();
    let outcome = runner::run(&c).map_err(|e| e.to_string())?;
    for line in outcome.summary_lines() {
        println!("{line}");
    }
    println!("wrote {} and {}", outcome.csv_path.display(), outcome.json_path.display());
    Ok(outcome.passed)
}

fn estimate(args: EstimateArgs) -> Result<bool, String> {
    let mut c = base_config(&args.common, Some(ExperimentName::L1Rate))?;
    c.fill_defaults();
    c.validate().map_err(|e| e.to_string())?;
    let d = c.field.d;
    let region = RegionConfig::cube(d, args.side).build(d).map_err(|e| e.to_string())?;
    let grid: Grid = c.grid.as_deref().unwrap_or("-4:4:0.01").parse().map_err(|e: rfkde::Error| e.to_string())?;
    let path = runner::run_estimate(&c, &region, &grid).map_err(|e| e.to_string())?;
    println!("wrote {}", path.display());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Estimate(a) => estimate(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
