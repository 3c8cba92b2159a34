use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use relvfl::experiment::{
    comparison_csv, gradcheck, merge_reports, run_experiment, write_outputs, ExperimentConfig,
    ExperimentError, MethodChoice,
};

#[derive(Parser)]
#[command(name = "relvfl", version, about = "Reliability-aware vertical federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run n_sim simulation runs and write reports.
    Run(RunArgs),
    /// Merge summary.json files from several run directories.
    Report {
        #[arg(required = false)]
        dirs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients of the configured model specs.
    Gradcheck {
        #[command(flatten)]
        overrides: Overrides,
        /// Negate the analytic gradient; the check must then fail.
        #[arg(long)]
        corrupt: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory; defaults to $RELVFL_OUTPUT_ROOT/<scenario>_seed<seed>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "RELVFL_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
    /// Worker threads for runs; 1 is fully serial, 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct Overrides {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    method: Option<MethodChoice>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    n_sim: Option<usize>,
    #[arg(long)]
    test_rounds: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    label_column: Option<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.scenario {
            cfg.scenario = s.clone();
            cfg.beta_alpha = None;
            cfg.beta_beta = None;
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = &self.$f { cfg.$f = v.clone(); })* };
        }
        set!(method, seed, k, budget, n_sim, test_rounds, rounds, lr, batch_size, eval_every, label_column);
        if let Some(p) = &self.csv {
            cfg.csv_path = Some(p.clone());
        }
        cfg.resolve()
    }
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.overrides.resolve()?;
            let dir = args.out.unwrap_or_else(|| {
                args.output_root
                    .join(format!("{}_seed{}", cfg.scenario, cfg.seed))
            });
            let result = run_experiment(&cfg, args.jobs)?;
            let summary = write_outputs(&result, &dir)?;
            println!("wrote {}", dir.display());
            if let Some(v) = summary.improvement_percent {
                println!("improvement: {v:.3}%");
            }
            Ok(())
        }
        Command::Report { dirs, out } => {
            let table = comparison_csv(&merge_reports(&dirs)?);
            match out {
                Some(path) => std::fs::write(&path, table).map_err(|source| ExperimentError::Io {
                    path: path.display().to_string(),
                    source,
                })?,
                None => print!("{table}"),
            }
            Ok(())
        }
        Command::Gradcheck { overrides, corrupt } => {
            let cfg = overrides.resolve()?;
            let lines = gradcheck(&cfg, corrupt)?;
            let mut worst = 0.0f64;
            for l in &lines {
                println!("{:<24} max relative error {:.3e}", l.label, l.max_rel_error);
                worst = worst.max(l.max_rel_error);
            }
            if worst < 1e-4 {
                println!("gradcheck passed");
                Ok(())
            } else {
                Err(ExperimentError::GradCheck(worst))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
