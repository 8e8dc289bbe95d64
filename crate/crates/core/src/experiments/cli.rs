//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::analytic::AnalyticSolution;
use crate::datagen::{load_dataset_for, load_policy_for, save_dataset, save_policy};
use crate::error::{Error, Result};
use crate::prefcore::{argmax, TabularPolicy};

use super::config::ExperimentConfig;
use super::report::{emit_csv, EvalReport, RunRecord};
use super::revision::{eval_revision_curve, kernel_power_row, revise, REVISE_STREAM};
use super::runs::{dataset_for, marginal_probs, run_alpha_sweep, run_fig2, train_method};

#[derive(Debug, Parser)]
#[command(name = "srpo", version, about = "Tabular SRPO / DPO / IPO experiments", arg_required_else_help = true)]
struct Cli {
    /// Config file (`key = value`); flags below override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed, replacing the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<String>,
    /// Method list, e.g. `srpo` or `"dpo ipo"`.
    #[arg(long, global = true)]
    method: Option<String>,
    #[arg(long, global = true)]
    beta: Option<String>,
    #[arg(long, global = true)]
    alpha: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled dataset into <out>/dataset.tsv.
    Generate,
    /// Train the first configured method; writes <out>/policy.txt and the loss trace.
    Train {
        /// Train on this dataset instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print the closed-form optimal improvement and generative policies.
    Analytic,
    /// Robustness study under the uniform and the skewed behavior policy.
    Fig2,
    /// Train SRPO over the α grid on one dataset.
    AlphaSweep,
    /// Apply the improvement policy repeatedly to a starting action.
    Revise {
        /// Policy file; defaults to the closed-form solution.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        context: usize,
        /// Starting action.
        #[arg(long)]
        start: usize,
        /// Number of revisions N.
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Number of independent chains; above 1 prints a histogram.
        #[arg(long, default_value_t = 1)]
        samples: usize,
    },
    /// Evaluate a policy file: action probabilities and the revision curve.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        /// Number of revisions; defaults to the config value.
        #[arg(long)]
        revisions: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train { .. } => "train",
            Command::Analytic => "analytic",
            Command::Fig2 => "fig2",
            Command::AlphaSweep => "alpha-sweep",
            Command::Revise { .. } => "revise",
            Command::Eval { .. } => "eval",
        }
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let cfg = match build_config(&cli) {
        Ok(cfg) => cfg,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            return 1;
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match run(&cli, &cfg) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

fn build_config(cli: &Cli) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(Failure::Runtime)?,
        None => ExperimentConfig::default(),
    };
    let overrides = [
        ("seed", &cli.seed),
        ("out", &cli.out),
        ("method", &cli.method),
        ("beta", &cli.beta),
        ("alpha", &cli.alpha),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, v).map_err(|e| Failure::Usage(format!("--{key}: {e}")))?;
        }
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, command: &Command) -> PathBuf {
    cfg.out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(command.name()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn format_row(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join("  ")
}

fn run(cli: &Cli, cfg: &ExperimentConfig) -> Result<String> {
    let mut text = String::new();
    match &cli.command {
        Command::Generate => {
            let dir = out_dir(cfg, &cli.command);
            create_dir(&dir)?;
            let dataset = dataset_for(cfg, &cfg.behavior()?, cfg.primary_seed())?;
            let path = dir.join("dataset.tsv");
            save_dataset(&dataset, &path)?;
            let _ = writeln!(text, "wrote {} records to {}", dataset.len(), path.display());
        }
        Command::Train { data } => {
            let dir = out_dir(cfg, &cli.command);
            create_dir(&dir)?;
            let seed = cfg.primary_seed();
            let dataset = match data {
                Some(path) => load_dataset_for(path, cfg.space())?,
                None => dataset_for(cfg, &cfg.behavior()?, seed)?,
            };
            let method = cfg.primary_method();
            let trained = train_method(cfg, &dataset, method, cfg.alpha, seed)?;
            let policy_path = dir.join("policy.txt");
            save_policy(&trained.final_policy, &policy_path)?;
            let rho = cfg.context_distribution()?;
            let probs = marginal_probs(&trained.final_policy, &rho)?;
            let mut report = EvalReport::new(cfg.space().num_actions());
            report.runs.push(RunRecord {
                method,
                label: "train".into(),
                seed,
                argmax: argmax(&probs),
                probs: probs.clone(),
                loss_trace: trained.losses,
            });
            if cfg.revisions > 0 {
                report.revision_curve =
                    eval_revision_curve(&trained.final_policy, &cfg.preference, &rho, cfg.revisions)?;
            }
            emit_csv(&report, &dir)?;
            let _ = writeln!(text, "{} probs: {}  argmax y{}", method.name(), format_row(&probs), argmax(&probs));
            let _ = writeln!(text, "wrote {}", policy_path.display());
        }
        Command::Analytic => {
            let reference = TabularPolicy::uniform(cfg.space());
            let sol = AnalyticSolution::solve(&cfg.preference, &reference, cfg.beta)?;
            let space = cfg.space();
            let _ = writeln!(text, "beta = {}", cfg.beta);
            for x in 0..space.num_contexts() {
                let _ = writeln!(text, "context {x}");
                let _ = writeln!(text, "pi_dagger_star(y_out | y_in), one row per y_in:");
                for y in 0..space.num_actions() {
                    let _ = writeln!(text, "  y{y}: {}", format_row(sol.imp_star.row(x, y)));
                }
                let row = sol.gen_star.row(x);
                let _ = writeln!(text, "pi_star: {}  argmax y{}", format_row(row), argmax(row));
            }
            if let Some(dir) = &cfg.out {
                create_dir(dir)?;
                let path = dir.join("policy.txt");
                save_policy(&sol.policy(), &path)?;
                let _ = writeln!(text, "wrote {}", path.display());
            }
        }
        Command::Fig2 | Command::AlphaSweep => {
            let dir = out_dir(cfg, &cli.command);
            let report = if matches!(cli.command, Command::Fig2) {
                run_fig2(cfg)?
            } else {
                run_alpha_sweep(cfg)?
            };
            emit_csv(&report, &dir)?;
            text.push_str(&report.summary());
            let _ = writeln!(text, "wrote CSV files to {}", dir.display());
        }
        Command::Revise {
            policy,
            context,
            start,
            steps,
            samples,
        } => {
            let policy = match policy {
                Some(path) => load_policy_for(path, cfg.space())?,
                None => AnalyticSolution::solve(&cfg.preference, &TabularPolicy::uniform(cfg.space()), cfg.beta)?.policy(),
            };
            let seed = cfg.primary_seed();
            if *samples <= 1 {
                let _ = writeln!(text, "{}", revise(&policy, *context, *start, *steps, seed)?);
            } else {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(REVISE_STREAM);
                let exact = kernel_power_row(&policy, *context, *start, *steps)?;
                let mut counts = vec![0usize; exact.len()];
                for _ in 0..*samples {
                    counts[super::revision::revise_with_rng(&policy, *context, *start, *steps, &mut rng)?] += 1;
                }
                let _ = writeln!(text, "action,count,frequency,exact");
                for (a, (c, e)) in counts.iter().zip(&exact).enumerate() {
                    let _ = writeln!(text, "{a},{c},{},{e}", *c as f64 / *samples as f64);
                }
            }
        }
        Command::Eval { policy, revisions } => {
            let policy = load_policy_for(policy, cfg.space())?;
            let rho = cfg.context_distribution()?;
            let probs = marginal_probs(&policy, &rho)?;
            let n = revisions.unwrap_or(cfg.revisions).max(1);
            let curve = eval_revision_curve(&policy, &cfg.preference, &rho, n)?;
            let _ = writeln!(text, "probs: {}  argmax y{}", format_row(&probs), argmax(&probs));
            let _ = writeln!(text, "revision curve m(k): {}", format_row(&curve));
            if let Some(dir) = &cfg.out {
                let mut report = EvalReport::new(probs.len());
                report.runs.push(RunRecord {
                    method: cfg.primary_method(),
                    label: "eval".into(),
                    seed: cfg.primary_seed(),
                    argmax: argmax(&probs),
                    probs,
                    loss_trace: Vec::new(),
                });
                report.revision_curve = curve;
                emit_csv(&report, dir)?;
                let _ = writeln!(text, "wrote CSV files to {}", dir.display());
            }
        }
    }
    Ok(text)
}
