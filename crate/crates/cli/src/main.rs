use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metadat::harness::{self, CellSpec, ExperimentConfig, MatrixRun, Pipeline, Toggles};
use metadat::par::{self, Execution};

/// Meta pre-training and data-adaptive test-time training experiments on
/// synthetic trajectory streams.
#[derive(Debug, Parser)]
#[command(name = "metadat", version, about)]
struct Cli {
    /// Experiment config (flat TOML with dotted keys). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `out`.
    #[arg(long, global = true, env = "METADAT_OUT")]
    out: Option<PathBuf>,
    /// Worker threads for cells (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Reuse or store pretrained weights in this directory.
    #[arg(long, global = true)]
    checkpoints: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the source, validation and target corpora.
    Gen,
    /// Offline pre-training on the source corpus.
    Pretrain,
    /// Offline then meta pre-training.
    Meta,
    /// One online run with the config's toggles.
    Ttt,
    /// Component ablation: no adaptation plus six toggle rows.
    Ablate,
    /// Learning-rate robustness sweep.
    LrSweep {
        /// Comma-separated initial learning rates; defaults to `sweep.alphas`.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
    /// Update frequency against throughput.
    FreqSweep {
        /// Comma-separated frequencies; defaults to `sweep.frequencies`.
        #[arg(long, value_delimiter = ',')]
        frequencies: Option<Vec<usize>>,
    },
    /// Limited numbers of supervision opportunities.
    Fewshot {
        /// Comma-separated budgets; defaults to `sweep.budgets`.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
    },
    /// Full method with accessor tracing; fails on any causality violation.
    Audit,
    /// Print the effective config with every default filled in.
    DumpConfig,
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<metadat::Error> for Failure {
    fn from(e: metadat::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => harness::load_config(p).map_err(|e| Failure::Validation(e.to_string()))?,
        None => harness::parse_config("")?,
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = effective_config(cli)?;
    if let Command::DumpConfig = cli.command {
        print!("{}", cfg.dump());
        return Ok(());
    }
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let out = cfg.out.clone();
    let mut pipe = Pipeline::new(cfg.clone(), exec);
    if let Some(dir) = &cli.checkpoints {
        pipe = pipe.with_checkpoints(dir);
    }
    par::with_jobs(cli.jobs, || dispatch(cli, &pipe, &out))
}

fn dispatch(cli: &Cli, pipe: &Pipeline, out: &Path) -> Result<(), Failure> {
    let cfg = &pipe.cfg;
    let run = match &cli.command {
        Command::Gen => {
            let data = par::map(pipe.exec, &cfg.seeds, |_, &s| harness::generate_data(cfg, s, Execution::Sequential));
            let data = data.into_iter().collect::<metadat::Result<Vec<_>>>()?;
            for p in harness::write_corpora(&data, cfg, out)? {
                println!("wrote {}", p.display());
            }
            return Ok(());
        }
        Command::Pretrain | Command::Meta => {
            let meta = matches!(cli.command, Command::Meta);
            let kind = if meta { "meta" } else { "pretrain" };
            let preps = par::map(pipe.exec, &cfg.seeds, |_, &s| (s, pipe.prepare(s, meta)));
            let rows = harness::write_pretraining(kind, &preps, cfg, out)?;
            for r in &rows {
                println!("seed {:>3}  {:<16} loss {} -> {}", r.seed, r.status, fmt(r.first_loss), fmt(r.last_loss));
            }
            println!("wrote {}", out.join(format!("{kind}_summary.json")).display());
            if let Some(r) = rows.iter().find(|r| !r.ok()) {
                return Err(Failure::Runtime(format!("seed {} {}", r.seed, r.status)));
            }
            return Ok(());
        }
        Command::Ttt => harness::run_matrix(pipe, "ttt", vec![CellSpec::new("ttt", cfg.toggles, cfg)]),
        Command::Ablate => harness::run_ablation_matrix(pipe),
        Command::LrSweep { alphas } => {
            let a = alphas.clone().unwrap_or_else(|| cfg.sweep.alphas.clone());
            nonempty("alphas", &a)?;
            if let Some(x) = a.iter().find(|x| !(**x >= 0.0 && x.is_finite())) {
                return Err(Failure::Validation(format!("alphas: {x} is not a finite rate >= 0")));
            }
            harness::run_lr_sweep(pipe, &a)
        }
        Command::FreqSweep { frequencies } => {
            let f = frequencies.clone().unwrap_or_else(|| cfg.sweep.frequencies.clone());
            nonempty("frequencies", &f)?;
            if f.contains(&0) {
                return Err(Failure::Validation("frequencies: must all be >= 1".into()));
            }
            harness::run_frequency_sweep(pipe, &f)
        }
        Command::Fewshot { budgets } => {
            let b = budgets.clone().unwrap_or_else(|| cfg.sweep.budgets.clone());
            nonempty("budgets", &b)?;
            harness::run_fewshot(pipe, &b)
        }
        Command::Audit => {
            let spec = CellSpec {
                audit: true,
                ..CellSpec::new("metadat", Toggles::ALL, cfg)
            };
            harness::run_matrix(pipe, "audit", vec![spec])
        }
        Command::DumpConfig => unreachable!("handled before dispatch"),
    };
    report(&run, cfg, out)
}

fn nonempty<T>(name: &str, xs: &[T]) -> Result<(), Failure> {
    if xs.is_empty() {
        return Err(Failure::Validation(format!("{name}: list is empty")));
    }
    Ok(())
}

fn fmt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.4}"))
}

fn report(run: &MatrixRun, cfg: &ExperimentConfig, out: &Path) -> Result<(), Failure> {
    let files = harness::write_results(run, cfg, out)?;
    println!(
        "{:<16} {:>10} {:>8} {:>4} {:>9} {:>17} {:>17} {:>7} {:>8}",
        "method", "mp/dlo/hsd", "alpha", "f", "budget", "mADE_6", "mFDE_6", "MR_6", "fps"
    );
    for s in run.summary() {
        println!(
            "{:<16} {:>10} {:>8} {:>4} {:>9} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>7.3} {:>8.0}",
            s.method,
            format!("{}/{}/{}", s.mp as u8, s.dlo as u8, s.hsd as u8),
            s.alpha_init,
            s.frequency,
            s.budget.map_or("-".into(), |b| b.to_string()),
            s.made_k.mean,
            s.made_k.std,
            s.mfde_k.mean,
            s.mfde_k.std,
            s.mr_k.mean,
            s.fps,
        );
    }
    println!("wrote {}", files.results.display());
    println!("wrote {}", files.summary.display());
    println!("wrote {}", files.timings.display());
    let failed = run.rows.iter().filter(|r| !r.ok()).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} cells failed; partial results written", run.rows.len())));
    }
    let violations: usize = run.rows.iter().map(|r| r.violations).sum();
    if run.specs.iter().any(|s| s.audit) {
        println!("causality violations: {violations}");
    }
    if violations > 0 {
        return Err(Failure::Runtime(format!("{violations} causality violations")));
    }
    Ok(())
}
