use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::info;

use stochastic_privacy::experiments::{
    emit_plots, CandidateScope, Experiment, ExperimentConfig, ExperimentError, PopulationSource,
};
use stochastic_privacy::population::{Metric, Population, SyntheticConfig};
use stochastic_privacy::selectors::Procedure;

const EXIT_CONFIG: u8 = 1;
const EXIT_AUDIT_FAIL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "sprivacy",
    version,
    about = "Privacy-constrained selective sampling experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a clustered synthetic population CSV.
    Gen(GenArgs),
    /// Utility vs budget at a fixed risk.
    SweepBudget(SweepArgs),
    /// Utility vs risk at a fixed budget.
    SweepRisk(SweepArgs),
    /// Per-iteration obfuscation loss of one sp_greedy run.
    TraceObfuscation(TraceArgs),
    /// Monte-Carlo selection-frequency audit.
    Audit(AuditArgs),
    /// Render SVG charts from sweep and trace CSVs.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenArgs {
    /// TOML file of generator settings (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_users: Option<usize>,
    #[arg(long)]
    n_clusters: Option<usize>,
    #[arg(long)]
    cluster_spread: Option<f64>,
    /// min_x,max_x,min_y,max_y
    #[arg(long, value_delimiter = ',', num_args = 4)]
    bbox: Option<Vec<f64>>,
    #[arg(long)]
    expert_fraction: Option<f64>,
    /// Privacy risk promised to every user.
    #[arg(long)]
    risk: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PopArgs {
    /// Population CSV (`id,x,y,privacy_risk,cost,expert`).
    #[arg(long)]
    pop: PathBuf,
    #[arg(long, default_value_t = Metric::Euclidean)]
    metric: Metric,
    /// Restrict candidates to the expert cohort.
    #[arg(long)]
    experts_only: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    pop: PopArgs,
    /// Budgets: `start:end:step`, a comma list, or one value.
    #[arg(long)]
    b: String,
    /// Risks: comma list of decimals or fractions like `1/100`.
    #[arg(long)]
    r: String,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma list of procedures.
    #[arg(long, default_value = "random,greedy,rand_greedy,sp_greedy")]
    procs: String,
    /// Add a wall-clock `runtime_ms` column.
    #[arg(long)]
    timings: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    pop: PopArgs,
    #[arg(long)]
    b: usize,
    #[arg(long)]
    r: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    pop: PopArgs,
    #[arg(long = "proc")]
    procedure: Procedure,
    #[arg(long)]
    b: usize,
    #[arg(long)]
    r: String,
    #[arg(long, default_value_t = 5000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Run(ExperimentError),
    AuditFail,
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Failure::Run(e)
    }
}

fn parse_budgets(s: &str) -> Result<Vec<usize>, String> {
    let num = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad budget {t:?}: {e}"))
    };
    let parts: Vec<&str> = s.split(':').collect();
    match parts[..] {
        [one] => one.split(',').map(num).collect(),
        [a, b, step] => {
            let (a, b, step) = (num(a)?, num(b)?, num(step)?);
            if step == 0 || a > b {
                return Err(format!("bad budget range {s:?}"));
            }
            Ok((a..=b).step_by(step).collect())
        }
        _ => Err(format!(
            "bad budget grid {s:?}; use start:end:step or a comma list"
        )),
    }
}

fn parse_risk(t: &str) -> Result<f64, String> {
    let t = t.trim();
    let v = match t.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n
                .trim()
                .parse()
                .map_err(|e| format!("bad risk {t:?}: {e}"))?;
            let d: f64 = d
                .trim()
                .parse()
                .map_err(|e| format!("bad risk {t:?}: {e}"))?;
            n / d
        }
        None => t.parse().map_err(|e| format!("bad risk {t:?}: {e}"))?,
    };
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("risk {t:?} is outside (0, 1]"))
    }
}

fn parse_risks(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(parse_risk).collect()
}

fn parse_procs(s: &str) -> Result<Vec<Procedure>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<Procedure>().map_err(|e| e.to_string()))
        .collect()
}

fn load_population(args: &PopArgs) -> Result<Arc<Population>, Failure> {
    Population::load_csv(&args.pop, args.metric)
        .map(Arc::new)
        .map_err(|e| Failure::Config(e.to_string()))
}

fn experiment(
    pop: &PopArgs,
    budgets: Vec<usize>,
    risks: Vec<f64>,
    seed: u64,
    out: &Path,
) -> Result<ExperimentConfig, Failure> {
    Ok(ExperimentConfig {
        population: PopulationSource::Csv {
            path: pop.pop.clone(),
            metric: pop.metric,
        },
        budgets,
        risks,
        base_seed: seed,
        output_dir: Some(out.to_path_buf()),
        candidates: if pop.experts_only {
            CandidateScope::Experts
        } else {
            CandidateScope::All
        },
        ..ExperimentConfig::default()
    })
}

fn build(cfg: ExperimentConfig, pop: &PopArgs) -> Result<Experiment, Failure> {
    let population = load_population(pop)?;
    Experiment::with_population(cfg, population).map_err(|e| Failure::Config(e.to_string()))
}

fn gen(args: GenArgs) -> Result<(), Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            toml::from_str::<SyntheticConfig>(&text)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None => SyntheticConfig::default(),
    };
    if let Some(v) = args.n_users {
        cfg.n_users = v;
    }
    if let Some(v) = args.n_clusters {
        cfg.n_clusters = v;
    }
    if let Some(v) = args.cluster_spread {
        cfg.cluster_spread = v;
    }
    if let Some(v) = args.bbox {
        cfg.bbox = [v[0], v[1], v[2], v[3]];
    }
    if let Some(v) = args.expert_fraction {
        cfg.expert_fraction = v;
    }
    if let Some(v) = args.risk {
        cfg.uniform_risk = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    let pop = cfg.generate().map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
    }
    pop.save_csv(&args.out)
        .map_err(|e| Failure::Config(e.to_string()))?;
    info!("wrote {} users to {}", pop.len(), args.out.display());
    Ok(())
}

fn sweep(args: SweepArgs, by_risk: bool) -> Result<(), Failure> {
    let budgets = parse_budgets(&args.b).map_err(Failure::Config)?;
    let risks = parse_risks(&args.r).map_err(Failure::Config)?;
    let mut cfg = experiment(&args.pop, budgets, risks, args.seed, &args.out)?;
    cfg.procedures = parse_procs(&args.procs).map_err(Failure::Config)?;
    cfg.repeats = args.repeats;
    cfg.record_timings = args.timings;
    let exp = build(cfg, &args.pop)?;
    let rows = if by_risk {
        exp.run_risk_sweep()
    } else {
        exp.run_budget_sweep()
    }
    .map_err(|e| match e {
        ExperimentError::Config(m) => Failure::Config(m),
        e => Failure::Run(e),
    })?;
    let failed = rows.iter().filter(|r| !r.ok()).count();
    if failed > 0 {
        log::warn!(
            "{failed} of {} runs failed; see the error column",
            rows.len()
        );
    }
    Ok(())
}

fn trace(args: TraceArgs) -> Result<(), Failure> {
    let risk = parse_risk(&args.r).map_err(Failure::Config)?;
    let mut cfg = experiment(&args.pop, vec![args.b], vec![risk], args.seed, &args.out)?;
    cfg.procedures = vec![Procedure::SpGreedy];
    let exp = build(cfg, &args.pop)?;
    exp.run_obfuscation_trace()?;
    Ok(())
}

fn audit(args: AuditArgs) -> Result<(), Failure> {
    let risk = parse_risk(&args.r).map_err(Failure::Config)?;
    let mut cfg = experiment(&args.pop, vec![args.b], vec![risk], args.seed, &args.out)?;
    cfg.procedures = vec![args.procedure];
    let exp = build(cfg, &args.pop)?;
    let report = exp
        .run_audit(args.procedure, args.trials)
        .map_err(|e| match e {
            ExperimentError::Privacy(p)
                if !matches!(p, stochastic_privacy::privacy::PrivacyError::Select(_)) =>
            {
                Failure::Config(p.to_string())
            }
            e => Failure::Run(e),
        })?;
    let line = report.verdict();
    println!("{line}");
    if report.adjusted_pass {
        Ok(())
    } else {
        Err(Failure::AuditFail)
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("SP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::Config(format!(
            "SP_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Config(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with 2 on usage errors, which is reserved for selector
    // failures here.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = configure_threads().and_then(|()| match cli.command {
        Command::Gen(a) => gen(a),
        Command::SweepBudget(a) => sweep(a, false),
        Command::SweepRisk(a) => sweep(a, true),
        Command::TraceObfuscation(a) => trace(a),
        Command::Audit(a) => audit(a),
        Command::Plot(a) => emit_plots(&a.input, &a.out)
            .map(|_| ())
            .map_err(|e| match e {
                ExperimentError::Plot(_) => Failure::Config(e.to_string()),
                e => Failure::Run(e),
            }),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(Failure::AuditFail) => ExitCode::from(EXIT_AUDIT_FAIL),
    }
}
