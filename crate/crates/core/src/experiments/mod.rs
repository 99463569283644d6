//! Experiment harness: budget and risk sweeps, obfuscation traces, privacy
//! audits and SVG reports.
//!
//! Sweep cells run in parallel with seeds derived from `(base_seed, repeat, B,
//! r)`; rows are sorted canonically before they are written, so output bytes
//! do not depend on the worker count. Wall-clock timings are only written
//! when explicitly requested.

pub mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::population::{Metric, Population, PopulationError, SyntheticConfig};
use crate::privacy::{audit_frequency, AuditReport, PrivacyError};
use crate::seed::derive_seed;
use crate::selectors::{
    check_obfuscation_structure, obfuscation_size, privacy_capacity, Procedure, SelectError,
    SelectionProblem,
};
use crate::utility::{CoverageUtility, UtilityError};

pub use plot::{emit_plots, PlotError};

pub const BUDGET_SWEEP_CSV: &str = "budget_sweep.csv";
pub const BUDGET_SUMMARY_CSV: &str = "budget_sweep_summary.csv";
pub const RISK_SWEEP_CSV: &str = "risk_sweep.csv";
pub const RISK_SUMMARY_CSV: &str = "risk_sweep_summary.csv";
pub const TRACE_CSV: &str = "obfuscation_trace.csv";

/// Window of the moving average in obfuscation traces.
pub const TRACE_WINDOW: usize = 10;

/// Repeats below this count still run but make medians noisy.
pub const MIN_MEDIAN_REPEATS: usize = 20;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Population(#[from] PopulationError),
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Process exit code: 2 for selector failures at run time, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            ExperimentError::Select(_) => 2,
            ExperimentError::Privacy(PrivacyError::Select(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PopulationSource {
    Synthetic(SyntheticConfig),
    Csv { path: PathBuf, metric: Metric },
}

/// Which users may be selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CandidateScope {
    /// Every user in the pool.
    #[default]
    All,
    /// Only the expert cohort.
    Experts,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub population: PopulationSource,
    pub procedures: Vec<Procedure>,
    pub budgets: Vec<usize>,
    pub risks: Vec<f64>,
    pub repeats: usize,
    pub base_seed: u64,
    pub output_dir: Option<PathBuf>,
    pub candidates: CandidateScope,
    /// Adds a `runtime_ms` column to sweep CSVs (makes them non-reproducible).
    pub record_timings: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            population: PopulationSource::Synthetic(SyntheticConfig::standard(0)),
            procedures: vec![
                Procedure::Random,
                Procedure::Greedy,
                Procedure::RandGreedy,
                Procedure::SpGreedy,
            ],
            budgets: (1..=10).map(|i| i * 5).collect(),
            risks: vec![1.0 / 10.0, 1.0 / 20.0, 1.0 / 50.0, 1.0 / 100.0, 1.0 / 200.0],
            repeats: MIN_MEDIAN_REPEATS,
            base_seed: 0,
            output_dir: None,
            candidates: CandidateScope::All,
            record_timings: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub procedure: String,
    pub budget: usize,
    pub risk: f64,
    pub repeat: usize,
    pub seed: u64,
    pub utility: Option<f64>,
    pub max_obfuscation_radius: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub runtime_ms: f64,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub procedure: String,
    pub budget: usize,
    pub risk: f64,
    pub median_utility: f64,
    pub runs: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub greedy_pick: String,
    pub final_pick: String,
    pub marginal_of_greedy_pick: f64,
    pub marginal_of_final_pick: f64,
    pub absolute_loss: f64,
    pub relative_loss_pct: f64,
    pub moving_avg_10: f64,
    pub obfuscation_radius: f64,
}

/// A loaded population plus the utility shared by every run.
#[derive(Debug, Clone)]
pub struct Experiment {
    cfg: ExperimentConfig,
    utility: CoverageUtility,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let pop = match &cfg.population {
            PopulationSource::Synthetic(s) => s.generate()?,
            PopulationSource::Csv { path, metric } => Population::load_csv(path, *metric)?,
        };
        Self::with_population(cfg, Arc::new(pop))
    }

    pub fn with_population(cfg: ExperimentConfig, pop: Arc<Population>) -> Result<Self> {
        let utility = match cfg.candidates {
            CandidateScope::All => CoverageUtility::all_candidates(pop)?,
            CandidateScope::Experts => CoverageUtility::new(pop)?,
        };
        let exp = Self { cfg, utility };
        exp.validate()?;
        Ok(exp)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn utility(&self) -> &CoverageUtility {
        &self.utility
    }

    pub fn population(&self) -> &Population {
        self.utility.population()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        let cfg = &self.cfg;
        if cfg.procedures.is_empty() {
            return bad("no procedures given".into());
        }
        if cfg.budgets.is_empty() || cfg.budgets.contains(&0) {
            return bad("budgets must be a nonempty list of positive integers".into());
        }
        if cfg.risks.is_empty() || cfg.risks.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return bad("risks must be a nonempty list of values in (0, 1]".into());
        }
        if cfg.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        let n = self.population().len();
        let pool = self.utility.candidates().len();
        for &b in &cfg.budgets {
            if b > pool {
                return bad(format!("budget {b} exceeds the candidate pool of {pool}"));
            }
            for &r in &cfg.risks {
                let cap = privacy_capacity(n, r);
                if b > cap {
                    return bad(format!(
                        "budget {b} exceeds floor(|W| * r) = {cap} at r = {r}"
                    ));
                }
            }
        }
        Ok(())
    }

    fn problem(&self, budget: usize, risk: f64, seed: u64) -> Result<SelectionProblem> {
        Ok(SelectionProblem::new(&self.utility, budget, risk, seed)?)
    }

    fn cell_seed(&self, budget: usize, risk: f64, repeat: usize) -> u64 {
        derive_seed(
            self.cfg.base_seed,
            &[repeat as u64, budget as u64, risk.to_bits()],
        )
    }

    fn run_cell(&self, procedure: Procedure, budget: usize, risk: f64, repeat: usize) -> SweepRow {
        let seed = self.cell_seed(budget, risk, repeat);
        let start = Instant::now();
        let outcome = self.problem(budget, risk, seed).and_then(|p| {
            let result = procedure.run(&p)?;
            if procedure == Procedure::SpGreedy {
                check_obfuscation_structure(&result, obfuscation_size(risk))?;
            }
            Ok(result)
        });
        let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
        let (utility, radius, error) = match outcome {
            Ok(r) => (Some(r.utility), r.max_obfuscation_radius(), None),
            Err(e) => (None, None, Some(e.to_string())),
        };
        SweepRow {
            procedure: procedure.name().to_string(),
            budget,
            risk,
            repeat,
            seed,
            utility,
            max_obfuscation_radius: radius,
            error,
            runtime_ms,
        }
    }

    fn sweep(&self, budgets: &[usize], risks: &[f64]) -> Vec<SweepRow> {
        if self.cfg.repeats < MIN_MEDIAN_REPEATS {
            warn!(
                "{} repeats per cell; medians are noisy below {MIN_MEDIAN_REPEATS}",
                self.cfg.repeats
            );
        }
        let mut procedures = self.cfg.procedures.clone();
        procedures.sort();
        procedures.dedup();
        // Seed-independent procedures run once per cell; later repeats copy
        // the result under their own repeat index and seed.
        let mut cells = Vec::new();
        for &p in &procedures {
            for &b in budgets {
                for &r in risks {
                    let runs = if is_seed_independent(p) {
                        1
                    } else {
                        self.cfg.repeats
                    };
                    for rep in 0..runs {
                        cells.push((p, b, r, rep));
                    }
                }
            }
        }
        let mut rows: Vec<(Procedure, SweepRow)> = cells
            .into_par_iter()
            .map(|(p, b, r, rep)| (p, self.run_cell(p, b, r, rep)))
            .collect();
        let copies: Vec<(Procedure, SweepRow)> = rows
            .iter()
            .filter(|(p, _)| is_seed_independent(*p))
            .flat_map(|(p, row)| {
                (1..self.cfg.repeats).map(move |rep| {
                    let seed = self.cell_seed(row.budget, row.risk, rep);
                    (
                        *p,
                        SweepRow {
                            repeat: rep,
                            seed,
                            ..row.clone()
                        },
                    )
                })
            })
            .collect();
        rows.extend(copies);
        rows.sort_by(|(pa, a), (pb, b)| {
            pa.cmp(pb)
                .then(a.budget.cmp(&b.budget))
                .then(a.risk.total_cmp(&b.risk))
                .then(a.repeat.cmp(&b.repeat))
        });
        rows.into_iter().map(|(_, r)| r).collect()
    }

    /// One row per procedure x budget x repeat at the single configured risk.
    pub fn run_budget_sweep(&self) -> Result<Vec<SweepRow>> {
        let [risk] = self.cfg.risks[..] else {
            return Err(ExperimentError::Config(
                "a budget sweep needs exactly one risk value".into(),
            ));
        };
        let rows = self.sweep(&self.cfg.budgets, &[risk]);
        self.write_sweep(&rows, BUDGET_SWEEP_CSV, BUDGET_SUMMARY_CSV)?;
        Ok(rows)
    }

    /// One row per procedure x risk x repeat at the single configured budget.
    pub fn run_risk_sweep(&self) -> Result<Vec<SweepRow>> {
        let [budget] = self.cfg.budgets[..] else {
            return Err(ExperimentError::Config(
                "a risk sweep needs exactly one budget".into(),
            ));
        };
        let rows = self.sweep(&[budget], &self.cfg.risks);
        self.write_sweep(&rows, RISK_SWEEP_CSV, RISK_SUMMARY_CSV)?;
        Ok(rows)
    }

    fn write_sweep(&self, rows: &[SweepRow], rows_file: &str, summary_file: &str) -> Result<()> {
        let Some(dir) = &self.cfg.output_dir else {
            return Ok(());
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(rows_file);
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        write_rows(file, rows, self.cfg.record_timings)?;
        write_csv(&dir.join(summary_file), &summarize(rows))
    }

    /// Per-iteration obfuscation loss of one `sp_greedy` run at the first
    /// configured budget and risk, seeded with the base seed.
    pub fn run_obfuscation_trace(&self) -> Result<Vec<TraceRow>> {
        let (budget, risk) = match (&self.cfg.budgets[..], &self.cfg.risks[..]) {
            ([b], [r]) => (*b, *r),
            _ => {
                return Err(ExperimentError::Config(
                    "an obfuscation trace needs exactly one budget and one risk".into(),
                ))
            }
        };
        let p = self.problem(budget, risk, self.cfg.base_seed)?;
        let result = crate::selectors::select_sp_greedy(&p)?;
        check_obfuscation_structure(&result, obfuscation_size(risk))?;
        let pop = self.population();
        let mut rows: Vec<TraceRow> = result
            .log
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                let loss = rec.marginal_of_greedy_pick - rec.marginal_of_final_pick;
                TraceRow {
                    iteration: i + 1,
                    greedy_pick: pop.id(rec.greedy_pick).to_string(),
                    final_pick: pop.id(rec.final_pick).to_string(),
                    marginal_of_greedy_pick: rec.marginal_of_greedy_pick,
                    marginal_of_final_pick: rec.marginal_of_final_pick,
                    absolute_loss: loss,
                    relative_loss_pct: relative_loss_pct(
                        rec.marginal_of_greedy_pick,
                        rec.marginal_of_final_pick,
                    ),
                    moving_avg_10: 0.0,
                    obfuscation_radius: rec.obfuscation_radius,
                }
            })
            .collect();
        let rel: Vec<f64> = rows.iter().map(|r| r.relative_loss_pct).collect();
        for (row, avg) in rows.iter_mut().zip(trailing_mean(&rel, TRACE_WINDOW)) {
            row.moving_avg_10 = avg;
        }
        if let Some(dir) = &self.cfg.output_dir {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            write_csv(&dir.join(TRACE_CSV), &rows)?;
        }
        Ok(rows)
    }

    /// Monte-Carlo frequency audit of `procedure` at the first configured
    /// budget and risk. Writes `audit_<procedure>.csv` and
    /// `audit_<procedure>_verdict.txt` when an output directory is set.
    pub fn run_audit(&self, procedure: Procedure, trials: usize) -> Result<AuditReport> {
        let (budget, risk) = match (&self.cfg.budgets[..], &self.cfg.risks[..]) {
            ([b], [r]) => (*b, *r),
            _ => {
                return Err(ExperimentError::Config(
                    "an audit needs exactly one budget and one risk".into(),
                ))
            }
        };
        let p = self.problem(budget, risk, self.cfg.base_seed)?;
        let report = audit_frequency(procedure, &p, trials, self.cfg.base_seed)?;
        if let Some(dir) = &self.cfg.output_dir {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(format!("audit_{procedure}.csv"));
            let file = fs::File::create(&path).map_err(io_err(&path))?;
            report.write_csv(std::io::BufWriter::new(file))?;
            let path = dir.join(format!("audit_{procedure}_verdict.txt"));
            fs::write(&path, format!("{}\n", report.verdict())).map_err(io_err(&path))?;
        }
        Ok(report)
    }
}

fn is_seed_independent(p: Procedure) -> bool {
    matches!(p, Procedure::Greedy | Procedure::Opt)
}

/// `100 * (greedy - final) / greedy`, or 0 when the greedy marginal is 0.
pub fn relative_loss_pct(greedy: f64, fin: f64) -> f64 {
    if greedy > 0.0 {
        100.0 * (greedy - fin) / greedy
    } else {
        0.0
    }
}

/// Mean of the last `window` values up to and including each position.
pub fn trailing_mean(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let w = &values[lo..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 0 {
        (values[mid - 1] + values[mid]) / 2.0
    } else {
        values[mid]
    })
}

/// Median utility per (procedure, budget, risk), in first-seen row order.
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<usize, (SummaryRow, Vec<f64>)> = BTreeMap::new();
    let mut keys: Vec<(String, usize, u64)> = Vec::new();
    for row in rows {
        let key = (row.procedure.clone(), row.budget, row.risk.to_bits());
        let slot = match keys.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                keys.push(key);
                keys.len() - 1
            }
        };
        let entry = groups.entry(slot).or_insert_with(|| {
            (
                SummaryRow {
                    procedure: row.procedure.clone(),
                    budget: row.budget,
                    risk: row.risk,
                    median_utility: f64::NAN,
                    runs: 0,
                    failed: 0,
                },
                Vec::new(),
            )
        });
        entry.0.runs += 1;
        match row.utility {
            Some(u) if row.ok() => entry.1.push(u),
            _ => entry.0.failed += 1,
        }
    }
    groups
        .into_values()
        .map(|(mut s, mut values)| {
            s.median_utility = median(&mut values).unwrap_or(f64::NAN);
            s
        })
        .collect()
}

/// Looks up the median for one cell of a summary table.
pub fn summary_median(
    summary: &[SummaryRow],
    procedure: Procedure,
    budget: usize,
    risk: f64,
) -> Option<f64> {
    summary
        .iter()
        .find(|s| s.procedure == procedure.name() && s.budget == budget && s.risk == risk)
        .map(|s| s.median_utility)
}

fn write_rows<W: std::io::Write>(writer: W, rows: &[SweepRow], timings: bool) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![
        "procedure",
        "budget",
        "risk",
        "repeat",
        "seed",
        "utility",
        "max_obfuscation_radius",
        "error",
    ];
    if timings {
        header.push("runtime_ms");
    }
    wtr.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec = vec![
            r.procedure.clone(),
            r.budget.to_string(),
            r.risk.to_string(),
            r.repeat.to_string(),
            r.seed.to_string(),
            opt(r.utility),
            opt(r.max_obfuscation_radius),
            r.error.clone().unwrap_or_default(),
        ];
        if timings {
            rec.push(format!("{:.3}", r.runtime_ms));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut wtr = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(io_err(path))?;
    Ok(())
}

pub(crate) fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn read_sweep_rows(path: &Path) -> Result<Vec<SweepRow>> {
    read_csv(path)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    read_csv(path)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    read_csv(path)
}
