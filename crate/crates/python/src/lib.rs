//! Python bindings. Users are addressed by id string on the Python side.

use std::sync::Arc;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use stochastic_privacy::population::{Metric, Population as CorePopulation, SyntheticConfig};
use stochastic_privacy::privacy::{self, Phase};
use stochastic_privacy::selectors::{Procedure, SelectionProblem};
use stochastic_privacy::utility::CoverageUtility as CoreUtility;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(frozen)]
struct Population {
    inner: Arc<CorePopulation>,
}

#[pymethods]
impl Population {
    /// Clustered synthetic population.
    #[staticmethod]
    #[pyo3(signature = (n_users=None, n_clusters=None, cluster_spread=None, expert_fraction=None, risk=None, seed=0))]
    fn generate(
        n_users: Option<usize>,
        n_clusters: Option<usize>,
        cluster_spread: Option<f64>,
        expert_fraction: Option<f64>,
        risk: Option<f64>,
        seed: u64,
    ) -> PyResult<Self> {
        let d = SyntheticConfig::standard(seed);
        let cfg = SyntheticConfig {
            n_users: n_users.unwrap_or(d.n_users),
            n_clusters: n_clusters.unwrap_or(d.n_clusters),
            cluster_spread: cluster_spread.unwrap_or(d.cluster_spread),
            expert_fraction: expert_fraction.unwrap_or(d.expert_fraction),
            uniform_risk: risk.unwrap_or(d.uniform_risk),
            ..d
        };
        let inner = cfg.generate().map_err(value_err)?;
        Ok(Self {
            inner: Arc::new(inner),
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, metric="euclidean"))]
    fn load_csv(path: &str, metric: &str) -> PyResult<Self> {
        let metric: Metric = metric.parse().map_err(value_err)?;
        let inner = CorePopulation::load_csv(path, metric).map_err(value_err)?;
        Ok(Self {
            inner: Arc::new(inner),
        })
    }

    fn save_csv(&self, path: &str) -> PyResult<()> {
        self.inner.save_csv(path).map_err(value_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.users().iter().map(|u| u.id.clone()).collect()
    }

    fn experts(&self) -> Vec<String> {
        self.inner
            .experts()
            .iter()
            .map(|&i| self.inner.id(i).to_string())
            .collect()
    }

    fn coords(&self, id: &str) -> PyResult<(f64, f64)> {
        let ix = self
            .inner
            .index_of(id)
            .map_err(|e| PyKeyError::new_err(e.to_string()))?;
        let [x, y] = self.inner.coords(ix);
        Ok((x, y))
    }

    fn distance(&self, a: &str, b: &str) -> PyResult<f64> {
        self.inner
            .distance(a, b)
            .map_err(|e| PyKeyError::new_err(e.to_string()))
    }
}

#[pyclass(frozen)]
struct CoverageUtility {
    inner: CoreUtility,
}

impl CoverageUtility {
    fn indices(&self, ids: &[String]) -> PyResult<Vec<usize>> {
        let pop = self.inner.population();
        ids.iter()
            .map(|id| {
                pop.index_of(id)
                    .map_err(|e| PyKeyError::new_err(e.to_string()))
            })
            .collect()
    }
}

#[pymethods]
impl CoverageUtility {
    /// Candidates are the experts when `experts_only`, otherwise everyone.
    #[new]
    #[pyo3(signature = (population, experts_only=false))]
    fn new(population: &Population, experts_only: bool) -> PyResult<Self> {
        let pop = population.inner.clone();
        let inner = if experts_only {
            CoreUtility::new(pop)
        } else {
            CoreUtility::all_candidates(pop)
        }
        .map_err(value_err)?;
        Ok(Self { inner })
    }

    fn candidates(&self) -> Vec<String> {
        let pop = self.inner.population();
        self.inner
            .candidates()
            .iter()
            .map(|&i| pop.id(i).to_string())
            .collect()
    }

    fn evaluate(&self, ids: Vec<String>) -> PyResult<f64> {
        self.inner.evaluate(&self.indices(&ids)?).map_err(value_err)
    }

    fn marginal_gain(&self, ids: Vec<String>, id: String) -> PyResult<f64> {
        let set = self.indices(&ids)?;
        let w = self.indices(std::slice::from_ref(&id))?[0];
        self.inner.marginal_gain(&set, w).map_err(value_err)
    }
}

/// Runs one procedure and returns `(selected ids, utility)`.
#[pyfunction]
#[pyo3(signature = (utility, procedure, budget, risk, seed=0))]
fn select(
    utility: &CoverageUtility,
    procedure: &str,
    budget: usize,
    risk: f64,
    seed: u64,
) -> PyResult<(Vec<String>, f64)> {
    let proc: Procedure = procedure.parse().map_err(value_err)?;
    let p = SelectionProblem::new(&utility.inner, budget, risk, seed).map_err(value_err)?;
    let r = proc
        .run(&p)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let pop = utility.inner.population();
    Ok((
        r.selected_ids(pop).into_iter().map(String::from).collect(),
        r.utility,
    ))
}

#[pyclass(frozen, get_all)]
struct AuditReport {
    verdict: String,
    passed: bool,
    raw_passed: bool,
    worst_user: String,
    worst_frequency: f64,
    bound: f64,
    raw_bound: f64,
    trials: usize,
}

/// Monte-Carlo selection-frequency audit.
#[pyfunction]
#[pyo3(signature = (utility, procedure, budget, risk, trials=5000, seed=0))]
fn audit(
    utility: &CoverageUtility,
    procedure: &str,
    budget: usize,
    risk: f64,
    trials: usize,
    seed: u64,
) -> PyResult<AuditReport> {
    let proc: Procedure = procedure.parse().map_err(value_err)?;
    let p = SelectionProblem::new(&utility.inner, budget, risk, 0).map_err(value_err)?;
    let r = privacy::audit_frequency(proc, &p, trials, seed)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(AuditReport {
        verdict: r.verdict(),
        passed: r.adjusted_pass,
        raw_passed: r.pass,
        worst_user: r.worst_user,
        worst_frequency: r.worst_frequency,
        bound: r.adjusted_bound,
        raw_bound: r.ci_bound,
        trials: r.trials,
    })
}

#[pyclass]
#[derive(Default)]
struct PrivacyLedger {
    inner: privacy::PrivacyLedger,
}

fn phase(name: &str) -> PyResult<Phase> {
    match name {
        "explorative" => Ok(Phase::Explorative),
        "selective" => Ok(Phase::Selective),
        other => Err(PyValueError::new_err(format!(
            "unknown phase `{other}`, expected explorative or selective"
        ))),
    }
}

#[pymethods]
impl PrivacyLedger {
    #[new]
    #[pyo3(signature = (population=None))]
    fn new(population: Option<&Population>) -> Self {
        let inner = match population {
            Some(p) => privacy::PrivacyLedger::from_population(&p.inner),
            None => privacy::PrivacyLedger::new(),
        };
        Self { inner }
    }

    fn register(&mut self, id: &str, promised: f64) -> PyResult<()> {
        self.inner.register(id, promised).map_err(value_err)
    }

    fn record_exposure(&mut self, id: &str, phase_name: &str, prob: f64) -> PyResult<()> {
        self.inner
            .record_exposure(id, phase(phase_name)?, prob)
            .map_err(value_err)
    }

    fn combined(&self, id: &str) -> PyResult<f64> {
        self.inner
            .combined(id)
            .map_err(|e| PyKeyError::new_err(e.to_string()))
    }

    fn remaining_budget(&self, id: &str) -> PyResult<f64> {
        self.inner
            .record(id)
            .map(|r| r.remaining_budget())
            .ok_or_else(|| PyKeyError::new_err(id.to_string()))
    }

    fn check_guarantee(&self) -> Vec<String> {
        self.inner.check_guarantee()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pymodule]
fn stochprivacy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Population>()?;
    m.add_class::<CoverageUtility>()?;
    m.add_class::<AuditReport>()?;
    m.add_class::<PrivacyLedger>()?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    Ok(())
}
