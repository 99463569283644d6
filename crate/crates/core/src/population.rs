//! User pool, distance geometry and population sources.
//!
//! A [`Population`] is immutable once built. Users are addressed internally by
//! their position in the pool (`usize`); the opaque string id is kept for I/O
//! and for tie-breaking, which everywhere follows ascending id order.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;
use thiserror::Error;

/// Mean Earth radius used by the haversine metric, in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

const CSV_COLUMNS: [&str; 6] = ["id", "x", "y", "privacy_risk", "cost", "expert"];

#[derive(Debug, Error)]
pub enum PopulationError {
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("duplicate user id `{0}`")]
    DuplicateId(String),
    #[error("user `{id}`: {message}")]
    Invariant { id: String, message: String },
    #[error("unknown user id `{0}`")]
    UnknownId(String),
    #[error("no user satisfies the expert rule")]
    EmptyExpertSet,
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PopulationError>;

/// Distance metric over user coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum Metric {
    /// Planar distance in the units of the coordinates.
    #[default]
    Euclidean,
    /// Great-circle distance in kilometers; `x` is longitude and `y` is
    /// latitude, both in degrees.
    Haversine,
}

impl Metric {
    #[inline]
    pub fn distance(self, a: [f64; 2], b: [f64; 2]) -> f64 {
        match self {
            Metric::Euclidean => {
                let dx = a[0] - b[0];
                let dy = a[1] - b[1];
                (dx * dx + dy * dy).sqrt()
            }
            Metric::Haversine => haversine_km(a, b),
        }
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" => Ok(Metric::Euclidean),
            "haversine" => Ok(Metric::Haversine),
            other => Err(format!(
                "unknown metric `{other}` (expected euclidean or haversine)"
            )),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Haversine => "haversine",
        })
    }
}

fn haversine_km(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (lon1, lat1) = (a[0].to_radians(), a[1].to_radians());
    let (lon2, lat2) = (b[0].to_radians(), b[1].to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt().asin()
}

#[derive(Debug, Clone, PartialEq)]
pub struct User {
    pub id: String,
    pub coords: [f64; 2],
    /// Promised upper bound on the probability that this user is ever sampled.
    pub privacy_risk: f64,
    /// Budget cost of selecting this user.
    pub cost: f64,
    pub is_expert: bool,
    pub meta: BTreeMap<String, String>,
}

impl User {
    pub fn new(id: impl Into<String>, x: f64, y: f64) -> Self {
        Self {
            id: id.into(),
            coords: [x, y],
            privacy_risk: 1.0,
            cost: 1.0,
            is_expert: false,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_risk(mut self, risk: f64) -> Self {
        self.privacy_risk = risk;
        self
    }

    pub fn expert(mut self, is_expert: bool) -> Self {
        self.is_expert = is_expert;
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    fn validate(&self) -> Result<()> {
        let fail = |message: String| {
            Err(PopulationError::Invariant {
                id: self.id.clone(),
                message,
            })
        };
        if !(self.privacy_risk > 0.0 && self.privacy_risk <= 1.0) {
            return fail(format!("privacy_risk {} outside (0, 1]", self.privacy_risk));
        }
        if !(self.cost > 0.0 && self.cost.is_finite()) {
            return fail(format!("cost {} is not positive", self.cost));
        }
        if !self.coords.iter().all(|c| c.is_finite()) {
            return fail("coordinates must be finite".to_string());
        }
        Ok(())
    }
}

/// Immutable pool of users plus the metric used to compare them.
#[derive(Debug, Clone)]
pub struct Population {
    users: Vec<User>,
    points: Vec<[f64; 2]>,
    metric: Metric,
    experts: Vec<usize>,
    by_id: HashMap<String, usize>,
    id_rank: Vec<usize>,
}

impl Population {
    pub fn new(users: Vec<User>, metric: Metric) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(users.len());
        for (ix, user) in users.iter().enumerate() {
            user.validate()?;
            if by_id.insert(user.id.clone(), ix).is_some() {
                return Err(PopulationError::DuplicateId(user.id.clone()));
            }
        }
        let mut order: Vec<usize> = (0..users.len()).collect();
        order.sort_by(|&a, &b| users[a].id.cmp(&users[b].id));
        let mut id_rank = vec![0; users.len()];
        for (rank, ix) in order.into_iter().enumerate() {
            id_rank[ix] = rank;
        }
        let experts = users
            .iter()
            .enumerate()
            .filter(|(_, u)| u.is_expert)
            .map(|(ix, _)| ix)
            .collect();
        let points = users.iter().map(|u| u.coords).collect();
        Ok(Self {
            users,
            points,
            metric,
            experts,
            by_id,
            id_rank,
        })
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn users(&self) -> &[User] {
        &self.users
    }

    pub fn user(&self, ix: usize) -> &User {
        &self.users[ix]
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    /// Indices of expert users, in pool order.
    pub fn experts(&self) -> &[usize] {
        &self.experts
    }

    pub fn id(&self, ix: usize) -> &str {
        &self.users[ix].id
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.by_id
            .get(id)
            .copied()
            .ok_or_else(|| PopulationError::UnknownId(id.to_string()))
    }

    /// Position of the user in ascending id order; used for tie-breaking.
    #[inline]
    pub fn id_rank(&self, ix: usize) -> usize {
        self.id_rank[ix]
    }

    pub fn id_ranks(&self) -> &[usize] {
        &self.id_rank
    }

    #[inline]
    pub fn coords(&self, ix: usize) -> [f64; 2] {
        self.points[ix]
    }

    /// All coordinates, indexed like `users()`.
    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    #[inline]
    pub fn distance_ix(&self, a: usize, b: usize) -> f64 {
        self.metric.distance(self.points[a], self.points[b])
    }

    pub fn distance(&self, a: &str, b: &str) -> Result<f64> {
        Ok(self.distance_ix(self.index_of(a)?, self.index_of(b)?))
    }

    /// Axis-aligned bounding box as `[min_x, max_x, min_y, max_y]`.
    pub fn bbox(&self) -> Option<[f64; 4]> {
        let first = self.users.first()?.coords;
        let mut bb = [first[0], first[0], first[1], first[1]];
        for u in &self.users[1..] {
            bb[0] = bb[0].min(u.coords[0]);
            bb[1] = bb[1].max(u.coords[0]);
            bb[2] = bb[2].min(u.coords[1]);
            bb[3] = bb[3].max(u.coords[1]);
        }
        Some(bb)
    }

    /// Returns a copy whose expert cohort is exactly the users matching `rule`.
    pub fn mark_experts<F>(&self, rule: F) -> Result<Population>
    where
        F: Fn(&User) -> bool,
    {
        let users: Vec<User> = self
            .users
            .iter()
            .map(|u| {
                let mut u = u.clone();
                u.is_expert = rule(&u);
                u
            })
            .collect();
        if !users.iter().any(|u| u.is_expert) {
            return Err(PopulationError::EmptyExpertSet);
        }
        Population::new(users, self.metric)
    }

    pub fn from_csv_reader<R: Read>(reader: R, metric: Metric) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut col = [0usize; 6];
        for (slot, name) in col.iter_mut().zip(CSV_COLUMNS) {
            *slot = headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| PopulationError::MissingColumn(name.to_string()))?;
        }
        let extra: Vec<(usize, String)> = headers
            .iter()
            .enumerate()
            .filter(|(_, h)| !CSV_COLUMNS.contains(h))
            .map(|(i, h)| (i, h.to_string()))
            .collect();

        let mut users = Vec::new();
        let mut seen = HashMap::new();
        for (n, record) in rdr.records().enumerate() {
            let row = n + 1;
            let record = record.map_err(|e| PopulationError::Parse {
                row,
                message: e.to_string(),
            })?;
            let field = |i: usize| record.get(col[i]).unwrap_or("");
            let num = |i: usize| -> Result<f64> {
                field(i).parse::<f64>().map_err(|_| PopulationError::Parse {
                    row,
                    message: format!(
                        "column `{}`: `{}` is not a number",
                        CSV_COLUMNS[i],
                        field(i)
                    ),
                })
            };
            let is_expert = match field(5) {
                "0" => false,
                "1" => true,
                other => {
                    return Err(PopulationError::Parse {
                        row,
                        message: format!("column `expert`: `{other}` is not 0 or 1"),
                    })
                }
            };
            let user = User {
                id: field(0).to_string(),
                coords: [num(1)?, num(2)?],
                privacy_risk: num(3)?,
                cost: num(4)?,
                is_expert,
                meta: extra
                    .iter()
                    .map(|(i, h)| (h.clone(), record.get(*i).unwrap_or("").to_string()))
                    .collect(),
            };
            if user.id.is_empty() {
                return Err(PopulationError::Parse {
                    row,
                    message: "empty id".to_string(),
                });
            }
            user.validate().map_err(|e| PopulationError::Parse {
                row,
                message: e.to_string(),
            })?;
            if seen.insert(user.id.clone(), row).is_some() {
                return Err(PopulationError::DuplicateId(user.id));
            }
            users.push(user);
        }
        Population::new(users, metric)
    }

    pub fn load_csv(path: impl AsRef<Path>, metric: Metric) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(std::io::BufReader::new(file), metric)
    }

    /// Writes the population in the ingestion schema. Meta keys are emitted as
    /// extra columns (union over users, sorted); floats use shortest
    /// round-trip formatting so a save/load cycle is lossless.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut meta_keys: Vec<&String> = self.users.iter().flat_map(|u| u.meta.keys()).collect();
        meta_keys.sort();
        meta_keys.dedup();

        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
        header.extend(meta_keys.iter().map(|k| k.as_str()));
        wtr.write_record(&header)?;
        for u in &self.users {
            let mut rec = vec![
                u.id.clone(),
                u.coords[0].to_string(),
                u.coords[1].to_string(),
                u.privacy_risk.to_string(),
                u.cost.to_string(),
                if u.is_expert { "1" } else { "0" }.to_string(),
            ];
            rec.extend(
                meta_keys
                    .iter()
                    .map(|k| u.meta.get(*k).cloned().unwrap_or_default()),
            );
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Parameters of the clustered synthetic population generator.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_clusters: usize,
    pub cluster_spread: f64,
    /// `[min_x, max_x, min_y, max_y]`
    pub bbox: [f64; 4],
    pub expert_fraction: f64,
    pub uniform_risk: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 10_000,
            n_clusters: 20,
            cluster_spread: 8.0,
            bbox: [0.0, 100.0, 0.0, 100.0],
            expert_fraction: 0.2,
            uniform_risk: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// The desk-scale population used by the experiment defaults.
    pub fn standard(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PopulationError::Config(m.to_string()));
        if self.n_users == 0 {
            return bad("n_users must be positive");
        }
        if self.n_clusters == 0 {
            return bad("n_clusters must be positive");
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return bad("cluster_spread must be a non-negative finite number");
        }
        let [x0, x1, y0, y1] = self.bbox;
        if !self.bbox.iter().all(|v| v.is_finite()) || x0 > x1 || y0 > y1 {
            return bad("bbox must be [min_x, max_x, min_y, max_y] with min <= max");
        }
        if !(self.expert_fraction > 0.0 && self.expert_fraction <= 1.0) {
            return bad("expert_fraction must lie in (0, 1]");
        }
        if self.expert_count() == 0 {
            return bad("expert_fraction * n_users rounds to zero experts");
        }
        if !(self.uniform_risk > 0.0 && self.uniform_risk <= 1.0) {
            return bad("uniform_risk must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn expert_count(&self) -> usize {
        (self.expert_fraction * self.n_users as f64).round() as usize
    }

    /// Clustered population: centers uniform in the bbox, users scattered
    /// around a uniformly chosen center with isotropic Gaussian noise.
    pub fn generate(&self) -> Result<Population> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let [x0, x1, y0, y1] = self.bbox;
        let centers: Vec<[f64; 2]> = (0..self.n_clusters)
            .map(|_| [uniform(&mut rng, x0, x1), uniform(&mut rng, y0, y1)])
            .collect();
        let noise = Normal::new(0.0, self.cluster_spread)
            .map_err(|e| PopulationError::Config(e.to_string()))?;
        let width = (self.n_users - 1).to_string().len();

        let mut users: Vec<User> = (0..self.n_users)
            .map(|i| {
                let c = rng.random_range(0..self.n_clusters);
                let [cx, cy] = centers[c];
                let x = cx + noise.sample(&mut rng);
                let y = cy + noise.sample(&mut rng);
                User::new(format!("u{i:0width$}"), x, y)
                    .with_risk(self.uniform_risk)
                    .with_meta("cluster", c.to_string())
            })
            .collect();
        for ix in index::sample(&mut rng, self.n_users, self.expert_count()) {
            users[ix].is_expert = true;
        }
        Population::new(users, Metric::Euclidean)
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}
