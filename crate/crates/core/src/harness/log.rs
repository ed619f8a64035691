//! Run logs: per-step records, region and uncertainty snapshots, outcome.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{GeometryError, Polygon};

/// How a query point was chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum QueryChoice {
    /// The cost-optimal safe point was already independent of past queries.
    Optimal,
    /// Blended with basis vector `index` of the safe region's span.
    Blended { index: usize },
    /// Offline plan built from the initial safe region.
    Planned { index: usize },
    /// Random exploration direction, after `resamples` rejected draws.
    Explore { resamples: usize },
    /// Minimum-cost point with no independence requirement.
    Cheapest,
}

impl FromStr for QueryChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let num = |v: &str| v.parse::<usize>().map_err(|e| format!("query choice {s:?}: {e}"));
        Ok(match s.split_once(':') {
            None if s == "optimal" => QueryChoice::Optimal,
            None if s == "cheapest" => QueryChoice::Cheapest,
            Some(("blended", v)) => QueryChoice::Blended { index: num(v)? },
            Some(("planned", v)) => QueryChoice::Planned { index: num(v)? },
            Some(("explore", v)) => QueryChoice::Explore { resamples: num(v)? },
            _ => return Err(format!("unknown query choice {s:?}")),
        })
    }
}

impl fmt::Display for QueryChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryChoice::Optimal => write!(f, "optimal"),
            QueryChoice::Blended { index } => write!(f, "blended:{index}"),
            QueryChoice::Planned { index } => write!(f, "planned:{index}"),
            QueryChoice::Explore { resamples } => write!(f, "explore:{resamples}"),
            QueryChoice::Cheapest => write!(f, "cheapest"),
        }
    }
}

/// One measurement. `observed` holds `y` for one-step learners and the
/// successors `(A x, A² x)` for two-step learners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub x: Vec<f64>,
    pub observed: Vec<Vec<f64>>,
    pub step_cost: f64,
    pub cumulative_cost: f64,
    /// Largest coordinate width of the uncertainty set before this query
    /// (`+∞` if unbounded, NaN if not computed).
    pub uncertainty_width: f64,
    pub choice: QueryChoice,
    /// Cost vector the query minimized (sampled per step when exploring).
    pub cost_vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StepRow {
    k: usize,
    x: String,
    observed: String,
    step_cost: f64,
    cumulative_cost: f64,
    uncertainty_width: f64,
    choice: String,
    cost_vector: String,
}

const STEP_COLUMNS: [&str; 8] = [
    "k",
    "x",
    "observed",
    "step_cost",
    "cumulative_cost",
    "uncertainty_width",
    "choice",
    "cost_vector",
];

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

fn split(s: &str) -> Result<Vec<f64>, String> {
    s.split_whitespace().map(|t| t.parse::<f64>().map_err(|e| format!("{t:?}: {e}"))).collect()
}

/// Final verdict of a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Learned { matrix: Vec<Vec<f64>> },
    Impossible { reason: String },
    Completed { detail: String },
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Impossible { .. } => 2,
            _ => 0,
        }
    }
}

/// Polygon captured after step `k` (step 0 is the prior).
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub k: usize,
    pub polygon: Polygon,
}

/// Full audit trail of one session.
#[derive(Clone, Debug)]
pub struct RunLog {
    /// Fully resolved configuration, as TOML.
    pub config: String,
    pub steps: Vec<StepRecord>,
    pub regions: Vec<Snapshot>,
    pub uncertainty: Vec<Snapshot>,
    pub outcome: Option<Outcome>,
    /// Extra named scalars (bounds, RMSE, audit margins).
    pub metrics: Vec<(String, f64)>,
}

#[derive(Serialize)]
struct Summary<'a> {
    config_sha256: String,
    measurements: usize,
    total_cost: f64,
    outcome: &'a Option<Outcome>,
    metrics: toml::Table,
}

impl RunLog {
    pub fn new(config: String) -> Self {
        Self {
            config,
            steps: Vec::new(),
            regions: Vec::new(),
            uncertainty: Vec::new(),
            outcome: None,
            metrics: Vec::new(),
        }
    }

    pub fn config_digest(&self) -> String {
        hex::encode(Sha256::digest(self.config.as_bytes()))
    }

    pub fn total_cost(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.cumulative_cost)
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn set_metric(&mut self, name: &str, value: f64) {
        match self.metrics.iter_mut().find(|(n, _)| n == name) {
            Some(m) => m.1 = value,
            None => self.metrics.push((name.to_string(), value)),
        }
    }

    pub fn summary_toml(&self) -> String {
        let mut metrics = toml::Table::new();
        for (k, v) in &self.metrics {
            // TOML has no NaN-free guarantee for floats; keep them as strings when not finite
            let val = if v.is_finite() {
                toml::Value::Float(*v)
            } else {
                toml::Value::String(v.to_string())
            };
            metrics.insert(k.clone(), val);
        }
        let s = Summary {
            config_sha256: self.config_digest(),
            measurements: self.steps.len(),
            total_cost: self.total_cost(),
            outcome: &self.outcome,
            metrics,
        };
        toml::to_string(&s).expect("summary serializes")
    }

    pub fn steps_csv(&self) -> Result<String, GeometryError> {
        let mut wr = csv::Writer::from_writer(Vec::new());
        if self.steps.is_empty() {
            wr.write_record(STEP_COLUMNS)?;
        }
        for s in &self.steps {
            let obs: Vec<String> = s.observed.iter().map(|o| join(o)).collect();
            wr.serialize(StepRow {
                k: s.k,
                x: join(&s.x),
                observed: obs.join(" | "),
                step_cost: s.step_cost,
                cumulative_cost: s.cumulative_cost,
                uncertainty_width: s.uncertainty_width,
                choice: s.choice.to_string(),
                cost_vector: join(&s.cost_vector),
            })?;
        }
        let bytes = wr.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Parses the output of [`RunLog::steps_csv`].
    pub fn parse_steps_csv(text: &str) -> Result<Vec<StepRecord>, String> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let mut out = Vec::new();
        for (i, row) in rd.deserialize::<StepRow>().enumerate() {
            let at = |e: String| format!("steps.csv row {}: {e}", i + 2);
            let row = row.map_err(|e| at(e.to_string()))?;
            let observed = row
                .observed
                .split('|')
                .map(split)
                .collect::<Result<Vec<_>, _>>()
                .map_err(at)?;
            out.push(StepRecord {
                k: row.k,
                x: split(&row.x).map_err(at)?,
                observed,
                step_cost: row.step_cost,
                cumulative_cost: row.cumulative_cost,
                uncertainty_width: row.uncertainty_width,
                choice: row.choice.parse().map_err(at)?,
                cost_vector: split(&row.cost_vector).map_err(at)?,
            });
        }
        Ok(out)
    }

    /// Writes `config.toml`, `summary.toml`, `steps.csv`, `regions/step_k.csv`
    /// and `uncertainty/step_k.csv` under `dir`.
    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        let io = |e: GeometryError| std::io::Error::other(e.to_string());
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), &self.config)?;
        fs::write(dir.join("summary.toml"), self.summary_toml())?;
        fs::write(dir.join("steps.csv"), self.steps_csv().map_err(io)?)?;
        for (sub, snaps) in [("regions", &self.regions), ("uncertainty", &self.uncertainty)] {
            if snaps.is_empty() {
                continue;
            }
            let d = dir.join(sub);
            fs::create_dir_all(&d)?;
            for s in snaps {
                let f = fs::File::create(d.join(format!("step_{}.csv", s.k)))?;
                s.polygon.write_csv(f).map_err(io)?;
            }
        }
        Ok(())
    }
}
