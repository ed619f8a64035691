//! Experiment configuration (TOML) and its resolution into problem data.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{PNorm, QuadraticForm, Solver, SolverSettings};
use crate::geometry::Polyhedron;
use crate::linear_onestep::MatrixPolytope;
use crate::linear_twostep::EllipsoidalMatrixUncertainty;
use crate::nonlinear_onestep::NonlinearUncertainty;

use super::expr::{Expr, ExprError};
use super::system::TrueSystem;

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("g_star[{index}]: {source}")]
    Expr {
        index: usize,
        #[source]
        source: ExprError,
    },
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Linear1,
    Linear2,
    Nonlinear1,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Linear1 => "linear1",
            Mode::Linear2 => "linear2",
            Mode::Nonlinear1 => "nonlinear1",
        }
    }
}

/// `{x | Hx ≤ b}`, or the box `|xᵢ| ≤ box` when `box` is set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetySpec {
    #[serde(rename = "box", skip_serializing_if = "Option::is_none")]
    pub box_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<Matrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    /// `|Aᵢⱼ| ≤ bound`
    Box { bound: f64 },
    /// `lo ≤ A ≤ hi` entrywise; infinite entries are dropped.
    Entrywise { lo: Matrix, hi: Matrix },
    /// `Tr(VⱼᵀA) ≤ vⱼ`
    Polytope { v: Vec<Matrix>, rhs: Vec<f64> },
    /// `‖A − A₀‖_F ≤ γ`
    FrobeniusBall { a0: Matrix, gamma: f64 },
    /// `vec(A)ᵀQ vec(A) + qᵀvec(A) + r ≤ 0`, row-major `vec`.
    Ellipsoid { quad: Matrix, lin: Vec<f64>, constant: f64 },
}

fn default_p() -> PNorm {
    PNorm::Infinity
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearSpec {
    pub gamma: f64,
    #[serde(default = "default_p")]
    pub p: PNorm,
    #[serde(default)]
    pub d: u32,
}

fn yes() -> bool {
    true
}

fn default_validation_samples() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub a_star: Matrix,
    /// One expression per coordinate in `x1 … xn`; `gamma` names the
    /// nonlinear bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_star: Option<Vec<String>>,
    #[serde(default = "yes")]
    pub validate_g: bool,
    #[serde(default = "default_validation_samples")]
    pub validation_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerSpec {
    pub epsilon: f64,
    /// Plan all queries from the initial safe region.
    pub offline: bool,
    /// Exploration steps (nonlinear mode).
    pub steps: usize,
    pub seed: u64,
    pub max_resamples: usize,
    pub strict_tol: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    pub safety_tol: f64,
    /// Compute offline and lower cost bounds after the run.
    pub bounds: bool,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        Self {
            epsilon: crate::linear_onestep::DEFAULT_EPSILON,
            offline: false,
            steps: 30,
            seed: 0,
            max_resamples: 20,
            strict_tol: crate::linear_twostep::DEFAULT_STRICT_TOL,
            budget: None,
            safety_tol: 1e-6,
            bounds: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feas_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_tol: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnapshotSpec {
    pub regions: bool,
    pub uncertainty: bool,
    pub dims: [usize; 2],
    pub directions: usize,
}

impl Default for SnapshotSpec {
    fn default() -> Self {
        Self {
            regions: true,
            uncertainty: true,
            dims: [0, 1],
            directions: crate::geometry::DEFAULT_DIRECTIONS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSpec {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for FitSpec {
    fn default() -> Self {
        Self {
            train: 8,
            test: 1000,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub n: usize,
    pub safety: SafetySpec,
    /// Measurement cost; unused in nonlinear mode, which samples directions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<Vec<f64>>,
    pub prior: PriorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonlinear: Option<NonlinearSpec>,
    pub system: SystemSpec,
    #[serde(default)]
    pub learner: LearnerSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub snapshot: SnapshotSpec,
    #[serde(default)]
    pub fit: FitSpec,
}

/// Names of the configs shipped with the crate.
pub const BUNDLED: &[(&str, &str)] = &[
    ("example-3-4", include_str!("../../configs/example-3-4.toml")),
    ("example-4-2", include_str!("../../configs/example-4-2.toml")),
    ("example-5-2", include_str!("../../configs/example-5-2.toml")),
    ("impossible-2", include_str!("../../configs/impossible-2.toml")),
    ("identity-2", include_str!("../../configs/identity-2.toml")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Resolved problem data.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub safety: Polyhedron,
    pub cost: DVector<f64>,
    pub prior: Prior,
    pub nonlinear: Option<NonlinearUncertainty>,
    pub system: TrueSystem,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prior {
    Polytope(MatrixPolytope),
    Ellipsoid(EllipsoidalMatrixUncertainty),
}

fn matrix(m: &Matrix, n: usize, what: &str) -> Result<DMatrix<f64>, ConfigError> {
    if m.len() != n || m.iter().any(|r| r.len() != n) {
        return invalid(format!("{what} must be {n}×{n}"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| m[i][j]))
}

fn vector(v: &[f64], n: usize, what: &str) -> Result<DVector<f64>, ConfigError> {
    if v.len() != n {
        return invalid(format!("{what} must have length {n}, got {}", v.len()));
    }
    Ok(DVector::from_column_slice(v))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.resolve().map(|_| ())
    }

    pub fn solver(&self) -> Solver {
        let mut s = SolverSettings::default();
        if let Some(t) = self.solver.feas_tol {
            s = s.with_feas_tol(t);
        }
        if let Some(t) = self.solver.gap_tol {
            s = s.with_gap_tol(t);
        }
        Solver::with_settings(s)
    }

    pub fn safety_region(&self) -> Result<Polyhedron, ConfigError> {
        let n = self.n;
        let geo = |e: crate::geometry::GeometryError| ConfigError::Invalid(format!("safety: {e}"));
        match (&self.safety.box_bound, &self.safety.h, &self.safety.b) {
            (Some(r), None, None) => {
                if !(*r > 0.0) {
                    return invalid("safety.box must be positive");
                }
                Polyhedron::boxed(&vec![-r; n], &vec![*r; n]).map_err(geo)
            }
            (None, Some(h), Some(b)) => {
                if h.len() != b.len() || h.iter().any(|r| r.len() != n) {
                    return invalid(format!("safety.h must be {}×{n} to match safety.b", b.len()));
                }
                let hm = DMatrix::from_fn(h.len(), n, |i, j| h[i][j]);
                Polyhedron::from_matrix(&hm, &DVector::from_column_slice(b)).map_err(geo)
            }
            _ => invalid("safety needs either `box` or both `h` and `b`"),
        }
    }

    fn prior(&self) -> Result<Prior, ConfigError> {
        let n = self.n;
        let learn = |e: crate::LearnError| ConfigError::Invalid(format!("prior: {e}"));
        Ok(match &self.prior {
            PriorSpec::Box { bound } => {
                if !(*bound > 0.0) {
                    return invalid("prior.bound must be positive");
                }
                Prior::Polytope(MatrixPolytope::entrywise_box(n, *bound))
            }
            PriorSpec::Entrywise { lo, hi } => Prior::Polytope(
                MatrixPolytope::entrywise(&matrix(lo, n, "prior.lo")?, &matrix(hi, n, "prior.hi")?).map_err(learn)?,
            ),
            PriorSpec::Polytope { v, rhs } => {
                if v.len() != rhs.len() {
                    return invalid("prior.v and prior.rhs differ in length");
                }
                let cons = v
                    .iter()
                    .zip(rhs)
                    .map(|(m, r)| Ok((matrix(m, n, "prior.v entry")?, *r)))
                    .collect::<Result<Vec<_>, ConfigError>>()?;
                Prior::Polytope(MatrixPolytope::new(n, cons).map_err(learn)?)
            }
            PriorSpec::FrobeniusBall { a0, gamma } => Prior::Ellipsoid(
                EllipsoidalMatrixUncertainty::frobenius_ball(matrix(a0, n, "prior.a0")?, *gamma).map_err(learn)?,
            ),
            PriorSpec::Ellipsoid { quad, lin, constant } => {
                let nn = n * n;
                if quad.len() != nn || quad.iter().any(|r| r.len() != nn) {
                    return invalid(format!("prior.quad must be {nn}×{nn}"));
                }
                let q = DMatrix::from_fn(nn, nn, |i, j| quad[i][j]);
                if (&q - q.transpose()).amax() > 1e-12 {
                    return invalid("prior.quad must be symmetric");
                }
                let form = QuadraticForm::new(q, vector(lin, nn, "prior.lin")?, *constant);
                Prior::Ellipsoid(EllipsoidalMatrixUncertainty::general(n, form).map_err(learn)?)
            }
        })
    }

    /// Checks dimensions and mode compatibility and builds the problem data.
    pub fn resolve(&self) -> Result<Experiment, ConfigError> {
        let n = self.n;
        if n == 0 {
            return invalid("n must be positive");
        }
        let safety = self.safety_region()?;
        let prior = self.prior()?;
        match (self.mode, &prior) {
            (Mode::Linear2, Prior::Polytope(_)) => return invalid("linear2 needs an ellipsoidal prior (frobenius_ball or ellipsoid)"),
            (Mode::Linear1 | Mode::Nonlinear1, Prior::Ellipsoid(_)) => {
                return invalid(format!("{} needs a polytopic prior", self.mode.name()))
            }
            _ => {}
        }
        let cost = match (&self.cost, self.mode) {
            (Some(c), _) => vector(c, n, "cost")?,
            (None, Mode::Nonlinear1) => DVector::zeros(n),
            (None, _) => return invalid("cost is required for linear modes"),
        };
        let nonlinear = match (&self.nonlinear, self.mode, &prior) {
            (Some(spec), Mode::Nonlinear1, Prior::Polytope(a)) => Some(
                NonlinearUncertainty::new(a.clone(), spec.gamma, spec.p, spec.d)
                    .map_err(|e| ConfigError::Invalid(format!("nonlinear: {e}")))?,
            ),
            (None, Mode::Nonlinear1, _) => return invalid("nonlinear1 needs a [nonlinear] section"),
            (Some(_), _, _) => return invalid("[nonlinear] is only valid in nonlinear1 mode"),
            _ => None,
        };
        if !(self.learner.epsilon > 0.0 && self.learner.epsilon <= 1.0) {
            return invalid("learner.epsilon must lie in (0, 1]");
        }
        let [d0, d1] = self.snapshot.dims;
        if d0 >= n || d1 >= n || d0 == d1 {
            return invalid(format!("snapshot.dims must be two distinct coordinates below {n}"));
        }
        if self.snapshot.directions < 3 {
            return invalid("snapshot.directions must be at least 3");
        }
        let a_star = matrix(&self.system.a_star, n, "system.a_star")?;
        let mut constants = BTreeMap::new();
        if let Some(spec) = &self.nonlinear {
            constants.insert("gamma".to_string(), spec.gamma);
        }
        let g = match &self.system.g_star {
            None => None,
            Some(srcs) => {
                if srcs.len() != n {
                    return invalid(format!("system.g_star needs {n} expressions"));
                }
                Some(
                    srcs.iter()
                        .enumerate()
                        .map(|(index, s)| Expr::parse(s, n, &constants).map_err(|source| ConfigError::Expr { index, source }))
                        .collect::<Result<Vec<_>, _>>()?,
                )
            }
        };
        if g.is_some() && self.mode != Mode::Nonlinear1 {
            return invalid("system.g_star is only valid in nonlinear1 mode");
        }
        let system = TrueSystem::new(a_star, g).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let (Some(u), true) = (&nonlinear, self.system.validate_g) {
            system
                .validate_g(&safety, u, self.system.validation_samples, self.learner.seed)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(Experiment {
            config: self.clone(),
            safety,
            cost,
            prior,
            nonlinear,
            system,
        })
    }
}

impl Experiment {
    pub fn solver(&self) -> Solver {
        self.config.solver()
    }
}

/// Row-major nested vectors from a matrix.
pub fn matrix_rows(m: &DMatrix<f64>) -> Matrix {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}
