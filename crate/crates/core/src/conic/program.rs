use super::expr::{LinExpr, Var};
use super::ConicError;

/// Shape of a named variable block.
#[derive(Clone, Debug, PartialEq)]
pub enum VarKind {
    Scalar,
    Vector(usize),
    /// Symmetric `n×n` matrix stored as its upper triangle (row-major, `i <= j`).
    Symmetric(usize),
}

#[derive(Clone, Debug)]
pub struct VarBlock {
    pub name: String,
    pub kind: VarKind,
    pub offset: usize,
    pub len: usize,
}

/// Handle to a symmetric matrix variable.
#[derive(Clone, Debug)]
pub struct SymVar {
    dim: usize,
    offset: usize,
}

impl SymVar {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn var(&self, i: usize, j: usize) -> Var {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        Var(self.offset + upper_index(self.dim, i, j))
    }

    pub fn expr(&self, i: usize, j: usize) -> LinExpr {
        self.var(i, j).expr()
    }

    /// Evaluates the full symmetric matrix at a primal point.
    pub fn value(&self, primal: &[f64]) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.dim, self.dim, |i, j| primal[self.var(i, j).0])
    }
}

/// Row-major position of `(i, j)`, `i <= j`, in an upper triangle.
fn upper_index(dim: usize, i: usize, j: usize) -> usize {
    i * dim - i * i.saturating_sub(1) / 2 + (j - i)
}

/// Which cone family a program needs from a backend. Ordered by capability.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Capability {
    Linear,
    SecondOrderCone,
    Semidefinite,
}

/// One constraint block. Every expression is read as a slack `s` that must lie
/// in the block's cone.
#[derive(Clone, Debug)]
pub enum Constraint {
    /// `eᵢ = 0` for every entry.
    Zero(Vec<LinExpr>),
    /// `eᵢ ≥ 0` for every entry.
    Nonneg(Vec<LinExpr>),
    /// `e₀ ≥ ‖(e₁,…,e_k)‖₂`.
    SecondOrder(Vec<LinExpr>),
    /// Symmetric matrix with the given entries is PSD.
    Psd(PsdBlock),
}

impl Constraint {
    pub fn rows(&self) -> usize {
        match self {
            Constraint::Zero(e) | Constraint::Nonneg(e) | Constraint::SecondOrder(e) => e.len(),
            Constraint::Psd(b) => b.dim * (b.dim + 1) / 2,
        }
    }

    pub fn capability(&self) -> Capability {
        match self {
            Constraint::Zero(_) | Constraint::Nonneg(_) => Capability::Linear,
            Constraint::SecondOrder(_) => Capability::SecondOrderCone,
            Constraint::Psd(_) => Capability::Semidefinite,
        }
    }

    /// Cone violation of the block at a primal point (0 when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        match self {
            Constraint::Zero(es) => es.iter().map(|e| e.eval(x).abs()).fold(0.0, f64::max),
            Constraint::Nonneg(es) => es.iter().map(|e| (-e.eval(x)).max(0.0)).fold(0.0, f64::max),
            Constraint::SecondOrder(es) => {
                let head = es[0].eval(x);
                let tail = es[1..].iter().map(|e| e.eval(x).powi(2)).sum::<f64>().sqrt();
                (tail - head).max(0.0)
            }
            Constraint::Psd(b) => (-b.min_eigenvalue(x)).max(0.0),
        }
    }
}

/// Symmetric matrix of affine expressions constrained to be PSD.
///
/// Entries are stored full and row-major; only the upper triangle is read.
#[derive(Clone, Debug)]
pub struct PsdBlock {
    pub dim: usize,
    pub entries: Vec<LinExpr>,
}

impl PsdBlock {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: vec![LinExpr::zero(); dim * dim],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> &LinExpr {
        &self.entries[i * self.dim + j]
    }

    /// Sets entry `(i, j)` and its mirror.
    pub fn set(&mut self, i: usize, j: usize, e: LinExpr) {
        self.entries[j * self.dim + i] = e.clone();
        self.entries[i * self.dim + j] = e;
    }

    pub fn value(&self, x: &[f64]) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.dim, self.dim, |i, j| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            self.get(a, b).eval(x)
        })
    }

    pub fn min_eigenvalue(&self, x: &[f64]) -> f64 {
        if self.dim == 0 {
            return 0.0;
        }
        self.value(x)
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Clone, Debug)]
pub struct Objective {
    pub sense: Sense,
    pub expr: LinExpr,
}

/// Identifies a constraint block inside its program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConstraintId(pub(crate) usize);

impl ConstraintId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Solver-agnostic LP/SOCP/SDP with a linear objective.
#[derive(Clone, Debug)]
pub struct ConicProgram {
    blocks: Vec<VarBlock>,
    num_vars: usize,
    objective: Objective,
    constraints: Vec<Constraint>,
}

impl Default for ConicProgram {
    fn default() -> Self {
        Self::new()
    }
}

impl ConicProgram {
    pub fn new() -> Self {
        Self {
            blocks: Vec::new(),
            num_vars: 0,
            objective: Objective {
                sense: Sense::Minimize,
                expr: LinExpr::zero(),
            },
            constraints: Vec::new(),
        }
    }

    fn push_block(&mut self, name: &str, kind: VarKind, len: usize) -> usize {
        let offset = self.num_vars;
        self.blocks.push(VarBlock {
            name: name.to_string(),
            kind,
            offset,
            len,
        });
        self.num_vars += len;
        offset
    }

    pub fn add_scalar(&mut self, name: &str) -> Var {
        Var(self.push_block(name, VarKind::Scalar, 1))
    }

    pub fn add_vector(&mut self, name: &str, n: usize) -> Vec<Var> {
        let off = self.push_block(name, VarKind::Vector(n), n);
        (off..off + n).map(Var).collect()
    }

    pub fn add_symmetric(&mut self, name: &str, n: usize) -> SymVar {
        let off = self.push_block(name, VarKind::Symmetric(n), n * (n + 1) / 2);
        SymVar { dim: n, offset: off }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn var_blocks(&self) -> &[VarBlock] {
        &self.blocks
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn constraint(&self, id: ConstraintId) -> &Constraint {
        &self.constraints[id.0]
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn minimize(&mut self, e: LinExpr) {
        self.objective = Objective {
            sense: Sense::Minimize,
            expr: e,
        };
    }

    pub fn maximize(&mut self, e: LinExpr) {
        self.objective = Objective {
            sense: Sense::Maximize,
            expr: e,
        };
    }

    pub fn add_constraint(&mut self, c: Constraint) -> ConstraintId {
        self.constraints.push(c);
        ConstraintId(self.constraints.len() - 1)
    }

    /// `e = 0`.
    pub fn eq(&mut self, e: LinExpr) -> ConstraintId {
        self.add_constraint(Constraint::Zero(vec![e]))
    }

    /// `e ≥ 0`.
    pub fn nonneg(&mut self, e: LinExpr) -> ConstraintId {
        self.add_constraint(Constraint::Nonneg(vec![e]))
    }

    /// `lhs ≤ rhs`.
    pub fn le(&mut self, lhs: LinExpr, rhs: LinExpr) -> ConstraintId {
        self.nonneg(rhs - lhs)
    }

    pub fn soc(&mut self, head: LinExpr, tail: Vec<LinExpr>) -> ConstraintId {
        let mut es = Vec::with_capacity(tail.len() + 1);
        es.push(head);
        es.extend(tail);
        self.add_constraint(Constraint::SecondOrder(es))
    }

    pub fn psd(&mut self, block: PsdBlock) -> ConstraintId {
        self.add_constraint(Constraint::Psd(block))
    }

    pub fn required_capability(&self) -> Capability {
        self.constraints
            .iter()
            .map(Constraint::capability)
            .max()
            .unwrap_or(Capability::Linear)
    }

    /// Checks that every expression references declared variables and that
    /// cone blocks have admissible sizes.
    pub fn validate(&self) -> Result<(), ConicError> {
        let check = |e: &LinExpr| -> Result<(), ConicError> {
            match e.max_var() {
                Some(v) if v >= self.num_vars => Err(ConicError::Malformed(format!(
                    "expression references variable {v} but only {} are declared",
                    self.num_vars
                ))),
                _ if e.terms.iter().any(|t| !t.1.is_finite()) || !e.constant.is_finite() => {
                    Err(ConicError::Malformed("non-finite coefficient".into()))
                }
                _ => Ok(()),
            }
        };
        check(&self.objective.expr)?;
        for c in &self.constraints {
            match c {
                Constraint::Zero(es) | Constraint::Nonneg(es) => es.iter().try_for_each(check)?,
                Constraint::SecondOrder(es) => {
                    if es.is_empty() {
                        return Err(ConicError::Malformed("empty second-order cone".into()));
                    }
                    es.iter().try_for_each(check)?
                }
                Constraint::Psd(b) => {
                    if b.entries.len() != b.dim * b.dim {
                        return Err(ConicError::Malformed("PSD block size mismatch".into()));
                    }
                    b.entries.iter().try_for_each(check)?
                }
            }
        }
        Ok(())
    }

    /// Largest cone violation over all blocks at `x`.
    pub fn primal_residual(&self, x: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|c| c.violation(x))
            .fold(0.0, f64::max)
    }

    /// Largest absolute constant appearing in a constraint.
    pub(crate) fn constant_scale(&self) -> f64 {
        let mut m = 0.0f64;
        for c in &self.constraints {
            let es: &[LinExpr] = match c {
                Constraint::Zero(es) | Constraint::Nonneg(es) | Constraint::SecondOrder(es) => es,
                Constraint::Psd(b) => &b.entries,
            };
            for e in es {
                m = m.max(e.constant.abs());
            }
        }
        m
    }
}
