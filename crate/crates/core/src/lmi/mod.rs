//! Affine matrix-inequality modeling with a pluggable semidefinite backend.
//!
//! A problem holds symmetric, general and scalar variables, a list of
//! matrix expressions required to be negative (semi)definite, affine matrix
//! equalities and an optional linear objective.
//!
//! ```
//! use pemadm::lmi::{AffineMatrixExpr, LmiProblem, SdpStatus};
//!
//! // find p with 0.25 p − p ≺ 0 and p ≻ 0
//! let mut prob = LmiProblem::new();
//! let p = prob.sym_var("p", 1);
//! prob.add_lmi("lyap", AffineMatrixExpr::var(&p).scale(0.25 - 1.0));
//! prob.add_lmi("pos", -AffineMatrixExpr::var(&p));
//! let sol = prob.solve_feasibility();
//! assert_eq!(sol.status, SdpStatus::Optimal);
//! assert!(sol.values.matrix(&p)[(0, 0)] > 0.0);
//! ```
//!
//! Strict inequalities are decided through a slack program: minimize `t`
//! subject to every (scaled) block `⪯ t·I`; the problem is strictly feasible
//! iff `t* < −ε_strict` (`t* ≤` the nonstrict tolerance when no block is
//! strict). Each block is divided by the largest absolute entry of
//! its constant part before solving. All variables are confined to a box of
//! radius [`SolverOptions::radius`] so that both phases are bounded.

mod expr;
pub mod ipm;

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use expr::{AffineMatrixExpr, BlockMatrix};
pub use ipm::DenseIpm;

use crate::error::{Error, Result};
use crate::matrix::{max_sym_eigenvalue, to_rows};
use expr::Term;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

/// Matrix variable handle. Symmetric variables are square.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatVar {
    pub(crate) id: VarId,
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) symmetric: bool,
}

impl MatVar {
    pub fn id(&self) -> VarId {
        self.id
    }
    /// Row dimension (`n` for a symmetric `n × n` variable).
    pub fn n(&self) -> usize {
        self.rows
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarVar {
    pub(crate) id: VarId,
    pub lower_bound: Option<f64>,
}

impl ScalarVar {
    pub fn id(&self) -> VarId {
        self.id
    }
}

/// Assignment of values to variables. Scalars are stored as `1 × 1` matrices.
#[derive(Clone, Debug, Default)]
pub struct VarValues {
    map: HashMap<VarId, DMatrix<f64>>,
}

impl VarValues {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn get(&self, id: VarId) -> Option<&DMatrix<f64>> {
        self.map.get(&id)
    }
    pub fn matrix(&self, v: &MatVar) -> &DMatrix<f64> {
        &self.map[&v.id]
    }
    pub fn scalar(&self, v: &ScalarVar) -> f64 {
        self.map[&v.id][(0, 0)]
    }
    pub fn set_matrix(&mut self, v: &MatVar, m: DMatrix<f64>) {
        assert_eq!(m.shape(), (v.rows, v.cols), "value shape does not match variable");
        self.map.insert(v.id, m);
    }
    pub fn set_scalar(&mut self, v: &ScalarVar, s: f64) {
        self.map.insert(v.id, DMatrix::from_element(1, 1, s));
    }
    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Linear functional `Σ ⟨C_v, X_v⟩` over variables.
#[derive(Clone, Debug, Default)]
pub struct Objective {
    terms: Vec<(VarId, DMatrix<f64>)>,
}

impl Objective {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn scalar(s: &ScalarVar) -> Self {
        Self::new().add_scalar(s, 1.0)
    }
    pub fn trace(x: &MatVar) -> Self {
        Self::new().add_trace(x, 1.0)
    }
    pub fn add_scalar(mut self, s: &ScalarVar, w: f64) -> Self {
        self.terms.push((s.id, DMatrix::from_element(1, 1, w)));
        self
    }
    pub fn add_trace(mut self, x: &MatVar, w: f64) -> Self {
        assert_eq!(x.rows, x.cols, "trace of a non-square variable");
        self.terms.push((x.id, DMatrix::identity(x.rows, x.rows) * w));
        self
    }
    /// `⟨C, X⟩ = Σ_ab C_ab X_ab`
    pub fn add_inner(mut self, x: &MatVar, c: DMatrix<f64>) -> Self {
        assert_eq!(c.shape(), (x.rows, x.cols), "objective weight shape");
        self.terms.push((x.id, c));
        self
    }
    pub fn evaluate(&self, values: &VarValues) -> f64 {
        self.terms.iter().map(|(id, c)| c.dot(values.get(*id).expect("value for objective variable"))).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Strictness {
    /// `F ≺ 0`
    Strict,
    /// `F ⪯ 0`
    NonStrict,
}

#[derive(Clone, Debug)]
pub struct LmiConstraint {
    pub name: String,
    pub expr: AffineMatrixExpr,
    pub strictness: Strictness,
}

#[derive(Clone, Debug)]
pub struct EqualityConstraint {
    pub name: String,
    pub expr: AffineMatrixExpr,
}

#[derive(Clone, Debug)]
struct VarInfo {
    name: String,
    rows: usize,
    cols: usize,
    kind: VarKind,
    offset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum VarKind {
    Symmetric,
    General,
    Scalar,
}

impl VarInfo {
    fn count(&self) -> usize {
        match self.kind {
            VarKind::Symmetric => self.rows * (self.rows + 1) / 2,
            VarKind::General => self.rows * self.cols,
            VarKind::Scalar => 1,
        }
    }

    /// Matrix-entry pairs of each coordinate, in coordinate order.
    fn entries(&self) -> Vec<(usize, usize)> {
        match self.kind {
            VarKind::Symmetric => {
                (0..self.rows).flat_map(|j| (0..=j).map(move |i| (i, j))).collect()
            }
            VarKind::General => {
                (0..self.cols).flat_map(|j| (0..self.rows).map(move |i| (i, j))).collect()
            }
            VarKind::Scalar => vec![(0, 0)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    Inaccurate,
    Failed,
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub values: VarValues,
    /// Objective at `values` (the feasibility slack for `solve_feasibility`).
    pub objective_value: f64,
    /// Largest scaled equality residual, see [`LmiProblem::eq_residual`].
    pub max_eq_residual: f64,
    /// Largest maximum eigenvalue over the scaled constraint blocks.
    /// Negative means every block holds strictly.
    pub min_margin: f64,
    /// Phase-one slack `t*`.
    pub slack: f64,
    pub iterations: usize,
    pub backend: String,
    pub message: String,
}

impl SdpSolution {
    fn failed(backend: &dyn SdpBackend, message: String) -> Self {
        Self {
            status: SdpStatus::Failed,
            values: VarValues::new(),
            objective_value: f64::NAN,
            max_eq_residual: f64::NAN,
            min_margin: f64::NAN,
            slack: f64::NAN,
            iterations: 0,
            backend: backend_id(backend),
            message,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SdpStatus::Optimal
    }
}

fn backend_id(b: &dyn SdpBackend) -> String {
    format!("{} {}", b.name(), b.version())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    /// A problem is strictly feasible iff the scaled slack satisfies
    /// `t* < −eps_strict`.
    pub eps_strict: f64,
    /// Initial feasibility radius bounding every variable.
    pub radius: f64,
    /// `solve_min` enlarges the radius by this factor when the optimum sits on it.
    pub radius_growth: f64,
    pub max_radius: f64,
    /// Nonstrict blocks may exceed zero by this much at the returned point.
    pub nonstrict_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { eps_strict: 1e-9, radius: 1e8, radius_growth: 1e3, max_radius: 1e14, nonstrict_tol: 1e-7 }
    }
}

// ---------------------------------------------------------------------------
// backend contract

/// One semidefinite block `C − Σ_k y_k A_k ⪰ 0`; `None` marks `A_k = 0`.
#[derive(Clone, Debug)]
pub struct SdpBlock {
    pub c: DMatrix<f64>,
    pub a: Vec<Option<DMatrix<f64>>>,
}

/// `maximize bᵀy` over the blocks with linear equalities `eq_a·y = eq_b`.
#[derive(Clone, Debug)]
pub struct SdpData {
    pub blocks: Vec<SdpBlock>,
    pub eq_a: DMatrix<f64>,
    pub eq_b: DVector<f64>,
    pub b: DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendStatus {
    Converged,
    Inaccurate,
    Infeasible,
    Failed,
}

#[derive(Clone, Debug)]
pub struct BackendOutput {
    pub status: BackendStatus,
    pub y: DVector<f64>,
    pub iterations: usize,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub message: String,
}

pub trait SdpBackend: Send + Sync {
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    fn solve(&self, data: &SdpData) -> BackendOutput;
}

/// Name and version of the default backend, for run metadata.
pub fn default_backend_id() -> String {
    backend_id(&DenseIpm::default())
}

// ---------------------------------------------------------------------------
// problem

#[derive(Clone, Debug, Default)]
pub struct LmiProblem {
    vars: Vec<VarInfo>,
    lmis: Vec<LmiConstraint>,
    equalities: Vec<EqualityConstraint>,
    objective: Option<Objective>,
    nvals: usize,
}

/// A constraint block lowered to coordinates: `F(y) = F0 + Σ y_k F_k`.
#[derive(Clone, Debug)]
struct Lowered {
    name: String,
    strict: bool,
    scale: f64,
    f0: DMatrix<f64>,
    f: Vec<Option<DMatrix<f64>>>,
}

impl Lowered {
    fn eval(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let mut out = self.f0.clone();
        for (k, fk) in self.f.iter().enumerate() {
            if let Some(fk) = fk {
                out += fk * y[k];
            }
        }
        out
    }
}

struct Lowering {
    blocks: Vec<Lowered>,
    eq_a: DMatrix<f64>,
    eq_b: DVector<f64>,
    cost: DVector<f64>,
    /// Orthonormal directions that change no block, equality or cost.
    free: DMatrix<f64>,
}

impl Lowering {
    /// Removes the free components of `y`. Without this, an infeasible-start
    /// iteration leaves them wherever the early iterates pushed them, up to
    /// the radius box.
    fn project(&self, y: &DVector<f64>) -> DVector<f64> {
        if self.free.ncols() == 0 {
            return y.clone();
        }
        y - &self.free * (self.free.transpose() * y)
    }
}

fn free_directions(blocks: &[Lowered], eq_a: &DMatrix<f64>, cost: &DVector<f64>, m: usize) -> DMatrix<f64> {
    let mut gram = DMatrix::<f64>::zeros(m, m);
    let mut add = |row: DVector<f64>| {
        let s = row.amax();
        if s > 0.0 {
            let row = row / s;
            gram.ger(1.0, &row, &row, 1.0);
        }
    };
    for blk in blocks {
        let n = blk.f0.nrows();
        for i in 0..n {
            for j in i..n {
                add(DVector::from_fn(m, |k, _| blk.f[k].as_ref().map_or(0.0, |f| f[(i, j)])));
            }
        }
    }
    for i in 0..eq_a.nrows() {
        add(eq_a.row(i).transpose());
    }
    add(cost.clone());
    let eig = nalgebra::SymmetricEigen::new(gram);
    let top = eig.eigenvalues.amax().max(1.0);
    let keep: Vec<usize> = (0..m).filter(|&k| eig.eigenvalues[k] <= 1e-12 * top).collect();
    DMatrix::from_fn(m, keep.len(), |r, c| eig.eigenvectors[(r, keep[c])])
}

impl LmiProblem {
    pub fn new() -> Self {
        Self::default()
    }

    fn push_var(&mut self, name: &str, rows: usize, cols: usize, kind: VarKind) -> VarId {
        assert!(rows >= 1 && cols >= 1, "variable {name} must have positive dimensions");
        let id = VarId(self.vars.len());
        let info = VarInfo { name: name.to_string(), rows, cols, kind, offset: self.nvals };
        self.nvals += info.count();
        self.vars.push(info);
        id
    }

    pub fn sym_var(&mut self, name: &str, n: usize) -> MatVar {
        let id = self.push_var(name, n, n, VarKind::Symmetric);
        MatVar { id, rows: n, cols: n, symmetric: true }
    }

    pub fn mat_var(&mut self, name: &str, rows: usize, cols: usize) -> MatVar {
        let id = self.push_var(name, rows, cols, VarKind::General);
        MatVar { id, rows, cols, symmetric: false }
    }

    /// Scalar variable; a lower bound becomes a nonstrict `1 × 1` constraint.
    pub fn scalar_var(&mut self, name: &str, lower_bound: Option<f64>) -> ScalarVar {
        let id = self.push_var(name, 1, 1, VarKind::Scalar);
        let s = ScalarVar { id, lower_bound };
        if let Some(lb) = lower_bound {
            let one = DMatrix::identity(1, 1);
            let e = AffineMatrixExpr::constant(one.clone() * lb) - AffineMatrixExpr::scalar(&s, &one);
            self.lmis.push(LmiConstraint {
                name: format!("{name} lower bound"),
                expr: e,
                strictness: Strictness::NonStrict,
            });
        }
        s
    }

    /// `expr ≺ 0`
    pub fn add_lmi(&mut self, name: &str, expr: AffineMatrixExpr) {
        self.add_constraint(name, expr, Strictness::Strict);
    }

    /// `expr ⪯ 0`
    pub fn add_lmi_nonstrict(&mut self, name: &str, expr: AffineMatrixExpr) {
        self.add_constraint(name, expr, Strictness::NonStrict);
    }

    pub fn add_constraint(&mut self, name: &str, expr: AffineMatrixExpr, strictness: Strictness) {
        assert_eq!(expr.nrows(), expr.ncols(), "constraint {name} is not square");
        self.lmis.push(LmiConstraint { name: name.to_string(), expr, strictness });
    }

    /// `expr = 0`, entrywise.
    pub fn add_equality(&mut self, name: &str, expr: AffineMatrixExpr) {
        self.equalities.push(EqualityConstraint { name: name.to_string(), expr });
    }

    pub fn minimize(&mut self, objective: Objective) {
        self.objective = Some(objective);
    }

    pub fn constraints(&self) -> &[LmiConstraint] {
        &self.lmis
    }

    pub fn equalities(&self) -> &[EqualityConstraint] {
        &self.equalities
    }

    pub fn has_objective(&self) -> bool {
        self.objective.is_some()
    }

    /// Number of scalar coordinates over all variables.
    pub fn dimension(&self) -> usize {
        self.nvals
    }

    fn check_refs(&self) -> Result<()> {
        let known = |id: VarId| id.0 < self.vars.len();
        let exprs = self.lmis.iter().map(|c| (&c.name, &c.expr)).chain(self.equalities.iter().map(|c| (&c.name, &c.expr)));
        for (name, e) in exprs {
            if let Some(t) = e.terms.iter().find(|t| !known(t.var())) {
                return Err(Error::Lmi(format!("constraint {name} references undeclared variable {:?}", t.var())));
            }
        }
        if let Some(obj) = &self.objective {
            if obj.terms.iter().any(|(id, _)| !known(*id)) {
                return Err(Error::Lmi("objective references an undeclared variable".into()));
            }
        }
        Ok(())
    }

    /// Coefficient matrices of `e` with respect to every coordinate.
    fn coefficients(&self, e: &AffineMatrixExpr) -> Vec<Option<DMatrix<f64>>> {
        let (r, c) = e.shape();
        let mut f: Vec<Option<DMatrix<f64>>> = vec![None; self.nvals];
        let mut acc = |k: usize, m: DMatrix<f64>| match &mut f[k] {
            Some(x) => *x += m,
            slot @ None => *slot = Some(m),
        };
        for t in &e.terms {
            let info = &self.vars[t.var().0];
            match t {
                Term::Mat { left, right, transposed, .. } => {
                    for (k, (a, b)) in info.entries().into_iter().enumerate() {
                        // contribution of E_ab (and E_ba for symmetric off-diagonals)
                        let (a1, b1) = if *transposed { (b, a) } else { (a, b) };
                        let mut m = left.column(a1) * right.row(b1);
                        if info.kind == VarKind::Symmetric && a != b {
                            m += left.column(b1) * right.row(a1);
                        }
                        acc(info.offset + k, m);
                    }
                }
                Term::Scalar { coeff, .. } => acc(info.offset, coeff.clone()),
            }
        }
        for slot in &mut f {
            if slot.as_ref().is_some_and(|m| m.amax() == 0.0) {
                *slot = None;
            }
            debug_assert!(slot.as_ref().is_none_or(|m| m.shape() == (r, c)));
        }
        f
    }

    fn lower(&self) -> Result<Lowering> {
        self.check_refs()?;
        let mut blocks = Vec::with_capacity(self.lmis.len());
        for c in &self.lmis {
            let f0 = c.expr.constant.clone();
            let f = self.coefficients(&c.expr);
            let asym = |m: &DMatrix<f64>| (m - m.transpose()).amax() > 1e-9 * (1.0 + m.amax());
            if asym(&f0) || f.iter().flatten().any(asym) {
                return Err(Error::Lmi(format!("constraint {} is not symmetric", c.name)));
            }
            let c0 = f0.amax();
            let scale = if c0 > 0.0 { c0 } else { 1.0 };
            blocks.push(Lowered {
                name: c.name.clone(),
                strict: c.strictness == Strictness::Strict,
                scale,
                f0: sym(&f0) / scale,
                f: f.into_iter().map(|m| m.map(|m| sym(&m) / scale)).collect(),
            });
        }

        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for eq in &self.equalities {
            let f = self.coefficients(&eq.expr);
            let (r, c) = eq.expr.shape();
            for j in 0..c {
                for i in 0..r {
                    let coeffs: Vec<f64> = f.iter().map(|m| m.as_ref().map_or(0.0, |m| m[(i, j)])).collect();
                    let rhs = -eq.expr.constant[(i, j)];
                    if coeffs.iter().all(|&v| v == 0.0) && rhs == 0.0 {
                        continue;
                    }
                    rows.push((coeffs, rhs));
                }
            }
        }
        let eq_a = DMatrix::from_fn(rows.len(), self.nvals, |i, k| rows[i].0[k]);
        let eq_b = DVector::from_fn(rows.len(), |i, _| rows[i].1);

        let mut cost = DVector::zeros(self.nvals);
        if let Some(obj) = &self.objective {
            for (id, w) in &obj.terms {
                let info = &self.vars[id.0];
                for (k, (a, b)) in info.entries().into_iter().enumerate() {
                    let mut v = w[(a, b)];
                    if info.kind == VarKind::Symmetric && a != b {
                        v += w[(b, a)];
                    }
                    cost[info.offset + k] += v;
                }
            }
        }
        let free = free_directions(&blocks, &eq_a, &cost, self.nvals);
        Ok(Lowering { blocks, eq_a, eq_b, cost, free })
    }

    /// Box constraints `‖X‖₂ ≤ radius` (as `F ⪯ 0`) for every variable.
    fn radius_blocks(&self, radius: f64) -> Vec<Lowered> {
        let mut out = Vec::new();
        for info in &self.vars {
            let coords = info.entries();
            let mk = |name: String, n: usize, f: &dyn Fn(usize, usize, usize) -> DMatrix<f64>| {
                let mut fs = vec![None; self.nvals];
                for (k, &(a, b)) in coords.iter().enumerate() {
                    fs[info.offset + k] = Some(f(n, a, b));
                }
                Lowered { name, strict: false, scale: 1.0, f0: DMatrix::identity(n, n) * -radius, f: fs }
            };
            match info.kind {
                VarKind::Symmetric | VarKind::Scalar => {
                    let n = info.rows;
                    let basis = |n: usize, a: usize, b: usize| {
                        let mut m = DMatrix::zeros(n, n);
                        m[(a, b)] = 1.0;
                        m[(b, a)] = 1.0;
                        m
                    };
                    out.push(mk(format!("{} upper radius", info.name), n, &basis));
                    out.push(mk(format!("{} lower radius", info.name), n, &|n, a, b| -basis(n, a, b)));
                }
                VarKind::General => {
                    let (r, c) = (info.rows, info.cols);
                    out.push(mk(format!("{} radius", info.name), r + c, &|n, a, b| {
                        let mut m = DMatrix::zeros(n, n);
                        m[(a, r + b)] = 1.0;
                        m[(r + b, a)] = 1.0;
                        m
                    }));
                }
            }
        }
        out
    }

    fn values_from(&self, y: &DVector<f64>) -> VarValues {
        let mut vals = VarValues::new();
        for (i, info) in self.vars.iter().enumerate() {
            let mut m = DMatrix::zeros(info.rows, info.cols);
            for (k, (a, b)) in info.entries().into_iter().enumerate() {
                let v = y[info.offset + k];
                m[(a, b)] = v;
                if info.kind == VarKind::Symmetric {
                    m[(b, a)] = v;
                }
            }
            vals.map.insert(VarId(i), m);
        }
        vals
    }

    /// Coordinate vector of an assignment (missing variables read as zero).
    fn coords_from(&self, vals: &VarValues) -> DVector<f64> {
        let mut y = DVector::zeros(self.nvals);
        for (i, info) in self.vars.iter().enumerate() {
            if let Some(m) = vals.get(VarId(i)) {
                for (k, (a, b)) in info.entries().into_iter().enumerate() {
                    y[info.offset + k] = m[(a, b)];
                }
            }
        }
        y
    }

    /// Evaluates every constraint expression (unscaled) at `values`.
    pub fn evaluate(&self, values: &VarValues) -> Vec<DMatrix<f64>> {
        self.lmis.iter().map(|c| c.expr.evaluate(values)).collect()
    }

    /// Largest entrywise equality residual at `values`, each equality row
    /// divided by its largest coefficient times `max(1, ‖y‖∞)`.
    pub fn eq_residual(&self, values: &VarValues) -> f64 {
        let Ok(low) = self.lower() else { return f64::NAN };
        let y = self.coords_from(values);
        eq_residual(&low, &y)
    }

    /// Solves with [`SolverOptions::default`] and the dense backend.
    pub fn solve_feasibility(&self) -> SdpSolution {
        self.solve_feasibility_with(&SolverOptions::default(), &DenseIpm::default())
    }

    pub fn solve_min(&self) -> SdpSolution {
        self.solve_min_with(&SolverOptions::default(), &DenseIpm::default())
    }

    pub fn solve_feasibility_with(&self, opts: &SolverOptions, backend: &dyn SdpBackend) -> SdpSolution {
        let low = match self.lower() {
            Ok(l) => l,
            Err(e) => return SdpSolution::failed(backend, e.to_string()),
        };
        if self.objective.is_some() {
            log::debug!("solve_feasibility ignores the objective");
        }
        self.phase_one(&low, opts, backend)
    }

    pub fn solve_min_with(&self, opts: &SolverOptions, backend: &dyn SdpBackend) -> SdpSolution {
        let low = match self.lower() {
            Ok(l) => l,
            Err(e) => return SdpSolution::failed(backend, e.to_string()),
        };
        if self.objective.is_none() {
            return SdpSolution::failed(backend, "solve_min requires an objective".into());
        }
        let first = self.phase_one(&low, opts, backend);
        if first.status != SdpStatus::Optimal {
            return first;
        }
        let y1 = self.coords_from(&first.values);

        let mut radius = opts.radius;
        loop {
            let radius_blocks = self.radius_blocks(radius);
            let mut blocks = Vec::new();
            for blk in &low.blocks {
                let mut c = -&blk.f0;
                if blk.strict {
                    for i in 0..c.nrows() {
                        c[(i, i)] -= opts.eps_strict;
                    }
                }
                blocks.push(SdpBlock { c, a: blk.f.clone() });
            }
            for blk in &radius_blocks {
                blocks.push(SdpBlock { c: -&blk.f0, a: blk.f.clone() });
            }
            let data = SdpData { blocks, eq_a: low.eq_a.clone(), eq_b: low.eq_b.clone(), b: -&low.cost };
            let out = backend.solve(&data);
            let status = match out.status {
                BackendStatus::Converged => SdpStatus::Optimal,
                BackendStatus::Inaccurate => SdpStatus::Inaccurate,
                BackendStatus::Infeasible => SdpStatus::Infeasible,
                BackendStatus::Failed => {
                    let mut s = SdpSolution::failed(backend, format!("phase two: {}", out.message));
                    s.slack = first.slack;
                    return s;
                }
            };

            // The returned point must satisfy every block; otherwise move it
            // toward the strictly feasible phase-one point.
            let ok = |y: &DVector<f64>| {
                low.blocks.iter().all(|b| {
                    let e = max_sym_eigenvalue(&b.eval(y));
                    if b.strict { e < 0.0 } else { e <= opts.nonstrict_tol }
                })
            };
            let mut y = low.project(&out.y);
            if !ok(&y) {
                let theta = (0..=10)
                    .map(|p| if p == 10 { 1.0 } else { 10f64.powi(p - 10) })
                    .find(|&th| ok(&(&y1 * th + &y * (1.0 - th))))
                    .unwrap_or(1.0);
                log::debug!("phase two point backed off by {theta:e}");
                y = &y1 * theta + &y * (1.0 - theta);
            }

            let near_edge = radius_blocks.iter().any(|b| max_sym_eigenvalue(&b.eval(&y)) > -1e-3 * radius);
            if near_edge {
                if radius * opts.radius_growth <= opts.max_radius {
                    radius *= opts.radius_growth;
                    continue;
                }
                let mut s = SdpSolution::failed(backend, "unbounded: optimum at the feasibility radius".into());
                s.slack = first.slack;
                return s;
            }

            let values = self.values_from(&y);
            let objective_value = self.objective.as_ref().map_or(0.0, |o| o.evaluate(&values));
            return SdpSolution {
                status,
                objective_value,
                max_eq_residual: eq_residual(&low, &y),
                min_margin: margin(&low.blocks, &y),
                slack: first.slack,
                iterations: first.iterations + out.iterations,
                backend: backend_id(backend),
                message: out.message,
                values,
            };
        }
    }

    fn phase_one(&self, low: &Lowering, opts: &SolverOptions, backend: &dyn SdpBackend) -> SdpSolution {
        let m = self.nvals;
        let radius_blocks = self.radius_blocks(opts.radius);
        let mut blocks = Vec::new();
        for blk in &low.blocks {
            let n = blk.f0.nrows();
            let mut a = blk.f.clone();
            a.push(Some(-DMatrix::identity(n, n)));
            blocks.push(SdpBlock { c: -&blk.f0, a });
        }
        for blk in &radius_blocks {
            let mut a = blk.f.clone();
            a.push(None);
            blocks.push(SdpBlock { c: -&blk.f0, a });
        }
        let mut eq_a = DMatrix::zeros(low.eq_a.nrows(), m + 1);
        eq_a.columns_mut(0, m).copy_from(&low.eq_a);
        let mut b = DVector::zeros(m + 1);
        b[m] = -1.0;
        let data = SdpData { blocks, eq_a, eq_b: low.eq_b.clone(), b };
        let out = backend.solve(&data);

        if out.status == BackendStatus::Failed {
            return SdpSolution { iterations: out.iterations, ..SdpSolution::failed(backend, out.message) };
        }
        let y = low.project(&out.y.rows(0, m).into_owned());
        let values = self.values_from(&y);
        let t = margin(&low.blocks, &y);
        // Weak duality: the primal objective bounds −t from above. Its accuracy
        // is relative to the magnitude of the iterate.
        let t_lower = if out.primal_objective.is_finite() { -out.primal_objective } else { f64::NEG_INFINITY };
        let refute_threshold = -opts.eps_strict * out.y.amax().max(1.0);
        // Without strict blocks, feasibility only needs t* within the
        // nonstrict tolerance.
        let accept = if low.blocks.iter().any(|b| b.strict) { -opts.eps_strict } else { opts.nonstrict_tol };
        let status = match out.status {
            BackendStatus::Infeasible => SdpStatus::Infeasible,
            _ if t < accept => SdpStatus::Optimal,
            BackendStatus::Converged => SdpStatus::Infeasible,
            _ if t_lower >= refute_threshold => SdpStatus::Infeasible,
            _ => SdpStatus::Inaccurate,
        };
        SdpSolution {
            status,
            values,
            objective_value: t,
            max_eq_residual: eq_residual(low, &y),
            min_margin: t,
            slack: t,
            iterations: out.iterations,
            backend: backend_id(backend),
            message: out.message,
        }
    }

    /// Assembled, scaled blocks as JSON, for inspection.
    pub fn debug_dump(&self) -> Result<serde_json::Value> {
        let low = self.lower()?;
        let coord_names: Vec<String> = self
            .vars
            .iter()
            .flat_map(|v| v.entries().into_iter().map(move |(a, b)| format!("{}[{a},{b}]", v.name)))
            .collect();
        let blocks: Vec<_> = low
            .blocks
            .iter()
            .map(|b| {
                let terms: serde_json::Map<String, serde_json::Value> = b
                    .f
                    .iter()
                    .enumerate()
                    .filter_map(|(k, f)| f.as_ref().map(|f| (coord_names[k].clone(), json!(to_rows(f)))))
                    .collect();
                json!({
                    "name": b.name,
                    "strict": b.strict,
                    "scale": b.scale,
                    "constant": to_rows(&b.f0),
                    "terms": terms,
                })
            })
            .collect();
        Ok(json!({
            "coordinates": coord_names,
            "blocks": blocks,
            "equalities": { "rows": low.eq_a.nrows() },
            "objective": low.cost.iter().copied().collect::<Vec<_>>(),
        }))
    }
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn margin(blocks: &[Lowered], y: &DVector<f64>) -> f64 {
    blocks.iter().map(|b| max_sym_eigenvalue(&b.eval(y))).fold(f64::NEG_INFINITY, f64::max)
}

fn eq_residual(low: &Lowering, y: &DVector<f64>) -> f64 {
    if low.eq_a.nrows() == 0 {
        return 0.0;
    }
    let scale = y.amax().max(1.0);
    let r = &low.eq_a * y - &low.eq_b;
    (0..r.len())
        .map(|i| r[i].abs() / (low.eq_a.row(i).amax().max(f64::MIN_POSITIVE) * scale))
        .fold(0.0, f64::max)
}

/// Convenience wrappers matching the free-function style of the rest of the crate.
pub fn solve_feasibility(problem: &LmiProblem) -> SdpSolution {
    problem.solve_feasibility()
}

pub fn solve_min(problem: &LmiProblem) -> SdpSolution {
    problem.solve_min()
}
