//! Plant, controller and closed-loop types.
//!
//! Mode indices are 0-based. The noise `w(k)` is a vector of `nw` independent
//! standard normals, so `D_i` is `n3 × nw`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{serde_matrix, serde_matrix_vec};

const ROW_SUM_TOL: f64 = 1e-12;

/// Row-stochastic mode transition matrix, `p[i][j] = P(r(k+1) = j | r(k) = i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransitionMatrix(#[serde(with = "serde_matrix")] DMatrix<f64>);

impl TransitionMatrix {
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        let t = Self(p);
        match t.violations().first() {
            Some(v) => Err(Error::InvalidModel(v.message.clone())),
            None => Ok(t),
        }
    }

    /// Skips validation; [`validate_model`] reports any problems later.
    pub fn new_unchecked(p: DMatrix<f64>) -> Self {
        Self(p)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidModel("ragged transition matrix".into()));
        }
        Self::new(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn modes(&self) -> usize {
        self.0.nrows()
    }

    #[inline]
    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Stationary distribution `π` with `πᵀ P = πᵀ`, from the left null space
    /// of `P - I` with the normalisation row appended.
    pub fn stationary_distribution(&self) -> DVector<f64> {
        let n = self.modes();
        let mut a = DMatrix::zeros(n + 1, n);
        a.view_mut((0, 0), (n, n)).copy_from(&(self.0.transpose() - DMatrix::identity(n, n)));
        a.row_mut(n).fill(1.0);
        let mut b = DVector::zeros(n + 1);
        b[n] = 1.0;
        let svd = a.svd(true, true);
        svd.solve(&b, 1e-14).expect("svd solve with computed factors")
    }

    pub(crate) fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let p = &self.0;
        if !p.is_square() || p.nrows() == 0 {
            out.push(Violation::new(
                ViolationCode::NotSquare,
                format!("transition matrix is {}x{}, expected a non-empty square matrix", p.nrows(), p.ncols()),
            ));
            return out;
        }
        for i in 0..p.nrows() {
            for j in 0..p.ncols() {
                let v = p[(i, j)];
                if !(0.0..=1.0).contains(&v) {
                    out.push(Violation::new(
                        ViolationCode::EntryOutOfRange,
                        format!("transition[{i}][{j}] = {v} is outside [0, 1]"),
                    ));
                }
            }
            let s: f64 = p.row(i).sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                out.push(Violation::new(
                    ViolationCode::RowNotStochastic,
                    format!("transition row {i} sums to {s}"),
                ));
            }
        }
        out
    }
}

/// Measurement channel of one perception mode: `y = C x + D w + E v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionMode {
    #[serde(rename = "C", with = "serde_matrix")]
    pub c: DMatrix<f64>,
    #[serde(rename = "D", with = "serde_matrix")]
    pub d: DMatrix<f64>,
    #[serde(rename = "E", with = "serde_matrix")]
    pub e: DMatrix<f64>,
}

impl PerceptionMode {
    pub fn new(c: DMatrix<f64>, d: DMatrix<f64>, e: DMatrix<f64>) -> Self {
        Self { c, d, e }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PemAdmModel {
    #[serde(rename = "A", with = "serde_matrix")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "serde_matrix")]
    pub b: DMatrix<f64>,
    pub modes: Vec<PerceptionMode>,
    pub transition: TransitionMatrix,
    /// Upper bound on `‖v(k)‖` over all `k`.
    pub bias_bound: f64,
}

impl PemAdmModel {
    /// Builds and validates.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        modes: Vec<PerceptionMode>,
        transition: TransitionMatrix,
        bias_bound: f64,
    ) -> Result<Self> {
        let m = Self { a, b, modes, transition, bias_bound };
        let report = validate_model(&m);
        if report.is_valid() {
            Ok(m)
        } else {
            Err(Error::InvalidModel(report.to_string()))
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.modes.first().map_or(0, |m| m.c.nrows())
    }

    pub fn noise_dim(&self) -> usize {
        self.modes.first().map_or(0, |m| m.d.ncols())
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationCode {
    NotSquare,
    EntryOutOfRange,
    RowNotStochastic,
    ModeCountMismatch,
    NoModes,
    DimensionMismatch,
    NegativeBiasBound,
    NonFinite,
}

impl ViolationCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::NotSquare => "not-square",
            Self::EntryOutOfRange => "entry-out-of-range",
            Self::RowNotStochastic => "row-not-stochastic",
            Self::ModeCountMismatch => "mode-count-mismatch",
            Self::NoModes => "no-modes",
            Self::DimensionMismatch => "dimension-mismatch",
            Self::NegativeBiasBound => "negative-bias-bound",
            Self::NonFinite => "non-finite",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
}

impl Violation {
    fn new(code: ViolationCode, message: String) -> Self {
        Self { code, message }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        let parts: Vec<String> =
            self.violations.iter().map(|v| format!("[{}] {}", v.code.as_str(), v.message)).collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// Collects every invariant violation of `model`. Never fails.
pub fn validate_model(model: &PemAdmModel) -> ValidationReport {
    use ViolationCode::*;
    let mut out = Vec::new();
    let mut push = |code, msg: String| out.push(Violation::new(code, msg));

    let n1 = model.a.nrows();
    if !model.a.is_square() || n1 == 0 {
        push(NotSquare, format!("A is {}x{}, expected a non-empty square matrix", model.a.nrows(), model.a.ncols()));
    }
    if model.b.nrows() != n1 || model.b.ncols() == 0 {
        push(DimensionMismatch, format!("B is {}x{}, expected {n1} rows", model.b.nrows(), model.b.ncols()));
    }
    let all_finite = model.a.iter().chain(model.b.iter()).all(|v| v.is_finite())
        && model.modes.iter().all(|m| m.c.iter().chain(m.d.iter()).chain(m.e.iter()).all(|v| v.is_finite()))
        && model.transition.0.iter().all(|v| v.is_finite());
    if !all_finite {
        push(NonFinite, "model contains a non-finite entry".into());
    }
    if !(model.bias_bound >= 0.0) {
        push(NegativeBiasBound, format!("bias_bound = {} must be nonnegative", model.bias_bound));
    }

    for v in model.transition.violations() {
        push(v.code, v.message);
    }
    if model.modes.is_empty() {
        push(NoModes, "model has no perception modes".into());
    } else if model.modes.len() != model.transition.modes() {
        push(
            ModeCountMismatch,
            format!("{} perception modes but transition matrix has {} rows", model.modes.len(), model.transition.modes()),
        );
    }

    if let Some(first) = model.modes.first() {
        let (n3, nw) = (first.c.nrows(), first.d.ncols());
        for (i, m) in model.modes.iter().enumerate() {
            if m.c.ncols() != n1 {
                push(DimensionMismatch, format!("mode {i}: C has {} columns, expected {n1}", m.c.ncols()));
            }
            if m.c.nrows() != n3 || m.d.nrows() != n3 || m.e.nrows() != n3 || m.e.ncols() != n3 {
                push(
                    DimensionMismatch,
                    format!(
                        "mode {i}: C {}x{}, D {}x{}, E {}x{} do not share {n3} rows with square E",
                        m.c.nrows(),
                        m.c.ncols(),
                        m.d.nrows(),
                        m.d.ncols(),
                        m.e.nrows(),
                        m.e.ncols()
                    ),
                );
            }
            if m.d.ncols() != nw {
                push(DimensionMismatch, format!("mode {i}: D has {} columns, mode 0 has {nw}", m.d.ncols()));
            }
        }
    }
    ValidationReport { violations: out }
}

/// Mode-dependent static output feedback `u = K_r y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    #[serde(with = "serde_matrix_vec")]
    pub gains: Vec<DMatrix<f64>>,
}

impl Controller {
    pub fn new(gains: Vec<DMatrix<f64>>) -> Self {
        Self { gains }
    }

    pub fn zeros(model: &PemAdmModel) -> Self {
        let (n2, n3) = (model.input_dim(), model.output_dim());
        Self { gains: vec![DMatrix::zeros(n2, n3); model.mode_count()] }
    }

    /// Convenience for single-input controllers: one gain row per mode.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        Self { gains: rows.iter().map(|r| DMatrix::from_row_slice(1, r.len(), r)).collect() }
    }

    pub fn check_against(&self, model: &PemAdmModel) -> Result<()> {
        if self.gains.len() != model.mode_count() {
            return Err(Error::Dimension(format!(
                "controller has {} gains for {} modes",
                self.gains.len(),
                model.mode_count()
            )));
        }
        let (n2, n3) = (model.input_dim(), model.output_dim());
        for (i, k) in self.gains.iter().enumerate() {
            if k.shape() != (n2, n3) {
                return Err(Error::Dimension(format!(
                    "gain K_{i} is {}x{}, expected {n2}x{n3}",
                    k.nrows(),
                    k.ncols()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopMode {
    /// `A + B K_i C_i`
    #[serde(rename = "Acl", with = "serde_matrix")]
    pub a: DMatrix<f64>,
    /// `B K_i D_i`
    #[serde(rename = "Dcl", with = "serde_matrix")]
    pub d: DMatrix<f64>,
    /// `B K_i E_i`
    #[serde(rename = "Ecl", with = "serde_matrix")]
    pub e: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopModel {
    pub modes: Vec<ClosedLoopMode>,
    pub transition: TransitionMatrix,
    pub bias_bound: f64,
}

impl ClosedLoopModel {
    /// Noise-free closed loop from explicit per-mode state matrices.
    pub fn from_state_matrices(a: Vec<DMatrix<f64>>, transition: TransitionMatrix) -> Result<Self> {
        if a.len() != transition.modes() {
            return Err(Error::Dimension(format!("{} mode matrices for {} modes", a.len(), transition.modes())));
        }
        let n = a.first().map_or(0, |m| m.nrows());
        if a.iter().any(|m| m.shape() != (n, n)) || n == 0 {
            return Err(Error::Dimension("mode matrices must share one non-empty square shape".into()));
        }
        let modes = a
            .into_iter()
            .map(|a| ClosedLoopMode { a, d: DMatrix::zeros(n, 1), e: DMatrix::zeros(n, 1) })
            .collect();
        Ok(Self { modes, transition, bias_bound: 0.0 })
    }

    pub fn state_dim(&self) -> usize {
        self.modes.first().map_or(0, |m| m.a.nrows())
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }
}

/// `A_i^cl = A + B K_i C_i`, `D_i^cl = B K_i D_i`, `E_i^cl = B K_i E_i`.
pub fn close_loop(model: &PemAdmModel, controller: &Controller) -> Result<ClosedLoopModel> {
    let report = validate_model(model);
    if !report.is_valid() {
        return Err(Error::InvalidModel(report.to_string()));
    }
    controller.check_against(model)?;
    let modes = model
        .modes
        .iter()
        .zip(&controller.gains)
        .map(|(m, k)| {
            let bk = &model.b * k;
            ClosedLoopMode { a: &model.a + &bk * &m.c, d: &bk * &m.d, e: &bk * &m.e }
        })
        .collect();
    Ok(ClosedLoopModel { modes, transition: model.transition.clone(), bias_bound: model.bias_bound })
}
