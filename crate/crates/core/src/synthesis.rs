//! Static output-feedback synthesis.
//!
//! Both LMI routes substitute `S_i = P_i⁻¹` and search for `(S_i, Y_i, W_i)`
//! with `C_i S_i = Y_i C_i`, so that `K_i = W_i Y_i⁻¹` satisfies
//! `K_i C_i S_i = W_i C_i`:
//!
//! * [`synthesize_ssc`]: mean-square stabilizing gains.
//! * [`synthesize_sogcc`]: guaranteed-cost gains minimizing `μ = γ²` for a
//!   fixed `λ`, with the extra coupling `D_i S_i = Y_i D_i`, `E_i S_i = Y_i E_i`.
//!
//! The equality couplings are restrictive (diagonal `D_i` or `E_i` force a
//! diagonal `S_i`), so [`refine_guaranteed_cost`] offers an alternative
//! descent that alternates the guaranteed-cost analysis in `P` with a convex
//! step in `K` at fixed `P`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::analysis::{centered_guaranteed_cost_p, guaranteed_cost_gamma, ms_spectral_radius, ms_stability_test, Diagnostics, GammaCertificate, StabilityCertificate};
use crate::error::{Error, Result};
use crate::lmi::{AffineMatrixExpr, BlockMatrix, LmiProblem, MatVar, Objective, ScalarVar, SdpSolution, SdpStatus, Strictness, VarValues};
use crate::matrix::{is_positive_definite, max_sym_eigenvalue, serde_matrix_vec, sym_condition_number};
use crate::model::{close_loop, Controller, PemAdmModel};

/// Default `λ` for the guaranteed-cost synthesis.
pub const DEFAULT_LAMBDA: f64 = 1e-5;
/// Gains are not recovered from a `Y_i` worse conditioned than this.
pub const MAX_GAIN_CONDITION: f64 = 1e10;
const MIN_RELAX: f64 = 1e-4;
/// Tolerance on the equality-coupling residuals of a returned solution.
pub const RESIDUAL_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisKind {
    Ssc,
    Sogcc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisStatus {
    Feasible,
    Infeasible,
    /// The solver neither certified nor refuted the conditions.
    Inconclusive,
    /// A solution was found but gains could not be recovered reliably.
    Failed,
}

/// Closed-loop checks of synthesized gains, independent of the synthesis LMI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopCheck {
    pub stability: StabilityCertificate,
    pub spectral_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub kind: SynthesisKind,
    pub status: SynthesisStatus,
    pub controller: Option<Controller>,
    #[serde(rename = "S", with = "serde_matrix_vec")]
    pub s: Vec<DMatrix<f64>>,
    #[serde(rename = "Y", with = "serde_matrix_vec")]
    pub y: Vec<DMatrix<f64>>,
    #[serde(rename = "W", with = "serde_matrix_vec")]
    pub w: Vec<DMatrix<f64>>,
    pub gamma: Option<f64>,
    pub mu: Option<f64>,
    pub lambda: Option<f64>,
    /// Max over modes of `‖C_i S_i − Y_i C_i‖_max` (and the `D`, `E` analogues).
    pub residuals: f64,
    /// Max over modes of `‖K_i Y_i − W_i‖_max / ‖W_i‖_max`.
    pub gain_residual: f64,
    /// Condition number of each `Y_i`.
    pub condition_numbers: Vec<f64>,
    /// Largest eigenvalue over the strict synthesis blocks at the solution.
    pub margin: f64,
    pub closed_loop: Option<ClosedLoopCheck>,
    pub diagnostics: Diagnostics,
    pub message: String,
}

impl SynthesisResult {
    pub fn is_feasible(&self) -> bool {
        self.status == SynthesisStatus::Feasible
    }

    fn unsolved(kind: SynthesisKind, status: SynthesisStatus, lambda: Option<f64>, sol: &SdpSolution, message: String) -> Self {
        Self {
            kind,
            status,
            controller: None,
            s: vec![],
            y: vec![],
            w: vec![],
            gamma: None,
            mu: None,
            lambda,
            residuals: f64::NAN,
            gain_residual: f64::NAN,
            condition_numbers: vec![],
            margin: sol.min_margin,
            closed_loop: None,
            diagnostics: Diagnostics::from_solution(sol),
            message,
        }
    }
}

/// `K = W Y⁻¹` with the conditioning check.
pub fn recover_gain(w: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let cond = sym_condition_number(y);
    if !cond.is_finite() || cond > MAX_GAIN_CONDITION {
        return Err(Error::Lmi(format!("Y is numerically singular (condition number {cond:.3e})")));
    }
    let kt = y
        .transpose()
        .lu()
        .solve(&w.transpose())
        .ok_or_else(|| Error::Lmi("Y is singular".into()))?;
    Ok((kt.transpose(), cond))
}

fn sqrt_prob(model: &PemAdmModel, i: usize, j: usize) -> f64 {
    model.transition.prob(i, j).sqrt()
}

struct Vars {
    s: Vec<MatVar>,
    y: Vec<MatVar>,
    w: Vec<MatVar>,
}

fn declare(prob: &mut LmiProblem, model: &PemAdmModel) -> Vars {
    let (n1, n2, n3) = (model.state_dim(), model.input_dim(), model.output_dim());
    let nm = model.mode_count();
    Vars {
        s: (0..nm).map(|i| prob.sym_var(&format!("S{i}"), n1)).collect(),
        y: (0..nm).map(|i| prob.sym_var(&format!("Y{i}"), n3)).collect(),
        w: (0..nm).map(|i| prob.mat_var(&format!("W{i}"), n2, n3)).collect(),
    }
}

/// `G S_i − Y_i G = 0`, for `G` one of `C_i`, `D_i`, `E_i`.
fn coupling(s: &MatVar, y: &MatVar, g: &DMatrix<f64>) -> AffineMatrixExpr {
    let (r, c) = g.shape();
    AffineMatrixExpr::lr(g, s, &DMatrix::identity(c, c)) - AffineMatrixExpr::lr(&DMatrix::identity(r, r), y, g)
}

/// `A S_i + B W_i C_i`
fn closed_loop_s(model: &PemAdmModel, v: &Vars, i: usize) -> AffineMatrixExpr {
    let n1 = model.state_dim();
    AffineMatrixExpr::lr(&model.a, &v.s[i], &DMatrix::identity(n1, n1))
        + AffineMatrixExpr::lr(&model.b, &v.w[i], &model.modes[i].c)
}

/// `[−S_i, (M_i(A S_i + B W_i C_i))ᵀ; ∗, −Λ]`, with the `M_i` rows spread
/// over one block per successor mode.
fn ssc_block(model: &PemAdmModel, v: &Vars, i: usize) -> Result<AffineMatrixExpr> {
    let n1 = model.state_dim();
    let nm = model.mode_count();
    let mut bm = BlockMatrix::new(&vec![n1; nm + 1]);
    bm.set(0, 0, -AffineMatrixExpr::var(&v.s[i]));
    let acl = closed_loop_s(model, v, i);
    for j in 0..nm {
        let sp = sqrt_prob(model, i, j);
        if sp != 0.0 {
            bm.set(1 + j, 0, acl.clone().scale(sp));
        }
        bm.set(1 + j, 1 + j, -AffineMatrixExpr::var(&v.s[j]));
    }
    bm.build()
}

/// Largest eigenvalue over the strict constraints at `values`.
fn strict_margin(prob: &LmiProblem, values: &VarValues) -> f64 {
    prob.constraints()
        .iter()
        .filter(|c| c.strictness == Strictness::Strict)
        .map(|c| max_sym_eigenvalue(&c.expr.evaluate(values)))
        .fold(f64::NEG_INFINITY, f64::max)
}

struct Extracted {
    s: Vec<DMatrix<f64>>,
    y: Vec<DMatrix<f64>>,
    w: Vec<DMatrix<f64>>,
}

fn extract(values: &VarValues, v: &Vars, normalize: bool) -> Extracted {
    let get = |vs: &[MatVar]| vs.iter().map(|x| values.matrix(x).clone()).collect::<Vec<_>>();
    let mut e = Extracted { s: get(&v.s), y: get(&v.y), w: get(&v.w) };
    if normalize {
        // The stabilizing conditions are homogeneous; rescale to λmax(S) = 1.
        let top = e.s.iter().map(max_sym_eigenvalue).fold(0.0, f64::max);
        if top > 0.0 && top.is_finite() {
            for m in e.s.iter_mut().chain(e.y.iter_mut()).chain(e.w.iter_mut()) {
                *m /= top;
            }
        }
    }
    e
}

fn coupling_residual(model: &PemAdmModel, e: &Extracted, with_noise: bool) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, m) in model.modes.iter().enumerate() {
        let mut gs = vec![&m.c];
        if with_noise {
            gs.push(&m.d);
            gs.push(&m.e);
        }
        for g in gs {
            worst = worst.max((g * &e.s[i] - &e.y[i] * g).amax());
        }
    }
    worst
}

/// Shared tail of both LMI routes: status mapping, gain recovery and the
/// closed-loop checks.
fn finish(
    kind: SynthesisKind,
    model: &PemAdmModel,
    prob: &LmiProblem,
    sol: SdpSolution,
    v: &Vars,
    mu: Option<&ScalarVar>,
    lambda: Option<f64>,
    infeasible_message: &str,
) -> SynthesisResult {
    match sol.status {
        SdpStatus::Infeasible => {
            return SynthesisResult::unsolved(kind, SynthesisStatus::Infeasible, lambda, &sol, infeasible_message.into())
        }
        SdpStatus::Failed => {
            let msg = format!("solver failed: {}", sol.message);
            return SynthesisResult::unsolved(kind, SynthesisStatus::Failed, lambda, &sol, msg);
        }
        SdpStatus::Optimal | SdpStatus::Inaccurate => {}
    }
    let margin = strict_margin(prob, &sol.values);
    let e = extract(&sol.values, v, kind == SynthesisKind::Ssc);
    let residuals = coupling_residual(model, &e, kind == SynthesisKind::Sogcc);
    let verified = margin < 0.0 && e.s.iter().all(is_positive_definite) && e.y.iter().all(is_positive_definite);
    let mu_v = mu.map(|m| sol.values.scalar(m).max(0.0));

    let mut result = SynthesisResult {
        kind,
        status: SynthesisStatus::Feasible,
        controller: None,
        s: e.s.clone(),
        y: e.y.clone(),
        w: e.w.clone(),
        gamma: mu_v.map(f64::sqrt),
        mu: mu_v,
        lambda,
        residuals,
        gain_residual: f64::NAN,
        condition_numbers: e.y.iter().map(sym_condition_number).collect(),
        margin,
        closed_loop: None,
        diagnostics: Diagnostics::from_solution(&sol),
        message: String::new(),
    };
    if !verified || residuals > RESIDUAL_TOL {
        result.status = SynthesisStatus::Inconclusive;
        result.message =
            format!("solution does not verify (margin {margin:.3e}, coupling residual {residuals:.3e})");
        return result;
    }

    let mut gains = Vec::with_capacity(e.w.len());
    let mut gain_residual: f64 = 0.0;
    for (i, (w, y)) in e.w.iter().zip(&e.y).enumerate() {
        match recover_gain(w, y) {
            Ok((k, _)) => {
                gain_residual = gain_residual.max((&k * y - w).amax() / w.amax().max(f64::MIN_POSITIVE));
                gains.push(k);
            }
            Err(err) => {
                result.status = SynthesisStatus::Failed;
                result.message = format!("mode {i}: {err}");
                return result;
            }
        }
    }
    let controller = Controller::new(gains);
    result.gain_residual = gain_residual;
    result.closed_loop = close_loop(model, &controller)
        .ok()
        .map(|cl| ClosedLoopCheck { stability: ms_stability_test(&cl), spectral_radius: ms_spectral_radius(&cl) });
    result.controller = Some(controller);
    result
}

/// Mean-square stabilizing static output feedback: find `S_i ≻ 0`, `Y_i ≻ 0`,
/// `W_i` with `C_i S_i = Y_i C_i` and
/// `[−S_i, (M_i(A S_i + B W_i C_i))ᵀ; ∗, −Λ] ≺ 0`,
/// `M_i = [√p_i1 I, …, √p_iN I]ᵀ`, `Λ = diag(S_1, …, S_N)`.
pub fn synthesize_ssc(model: &PemAdmModel) -> Result<SynthesisResult> {
    let report = crate::model::validate_model(model);
    if !report.is_valid() {
        return Err(Error::InvalidModel(report.to_string()));
    }
    let mut prob = LmiProblem::new();
    let v = declare(&mut prob, model);
    for i in 0..model.mode_count() {
        prob.add_lmi(&format!("stabilization mode {i}"), ssc_block(model, &v, i)?);
        prob.add_lmi(&format!("S{i} > 0"), -AffineMatrixExpr::var(&v.s[i]));
        prob.add_lmi(&format!("Y{i} > 0"), -AffineMatrixExpr::var(&v.y[i]));
        prob.add_equality(&format!("C S = Y C mode {i}"), coupling(&v.s[i], &v.y[i], &model.modes[i].c));
    }
    let sol = prob.solve_feasibility();
    Ok(finish(
        SynthesisKind::Ssc,
        model,
        &prob,
        sol,
        &v,
        None,
        None,
        "no stabilizing static output-feedback gain is certified by the synthesis condition",
    ))
}

/// Guaranteed-cost synthesis at fixed `λ`: minimize `μ = γ²` subject to the
/// 8×8 block condition below, `S_i ≻ λI`, `Y_i ≻ 0` and
/// `C_i S_i = Y_i C_i`, `D_i S_i = Y_i D_i`, `E_i S_i = Y_i E_i`.
///
/// ```text
/// ⎡ −S_i  0       0       0     (W_iC_i)ᵀ  0           (M_i(AS_i+BW_iC_i))ᵀ  S_i   ⎤
/// ⎢ ∗     −μλ²I   0       0     (W_iE_i)ᵀ  0           (M_iBW_iE_i)ᵀ         0     ⎥
/// ⎢ ∗     ∗       −μλ²I   (W_iD_i)ᵀ  0     (M_iBW_iD_i)ᵀ  0                  0     ⎥
/// ⎢ ∗     ∗       ∗       −R⁻¹  0          0           0                     0     ⎥ ≺ 0
/// ⎢ ∗     ∗       ∗       ∗     −R⁻¹       0           0                     0     ⎥
/// ⎢ ∗     ∗       ∗       ∗     ∗          −Λ          0                     0     ⎥
/// ⎢ ∗     ∗       ∗       ∗     ∗          ∗           −Λ                    0     ⎥
/// ⎣ ∗     ∗       ∗       ∗     ∗          ∗           ∗                     −Q⁻¹  ⎦
/// ```
///
/// The block layout needs the noise and bias dimensions to equal the state
/// dimension.
pub fn synthesize_sogcc(model: &PemAdmModel, q: &DMatrix<f64>, r: &DMatrix<f64>, lambda: f64) -> Result<SynthesisResult> {
    let report = crate::model::validate_model(model);
    if !report.is_valid() {
        return Err(Error::InvalidModel(report.to_string()));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    let (n1, n2) = (model.state_dim(), model.input_dim());
    let nm = model.mode_count();
    if q.shape() != (n1, n1) || r.shape() != (n2, n2) {
        return Err(Error::Dimension(format!("Q must be {n1}x{n1} and R {n2}x{n2}")));
    }
    if !is_positive_definite(q) || !is_positive_definite(r) {
        return Err(Error::InvalidArgument("Q and R must be positive definite".into()));
    }
    let (nw, nv) = (model.noise_dim(), model.modes[0].e.ncols());
    if nw != n1 || nv != n1 {
        return Err(Error::Dimension(format!(
            "guaranteed-cost synthesis needs noise and bias dimensions equal to the state dimension ({n1}), got {nw} and {nv}"
        )));
    }
    let q_inv = q.clone().try_inverse().ok_or_else(|| Error::InvalidArgument("Q is singular".into()))?;
    let r_inv = r.clone().try_inverse().ok_or_else(|| Error::InvalidArgument("R is singular".into()))?;

    let mut prob = LmiProblem::new();
    let v = declare(&mut prob, model);
    let mu = prob.scalar_var("mu", Some(0.0));
    let eye_n = DMatrix::<f64>::identity(n1, n1);
    let eye_u = DMatrix::<f64>::identity(n2, n2);
    let lam2 = lambda * lambda;

    // Block indices: 0..=4 as printed, then N blocks for each −Λ, then −Q⁻¹.
    let (b6, b7, b8) = (5, 5 + nm, 5 + 2 * nm);
    let mut sizes = vec![n1, n1, n1, n2, n2];
    sizes.extend(std::iter::repeat_n(n1, 2 * nm));
    sizes.push(n1);

    for i in 0..nm {
        let pm = &model.modes[i];
        let s_i = AffineMatrixExpr::var(&v.s[i]);
        let wc = AffineMatrixExpr::lr(&eye_u, &v.w[i], &pm.c);
        let we = AffineMatrixExpr::lr(&eye_u, &v.w[i], &pm.e);
        let wd = AffineMatrixExpr::lr(&eye_u, &v.w[i], &pm.d);
        let bwe = AffineMatrixExpr::lr(&model.b, &v.w[i], &pm.e);
        let bwd = AffineMatrixExpr::lr(&model.b, &v.w[i], &pm.d);
        let acl = closed_loop_s(model, &v, i);

        let mut bm = BlockMatrix::new(&sizes);
        bm.set(0, 0, -s_i.clone())
            .set(4, 0, wc)
            .set(b8, 0, s_i)
            .set(1, 1, -AffineMatrixExpr::scalar(&mu, &(&eye_n * lam2)))
            .set(4, 1, we)
            .set(2, 2, -AffineMatrixExpr::scalar(&mu, &(&eye_n * lam2)))
            .set(3, 2, wd)
            .set(3, 3, AffineMatrixExpr::constant(-&r_inv))
            .set(4, 4, AffineMatrixExpr::constant(-&r_inv))
            .set(b8, b8, AffineMatrixExpr::constant(-&q_inv));
        for j in 0..nm {
            let sp = sqrt_prob(model, i, j);
            if sp != 0.0 {
                bm.set(b7 + j, 0, acl.clone().scale(sp))
                    .set(b7 + j, 1, bwe.clone().scale(sp))
                    .set(b6 + j, 2, bwd.clone().scale(sp));
            }
            bm.set(b6 + j, b6 + j, -AffineMatrixExpr::var(&v.s[j]))
                .set(b7 + j, b7 + j, -AffineMatrixExpr::var(&v.s[j]));
        }
        prob.add_lmi(&format!("guaranteed cost mode {i}"), bm.build()?);
        prob.add_lmi(&format!("S{i} > lambda I"), AffineMatrixExpr::constant(&eye_n * lambda) - AffineMatrixExpr::var(&v.s[i]));
        prob.add_lmi(&format!("Y{i} > 0"), -AffineMatrixExpr::var(&v.y[i]));
        prob.add_equality(&format!("C S = Y C mode {i}"), coupling(&v.s[i], &v.y[i], &pm.c));
        prob.add_equality(&format!("D S = Y D mode {i}"), coupling(&v.s[i], &v.y[i], &pm.d));
        prob.add_equality(&format!("E S = Y E mode {i}"), coupling(&v.s[i], &v.y[i], &pm.e));
    }
    prob.minimize(Objective::scalar(&mu));
    let sol = prob.solve_min();
    let msg = format!("guaranteed-cost conditions are infeasible for lambda = {lambda:e}; try a smaller lambda");
    Ok(finish(SynthesisKind::Sogcc, model, &prob, sol, &v, Some(&mu), Some(lambda), &msg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineOptions {
    pub max_iter: usize,
    /// Stop once a round lowers `μ` by less than this fraction.
    pub rel_tol: f64,
    /// The gain step uses the most interior `P` certifying `μ·(1 + relax)`
    /// rather than the tight minimizer, which would leave no room to move.
    pub relax: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { max_iter: 200, rel_tol: 1e-5, relax: 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedResult {
    pub status: SynthesisStatus,
    pub controller: Controller,
    pub gamma: f64,
    pub mu: f64,
    /// Certified `μ` of each accepted controller, starting with the initial one.
    pub history: Vec<f64>,
    /// Guaranteed-cost certificate of the returned controller.
    pub certificate: GammaCertificate,
    pub message: String,
}

/// Smallest `μ` over gains `K` for fixed `P`: Schur complements of the
/// guaranteed-cost blocks make the condition affine in `K`.
fn gain_step(model: &PemAdmModel, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &[DMatrix<f64>]) -> Result<Option<(Controller, f64)>> {
    let (n1, n2, n3) = (model.state_dim(), model.input_dim(), model.output_dim());
    let (nw, nv) = (model.noise_dim(), model.modes[0].e.ncols());
    let nm = model.mode_count();
    let r_inv = r.clone().try_inverse().ok_or_else(|| Error::InvalidArgument("R is singular".into()))?;
    let eye_u = DMatrix::<f64>::identity(n2, n2);

    let mut prob = LmiProblem::new();
    let kv: Vec<MatVar> = (0..nm).map(|i| prob.mat_var(&format!("K{i}"), n2, n3)).collect();
    let mu = prob.scalar_var("mu", Some(0.0));
    for i in 0..nm {
        let pm = &model.modes[i];
        let pbar = (0..nm).fold(DMatrix::zeros(n1, n1), |acc, j| acc + &p[j] * model.transition.prob(i, j));
        let pbar_inv = pbar
            .try_inverse()
            .ok_or_else(|| Error::Lmi(format!("mixed Lyapunov matrix of mode {i} is singular")))?;
        let kc = AffineMatrixExpr::lr(&eye_u, &kv[i], &pm.c);
        let ke = AffineMatrixExpr::lr(&eye_u, &kv[i], &pm.e);
        let kd = AffineMatrixExpr::lr(&eye_u, &kv[i], &pm.d);
        let acl = AffineMatrixExpr::lr(&model.b, &kv[i], &pm.c).add_constant(&model.a);
        let ecl = AffineMatrixExpr::lr(&model.b, &kv[i], &pm.e);
        let dcl = AffineMatrixExpr::lr(&model.b, &kv[i], &pm.d);

        let mut xv = BlockMatrix::new(&[n1, nv, n1, n2]);
        xv.set(0, 0, AffineMatrixExpr::constant(q - &p[i]))
            .set(1, 1, -AffineMatrixExpr::scalar(&mu, &DMatrix::identity(nv, nv)))
            .set(2, 0, acl)
            .set(2, 1, ecl)
            .set(2, 2, AffineMatrixExpr::constant(-&pbar_inv))
            .set(3, 0, kc)
            .set(3, 1, ke)
            .set(3, 3, AffineMatrixExpr::constant(-&r_inv));
        prob.add_lmi_nonstrict(&format!("state and bias mode {i}"), xv.build()?);

        let mut w = BlockMatrix::new(&[nw, n1, n2]);
        w.set(0, 0, -AffineMatrixExpr::scalar(&mu, &DMatrix::identity(nw, nw)))
            .set(1, 0, dcl)
            .set(1, 1, AffineMatrixExpr::constant(-&pbar_inv))
            .set(2, 0, kd)
            .set(2, 2, AffineMatrixExpr::constant(-&r_inv));
        prob.add_lmi_nonstrict(&format!("noise mode {i}"), w.build()?);
    }
    prob.minimize(Objective::scalar(&mu));
    let sol = prob.solve_min();
    if !matches!(sol.status, SdpStatus::Optimal | SdpStatus::Inaccurate) {
        return Ok(None);
    }
    let gains = kv.iter().map(|k| sol.values.matrix(k).clone()).collect();
    Ok(Some((Controller::new(gains), sol.values.scalar(&mu))))
}

/// Guaranteed-cost descent from an initial stabilizing controller: alternate
/// the analysis (smallest `μ` and its `P` for the current gains) with the
/// convex gain step at fixed `P`. Every reported `μ` is certified by the
/// analysis of the returned gains, so the sequence is non-increasing.
pub fn refine_guaranteed_cost(
    model: &PemAdmModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    initial: &Controller,
    opts: &RefineOptions,
) -> Result<RefinedResult> {
    initial.check_against(model)?;
    let analyze = |k: &Controller| -> Result<GammaCertificate> {
        let cl = close_loop(model, k)?;
        guaranteed_cost_gamma(&cl, k, model, q, r)
    };
    let first = analyze(initial)?;
    if !first.feasible {
        let status = if first.inconclusive { SynthesisStatus::Inconclusive } else { SynthesisStatus::Infeasible };
        return Ok(RefinedResult {
            status,
            controller: initial.clone(),
            gamma: f64::NAN,
            mu: f64::NAN,
            history: vec![],
            certificate: first,
            message: "initial controller has no guaranteed cost".into(),
        });
    }
    let mut best = (initial.clone(), first);
    let mut history = vec![best.1.mu];
    let mut message = format!("stopped after {} rounds", opts.max_iter);
    let mut relax = opts.relax;
    for round in 0..opts.max_iter {
        let cl = close_loop(model, &best.0)?;
        let p = centered_guaranteed_cost_p(&cl, &best.0, model, q, r, best.1.mu * (1.0 + relax))?
            .unwrap_or_else(|| best.1.p.clone());
        let candidate = match gain_step(model, q, r, &p)? {
            Some((k, _)) => Some(analyze(&k)?).filter(|c| c.feasible).map(|c| (k, c)),
            None => None,
        };
        match candidate {
            Some((k, cert)) if cert.mu < best.1.mu => {
                let prev = best.1.mu;
                history.push(cert.mu);
                best = (k, cert);
                if prev - best.1.mu <= opts.rel_tol * prev {
                    message = format!("converged after {} rounds", round + 1);
                    break;
                }
            }
            // No progress: look for gains closer to the current ones.
            _ => {
                relax /= 4.0;
                if relax < MIN_RELAX {
                    message = format!("converged after {} rounds", round + 1);
                    break;
                }
            }
        }
    }
    let (controller, certificate) = best;
    Ok(RefinedResult {
        status: SynthesisStatus::Feasible,
        controller,
        gamma: certificate.gamma,
        mu: certificate.mu,
        history,
        certificate,
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PerceptionMode, TransitionMatrix};
    use crate::scenarios::{build_car_following, reference_sogcc_controller, CarFollowingParams};

    fn scalar_model(a: f64, b: f64) -> PemAdmModel {
        let one = DMatrix::from_element(1, 1, 1.0);
        PemAdmModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            vec![PerceptionMode::new(one, DMatrix::zeros(1, 1), DMatrix::zeros(1, 1))],
            TransitionMatrix::identity(1),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn recover_gain_inverts_y() {
        let y = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let w = DMatrix::from_row_slice(1, 2, &[1.0, -3.0]);
        let (k, cond) = recover_gain(&w, &y).unwrap();
        assert!((&k * &y - &w).amax() < 1e-14);
        assert!(cond > 1.0);
    }

    #[test]
    fn recover_gain_rejects_singular_y() {
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-12]);
        assert!(recover_gain(&DMatrix::zeros(1, 2), &y).is_err());
    }

    #[test]
    fn scalar_stabilizable() {
        let res = synthesize_ssc(&scalar_model(0.5, 1.0)).unwrap();
        assert!(res.is_feasible(), "{res:?}");
        let k = res.controller.unwrap().gains[0][(0, 0)];
        assert!((0.5 + k).abs() < 1.0);
        assert!(res.residuals <= RESIDUAL_TOL && res.gain_residual <= 1e-8);
    }

    #[test]
    fn uncontrollable_unstable_is_infeasible() {
        let res = synthesize_ssc(&scalar_model(2.0, 0.0)).unwrap();
        assert_eq!(res.status, SynthesisStatus::Infeasible);
        assert!(res.controller.is_none());
    }

    #[test]
    fn sogcc_rejects_nonsquare_channels() {
        let m = PemAdmModel::new(
            DMatrix::identity(2, 2) * 0.5,
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            vec![PerceptionMode::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), DMatrix::zeros(2, 2))],
            TransitionMatrix::identity(1),
            0.0,
        )
        .unwrap();
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        assert!(matches!(synthesize_sogcc(&m, &q, &r, 1e-5), Err(Error::Dimension(_))));
    }

    #[test]
    fn refinement_does_not_increase_mu() {
        let (model, _) = build_car_following(&CarFollowingParams::default()).unwrap();
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![10.0, 10.0]));
        let r = DMatrix::identity(1, 1);
        let opts = RefineOptions { max_iter: 3, ..Default::default() };
        let res = refine_guaranteed_cost(&model, &q, &r, &reference_sogcc_controller(), &opts).unwrap();
        assert_eq!(res.status, SynthesisStatus::Feasible);
        assert!(res.mu <= res.history[0]);
        assert!(res.certificate.feasible);
    }
}
