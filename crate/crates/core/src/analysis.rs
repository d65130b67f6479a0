//! Closed-loop analysis: the coupled-Lyapunov mean-square stability test, the
//! second-moment spectral-radius oracle, guaranteed-cost levels and the
//! resulting cost bound, plus the one-step drift constants of `V(x, r) = xᵀP_r x`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmi::{AffineMatrixExpr, BlockMatrix, LmiProblem, MatVar, Objective, ScalarVar, SdpSolution, SdpStatus};
use crate::matrix::{is_positive_definite, max_sym_eigenvalue, serde_matrix, serde_matrix_vec, spectral_radius};
use crate::model::{close_loop, ClosedLoopModel, Controller, PemAdmModel};
use crate::sim::BiasSignal;

/// Solver outcome attached to every certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub status: SdpStatus,
    pub backend: String,
    pub iterations: usize,
    pub slack: f64,
    pub message: String,
}

impl Diagnostics {
    pub(crate) fn from_solution(sol: &SdpSolution) -> Self {
        Self {
            status: sol.status,
            backend: sol.backend.clone(),
            iterations: sol.iterations,
            slack: sol.slack,
            message: sol.message.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub feasible: bool,
    /// Set when the solver neither certified nor refuted feasibility.
    pub inconclusive: bool,
    #[serde(rename = "P", with = "serde_matrix_vec")]
    pub p: Vec<DMatrix<f64>>,
    /// Largest eigenvalue over the coupled-Lyapunov blocks and `−P_i` at `P`.
    pub margin: f64,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaCertificate {
    pub feasible: bool,
    pub inconclusive: bool,
    pub gamma: f64,
    /// `γ²`, the quantity actually minimized.
    pub mu: f64,
    #[serde(rename = "P", with = "serde_matrix_vec")]
    pub p: Vec<DMatrix<f64>>,
    #[serde(rename = "Q", with = "serde_matrix")]
    pub q: DMatrix<f64>,
    #[serde(rename = "R", with = "serde_matrix")]
    pub r: DMatrix<f64>,
    /// Largest eigenvalue of the guaranteed-cost blocks at `(P, μ)`.
    pub margin: f64,
    pub diagnostics: Diagnostics,
}

/// Coupled-Lyapunov block `Σ_j p_ij A_iᵀ P_j A_i − P_i` of mode `i`.
pub fn lyapunov_block(cl: &ClosedLoopModel, p: &[DMatrix<f64>], i: usize) -> DMatrix<f64> {
    let a = &cl.modes[i].a;
    let pbar = mixed(cl, p, i);
    a.transpose() * pbar * a - &p[i]
}

/// `Σ_j p_ij P_j`
fn mixed(cl: &ClosedLoopModel, p: &[DMatrix<f64>], i: usize) -> DMatrix<f64> {
    let n = cl.state_dim();
    (0..cl.mode_count()).fold(DMatrix::zeros(n, n), |acc, j| acc + &p[j] * cl.transition.prob(i, j))
}

fn lyapunov_margin(cl: &ClosedLoopModel, p: &[DMatrix<f64>]) -> f64 {
    (0..cl.mode_count())
        .flat_map(|i| [max_sym_eigenvalue(&lyapunov_block(cl, p, i)), max_sym_eigenvalue(&-&p[i])])
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Mean-square stability test: find `P_i ≻ 0` with
/// `Σ_j p_ij A_iᵀ P_j A_i − P_i ≺ 0` for every mode.
///
/// A feasible verdict is only returned after the blocks have been re-evaluated
/// at the returned `P` with a plain eigenvalue routine.
pub fn ms_stability_test(cl: &ClosedLoopModel) -> StabilityCertificate {
    let n = cl.state_dim();
    let nm = cl.mode_count();
    let mut prob = LmiProblem::new();
    let pv: Vec<MatVar> = (0..nm).map(|i| prob.sym_var(&format!("P{i}"), n)).collect();
    for i in 0..nm {
        let a = &cl.modes[i].a;
        let mut e = -AffineMatrixExpr::var(&pv[i]);
        for j in 0..nm {
            let pij = cl.transition.prob(i, j);
            if pij != 0.0 {
                e = e + AffineMatrixExpr::lr(&(a.transpose() * pij), &pv[j], a);
            }
        }
        prob.add_lmi(&format!("lyapunov mode {i}"), e);
        prob.add_lmi(&format!("P{i} > 0"), -AffineMatrixExpr::var(&pv[i]));
    }
    let sol = prob.solve_feasibility();
    let diagnostics = Diagnostics::from_solution(&sol);
    let mut p: Vec<DMatrix<f64>> =
        if sol.values.is_empty() { vec![] } else { pv.iter().map(|v| sol.values.matrix(v).clone()).collect() };

    // The condition is homogeneous in P; report it normalized to λmax = 1.
    if !p.is_empty() {
        let top = p.iter().map(max_sym_eigenvalue).fold(0.0, f64::max);
        if top > 0.0 && top.is_finite() {
            p.iter_mut().for_each(|m| *m /= top);
        }
    }
    let margin = if p.is_empty() { f64::NAN } else { lyapunov_margin(cl, &p) };
    let verified = !p.is_empty() && margin < 0.0 && p.iter().all(is_positive_definite);
    let (feasible, inconclusive) = match sol.status {
        SdpStatus::Optimal if verified => (true, false),
        SdpStatus::Optimal => (false, true),
        SdpStatus::Infeasible => (false, false),
        SdpStatus::Inaccurate | SdpStatus::Failed => (false, true),
    };
    StabilityCertificate { feasible, inconclusive, p, margin, diagnostics }
}

/// Second-moment operator: the `N·n² × N·n²` matrix whose `(j, i)` block is
/// `p_ij (A_i ⊗ A_i)`.
pub fn second_moment_operator(cl: &ClosedLoopModel) -> DMatrix<f64> {
    let n = cl.state_dim();
    let nm = cl.mode_count();
    let b = n * n;
    let mut out = DMatrix::zeros(nm * b, nm * b);
    for i in 0..nm {
        let k = cl.modes[i].a.kronecker(&cl.modes[i].a);
        for j in 0..nm {
            let pij = cl.transition.prob(i, j);
            if pij != 0.0 {
                out.view_mut((j * b, i * b), (b, b)).copy_from(&(&k * pij));
            }
        }
    }
    out
}

/// Spectral radius of [`second_moment_operator`]; below one iff the
/// noise-free loop is mean-square stable.
pub fn ms_spectral_radius(cl: &ClosedLoopModel) -> f64 {
    spectral_radius(&second_moment_operator(cl))
}

/// Blocks of the guaranteed-cost condition at given `(P, μ)`, assembled
/// directly without the LMI layer.
pub fn guaranteed_cost_blocks(
    model: &PemAdmModel,
    controller: &Controller,
    cl: &ClosedLoopModel,
    p: &[DMatrix<f64>],
    mu: f64,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Vec<DMatrix<f64>> {
    let n1 = model.state_dim();
    let nv = model.modes[0].e.ncols();
    let nw = model.noise_dim();
    (0..cl.mode_count())
        .map(|i| {
            let m = &cl.modes[i];
            let pm = &model.modes[i];
            let k = &controller.gains[i];
            let (kc, ke, kd) = (k * &pm.c, k * &pm.e, k * &pm.d);
            let pbar = mixed(cl, p, i);
            let p11 = m.a.transpose() * &pbar * &m.a - &p[i] + q + kc.transpose() * r * &kc;
            let p12 = m.a.transpose() * &pbar * &m.e + kc.transpose() * r * &ke;
            let p22 = m.e.transpose() * &pbar * &m.e + ke.transpose() * r * &ke - DMatrix::identity(nv, nv) * mu;
            let p33 = m.d.transpose() * &pbar * &m.d + kd.transpose() * r * &kd - DMatrix::identity(nw, nw) * mu;
            let mut out = DMatrix::zeros(n1 + nv + nw, n1 + nv + nw);
            out.view_mut((0, 0), (n1, n1)).copy_from(&p11);
            out.view_mut((0, n1), (n1, nv)).copy_from(&p12);
            out.view_mut((n1, 0), (nv, n1)).copy_from(&p12.transpose());
            out.view_mut((n1, n1), (nv, nv)).copy_from(&p22);
            out.view_mut((n1 + nv, n1 + nv), (nw, nw)).copy_from(&p33);
            out
        })
        .collect()
}

fn check_weights(model: &PemAdmModel, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    let (n1, n2) = (model.state_dim(), model.input_dim());
    if q.shape() != (n1, n1) || r.shape() != (n2, n2) {
        return Err(Error::Dimension(format!("Q must be {n1}x{n1} and R {n2}x{n2}")));
    }
    if !is_positive_definite(q) || !is_positive_definite(r) {
        return Err(Error::InvalidArgument("Q and R must be positive definite".into()));
    }
    Ok(())
}

/// Smallest `γ` certified by the guaranteed-cost condition for this
/// controller, found by minimizing `μ = γ²`.
pub fn guaranteed_cost_gamma(
    cl: &ClosedLoopModel,
    controller: &Controller,
    model: &PemAdmModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<GammaCertificate> {
    check_weights(model, q, r)?;
    let expected = close_loop(model, controller)?;
    let consistent = expected.modes.len() == cl.modes.len()
        && expected.modes.iter().zip(&cl.modes).all(|(a, b)| {
            (&a.a - &b.a).amax() <= 1e-9 * (1.0 + a.a.amax())
                && (&a.d - &b.d).amax() <= 1e-9 * (1.0 + a.d.amax())
                && (&a.e - &b.e).amax() <= 1e-9 * (1.0 + a.e.amax())
        });
    if !consistent {
        return Err(Error::InvalidArgument("closed loop does not match the model and controller".into()));
    }

    let (mut prob, pv, mu) = guaranteed_cost_problem(cl, controller, model, q, r, None)?;
    let mu = mu.expect("free mu");
    prob.minimize(Objective::scalar(&mu));
    let sol = prob.solve_min();
    let diagnostics = Diagnostics::from_solution(&sol);

    let (p, mu_v) = if sol.values.is_empty() {
        (vec![], f64::NAN)
    } else {
        (pv.iter().map(|v| sol.values.matrix(v).clone()).collect::<Vec<_>>(), sol.values.scalar(&mu).max(0.0))
    };
    let margin = if p.is_empty() {
        f64::NAN
    } else {
        guaranteed_cost_blocks(model, controller, cl, &p, mu_v, q, r)
            .iter()
            .map(max_sym_eigenvalue)
            .chain(p.iter().map(|m| max_sym_eigenvalue(&-m)))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let verified = !p.is_empty() && margin < 0.0;
    let (feasible, inconclusive) = match sol.status {
        SdpStatus::Optimal | SdpStatus::Inaccurate if verified => (true, false),
        SdpStatus::Infeasible => (false, false),
        _ => (false, true),
    };
    Ok(GammaCertificate {
        feasible,
        inconclusive,
        gamma: mu_v.sqrt(),
        mu: mu_v,
        p,
        q: q.clone(),
        r: r.clone(),
        margin,
        diagnostics,
    })
}

/// Guaranteed-cost LMIs in `P_i`, and in `μ` unless it is fixed.
fn guaranteed_cost_problem(
    cl: &ClosedLoopModel,
    controller: &Controller,
    model: &PemAdmModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    fixed_mu: Option<f64>,
) -> Result<(LmiProblem, Vec<MatVar>, Option<ScalarVar>)> {
    let n1 = model.state_dim();
    let nv = model.modes[0].e.ncols();
    let nw = model.noise_dim();
    let nm = model.mode_count();
    let mut prob = LmiProblem::new();
    let pv: Vec<MatVar> = (0..nm).map(|i| prob.sym_var(&format!("P{i}"), n1)).collect();
    let mu = match fixed_mu {
        Some(_) => None,
        None => Some(prob.scalar_var("mu", Some(0.0))),
    };
    let mu_term = |k: usize| match (&mu, fixed_mu) {
        (Some(v), _) => AffineMatrixExpr::scalar(v, &DMatrix::identity(k, k)),
        (None, m) => AffineMatrixExpr::constant(DMatrix::identity(k, k) * m.unwrap_or(0.0)),
    };

    for i in 0..nm {
        let m = &cl.modes[i];
        let pm = &model.modes[i];
        let k = &controller.gains[i];
        let (kc, ke, kd) = (k * &pm.c, k * &pm.e, k * &pm.d);
        let sum = |l: &DMatrix<f64>, rr: &DMatrix<f64>| {
            (0..nm)
                .filter(|&j| cl.transition.prob(i, j) != 0.0)
                .fold(AffineMatrixExpr::zeros(l.ncols(), rr.ncols()), |acc, j| {
                    acc + AffineMatrixExpr::lr(&(l.transpose() * cl.transition.prob(i, j)), &pv[j], rr)
                })
        };
        let p11 = sum(&m.a, &m.a) - AffineMatrixExpr::var(&pv[i]);
        let p11 = p11.add_constant(&(q + kc.transpose() * r * &kc));
        let p12 = sum(&m.a, &m.e).add_constant(&(kc.transpose() * r * &ke));
        let p22 = sum(&m.e, &m.e).add_constant(&(ke.transpose() * r * &ke))
            - mu_term(nv);
        let p33 = sum(&m.d, &m.d).add_constant(&(kd.transpose() * r * &kd))
            - mu_term(nw);
        let mut bm = BlockMatrix::new(&[n1, nv, nw]);
        bm.set(0, 0, p11).set(0, 1, p12).set(1, 1, p22).set(2, 2, p33);
        prob.add_lmi(&format!("guaranteed cost mode {i}"), bm.build()?);
        prob.add_lmi(&format!("P{i} > 0"), -AffineMatrixExpr::var(&pv[i]));
    }
    Ok((prob, pv, mu))
}

/// Lyapunov matrices with the largest margin in the guaranteed-cost
/// condition at a fixed level `μ`, or `None` if the level is not certified.
pub(crate) fn centered_guaranteed_cost_p(
    cl: &ClosedLoopModel,
    controller: &Controller,
    model: &PemAdmModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    mu: f64,
) -> Result<Option<Vec<DMatrix<f64>>>> {
    let (prob, pv, _) = guaranteed_cost_problem(cl, controller, model, q, r, Some(mu))?;
    let sol = prob.solve_feasibility();
    if sol.status != SdpStatus::Optimal {
        return Ok(None);
    }
    Ok(Some(pv.iter().map(|v| sol.values.matrix(v).clone()).collect()))
}

/// Upper bound on the expected cost accumulated over `0..=horizon`:
/// `γ²·[(horizon+1)·n_w + Σ_k ‖v(k)‖²] + x₀ᵀ P_{r₀} x₀`.
pub fn cost_bound(
    cert: &GammaCertificate,
    x0: &DVector<f64>,
    r0: usize,
    horizon: usize,
    bias: &BiasSignal,
    nw: usize,
) -> Result<f64> {
    if !cert.feasible {
        return Err(Error::InfeasibleCertificate);
    }
    let p = cert.p.get(r0).ok_or_else(|| Error::InvalidArgument(format!("mode {r0} out of range")))?;
    if p.nrows() != x0.len() {
        return Err(Error::Dimension(format!("x0 has {} entries, P has {}", x0.len(), p.nrows())));
    }
    let bias_energy: f64 = (0..=horizon).map(|k| bias.value(k).norm_squared()).sum();
    let m2 = (x0.transpose() * p * x0)[(0, 0)];
    Ok(cert.mu * ((horizon + 1) as f64 * nw as f64 + bias_energy) + m2)
}

/// Constants with `E[V(x⁺, r⁺) | x, r] − V(x, r) ≤ −c₂ V(x, r) + c₃`
/// for a constant bias `v`, where `V(x, r) = xᵀ P_r x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftConstants {
    pub c2: f64,
    pub c3: f64,
}

/// Exact conditional expectation of `V(x⁺, r⁺) − V(x, r)` given `(x, r)`
/// under `x⁺ = A_r x + D_r w + E_r v`, `w ~ N(0, I)`.
pub fn expected_lyapunov_difference(
    cl: &ClosedLoopModel,
    p: &[DMatrix<f64>],
    x: &DVector<f64>,
    r: usize,
    v: &DVector<f64>,
) -> f64 {
    let m = &cl.modes[r];
    let pbar = mixed(cl, p, r);
    let mean = &m.a * x + &m.e * v;
    let noise = (m.d.transpose() * &pbar * &m.d).trace();
    (mean.transpose() * &pbar * &mean)[(0, 0)] + noise - (x.transpose() * &p[r] * x)[(0, 0)]
}

/// Drift constants from a feasible stability certificate: `c₂` is half the
/// worst per-mode contraction gap and `c₃` the maximum of the remaining
/// quadratic-plus-constant term over `x`.
pub fn drift_constants(cl: &ClosedLoopModel, p: &[DMatrix<f64>], v: &DVector<f64>) -> Result<DriftConstants> {
    let nm = cl.mode_count();
    let mut rho: f64 = 0.0;
    let mut g = Vec::with_capacity(nm);
    for i in 0..nm {
        let a = &cl.modes[i].a;
        let gi = a.transpose() * mixed(cl, p, i) * a;
        let eig = nalgebra::SymmetricEigen::new(p[i].clone());
        if eig.eigenvalues.min() <= 0.0 {
            return Err(Error::InvalidArgument(format!("P_{i} is not positive definite")));
        }
        let inv_sqrt = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
            * eig.eigenvectors.transpose();
        rho = rho.max(max_sym_eigenvalue(&(&inv_sqrt * &gi * &inv_sqrt)));
        g.push(gi);
    }
    if rho >= 1.0 {
        return Err(Error::InvalidArgument(format!("certificate does not contract (ratio {rho})")));
    }
    let c2 = (1.0 - rho) / 2.0;
    let mut c3 = f64::NEG_INFINITY;
    for i in 0..nm {
        let m = &cl.modes[i];
        let pbar = mixed(cl, p, i);
        let h = &g[i] - &p[i] * (1.0 - c2);
        let ev = &m.e * v;
        let b = m.a.transpose() * &pbar * &ev;
        let d = (ev.transpose() * &pbar * &ev)[(0, 0)] + (m.d.transpose() * &pbar * &m.d).trace();
        let hinv_b = h.clone().lu().solve(&b).ok_or_else(|| Error::Lmi("singular drift matrix".into()))?;
        c3 = c3.max(d - b.dot(&hinv_b));
    }
    Ok(DriftConstants { c2, c3: c3.max(f64::MIN_POSITIVE) })
}
