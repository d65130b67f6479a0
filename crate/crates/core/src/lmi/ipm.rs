//! Dense primal-dual interior-point backend.
//!
//! Solves the dual-form problem
//!
//! ```text
//! maximize bᵀy  s.t.  C_b − Σ_k y_k A_{k,b} ⪰ 0 for every block b,  E y = f
//! ```
//!
//! Equalities are removed with an orthonormal null-space basis of `E` before
//! the iteration starts. The iteration is an infeasible-start path-following
//! method with the HKM search direction and a Mehrotra predictor-corrector.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use super::{BackendOutput, BackendStatus, SdpBackend, SdpBlock, SdpData};

#[derive(Clone, Debug)]
pub struct DenseIpm {
    /// Relative tolerance on primal/dual infeasibility and duality gap.
    pub tol: f64,
    pub max_iter: usize,
    /// Fraction of the step to the boundary taken each iteration.
    pub step_fraction: f64,
}

impl Default for DenseIpm {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 150, step_fraction: 0.98 }
    }
}

impl SdpBackend for DenseIpm {
    fn name(&self) -> &str {
        "dense-hkm-ipm"
    }

    fn version(&self) -> &str {
        env!("CARGO_PKG_VERSION")
    }

    fn solve(&self, data: &SdpData) -> BackendOutput {
        let m = data.b.len();
        let (y_p, null) = match eliminate(&data.eq_a, &data.eq_b, m) {
            Ok(v) => v,
            Err(msg) => {
                return BackendOutput {
                    status: BackendStatus::Infeasible,
                    y: DVector::zeros(m),
                    iterations: 0,
                    primal_objective: f64::NAN,
                    dual_objective: f64::NAN,
                    message: msg,
                }
            }
        };
        let reduced = reduce(data, &y_p, &null);
        let b = null.transpose() * &data.b;
        let mut out = self.iterate(&reduced, &b);
        let z = std::mem::replace(&mut out.y, DVector::zeros(0));
        out.y = &y_p + &null * z;
        let shift = data.b.dot(&y_p);
        out.primal_objective += shift;
        out.dual_objective += shift;
        out
    }
}

/// Particular solution and orthonormal null-space basis of `E y = f`.
fn eliminate(e: &DMatrix<f64>, f: &DVector<f64>, m: usize) -> Result<(DVector<f64>, DMatrix<f64>), String> {
    if e.nrows() == 0 {
        return Ok((DVector::zeros(m), DMatrix::identity(m, m)));
    }
    // Row-normalize so that the rank decision does not depend on units.
    let mut e = e.clone();
    let mut f = f.clone();
    for i in 0..e.nrows() {
        let s = e.row(i).amax();
        if s > 0.0 {
            e.row_mut(i).scale_mut(1.0 / s);
            f[i] /= s;
        } else if f[i].abs() > 1e-12 {
            return Err(format!("equality row {i} reads 0 = {}", f[i]));
        }
    }
    // SVD of Eᵀ gives the row space and null space of E directly.
    let svd = e.transpose().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let sv = &svd.singular_values;
    let smax = sv.max();
    let rtol = smax * 1e-10 * (m.max(e.nrows()) as f64);
    let rank = sv.iter().filter(|&&s| s > rtol).count();

    // Eᵀ = U Σ Vᵀ  ⇒  E = V Σ Uᵀ; least-norm solution y = U Σ⁺ Vᵀ f.
    let mut y = DVector::zeros(m);
    for (i, &s) in sv.iter().enumerate() {
        if s > rtol {
            let coeff = v_t.row(i).transpose().dot(&f) / s;
            y += u.column(i) * coeff;
        }
    }
    let resid = (&e * &y - &f).amax();
    if resid > 1e-8 * (1.0 + f.amax()) {
        return Err(format!("equality constraints are inconsistent (residual {resid:.3e})"));
    }

    let keep: Vec<usize> = (0..sv.len()).filter(|&i| sv[i] > rtol).collect();
    let range = DMatrix::from_fn(m, keep.len(), |r, c| u[(r, keep[c])]);
    let full = complete_basis(&range, m);
    let null = full.columns(rank, m - rank).into_owned();
    Ok((y, null))
}

fn complete_basis(q: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let proj = DMatrix::identity(m, m) - q * q.transpose();
    let svd = proj.svd(true, false);
    let u = svd.u.expect("requested U");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut out = DMatrix::zeros(m, m);
    out.columns_mut(0, q.ncols()).copy_from(q);
    for (c, &i) in idx.iter().take(m - q.ncols()).enumerate() {
        out.set_column(q.ncols() + c, &u.column(i));
    }
    out
}

fn reduce(data: &SdpData, y_p: &DVector<f64>, null: &DMatrix<f64>) -> Vec<SdpBlock> {
    let mr = null.ncols();
    data.blocks
        .iter()
        .map(|blk| {
            let n = blk.c.nrows();
            let mut c = blk.c.clone();
            for (k, a) in blk.a.iter().enumerate() {
                if let Some(a) = a {
                    if y_p[k] != 0.0 {
                        c -= a * y_p[k];
                    }
                }
            }
            let a = (0..mr)
                .map(|l| {
                    let mut acc = DMatrix::zeros(n, n);
                    let mut any = false;
                    for (k, a) in blk.a.iter().enumerate() {
                        if let Some(a) = a {
                            let w = null[(k, l)];
                            if w.abs() > 1e-15 {
                                acc += a * w;
                                any = true;
                            }
                        }
                    }
                    (any && acc.amax() > 0.0).then_some(acc)
                })
                .collect();
            SdpBlock { c, a }
        })
        .collect()
}

fn a_op(blocks: &[SdpBlock], g: &[DMatrix<f64>], m: usize) -> DVector<f64> {
    let mut out = DVector::zeros(m);
    for (blk, g) in blocks.iter().zip(g) {
        for (k, a) in blk.a.iter().enumerate() {
            if let Some(a) = a {
                out[k] += a.dot(g);
            }
        }
    }
    out
}

fn at_op(blocks: &[SdpBlock], y: &DVector<f64>) -> Vec<DMatrix<f64>> {
    blocks
        .iter()
        .map(|blk| {
            let n = blk.c.nrows();
            let mut acc = DMatrix::zeros(n, n);
            for (k, a) in blk.a.iter().enumerate() {
                if let Some(a) = a {
                    acc += a * y[k];
                }
            }
            acc
        })
        .collect()
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Largest `α` with `x + α·dx ⪰ 0`, or infinity.
fn max_step(x: &DMatrix<f64>, dx: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let Some(ch) = Cholesky::new(x.clone()) else { return 0.0 };
    let l = ch.l();
    let Some(linv) = l.solve_lower_triangular(&DMatrix::identity(n, n)) else { return 0.0 };
    let m = sym(&linv * dx * linv.transpose());
    let lmin = SymmetricEigen::new(m).eigenvalues.min();
    if lmin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    }
}

fn spd_inverse(z: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::new(z.clone()).map(|c| sym(c.inverse()))
}

fn factor_schur(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some(c);
    }
    let dmax = m.diagonal().amax().max(1e-300);
    let mut reg = 1e-14 * dmax;
    for _ in 0..8 {
        let mut mm = m.clone();
        for i in 0..mm.nrows() {
            mm[(i, i)] += reg;
        }
        if let Some(c) = Cholesky::new(mm) {
            return Some(c);
        }
        reg *= 100.0;
    }
    None
}

impl DenseIpm {
    fn iterate(&self, blocks: &[SdpBlock], b: &DVector<f64>) -> BackendOutput {
        let m = b.len();
        let sizes: Vec<usize> = blocks.iter().map(|blk| blk.c.nrows()).collect();
        let ntot: usize = sizes.iter().sum();
        let fail = |y: DVector<f64>, it: usize, msg: String| BackendOutput {
            status: BackendStatus::Failed,
            y,
            iterations: it,
            primal_objective: f64::NAN,
            dual_objective: f64::NAN,
            message: msg,
        };
        if ntot == 0 {
            return fail(DVector::zeros(m), 0, "no semidefinite blocks".into());
        }

        let bnorm = b.norm();
        let cnorm = blocks.iter().map(|blk| blk.c.norm_squared()).sum::<f64>().sqrt();

        let mut x: Vec<DMatrix<f64>> = Vec::with_capacity(blocks.len());
        let mut z: Vec<DMatrix<f64>> = Vec::with_capacity(blocks.len());
        for blk in blocks {
            let n = blk.c.nrows();
            let sn = (n as f64).sqrt();
            let mut xi = 10.0_f64.max(sn);
            let mut eta = 10.0_f64.max(sn).max(blk.c.norm());
            for (k, a) in blk.a.iter().enumerate() {
                if let Some(a) = a {
                    let an = a.norm();
                    xi = xi.max(sn * (1.0 + b[k].abs()) / (1.0 + an));
                    eta = eta.max(an);
                }
            }
            x.push(DMatrix::identity(n, n) * xi);
            z.push(DMatrix::identity(n, n) * eta);
        }
        let mut y = DVector::zeros(m);

        let mut best: Option<(f64, DVector<f64>, f64, f64)> = None;
        let mut stall = 0usize;

        for it in 0..self.max_iter {
            let aty = at_op(blocks, &y);
            let rd: Vec<DMatrix<f64>> =
                blocks.iter().zip(&z).zip(&aty).map(|((blk, zb), ab)| &blk.c - zb - ab).collect();
            let rp = b - a_op(blocks, &x, m);
            let gap: f64 = x.iter().zip(&z).map(|(xb, zb)| xb.dot(zb)).sum();
            let pobj: f64 = blocks.iter().zip(&x).map(|(blk, xb)| blk.c.dot(xb)).sum();
            let dobj = b.dot(&y);
            let mu = gap / ntot as f64;
            let pinf = rp.norm() / (1.0 + bnorm);
            let dinf = rd.iter().map(|r| r.norm_squared()).sum::<f64>().sqrt() / (1.0 + cnorm);
            let relgap = gap.abs() / (1.0 + pobj.abs() + dobj.abs());
            let err = pinf.max(dinf).max(relgap);
            log::trace!("ipm it={it} pobj={pobj:.10e} dobj={dobj:.10e} pinf={pinf:.2e} dinf={dinf:.2e} gap={relgap:.2e}");

            if !err.is_finite() {
                return fail(y, it, "non-finite iterate".into());
            }
            if best.as_ref().is_none_or(|(e, ..)| err < *e) {
                best = Some((err, y.clone(), pobj, dobj));
            }
            if err <= self.tol {
                return BackendOutput {
                    status: BackendStatus::Converged,
                    y,
                    iterations: it,
                    primal_objective: pobj,
                    dual_objective: dobj,
                    message: format!("converged: pinf={pinf:.1e} dinf={dinf:.1e} gap={relgap:.1e}"),
                };
            }

            let Some(zinv) = z.iter().map(spd_inverse).collect::<Option<Vec<_>>>() else {
                break;
            };

            // Schur complement M_kl = Σ_b tr(A_k X A_l Z⁻¹).
            let mut schur = DMatrix::zeros(m, m);
            for (bi, blk) in blocks.iter().enumerate() {
                let present: Vec<(usize, &DMatrix<f64>)> =
                    blk.a.iter().enumerate().filter_map(|(k, a)| a.as_ref().map(|a| (k, a))).collect();
                for &(l, al) in &present {
                    let g = &x[bi] * al * &zinv[bi];
                    for &(k, ak) in &present {
                        if k <= l {
                            schur[(k, l)] += ak.dot(&g);
                        }
                    }
                }
            }
            for l in 0..m {
                for k in 0..l {
                    schur[(l, k)] = schur[(k, l)];
                }
            }
            let Some(chol) = factor_schur(&schur) else {
                break;
            };

            let x_rd_zinv: Vec<DMatrix<f64>> =
                (0..blocks.len()).map(|bi| &x[bi] * &rd[bi] * &zinv[bi]).collect();
            let x_rd_term = a_op(blocks, &x_rd_zinv, m);

            let direction = |rc_zinv: &[DMatrix<f64>]| {
                let rhs = &rp - a_op(blocks, rc_zinv, m) + &x_rd_term;
                let dy = chol.solve(&rhs);
                let atdy = at_op(blocks, &dy);
                let dz: Vec<DMatrix<f64>> = rd.iter().zip(&atdy).map(|(r, a)| r - a).collect();
                let dx: Vec<DMatrix<f64>> = (0..blocks.len())
                    .map(|bi| sym(&rc_zinv[bi] - &x[bi] * &dz[bi] * &zinv[bi]))
                    .collect();
                (dx, dy, dz)
            };
            let steps = |dx: &[DMatrix<f64>], dz: &[DMatrix<f64>]| {
                let ap = x.iter().zip(dx).map(|(a, d)| max_step(a, d)).fold(f64::INFINITY, f64::min);
                let ad = z.iter().zip(dz).map(|(a, d)| max_step(a, d)).fold(f64::INFINITY, f64::min);
                (ap, ad)
            };

            // Predictor (affine scaling).
            let rc_aff: Vec<DMatrix<f64>> = x.iter().map(|xb| -xb).collect();
            let (dxa, _, dza) = direction(&rc_aff);
            let (ap, ad) = steps(&dxa, &dza);
            let (ap, ad) = (ap.min(1.0), ad.min(1.0));
            let mu_aff: f64 = (0..blocks.len())
                .map(|bi| (&x[bi] + &dxa[bi] * ap).dot(&(&z[bi] + &dza[bi] * ad)))
                .sum::<f64>()
                / ntot as f64;
            let sigma = (mu_aff / mu).max(0.0).powi(3).min(1.0);

            // Corrector.
            let rc_cor: Vec<DMatrix<f64>> = (0..blocks.len())
                .map(|bi| &zinv[bi] * (sigma * mu) - &x[bi] - &dxa[bi] * &dza[bi] * &zinv[bi])
                .collect();
            let (dx, dy, dz) = direction(&rc_cor);
            let (ap, ad) = steps(&dx, &dz);
            let ap = (self.step_fraction * ap).min(1.0);
            let ad = (self.step_fraction * ad).min(1.0);
            if ap < 1e-10 && ad < 1e-10 {
                stall += 1;
                if stall > 3 {
                    break;
                }
            } else {
                stall = 0;
            }
            for bi in 0..blocks.len() {
                x[bi] += &dx[bi] * ap;
                z[bi] += &dz[bi] * ad;
            }
            y += dy * ad;
        }

        match best {
            Some((err, y, pobj, dobj)) if err <= 1e-6 => BackendOutput {
                status: BackendStatus::Inaccurate,
                y,
                iterations: self.max_iter,
                primal_objective: pobj,
                dual_objective: dobj,
                message: format!("stopped with reduced accuracy (residual {err:.1e})"),
            },
            Some((err, y, ..)) => fail(y, self.max_iter, format!("no convergence (best residual {err:.1e})")),
            None => fail(DVector::zeros(m), 0, "no iterate".into()),
        }
    }
}
