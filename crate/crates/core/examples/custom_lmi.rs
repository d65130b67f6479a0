//! The LMI layer on its own: the smallest-trace Lyapunov matrix of a stable
//! discrete-time system, `AᵀPA − P ⪯ −I`.

use nalgebra::DMatrix;
use pemadm::lmi::{AffineMatrixExpr, LmiProblem, Objective};

fn main() {
    let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.0, 0.7]);
    let mut prob = LmiProblem::new();
    let p = prob.sym_var("P", 2);
    let decrease = AffineMatrixExpr::lr(&a.transpose(), &p, &a) - AffineMatrixExpr::var(&p)
        + AffineMatrixExpr::constant(DMatrix::identity(2, 2));
    prob.add_lmi_nonstrict("decrease", decrease);
    prob.add_lmi("P > 0", -AffineMatrixExpr::var(&p));
    prob.minimize(Objective::trace(&p));
    let sol = prob.solve_min();
    println!("status {:?} after {} iterations", sol.status, sol.iterations);
    let pv = sol.values.matrix(&p);
    println!("P = {pv:.6}");
    let residual = a.transpose() * pv * &a - pv + DMatrix::identity(2, 2);
    println!("max entry of AᵀPA − P + I at the optimum: {:.2e}", residual.amax());
}
