use std::collections::BTreeMap;
use std::ops::{Add, Neg, Sub};

use nalgebra::DMatrix;

use super::{MatVar, ScalarVar, VarId, VarValues};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) enum Term {
    /// `coeff · left · X · right`, or with `Xᵀ` when `transposed`.
    Mat { var: VarId, left: DMatrix<f64>, right: DMatrix<f64>, transposed: bool },
    /// `s · coeff`
    Scalar { var: VarId, coeff: DMatrix<f64> },
}

impl Term {
    fn transpose(&self) -> Term {
        match self {
            Term::Mat { var, left, right, transposed } => Term::Mat {
                var: *var,
                left: right.transpose(),
                right: left.transpose(),
                transposed: !transposed,
            },
            Term::Scalar { var, coeff } => Term::Scalar { var: *var, coeff: coeff.transpose() },
        }
    }

    fn scale(&mut self, s: f64) {
        match self {
            Term::Mat { left, .. } => *left *= s,
            Term::Scalar { coeff, .. } => *coeff *= s,
        }
    }

    fn left_mul(&mut self, l: &DMatrix<f64>) {
        match self {
            Term::Mat { left, .. } => *left = l * &*left,
            Term::Scalar { coeff, .. } => *coeff = l * &*coeff,
        }
    }

    fn right_mul(&mut self, r: &DMatrix<f64>) {
        match self {
            Term::Mat { right, .. } => *right = &*right * r,
            Term::Scalar { coeff, .. } => *coeff = &*coeff * r,
        }
    }

    pub(crate) fn var(&self) -> VarId {
        match self {
            Term::Mat { var, .. } | Term::Scalar { var, .. } => *var,
        }
    }
}

/// Matrix-valued affine function of the problem variables:
/// `constant + Σ L·X·R + Σ s·M`.
#[derive(Clone, Debug)]
pub struct AffineMatrixExpr {
    pub(crate) constant: DMatrix<f64>,
    pub(crate) terms: Vec<Term>,
}

impl AffineMatrixExpr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { constant: DMatrix::zeros(rows, cols), terms: Vec::new() }
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        Self { constant: m, terms: Vec::new() }
    }

    /// `X`
    pub fn var(x: &MatVar) -> Self {
        Self::lr(&DMatrix::identity(x.rows, x.rows), x, &DMatrix::identity(x.cols, x.cols))
    }

    /// `L · X · R`
    pub fn lr(left: &DMatrix<f64>, x: &MatVar, right: &DMatrix<f64>) -> Self {
        assert_eq!(left.ncols(), x.rows, "left factor does not conform to {}x{} variable", x.rows, x.cols);
        assert_eq!(right.nrows(), x.cols, "right factor does not conform to {}x{} variable", x.rows, x.cols);
        Self {
            constant: DMatrix::zeros(left.nrows(), right.ncols()),
            terms: vec![Term::Mat { var: x.id, left: left.clone(), right: right.clone(), transposed: false }],
        }
    }

    /// `s · M`
    pub fn scalar(s: &ScalarVar, m: &DMatrix<f64>) -> Self {
        Self {
            constant: DMatrix::zeros(m.nrows(), m.ncols()),
            terms: vec![Term::Scalar { var: s.id, coeff: m.clone() }],
        }
    }

    pub fn nrows(&self) -> usize {
        self.constant.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.constant.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.constant.shape()
    }

    pub fn transpose(&self) -> Self {
        Self { constant: self.constant.transpose(), terms: self.terms.iter().map(Term::transpose).collect() }
    }

    pub fn scale(mut self, s: f64) -> Self {
        self.constant *= s;
        self.terms.iter_mut().for_each(|t| t.scale(s));
        self
    }

    /// `L · self`
    pub fn left_mul(mut self, l: &DMatrix<f64>) -> Self {
        assert_eq!(l.ncols(), self.nrows(), "left_mul: shape mismatch");
        self.constant = l * &self.constant;
        self.terms.iter_mut().for_each(|t| t.left_mul(l));
        self
    }

    /// `self · R`
    pub fn right_mul(mut self, r: &DMatrix<f64>) -> Self {
        assert_eq!(r.nrows(), self.ncols(), "right_mul: shape mismatch");
        self.constant = &self.constant * r;
        self.terms.iter_mut().for_each(|t| t.right_mul(r));
        self
    }

    pub fn add_constant(mut self, m: &DMatrix<f64>) -> Self {
        assert_eq!(m.shape(), self.shape(), "add_constant: shape mismatch");
        self.constant += m;
        self
    }

    pub fn evaluate(&self, values: &VarValues) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for t in &self.terms {
            match t {
                Term::Mat { var, left, right, transposed } => {
                    let x = values.get(*var).expect("value for every referenced variable");
                    if *transposed {
                        out += left * x.transpose() * right;
                    } else {
                        out += left * x * right;
                    }
                }
                Term::Scalar { var, coeff } => {
                    let s = values.get(*var).expect("value for every referenced variable")[(0, 0)];
                    out += coeff * s;
                }
            }
        }
        out
    }

    /// Places `self` at `(row, col)` inside a `rows × cols` zero matrix.
    pub(crate) fn embed(&self, rows: usize, cols: usize, row: usize, col: usize) -> Self {
        let lsel = DMatrix::from_fn(rows, self.nrows(), |i, j| if i == row + j { 1.0 } else { 0.0 });
        let rsel = DMatrix::from_fn(self.ncols(), cols, |i, j| if j == col + i { 1.0 } else { 0.0 });
        self.clone().left_mul(&lsel).right_mul(&rsel)
    }
}

impl Add for AffineMatrixExpr {
    type Output = AffineMatrixExpr;
    fn add(mut self, rhs: Self) -> Self {
        assert_eq!(self.shape(), rhs.shape(), "expression shapes differ");
        self.constant += rhs.constant;
        self.terms.extend(rhs.terms);
        self
    }
}

impl Sub for AffineMatrixExpr {
    type Output = AffineMatrixExpr;
    fn sub(self, rhs: Self) -> Self {
        self + rhs.scale(-1.0)
    }
}

impl Neg for AffineMatrixExpr {
    type Output = AffineMatrixExpr;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

/// Symmetric block matrix assembled from its diagonal and upper blocks; the
/// lower triangle is filled in by transposition.
#[derive(Clone, Debug)]
pub struct BlockMatrix {
    sizes: Vec<usize>,
    blocks: BTreeMap<(usize, usize), AffineMatrixExpr>,
}

impl BlockMatrix {
    pub fn new(sizes: &[usize]) -> Self {
        Self { sizes: sizes.to_vec(), blocks: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Sets block `(i, j)`. A lower block is stored transposed in the upper
    /// triangle. Setting the same block twice adds the contributions.
    pub fn set(&mut self, i: usize, j: usize, e: AffineMatrixExpr) -> &mut Self {
        let (i, j, e) = if i > j { (j, i, e.transpose()) } else { (i, j, e) };
        match self.blocks.remove(&(i, j)) {
            Some(prev) => self.blocks.insert((i, j), prev + e),
            None => self.blocks.insert((i, j), e),
        };
        self
    }

    pub fn build(&self) -> Result<AffineMatrixExpr> {
        let n = self.dim();
        let offsets: Vec<usize> = self
            .sizes
            .iter()
            .scan(0, |acc, s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        let mut out = AffineMatrixExpr::zeros(n, n);
        for (&(i, j), e) in &self.blocks {
            if i >= self.sizes.len() || j >= self.sizes.len() {
                return Err(Error::Lmi(format!("block ({i}, {j}) outside a {}-block matrix", self.sizes.len())));
            }
            if e.shape() != (self.sizes[i], self.sizes[j]) {
                return Err(Error::Lmi(format!(
                    "block ({i}, {j}) is {}x{}, expected {}x{}",
                    e.nrows(),
                    e.ncols(),
                    self.sizes[i],
                    self.sizes[j]
                )));
            }
            out = out + e.embed(n, n, offsets[i], offsets[j]);
            if i != j {
                out = out + e.transpose().embed(n, n, offsets[j], offsets[i]);
            }
        }
        Ok(out)
    }
}
