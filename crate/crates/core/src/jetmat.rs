//! Dense matrices whose entries are truncated Taylor jets.
//!
//! These are the coefficient objects of the symbol calculus: a metric block
//! `g_ab`, a connection component `theta_a`, or a homogeneous-symbol
//! coefficient is a small matrix of [`Jet`]s at a common base point.
//! Operations mirror the scalar jet ring entrywise (with truncated-order
//! alignment) plus matrix structure: product, inverse by Gauss-Jordan
//! pivoting on jet values, derivative, restriction, and evaluation to a
//! plain complex matrix.

use crate::jet::Jet;
use crate::linalg::CMat;
use num_complex::Complex64;

/// A `rows x cols` matrix of jets sharing base point and variable count.
#[derive(Clone, Debug)]
pub struct JetMat {
    rows: usize,
    cols: usize,
    data: Vec<Jet>,
}

impl JetMat {
    pub fn zero(rows: usize, cols: usize, nvars: usize, order: usize) -> Self {
        let data = vec![Jet::zero(nvars, order); rows * cols];
        JetMat { rows, cols, data }
    }

    pub fn identity(k: usize, nvars: usize, order: usize) -> Self {
        let mut m = JetMat::zero(k, k, nvars, order);
        for i in 0..k {
            *m.at_mut(i, i) = Jet::constant_re(nvars, order, 1.0);
        }
        m
    }

    /// Constant matrix jet from a complex matrix.
    pub fn from_cmat(m: &CMat, nvars: usize, order: usize) -> Self {
        let mut out = JetMat::zero(m.nrows(), m.ncols(), nvars, order);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                *out.at_mut(i, j) = Jet::constant(nvars, order, m[(i, j)]);
            }
        }
        out
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Jet) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        JetMat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> &Jet {
        &self.data[i * self.cols + j]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut Jet {
        &mut self.data[i * self.cols + j]
    }

    pub fn add(&self, o: &JetMat) -> JetMat {
        self.zip(o, |a, b| a.add(b))
    }

    pub fn sub(&self, o: &JetMat) -> JetMat {
        self.zip(o, |a, b| a.sub(b))
    }

    fn zip(&self, o: &JetMat, f: impl Fn(&Jet, &Jet) -> Jet) -> JetMat {
        assert_eq!((self.rows, self.cols), (o.rows, o.cols), "jet matrix shape mismatch");
        JetMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(o.data.iter()).map(|(a, b)| f(a, b)).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(&Jet) -> Jet) -> JetMat {
        JetMat { rows: self.rows, cols: self.cols, data: self.data.iter().map(f).collect() }
    }

    pub fn neg(&self) -> JetMat {
        self.map(|j| j.neg())
    }

    pub fn scale(&self, z: Complex64) -> JetMat {
        self.map(|j| j.scale(z))
    }

    /// Multiply every entry by a scalar jet.
    pub fn scale_jet(&self, s: &Jet) -> JetMat {
        self.map(|j| j.mul(s))
    }

    pub fn matmul(&self, o: &JetMat) -> JetMat {
        assert_eq!(self.cols, o.rows, "jet matrix product shape mismatch");
        JetMat::from_fn(self.rows, o.cols, |i, j| {
            let mut acc = self.at(i, 0).mul(o.at(0, j));
            for l in 1..self.cols {
                acc = acc.add(&self.at(i, l).mul(o.at(l, j)));
            }
            acc
        })
    }

    pub fn derivative(&self, var: usize) -> JetMat {
        self.map(|j| j.derivative(var))
    }

    pub fn truncate(&self, order: usize) -> JetMat {
        self.map(|j| j.truncate(order))
    }

    pub fn restrict(&self, var: usize) -> JetMat {
        self.map(|j| j.restrict(var))
    }

    /// Entrywise conjugate transpose.
    pub fn adjoint(&self) -> JetMat {
        JetMat::from_fn(self.cols, self.rows, |i, j| self.at(j, i).conj())
    }

    pub fn trace(&self) -> Jet {
        assert_eq!(self.rows, self.cols);
        let mut acc = self.at(0, 0).clone();
        for i in 1..self.rows {
            acc = acc.add(self.at(i, i));
        }
        acc
    }

    /// Inverse by Gauss-Jordan elimination, pivoting on base-point values
    /// (valid whenever the value matrix is invertible, which is all we need:
    /// metric blocks and frame matrices are uniformly invertible).
    pub fn inverse(&self) -> JetMat {
        assert_eq!(self.rows, self.cols, "jet matrix inverse needs a square matrix");
        let k = self.rows;
        let mut a = self.clone();
        let mut inv = {
            // Match the (possibly reduced) common order of the entries.
            let ord = self.data.iter().map(|j| j.order()).min().unwrap();
            let nv = self.data[0].nvars();
            JetMat::identity(k, nv, ord)
        };
        for col in 0..k {
            // Pivot: largest base-point value in this column.
            let mut piv = col;
            let mut best = a.at(col, col).value().norm();
            for r in (col + 1)..k {
                let v = a.at(r, col).value().norm();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            assert!(best > 1e-14, "jet matrix is singular at base point");
            if piv != col {
                for j in 0..k {
                    let tmp = a.at(col, j).clone();
                    *a.at_mut(col, j) = a.at(piv, j).clone();
                    *a.at_mut(piv, j) = tmp;
                    let tmp = inv.at(col, j).clone();
                    *inv.at_mut(col, j) = inv.at(piv, j).clone();
                    *inv.at_mut(piv, j) = tmp;
                }
            }
            let pinv = a.at(col, col).inverse();
            for j in 0..k {
                *a.at_mut(col, j) = a.at(col, j).mul(&pinv);
                *inv.at_mut(col, j) = inv.at(col, j).mul(&pinv);
            }
            for r in 0..k {
                if r == col {
                    continue;
                }
                let factor = a.at(r, col).clone();
                if factor.max_abs() == 0.0 {
                    continue;
                }
                for j in 0..k {
                    let na = a.at(r, j).sub(&factor.mul(a.at(col, j)));
                    *a.at_mut(r, j) = na;
                    let ni = inv.at(r, j).sub(&factor.mul(inv.at(col, j)));
                    *inv.at_mut(r, j) = ni;
                }
            }
        }
        inv
    }

    /// Base-point value matrix.
    pub fn value(&self) -> CMat {
        CMat::from_fn(self.rows, self.cols, |i, j| self.at(i, j).value())
    }

    /// Evaluate the truncated Taylor polynomial at displacement `t`.
    pub fn eval(&self, t: &[f64]) -> CMat {
        CMat::from_fn(self.rows, self.cols, |i, j| self.at(i, j).eval(t))
    }

    /// Largest jet-coefficient magnitude over all entries.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|j| j.max_abs()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, o: &JetMat) -> f64 {
        self.sub(o).max_abs()
    }

    /// Kronecker product (left factor's entries scale blocks of the right).
    pub fn kronecker(&self, o: &JetMat) -> JetMat {
        JetMat::from_fn(self.rows * o.rows, self.cols * o.cols, |i, j| {
            let (ia, ib) = (i / o.rows, i % o.rows);
            let (ja, jb) = (j / o.cols, j % o.cols);
            self.at(ia, ja).mul(o.at(ib, jb))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_jetmat(rng: &mut ChaCha8Rng, k: usize, nvars: usize, order: usize) -> JetMat {
        JetMat::from_fn(k, k, |_, _| {
            let mut j = Jet::zero(nvars, order);
            let mono_budget: Vec<Vec<usize>> = match nvars {
                2 => vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1], vec![2, 0]],
                _ => vec![vec![0, 0, 0], vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]],
            };
            for m in mono_budget {
                j.set_coeff(&m, Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            }
            j
        })
    }

    #[test]
    fn product_distributes_and_matches_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let a = random_jetmat(&mut rng, 3, 2, 3);
            let b = random_jetmat(&mut rng, 3, 2, 3);
            let c = random_jetmat(&mut rng, 3, 2, 3);
            let lhs = a.matmul(&b.add(&c));
            let rhs = a.matmul(&b).add(&a.matmul(&c));
            assert!(lhs.max_abs_diff(&rhs) < 1e-12);
            // Value of the product = product of the values.
            let v = a.matmul(&b).value();
            assert!(crate::linalg::max_abs_diff(&v, &(a.value() * b.value())) < 1e-12);
        }
    }

    #[test]
    fn inverse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for k in [1usize, 2, 3] {
            let mut a = random_jetmat(&mut rng, k, 2, 3);
            // Push the base-point value away from singular.
            for i in 0..k {
                let bump = a.at(i, i).add(&Jet::constant_re(2, 3, 3.0));
                *a.at_mut(i, i) = bump;
            }
            let inv = a.inverse();
            let prod = a.matmul(&inv);
            let id = JetMat::identity(k, 2, 3);
            assert!(prod.max_abs_diff(&id) < 1e-10, "k={k}");
        }
    }

    #[test]
    fn derivative_is_leibniz_over_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = random_jetmat(&mut rng, 2, 2, 3);
        let b = random_jetmat(&mut rng, 2, 2, 3);
        for var in 0..2 {
            let lhs = a.matmul(&b).derivative(var);
            let rhs = a.derivative(var).matmul(&b).add(&a.matmul(&b.derivative(var)));
            assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }
    }

    #[test]
    fn kronecker_of_identities_is_identity() {
        let a = JetMat::identity(2, 2, 2);
        let b = JetMat::identity(3, 2, 2);
        let k = a.kronecker(&b);
        assert!(k.max_abs_diff(&JetMat::identity(6, 2, 2)) == 0.0);
    }

    #[test]
    fn adjoint_reverses_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let a = random_jetmat(&mut rng, 2, 2, 3);
        let b = random_jetmat(&mut rng, 2, 2, 3);
        let lhs = a.matmul(&b).adjoint();
        let rhs = b.adjoint().matmul(&a.adjoint());
        assert!(lhs.max_abs_diff(&rhs) < 1e-13);
    }
}
