//! Small dense complex-matrix helpers shared across modules.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

/// Dense complex matrix used throughout (spinor blocks, gauge fields, ...).
pub type CMat = DMatrix<Complex64>;

pub fn czero(r: usize, c: usize) -> CMat {
    CMat::zeros(r, c)
}

pub fn ceye(k: usize) -> CMat {
    CMat::identity(k, k)
}

/// Largest entry magnitude.
pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest entry magnitude of the difference.
pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    max_abs(&(a - b))
}

/// Frobenius norm.
pub fn fro_norm(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Commutator `[a, b]`.
pub fn comm(a: &CMat, b: &CMat) -> CMat {
    a * b - b * a
}

/// Random matrix with entries uniform in the complex unit square.
pub fn random_cmat(rng: &mut impl Rng, r: usize, c: usize) -> CMat {
    CMat::from_fn(r, c, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
}

/// Random skew-Hermitian matrix (u(N)-valued sample), scaled by `amp`.
pub fn random_skew_hermitian(rng: &mut impl Rng, n: usize, amp: f64) -> CMat {
    let m = random_cmat(rng, n, n);
    (&m - m.adjoint()).scale(0.5 * amp)
}

/// Random unitary matrix: exponential of a random skew-Hermitian matrix.
pub fn random_unitary(rng: &mut impl Rng, n: usize) -> CMat {
    random_skew_hermitian(rng, n, 1.0).exp()
}
