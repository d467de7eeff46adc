//! Irreducible complex Clifford representations (gamma matrices).
//!
//! A [`GammaRep`] packages `n` skew-Hermitian unitary matrices of rank
//! `k = 2^floor(n/2)` satisfying
//!
//! ```text
//!     gamma_i gamma_j + gamma_j gamma_i = -2 delta_ij Id
//! ```
//!
//! Construction is the standard deterministic tensor recursion: Hermitian
//! Euclidean generators are built from the Pauli matrices (even dimensions
//! add `sigma_2 x Id`, `sigma_3 x Id` on top of `sigma_1 x (old)`; odd
//! dimensions append the chirality element), then multiplied by `i` to land
//! in the skew-Hermitian convention above. The same input `n` always yields
//! bit-identical matrices.

use crate::linalg::{ceye, max_abs, CMat};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliffordError {
    #[error("dimension n={0} outside supported range 1..=8")]
    DimensionOutOfRange(usize),
    #[error("vector length {got} does not match representation dimension {expect}")]
    VectorLength { got: usize, expect: usize },
}

/// A concrete irreducible Clifford representation in dimension `n`.
#[derive(Debug, Clone)]
pub struct GammaRep {
    /// Ambient dimension.
    pub n: usize,
    /// Spinor rank, `k = 2^floor(n/2)`.
    pub k: usize,
    /// The matrices `gamma_1 .. gamma_n`, each `k x k`, skew-Hermitian and
    /// unitary.
    pub gammas: Vec<CMat>,
}

fn pauli() -> [CMat; 3] {
    let z = |re: f64, im: f64| Complex64::new(re, im);
    [
        CMat::from_row_slice(2, 2, &[z(0., 0.), z(1., 0.), z(1., 0.), z(0., 0.)]),
        CMat::from_row_slice(2, 2, &[z(0., 0.), z(0., -1.), z(0., 1.), z(0., 0.)]),
        CMat::from_row_slice(2, 2, &[z(1., 0.), z(0., 0.), z(0., 0.), z(-1., 0.)]),
    ]
}

/// Hermitian Euclidean generators: Gamma_i Gamma_j + Gamma_j Gamma_i = +2 delta_ij.
fn hermitian_generators(n: usize) -> Vec<CMat> {
    let [s1, s2, s3] = pauli();
    match n {
        0 => Vec::new(),
        1 => vec![ceye(1)],
        2 => vec![s1, s2],
        _ if n % 2 == 1 => {
            // Append the chirality element (-i)^m Gamma_1 ... Gamma_2m.
            let mut gs = hermitian_generators(n - 1);
            let m = (n - 1) / 2;
            let mut chi = ceye(gs[0].nrows());
            for g in &gs {
                chi = chi * g;
            }
            let phase = Complex64::new(0.0, -1.0).powu(m as u32);
            gs.push(chi.map(|z| z * phase));
            gs
        }
        _ => {
            // n = 2m+2 from n = 2m: sigma_1 x Gamma_j, then sigma_2 x Id, sigma_3 x Id.
            let old = hermitian_generators(n - 2);
            let k_old = if old.is_empty() { 1 } else { old[0].nrows() };
            let id = ceye(k_old);
            let mut gs: Vec<CMat> = old.iter().map(|g| s1.kronecker(g)).collect();
            gs.push(s2.kronecker(&id));
            gs.push(s3.kronecker(&id));
            gs
        }
    }
}

/// Build the representation for `1 <= n <= 8`. Deterministic: the same `n`
/// yields bit-identical matrices.
pub fn build_gamma(n: usize) -> Result<GammaRep, CliffordError> {
    if n < 1 || n > 8 {
        return Err(CliffordError::DimensionOutOfRange(n));
    }
    let i = Complex64::new(0.0, 1.0);
    let gammas: Vec<CMat> = hermitian_generators(n).into_iter().map(|g| g.map(|z| z * i)).collect();
    let k = gammas[0].nrows();
    debug_assert_eq!(k, 1usize << (n / 2));
    Ok(GammaRep { n, k, gammas })
}

impl GammaRep {
    /// Clifford multiplication by the tangent vector `v` in an orthonormal
    /// frame: `sum_i v_i gamma_i`.
    pub fn clifford_mul(&self, v: &[f64]) -> Result<CMat, CliffordError> {
        if v.len() != self.n {
            return Err(CliffordError::VectorLength { got: v.len(), expect: self.n });
        }
        let mut out = CMat::zeros(self.k, self.k);
        for (vi, g) in v.iter().zip(self.gammas.iter()) {
            out += g.scale(*vi);
        }
        Ok(out)
    }

    /// Products `gamma_i gamma_j` for `i < j` — the orthonormal basis used to
    /// project spin-connection components back out of a twisted connection.
    pub fn pair_products(&self) -> Vec<((usize, usize), CMat)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                out.push(((i, j), &self.gammas[i] * &self.gammas[j]));
            }
        }
        out
    }

    /// Maximum residual over all representation invariants: the Clifford
    /// relations, skew-Hermiticity, unitarity, and trace-orthonormality of
    /// the pair products `gamma_i gamma_j` (i < j).
    pub fn check_relations(&self) -> f64 {
        let id = ceye(self.k);
        let mut worst = 0.0f64;
        for i in 0..self.n {
            let gi = &self.gammas[i];
            // Skew-Hermitian and unitary.
            worst = worst.max(max_abs(&(gi.adjoint() + gi)));
            worst = worst.max(max_abs(&(gi.adjoint() * gi - &id)));
            for j in 0..self.n {
                let gj = &self.gammas[j];
                let mut anti = gi * gj + gj * gi;
                if i == j {
                    anti += id.scale(2.0);
                }
                worst = worst.max(max_abs(&anti));
            }
        }
        // Pair products: traceless, orthonormal in (X,Y) -> (1/k) tr(X^* Y).
        let pairs = self.pair_products();
        for (a, (_, pa)) in pairs.iter().enumerate() {
            worst = worst.max(pa.trace().norm() / self.k as f64);
            for (b, (_, pb)) in pairs.iter().enumerate() {
                let ip = (pa.adjoint() * pb).trace() / Complex64::new(self.k as f64, 0.0);
                let expect = if a == b { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) };
                worst = worst.max((ip - expect).norm());
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn z(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn all_supported_dimensions_satisfy_relations() {
        for n in 1..=8 {
            let rep = build_gamma(n).unwrap();
            assert_eq!(rep.k, 1usize << (n / 2), "rank mismatch at n={n}");
            let r = rep.check_relations();
            assert!(r <= 1e-12, "relation residual {r} at n={n}");
        }
    }

    #[test]
    fn out_of_range_dimension_rejected() {
        assert!(build_gamma(0).is_err());
        assert!(build_gamma(9).is_err());
    }

    #[test]
    fn n1_golden() {
        let rep = build_gamma(1).unwrap();
        assert_eq!(rep.k, 1);
        assert_eq!(rep.gammas[0][(0, 0)], z(0.0, 1.0));
        // gamma_1^2 = -1.
        assert_eq!((&rep.gammas[0] * &rep.gammas[0])[(0, 0)], z(-1.0, 0.0));
    }

    #[test]
    fn n2_golden_pauli_matrices() {
        // gamma_1 = i sigma_1, gamma_2 = i sigma_2.
        let rep = build_gamma(2).unwrap();
        let g1 = CMat::from_row_slice(2, 2, &[z(0., 0.), z(0., 1.), z(0., 1.), z(0., 0.)]);
        let g2 = CMat::from_row_slice(2, 2, &[z(0., 0.), z(1., 0.), z(-1., 0.), z(0., 0.)]);
        assert_eq!(max_abs_diff(&rep.gammas[0], &g1), 0.0);
        assert_eq!(max_abs_diff(&rep.gammas[1], &g2), 0.0);
    }

    #[test]
    fn n3_adds_chirality() {
        // Third generator is i sigma_3.
        let rep = build_gamma(3).unwrap();
        let g3 = CMat::from_row_slice(2, 2, &[z(0., 1.), z(0., 0.), z(0., 0.), z(0., -1.)]);
        assert_eq!(max_abs_diff(&rep.gammas[2], &g3), 0.0);
    }

    #[test]
    fn n4_structure_golden() {
        let rep = build_gamma(4).unwrap();
        assert_eq!(rep.k, 4);
        // gamma_3 = i sigma_2 x Id = [[0, Id], [-Id, 0]].
        assert_eq!(rep.gammas[2][(0, 2)], z(1.0, 0.0));
        assert_eq!(rep.gammas[2][(2, 0)], z(-1.0, 0.0));
        // gamma_4 = i sigma_3 x Id = diag(i, i, -i, -i).
        assert_eq!(rep.gammas[3][(0, 0)], z(0.0, 1.0));
        assert_eq!(rep.gammas[3][(3, 3)], z(0.0, -1.0));
        // All 16 pairs anticommute exactly.
        for i in 0..4 {
            for j in 0..4 {
                let a = &rep.gammas[i] * &rep.gammas[j] + &rep.gammas[j] * &rep.gammas[i];
                let expect = if i == j { ceye(4).scale(-2.0) } else { CMat::zeros(4, 4) };
                assert_eq!(max_abs_diff(&a, &expect), 0.0);
            }
        }
    }

    #[test]
    fn corrupted_rep_detected() {
        let mut rep = build_gamma(3).unwrap();
        rep.gammas[0] = rep.gammas[0].scale(2.0);
        // (2 gamma_1)^2 = -4 Id: residual at least 3 in the relation check.
        assert!(rep.check_relations() >= 3.0);
    }

    #[test]
    fn clifford_mul_linear_and_squares_to_minus_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in [2usize, 3, 5] {
            let rep = build_gamma(n).unwrap();
            for _ in 0..10 {
                let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let gv = rep.clifford_mul(&v).unwrap();
                let gw = rep.clifford_mul(&w).unwrap();
                let sum: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a + b).collect();
                assert!(max_abs_diff(&rep.clifford_mul(&sum).unwrap(), &(&gv + &gw)) < 1e-13);
                // gamma(v)^2 = -|v|^2 Id.
                let n2: f64 = v.iter().map(|a| a * a).sum();
                assert!(max_abs_diff(&(&gv * &gv), &ceye(rep.k).scale(-n2)) < 1e-12);
            }
        }
    }

    #[test]
    fn unit_diagonal_vector_squares_to_minus_id() {
        let rep = build_gamma(2).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        let g = rep.clifford_mul(&[s, s]).unwrap();
        assert!(max_abs_diff(&(&g * &g), &ceye(2).scale(-1.0)) < 1e-15);
    }

    #[test]
    fn zero_vector_maps_to_zero() {
        let rep = build_gamma(4).unwrap();
        let g = rep.clifford_mul(&[0.0; 4]).unwrap();
        assert_eq!(max_abs(&g), 0.0);
    }

    #[test]
    fn wrong_vector_length_rejected() {
        let rep = build_gamma(3).unwrap();
        assert!(rep.clifford_mul(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn construction_is_deterministic() {
        for n in 1..=8 {
            let a = build_gamma(n).unwrap();
            let b = build_gamma(n).unwrap();
            for (ga, gb) in a.gammas.iter().zip(b.gammas.iter()) {
                assert_eq!(max_abs_diff(ga, gb), 0.0);
            }
        }
    }
}
