//! Spin-connection coefficients in the lifted orthonormal frame and the
//! twisted connection on `E`-valued spinors.
//!
//! In a local trivialization the spin connection along a chart direction
//! `d_a` is
//!
//! ```text
//!     omega^s_a = -1/4 sum_{i,j} omega^i_j(d_a) gamma_i gamma_j
//!               = -1/2 sum_{i<j} omega^i_j(d_a) gamma_i gamma_j ,
//! ```
//!
//! and the twisted connection couples the gauge potential:
//! `theta_a = omega^s_a (x) Id_N + Id_k (x) A_a`. Both parts are
//! skew-Hermitian; the spin part is traceless over the spinor factor, which
//! is what makes the decomposition recoverable: the partial trace
//! `(1/k) Tr_S theta_a` returns `A_a`, and projecting the remainder onto the
//! orthonormal family `gamma_i gamma_j (x) Id` (inner product
//! `(1/kN) tr(X^* Y)`) returns the coefficients `-1/2 omega^i_j(d_a)`.

use crate::clifford::GammaRep;
use crate::dirac_fd::{ConnectionField, ConnectionSource, SlabGrid, ThetaGrid};
use crate::geometry::{FrameGrid, FrameJets};
use crate::jetmat::JetMat;
use crate::linalg::{ceye, CMat};
use nalgebra::DMatrix;
use num_complex::Complex64;

/// Spin-connection matrices `omega^s_a` at every grid point, for every chart
/// direction (the normal component vanishes for the parallel frame but is
/// carried anyway).
pub fn spin_connection_coeffs(
    grid: &SlabGrid,
    frame: &FrameGrid,
    rep: &GammaRep,
) -> Vec<Vec<CMat>> {
    let n = grid.n;
    let k = rep.k;
    (0..grid.num_points())
        .map(|p| {
            let mut per_dir = Vec::with_capacity(n);
            for a in 0..n {
                let mut m = CMat::zeros(k, k);
                if a < n - 1 {
                    let w = &frame.omega[p][a];
                    for i in 0..n {
                        for j in 0..n {
                            let c = w[(i, j)];
                            if c != 0.0 {
                                m += (&rep.gammas[i] * &rep.gammas[j]).scale(-0.25 * c);
                            }
                        }
                    }
                }
                per_dir.push(m);
            }
            per_dir
        })
        .collect()
}

/// Twisted connection `theta_a = omega^s_a (x) Id_N + Id_k (x) A_a` on the
/// grid.
pub fn build_twisted_connection(
    grid: &SlabGrid,
    spin: &[Vec<CMat>],
    a_field: &dyn ConnectionSource,
    rep: &GammaRep,
) -> ThetaGrid {
    let n = grid.n;
    let nc = a_field.rank();
    let idn = ceye(nc);
    let idk = ceye(rep.k);
    let thetas = (0..grid.num_points())
        .map(|p| {
            let x = grid.point_coords(p);
            (0..n)
                .map(|a| spin[p][a].kronecker(&idn) + idk.kronecker(&a_field.a_at(a, &x)))
                .collect()
        })
        .collect();
    ThetaGrid { comp: rep.k * nc, thetas }
}

/// Jet-level spin connection at a boundary base point: `out[a]` is the
/// `k x k` jet matrix of `omega^s_a`.
pub fn spin_connection_jets(frame: &FrameJets, rep: &GammaRep) -> Vec<JetMat> {
    let n = frame.n;
    let k = rep.k;
    let ord = frame.omega[0].at(0, 0).order();
    (0..n)
        .map(|a| {
            let mut m = JetMat::zero(k, k, n, ord);
            for i in 0..n {
                for j in 0..n {
                    let w = frame.omega[a].at(i, j);
                    if w.max_abs() > 0.0 {
                        let gg = JetMat::from_cmat(
                            &(&rep.gammas[i] * &rep.gammas[j]).scale(-0.25),
                            n,
                            ord,
                        );
                        m = m.add(&gg.scale_jet(w));
                    }
                }
            }
            m
        })
        .collect()
}

/// Jet-level twisted connection `theta_a` (size `kN`), combining the spin
/// jets with exact connection jets at the same base point.
pub fn twisted_connection_jets(
    frame: &FrameJets,
    rep: &GammaRep,
    a_field: &ConnectionField,
    x0: &[f64],
) -> Vec<JetMat> {
    let n = frame.n;
    let nc = a_field.nc;
    let ord = frame.omega[0].at(0, 0).order();
    let spin = spin_connection_jets(frame, rep);
    let idn = JetMat::identity(nc, n, ord);
    let idk = JetMat::identity(rep.k, n, ord);
    (0..n)
        .map(|a| {
            let gauge = a_field.jet(a, x0, ord);
            spin[a].kronecker(&idn).add(&idk.kronecker(&gauge))
        })
        .collect()
}

/// Invert the twisted-connection decomposition at a single point: returns
/// the gauge part `A_a = (1/k) Tr_S theta_a` and the frame one-form
/// coefficients `omega^i_j` recovered by projection onto the
/// `gamma_i gamma_j` family.
pub fn split_twisted(theta_a: &CMat, rep: &GammaRep, nc: usize) -> (CMat, DMatrix<f64>) {
    let k = rep.k;
    let n = rep.n;
    // Partial trace over the spinor factor.
    let mut a = CMat::zeros(nc, nc);
    for s in 0..k {
        for p in 0..nc {
            for q in 0..nc {
                a[(p, q)] += theta_a[(s * nc + p, s * nc + q)];
            }
        }
    }
    a /= Complex64::new(k as f64, 0.0);

    let idn = ceye(nc);
    let mut omega = DMatrix::<f64>::zeros(n, n);
    let dim = (k * nc) as f64;
    for ((i, j), prod) in rep.pair_products() {
        let basis = prod.kronecker(&idn);
        let c = (basis.adjoint() * theta_a).trace() / Complex64::new(dim, 0.0);
        // theta's spin part carries coefficient -1/2 omega^i_j on this basis
        // element; the projection coefficient is real for skew-Hermitian
        // input built from a real one-form.
        omega[(i, j)] = -2.0 * c.re;
        omega[(j, i)] = 2.0 * c.re;
    }
    (a, omega)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clifford::build_gamma;
    use crate::dirac_fd::ConnTerm;
    use crate::geometry::{parallel_frame_grid, MetricField, TrigPoly};
    use crate::linalg::{max_abs, max_abs_diff, random_skew_hermitian};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_grid(n: usize) -> SlabGrid {
        match n {
            2 => SlabGrid::new(2, vec![8], 9, 1.0).unwrap(),
            _ => SlabGrid::new(3, vec![8, 8], 9, 1.0).unwrap(),
        }
    }

    #[test]
    fn flat_metric_has_zero_spin_connection() {
        let grid = small_grid(2);
        let rep = build_gamma(2).unwrap();
        let metric = MetricField::flat(2);
        let frame = parallel_frame_grid(&metric, &grid);
        let spin = spin_connection_coeffs(&grid, &frame, &rep);
        for per_dir in &spin {
            for m in per_dir {
                assert_eq!(max_abs(m), 0.0);
            }
        }
        // Twisted connection with A = 0 vanishes; with A != 0 it is Id (x) A.
        let a = ConnectionField::abelian(2, 0, TrigPoly::single(0.5, vec![1.0, 0.0], 0.3));
        let theta = build_twisted_connection(&grid, &spin, &a, &rep);
        for p in 0..grid.num_points() {
            let x = grid.point_coords(p);
            let expect = ceye(rep.k).kronecker(&a.a_at(0, &x));
            assert!(max_abs_diff(&theta.thetas[p][0], &expect) < 1e-15);
        }
    }

    #[test]
    fn spin_connection_is_skew_hermitian_and_traceless() {
        let grid = small_grid(2);
        let rep = build_gamma(2).unwrap();
        let f = TrigPoly::single(0.3, vec![1.0, 0.7], 0.2);
        let metric = MetricField::conformal(2, f).unwrap();
        let frame = parallel_frame_grid(&metric, &grid);
        let spin = spin_connection_coeffs(&grid, &frame, &rep);
        for per_dir in spin.iter().step_by(7) {
            for m in per_dir {
                assert!(max_abs(&(m.adjoint() + m)) < 1e-12);
                assert!(m.trace().norm() < 1e-12);
            }
        }
    }

    #[test]
    fn two_dim_spin_connection_is_single_pair_form() {
        // In 2D only the (1,2) pair survives: omega^s_a = -1/2 w^1_2(d_a) g1 g2.
        let grid = small_grid(2);
        let rep = build_gamma(2).unwrap();
        let f = TrigPoly::single(0.25, vec![1.0, 0.4], 0.9);
        let metric = MetricField::conformal(2, f).unwrap();
        let frame = parallel_frame_grid(&metric, &grid);
        let spin = spin_connection_coeffs(&grid, &frame, &rep);
        for p in (0..grid.num_points()).step_by(11) {
            for a in 0..2 {
                let w12 = frame.omega[p].get(a).map(|m| m[(0, 1)]).unwrap_or(0.0);
                let expect = (&rep.gammas[0] * &rep.gammas[1]).scale(-0.5 * w12);
                assert!(max_abs_diff(&spin[p][a], &expect) < 1e-12);
            }
        }
    }

    #[test]
    fn split_roundtrip_recovers_gauge_and_frame_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for (n, nc) in [(2usize, 1usize), (2, 2), (3, 2)] {
            let rep = build_gamma(n).unwrap();
            for _ in 0..10 {
                // Random antisymmetric one-form coefficients and gauge part.
                let mut omega = DMatrix::<f64>::zeros(n, n);
                for i in 0..n {
                    for j in (i + 1)..n {
                        let v = rng.gen_range(-1.0..1.0);
                        omega[(i, j)] = v;
                        omega[(j, i)] = -v;
                    }
                }
                let a = random_skew_hermitian(&mut rng, nc, 0.8);
                let mut theta = ceye(rep.k).kronecker(&a);
                for i in 0..n {
                    for j in 0..n {
                        theta += (&rep.gammas[i] * &rep.gammas[j])
                            .kronecker(&ceye(nc))
                            .scale(-0.25 * omega[(i, j)]);
                    }
                }
                let (a_rec, omega_rec) = split_twisted(&theta, &rep, nc);
                assert!(max_abs_diff(&a_rec, &a) < 1e-12);
                let mut worst = 0.0f64;
                for i in 0..n {
                    for j in 0..n {
                        worst = worst.max((omega_rec[(i, j)] - omega[(i, j)]).abs());
                    }
                }
                assert!(worst < 1e-12, "n={n} nc={nc} worst={worst}");
            }
        }
    }

    #[test]
    fn partial_trace_of_pure_gauge_connection() {
        // N=1, A_a = i f_a(x): the partial trace returns i f_a exactly.
        let grid = small_grid(2);
        let rep = build_gamma(2).unwrap();
        let profile = TrigPoly::single(0.7, vec![2.0, 0.0], 0.1);
        let a = ConnectionField::abelian(2, 0, profile.clone());
        let metric = MetricField::flat(2);
        let frame = parallel_frame_grid(&metric, &grid);
        let spin = spin_connection_coeffs(&grid, &frame, &rep);
        let theta = build_twisted_connection(&grid, &spin, &a, &rep);
        for p in (0..grid.num_points()).step_by(13) {
            let x = grid.point_coords(p);
            let (a_rec, _) = split_twisted(&theta.thetas[p][0], &rep, 1);
            let expect = Complex64::new(0.0, profile.eval(&x));
            assert!((a_rec[(0, 0)] - expect).norm() < 1e-13);
        }
    }

    #[test]
    fn jet_and_grid_twisted_connections_agree_at_base_point() {
        let rep = build_gamma(2).unwrap();
        let f = TrigPoly::single(0.2, vec![1.0, 0.5], 0.4);
        let metric = MetricField::conformal(2, f).unwrap();
        let grid = small_grid(2);
        let frame_grid = parallel_frame_grid(&metric, &grid);
        let x_tan = grid.tangential_coords(3);
        let frame_jets = crate::geometry::parallel_frame_jets(&metric, &x_tan, 4);
        let terms = vec![ConnTerm {
            dir: 0,
            mat: CMat::from_element(1, 1, Complex64::new(0.0, 1.0)),
            profile: TrigPoly::single(0.6, vec![1.0, 0.8], 0.2),
        }];
        let a = ConnectionField::new(2, 1, terms).unwrap();
        let mut x0 = x_tan.clone();
        x0.push(0.0);
        let jets = twisted_connection_jets(&frame_jets, &rep, &a, &x0);
        let spin = spin_connection_coeffs(&grid, &frame_grid, &rep);
        let theta = build_twisted_connection(&grid, &spin, &a, &rep);
        let p = grid.point_index(3, 0);
        for dir in 0..2 {
            assert!(
                max_abs_diff(&jets[dir].value(), &theta.thetas[p][dir]) < 1e-9,
                "direction {dir}"
            );
        }
    }
}
