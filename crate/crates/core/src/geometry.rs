//! Metrics in boundary-normal coordinates with exact analytic jets, and the
//! derived geometry: Christoffel symbols, parallel orthonormal frames, the
//! frame-change matrix, Levi-Civita connection one-forms, the mean-curvature
//! trace term, and scalar curvature.
//!
//! Conventions. Coordinates are `x = (x^0, .., x^{n-2}, x^{n-1})` with the
//! *last* coordinate normal: `x^{n-1} in [0, T]`, boundary at `x^{n-1} = 0`,
//! tangential coordinates 2*pi-periodic. Every built-in family is in
//! boundary-normal form,
//!
//! ```text
//!     g_{nn} = 1,   g_{n alpha} = 0,
//! ```
//!
//! identically, so only the tangential block varies. Families are a closed
//! menu of analytic metrics (flat; conformal `e^{2f} delta` with `f` a
//! trigonometric polynomial; diagonal perturbations `delta + eps * trig`;
//! a round-sphere patch in geodesic polar form) whose Taylor jets at any
//! point are computed exactly through jet arithmetic — no numerical
//! differentiation enters the symbol pipeline.
//!
//! The orthonormal frame is fixed deterministically: Gram-Schmidt of
//! `(d_0, .., d_{n-2})` at the boundary (equivalently the inverse-transpose
//! Cholesky factor of the tangential block), extended into the slab by
//! parallel transport along normal lines, so `e_n = d_n` and
//! `omega^i_j(d_n) = 0`. The frame matrix `E` (columns are frame vectors,
//! `e_i = E^j_i d_j`) and its inverse `h` (`d_j = h^i_j e_i`) relate chart
//! and frame quantities; the Levi-Civita one-form in the frame is
//!
//! ```text
//!     omega^i_j(d_a) = [h (d_a E + Gamma_a E)]^i_j ,
//! ```
//!
//! with `(Gamma_a)^k_l = Gamma^k_{al}` the Christoffel matrix of the chart.

use crate::dirac_fd::SlabGrid;
use crate::jet::{monomials, Jet};
use crate::jetmat::JetMat;
use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("metric family requires dimension {expect}, got {got}")]
    Dimension { expect: usize, got: usize },
    #[error("tangential wavenumber {0} is not an integer (tangential coordinates are 2*pi-periodic)")]
    NonIntegerWave(f64),
    #[error("diagonal perturbation needs one profile per tangential direction ({expect}), got {got}")]
    ProfileCount { expect: usize, got: usize },
    #[error("metric not positive definite: perturbation amplitude {0} >= 1")]
    NotPositive(f64),
}

/// One term `amp * cos(wave . x + phase)` of a trigonometric polynomial.
#[derive(Debug, Clone)]
pub struct TrigTerm {
    pub amp: f64,
    pub wave: Vec<f64>,
    pub phase: f64,
}

/// A real trigonometric polynomial `sum_m amp_m cos(wave_m . x + phase_m)`.
///
/// Used for metric conformal factors, connection profiles, potentials and
/// test fields alike; tangential wavenumbers must be integers so the field
/// lives on the torus leaves.
#[derive(Debug, Clone, Default)]
pub struct TrigPoly {
    pub terms: Vec<TrigTerm>,
}

impl TrigPoly {
    pub fn new(terms: Vec<TrigTerm>) -> Self {
        TrigPoly { terms }
    }

    /// Single term `amp * cos(wave . x + phase)`.
    pub fn single(amp: f64, wave: Vec<f64>, phase: f64) -> Self {
        TrigPoly { terms: vec![TrigTerm { amp, wave, phase }] }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let arg: f64 =
                    t.wave.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + t.phase;
                t.amp * arg.cos()
            })
            .sum()
    }

    /// Exact jet at base point `x0` (all `nvars` coordinates).
    pub fn jet(&self, x0: &[f64], order: usize) -> Jet {
        let nvars = x0.len();
        let mut acc = Jet::zero(nvars, order);
        for t in &self.terms {
            // arg = wave.(x0 + u) + phase as an affine jet, then cos.
            let c0: f64 = t.wave.iter().zip(x0).map(|(w, xi)| w * xi).sum::<f64>() + t.phase;
            let mut arg = Jet::constant_re(nvars, order, c0);
            for (v, w) in t.wave.iter().enumerate() {
                if *w != 0.0 {
                    arg = arg.add(&Jet::coordinate(nvars, order, v).scale(Complex64::new(*w, 0.0)));
                }
            }
            acc = acc.add(&arg.cos().scale(Complex64::new(t.amp, 0.0)));
        }
        acc
    }

    /// Largest possible magnitude (sum of |amp|).
    pub fn amp_bound(&self) -> f64 {
        self.terms.iter().map(|t| t.amp.abs()).sum()
    }

    fn check_tangential_waves(&self, m: usize) -> Result<(), GeometryError> {
        for t in &self.terms {
            for w in t.wave.iter().take(m) {
                if (w - w.round()).abs() > 1e-12 {
                    return Err(GeometryError::NonIntegerWave(*w));
                }
            }
        }
        Ok(())
    }
}

/// The closed menu of analytic metric families.
#[derive(Debug, Clone)]
pub enum MetricFamily {
    /// Euclidean metric.
    Flat,
    /// Tangential block `e^{2 f(x)} delta_{ab}`, normal part untouched.
    Conformal { f: TrigPoly },
    /// Tangential block `diag(1 + eps * p_a(x))`.
    DiagonalPerturb { eps: f64, profiles: Vec<TrigPoly> },
    /// Round 2-sphere of radius `r` in geodesic polar form:
    /// `g_11 = r^2 sin^2((x^n + t0)/r)` (n = 2 only; keep
    /// `0 < t0 < t0 + T < pi r` to stay inside the patch).
    SpherePatch { r: f64, t0: f64 },
}

/// A metric in boundary-normal form on the slab chart.
#[derive(Debug, Clone)]
pub struct MetricField {
    pub n: usize,
    pub family: MetricFamily,
}

impl MetricField {
    pub fn flat(n: usize) -> Self {
        MetricField { n, family: MetricFamily::Flat }
    }

    pub fn conformal(n: usize, f: TrigPoly) -> Result<Self, GeometryError> {
        f.check_tangential_waves(n - 1)?;
        Ok(MetricField { n, family: MetricFamily::Conformal { f } })
    }

    pub fn diagonal_perturb(
        n: usize,
        eps: f64,
        profiles: Vec<TrigPoly>,
    ) -> Result<Self, GeometryError> {
        if profiles.len() != n - 1 {
            return Err(GeometryError::ProfileCount { expect: n - 1, got: profiles.len() });
        }
        let mut worst = 0.0f64;
        for p in &profiles {
            p.check_tangential_waves(n - 1)?;
            worst = worst.max(eps.abs() * p.amp_bound());
        }
        if worst >= 1.0 {
            return Err(GeometryError::NotPositive(worst));
        }
        Ok(MetricField { n, family: MetricFamily::DiagonalPerturb { eps, profiles } })
    }

    pub fn sphere_patch(r: f64, t0: f64) -> Self {
        MetricField { n: 2, family: MetricFamily::SpherePatch { r, t0 } }
    }

    pub fn is_flat(&self) -> bool {
        matches!(self.family, MetricFamily::Flat)
    }

    /// Exact jet of the full metric matrix at the point `x0` (any point of
    /// the chart, not only the boundary).
    pub fn g_jet(&self, x0: &[f64], order: usize) -> JetMat {
        assert_eq!(x0.len(), self.n, "point dimension mismatch");
        let n = self.n;
        let m = n - 1;
        let mut g = JetMat::identity(n, n, order);
        match &self.family {
            MetricFamily::Flat => {}
            MetricFamily::Conformal { f } => {
                let factor = f.jet(x0, order).scale(Complex64::new(2.0, 0.0)).exp();
                for a in 0..m {
                    *g.at_mut(a, a) = factor.clone();
                }
            }
            MetricFamily::DiagonalPerturb { eps, profiles } => {
                for a in 0..m {
                    let p = profiles[a].jet(x0, order).scale(Complex64::new(*eps, 0.0));
                    *g.at_mut(a, a) = Jet::constant_re(n, order, 1.0).add(&p);
                }
            }
            MetricFamily::SpherePatch { r, t0 } => {
                // g_11 = r^2 sin^2((x^n + t0)/r).
                let base = (x0[1] + t0) / r;
                let arg = Jet::constant_re(n, order, base)
                    .add(&Jet::coordinate(n, order, 1).scale(Complex64::new(1.0 / r, 0.0)));
                let s = arg.sin();
                *g.at_mut(0, 0) = s.mul(&s).scale(Complex64::new(r * r, 0.0));
            }
        }
        g
    }

    /// Metric value at a point (real symmetric positive-definite matrix).
    pub fn g(&self, x: &[f64]) -> DMatrix<f64> {
        self.g_jet(x, 0).value().map(|z| z.re)
    }

    /// Inverse metric value at a point.
    pub fn g_inv(&self, x: &[f64]) -> DMatrix<f64> {
        self.g(x).try_inverse().expect("metric is invertible")
    }

    /// Volume weight `sqrt(det g)` at a point.
    pub fn sqrt_det_g(&self, x: &[f64]) -> f64 {
        self.g(x).determinant().sqrt()
    }
}

/// Metric jets at a base point together with the inverse-metric jets.
#[derive(Clone, Debug)]
pub struct MetricJets {
    pub n: usize,
    pub order: usize,
    pub g: JetMat,
    pub ginv: JetMat,
}

/// Build exact metric/inverse jets at a point.
pub fn metric_jets(metric: &MetricField, x0: &[f64], order: usize) -> MetricJets {
    let g = metric.g_jet(x0, order);
    let ginv = g.inverse();
    MetricJets { n: metric.n, order, g, ginv }
}

/// Christoffel symbols as jets: `out[i]` is the matrix `(Gamma^i_{jk})_{jk}`,
/// one order lower than the metric jets.
pub fn christoffel_jets(mj: &MetricJets) -> Vec<JetMat> {
    let n = mj.n;
    let half = Complex64::new(0.5, 0.0);
    let dg: Vec<JetMat> = (0..n).map(|k| mj.g.derivative(k)).collect();
    (0..n)
        .map(|i| {
            JetMat::from_fn(n, n, |j, k| {
                // Gamma^i_{jk} = 1/2 g^{il} (d_j g_lk + d_k g_jl - d_l g_jk)
                let mut acc = Jet::zero(n, mj.order.saturating_sub(1));
                for l in 0..n {
                    let term = dg[j]
                        .at(l, k)
                        .add(dg[k].at(j, l))
                        .sub(dg[l].at(j, k));
                    acc = acc.add(&mj.ginv.at(i, l).mul(&term));
                }
                acc.scale(half)
            })
        })
        .collect()
}

/// Scalar curvature jet (two orders below the metric jets):
/// `R = g^{jk} (d_i Gamma^i_{jk} - d_j Gamma^i_{ik} + Gamma^i_{il} Gamma^l_{jk} - Gamma^i_{jl} Gamma^l_{ik})`.
pub fn scalar_curvature_jet(mj: &MetricJets) -> Jet {
    let n = mj.n;
    let gamma = christoffel_jets(mj);
    let ord = mj.order.saturating_sub(2);
    let dgamma: Vec<Vec<JetMat>> = (0..n).map(|i| (0..n).map(|d| gamma[i].derivative(d)).collect()).collect();
    let mut r = Jet::zero(n, ord);
    for j in 0..n {
        for k in 0..n {
            let mut ric = Jet::zero(n, ord);
            for i in 0..n {
                ric = ric.add(dgamma[i][i].at(j, k)).sub(dgamma[i][j].at(i, k));
                for l in 0..n {
                    ric = ric
                        .add(&gamma[i].at(i, l).mul(gamma[l].at(j, k)))
                        .sub(&gamma[i].at(j, l).mul(gamma[l].at(i, k)));
                }
            }
            r = r.add(&mj.ginv.at(j, k).mul(&ric));
        }
    }
    r
}

/// Christoffel symbols at a point: `out[i][(j,k)] = Gamma^i_{jk}(x)`.
pub fn christoffel_point(metric: &MetricField, x: &[f64]) -> Vec<DMatrix<f64>> {
    let mj = metric_jets(metric, x, 1);
    christoffel_jets(&mj).iter().map(|g| g.value().map(|z| z.re)).collect()
}

/// Scalar curvature at a point.
pub fn scalar_curvature(metric: &MetricField, x: &[f64]) -> f64 {
    let mj = metric_jets(metric, x, 2);
    scalar_curvature_jet(&mj).value().re
}

/// The trace term `E(x') = -1/2 g^{ab} d_n g_{ab}` at a boundary point.
pub fn e_term(metric: &MetricField, x_tan: &[f64]) -> f64 {
    let mut x0 = x_tan.to_vec();
    x0.push(0.0);
    let mj = metric_jets(metric, &x0, 1);
    e_term_jet(&mj).value().re
}

/// Jet version of the trace term at the jets' base point.
pub fn e_term_jet(mj: &MetricJets) -> Jet {
    let n = mj.n;
    let m = n - 1;
    let dng = mj.g.derivative(n - 1);
    let mut acc = Jet::zero(n, mj.order.saturating_sub(1));
    for a in 0..m {
        for b in 0..m {
            acc = acc.add(&mj.ginv.at(a, b).mul(dng.at(a, b)));
        }
    }
    acc.scale(Complex64::new(-0.5, 0.0))
}

/// Frame data as exact jets at a boundary base point `(x0', 0)`.
#[derive(Clone, Debug)]
pub struct FrameJets {
    pub n: usize,
    pub order: usize,
    pub metric: MetricJets,
    /// Frame matrix: `e_i = E^j_i d_j` (columns are frame vectors); the
    /// normal row/column is `(0, .., 0, 1)`.
    pub e: JetMat,
    /// Inverse frame matrix: `d_j = h^i_j e_i`.
    pub h: JetMat,
    /// Christoffel jets of the chart, `gamma[i] = (Gamma^i_{jk})_{jk}`.
    pub gamma: Vec<JetMat>,
    /// Connection one-form `omega[a] = (omega^i_j(d_a))_{ij}`; `omega[n-1]`
    /// vanishes for the parallel frame.
    pub omega: Vec<JetMat>,
}

/// Cholesky factor (lower-triangular, positive diagonal) of a symmetric
/// positive-definite jet matrix.
fn jet_cholesky(s: &JetMat) -> JetMat {
    let m = s.rows();
    let nv = s.at(0, 0).nvars();
    let ord = s.at(0, 0).order();
    let mut l = JetMat::zero(m, m, nv, ord);
    for j in 0..m {
        let mut d = s.at(j, j).clone();
        for k in 0..j {
            d = d.sub(&l.at(j, k).mul(l.at(j, k)));
        }
        let ljj = d.sqrt();
        let inv_ljj = ljj.inverse();
        *l.at_mut(j, j) = ljj;
        for i in (j + 1)..m {
            let mut v = s.at(i, j).clone();
            for k in 0..j {
                v = v.sub(&l.at(i, k).mul(l.at(j, k)));
            }
            *l.at_mut(i, j) = v.mul(&inv_ljj);
        }
    }
    l
}

/// Build the parallel orthonormal frame as exact jets at the boundary point
/// `(x0', 0)`.
///
/// At the boundary the tangential frame is the Gram-Schmidt frame of
/// `(d_0, .., d_{n-2})` (inverse-transpose Cholesky of the tangential
/// metric block); inward it solves `d_n E = -Gamma_n E` coefficient-by-
/// coefficient, which is exact in jet arithmetic — the only approximations
/// anywhere are the jet truncation orders themselves.
pub fn parallel_frame_jets(metric: &MetricField, x_tan: &[f64], order: usize) -> FrameJets {
    let mut x0 = x_tan.to_vec();
    x0.push(0.0);
    parallel_frame_from_jets(metric_jets(metric, &x0, order))
}

/// Same construction starting from raw metric jets (no analytic family
/// needed, so partially recovered boundary data can be transported too).
pub fn parallel_frame_from_jets(mj: MetricJets) -> FrameJets {
    let n = mj.n;
    let order = mj.order;
    let m = n - 1;
    let nrm = n - 1; // normal coordinate index
    let gamma = christoffel_jets(&mj);

    // Boundary Gram-Schmidt on the tangential block restricted to x^n = 0.
    let s_bdy = JetMat::from_fn(m, m, |a, b| mj.g.at(a, b).restrict(nrm));
    let l = jet_cholesky(&s_bdy);
    let e_bdy = l.inverse().adjoint(); // L^{-T}; jets are real so adjoint = transpose

    // Full frame matrix with boundary data; normal coefficients filled by
    // the transport recurrence d_n E = -Gamma_n E.
    let mut e = JetMat::identity(n, n, order);
    for a in 0..m {
        for b in 0..m {
            *e.at_mut(a, b) = e_bdy.at(a, b).clone();
        }
    }
    let gamma_n = JetMat::from_fn(n, n, |i, j| gamma[i].at(nrm, j).clone());
    if order >= 1 {
        let monos = monomials(n, order - 1);
        for p in 0..order {
            let rhs = gamma_n.matmul(&e.truncate(order - 1)).neg();
            for mu in monos.iter().filter(|mu| mu[nrm] == p) {
                let mut up = (*mu).clone();
                up[nrm] = p + 1;
                for i in 0..n {
                    for j in 0..n {
                        let c = rhs.at(i, j).coeff(mu) / ((p + 1) as f64);
                        let mut jij = e.at(i, j).clone();
                        jij.set_coeff(&up, c);
                        *e.at_mut(i, j) = jij;
                    }
                }
            }
        }
    }

    let h = e.inverse();
    let omega: Vec<JetMat> = (0..n)
        .map(|a| {
            let gamma_a = JetMat::from_fn(n, n, |k, l2| gamma[k].at(a, l2).clone());
            h.matmul(&e.derivative(a).add(&gamma_a.matmul(&e)))
        })
        .collect();

    FrameJets { n, order, metric: mj, e, h, gamma, omega }
}

/// Frame data sampled on a slab grid: per point, the frame matrix `E`, its
/// inverse `h`, and the connection one-form components `omega^i_j(d_a)` for
/// tangential `a` (the normal component vanishes for the parallel frame).
#[derive(Clone, Debug)]
pub struct FrameGrid {
    pub n: usize,
    pub e: Vec<DMatrix<f64>>,
    pub h: Vec<DMatrix<f64>>,
    /// `omega[p][a]` = matrix `(omega^i_j(d_a))_{ij}` at point index `p`,
    /// for `a` in `0..n-1` (tangential directions only).
    pub omega: Vec<Vec<DMatrix<f64>>>,
}

/// Integrate the parallel frame along every normal grid line.
///
/// The state carried per line is the frame matrix with first-order
/// tangential jets attached, so the tangential derivatives needed for
/// `omega^i_j(d_a)` are exact at every layer; only the normal integration is
/// approximate (classical Runge-Kutta with substeps chosen to keep the
/// orthonormality drift at the 1e-12 scale).
pub fn parallel_frame_grid(metric: &MetricField, grid: &SlabGrid) -> FrameGrid {
    let n = metric.n;
    let npts = grid.num_points();
    if metric.is_flat() {
        let id = DMatrix::<f64>::identity(n, n);
        let z = DMatrix::<f64>::zeros(n, n);
        return FrameGrid {
            n,
            e: vec![id.clone(); npts],
            h: vec![id; npts],
            omega: vec![vec![z; n - 1]; npts],
        };
    }

    let nrm = n - 1;
    let order = 1; // tangential first derivatives ride along
    let mut e = vec![DMatrix::<f64>::zeros(n, n); npts];
    let mut h = vec![DMatrix::<f64>::zeros(n, n); npts];
    let mut omega = vec![vec![DMatrix::<f64>::zeros(n, n); n - 1]; npts];

    // -Gamma_n as a tangential jet matrix at (x', t).
    let minus_gamma_n = |x: &[f64]| -> JetMat {
        let mj = metric_jets(metric, x, order + 1);
        let gamma = christoffel_jets(&mj);
        JetMat::from_fn(n, n, |i, j| gamma[i].at(nrm, j).restrict(nrm).neg())
    };

    let h_n = grid.h_normal();
    let substeps = ((h_n / 1.0e-3).ceil() as usize).clamp(4, 64);
    let dt = h_n / substeps as f64;

    for tan_idx in 0..grid.num_tangential() {
        let x_tan = grid.tangential_coords(tan_idx);

        // Boundary frame by Cholesky of the tangential block, with jets.
        let mut x0 = x_tan.clone();
        x0.push(0.0);
        let mj0 = metric_jets(metric, &x0, order);
        let s_bdy = JetMat::from_fn(n - 1, n - 1, |a, b| mj0.g.at(a, b).restrict(nrm));
        let e_bdy = jet_cholesky(&s_bdy).inverse().adjoint();
        let mut state = JetMat::identity(n, n, order);
        for a in 0..(n - 1) {
            for b in 0..(n - 1) {
                *state.at_mut(a, b) = e_bdy.at(a, b).clone();
            }
        }

        for layer in 0..grid.n_normal {
            let mut x = x_tan.clone();
            x.push(grid.normal_coord(layer));
            let p = grid.point_index(tan_idx, layer);

            // Record E, h, omega at this layer.
            let ev = state.value().map(|z| z.re);
            let hv = ev.clone().try_inverse().expect("frame matrix invertible");
            let mj = metric_jets(metric, &x, order + 1);
            let gamma = christoffel_jets(&mj);
            for a in 0..(n - 1) {
                let gamma_a = JetMat::from_fn(n, n, |k, l| gamma[k].at(a, l).restrict(nrm));
                let nabla_e = state.derivative(a).add(&gamma_a.matmul(&state));
                omega[p][a] = &hv * nabla_e.value().map(|z| z.re);
            }
            e[p] = ev;
            h[p] = hv;

            // Advance to the next layer by substepped RK4 (skip after last).
            if layer + 1 == grid.n_normal {
                break;
            }
            let t0 = grid.normal_coord(layer);
            for s in 0..substeps {
                let t = t0 + s as f64 * dt;
                let at = |tt: f64| {
                    let mut xx = x_tan.clone();
                    xx.push(tt);
                    minus_gamma_n(&xx)
                };
                let k1 = at(t).matmul(&state);
                let k2 = at(t + 0.5 * dt).matmul(&state.add(&k1.scale((0.5 * dt).into())));
                let k3 = at(t + 0.5 * dt).matmul(&state.add(&k2.scale((0.5 * dt).into())));
                let k4 = at(t + dt).matmul(&state.add(&k3.scale(dt.into())));
                let incr = k1
                    .add(&k2.scale(2.0.into()))
                    .add(&k3.scale(2.0.into()))
                    .add(&k4)
                    .scale((dt / 6.0).into());
                state = state.add(&incr);
            }
        }
    }

    FrameGrid { n, e, h, omega }
}
