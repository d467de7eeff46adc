//! Truncated multivariate Taylor arithmetic ("jets").
//!
//! A [`Jet`] holds the Taylor coefficients of a smooth complex-valued
//! function at a fixed base point, truncated at a total degree `order`:
//!
//! ```text
//!     f(x0 + t) = sum_{|mu| <= order} c_mu t^mu,      c_mu = d^mu f(x0) / mu!
//! ```
//!
//! Coefficients are stored densely over all multi-indices of total degree
//! `<= order` in graded-lexicographic rank order. Arithmetic is exact on the
//! retained coefficients:
//!
//! * `add`/`mul` keep the order of the lower-order operand (truncated
//!   convolution for `mul`),
//! * `derivative(j)` maps an order-`J` jet to an order-`J-1` jet,
//! * `inverse`, `sqrt`, `exp`, `sin`, `cos` are computed by composing the
//!   scalar series with the nilpotent part, so families like `e^{2f}` get
//!   exact jets without any symbolic differentiation.
//!
//! Multi-index tables are cached per `(nvars, order)` pair and shared through
//! an `Arc`, so cloning jets and mixing jets from different calls is cheap.

use num_complex::Complex64;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Maximum number of coordinates a jet can depend on.
pub const MAX_VARS: usize = 8;

type Multi = [u8; MAX_VARS];

/// Shared combinatorial tables for jets in `nvars` variables at a given
/// truncation order: the multi-index list, rank lookup, and a dense
/// product-rank table for truncated convolution.
#[derive(Debug)]
struct JetTable {
    nvars: usize,
    order: usize,
    /// All multi-indices with |mu| <= order, graded-lex order.
    monos: Vec<Multi>,
    /// Rank of each multi-index in `monos`.
    rank: HashMap<Multi, usize>,
    /// `prod[i * len + j]` = rank of monos[i] + monos[j], or `u32::MAX` if
    /// the sum exceeds the truncation order.
    prod: Vec<u32>,
}

fn enumerate_monos(nvars: usize, order: usize) -> Vec<Multi> {
    let mut out = Vec::new();
    let mut cur: Multi = [0; MAX_VARS];
    fn rec(out: &mut Vec<Multi>, cur: &mut Multi, var: usize, nvars: usize, left: usize) {
        if var == nvars {
            out.push(*cur);
            return;
        }
        for d in 0..=left {
            cur[var] = d as u8;
            rec(out, cur, var + 1, nvars, left - d);
        }
        cur[var] = 0;
    }
    // Group by total degree so the layout is graded.
    for total in 0..=order {
        let mut level = Vec::new();
        rec(&mut level, &mut cur, 0, nvars, total);
        level.retain(|m| m.iter().map(|&d| d as usize).sum::<usize>() == total);
        out.extend(level);
    }
    out
}

impl JetTable {
    fn new(nvars: usize, order: usize) -> Self {
        let monos = enumerate_monos(nvars, order);
        let mut rank = HashMap::with_capacity(monos.len());
        for (i, m) in monos.iter().enumerate() {
            rank.insert(*m, i);
        }
        let len = monos.len();
        let mut prod = vec![u32::MAX; len * len];
        for i in 0..len {
            for j in 0..len {
                let mut s: Multi = [0; MAX_VARS];
                let mut total = 0usize;
                for v in 0..nvars {
                    s[v] = monos[i][v] + monos[j][v];
                    total += s[v] as usize;
                }
                if total <= order {
                    prod[i * len + j] = rank[&s] as u32;
                }
            }
        }
        JetTable { nvars, order, monos, rank, prod }
    }
}

fn table(nvars: usize, order: usize) -> Arc<JetTable> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<JetTable>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry((nvars, order))
        .or_insert_with(|| Arc::new(JetTable::new(nvars, order)))
        .clone()
}

/// All multi-indices of total degree `<= order` in `nvars` variables, in the
/// same graded order jets use internally.
pub fn monomials(nvars: usize, order: usize) -> Vec<Vec<usize>> {
    enumerate_monos(nvars, order)
        .into_iter()
        .map(|m| m[..nvars].iter().map(|&d| d as usize).collect())
        .collect()
}

/// Truncated Taylor expansion of a complex-valued function of `nvars` real
/// coordinates, up to total degree `order`.
#[derive(Clone, Debug)]
pub struct Jet {
    table: Arc<JetTable>,
    c: Vec<Complex64>,
}

impl Jet {
    /// The zero jet.
    pub fn zero(nvars: usize, order: usize) -> Self {
        assert!(nvars >= 1 && nvars <= MAX_VARS, "jet variable count out of range");
        let table = table(nvars, order);
        let len = table.monos.len();
        Jet { table, c: vec![Complex64::new(0.0, 0.0); len] }
    }

    /// The constant jet with value `z`.
    pub fn constant(nvars: usize, order: usize, z: Complex64) -> Self {
        let mut j = Jet::zero(nvars, order);
        j.c[0] = z;
        j
    }

    /// Real constant jet.
    pub fn constant_re(nvars: usize, order: usize, v: f64) -> Self {
        Jet::constant(nvars, order, Complex64::new(v, 0.0))
    }

    /// The jet of the displacement coordinate `x_var - x0_var` (zero value,
    /// unit first-order coefficient).
    pub fn coordinate(nvars: usize, order: usize, var: usize) -> Self {
        assert!(var < nvars, "coordinate index out of range");
        let mut j = Jet::zero(nvars, order);
        if order >= 1 {
            let mut m: Multi = [0; MAX_VARS];
            m[var] = 1;
            let r = j.table.rank[&m];
            j.c[r] = Complex64::new(1.0, 0.0);
        }
        j
    }

    pub fn nvars(&self) -> usize {
        self.table.nvars
    }

    pub fn order(&self) -> usize {
        self.table.order
    }

    /// Value at the base point (the degree-0 coefficient).
    pub fn value(&self) -> Complex64 {
        self.c[0]
    }

    /// Taylor coefficient for the multi-index `mu` (zero-padded to the
    /// variable count); indices beyond the truncation order return 0.
    pub fn coeff(&self, mu: &[usize]) -> Complex64 {
        assert!(mu.len() <= self.table.nvars);
        let mut m: Multi = [0; MAX_VARS];
        for (v, &d) in mu.iter().enumerate() {
            m[v] = d as u8;
        }
        match self.table.rank.get(&m) {
            Some(&r) => self.c[r],
            None => Complex64::new(0.0, 0.0),
        }
    }

    /// Set the Taylor coefficient for `mu`.
    pub fn set_coeff(&mut self, mu: &[usize], z: Complex64) {
        let mut m: Multi = [0; MAX_VARS];
        for (v, &d) in mu.iter().enumerate() {
            m[v] = d as u8;
        }
        let r = *self
            .table
            .rank
            .get(&m)
            .unwrap_or_else(|| panic!("multi-index {mu:?} exceeds jet order {}", self.table.order));
        self.c[r] = z;
    }

    /// Truncate to a lower order (identity if `order >= self.order()`).
    pub fn truncate(&self, order: usize) -> Jet {
        if order >= self.table.order {
            return self.clone();
        }
        let mut out = Jet::zero(self.table.nvars, order);
        for (r, m) in out.table.monos.clone().iter().enumerate() {
            out.c[r] = self.c[self.table.rank[m]];
        }
        out
    }

    fn align(&self, other: &Jet) -> (Jet, Jet) {
        assert_eq!(self.table.nvars, other.table.nvars, "jet variable count mismatch");
        let ord = self.table.order.min(other.table.order);
        (self.truncate(ord), other.truncate(ord))
    }

    pub fn add(&self, other: &Jet) -> Jet {
        let (mut a, b) = self.align(other);
        for (x, y) in a.c.iter_mut().zip(b.c.iter()) {
            *x += y;
        }
        a
    }

    pub fn sub(&self, other: &Jet) -> Jet {
        let (mut a, b) = self.align(other);
        for (x, y) in a.c.iter_mut().zip(b.c.iter()) {
            *x -= y;
        }
        a
    }

    pub fn neg(&self) -> Jet {
        let mut a = self.clone();
        for x in a.c.iter_mut() {
            *x = -*x;
        }
        a
    }

    pub fn scale(&self, z: Complex64) -> Jet {
        let mut a = self.clone();
        for x in a.c.iter_mut() {
            *x *= z;
        }
        a
    }

    /// Truncated product (Cauchy convolution up to the common order).
    pub fn mul(&self, other: &Jet) -> Jet {
        let (a, b) = self.align(other);
        let table = a.table.clone();
        let len = table.monos.len();
        let mut out = Jet::zero(table.nvars, table.order);
        for i in 0..len {
            let ai = a.c[i];
            if ai.norm_sqr() == 0.0 {
                continue;
            }
            let row = &table.prod[i * len..(i + 1) * len];
            for j in 0..len {
                let r = row[j];
                if r != u32::MAX {
                    out.c[r as usize] += ai * b.c[j];
                }
            }
        }
        out
    }

    /// Partial derivative with respect to coordinate `var`; lowers the order
    /// by one.
    pub fn derivative(&self, var: usize) -> Jet {
        assert!(var < self.table.nvars, "derivative variable out of range");
        assert!(self.table.order >= 1, "cannot differentiate an order-0 jet");
        let mut out = Jet::zero(self.table.nvars, self.table.order - 1);
        for (r, m) in out.table.monos.clone().iter().enumerate() {
            let mut up = *m;
            up[var] += 1;
            let src = self.table.rank[&up];
            out.c[r] = self.c[src] * (up[var] as f64);
        }
        out
    }

    /// The nilpotent part `self - value()` (zero constant term).
    fn nilpotent(&self) -> Jet {
        let mut a = self.clone();
        a.c[0] = Complex64::new(0.0, 0.0);
        a
    }

    /// Compose a power series `sum_j coeffs[j] u^j` with the nilpotent part
    /// `u` of this jet. `coeffs` must cover degrees `0..=order`.
    fn series(&self, coeffs: impl Fn(usize) -> Complex64) -> Jet {
        let u = self.nilpotent();
        let mut acc = Jet::constant(self.table.nvars, self.table.order, coeffs(0));
        let mut upow = Jet::constant_re(self.table.nvars, self.table.order, 1.0);
        for j in 1..=self.table.order {
            upow = upow.mul(&u);
            acc = acc.add(&upow.scale(coeffs(j)));
        }
        acc
    }

    /// Multiplicative inverse `1/f`; requires a nonzero value at the base
    /// point.
    pub fn inverse(&self) -> Jet {
        let a = self.value();
        assert!(a.norm() > 0.0, "jet inverse requires nonzero value at base point");
        // 1/(a + u) = (1/a) sum_j (-u/a)^j
        let inv_a = Complex64::new(1.0, 0.0) / a;
        let mut pw = Complex64::new(1.0, 0.0);
        let coeffs: Vec<Complex64> = (0..=self.table.order)
            .map(|_| {
                let c = pw;
                pw *= -inv_a;
                c * inv_a
            })
            .collect();
        self.series(|j| coeffs[j])
    }

    /// Principal square root; requires a value off the branch cut
    /// (we only use it for values with positive real part).
    pub fn sqrt(&self) -> Jet {
        let a = self.value();
        assert!(a.norm() > 0.0, "jet sqrt requires nonzero value at base point");
        let root = a.sqrt();
        // sqrt(a + u) = sqrt(a) sum_j binom(1/2, j) (u/a)^j
        let mut coeffs = Vec::with_capacity(self.table.order + 1);
        let mut binom = Complex64::new(1.0, 0.0);
        let mut apow = Complex64::new(1.0, 0.0);
        for j in 0..=self.table.order {
            coeffs.push(root * binom * apow);
            let jf = j as f64;
            binom *= Complex64::new(0.5 - jf, 0.0) / Complex64::new(jf + 1.0, 0.0);
            apow /= a;
        }
        self.series(|j| coeffs[j])
    }

    /// Exponential `e^f`.
    pub fn exp(&self) -> Jet {
        let scale = self.value().exp();
        let mut fact = 1.0;
        let coeffs: Vec<Complex64> = (0..=self.table.order)
            .map(|j| {
                if j > 0 {
                    fact *= j as f64;
                }
                scale / fact
            })
            .collect();
        self.series(|j| coeffs[j])
    }

    /// Sine of the jet.
    pub fn sin(&self) -> Jet {
        let (s0, c0) = (self.value().sin(), self.value().cos());
        self.nilpotent_sin_cos(s0, c0, true)
    }

    /// Cosine of the jet.
    pub fn cos(&self) -> Jet {
        let (s0, c0) = (self.value().sin(), self.value().cos());
        self.nilpotent_sin_cos(s0, c0, false)
    }

    fn nilpotent_sin_cos(&self, s0: Complex64, c0: Complex64, want_sin: bool) -> Jet {
        // sin(a+u) = sin a cos u + cos a sin u ; cos(a+u) = cos a cos u - sin a sin u
        let coeffs: Vec<Complex64> = {
            let mut v = Vec::with_capacity(self.table.order + 1); // series of cos u then sin u interleaved by parity
            let mut fact = 1.0;
            for j in 0..=self.table.order {
                if j > 0 {
                    fact *= j as f64;
                }
                // u^j coefficient of cos u (even j, sign (-1)^{j/2}) or sin u (odd j).
                let c = match j % 4 {
                    0 => Complex64::new(1.0 / fact, 0.0),
                    2 => Complex64::new(-1.0 / fact, 0.0),
                    _ => Complex64::new(0.0, 0.0),
                };
                let s = match j % 4 {
                    1 => Complex64::new(1.0 / fact, 0.0),
                    3 => Complex64::new(-1.0 / fact, 0.0),
                    _ => Complex64::new(0.0, 0.0),
                };
                v.push(if want_sin { s0 * c + c0 * s } else { c0 * c - s0 * s });
            }
            v
        };
        self.series(|j| coeffs[j])
    }

    /// Coefficient-wise complex conjugate (the jet of the conjugated
    /// function, since the coordinates are real).
    pub fn conj(&self) -> Jet {
        let mut a = self.clone();
        for x in a.c.iter_mut() {
            *x = x.conj();
        }
        a
    }

    /// Restrict to the slice `x_var = base`: drops every monomial with a
    /// positive exponent in `var` (the jet of `f` frozen at the base value of
    /// that coordinate).
    pub fn restrict(&self, var: usize) -> Jet {
        assert!(var < self.table.nvars);
        let mut a = self.clone();
        for (r, m) in self.table.monos.iter().enumerate() {
            if m[var] > 0 {
                a.c[r] = Complex64::new(0.0, 0.0);
            }
        }
        a
    }

    /// Evaluate the truncated Taylor polynomial at displacement `t` from the
    /// base point.
    pub fn eval(&self, t: &[f64]) -> Complex64 {
        assert_eq!(t.len(), self.table.nvars);
        let mut acc = Complex64::new(0.0, 0.0);
        for (r, m) in self.table.monos.iter().enumerate() {
            let mut term = self.c[r];
            if term.norm_sqr() == 0.0 {
                continue;
            }
            for v in 0..self.table.nvars {
                for _ in 0..m[v] {
                    term *= t[v];
                }
            }
            acc += term;
        }
        acc
    }

    /// Maximum coefficient magnitude.
    pub fn max_abs(&self) -> f64 {
        self.c.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Maximum coefficient difference against another jet (after aligning
    /// orders).
    pub fn max_abs_diff(&self, other: &Jet) -> f64 {
        self.sub(other).max_abs()
    }

    /// Iterate `(multi-index, coefficient)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (&[u8], Complex64)> + '_ {
        self.table
            .monos
            .iter()
            .zip(self.c.iter())
            .map(|(m, &z)| (&m[..self.table.nvars], z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn z(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_jet(rng: &mut ChaCha8Rng, nvars: usize, order: usize) -> Jet {
        let mut j = Jet::zero(nvars, order);
        for c in j.c.iter_mut() {
            *c = z(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        j
    }

    #[test]
    fn product_matches_hand_expansion() {
        // (1 + 2x + 3y)(4 + 5x) = 4 + 13x + 12y + 10x^2 + 15xy
        let x = Jet::coordinate(2, 2, 0);
        let y = Jet::coordinate(2, 2, 1);
        let f = Jet::constant_re(2, 2, 1.0).add(&x.scale(z(2.0, 0.0))).add(&y.scale(z(3.0, 0.0)));
        let g = Jet::constant_re(2, 2, 4.0).add(&x.scale(z(5.0, 0.0)));
        let p = f.mul(&g);
        assert_eq!(p.coeff(&[0, 0]), z(4.0, 0.0));
        assert_eq!(p.coeff(&[1, 0]), z(13.0, 0.0));
        assert_eq!(p.coeff(&[0, 1]), z(12.0, 0.0));
        assert_eq!(p.coeff(&[2, 0]), z(10.0, 0.0));
        assert_eq!(p.coeff(&[1, 1]), z(15.0, 0.0));
        assert_eq!(p.coeff(&[0, 2]), z(0.0, 0.0));
    }

    #[test]
    fn product_is_commutative_and_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_jet(&mut rng, 3, 4);
            let b = random_jet(&mut rng, 3, 4);
            let c = random_jet(&mut rng, 3, 4);
            assert!(a.mul(&b).max_abs_diff(&b.mul(&a)) < 1e-14);
            assert!(a.mul(&b).mul(&c).max_abs_diff(&a.mul(&b.mul(&c))) < 1e-12);
        }
    }

    #[test]
    fn derivative_of_product_is_leibniz() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let a = random_jet(&mut rng, 2, 5);
            let b = random_jet(&mut rng, 2, 5);
            for var in 0..2 {
                let lhs = a.mul(&b).derivative(var);
                let rhs = a.derivative(var).mul(&b).add(&a.mul(&b.derivative(var)));
                assert!(lhs.max_abs_diff(&rhs) < 1e-12);
                assert_eq!(lhs.order(), 4);
            }
        }
    }

    #[test]
    fn exp_of_coordinate_has_factorial_coefficients() {
        let x = Jet::coordinate(1, 6, 0);
        let e = x.exp();
        let mut fact = 1.0;
        for jdeg in 0..=6usize {
            if jdeg > 0 {
                fact *= jdeg as f64;
            }
            assert!((e.coeff(&[jdeg]) - z(1.0 / fact, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn geometric_series_inverse() {
        // 1/(1 - x - y): coefficient of x^a y^b is binom(a+b, a).
        let one = Jet::constant_re(2, 5, 1.0);
        let f = one.sub(&Jet::coordinate(2, 5, 0)).sub(&Jet::coordinate(2, 5, 1));
        let g = f.inverse();
        let binom = |nn: usize, kk: usize| -> f64 {
            let mut r = 1.0;
            for i in 0..kk {
                r = r * (nn - i) as f64 / (i + 1) as f64;
            }
            r
        };
        for a in 0..=5usize {
            for b in 0..=(5 - a) {
                assert!((g.coeff(&[a, b]) - z(binom(a + b, a), 0.0)).norm() < 1e-12);
            }
        }
        // And f * (1/f) = 1 on the truncation.
        assert!(f.mul(&g).max_abs_diff(&one) < 1e-12);
    }

    #[test]
    fn sqrt_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let mut a = random_jet(&mut rng, 3, 4);
            // Keep the value well away from the branch cut.
            a.c[0] = z(rng.gen_range(0.5..2.0), rng.gen_range(-0.2..0.2));
            let r = a.sqrt();
            assert!(r.mul(&r).max_abs_diff(&a) < 1e-12);
        }
    }

    #[test]
    fn sqrt_of_shifted_constant_matches_binomial_series() {
        // sqrt(4 + x) = 2 (1 + x/4)^{1/2} = 2 + x/4 - x^2/64 + x^3/512 - ...
        let f = Jet::constant_re(1, 3, 4.0).add(&Jet::coordinate(1, 3, 0));
        let r = f.sqrt();
        assert!((r.coeff(&[0]) - z(2.0, 0.0)).norm() < 1e-15);
        assert!((r.coeff(&[1]) - z(0.25, 0.0)).norm() < 1e-15);
        assert!((r.coeff(&[2]) - z(-1.0 / 64.0, 0.0)).norm() < 1e-15);
        assert!((r.coeff(&[3]) - z(1.0 / 512.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn exp_mul_property_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = random_jet(&mut rng, 2, 5);
            let b = random_jet(&mut rng, 2, 5);
            // e^a e^b = e^{a+b} for scalar jets (commutative ring).
            assert!(a.exp().mul(&b.exp()).max_abs_diff(&a.add(&b).exp()) < 1e-10);
            // e^a e^{-a} = 1.
            let one = Jet::constant_re(2, 5, 1.0);
            assert!(a.exp().mul(&a.neg().exp()).max_abs_diff(&one) < 1e-12);
        }
    }

    #[test]
    fn sin_cos_pythagoras_and_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let a = random_jet(&mut rng, 2, 5);
            let s = a.sin();
            let c = a.cos();
            let one = Jet::constant_re(2, 5, 1.0);
            assert!(s.mul(&s).add(&c.mul(&c)).max_abs_diff(&one) < 1e-10);
            // d/dx sin(a) = cos(a) da/dx, truncated.
            for var in 0..2 {
                let lhs = s.derivative(var);
                let rhs = c.truncate(4).mul(&a.derivative(var));
                assert!(lhs.max_abs_diff(&rhs) < 1e-10);
            }
        }
    }

    #[test]
    fn eval_matches_function_within_truncation_error() {
        // f = exp(x + 2y) at displacement (0.05, 0.01), truncated at order 6:
        // remainder is bounded by u^7 e^u / 7! = 1.8e-12 with u = 0.07.
        let xy = Jet::coordinate(2, 6, 0).add(&Jet::coordinate(2, 6, 1).scale(z(2.0, 0.0)));
        let f = xy.exp();
        let got = f.eval(&[0.05, 0.01]);
        let expect = (0.05f64 + 2.0 * 0.01).exp();
        assert!((got - z(expect, 0.0)).norm() < 2e-12);
    }

    #[test]
    fn derivative_tracks_known_function() {
        // f = sin(x) cos(y); df/dx = cos(x) cos(y) evaluated as jets.
        let x = Jet::coordinate(2, 5, 0);
        let y = Jet::coordinate(2, 5, 1);
        let f = x.sin().mul(&y.cos());
        let fx = f.derivative(0);
        let expect = x.cos().truncate(4).mul(&y.cos().truncate(4));
        assert!(fx.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn truncation_bookkeeping() {
        let a = Jet::coordinate(3, 4, 2);
        assert_eq!(a.order(), 4);
        assert_eq!(a.derivative(2).order(), 3);
        let b = Jet::zero(3, 2);
        assert_eq!(a.add(&b).order(), 2);
        assert_eq!(a.mul(&b).order(), 2);
    }
}
