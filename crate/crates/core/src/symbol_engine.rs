//! Exact forward symbol calculus for the Dirichlet-to-Neumann factorization.
//!
//! The second-order operator splits, in boundary-normal coordinates, as
//!
//! ```text
//!     D_n^2 + i (E - 2 theta_n) D_n + Q_2 + Q_1 + Q_0 ,        D_n = -i d_n,
//! ```
//!
//! and factors through a first-order tangential family `B`:
//!
//! ```text
//!     (D_n + i(E - theta_n) - iB)(D_n - i theta_n + iB) + smoothing .
//! ```
//!
//! Matching total symbols gives the single equation the whole module is
//! built around:
//!
//! ```text
//!     d_n b + [theta_n, b] + i sum_a (d_{xi_a} b)(d_{x^a} theta_n) - E b
//!         + sum_nu (1/nu!) (d_xi^nu b)(D_x'^nu b)  =  q_2 + q_1 + q_0' ,
//! ```
//!
//! whose graded parts determine `b = b_1 + b_0 + b_{-1} + ...` recursively:
//! `b_1 = -|xi'|_g` and each step divides by `2 b_1`.
//!
//! Symbols are represented exactly: a degree-`d` homogeneous symbol is a
//! finite sum of terms `M(x) xi^mu |xi'|_g^{-p}` with `|mu| - p = d`, where
//! each `M` is a matrix of truncated jets at a fixed boundary base point.
//! The generator `|xi'|_g` satisfies `|xi'|^2 = g^{ab} xi_a xi_b`, and every
//! symbol is kept in the canonical form with pivot exponent `mu_1 <= 1`, so
//! that equalities like `b_1^2 = q_2` hold coefficient-by-coefficient, not
//! just at sampled covectors. Derivatives follow the closed rules
//!
//! ```text
//!     d_{xi_a} |xi|^{-p} = -p g^{ab} xi_b |xi|^{-p-2} ,
//!     d_x     |xi|       = (d_x g^{ab}) xi_a xi_b / (2 |xi|) ,
//! ```
//!
//! so the representation is closed under everything the recursion needs and
//! no numerical differentiation occurs anywhere.

use crate::clifford::GammaRep;
use crate::dirac_fd::{ConnectionField, EndoField};
use crate::geometry::{
    e_term_jet, parallel_frame_from_jets, parallel_frame_jets, scalar_curvature_jet, FrameJets,
    MetricJets,
};
use crate::geometry::MetricField;
use crate::jet::Jet;
use crate::jetmat::JetMat;
use num_complex::Complex64;
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SymbolError {
    #[error("recursion depth {depth} needs jet order >= {need}, inputs have {have}")]
    InsufficientOrder { depth: usize, need: usize, have: usize },
    #[error("symbols cannot be evaluated at the zero covector")]
    ZeroCovector,
    #[error("component dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Shared coefficient-ring data: dimensions and the tangential inverse-metric
/// jets that the derivative and reduction rules consume.
#[derive(Debug, Clone)]
pub struct SymbolContext {
    /// Chart dimension; tangential covectors have `n - 1` components.
    pub n: usize,
    /// Matrix size `k N` of symbol coefficients.
    pub comp: usize,
    /// Jet truncation order of the input data.
    pub order: usize,
    /// Tangential inverse metric `g^{ab}` as jets in all `n` coordinates.
    pub ginv: Vec<Vec<Jet>>,
    /// Cached `1 / g^{11}` for the canonical reduction.
    inv_g00: Jet,
}

impl SymbolContext {
    pub fn new(n: usize, comp: usize, order: usize, ginv: Vec<Vec<Jet>>) -> Self {
        let inv_g00 = ginv[0][0].inverse();
        SymbolContext { n, comp, order, ginv, inv_g00 }
    }

    pub fn nt(&self) -> usize {
        self.n - 1
    }

    /// `|xi'|_g^2` as a scalar jet at a concrete covector.
    pub fn norm_sq_jet(&self, xi: &[f64]) -> Jet {
        let nt = self.nt();
        assert_eq!(xi.len(), nt);
        let mut acc = Jet::zero(self.n, self.order);
        for a in 0..nt {
            for b in 0..nt {
                let w = xi[a] * xi[b];
                if w != 0.0 {
                    acc = acc.add(&self.ginv[a][b].scale(Complex64::from(w)));
                }
            }
        }
        acc
    }
}

fn mu_add(mu: &[u8], a: usize, b: usize) -> Vec<u8> {
    let mut out = mu.to_vec();
    out[a] += 1;
    out[b] += 1;
    out
}

fn mu_inc(mu: &[u8], a: usize) -> Vec<u8> {
    let mut out = mu.to_vec();
    out[a] += 1;
    out
}

fn mu_total(mu: &[u8]) -> i32 {
    mu.iter().map(|&d| d as i32).sum()
}

/// One homogeneous symbol of integer degree `deg`: a sum of terms
/// `M_mu(x) xi^mu |xi'|_g^{-(|mu| - deg)}` over tangential monomials `mu`.
#[derive(Debug, Clone)]
pub struct HomogeneousSymbol {
    pub deg: i32,
    pub comp: usize,
    nt: usize,
    terms: BTreeMap<Vec<u8>, JetMat>,
}

impl HomogeneousSymbol {
    pub fn zero(deg: i32, comp: usize, nt: usize) -> Self {
        HomogeneousSymbol { deg, comp, nt, terms: BTreeMap::new() }
    }

    /// The symbol `Id * |xi'|_g^k`, of degree `k`.
    pub fn l_power(ctx: &SymbolContext, k: i32) -> Self {
        let mut s = HomogeneousSymbol::zero(k, ctx.comp, ctx.nt());
        s.accumulate(vec![0; ctx.nt()], JetMat::identity(ctx.comp, ctx.n, ctx.order));
        s
    }

    /// Wrap an `x`-dependent matrix jet as a degree-0 symbol (no covector
    /// dependence).
    pub fn from_matrix(ctx: &SymbolContext, m: &JetMat) -> Self {
        let mut s = HomogeneousSymbol::zero(0, m.rows(), ctx.nt());
        s.accumulate(vec![0; ctx.nt()], m.clone());
        s
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Largest coefficient magnitude over all terms and jet coefficients.
    pub fn max_abs(&self) -> f64 {
        self.terms.values().map(|m| m.max_abs()).fold(0.0, f64::max)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Vec<u8>, &JetMat)> {
        self.terms.iter()
    }

    /// Coefficient matrix of the monomial `mu` (zero if absent).
    pub fn coeff(&self, ctx: &SymbolContext, mu: &[u8]) -> JetMat {
        self.terms
            .get(mu)
            .cloned()
            .unwrap_or_else(|| JetMat::zero(self.comp, self.comp, ctx.n, ctx.order))
    }

    fn accumulate(&mut self, mu: Vec<u8>, m: JetMat) {
        if m.max_abs() == 0.0 {
            return;
        }
        match self.terms.remove(&mu) {
            None => {
                self.terms.insert(mu, m);
            }
            Some(prev) => {
                let sum = prev.add(&m);
                if sum.max_abs() != 0.0 {
                    self.terms.insert(mu, sum);
                }
            }
        }
    }

    pub fn add(&self, other: &HomogeneousSymbol) -> HomogeneousSymbol {
        assert_eq!(self.deg, other.deg, "cannot add symbols of different degree");
        let mut out = self.clone();
        for (mu, m) in &other.terms {
            out.accumulate(mu.clone(), m.clone());
        }
        out
    }

    pub fn neg(&self) -> HomogeneousSymbol {
        self.map(|m| m.neg())
    }

    pub fn sub(&self, other: &HomogeneousSymbol) -> HomogeneousSymbol {
        self.add(&other.neg())
    }

    pub fn scale(&self, z: Complex64) -> HomogeneousSymbol {
        self.map(|m| m.scale(z))
    }

    pub fn scale_jet(&self, s: &Jet) -> HomogeneousSymbol {
        self.map(|m| m.scale_jet(s))
    }

    fn map(&self, f: impl Fn(&JetMat) -> JetMat) -> HomogeneousSymbol {
        let mut out = HomogeneousSymbol::zero(self.deg, self.comp, self.nt);
        for (mu, m) in &self.terms {
            out.accumulate(mu.clone(), f(m));
        }
        out
    }

    /// Multiply by `|xi'|_g^k`: with the power of the generator implied by
    /// `|mu| - deg`, this is a pure degree relabel.
    pub fn l_mul(&self, k: i32) -> HomogeneousSymbol {
        let mut out = self.clone();
        out.deg += k;
        out
    }

    /// Symbol product (degrees add); coefficient matrices multiply in the
    /// given order. The result is canonically reduced.
    pub fn mul(&self, ctx: &SymbolContext, other: &HomogeneousSymbol) -> HomogeneousSymbol {
        let mut out = HomogeneousSymbol::zero(self.deg + other.deg, self.comp, self.nt);
        for (mu1, m1) in &self.terms {
            for (mu2, m2) in &other.terms {
                let mut mu = mu1.clone();
                for (d, e) in mu.iter_mut().zip(mu2.iter()) {
                    *d += e;
                }
                out.accumulate(mu, m1.matmul(m2));
            }
        }
        out.reduce(ctx);
        out
    }

    /// Chart derivative `d_{x^dir}` (any direction, the normal included):
    /// degree is preserved, jet order drops by one, and the `x`-dependence of
    /// the generator contributes `-(p/2)(d_x g^{ab}) xi_a xi_b |xi|^{-p-2}`
    /// per term.
    pub fn dx(&self, ctx: &SymbolContext, dir: usize) -> HomogeneousSymbol {
        let mut out = HomogeneousSymbol::zero(self.deg, self.comp, self.nt);
        for (mu, m) in &self.terms {
            out.accumulate(mu.clone(), m.derivative(dir));
            let p = mu_total(mu) - self.deg;
            if p != 0 {
                for a in 0..self.nt {
                    for b in a..self.nt {
                        let mult = if a == b { 1.0 } else { 2.0 };
                        let dg = ctx.ginv[a][b].derivative(dir);
                        if dg.max_abs() == 0.0 {
                            continue;
                        }
                        let factor = Complex64::from(-(p as f64) / 2.0 * mult);
                        out.accumulate(mu_add(mu, a, b), m.scale_jet(&dg).scale(factor));
                    }
                }
            }
        }
        out.reduce(ctx);
        out
    }

    /// Covector derivative `d_{xi_a}`: lowers the degree by one.
    pub fn dxi(&self, ctx: &SymbolContext, a: usize) -> HomogeneousSymbol {
        let mut out = HomogeneousSymbol::zero(self.deg - 1, self.comp, self.nt);
        for (mu, m) in &self.terms {
            if mu[a] > 0 {
                let mut lower = mu.clone();
                lower[a] -= 1;
                out.accumulate(lower, m.scale(Complex64::from(mu[a] as f64)));
            }
            let p = mu_total(mu) - self.deg;
            if p != 0 {
                for b in 0..self.nt {
                    let g = &ctx.ginv[a][b];
                    if g.max_abs() == 0.0 {
                        continue;
                    }
                    let factor = Complex64::from(-(p as f64));
                    out.accumulate(mu_inc(mu, b), m.scale_jet(g).scale(factor));
                }
            }
        }
        out.reduce(ctx);
        out
    }

    /// Canonical reduction: repeatedly rewrite `xi_1^2` through
    /// `|xi|^2 = g^{ab} xi_a xi_b` until every monomial has pivot exponent
    /// `<= 1`. Representations become unique, so symbol equalities can be
    /// checked coefficient-by-coefficient.
    pub fn reduce(&mut self, ctx: &SymbolContext) {
        loop {
            let key = match self.terms.keys().find(|mu| mu[0] >= 2) {
                Some(k) => k.clone(),
                None => break,
            };
            let m = self.terms.remove(&key).expect("key just found");
            let mut base = key.clone();
            base[0] -= 2;
            let scaled = m.scale_jet(&ctx.inv_g00);
            // xi_1^2 = (|xi|^2 - sum_{(a,b) != (1,1)} g^{ab} xi_a xi_b) / g^{11}
            self.accumulate(base.clone(), scaled.clone());
            for a in 0..self.nt {
                for b in a..self.nt {
                    if a == 0 && b == 0 {
                        continue;
                    }
                    let mult = if a == b { 1.0 } else { 2.0 };
                    let g = &ctx.ginv[a][b];
                    if g.max_abs() == 0.0 {
                        continue;
                    }
                    self.accumulate(
                        mu_add(&base, a, b),
                        scaled.scale_jet(g).scale(Complex64::from(-mult)),
                    );
                }
            }
        }
    }

    /// Evaluate at a concrete covector: sum the terms into a matrix jet,
    /// with `|xi'|_g` the exact scalar jet `sqrt(g^{ab}(x) xi_a xi_b)`.
    pub fn eval(&self, ctx: &SymbolContext, xi: &[f64]) -> Result<JetMat, SymbolError> {
        if xi.iter().all(|&v| v == 0.0) {
            return Err(SymbolError::ZeroCovector);
        }
        let l = self.and_eval_norm(ctx, xi)?;
        Ok(l)
    }

    fn and_eval_norm(&self, ctx: &SymbolContext, xi: &[f64]) -> Result<JetMat, SymbolError> {
        let nsq = ctx.norm_sq_jet(xi);
        let l = nsq.sqrt();
        let linv = l.inverse();
        let mut pow_cache: BTreeMap<i32, Jet> = BTreeMap::new();
        let mut out = JetMat::zero(self.comp, self.comp, ctx.n, ctx.order);
        for (mu, m) in &self.terms {
            let mut w = 1.0f64;
            for (a, &e) in mu.iter().enumerate() {
                for _ in 0..e {
                    w *= xi[a];
                }
            }
            if w == 0.0 {
                continue;
            }
            let p = mu_total(mu) - self.deg;
            let lp = pow_cache.entry(p).or_insert_with(|| jet_int_power(&l, &linv, -p));
            out = out.add(&m.scale_jet(lp).scale(Complex64::from(w)));
        }
        Ok(out)
    }

    /// Value of the evaluated symbol at the base point.
    pub fn value(&self, ctx: &SymbolContext, xi: &[f64]) -> Result<crate::linalg::CMat, SymbolError> {
        Ok(self.eval(ctx, xi)?.value())
    }

    /// Largest coefficient difference against another symbol of the same
    /// degree (both canonically reduced).
    pub fn max_abs_diff(&self, other: &HomogeneousSymbol) -> f64 {
        self.sub(other).max_abs()
    }
}

/// `l^k` for signed `k`, given `l` and its inverse.
fn jet_int_power(l: &Jet, linv: &Jet, k: i32) -> Jet {
    let base = if k >= 0 { l } else { linv };
    let mut acc = Jet::constant_re(l.nvars(), l.order(), 1.0);
    for _ in 0..k.unsigned_abs() {
        acc = acc.mul(base);
    }
    acc
}

/// A graded sum of homogeneous symbols, keyed by degree.
#[derive(Debug, Clone)]
pub struct SymbolSum {
    pub comp: usize,
    nt: usize,
    parts: BTreeMap<i32, HomogeneousSymbol>,
}

impl SymbolSum {
    pub fn new(comp: usize, nt: usize) -> Self {
        SymbolSum { comp, nt, parts: BTreeMap::new() }
    }

    pub fn from_parts(parts: Vec<HomogeneousSymbol>) -> Self {
        let comp = parts.first().map(|p| p.comp).unwrap_or(1);
        let nt = parts.first().map(|p| p.nt).unwrap_or(1);
        let mut s = SymbolSum::new(comp, nt);
        for p in parts {
            s.add_part(p);
        }
        s
    }

    pub fn add_part(&mut self, h: HomogeneousSymbol) {
        if h.is_empty() {
            return;
        }
        match self.parts.remove(&h.deg) {
            None => {
                self.parts.insert(h.deg, h);
            }
            Some(prev) => {
                let sum = prev.add(&h);
                if !sum.is_empty() {
                    self.parts.insert(sum.deg, sum);
                }
            }
        }
    }

    pub fn part(&self, deg: i32) -> Option<&HomogeneousSymbol> {
        self.parts.get(&deg)
    }

    /// Degrees present, descending.
    pub fn degrees(&self) -> Vec<i32> {
        self.parts.keys().rev().copied().collect()
    }

    pub fn add(&self, other: &SymbolSum) -> SymbolSum {
        let mut out = self.clone();
        for h in other.parts.values() {
            out.add_part(h.clone());
        }
        out
    }

    pub fn neg(&self) -> SymbolSum {
        let mut out = SymbolSum::new(self.comp, self.nt);
        for h in self.parts.values() {
            out.add_part(h.neg());
        }
        out
    }

    pub fn sub(&self, other: &SymbolSum) -> SymbolSum {
        self.add(&other.neg())
    }

    /// Drop parts below `floor`.
    pub fn truncate_below(&self, floor: i32) -> SymbolSum {
        let mut out = SymbolSum::new(self.comp, self.nt);
        for (&d, h) in &self.parts {
            if d >= floor {
                out.add_part(h.clone());
            }
        }
        out
    }

    fn map(&self, f: impl Fn(&HomogeneousSymbol) -> HomogeneousSymbol) -> SymbolSum {
        let mut out = SymbolSum::new(self.comp, self.nt);
        for h in self.parts.values() {
            out.add_part(f(h));
        }
        out
    }
}

/// Asymptotic symbol composition
/// `(p # q)(x, xi) ~ sum_nu (1/nu!) (d_xi^nu p)(D_x^nu q)`, truncated to
/// degrees `>= floor` (tangential `nu` only, `D_x = -i d_x`).
pub fn symbol_compose(
    ctx: &SymbolContext,
    p: &SymbolSum,
    q: &SymbolSum,
    floor: i32,
) -> SymbolSum {
    let mut out = SymbolSum::new(p.comp, ctx.nt());
    for pj in p.parts.values() {
        for qk in q.parts.values() {
            let max_len = pj.deg + qk.deg - floor;
            if max_len < 0 {
                continue;
            }
            compose_pair(ctx, pj, qk, max_len as usize, &mut out);
        }
    }
    out
}

/// Accumulate all `nu` contributions of one `(p_j, q_k)` pair, sharing
/// iterated-derivative prefixes across the recursion over directions.
fn compose_pair(
    ctx: &SymbolContext,
    p: &HomogeneousSymbol,
    q: &HomogeneousSymbol,
    max_len: usize,
    out: &mut SymbolSum,
) {
    // nu = 0 term.
    out.add_part(p.mul(ctx, q));
    rec_nu(ctx, p, q, 0, max_len, Complex64::from(1.0), out);
}

/// Accumulate the `nu != 0` terms `(1/nu!) (d_xi^nu p)(D_x^nu q)` with
/// `D_x = -i d_x`, recursing over directions so iterated derivatives are
/// shared between multi-indices with a common prefix. `weight` carries the
/// `(-i)^{|nu|} / nu!` factor accumulated over earlier directions.
fn rec_nu(
    ctx: &SymbolContext,
    dp: &HomogeneousSymbol,
    dq: &HomogeneousSymbol,
    from_dir: usize,
    budget: usize,
    weight: Complex64,
    out: &mut SymbolSum,
) {
    if budget == 0 {
        return;
    }
    let minus_i = Complex64::new(0.0, -1.0);
    for a in from_dir..ctx.nt() {
        let mut dpa = dp.clone();
        let mut dqa = dq.clone();
        let mut w = weight;
        for ra in 1..=budget {
            dpa = dpa.dxi(ctx, a);
            dqa = dqa.dx(ctx, a);
            w = w * minus_i / Complex64::from(ra as f64);
            if dpa.is_empty() || dqa.is_empty() {
                break;
            }
            out.add_part(dpa.mul(ctx, &dqa).scale(w));
            rec_nu(ctx, &dpa, &dqa, a + 1, budget - ra, w, out);
        }
    }
}

/// All jet inputs the recursion needs, at one boundary base point.
#[derive(Debug, Clone)]
pub struct SymbolInputs {
    pub ctx: SymbolContext,
    pub rep: GammaRep,
    pub nc: usize,
    /// Twisted connection `theta_i` per chart direction (normal last; kept
    /// symbolic so non-normal gauges are covered too).
    pub theta: Vec<JetMat>,
    /// `E = -1/2 g^{ab} d_n g_{ab}`.
    pub e_jet: Jet,
    /// Chart Christoffel jets `gamma[i] = (Gamma^i_{jk})_{jk}`.
    pub christoffel: Vec<JetMat>,
    /// Scalar curvature jet.
    pub r_jet: Jet,
    /// Curvature operator `1/2 sum_{i,j} gamma_i gamma_j (x) F_A(e_i, e_j)`.
    pub curv_op: JetMat,
    /// Potential `Z` jet (size `k N`).
    pub z_jet: JetMat,
    pub m: f64,
}

/// Chart-component curvature jets `F_ab = d_a A_b - d_b A_a + [A_a, A_b]`
/// for `a < b`.
pub fn curvature_jets(a_jets: &[JetMat]) -> Vec<Vec<JetMat>> {
    let n = a_jets.len();
    (0..n)
        .map(|a| {
            ((a + 1)..n)
                .map(|b| {
                    a_jets[b]
                        .derivative(a)
                        .sub(&a_jets[a].derivative(b))
                        .add(&a_jets[a].matmul(&a_jets[b]).sub(&a_jets[b].matmul(&a_jets[a])))
                })
                .collect()
        })
        .collect()
}

/// Curvature operator as a jet: frame indices raised through `E`, matching
/// the grid-sampled version in the finite-difference module.
pub fn curvature_operator_jet(frame_e: &JetMat, a_jets: &[JetMat], rep: &GammaRep) -> JetMat {
    let n = a_jets.len();
    let nc = a_jets[0].rows();
    let nv = a_jets[0].at(0, 0).nvars();
    let ord = a_jets[0].at(0, 0).order().saturating_sub(1);
    let f = curvature_jets(a_jets);
    let f_chart = |a: usize, b: usize| -> Option<&JetMat> {
        if a < b {
            Some(&f[a][b - a - 1])
        } else {
            None
        }
    };
    let mut out = JetMat::zero(rep.k * nc, rep.k * nc, nv, ord);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut f_frame = JetMat::zero(nc, nc, nv, ord);
            for a in 0..n {
                for b in 0..n {
                    let (fab, sign) = if a < b {
                        (f_chart(a, b), 1.0)
                    } else if b < a {
                        (f_chart(b, a), -1.0)
                    } else {
                        (None, 0.0)
                    };
                    if let Some(fab) = fab {
                        let w = frame_e.at(a, i).mul(frame_e.at(b, j)).scale(Complex64::from(sign));
                        if w.max_abs() != 0.0 {
                            f_frame = f_frame.add(&fab.map(|jet| jet.mul(&w)));
                        }
                    }
                }
            }
            let gg = &rep.gammas[i] * &rep.gammas[j];
            out = out.add(&JetMat::from_cmat(&gg, nv, ord).kronecker(&f_frame));
        }
    }
    out
}

impl SymbolInputs {
    /// Assemble inputs from an analytic family at the boundary point
    /// `(x_tan, 0)`. `jet_order` is the truncation order of the data jets;
    /// a recursion of depth `K` requires `jet_order >= K + 2`.
    pub fn from_family(
        metric: &MetricField,
        a_field: &ConnectionField,
        z_field: &EndoField,
        rep: &GammaRep,
        m: f64,
        x_tan: &[f64],
        jet_order: usize,
    ) -> Result<Self, SymbolError> {
        let n = metric.n;
        let mut x0 = x_tan.to_vec();
        x0.push(0.0);
        // Build metric data one order high so first-derived quantities
        // (Christoffel, frame transport, E) land at `jet_order`.
        let frame = parallel_frame_jets(metric, x_tan, jet_order + 1);
        let a_jets: Vec<JetMat> =
            (0..n).map(|d| a_field.jet(d, &x0, jet_order + 1)).collect();
        let z_jet = z_field.jet(&x0, jet_order);
        Self::from_frame(frame, a_jets, z_jet, rep.clone(), a_field.nc, m, jet_order)
    }

    /// Assemble inputs from raw jets: a metric jet block plus connection
    /// jets per chart direction. Used by the inversion side, which re-runs
    /// the engine on partially recovered (non-analytic) data.
    pub fn from_jets(
        mj: MetricJets,
        a_jets: Vec<JetMat>,
        z_jet: JetMat,
        rep: GammaRep,
        m: f64,
    ) -> Result<Self, SymbolError> {
        let jet_order = mj.order.saturating_sub(1);
        let nc = a_jets[0].rows();
        let frame = parallel_frame_from_jets(mj);
        Self::from_frame(frame, a_jets, z_jet, rep, nc, m, jet_order)
    }

    fn from_frame(
        frame: FrameJets,
        a_jets: Vec<JetMat>,
        z_jet: JetMat,
        rep: GammaRep,
        nc: usize,
        m: f64,
        jet_order: usize,
    ) -> Result<Self, SymbolError> {
        let n = frame.n;
        let comp = rep.k * nc;
        if z_jet.rows() != comp {
            return Err(SymbolError::DimensionMismatch(z_jet.rows(), comp));
        }
        let ginv: Vec<Vec<Jet>> = (0..n - 1)
            .map(|a| (0..n - 1).map(|b| frame.metric.ginv.at(a, b).clone()).collect())
            .collect();
        let ctx = SymbolContext::new(n, comp, jet_order, ginv);
        // Spin part from the frame, gauge part from the connection jets.
        let spin = crate::spin::spin_connection_jets(&frame, &rep);
        let idn = JetMat::identity(nc, n, jet_order);
        let idk = JetMat::identity(rep.k, n, jet_order);
        let theta: Vec<JetMat> = (0..n)
            .map(|d| spin[d].kronecker(&idn).add(&idk.kronecker(&a_jets[d])))
            .collect();
        let e_jet = e_term_jet(&frame.metric);
        let r_jet = scalar_curvature_jet(&frame.metric);
        let curv_op = curvature_operator_jet(&frame.e, &a_jets, &rep);
        Ok(SymbolInputs {
            ctx,
            rep,
            nc,
            theta,
            e_jet,
            christoffel: frame.gamma,
            r_jet,
            curv_op,
            z_jet,
            m,
        })
    }
}

/// The tangential symbols of the operator splitting:
/// `q_2 = g^{ab} xi_a xi_b`,
/// `q_1 = -2 g^{ab} theta_a (i xi_b) + g^{ab} Gamma^c_{ab} (i xi_c)`, and
/// `q_0' = -g^{ab} d_a theta_b - g^{ab} theta_a theta_b
///         + g^{ab} Gamma^c_{ab} theta_c + R/4 + curv + Z - m^2`
/// (every `theta_n`-dependent term of the raw zeroth-order part cancels
/// against the factorization counterterms, leaving only tangential data).
pub fn q_symbols(
    inputs: &SymbolInputs,
) -> (HomogeneousSymbol, HomogeneousSymbol, HomogeneousSymbol) {
    let ctx = &inputs.ctx;
    let nt = ctx.nt();
    let comp = ctx.comp;
    let ident = JetMat::identity(comp, ctx.n, ctx.order);

    let mut q2 = HomogeneousSymbol::zero(2, comp, nt);
    for a in 0..nt {
        for b in a..nt {
            let mult = if a == b { 1.0 } else { 2.0 };
            let g = &ctx.ginv[a][b];
            if g.max_abs() == 0.0 {
                continue;
            }
            q2.accumulate(
                mu_add(&vec![0u8; nt], a, b),
                ident.scale_jet(g).scale(Complex64::from(mult)),
            );
        }
    }
    q2.reduce(ctx);

    let i_unit = Complex64::new(0.0, 1.0);
    let mut q1 = HomogeneousSymbol::zero(1, comp, nt);
    for c in 0..nt {
        let mut coeff = JetMat::zero(comp, comp, ctx.n, ctx.order);
        for a in 0..nt {
            let g = &ctx.ginv[a][c];
            if g.max_abs() != 0.0 {
                coeff = coeff.add(&inputs.theta[a].scale_jet(g).scale(Complex64::from(-2.0)));
            }
        }
        let mut chris = Jet::zero(ctx.n, ctx.order);
        for a in 0..nt {
            for b in 0..nt {
                chris = chris.add(&ctx.ginv[a][b].mul(inputs.christoffel[c].at(a, b)));
            }
        }
        coeff = coeff.add(&ident.scale_jet(&chris));
        q1.accumulate(mu_inc(&vec![0u8; nt], c), coeff.scale(i_unit));
    }
    q1.reduce(ctx);

    let mut q0 = JetMat::zero(comp, comp, ctx.n, ctx.order);
    for a in 0..nt {
        for b in 0..nt {
            let g = &ctx.ginv[a][b];
            if g.max_abs() == 0.0 {
                continue;
            }
            q0 = q0.sub(&inputs.theta[b].derivative(a).scale_jet(g));
            q0 = q0.sub(&inputs.theta[a].matmul(&inputs.theta[b]).scale_jet(g));
            let mut chris_theta = JetMat::zero(comp, comp, ctx.n, ctx.order);
            for c in 0..nt {
                chris_theta =
                    chris_theta.add(&inputs.theta[c].scale_jet(inputs.christoffel[c].at(a, b)));
            }
            q0 = q0.add(&chris_theta.scale_jet(g));
        }
    }
    q0 = q0.add(&ident.scale_jet(&inputs.r_jet).scale(Complex64::from(0.25)));
    q0 = q0.add(&inputs.curv_op);
    q0 = q0.add(&inputs.z_jet);
    q0 = q0.add(&ident.scale(Complex64::from(-inputs.m * inputs.m)));
    let mut q0p = HomogeneousSymbol::zero(0, comp, nt);
    q0p.accumulate(vec![0u8; nt], q0);
    (q2, q1, q0p)
}

/// The principal symbol: `b_1 = -|xi'|_g * Id` (the negative branch of
/// `b_1^2 = q_2`).
pub fn b1(inputs: &SymbolInputs) -> HomogeneousSymbol {
    HomogeneousSymbol::l_power(&inputs.ctx, 1).neg()
}

/// Left-hand side of the symbol equation applied to a (partial) symbol sum,
/// graded and truncated to degrees `>= floor`:
/// `d_n b + [theta_n, b] + i sum_a (d_xi_a b)(d_x^a theta_n) - E b + b # b`.
fn full_lhs(inputs: &SymbolInputs, b: &SymbolSum, floor: i32) -> SymbolSum {
    let ctx = &inputs.ctx;
    let nrm = ctx.n - 1;
    let theta_n = HomogeneousSymbol::from_matrix(ctx, &inputs.theta[nrm]);
    let mut lhs = b.map(|h| h.dx(ctx, nrm));
    // Commutator with theta_n.
    lhs = lhs.add(&b.map(|h| theta_n.mul(ctx, h).sub(&h.mul(ctx, &theta_n))));
    // i sum_a (d_xi_a b)(d_{x^a} theta_n).
    for a in 0..ctx.nt() {
        let dtheta = inputs.theta[nrm].derivative(a);
        if dtheta.max_abs() == 0.0 {
            continue;
        }
        let dtheta_sym = HomogeneousSymbol::from_matrix(ctx, &dtheta);
        lhs = lhs.add(
            &b.map(|h| h.dxi(ctx, a).mul(ctx, &dtheta_sym).scale(Complex64::new(0.0, 1.0))),
        );
    }
    // -E b.
    lhs = lhs.add(&b.map(|h| h.scale_jet(&inputs.e_jet).neg()));
    // Quadratic composition term.
    lhs = lhs.add(&symbol_compose(ctx, b, b, floor));
    lhs.truncate_below(floor)
}

/// Solve the graded factorization recursion down to `b_{1-depth}`.
///
/// Step `m` (from `1` down to `2 - depth`) reads the degree-`m` part of the
/// symbol equation with the already-known partial sum substituted; the only
/// unknown enters as `2 b_1 b_{m-1}`, so dividing by `2 b_1 = -2 |xi'|_g`
/// yields the next term.
pub fn solve_recursion(inputs: &SymbolInputs, depth: usize) -> Result<SymbolSum, SymbolError> {
    if depth + 2 > inputs.ctx.order {
        return Err(SymbolError::InsufficientOrder {
            depth,
            need: depth + 2,
            have: inputs.ctx.order,
        });
    }
    let (q2, q1, q0p) = q_symbols(inputs);
    let _ = q2; // the degree-2 equation is solved in closed form by b_1
    let mut b = SymbolSum::new(inputs.ctx.comp, inputs.ctx.nt());
    b.add_part(b1(inputs));
    for step in 0..depth {
        let m = 1 - step as i32;
        let lhs = full_lhs(inputs, &b, m);
        let mut delta = match m {
            1 => q1.clone(),
            0 => q0p.clone(),
            _ => HomogeneousSymbol::zero(m, inputs.ctx.comp, inputs.ctx.nt()),
        };
        if let Some(known) = lhs.part(m) {
            delta = delta.sub(known);
        }
        // b_{m-1} = delta / (2 b_1) = delta * (-1/2) * |xi|^{-1}.
        let mut next = delta.scale(Complex64::from(-0.5)).l_mul(-1);
        next.reduce(&inputs.ctx);
        b.add_part(next);
    }
    Ok(b)
}

/// Graded residual of the symbol equation for a candidate sum: degrees
/// `2, 1, ..., 2 - depth` of `LHS(b) - (q_2 + q_1 + q_0')`. All listed
/// degrees vanish identically when `b` solves the recursion.
pub fn factorization_residual(inputs: &SymbolInputs, b: &SymbolSum, depth: usize) -> SymbolSum {
    let floor = 2 - depth as i32;
    let (q2, q1, q0p) = q_symbols(inputs);
    let q = SymbolSum::from_parts(vec![q2, q1, q0p]);
    full_lhs(inputs, b, floor).sub(&q).truncate_below(floor)
}

/// Largest value of a graded symbol over all parts, all jet coefficients,
/// at a concrete covector.
pub fn eval_max_abs(
    ctx: &SymbolContext,
    s: &SymbolSum,
    xi: &[f64],
) -> Result<f64, SymbolError> {
    let mut worst = 0.0f64;
    for d in s.degrees() {
        if let Some(h) = s.part(d) {
            worst = worst.max(h.eval(ctx, xi)?.max_abs());
        }
    }
    Ok(worst)
}

impl fmt::Display for HomogeneousSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "degree {} ({} terms)", self.deg, self.terms.len())?;
        for (mu, m) in &self.terms {
            let p = mu_total(mu) - self.deg;
            write!(f, "  xi^{:?} |xi|^{}:", mu, -p)?;
            writeln!(f)?;
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    let jet = m.at(i, j);
                    if jet.max_abs() == 0.0 {
                        continue;
                    }
                    write!(f, "    [{i},{j}]:")?;
                    for (mono, c) in jet.iter() {
                        if c.norm() != 0.0 {
                            write!(f, " x^{:?}({:+.12e}{:+.12e}i)", mono, c.re, c.im)?;
                        }
                    }
                    writeln!(f)?;
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for SymbolSum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in self.degrees() {
            if let Some(h) = self.part(d) {
                write!(f, "{h}")?;
            }
        }
        Ok(())
    }
}
