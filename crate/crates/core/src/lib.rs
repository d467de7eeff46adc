//! Dirichlet-to-Neumann (DN) maps for twisted Dirac Laplacians on slab
//! domains, and the boundary-determination machinery built around them.
//!
//! The library has three layers:
//!
//! 1. **Geometry and operators** — Clifford representations ([`clifford`]),
//!    metrics in boundary-normal coordinates with exact analytic jets
//!    ([`geometry`]), spin/twisted connections ([`spin`]), and
//!    finite-difference Dirac operators on slab grids ([`dirac_fd`]).
//! 2. **DN maps, two ways** — numerically, by solving the Dirichlet problem
//!    for `D_A^2 + Z - m^2` and taking covariant normal derivatives
//!    ([`dn_numeric`]); and symbolically, by the exact first-order-factor
//!    symbol recursion over truncated jets ([`symbol_engine`]).
//! 3. **Inversion and gauge theory** — recovery of boundary Taylor data of
//!    `(g, A, Z)` from DN symbols ([`recovery`]), and gauge actions, normal
//!    gauge fixing, Yang-Mills-Dirac residuals and gauge-equivalence testing
//!    ([`gauge`]).
//!
//! [`jet`] provides the truncated multivariate Taylor arithmetic that makes
//! the symbol recursion exact, and [`linalg`] small dense-matrix helpers.

pub mod clifford;
pub mod config;
pub mod dirac_fd;
pub mod dn_numeric;
pub mod gauge;
pub mod geometry;
pub mod jet;
pub mod jetmat;
pub mod linalg;
pub mod recovery;
pub mod spin;
pub mod symbol_engine;
