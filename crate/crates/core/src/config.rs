//! Experiment configuration for the command-line runner.
//!
//! A config is a flat TOML document with one section per concern: the
//! domain (`n`, bundle rank `N`, mass `m`), the slab grid, the metric /
//! connection / potential families, the symbol-recursion depth, solver
//! frequencies and tolerance, and the output directory. Families are
//! *named* and carry numeric parameters only — no expression parsing —
//! because the jet arithmetic requires closed-form families anyway.
//!
//! The same struct serializes back to TOML bit-exactly: floats are printed
//! in shortest round-trip form, so `parse(serialize(c)) == c` field for
//! field and a second serialization is byte-identical. This is what makes
//! the manifest + config pair a complete reproduction recipe.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dirac_fd::{
    ConnTerm, ConnectionField, EndoField, FieldError, GridError, SlabGrid,
};
use crate::geometry::{GeometryError, MetricField, TrigPoly, TrigTerm};
use crate::linalg::{random_skew_hermitian, CMat};

/// Subcommands understood by the runner, in `--help` order.
pub const SUBCOMMANDS: [&str; 12] = [
    "verify-clifford",
    "lichnerowicz",
    "dn-compute",
    "dn-oracle",
    "symbol-forward",
    "recover",
    "roundtrip",
    "gauge-invariance",
    "normal-gauge",
    "ymd-residual",
    "transport-equivalence",
    "ck-residual",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("unknown subcommand '{0}'")]
    UnknownSubcommand(String),
    #[error("unknown {kind} family '{name}'")]
    UnknownFamily { kind: &'static str, name: String },
    #[error("{kind} family '{name}' requires a nonempty '{field}' list")]
    MissingField { kind: &'static str, name: String, field: &'static str },
    #[error("matrix block must be {expect}x{expect}, got {rows}x{cols}")]
    MatrixShape { expect: usize, rows: usize, cols: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// One trigonometric term `amp * cos(wave . x + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTermSpec {
    pub amp: f64,
    pub wave: Vec<f64>,
    pub phase: f64,
}

impl TrigTermSpec {
    fn to_term(&self) -> TrigTerm {
        TrigTerm { amp: self.amp, wave: self.wave.clone(), phase: self.phase }
    }
}

fn to_poly(terms: &[TrigTermSpec]) -> TrigPoly {
    TrigPoly::new(terms.iter().map(TrigTermSpec::to_term).collect())
}

/// A complex matrix given by real and imaginary parts, row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl MatrixSpec {
    fn to_cmat(&self, expect: usize) -> Result<CMat, ConfigError> {
        let rows = self.re.len();
        let cols = self.re.first().map(Vec::len).unwrap_or(0);
        let ok = rows == expect
            && cols == expect
            && self.im.len() == rows
            && self.re.iter().chain(self.im.iter()).all(|r| r.len() == cols);
        if !ok {
            return Err(ConfigError::MatrixShape { expect, rows, cols });
        }
        Ok(CMat::from_fn(rows, cols, |i, j| Complex64::new(self.re[i][j], self.im[i][j])))
    }
}

/// One connection term: a constant generator times a trig profile, attached
/// to a chart direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnTermSpec {
    pub dir: usize,
    pub generator: MatrixSpec,
    pub profile: Vec<TrigTermSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Tangential point counts (periodic directions), one per tangential axis.
    pub tangential: Vec<usize>,
    /// Normal layer count (slab faces included).
    pub normal: usize,
    /// Slab thickness `T`.
    pub depth: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { tangential: vec![16], normal: 17, depth: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSpec {
    /// `flat` | `conformal` | `diagonal-perturb` | `sphere-patch`.
    pub family: String,
    /// Conformal exponent terms (family `conformal`).
    pub terms: Vec<TrigTermSpec>,
    /// Perturbation strength (family `diagonal-perturb`).
    pub eps: f64,
    /// Per-axis perturbation profiles (family `diagonal-perturb`).
    pub profiles: Vec<Vec<TrigTermSpec>>,
    /// Sphere radius and colatitude of the chart center (family `sphere-patch`).
    pub radius: f64,
    pub theta0: f64,
}

impl Default for MetricSpec {
    fn default() -> Self {
        MetricSpec {
            family: "flat".to_string(),
            terms: Vec::new(),
            eps: 0.0,
            profiles: Vec::new(),
            radius: 2.0,
            theta0: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnectionSpec {
    /// `zero` | `abelian` | `trig` | `random`.
    pub family: String,
    /// Direction of the single abelian term (family `abelian`).
    pub dir: usize,
    /// Abelian profile terms (family `abelian`).
    pub terms: Vec<TrigTermSpec>,
    /// Explicit generator terms (family `trig`).
    pub matrix_terms: Vec<ConnTermSpec>,
    /// Generator amplitude (family `random`).
    pub amp: f64,
}

impl Default for ConnectionSpec {
    fn default() -> Self {
        ConnectionSpec {
            family: "zero".to_string(),
            dir: 0,
            terms: Vec::new(),
            matrix_terms: Vec::new(),
            amp: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialSpec {
    /// `zero` | `trig` | `random`.
    pub family: String,
    /// Explicit Hermitian terms (family `trig`).
    pub matrix_terms: Vec<ConnTermSpec>,
    /// Amplitude of the random Hermitian term (family `random`).
    pub amp: f64,
}

impl Default for PotentialSpec {
    fn default() -> Self {
        PotentialSpec { family: "zero".to_string(), matrix_terms: Vec::new(), amp: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SymbolSpec {
    /// Recursion depth `K` (symbols down to degree `1 - K`).
    pub depth: usize,
    /// Jet truncation order of the forward table.
    pub order: usize,
}

impl Default for SymbolSpec {
    fn default() -> Self {
        SymbolSpec { depth: 3, order: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    /// Boundary-wave frequency multipliers for symbol estimation.
    pub lambdas: Vec<usize>,
    /// Iterative-solver relative tolerance.
    pub tol: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec { lambdas: vec![8, 12, 16], tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    /// Output directory for CSV tables and the manifest.
    pub dir: String,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { dir: "out".to_string() }
    }
}

/// The full experiment description; see the module docs for the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Which pipeline to run; must match the invoked CLI subcommand.
    pub subcommand: String,
    /// Chart dimension (2 or 3).
    #[serde(default = "default_n")]
    pub n: usize,
    /// Twisting-bundle rank `N`.
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Mass parameter `m` in `D_A^2 + Z - m^2`.
    #[serde(default)]
    pub m: f64,
    /// Seed for every random draw the subcommand makes.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub metric: MetricSpec,
    #[serde(default)]
    pub connection: ConnectionSpec,
    #[serde(default)]
    pub potential: PotentialSpec,
    #[serde(default)]
    pub symbol: SymbolSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_n() -> usize {
    2
}
fn default_rank() -> usize {
    1
}
fn default_seed() -> u64 {
    7
}

impl ExperimentConfig {
    /// Built-in defaults for one subcommand, used when no `--config` file is
    /// given. A few subcommands get larger grids or nontrivial families so
    /// that a bare invocation exercises the intended regime.
    pub fn for_subcommand(sub: &str) -> Result<Self, ConfigError> {
        if !SUBCOMMANDS.contains(&sub) {
            return Err(ConfigError::UnknownSubcommand(sub.to_string()));
        }
        let mut cfg = ExperimentConfig {
            subcommand: sub.to_string(),
            n: default_n(),
            rank: default_rank(),
            m: 0.0,
            seed: default_seed(),
            grid: GridSpec::default(),
            metric: MetricSpec::default(),
            connection: ConnectionSpec::default(),
            potential: PotentialSpec::default(),
            symbol: SymbolSpec::default(),
            solver: SolverSpec::default(),
            output: OutputSpec::default(),
        };
        match sub {
            "dn-oracle" => {
                cfg.grid = GridSpec { tangential: vec![64], normal: 65, depth: 1.0 };
            }
            "recover" => {
                cfg.grid = GridSpec { tangential: vec![64], normal: 65, depth: 1.0 };
                cfg.m = 0.2;
                cfg.connection = ConnectionSpec {
                    family: "abelian".to_string(),
                    dir: 0,
                    terms: vec![TrigTermSpec { amp: 0.5, wave: vec![1.0, 0.0], phase: 0.3 }],
                    matrix_terms: Vec::new(),
                    amp: 0.25,
                };
            }
            "gauge-invariance" | "normal-gauge" | "transport-equivalence" => {
                cfg.rank = 2;
                cfg.connection.family = "random".to_string();
            }
            "ck-residual" => {
                cfg.connection = ConnectionSpec {
                    family: "abelian".to_string(),
                    dir: 0,
                    terms: vec![TrigTermSpec { amp: 0.4, wave: vec![1.0, 1.0], phase: 0.2 }],
                    matrix_terms: Vec::new(),
                    amp: 0.25,
                };
            }
            _ => {}
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        if !SUBCOMMANDS.contains(&cfg.subcommand.as_str()) {
            return Err(ConfigError::UnknownSubcommand(cfg.subcommand.clone()));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn build_grid(&self) -> Result<SlabGrid, ConfigError> {
        Ok(SlabGrid::new(self.n, self.grid.tangential.clone(), self.grid.normal, self.grid.depth)?)
    }

    pub fn build_metric(&self) -> Result<MetricField, ConfigError> {
        let s = &self.metric;
        match s.family.as_str() {
            "flat" => Ok(MetricField::flat(self.n)),
            "conformal" => {
                if s.terms.is_empty() {
                    return Err(ConfigError::MissingField {
                        kind: "metric",
                        name: s.family.clone(),
                        field: "terms",
                    });
                }
                Ok(MetricField::conformal(self.n, to_poly(&s.terms))?)
            }
            "diagonal-perturb" => {
                if s.profiles.is_empty() {
                    return Err(ConfigError::MissingField {
                        kind: "metric",
                        name: s.family.clone(),
                        field: "profiles",
                    });
                }
                let profiles = s.profiles.iter().map(|p| to_poly(p)).collect();
                Ok(MetricField::diagonal_perturb(self.n, s.eps, profiles)?)
            }
            "sphere-patch" => Ok(MetricField::sphere_patch(s.radius, s.theta0)),
            other => {
                Err(ConfigError::UnknownFamily { kind: "metric", name: other.to_string() })
            }
        }
    }

    /// Build the gauge connection; `random` draws skew-Hermitian generators
    /// with integer waves from the config seed (two terms per direction).
    pub fn build_connection(&self, rng: &mut ChaCha8Rng) -> Result<ConnectionField, ConfigError> {
        let s = &self.connection;
        match s.family.as_str() {
            "zero" => Ok(ConnectionField::zero(self.n, self.rank)),
            "abelian" => {
                if s.terms.is_empty() {
                    return Err(ConfigError::MissingField {
                        kind: "connection",
                        name: s.family.clone(),
                        field: "terms",
                    });
                }
                Ok(ConnectionField::abelian(self.n, s.dir, to_poly(&s.terms)))
            }
            "trig" => {
                if s.matrix_terms.is_empty() {
                    return Err(ConfigError::MissingField {
                        kind: "connection",
                        name: s.family.clone(),
                        field: "matrix_terms",
                    });
                }
                let mut terms = Vec::new();
                for t in &s.matrix_terms {
                    terms.push(ConnTerm {
                        dir: t.dir,
                        mat: t.generator.to_cmat(self.rank)?,
                        profile: to_poly(&t.profile),
                    });
                }
                Ok(ConnectionField::new(self.n, self.rank, terms)?)
            }
            "random" => {
                let mut terms = Vec::new();
                for dir in 0..self.n {
                    for _ in 0..2 {
                        terms.push(ConnTerm {
                            dir,
                            mat: random_skew_hermitian(rng, self.rank, s.amp),
                            profile: TrigPoly::single(
                                1.0,
                                (0..self.n).map(|_| rng.gen_range(-2i32..=2) as f64).collect(),
                                rng.gen_range(0.0..std::f64::consts::TAU),
                            ),
                        });
                    }
                }
                Ok(ConnectionField::new(self.n, self.rank, terms)?)
            }
            other => {
                Err(ConfigError::UnknownFamily { kind: "connection", name: other.to_string() })
            }
        }
    }

    /// Build the potential endomorphism on the `comp`-dimensional fiber
    /// (`comp = k * rank` with `k` the spinor rank).
    pub fn build_potential(
        &self,
        comp: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<EndoField, ConfigError> {
        let s = &self.potential;
        match s.family.as_str() {
            "zero" => Ok(EndoField::zero(comp)),
            "trig" => {
                if s.matrix_terms.is_empty() {
                    return Err(ConfigError::MissingField {
                        kind: "potential",
                        name: s.family.clone(),
                        field: "matrix_terms",
                    });
                }
                let mut terms = Vec::new();
                for t in &s.matrix_terms {
                    terms.push((t.generator.to_cmat(comp)?, to_poly(&t.profile)));
                }
                Ok(EndoField::new(comp, true, terms)?)
            }
            "random" => {
                let raw = DMatrix::from_fn(comp, comp, |_, _| {
                    Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
                });
                let herm = (&raw + raw.adjoint()).scale(s.amp);
                let profile = TrigPoly::single(
                    1.0,
                    (0..self.n).map(|_| rng.gen_range(-2i32..=2) as f64).collect(),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                );
                Ok(EndoField::new(comp, true, vec![(herm, profile)])?)
            }
            other => {
                Err(ConfigError::UnknownFamily { kind: "potential", name: other.to_string() })
            }
        }
    }

    /// True when the configured data is the flat untwisted zero-potential
    /// slab — the regime where several residuals are exact rather than
    /// second-order small.
    pub fn is_flat_untwisted(&self) -> bool {
        self.metric.family == "flat"
            && self.connection.family == "zero"
            && self.potential.family == "zero"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::for_subcommand("dn-compute").unwrap();
        cfg.n = 2;
        cfg.rank = 2;
        cfg.m = 0.125;
        cfg.seed = 99;
        cfg.grid = GridSpec { tangential: vec![12], normal: 11, depth: 0.75 };
        cfg.metric = MetricSpec {
            family: "conformal".to_string(),
            terms: vec![TrigTermSpec {
                amp: 0.217_391_304_347_826_1,
                wave: vec![1.0, 2.0],
                phase: std::f64::consts::PI / 7.0,
            }],
            ..MetricSpec::default()
        };
        cfg.connection = ConnectionSpec {
            family: "trig".to_string(),
            matrix_terms: vec![ConnTermSpec {
                dir: 0,
                generator: MatrixSpec {
                    re: vec![vec![0.0, 0.25], vec![-0.25, 0.0]],
                    im: vec![vec![0.3, 0.1], vec![0.1, -0.2]],
                },
                profile: vec![TrigTermSpec { amp: 0.4, wave: vec![1.0, 0.0], phase: 0.1 }],
            }],
            ..ConnectionSpec::default()
        };
        cfg
    }

    #[test]
    fn toml_round_trip_is_bit_exact() {
        let cfg = sample_config();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        // Second serialization must be byte-identical, including the
        // repeating float and the pi fraction.
        let text2 = back.to_toml().unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn empty_and_malformed_configs_are_rejected() {
        assert!(ExperimentConfig::from_toml("").is_err());
        assert!(ExperimentConfig::from_toml("subcommand = \"no-such-thing\"").is_err());
        assert!(ExperimentConfig::from_toml("subcommand = \"recover\"\nbogus = 1").is_err());
        // Diagnostics carry the offending field.
        let err = ExperimentConfig::from_toml("bogus = 1").unwrap_err();
        assert!(format!("{err}").contains("subcommand"), "got: {err}");
    }

    #[test]
    fn families_build_the_advertised_objects() {
        let cfg = sample_config();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let grid = cfg.build_grid().unwrap();
        assert_eq!(grid.n_tan, vec![12]);
        let metric = cfg.build_metric().unwrap();
        assert!(!metric.is_flat());
        let conn = cfg.build_connection(&mut rng).unwrap();
        assert_eq!(conn.nc, 2);
        let z = cfg.build_potential(4, &mut rng).unwrap();
        assert_eq!(z.dim, 4);

        // Unknown family names are reported as such.
        let mut bad = sample_config();
        bad.metric.family = "hyperbolic".to_string();
        assert!(matches!(
            bad.build_metric(),
            Err(ConfigError::UnknownFamily { kind: "metric", .. })
        ));

        // The random families are deterministic in the seed.
        let cfg2 = {
            let mut c = ExperimentConfig::for_subcommand("gauge-invariance").unwrap();
            c.n = 2;
            c
        };
        let a1 = cfg2.build_connection(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let a2 = cfg2.build_connection(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let x = [0.3, 0.1];
        for d in 0..2 {
            assert_eq!(a1.a_at(d, &x), a2.a_at(d, &x));
        }
    }

    #[test]
    fn per_subcommand_defaults_satisfy_grid_invariants() {
        for sub in SUBCOMMANDS {
            let cfg = ExperimentConfig::for_subcommand(sub).unwrap();
            assert_eq!(cfg.subcommand, sub);
            cfg.build_grid().unwrap_or_else(|e| panic!("{sub}: {e}"));
            let text = cfg.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        }
        assert!(ExperimentConfig::for_subcommand("frobnicate").is_err());
    }
}
