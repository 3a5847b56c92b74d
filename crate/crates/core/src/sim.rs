//! Scenarios with known truth and the Monte Carlo study driver.
//!
//! Every scenario is a product covariate density on `[0,1]^d`, a propensity
//! `π(x) = P(A = 1 | X = x)` and binary outcome means `μ_a(x) = P(Y = 1 | A = a, X = x)`.
//! The nuisances of each functional arm are derived from these; truths and
//! variance bounds are computed by quadrature, never by simulation.

use std::fmt;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::basis::{build_basis, BasisSpec, Family};
use crate::data::{format_f64, Dataset};
use crate::error::{Error, Result};
use crate::estimator::{
    arms, assemble, default_tuning, estimate_split, prepare_arm, realize_k, split_sample, EstimateReport,
    EstimatorConfig, GramHooks, NuisanceMethod, PreparedArm,
};
use crate::functionals::{FunctionalId, FunctionalSpec};
use crate::gram::{quadrature_gram, GramMatrix};
use crate::nuisance::{NuisanceFn, NuisanceSet};
use crate::numeric::{mean, median, sample_variance, CompensatedSum};
use crate::quadrature::QuadratureSpec;

pub type Field = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Univariate covariate law on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Marginal {
    Uniform,
    /// Density `1 + α (t - 1/2)`, `|α| ≤ 2`.
    Linear(f64),
}

impl Marginal {
    pub fn pdf(&self, t: f64) -> f64 {
        match *self {
            Marginal::Uniform => 1.0,
            Marginal::Linear(a) => 1.0 + a * (t - 0.5),
        }
    }

    pub fn inverse_cdf(&self, u: f64) -> f64 {
        match *self {
            Marginal::Uniform => u,
            Marginal::Linear(a) if a.abs() < 1e-12 => u,
            Marginal::Linear(a) => {
                // F(t) = t + α (t² - t) / 2
                let b = 1.0 - 0.5 * a;
                ((-b + (b * b + 2.0 * a * u).sqrt()) / a).clamp(0.0, 1.0)
            }
        }
    }
}

#[derive(Clone)]
pub struct Scenario {
    pub id: String,
    pub description: String,
    pub d: usize,
    pub functional: FunctionalId,
    pub marginals: Vec<Marginal>,
    pub pi: Field,
    pub mu1: Field,
    pub mu0: Field,
    /// `inf_x π(x)` on the truth quadrature grid.
    pub sigma: f64,
    /// `(β_b, β_p)` for truncated-series scenarios.
    pub smoothness: Option<(f64, f64)>,
    /// Amplitude of the `p` perturbation in series scenarios.
    pub c_p: Option<f64>,
    /// A basis whose span contains `b` and `p` exactly.
    pub span_basis: Option<BasisSpec>,
    pub quad: QuadratureSpec,
}

impl fmt::Debug for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scenario")
            .field("id", &self.id)
            .field("d", &self.d)
            .field("functional", &self.functional)
            .finish()
    }
}

/// Nuisances of one arm under the truth.
#[derive(Clone)]
pub struct ArmTruth {
    pub b: Field,
    pub p: Field,
    /// `g = E[|h1| | X] f`.
    pub g: Field,
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl Scenario {
    pub fn density(&self, x: &[f64]) -> f64 {
        self.marginals.iter().zip(x).map(|(m, &t)| m.pdf(t)).product()
    }

    pub fn density_field(&self) -> Field {
        let m = self.marginals.clone();
        Arc::new(move |x: &[f64]| m.iter().zip(x).map(|(m, &t)| m.pdf(t)).product())
    }

    /// Truth for one arm of the functional.
    pub fn arm_truth(&self, spec: &FunctionalSpec) -> ArmTruth {
        let f = self.density_field();
        let pi = Arc::clone(&self.pi);
        let (mu1, mu0) = (Arc::clone(&self.mu1), Arc::clone(&self.mu0));
        let treated = spec.g_weight(1.0) == 1.0;
        let s = spec.clone();
        let g: Field = {
            let pi = Arc::clone(&pi);
            Arc::new(move |x: &[f64]| s.g_weight(pi(x)) * f(x))
        };
        match spec.id {
            FunctionalId::ExpectedCondCov => {
                let pi2 = Arc::clone(&pi);
                ArmTruth {
                    b: Arc::new(move |x: &[f64]| {
                        let p = pi2(x);
                        p * mu1(x) + (1.0 - p) * mu0(x)
                    }),
                    p: pi,
                    g,
                }
            }
            _ if treated => ArmTruth {
                b: mu1,
                p: Arc::new(move |x: &[f64]| 1.0 / pi(x)),
                g,
            },
            _ => ArmTruth {
                b: mu0,
                p: Arc::new(move |x: &[f64]| 1.0 / (1.0 - pi(x))),
                g,
            },
        }
    }

    pub fn truth_nuisances(&self) -> Vec<NuisanceSet> {
        arms(self.functional)
            .iter()
            .map(|(spec, _)| {
                let t = self.arm_truth(spec);
                NuisanceSet {
                    b_hat: t.b as NuisanceFn,
                    p_hat: t.p as NuisanceFn,
                    g_hat: None,
                    provenance: "truth".into(),
                }
            })
            .collect()
    }

    /// Checks `σ ≤ π ≤ 1`, `0 ≤ μ ≤ 1`, `∫ f = 1`.
    pub fn validate(&self) -> Result<()> {
        let grid = QuadratureSpec::midpoint(if self.d == 1 { 512 } else { 64 }).grid(self.d)?;
        for i in 0..grid.len() {
            let x = grid.point(i);
            let p = (self.pi)(x);
            if !(p >= self.sigma - 1e-12 && p <= 1.0) {
                return Err(Error::Config(format!("scenario {}: π = {p} outside [σ, 1]", self.id)));
            }
            for m in [(self.mu1)(x), (self.mu0)(x)] {
                if !(0.0..=1.0).contains(&m) {
                    return Err(Error::Config(format!("scenario {}: outcome mean {m} outside [0, 1]", self.id)));
                }
            }
        }
        let mass = self.quad.grid(self.d)?.integrate(|x| self.density(x));
        if (mass - 1.0).abs() > 1e-8 {
            return Err(Error::Config(format!("scenario {}: density integrates to {mass}", self.id)));
        }
        Ok(())
    }
}

/// Two-dimensional Haar series with level-`j` coefficients `2^{-j(β+1)}`
/// and deterministic signs, levels `0..levels`.
#[derive(Debug, Clone, Copy)]
pub struct HaarSeries2 {
    pub beta: f64,
    pub levels: u32,
}

impl HaarSeries2 {
    fn sign(j: u32, kind: u32, s1: u64, s2: u64) -> f64 {
        let mut h = (j as u64) << 48 ^ (kind as u64) << 40 ^ s1 << 20 ^ s2;
        h ^= h >> 33;
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
        h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
        h ^= h >> 33;
        if h & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.levels {
            let scale = (1u64 << j) as f64;
            let pos = |t: f64| {
                let p = t * scale;
                let s = (p.floor() as u64).min((1u64 << j) - 1);
                let w = if p - (s as f64) < 0.5 { 1.0 } else { -1.0 };
                (s, w)
            };
            let (s1, w1) = pos(x[0]);
            let (s2, w2) = pos(x[1]);
            // amplitude of an L2-normalized tensor wavelet at level j is 2^j
            let coef = 2f64.powf(-(j as f64) * (self.beta + 1.0)) * scale;
            acc += coef
                * (Self::sign(j, 0, s1, s2) * w1 * w2 + Self::sign(j, 1, s1, s2) * w1 + Self::sign(j, 2, s1, s2) * w2);
        }
        acc
    }
}

pub const SCENARIO_IDS: [&str; 7] = ["S1", "S2", "S3", "S4", "S5", "ecc-correlated", "ate-d1"];

/// Scenario by id (`S1`..`S5` or a descriptive alias).
pub fn scenario(id: &str) -> Result<Scenario> {
    let smooth_pi_1d: Field = Arc::new(|x: &[f64]| 0.3 + 0.6 * x[0] * x[0]);
    let gl1 = QuadratureSpec::gauss_legendre(64, 8);
    let scn = match id {
        "S1" | "smooth-d1" => {
            let mu: Field = Arc::new(|x: &[f64]| logistic(-0.5 + 1.5 * x[0]));
            Scenario {
                id: "S1".into(),
                description: "analytic-smooth, d = 1, missing-at-random mean".into(),
                d: 1,
                functional: FunctionalId::MarMean,
                marginals: vec![Marginal::Linear(0.5)],
                pi: smooth_pi_1d,
                mu0: Arc::clone(&mu),
                mu1: mu,
                sigma: 0.3,
                smoothness: None,
                c_p: None,
                span_basis: None,
                quad: gl1,
            }
        }
        "S2" | "smooth-d2" => {
            let mu: Field = Arc::new(|x: &[f64]| logistic(-0.3 + x[0] - 0.8 * x[1] + 0.5 * x[0] * x[1]));
            let pi: Field = Arc::new(|x: &[f64]| 0.25 + 0.7 * logistic(3.0 * (x[0] + x[1] - 1.0)));
            Scenario {
                id: "S2".into(),
                description: "analytic-smooth, d = 2, missing-at-random mean".into(),
                d: 2,
                functional: FunctionalId::MarMean,
                marginals: vec![Marginal::Linear(0.5), Marginal::Linear(0.5)],
                sigma: 0.25 + 0.7 * logistic(-3.0),
                pi,
                mu0: Arc::clone(&mu),
                mu1: mu,
                smoothness: None,
                c_p: None,
                span_basis: None,
                quad: QuadratureSpec::gauss_legendre(32, 6),
            }
        }
        "S3" | "holder-d2" => {
            let h = HaarSeries2 { beta: 0.6, levels: 8 };
            let (c_b, c_p) = (0.05, 0.1);
            let mu: Field = Arc::new(move |x: &[f64]| 0.5 + c_b * h.eval(x));
            let pi: Field = Arc::new(move |x: &[f64]| 1.0 / (2.0 + c_p * h.eval(x)));
            let bound = h_bound(&h);
            Scenario {
                id: "S3".into(),
                description: "Hölder-type truncated Haar series, d = 2, β = 0.6".into(),
                d: 2,
                functional: FunctionalId::MarMean,
                marginals: vec![Marginal::Uniform, Marginal::Uniform],
                sigma: 1.0 / (2.0 + c_p * bound),
                pi,
                mu0: Arc::clone(&mu),
                mu1: mu,
                smoothness: Some((0.6, 0.6)),
                c_p: Some(c_p),
                span_basis: None,
                quad: QuadratureSpec::gauss_legendre(256, 1),
            }
        }
        "S4" | "span-exact" => {
            let mu: Field = Arc::new(|x: &[f64]| if x[0] < 0.5 { 0.3 } else { 0.7 });
            let pi: Field = Arc::new(|x: &[f64]| if x[0] < 0.5 { 0.5 } else { 0.8 });
            Scenario {
                id: "S4".into(),
                description: "b and p constant on halves (in every Haar span), d = 1".into(),
                d: 1,
                functional: FunctionalId::MarMean,
                marginals: vec![Marginal::Linear(1.0)],
                sigma: 0.5,
                pi,
                mu0: Arc::clone(&mu),
                mu1: mu,
                smoothness: None,
                c_p: None,
                span_basis: Some(BasisSpec::haar(1, 2)),
                quad: gl1,
            }
        }
        "S5" | "ecc-independent" => {
            let mu: Field = Arc::new(|x: &[f64]| logistic(-0.2 + x[0]));
            Scenario {
                id: "S5".into(),
                description: "A independent of Y given X, expected conditional covariance (ψ = 0)".into(),
                d: 1,
                functional: FunctionalId::ExpectedCondCov,
                marginals: vec![Marginal::Linear(0.5)],
                pi: smooth_pi_1d,
                mu0: Arc::clone(&mu),
                mu1: mu,
                sigma: 0.3,
                smoothness: None,
                c_p: None,
                span_basis: None,
                quad: gl1,
            }
        }
        "ecc-correlated" => {
            let gamma = 0.2;
            let b: Field = Arc::new(|x: &[f64]| 0.3 + 0.4 * x[0]);
            let pi = Arc::clone(&smooth_pi_1d);
            let (b1, p1) = (Arc::clone(&b), Arc::clone(&pi));
            let (b0, p0) = (b, Arc::clone(&pi));
            Scenario {
                id: "ecc-correlated".into(),
                description: "E[Y | A, X] = b(X) + γ (A - π(X)), expected conditional covariance".into(),
                d: 1,
                functional: FunctionalId::ExpectedCondCov,
                marginals: vec![Marginal::Linear(0.5)],
                pi,
                mu1: Arc::new(move |x: &[f64]| b1(x) + gamma * (1.0 - p1(x))),
                mu0: Arc::new(move |x: &[f64]| b0(x) - gamma * p0(x)),
                sigma: 0.3,
                smoothness: None,
                c_p: None,
                span_basis: None,
                quad: gl1,
            }
        }
        "ate-d1" => Scenario {
            id: "ate-d1".into(),
            description: "treatment effect with smooth arms, d = 1".into(),
            d: 1,
            functional: FunctionalId::Ate,
            marginals: vec![Marginal::Linear(0.5)],
            pi: Arc::new(|x: &[f64]| 0.3 + 0.4 * x[0]),
            mu1: Arc::new(|x: &[f64]| logistic(0.2 + x[0])),
            mu0: Arc::new(|x: &[f64]| logistic(-0.3 + 0.5 * x[0])),
            sigma: 0.3,
            smoothness: None,
            c_p: None,
            span_basis: None,
            quad: gl1,
        },
        other => return Err(Error::Config(format!("unknown scenario '{other}'"))),
    };
    Ok(scn)
}

/// `sup |h|` over the finest cells of the series.
fn h_bound(h: &HaarSeries2) -> f64 {
    let cells = 1usize << h.levels;
    let mut sup: f64 = 0.0;
    for i in 0..cells {
        for j in 0..cells {
            let x = [(i as f64 + 0.5) / cells as f64, (j as f64 + 0.5) / cells as f64];
            sup = sup.max(h.eval(&x).abs());
        }
    }
    sup
}

/// `N` i.i.d. records. For the missing-at-random mean `Y` is recorded as `A·Y`.
pub fn generate(scn: &Scenario, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    generate_with(scn, n, &mut rng)
}

pub fn generate_with(scn: &Scenario, n: usize, rng: &mut ChaCha20Rng) -> Result<Dataset> {
    let d = scn.d;
    let mut x = Vec::with_capacity(n * d);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut pt = vec![0.0; d];
    for _ in 0..n {
        for (slot, m) in pt.iter_mut().zip(&scn.marginals) {
            *slot = m.inverse_cdf(rng.random::<f64>());
        }
        let ai = if rng.random::<f64>() < (scn.pi)(&pt) { 1.0 } else { 0.0 };
        let mu = if ai == 1.0 { (scn.mu1)(&pt) } else { (scn.mu0)(&pt) };
        let yi = if rng.random::<f64>() < mu { 1.0 } else { 0.0 };
        x.extend_from_slice(&pt);
        a.push(ai);
        y.push(if scn.functional == FunctionalId::MarMean { ai * yi } else { yi });
    }
    Dataset::new(a, y, x, d)
}

/// Integrates with the scenario rule and its refinement; errors if they
/// disagree by more than `tol`.
fn doubled_integral<F: Fn(&[f64]) -> f64>(scn: &Scenario, f: F, tol: f64) -> Result<f64> {
    let coarse = scn.quad.grid(scn.d)?.integrate(&f);
    let fine = scn.quad.refined().grid(scn.d)?.integrate(&f);
    if (coarse - fine).abs() > tol {
        return Err(Error::Numerical(format!(
            "quadrature for {} not converged: {coarse} vs {fine}",
            scn.id
        )));
    }
    Ok(fine)
}

/// `ψ` by quadrature; `∫ Σ_arms ± E[H] f` with the truth nuisances.
pub fn true_psi(scn: &Scenario) -> Result<f64> {
    let f = |x: &[f64]| {
        let p = (scn.pi)(x);
        let (m1, m0) = ((scn.mu1)(x), (scn.mu0)(x));
        let v = match scn.functional {
            FunctionalId::MarMean => m1,
            FunctionalId::Ate => m1 - m0,
            FunctionalId::ExpectedCondCov => p * (1.0 - p) * (m1 - m0),
        };
        v * scn.density(x)
    };
    doubled_integral(scn, f, 1e-10)
}

/// `E[IF₁²]` with `IF₁ = Σ_arms ± H(b, p)(W) − ψ`, enumerating `(A, Y)`.
pub fn efficiency_bound(scn: &Scenario) -> Result<f64> {
    let psi = true_psi(scn)?;
    let arm_list = arms(scn.functional);
    let truths: Vec<ArmTruth> = arm_list.iter().map(|(s, _)| scn.arm_truth(s)).collect();
    let f = |x: &[f64]| {
        let p = (scn.pi)(x);
        let vals: Vec<(f64, f64)> = truths.iter().map(|t| ((t.b)(x), (t.p)(x))).collect();
        let mut acc = 0.0;
        for a in [0.0, 1.0] {
            let pa = if a == 1.0 { p } else { 1.0 - p };
            let mu = if a == 1.0 { (scn.mu1)(x) } else { (scn.mu0)(x) };
            for y in [0.0, 1.0] {
                let pay = pa * if y == 1.0 { mu } else { 1.0 - mu };
                if pay == 0.0 {
                    continue;
                }
                let mut h = -psi;
                for ((spec, sign), (b, pp)) in arm_list.iter().zip(&vals) {
                    h += sign * spec.h_value(*b, *pp, a, y);
                }
                acc += pay * h * h;
            }
        }
        acc * scn.density(x)
    };
    doubled_integral(scn, f, 1e-9)
}

/// Whether the training sample is redrawn with every replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingDesign {
    /// Draw `n` records and split them with the estimator's fraction.
    Resample,
    /// One training sample of `n_train` records held fixed across
    /// replications; only the estimation sample is redrawn. Biases are then
    /// conditional on the training sample.
    Fixed { n_train: usize },
}

#[derive(Clone)]
pub enum StudyNuisance {
    /// Whatever the estimator configuration says.
    Config,
    Truth,
    /// `b̂ = b − δb`, `p̂ = p − δp` on every arm.
    Perturbed { delta_b: Field, delta_p: Field },
    /// `b̂` correct, `p̂` a misspecified constant.
    BCorrect,
    /// `p̂` correct, `b̂` a misspecified constant.
    PCorrect,
}

impl fmt::Debug for StudyNuisance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl StudyNuisance {
    pub fn label(&self) -> &'static str {
        match self {
            StudyNuisance::Config => "config",
            StudyNuisance::Truth => "truth",
            StudyNuisance::Perturbed { .. } => "perturbed",
            StudyNuisance::BCorrect => "b_correct",
            StudyNuisance::PCorrect => "p_correct",
        }
    }
}

/// Basis size rule for a study.
#[derive(Debug, Clone, PartialEq)]
pub enum StudyTuning {
    /// Use `estimator.basis` and `estimator.m` as given.
    AsConfigured,
    /// Tuning rules at the estimation-sample size, realized in `family`.
    Default { family: Family, order: usize },
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    /// Records per replication (total before splitting for `Resample`,
    /// estimation-sample size for `Fixed`).
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub estimator: EstimatorConfig,
    pub design: TrainingDesign,
    pub nuisance: StudyNuisance,
    pub tuning: StudyTuning,
}

/// One replication.
#[derive(Debug, Clone)]
pub struct StudyRow {
    pub rep: usize,
    pub report: Option<EstimateReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Aggregate {
    /// `psi_1`, `psi_2`, …, or `psi_hat`.
    pub estimator: String,
    pub reps_ok: usize,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    /// `sd / sqrt(reps_ok)`.
    pub bias_se: f64,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub scenario: String,
    pub config: StudyConfig,
    pub psi_true: f64,
    pub efficiency_bound: f64,
    pub rows: Vec<StudyRow>,
    pub aggregates: Vec<Aggregate>,
    pub mean_op_distance: Option<f64>,
    pub median_op_distance: Option<f64>,
    /// The fixed training sample's prepared arms, for the `Fixed` design.
    pub fixed_arms: Option<Vec<PreparedArm>>,
    /// Population `Ω` per arm (for the diagnostics).
    pub omega: Vec<GramMatrix>,
    pub runtime_ms: f64,
}

fn mix(seed: u64, rep: u64) -> u64 {
    let mut z = seed ^ rep.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn resolve_nuisance(scn: &Scenario, mode: &StudyNuisance) -> Option<Vec<NuisanceSet>> {
    if let StudyNuisance::Config = mode {
        return None;
    }
    let sets: Vec<NuisanceSet> = arms(scn.functional)
        .iter()
        .map(|(spec, _)| {
            let t = scn.arm_truth(spec);
            let wrong_p = if spec.is_inverse_weight() { 1.5 } else { 0.5 };
            match mode {
                StudyNuisance::Config => unreachable!(),
                StudyNuisance::Truth => NuisanceSet {
                    b_hat: t.b,
                    p_hat: t.p,
                    g_hat: None,
                    provenance: "truth".into(),
                },
                StudyNuisance::Perturbed { delta_b, delta_p } => {
                    let (b, db, p, dp) = (t.b, Arc::clone(delta_b), t.p, Arc::clone(delta_p));
                    NuisanceSet {
                        b_hat: Arc::new(move |x: &[f64]| b(x) - db(x)),
                        p_hat: Arc::new(move |x: &[f64]| p(x) - dp(x)),
                        g_hat: None,
                        provenance: "perturbed truth".into(),
                    }
                }
                StudyNuisance::BCorrect => NuisanceSet {
                    b_hat: t.b,
                    p_hat: Arc::new(move |_: &[f64]| wrong_p),
                    g_hat: None,
                    provenance: "b truth, p constant".into(),
                },
                StudyNuisance::PCorrect => NuisanceSet {
                    b_hat: Arc::new(|_: &[f64]| 0.5),
                    p_hat: t.p,
                    g_hat: None,
                    provenance: "p truth, b constant".into(),
                },
            }
        })
        .collect();
    Some(sets)
}

/// Resolves tuning, nuisance mode and reference grams into the estimator
/// configuration actually used by every replication.
pub fn resolve_config(scn: &Scenario, cfg: &StudyConfig) -> Result<(EstimatorConfig, Vec<GramMatrix>)> {
    let mut est = cfg.estimator.clone();
    if est.functional != scn.functional {
        est.functional = scn.functional;
    }
    if est.basis.dim != scn.d {
        return Err(Error::Config(format!(
            "basis dimension {} does not match scenario dimension {}",
            est.basis.dim, scn.d
        )));
    }
    if let StudyTuning::Default { family, order } = cfg.tuning {
        let n_est = match cfg.design {
            TrainingDesign::Resample => ((est.split_fraction * cfg.n as f64) - 1e-9).ceil() as usize,
            TrainingDesign::Fixed { .. } => cfg.n,
        };
        let (k, m) = default_tuning(n_est, est.variant, est.m_max);
        est.basis = realize_k(family, scn.d, order, k)?;
        est.requested_k = Some(k);
        est.m = m.min(est.m_max);
    }
    if let Some(sets) = resolve_nuisance(scn, &cfg.nuisance) {
        est.nuisance = NuisanceMethod::Fixed(sets);
    }
    let basis = build_basis(&est.basis)?;
    let omega = arms(scn.functional)
        .iter()
        .map(|(spec, _)| {
            let g = scn.arm_truth(spec).g;
            quadrature_gram(&basis, &*g, &est.quadrature)
        })
        .collect::<Result<Vec<_>>>()?;
    est.hooks = GramHooks {
        reference: Some(omega.clone()),
        omega_hat: est.hooks.omega_hat.clone(),
    };
    Ok((est, omega))
}

pub fn run_study(scn: &Scenario, cfg: &StudyConfig) -> Result<StudyResult> {
    let t0 = Instant::now();
    if cfg.reps < 2 {
        return Err(Error::Config(format!("reps ≥ 2 required, got {}", cfg.reps)));
    }
    scn.validate()?;
    let psi_true = true_psi(scn)?;
    let eff = efficiency_bound(scn)?;
    let (est_cfg, omega) = resolve_config(scn, cfg)?;
    est_cfg.validate()?;

    let fixed_arms = match cfg.design {
        TrainingDesign::Resample => None,
        TrainingDesign::Fixed { n_train } => {
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            rng.set_stream(0);
            let train = generate_with(scn, n_train, &mut rng)?;
            let prepared = arms(scn.functional)
                .iter()
                .enumerate()
                .map(|(i, (spec, _))| prepare_arm(&train, spec, i, &est_cfg))
                .collect::<Result<Vec<_>>>()?;
            Some((prepared, n_train))
        }
    };
    let signs: Vec<f64> = arms(scn.functional).iter().map(|a| a.1).collect();

    let rows: Vec<StudyRow> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            rng.set_stream(rep as u64 + 1);
            let mut rep_cfg = est_cfg.clone();
            rep_cfg.seed = mix(cfg.seed, rep as u64);
            let out = generate_with(scn, cfg.n, &mut rng).and_then(|data| match &fixed_arms {
                Some((prepared, n_train)) => assemble(&data, *n_train, prepared, &signs, &rep_cfg),
                None => {
                    if rep_cfg.cross_fit {
                        crate::estimator::cross_fit(&data, &rep_cfg)
                    } else {
                        let (e, t) = split_sample(&data, rep_cfg.split_fraction, rep_cfg.seed)?;
                        estimate_split(&e, &t, &rep_cfg)
                    }
                }
            });
            match out {
                Ok(r) => StudyRow {
                    rep,
                    report: Some(r),
                    error: None,
                },
                Err(e) => StudyRow {
                    rep,
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let failed = rows.iter().filter(|r| r.report.is_none()).count();
    if failed * 20 > cfg.reps {
        let first = rows.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(Error::Numerical(format!(
            "{failed} of {} replications failed; first error: {first}",
            cfg.reps
        )));
    }
    let aggregates = aggregate(&rows, psi_true, est_cfg.m.max(1));
    let dists: Vec<f64> = rows
        .iter()
        .filter_map(|r| r.report.as_ref())
        .flat_map(|r| r.gram_diag.iter().filter_map(|g| g.op_distance_to_reference))
        .collect();
    let mut config = cfg.clone();
    config.estimator = est_cfg;
    Ok(StudyResult {
        scenario: scn.id.clone(),
        config,
        psi_true,
        efficiency_bound: eff,
        rows,
        aggregates,
        mean_op_distance: (!dists.is_empty()).then(|| mean(&dists)),
        median_op_distance: (!dists.is_empty()).then(|| median(&dists)),
        fixed_arms: fixed_arms.map(|f| f.0),
        omega,
        runtime_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

/// `ψ̂_m = ψ̂₁ + Σ_{j ≤ m} ÎF_jj` when the row carries all its orders.
pub fn partial_estimate(report: &EstimateReport, m: usize) -> Option<f64> {
    if m == 1 {
        return Some(report.psi_1);
    }
    if report.per_order.len() < m - 1 {
        return None;
    }
    Some(report.psi_1 + report.per_order[..m - 1].iter().sum::<f64>())
}

fn summarize(label: String, values: &[f64], psi: f64, coverage: Option<f64>) -> Aggregate {
    let n = values.len();
    let mu = if n > 0 { mean(values) } else { f64::NAN };
    let sd = if n > 1 { sample_variance(values).sqrt() } else { f64::NAN };
    let mse: f64 = values.iter().map(|v| (v - psi).powi(2)).collect::<CompensatedSum>().value() / n as f64;
    Aggregate {
        estimator: label,
        reps_ok: n,
        mean: mu,
        bias: mu - psi,
        sd,
        rmse: mse.sqrt(),
        bias_se: sd / (n as f64).sqrt(),
        coverage,
    }
}

fn aggregate(rows: &[StudyRow], psi: f64, m: usize) -> Vec<Aggregate> {
    let reports: Vec<&EstimateReport> = rows.iter().filter_map(|r| r.report.as_ref()).collect();
    let mut out = Vec::new();
    for order in 1..=m {
        let vals: Vec<f64> = reports.iter().filter_map(|r| partial_estimate(r, order)).collect();
        out.push(summarize(format!("psi_{order}"), &vals, psi, None));
    }
    let hats: Vec<f64> = reports.iter().map(|r| r.psi_hat).collect();
    let with_ci: Vec<&&EstimateReport> = reports.iter().filter(|r| r.ci_low.is_finite()).collect();
    let coverage = (!with_ci.is_empty()).then(|| {
        with_ci.iter().filter(|r| r.ci_low <= psi && psi <= r.ci_high).count() as f64 / with_ci.len() as f64
    });
    out.push(summarize("psi_hat".into(), &hats, psi, coverage));
    out
}

pub const ROW_COLUMNS: [&str; 20] = [
    "rep",
    "n_est",
    "n_train",
    "k",
    "m",
    "psi_true",
    "psi_hat",
    "psi_1",
    "if_2",
    "if_3",
    "if_4",
    "if_5",
    "if_6",
    "variance_est",
    "ci_low",
    "ci_high",
    "covered",
    "zero_convention",
    "op_distance",
    "error",
];

pub const AGGREGATE_COLUMNS: [&str; 21] = [
    "scenario",
    "functional",
    "variant",
    "design",
    "nuisance",
    "n_est",
    "n_train",
    "k",
    "m",
    "estimator",
    "reps",
    "reps_ok",
    "psi_true",
    "mean",
    "bias",
    "sd",
    "rmse",
    "bias_se",
    "coverage",
    "efficiency_bound",
    "mean_op_distance",
];

impl StudyResult {
    pub fn write_rows_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(ROW_COLUMNS)?;
        for row in &self.rows {
            let mut rec = vec![row.rep.to_string()];
            match &row.report {
                Some(r) => {
                    let covered = if r.ci_low.is_finite() {
                        ((r.ci_low <= self.psi_true && self.psi_true <= r.ci_high) as u8).to_string()
                    } else {
                        String::new()
                    };
                    rec.extend([
                        r.n_est.to_string(),
                        r.n_train.to_string(),
                        r.realized_k.to_string(),
                        r.m.to_string(),
                        format_f64(self.psi_true),
                        format_f64(r.psi_hat),
                        format_f64(r.psi_1),
                    ]);
                    for j in 2..=6 {
                        rec.push(r.per_order.get(j - 2).map(|v| format_f64(*v)).unwrap_or_default());
                    }
                    let dist = r
                        .gram_diag
                        .iter()
                        .filter_map(|g| g.op_distance_to_reference)
                        .reduce(f64::max)
                        .map(format_f64)
                        .unwrap_or_default();
                    rec.extend([
                        format_f64(r.variance_est),
                        format_f64(r.ci_low),
                        format_f64(r.ci_high),
                        covered,
                        (r.zero_convention_applied as u8).to_string(),
                        dist,
                        String::new(),
                    ]);
                }
                None => {
                    rec.extend(std::iter::repeat(String::new()).take(ROW_COLUMNS.len() - 2));
                    rec.push(row.error.clone().unwrap_or_default());
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_aggregate_csv<W: Write>(&self, w: W, with_header: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        if with_header {
            w.write_record(AGGREGATE_COLUMNS)?;
        }
        let first = self.rows.iter().find_map(|r| r.report.as_ref());
        let (n_est, n_train, k, m) = first.map_or((0, 0, 0, 0), |r| (r.n_est, r.n_train, r.realized_k, r.m));
        let design = match self.config.design {
            TrainingDesign::Resample => "resample".to_string(),
            TrainingDesign::Fixed { n_train } => format!("fixed({n_train})"),
        };
        let cfg = &self.config.estimator;
        for a in &self.aggregates {
            w.write_record([
                self.scenario.clone(),
                cfg.functional.to_string(),
                cfg.variant.to_string(),
                design.clone(),
                self.config.nuisance.label().to_string(),
                n_est.to_string(),
                n_train.to_string(),
                k.to_string(),
                m.to_string(),
                a.estimator.clone(),
                self.config.reps.to_string(),
                a.reps_ok.to_string(),
                format_f64(self.psi_true),
                format_f64(a.mean),
                format_f64(a.bias),
                format_f64(a.sd),
                format_f64(a.rmse),
                format_f64(a.bias_se),
                a.coverage.map(format_f64).unwrap_or_default(),
                format_f64(self.efficiency_bound),
                self.mean_op_distance.map(format_f64).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn aggregate(&self, label: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.estimator == label)
    }

    pub fn reports(&self) -> impl Iterator<Item = &EstimateReport> {
        self.rows.iter().filter_map(|r| r.report.as_ref())
    }
}
