//! The full pipeline: split, fit nuisances on the training part, build and
//! invert `Ω̂`, then `ψ̂_{m,k} = ψ̂₁ + Σ_{j=2}^m ÎF_{j,j,k}` on the estimation part.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::basis::{build_basis, Basis, BasisSpec, Family};
use crate::data::{format_f64, Dataset};
use crate::error::{Error, Result};
use crate::functionals::{ate_spec, expected_cond_cov_spec, mar_mean_spec, FunctionalId, FunctionalSpec};
use crate::gram::{empirical_gram, invert_checked, op_norm_distance, quadrature_gram, GramMatrix, InverseReport};
use crate::nuisance::{density_series, fit_series_nuisances, zero_nuisance, NuisanceSet, SeriesOptions};
use crate::numeric::{binomial, mean, normal_quantile, sample_variance};
use crate::quadrature::QuadratureSpec;
use crate::ustat::{cost_estimate, if_orders, ChainInputs, HARD_MAX_ORDER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// `Ω̂` is the training-sample average of `|h1| z zᵀ`.
    Emp,
    /// `Ω̂` integrates `z zᵀ` against an estimated `ĝ`.
    Ac,
    /// One-step estimator only.
    FirstOrder,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Emp => "emp",
            Variant::Ac => "ac",
            Variant::FirstOrder => "first_order",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "emp" => Ok(Variant::Emp),
            "ac" => Ok(Variant::Ac),
            "first_order" => Ok(Variant::FirstOrder),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// How the nuisances are obtained.
#[derive(Debug, Clone)]
pub enum NuisanceMethod {
    Series,
    Zero,
    /// Supplied from outside (plug-in values, or the truth in simulations);
    /// one set per arm of the functional.
    Fixed(Vec<NuisanceSet>),
}

/// Optional matrices for simulation use, one per arm.
#[derive(Debug, Clone, Default)]
pub struct GramHooks {
    /// Population `Ω` for the distance diagnostic.
    pub reference: Option<Vec<GramMatrix>>,
    /// Replaces `Ω̂` outright.
    pub omega_hat: Option<Vec<GramMatrix>>,
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub functional: FunctionalId,
    pub variant: Variant,
    pub m: usize,
    pub m_max: usize,
    pub basis: BasisSpec,
    /// The size asked for before rounding to a realizable `q^d`.
    pub requested_k: Option<usize>,
    pub split_fraction: f64,
    pub seed: u64,
    pub eigen_floor: f64,
    pub cross_fit: bool,
    pub nuisance: NuisanceMethod,
    /// Family and order used by the series nuisance fits.
    pub nuisance_basis: BasisSpec,
    pub series: SeriesOptions,
    pub quadrature: QuadratureSpec,
    pub level: f64,
    /// Locality/eigenvalue constant `B` for the `‖Ω̂ − Ω‖ ≤ 1/(2B)` flag.
    pub hypothesis_b: f64,
    pub hooks: GramHooks,
}

impl EstimatorConfig {
    pub fn new(functional: FunctionalId, basis: BasisSpec) -> Self {
        let d = basis.dim;
        Self {
            functional,
            variant: Variant::Emp,
            m: 2,
            m_max: 4,
            requested_k: None,
            split_fraction: 0.5,
            seed: 0,
            eigen_floor: 1e-8,
            cross_fit: false,
            nuisance: NuisanceMethod::Series,
            nuisance_basis: BasisSpec::bspline(d, 2, 3),
            series: SeriesOptions::default(),
            quadrature: QuadratureSpec::default_for_dim(d),
            level: 0.95,
            hypothesis_b: 1.0,
            hooks: GramHooks::default(),
            basis,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.basis.validate()?;
        if self.m_max > HARD_MAX_ORDER || self.m_max < 1 {
            return Err(Error::Config(format!("m_max must lie in 1..={HARD_MAX_ORDER}")));
        }
        if self.m < 1 || self.m > self.m_max {
            return Err(Error::Config(format!("order m = {} outside 1..={}", self.m, self.m_max)));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config("split fraction must lie in (0, 1)".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config("confidence level must lie in (0, 1)".into()));
        }
        if !(self.eigen_floor >= 0.0) {
            return Err(Error::Config("eigen floor must be non-negative".into()));
        }
        if self.nuisance_basis.dim != self.basis.dim {
            return Err(Error::Config("nuisance basis dimension differs from the estimator basis".into()));
        }
        Ok(())
    }

    fn effective_m(&self) -> usize {
        if self.variant == Variant::FirstOrder {
            1
        } else {
            self.m
        }
    }
}

/// The functional's arms with the sign attached to each (`+1`, or
/// `+1, -1` for the treatment effect).
pub fn arms(id: FunctionalId) -> Vec<(FunctionalSpec, f64)> {
    match id {
        FunctionalId::MarMean => vec![(mar_mean_spec(), 1.0)],
        FunctionalId::ExpectedCondCov => vec![(expected_cond_cov_spec(), 1.0)],
        FunctionalId::Ate => {
            let (a1, a0) = ate_spec();
            vec![(a1, 1.0), (a0, -1.0)]
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Timings {
    pub nuisance_ms: f64,
    pub gram_ms: f64,
    pub ustat_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub functional: FunctionalId,
    pub variant: Variant,
    pub m: usize,
    pub requested_k: usize,
    pub realized_k: usize,
    pub n_est: usize,
    pub n_train: usize,
    pub psi_hat: f64,
    pub psi_1: f64,
    /// `ÎF_{j,j,k}` for `j = 2..=m`.
    pub per_order: Vec<f64>,
    pub variance_est: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    /// One entry per arm; inverses are dropped from reports.
    pub gram_diag: Vec<InverseReport>,
    pub zero_convention_applied: bool,
    /// Whether `‖Ω̂ − Ω‖_op ≤ 1/(2B)` for every arm, when `Ω` is known.
    pub within_hypothesis: Option<bool>,
    /// Higher-order variance bound with unit constant, for comparison.
    pub variance_bound: f64,
    pub ustat_cost: f64,
    pub nuisance: String,
    pub timings: Timings,
}

pub const CSV_COLUMNS: [&str; 26] = [
    "functional",
    "variant",
    "m",
    "k_requested",
    "k",
    "n_est",
    "n_train",
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
    "level",
    "zero_convention",
    "invertible",
    "condition_number",
    "eig_min",
    "eig_max",
    "op_distance",
    "within_hypothesis",
    "nuisance",
];

impl EstimateReport {
    /// Values in `CSV_COLUMNS` order. Timings are left out so that rows
    /// are reproducible byte for byte.
    pub fn csv_row(&self) -> Vec<String> {
        let worst = self
            .gram_diag
            .iter()
            .max_by(|a, b| a.condition_number.total_cmp(&b.condition_number));
        let opt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
        let mut row = vec![
            self.functional.to_string(),
            self.variant.to_string(),
            self.m.to_string(),
            self.requested_k.to_string(),
            self.realized_k.to_string(),
            self.n_est.to_string(),
            self.n_train.to_string(),
            format_f64(self.psi_hat),
            format_f64(self.psi_1),
        ];
        for j in 2..=6 {
            row.push(self.per_order.get(j - 2).map(|v| format_f64(*v)).unwrap_or_default());
        }
        row.extend([
            format_f64(self.variance_est),
            format_f64(self.ci_low),
            format_f64(self.ci_high),
            format_f64(self.level),
            (self.zero_convention_applied as u8).to_string(),
            opt(worst.map(|g| if g.invertible { 1.0 } else { 0.0 })).replace(".0", ""),
            opt(worst.map(|g| g.condition_number)),
            opt(self.gram_diag.iter().map(|g| g.eig_min).reduce(f64::min)),
            opt(self.gram_diag.iter().map(|g| g.eig_max).reduce(f64::max)),
            opt(self
                .gram_diag
                .iter()
                .filter_map(|g| g.op_distance_to_reference)
                .reduce(f64::max)),
            self.within_hypothesis.map(|b| (b as u8).to_string()).unwrap_or_default(),
            self.nuisance.clone(),
        ]);
        row
    }

    pub fn text_block(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, k: &str, v: String| s.push_str(&format!("{k:<24}{v}\n"));
        line(&mut s, "functional", self.functional.to_string());
        line(&mut s, "variant", self.variant.to_string());
        line(&mut s, "order m", self.m.to_string());
        line(&mut s, "basis size k", format!("{} (requested {})", self.realized_k, self.requested_k));
        line(&mut s, "samples (est/train)", format!("{}/{}", self.n_est, self.n_train));
        line(&mut s, "psi_hat", format!("{:.10}", self.psi_hat));
        line(&mut s, "psi_1", format!("{:.10}", self.psi_1));
        for (i, v) in self.per_order.iter().enumerate() {
            line(&mut s, &format!("IF_{0}{0}", i + 2), format!("{v:.10e}"));
        }
        line(&mut s, "variance_est", format!("{:.6e}", self.variance_est));
        line(
            &mut s,
            &format!("{:.0}% interval", self.level * 100.0),
            format!("[{:.8}, {:.8}]", self.ci_low, self.ci_high),
        );
        line(&mut s, "zero convention", self.zero_convention_applied.to_string());
        for (i, g) in self.gram_diag.iter().enumerate() {
            let dist = g
                .op_distance_to_reference
                .map(|d| format!(", |Omega_hat - Omega|_op {d:.4e}"))
                .unwrap_or_default();
            line(
                &mut s,
                &format!("gram[{i}]"),
                format!(
                    "invertible {}, eig [{:.4e}, {:.4e}], cond {:.4e}{dist}",
                    g.invertible, g.eig_min, g.eig_max, g.condition_number
                ),
            );
        }
        if let Some(h) = self.within_hypothesis {
            line(&mut s, "within 1/(2B) of Omega", h.to_string());
        }
        line(&mut s, "var bound, c = 1", format!("{:.4e}", self.variance_bound));
        line(&mut s, "u-statistic work", format!("{:.3e}", self.ustat_cost));
        line(&mut s, "nuisance", self.nuisance.clone());
        line(
            &mut s,
            "timings (ms)",
            format!(
                "nuisance {:.1}, gram {:.1}, ustat {:.1}, total {:.1}",
                self.timings.nuisance_ms, self.timings.gram_ms, self.timings.ustat_ms, self.timings.total_ms
            ),
        );
        s
    }
}

/// Uniform random partition into an estimation part of `⌈cN⌉` records and
/// the remainder.
pub fn split_sample(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (est, train) = split_indices(data.len(), fraction, seed)?;
    Ok((data.subset(&est), data.subset(&train)))
}

pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config("split fraction must lie in (0, 1)".into()));
    }
    if n < 4 {
        return Err(Error::EmptySample(format!("cannot split {n} records")));
    }
    let n_est = ((fraction * n as f64) - 1e-9).ceil() as usize;
    if n_est == 0 || n_est >= n {
        return Err(Error::Config(format!("split of {n} records at {fraction} leaves an empty part")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(1);
    idx.shuffle(&mut rng);
    let mut est = idx[..n_est].to_vec();
    let mut train = idx[n_est..].to_vec();
    est.sort_unstable();
    train.sort_unstable();
    Ok((est, train))
}

/// `n⁻¹ Σ H(b̂, p̂)(W_i)`.
pub fn one_step(est: &Dataset, spec: &FunctionalSpec, nuis: &NuisanceSet) -> Result<f64> {
    Ok(mean(&influence_values(est, spec, nuis)?))
}

/// `H(b̂, p̂)` at every record: the estimated first-order influence function
/// up to the constant `ψ̂`.
pub fn influence_values(est: &Dataset, spec: &FunctionalSpec, nuis: &NuisanceSet) -> Result<Vec<f64>> {
    if est.is_empty() {
        return Err(Error::EmptySample("estimation sample".into()));
    }
    (0..est.len())
        .map(|i| {
            let x = est.point(i);
            let v = spec.h_value((nuis.b_hat)(x), (nuis.p_hat)(x), est.a[i], est.y[i]);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite(format!("first-order summand at record {i}")))
            }
        })
        .collect()
}

/// Everything an arm needs from the training sample.
#[derive(Debug, Clone)]
pub struct PreparedArm {
    pub spec: FunctionalSpec,
    pub nuisance: NuisanceSet,
    pub basis: Basis,
    pub omega_hat: Option<GramMatrix>,
    pub inverse: InverseReport,
    pub nuisance_ms: f64,
    pub gram_ms: f64,
}

/// Fits the nuisances and `Ω̂` for arm `arm` on `train`.
pub fn prepare_arm(train: &Dataset, spec: &FunctionalSpec, arm: usize, cfg: &EstimatorConfig) -> Result<PreparedArm> {
    spec.check_signs(train)?;
    let t0 = Instant::now();
    let nuisance = match &cfg.nuisance {
        NuisanceMethod::Zero => zero_nuisance(),
        NuisanceMethod::Fixed(sets) => sets
            .get(arm)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no fixed nuisance set for arm {arm}")))?,
        NuisanceMethod::Series => {
            let opts = SeriesOptions {
                seed: cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(arm as u64 * 2 + 7),
                ..cfg.series.clone()
            };
            fit_series_nuisances(train, &cfg.nuisance_basis, spec, &opts)?
        }
    };
    let nuisance_ms = t0.elapsed().as_secs_f64() * 1e3;
    let basis = build_basis(&cfg.basis)?;
    let t1 = Instant::now();
    let omega_hat = match (cfg.variant, &cfg.hooks.omega_hat) {
        (Variant::FirstOrder, _) => None,
        (_, Some(over)) => Some(
            over.get(arm)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no injected gram for arm {arm}")))?,
        ),
        (Variant::Emp, None) => Some(empirical_gram(&basis, train, spec)?),
        (Variant::Ac, None) => {
            let g = density_series(train, &basis, spec, cfg.series.sigma_floor)?;
            Some(quadrature_gram(&basis, &*g, &cfg.quadrature)?)
        }
    };
    let mut inverse = match &omega_hat {
        Some(g) => invert_checked(g, cfg.eigen_floor),
        None => InverseReport {
            inverse: None,
            invertible: true,
            condition_number: f64::NAN,
            eig_min: f64::NAN,
            eig_max: f64::NAN,
            op_distance_to_reference: None,
        },
    };
    if let (Some(refs), Some(g)) = (&cfg.hooks.reference, &omega_hat) {
        if let Some(r) = refs.get(arm) {
            inverse.op_distance_to_reference = Some(op_norm_distance(g, r)?);
        }
    }
    let gram_ms = t1.elapsed().as_secs_f64() * 1e3;
    Ok(PreparedArm {
        spec: spec.clone(),
        nuisance: NuisanceSet {
            g_hat: None,
            ..nuisance
        },
        basis,
        omega_hat,
        inverse,
        nuisance_ms,
        gram_ms,
    })
}

/// Per-arm output on an estimation sample.
#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub psi_1: f64,
    pub per_order: Vec<f64>,
    pub influence: Vec<f64>,
    pub zero_convention: bool,
    pub ustat_ms: f64,
}

pub fn evaluate_arm(est: &Dataset, prep: &PreparedArm, cfg: &EstimatorConfig) -> Result<ArmOutcome> {
    prep.spec.check_signs(est)?;
    let influence = influence_values(est, &prep.spec, &prep.nuisance)?;
    let psi_1 = mean(&influence);
    let m = cfg.effective_m();
    let t0 = Instant::now();
    if m < 2 {
        return Ok(ArmOutcome {
            psi_1,
            per_order: Vec::new(),
            influence,
            zero_convention: false,
            ustat_ms: 0.0,
        });
    }
    let Some(inv) = prep.inverse.inverse.as_ref().filter(|_| prep.inverse.invertible) else {
        return Ok(ArmOutcome {
            psi_1,
            per_order: Vec::new(),
            influence,
            zero_convention: true,
            ustat_ms: 0.0,
        });
    };
    let res = prep.spec.residuals(est, &*prep.nuisance.b_hat, &*prep.nuisance.p_hat)?;
    let z = prep.basis.design_matrix(&est.x)?;
    let inputs = ChainInputs::new(res.eps_p, res.eps_b, res.abs_h1, z, inv.clone(), prep.spec.sign_flag)?;
    let per_order = if_orders(&inputs, m, cfg.m_max)?;
    Ok(ArmOutcome {
        psi_1,
        per_order,
        influence,
        zero_convention: false,
        ustat_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

/// `(Σ_{l=0}^{m-2} (Σ_{j=l+2}^{m} C(j-2, l))² c^{l+2} k^{l+1} / C(n, l+2))`.
pub fn higher_order_variance_bound(m: usize, k: usize, n: usize, c: f64) -> f64 {
    if m < 2 {
        return 0.0;
    }
    (0..=m - 2)
        .map(|l| {
            let inner: f64 = (l + 2..=m).map(|j| binomial(j - 2, l)).sum();
            inner * inner * c.powi(l as i32 + 2) * (k as f64).powi(l as i32 + 1) / binomial(n, l + 2)
        })
        .sum()
}

/// Combines prepared arms into a report.
pub fn assemble(
    est: &Dataset,
    n_train: usize,
    prepared: &[PreparedArm],
    signs: &[f64],
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    let outcomes = prepared
        .iter()
        .map(|p| evaluate_arm(est, p, cfg))
        .collect::<Result<Vec<_>>>()?;
    let m = cfg.effective_m();
    let n = est.len();
    let zero = outcomes.iter().any(|o| o.zero_convention);
    let psi_1: f64 = outcomes.iter().zip(signs).map(|(o, s)| s * o.psi_1).sum();
    let per_order: Vec<f64> = if zero {
        Vec::new()
    } else {
        (0..m.saturating_sub(1))
            .map(|i| outcomes.iter().zip(signs).map(|(o, s)| s * o.per_order[i]).sum())
            .collect()
    };
    let psi_hat = if zero { 0.0 } else { psi_1 + per_order.iter().sum::<f64>() };
    let influence: Vec<f64> = (0..n)
        .map(|i| outcomes.iter().zip(signs).map(|(o, s)| s * o.influence[i]).sum())
        .collect();
    let variance_est = sample_variance(&influence) / n as f64;
    let (ci_low, ci_high) = ci_bounds(psi_hat, variance_est, cfg.level).unwrap_or((f64::NAN, f64::NAN));
    let gram_diag: Vec<InverseReport> = prepared
        .iter()
        .map(|p| InverseReport {
            inverse: None,
            ..p.inverse.clone()
        })
        .collect();
    let within_hypothesis = if cfg.variant == Variant::FirstOrder {
        None
    } else {
        gram_diag
            .iter()
            .map(|g| g.op_distance_to_reference.map(|d| d <= 0.5 / cfg.hypothesis_b))
            .collect::<Option<Vec<bool>>>()
            .map(|v| v.into_iter().all(|b| b))
    };
    let k = cfg.basis.size();
    let timings = Timings {
        nuisance_ms: prepared.iter().map(|p| p.nuisance_ms).sum(),
        gram_ms: prepared.iter().map(|p| p.gram_ms).sum(),
        ustat_ms: outcomes.iter().map(|o| o.ustat_ms).sum(),
        total_ms: 0.0,
    };
    Ok(EstimateReport {
        functional: cfg.functional,
        variant: cfg.variant,
        m,
        requested_k: cfg.requested_k.unwrap_or(k),
        realized_k: k,
        n_est: n,
        n_train,
        psi_hat,
        psi_1,
        per_order,
        variance_est,
        ci_low,
        ci_high,
        level: cfg.level,
        gram_diag,
        zero_convention_applied: zero,
        within_hypothesis,
        variance_bound: higher_order_variance_bound(m, k, n, 1.0),
        ustat_cost: if m >= 2 { cost_estimate(m, n, k) * signs.len() as f64 } else { 0.0 },
        nuisance: prepared.first().map(|p| p.nuisance.provenance.clone()).unwrap_or_default(),
        timings,
    })
}

/// Estimate with a given estimation/training partition.
pub fn estimate_split(est: &Dataset, train: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    let t0 = Instant::now();
    cfg.validate()?;
    if cfg.variant == Variant::Emp && cfg.basis.size() > est.len() {
        return Err(Error::Config(format!(
            "basis size {} exceeds the estimation sample size {}",
            cfg.basis.size(),
            est.len()
        )));
    }
    let arm_list = arms(cfg.functional);
    let prepared = arm_list
        .iter()
        .enumerate()
        .map(|(i, (spec, _))| prepare_arm(train, spec, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    let signs: Vec<f64> = arm_list.iter().map(|a| a.1).collect();
    let mut report = assemble(est, train.len(), &prepared, &signs, cfg)?;
    report.timings.total_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok(report)
}

/// Split with `cfg.seed` and estimate; cross-fits when `cfg.cross_fit`.
pub fn estimate(data: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    if cfg.cross_fit {
        return cross_fit(data, cfg);
    }
    cfg.validate()?;
    for (spec, _) in arms(cfg.functional) {
        spec.check_signs(data)?;
    }
    let (est, train) = split_sample(data, cfg.split_fraction, cfg.seed)?;
    estimate_split(&est, &train, cfg)
}

/// Average of the two estimates with the halves' roles exchanged.
pub fn cross_fit(data: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    cfg.validate()?;
    for (spec, _) in arms(cfg.functional) {
        spec.check_signs(data)?;
    }
    let t0 = Instant::now();
    let (first, second) = split_sample(data, cfg.split_fraction, cfg.seed)?;
    let a = estimate_split(&first, &second, cfg)?;
    let b = estimate_split(&second, &first, cfg)?;
    Ok(combine_cross_fit(a, b, data.len(), cfg, t0))
}

fn combine_cross_fit(a: EstimateReport, b: EstimateReport, total: usize, cfg: &EstimatorConfig, t0: Instant) -> EstimateReport {
    let zero = a.zero_convention_applied || b.zero_convention_applied;
    let per_order: Vec<f64> = if zero {
        Vec::new()
    } else {
        a.per_order.iter().zip(&b.per_order).map(|(x, y)| 0.5 * (x + y)).collect()
    };
    let psi_1 = 0.5 * (a.psi_1 + b.psi_1);
    let psi_hat = if zero { 0.0 } else { 0.5 * (a.psi_hat + b.psi_hat) };
    // each half's variance_est is s²/n_half; recover s² and pool over N
    let s2 = 0.5 * (a.variance_est * a.n_est as f64 + b.variance_est * b.n_est as f64);
    let variance_est = s2 / total as f64;
    let (ci_low, ci_high) = ci_bounds(psi_hat, variance_est, cfg.level).unwrap_or((f64::NAN, f64::NAN));
    let mut gram_diag = a.gram_diag.clone();
    gram_diag.extend(b.gram_diag.iter().cloned());
    let within_hypothesis = match (a.within_hypothesis, b.within_hypothesis) {
        (Some(x), Some(y)) => Some(x && y),
        _ => None,
    };
    EstimateReport {
        psi_hat,
        psi_1,
        per_order,
        variance_est,
        ci_low,
        ci_high,
        gram_diag,
        zero_convention_applied: zero,
        within_hypothesis,
        n_est: total,
        n_train: total,
        ustat_cost: a.ustat_cost + b.ustat_cost,
        timings: Timings {
            nuisance_ms: a.timings.nuisance_ms + b.timings.nuisance_ms,
            gram_ms: a.timings.gram_ms + b.timings.gram_ms,
            ustat_ms: a.timings.ustat_ms + b.timings.ustat_ms,
            total_ms: t0.elapsed().as_secs_f64() * 1e3,
        },
        ..a
    }
}

/// `(k, m)` from the tuning rules before rounding `k` to a realizable size.
pub fn default_tuning(n: usize, variant: Variant, m_max: usize) -> (usize, usize) {
    let ln = (n.max(2) as f64).ln();
    let clamp = |m: f64| (m.ceil() as usize).clamp(2, m_max.max(2));
    match variant {
        Variant::Emp => (((n as f64) / ln.powi(3)).floor().max(1.0) as usize, clamp(ln.sqrt())),
        Variant::Ac => (((n as f64) / ln.powi(2)).floor().max(1.0) as usize, clamp(ln)),
        Variant::FirstOrder => (1, 1),
    }
}

/// The largest basis of the template's family with at most `k` functions.
pub fn realize_k(family: Family, dim: usize, order: usize, k: usize) -> Result<BasisSpec> {
    BasisSpec::largest_within(family, dim, order, k)
        .ok_or_else(|| Error::Config(format!("no {dim}-dimensional basis of this family has at most {k} functions")))
}

/// `ψ̂ ± z_{(1+level)/2} √variance_est`.
pub fn confidence_interval(report: &EstimateReport, level: f64) -> Result<(f64, f64)> {
    ci_bounds(report.psi_hat, report.variance_est, level)
}

fn ci_bounds(psi: f64, var: f64, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config("confidence level must lie in (0, 1)".into()));
    }
    if !(var > 0.0) {
        return Err(Error::Numerical("variance estimate is not positive".into()));
    }
    let half = normal_quantile(0.5 * (1.0 + level)) * var.sqrt();
    Ok((psi - half, psi + half))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn mar_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut a = Vec::new();
        let mut y = Vec::new();
        let mut x = Vec::new();
        for _ in 0..n {
            let t: f64 = rng.random();
            let pi = 0.4 + 0.5 * t;
            let b = 0.2 + 0.6 * t * t;
            let ai = if rng.random::<f64>() < pi { 1.0 } else { 0.0 };
            let yi = if rng.random::<f64>() < b { 1.0 } else { 0.0 };
            a.push(ai);
            y.push(ai * yi);
            x.push(t);
        }
        Dataset::new(a, y, x, 1).unwrap()
    }

    fn cfg() -> EstimatorConfig {
        let mut c = EstimatorConfig::new(FunctionalId::MarMean, BasisSpec::haar(1, 4));
        c.nuisance_basis = BasisSpec::haar(1, 1);
        c.series.k_grid = vec![2, 4, 8];
        c.m = 3;
        c.seed = 42;
        c
    }

    #[test]
    fn split_sizes_and_determinism() {
        let (e, t) = split_indices(100, 0.5, 7).unwrap();
        assert_eq!((e.len(), t.len()), (50, 50));
        let mut all: Vec<usize> = e.iter().chain(&t).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.5, 7).unwrap(), (e, t));
        assert_eq!(split_indices(101, 0.3, 1).unwrap().0.len(), 31);
        assert!(split_indices(3, 0.5, 1).is_err());
        assert!(split_indices(10, 1.0, 1).is_err());
    }

    #[test]
    fn split_membership_frequency() {
        let seeds = 10_000;
        let hits = (0..seeds).filter(|&s| split_indices(20, 0.5, s).unwrap().0.contains(&3)).count();
        let freq = hits as f64 / seeds as f64;
        let se = (0.25 / seeds as f64).sqrt();
        assert!((freq - 0.5).abs() < 3.0 * se, "{freq}");
    }

    #[test]
    fn one_step_reductions() {
        let ds = mar_data(50, 1);
        let spec = mar_mean_spec();
        assert_eq!(one_step(&ds, &spec, &zero_nuisance()).unwrap(), 0.0);
        let all_treated = Dataset::new(vec![1.0; 3], vec![0.0, 1.0, 1.0], vec![0.1, 0.5, 0.9], 1).unwrap();
        let nuis = NuisanceSet::from_fns(|x| x[0], |_| 1.0, "test");
        assert!((one_step(&all_treated, &spec, &nuis).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn first_order_variant_is_one_step() {
        let ds = mar_data(400, 2);
        let mut c = cfg();
        c.m = 1;
        let r = estimate(&ds, &c).unwrap();
        assert!(r.per_order.is_empty());
        assert_eq!(r.psi_hat, r.psi_1);
        let (est, train) = split_sample(&ds, 0.5, c.seed).unwrap();
        let prep = prepare_arm(&train, &mar_mean_spec(), 0, &c).unwrap();
        assert_eq!(one_step(&est, &mar_mean_spec(), &prep.nuisance).unwrap(), r.psi_1);
    }

    #[test]
    fn decomposition_and_zero_convention() {
        let ds = mar_data(600, 3);
        let mut c = cfg();
        let r = estimate(&ds, &c).unwrap();
        assert_eq!(r.per_order.len(), 2);
        let total = r.psi_1 + r.per_order.iter().sum::<f64>();
        assert!((r.psi_hat - total).abs() < 1e-12);
        assert!(!r.zero_convention_applied);
        c.eigen_floor = 1e30;
        let z = estimate(&ds, &c).unwrap();
        assert!(z.zero_convention_applied);
        assert_eq!(z.psi_hat, 0.0);
    }

    #[test]
    fn reproducible_given_seed() {
        let ds = mar_data(500, 4);
        let a = estimate(&ds, &cfg()).unwrap();
        let b = estimate(&ds, &cfg()).unwrap();
        assert_eq!(a.csv_row(), b.csv_row());
    }

    #[test]
    fn cross_fit_halves_symmetric() {
        // duplicate data so both halves are the same multiset
        let base = mar_data(200, 5);
        let idx: Vec<usize> = (0..200).chain(0..200).collect();
        let ds = base.subset(&idx);
        let mut c = cfg();
        c.cross_fit = true;
        c.nuisance = NuisanceMethod::Zero;
        let (first, second) = (base.clone(), base.clone());
        let a = estimate_split(&first, &second, &EstimatorConfig { cross_fit: false, ..c.clone() }).unwrap();
        let r = cross_fit_from_halves(&first, &second, &c);
        assert!((r.psi_hat - a.psi_hat).abs() < 1e-12);
        assert!(estimate(&ds, &c).is_ok());
    }

    fn cross_fit_from_halves(first: &Dataset, second: &Dataset, c: &EstimatorConfig) -> EstimateReport {
        let a = estimate_split(first, second, c).unwrap();
        let b = estimate_split(second, first, c).unwrap();
        combine_cross_fit(a, b, first.len() + second.len(), c, Instant::now())
    }

    #[test]
    fn emp_rejects_oversized_basis() {
        let ds = mar_data(20, 6);
        let mut c = cfg();
        c.basis = BasisSpec::haar(1, 16);
        assert!(estimate(&ds, &c).is_err());
    }

    #[test]
    fn tuning_rules() {
        assert_eq!(default_tuning(1000, Variant::Emp, 4), (3, 3));
        assert_eq!(default_tuning(100_000, Variant::Emp, 4), (65, 4));
        assert_eq!(default_tuning(1000, Variant::Ac, 4), (20, 4));
        assert_eq!(default_tuning(1000, Variant::Ac, 6), (20, 6));
        assert_eq!(realize_k(Family::Haar, 1, 0, 3).unwrap().size(), 2);
        assert_eq!(realize_k(Family::Haar, 2, 0, 65).unwrap().size(), 64);
    }

    #[test]
    fn interval_half_width() {
        let (lo, hi) = ci_bounds(0.0, 0.01, 0.95).unwrap();
        assert!((hi - 0.195_996_4).abs() < 1e-6 && (lo + hi).abs() < 1e-15);
        let widths: Vec<f64> = [0.5, 0.9, 0.99, 0.9999].iter().map(|&l| {
            let (a, b) = ci_bounds(0.0, 1.0, l).unwrap();
            b - a
        }).collect();
        assert!(widths.windows(2).all(|w| w[1] > w[0]));
        assert!(ci_bounds(0.0, 0.0, 0.95).is_err());
    }

    #[test]
    fn variance_bound_orders() {
        // m = 2: single term c² k / C(n, 2)
        let b = higher_order_variance_bound(2, 16, 100, 2.0);
        assert!((b - 4.0 * 16.0 / 4950.0).abs() < 1e-15);
        assert!(higher_order_variance_bound(3, 16, 100, 1.0) > higher_order_variance_bound(2, 16, 100, 1.0));
    }
}
