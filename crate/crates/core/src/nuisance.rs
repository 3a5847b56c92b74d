//! Training-sample nuisance estimates: series least squares with
//! cross-validated size, a weighted histogram for `g`, and the zero set.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::basis::{build_basis, Basis, BasisSpec, SparseVector};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::functionals::{FunctionalId, FunctionalSpec};
use crate::gram::weighted_outer_sum;

pub type NuisanceFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct NuisanceSet {
    pub b_hat: NuisanceFn,
    pub p_hat: NuisanceFn,
    pub g_hat: Option<NuisanceFn>,
    pub provenance: String,
}

impl fmt::Debug for NuisanceSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NuisanceSet")
            .field("provenance", &self.provenance)
            .field("has_g_hat", &self.g_hat.is_some())
            .finish()
    }
}

impl NuisanceSet {
    pub fn from_fns<B, P>(b: B, p: P, provenance: impl Into<String>) -> Self
    where
        B: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        P: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            b_hat: Arc::new(b),
            p_hat: Arc::new(p),
            g_hat: None,
            provenance: provenance.into(),
        }
    }
}

/// `b̂ = p̂ ≡ 0`. Range constraints on `p̂` are deliberately not applied.
pub fn zero_nuisance() -> NuisanceSet {
    NuisanceSet::from_fns(|_| 0.0, |_| 0.0, "zero")
}

/// Nuisances given per record by columns `b_hat` and `p_hat`, looked up by
/// the exact covariate vector. Points not present in the table evaluate to NaN,
/// which the residual step reports as an error.
pub fn plugin_from_columns(data: &Dataset, b_col: &str, p_col: &str) -> Result<NuisanceSet> {
    let b = data
        .column(b_col)
        .ok_or_else(|| Error::Data(format!("column {b_col} absent")))?;
    let p = data
        .column(p_col)
        .ok_or_else(|| Error::Data(format!("column {p_col} absent")))?;
    let mut table: HashMap<Vec<u64>, (f64, f64)> = HashMap::with_capacity(data.len());
    for i in 0..data.len() {
        let key: Vec<u64> = data.point(i).iter().map(|v| v.to_bits()).collect();
        if let Some(&(b0, p0)) = table.get(&key) {
            if b0.to_bits() != b[i].to_bits() || p0.to_bits() != p[i].to_bits() {
                return Err(Error::Data(format!("row {}: conflicting plug-in values for a repeated covariate", i + 1)));
            }
        }
        table.insert(key, (b[i], p[i]));
    }
    let table = Arc::new(table);
    let tb = Arc::clone(&table);
    let lookup = move |t: &HashMap<Vec<u64>, (f64, f64)>, x: &[f64]| {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        t.get(&key).copied()
    };
    Ok(NuisanceSet {
        b_hat: Arc::new(move |x| lookup(&tb, x).map_or(f64::NAN, |v| v.0)),
        p_hat: Arc::new(move |x| lookup(&table, x).map_or(f64::NAN, |v| v.1)),
        g_hat: None,
        provenance: format!("plugin({b_col},{p_col})"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Outcome regression `b`.
    B,
    /// Propensity; returned as the functional's `p` (`1/π` for arm means).
    Pi,
}

#[derive(Debug, Clone)]
pub struct SeriesOptions {
    /// Requested basis sizes; each is rounded down to a realizable size.
    pub k_grid: Vec<usize>,
    pub folds: usize,
    pub sigma_floor: f64,
    pub seed: u64,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        Self {
            k_grid: vec![1, 4, 16, 64],
            folds: 5,
            sigma_floor: 0.05,
            seed: 0,
        }
    }
}

/// A fitted series `x ↦ z(x)ᵀ η̂` plus its cross-validation trace.
#[derive(Debug, Clone)]
pub struct SeriesFit {
    pub basis: Basis,
    pub coefficients: DVector<f64>,
    /// `(k, mean held-out squared error)` for every candidate that fit.
    pub cv_scores: Vec<(usize, f64)>,
}

impl SeriesFit {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut sv = SparseVector::default();
        match self.basis.evaluate_sparse(x, &mut sv) {
            Ok(()) => sv.indices.iter().zip(&sv.values).map(|(j, v)| self.coefficients[*j] * v).sum(),
            Err(_) => f64::NAN,
        }
    }
}

/// Least squares on the rows `idx`; `None` when the design is singular.
fn least_squares(basis: &Basis, data: &Dataset, resp: &[f64], idx: &[usize]) -> Result<Option<DVector<f64>>> {
    let d = data.dim();
    let mut pts = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        pts.extend_from_slice(data.point(i));
    }
    let ones = vec![1.0; idx.len()];
    let gram = weighted_outer_sum(basis, &pts, &ones)?;
    let k = basis.size();
    let mut rhs = DVector::zeros(k);
    let mut sv = SparseVector::default();
    for &i in idx {
        basis.evaluate_sparse(data.point(i), &mut sv)?;
        for (j, v) in sv.indices.iter().zip(&sv.values) {
            rhs[*j] += v * resp[i];
        }
    }
    let eig = gram.clone().symmetric_eigenvalues();
    if !(eig.min() > 1e-10 * eig.max().max(f64::MIN_POSITIVE)) {
        return Ok(None);
    }
    Ok(gram.cholesky().map(|ch| ch.solve(&rhs)))
}

fn predict(basis: &Basis, coef: &DVector<f64>, x: &[f64], sv: &mut SparseVector) -> Result<f64> {
    basis.evaluate_sparse(x, sv)?;
    Ok(sv.indices.iter().zip(&sv.values).map(|(j, v)| coef[*j] * v).sum())
}

/// Rows and responses for a regression target under a functional.
fn regression_problem(training: &Dataset, spec: &FunctionalSpec, target: Target) -> (Vec<usize>, Vec<f64>) {
    let n = training.len();
    let treated_arm = spec.g_weight(1.0) == 1.0;
    match (target, spec.id) {
        (Target::B, FunctionalId::ExpectedCondCov) => ((0..n).collect(), training.y.clone()),
        (Target::B, _) => {
            // records whose outcome is observed under this arm
            let active = |i: usize| (training.a[i] == 1.0) == treated_arm;
            ((0..n).filter(|&i| active(i)).collect(), training.y.clone())
        }
        (Target::Pi, _) => {
            let resp = if treated_arm || spec.id == FunctionalId::ExpectedCondCov {
                training.a.clone()
            } else {
                training.a.iter().map(|a| 1.0 - a).collect()
            };
            ((0..n).collect(), resp)
        }
    }
}

/// Series least squares for `target`, size chosen by `folds`-fold CV.
pub fn series_regression(
    training: &Dataset,
    template: &BasisSpec,
    spec: &FunctionalSpec,
    target: Target,
    opts: &SeriesOptions,
) -> Result<SeriesFit> {
    let (rows, resp) = regression_problem(training, spec, target);
    if rows.is_empty() {
        return Err(Error::EmptySample("no training records for the regression target".into()));
    }
    let folds = opts.folds.max(2).min(rows.len());
    let mut candidates: Vec<BasisSpec> = Vec::new();
    for &k in &opts.k_grid {
        let k = k.min(rows.len() / 2).max(1);
        if let Some(s) = BasisSpec::largest_within(template.family, training.dim(), template.order, k) {
            if !candidates.contains(&s) {
                candidates.push(s);
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::Config("no realizable basis size in the nuisance grid".into()));
    }
    // seeded fold assignment
    let mut perm = rows.clone();
    perm.shuffle(&mut ChaCha20Rng::seed_from_u64(opts.seed));
    let fold_of: HashMap<usize, usize> = perm.iter().enumerate().map(|(pos, &i)| (i, pos % folds)).collect();

    let mut scores = Vec::new();
    let mut sv = SparseVector::default();
    'cand: for cand in &candidates {
        let basis = build_basis(cand)?;
        let mut sse = 0.0;
        for f in 0..folds {
            let train_idx: Vec<usize> = rows.iter().copied().filter(|i| fold_of[i] != f).collect();
            let Some(coef) = least_squares(&basis, training, &resp, &train_idx)? else {
                continue 'cand;
            };
            for &i in rows.iter().filter(|i| fold_of[i] == f) {
                let r = resp[i] - predict(&basis, &coef, training.point(i), &mut sv)?;
                sse += r * r;
            }
        }
        scores.push((cand.size(), sse / rows.len() as f64, cand.clone()));
    }
    let best = scores
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .ok_or_else(|| Error::Numerical("every candidate basis gave a singular design".into()))?
        .2
        .clone();
    let basis = build_basis(&best)?;
    let coef = least_squares(&basis, training, &resp, &rows)?
        .ok_or_else(|| Error::Numerical("selected basis is singular on the full training sample".into()))?;
    Ok(SeriesFit {
        basis,
        coefficients: coef,
        cv_scores: scores.into_iter().map(|(k, s, _)| (k, s)).collect(),
    })
}

/// Series fits of both nuisances, with the propensity clipped to
/// `[σ_floor, 1]` before inversion.
pub fn fit_series_nuisances(
    training: &Dataset,
    template: &BasisSpec,
    spec: &FunctionalSpec,
    opts: &SeriesOptions,
) -> Result<NuisanceSet> {
    let b_fit = Arc::new(series_regression(training, template, spec, Target::B, opts)?);
    let pi_opts = SeriesOptions {
        seed: opts.seed.wrapping_add(1),
        ..opts.clone()
    };
    let pi_fit = Arc::new(series_regression(training, template, spec, Target::Pi, &pi_opts)?);
    let floor = opts.sigma_floor;
    let provenance = format!(
        "series({}; k_b={}, k_pi={}, folds={})",
        template.family_name(),
        b_fit.basis.size(),
        pi_fit.basis.size(),
        opts.folds
    );
    let bf = Arc::clone(&b_fit);
    let p_hat: NuisanceFn = if spec.is_inverse_weight() {
        Arc::new(move |x| 1.0 / pi_fit.eval(x).clamp(floor, 1.0))
    } else {
        Arc::new(move |x| pi_fit.eval(x).clamp(0.0, 1.0))
    };
    Ok(NuisanceSet {
        b_hat: Arc::new(move |x| bf.eval(x)),
        p_hat,
        g_hat: None,
        provenance,
    })
}

/// `|h1|`-weighted histogram on the basis's finest cells, floored at
/// `sigma_floor` and rescaled so it integrates to the weighted sample mass.
pub fn density_series(training: &Dataset, basis: &Basis, spec: &FunctionalSpec, sigma_floor: f64) -> Result<NuisanceFn> {
    if training.is_empty() {
        return Err(Error::EmptySample("training sample".into()));
    }
    let d = training.dim();
    if d != basis.dim() {
        return Err(Error::Dimension("basis and data dimensions differ".into()));
    }
    let cells = basis.spec().cells_per_dim();
    let total = cells.pow(d as u32);
    let weights = spec.abs_h1(training);
    let n = training.len() as f64;
    let mass: f64 = weights.iter().sum::<f64>() / n;
    if mass <= 0.0 {
        return Err(Error::EmptySample("all |h1| weights are zero".into()));
    }
    let cell_of = move |x: &[f64]| -> usize {
        x.iter()
            .fold(0, |acc, &t| acc * cells + ((t * cells as f64).floor() as usize).min(cells - 1))
    };
    let vol = 1.0 / total as f64;
    let mut hist = vec![0.0; total];
    for (i, w) in weights.iter().enumerate() {
        hist[cell_of(training.point(i))] += w / (n * vol);
    }
    // water-filling: find s with Σ vol·max(σ, s·h) = mass
    let heights: Vec<f64> = if sigma_floor >= mass {
        vec![mass; total]
    } else {
        let filled = |s: f64| hist.iter().map(|h| vol * sigma_floor.max(s * h)).sum::<f64>();
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if filled(mid) > mass {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hist.iter().map(|h| sigma_floor.max(lo * h)).collect()
    };
    Ok(Arc::new(move |x| heights[cell_of(x)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::{expected_cond_cov_spec, mar_mean_spec};
    use crate::quadrature::QuadratureSpec;
    use rand::Rng;

    fn uniform_data(n: usize, d: usize, seed: u64, pi: f64, b: impl Fn(&[f64]) -> f64) -> Dataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>()).collect();
        let a: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < pi { 1.0 } else { 0.0 }).collect();
        let y: Vec<f64> = (0..n).map(|i| a[i] * b(&x[i * d..(i + 1) * d])).collect();
        Dataset::new(a, y, x, d).unwrap()
    }

    #[test]
    fn constant_outcome_fit_exactly() {
        let ds = uniform_data(200, 1, 1, 0.7, |_| 0.5);
        let opts = SeriesOptions {
            k_grid: vec![1],
            ..Default::default()
        };
        let fit = series_regression(&ds, &BasisSpec::haar(1, 1), &mar_mean_spec(), Target::B, &opts).unwrap();
        for x in [0.0, 0.3, 1.0] {
            assert!((fit.eval(&[x]) - 0.5).abs() < 1e-10);
        }
    }

    #[test]
    fn in_span_noiseless_fit() {
        let f = |x: &[f64]| 0.2 + 0.3 * x[0] - 0.1 * x[1] * x[1];
        let ds = uniform_data(500, 2, 2, 1.0, f);
        let opts = SeriesOptions {
            k_grid: vec![9, 16],
            ..Default::default()
        };
        let fit = series_regression(&ds, &BasisSpec::bspline(2, 2, 3), &mar_mean_spec(), Target::B, &opts).unwrap();
        for x in [[0.1, 0.9], [0.5, 0.5], [1.0, 0.0]] {
            assert!((fit.eval(&x) - f(&x)).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_propensity_gives_inverse_two() {
        let ds = uniform_data(4000, 1, 3, 0.5, |_| 0.5);
        let opts = SeriesOptions {
            k_grid: vec![1, 2, 4],
            ..Default::default()
        };
        let nuis = fit_series_nuisances(&ds, &BasisSpec::haar(1, 1), &mar_mean_spec(), &opts).unwrap();
        for x in [0.1, 0.6] {
            let p = (nuis.p_hat)(&[x]);
            assert!((p - 2.0).abs() < 0.25, "{p}");
            assert!((1.0..=20.0).contains(&p));
        }
    }

    #[test]
    fn cv_choice_is_seeded() {
        let ds = uniform_data(600, 1, 4, 0.8, |x| (x[0] * 6.0).sin() * 0.4 + 0.5);
        let opts = SeriesOptions {
            k_grid: vec![2, 4, 8, 16, 32],
            seed: 9,
            ..Default::default()
        };
        let a = series_regression(&ds, &BasisSpec::haar(1, 1), &mar_mean_spec(), Target::B, &opts).unwrap();
        let b = series_regression(&ds, &BasisSpec::haar(1, 1), &mar_mean_spec(), Target::B, &opts).unwrap();
        assert_eq!(a.cv_scores, b.cv_scores);
        assert!(a.basis.size() > 2);
    }

    #[test]
    fn histogram_density() {
        let ds = uniform_data(20_000, 1, 5, 1.0, |_| 0.0);
        let basis = build_basis(&BasisSpec::haar(1, 8)).unwrap();
        let g = density_series(&ds, &basis, &expected_cond_cov_spec(), 0.05).unwrap();
        let q = QuadratureSpec::midpoint(64).grid(1).unwrap();
        assert!((q.integrate(|x| g(x)) - 1.0).abs() < 1e-12);
        for i in 0..8 {
            assert!((g(&[(i as f64 + 0.5) / 8.0]) - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn density_floor_and_mass() {
        // all mass in the left half, MAR weights
        let ds = Dataset::new(vec![1.0, 1.0, 0.0, 1.0], vec![0.0; 4], vec![0.1, 0.2, 0.3, 0.9], 1).unwrap();
        let basis = build_basis(&BasisSpec::haar(1, 4)).unwrap();
        let g = density_series(&ds, &basis, &mar_mean_spec(), 0.05).unwrap();
        let q = QuadratureSpec::midpoint(64).grid(1).unwrap();
        assert!((q.integrate(|x| g(x)) - 0.75).abs() < 1e-9);
        assert!(g(&[0.6]) >= 0.05);
        let none = Dataset::new(vec![0.0, 0.0], vec![0.0; 2], vec![0.1, 0.2], 1).unwrap();
        assert!(density_series(&none, &basis, &mar_mean_spec(), 0.05).is_err());
    }

    #[test]
    fn zero_set_is_zero() {
        let z = zero_nuisance();
        assert_eq!((z.b_hat)(&[0.3]), 0.0);
        assert_eq!((z.p_hat)(&[0.3]), 0.0);
        assert_eq!(z.provenance, "zero");
    }

    #[test]
    fn plugin_lookup() {
        let mut ds = Dataset::new(vec![1.0, 0.0], vec![1.0, 0.0], vec![0.25, 0.75], 1).unwrap();
        ds.extra.push(("b_hat".into(), vec![0.4, 0.6]));
        ds.extra.push(("p_hat".into(), vec![2.0, 3.0]));
        let nuis = plugin_from_columns(&ds, "b_hat", "p_hat").unwrap();
        assert_eq!((nuis.b_hat)(&[0.75]), 0.6);
        assert!((nuis.p_hat)(&[0.5]).is_nan());
    }
}
