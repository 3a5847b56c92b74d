//! Weighted Gram matrices `∫ z zᵀ g` and `n⁻¹ Σ |h1| z zᵀ`, their checked
//! inverses, the `L2(g)` projection onto the basis span, and the two bias
//! terms (truncation and estimation) used as simulation oracles.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::{Basis, SparseVector};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::functionals::FunctionalSpec;
use crate::numeric::{tree_reduce, CompensatedSum};
use crate::quadrature::{QuadGrid, QuadratureSpec};

/// Records per parallel chunk. Fixed so the reduction tree, and therefore
/// every bit of the result, does not depend on the thread count.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramSource {
    Empirical,
    Quadrature,
}

impl GramSource {
    fn tag(self) -> u32 {
        match self {
            GramSource::Empirical => 1,
            GramSource::Quadrature => 2,
        }
    }

    fn from_tag(t: u32) -> Result<Self> {
        match t {
            1 => Ok(GramSource::Empirical),
            2 => Ok(GramSource::Quadrature),
            _ => Err(Error::Data(format!("unknown gram source tag {t}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
    pub source: GramSource,
    pub n_used: usize,
    pub eig_min: f64,
    pub eig_max: f64,
}

impl GramMatrix {
    /// Wraps a symmetric matrix and fills in its extreme eigenvalues.
    pub fn new(entries: DMatrix<f64>, source: GramSource, n_used: usize) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return Err(Error::Dimension("gram matrix must be square and nonempty".into()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gram matrix".into()));
        }
        let scale = entries.amax().max(1.0);
        let asym = (&entries - entries.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::Numerical(format!("gram matrix asymmetric by {asym:e}")));
        }
        let entries = (&entries + entries.transpose()) * 0.5;
        let eig = entries.clone().symmetric_eigenvalues();
        Ok(Self {
            eig_min: eig.min(),
            eig_max: eig.max(),
            entries,
            source,
            n_used,
        })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn k(&self) -> usize {
        self.entries.nrows()
    }

    /// Writes the 16-byte header (magic, source tag, k) then the entries
    /// as little-endian f64 in row-major order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(GRAM_MAGIC)?;
        w.write_all(&self.source.tag().to_le_bytes())?;
        w.write_all(&(self.k() as u64).to_le_bytes())?;
        for i in 0..self.k() {
            for j in 0..self.k() {
                w.write_all(&self.entries[(i, j)].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[0..4] != GRAM_MAGIC {
            return Err(Error::Data("not a gram matrix file (bad magic)".into()));
        }
        let source = GramSource::from_tag(u32::from_le_bytes(header[4..8].try_into().unwrap()))?;
        let k = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        if k == 0 || k > 1 << 16 {
            return Err(Error::Data(format!("implausible gram size {k}")));
        }
        let mut buf = vec![0u8; k * k * 8];
        r.read_exact(&mut buf)?;
        let vals: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        GramMatrix::new(DMatrix::from_row_slice(k, k, &vals), source, 0)
    }
}

const GRAM_MAGIC: &[u8; 4] = b"HGRM";

/// Accumulates `Σ w_i z(x_i) z(x_i)ᵀ` over a chunk, touching only nonzeros.
fn accumulate_chunk<'a>(basis: &Basis, points: impl Iterator<Item = (&'a [f64], f64)>) -> Result<DMatrix<f64>> {
    let k = basis.size();
    let mut acc = DMatrix::zeros(k, k);
    let mut sv = SparseVector::default();
    for (x, w) in points {
        if w == 0.0 {
            continue;
        }
        basis.evaluate_sparse(x, &mut sv)?;
        for (a, &ia) in sv.indices.iter().enumerate() {
            let va = w * sv.values[a];
            for (b, &ib) in sv.indices.iter().enumerate().skip(a) {
                acc[(ia, ib)] += va * sv.values[b];
            }
        }
    }
    // mirror the upper triangle
    for i in 0..k {
        for j in 0..i {
            acc[(i, j)] = acc[(j, i)];
        }
    }
    Ok(acc)
}

/// `Σ_i w_i z(x_i) z(x_i)ᵀ` for row-major points, in parallel chunks.
pub fn weighted_outer_sum(basis: &Basis, points: &[f64], weights: &[f64]) -> Result<DMatrix<f64>> {
    let d = basis.dim();
    if points.len() != weights.len() * d {
        return Err(Error::Dimension("points and weights disagree".into()));
    }
    let n = weights.len();
    let parts: Vec<DMatrix<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            accumulate_chunk(basis, (lo..hi).map(|i| (&points[i * d..(i + 1) * d], weights[i])))
        })
        .collect::<Result<_>>()?;
    Ok(tree_reduce(parts, |a, b| a + b).unwrap_or_else(|| DMatrix::zeros(basis.size(), basis.size())))
}

/// `Ω̂ = n_tr⁻¹ Σ |h1(W_i)| z(X_i) z(X_i)ᵀ` over the training sample.
pub fn empirical_gram(basis: &Basis, training: &Dataset, spec: &FunctionalSpec) -> Result<GramMatrix> {
    let weights = spec.abs_h1(training);
    empirical_gram_weighted(basis, &training.x, &weights)
}

pub fn empirical_gram_weighted(basis: &Basis, points: &[f64], weights: &[f64]) -> Result<GramMatrix> {
    if weights.is_empty() {
        return Err(Error::EmptySample("training sample".into()));
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("gram weight at record {i}")));
    }
    let n = weights.len();
    let sum = weighted_outer_sum(basis, points, weights)?;
    GramMatrix::new(sum / n as f64, GramSource::Empirical, n)
}

/// `Ω = ∫ z zᵀ g` by tensor quadrature.
pub fn quadrature_gram<G>(basis: &Basis, g: &G, quad: &QuadratureSpec) -> Result<GramMatrix>
where
    G: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    quad.require_resolution(basis.spec().cells_per_dim())?;
    let grid = quad.grid(basis.dim())?;
    quadrature_gram_on(basis, g, &grid)
}

pub(crate) fn quadrature_gram_on<G>(basis: &Basis, g: &G, grid: &QuadGrid) -> Result<GramMatrix>
where
    G: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    let weights = grid_weights(g, grid)?;
    let sum = weighted_outer_sum(basis, &grid.points, &weights)?;
    GramMatrix::new(sum, GramSource::Quadrature, grid.len())
}

fn grid_weights<G>(g: &G, grid: &QuadGrid) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    (0..grid.len())
        .map(|i| {
            let v = g(grid.point(i));
            if !v.is_finite() || v < 0.0 {
                Err(Error::Numerical(format!("density value {v} at quadrature node {i}")))
            } else {
                Ok(v * grid.weights[i])
            }
        })
        .collect()
}

/// `∫ g h z` by quadrature.
pub(crate) fn weighted_moment_on<G, H>(basis: &Basis, g: &G, h: &H, grid: &QuadGrid) -> Result<DVector<f64>>
where
    G: Fn(&[f64]) -> f64 + Sync + ?Sized,
    H: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    let k = basis.size();
    let n = grid.len();
    let parts: Vec<Vec<CompensatedSum>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![CompensatedSum::new(); k];
            let mut sv = SparseVector::default();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let x = grid.point(i);
                let w = grid.weights[i] * g(x) * h(x);
                if w == 0.0 {
                    continue;
                }
                basis.evaluate_sparse(x, &mut sv)?;
                for (j, v) in sv.indices.iter().zip(&sv.values) {
                    acc[*j].add(w * v);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut out = DVector::zeros(k);
    for part in parts {
        for (j, s) in part.into_iter().enumerate() {
            out[j] += s.value();
        }
    }
    Ok(out)
}

/// Outcome of a checked inversion. Non-invertibility is a value, consumed
/// by the estimator's zero convention.
#[derive(Debug, Clone)]
pub struct InverseReport {
    pub inverse: Option<DMatrix<f64>>,
    pub invertible: bool,
    pub condition_number: f64,
    pub eig_min: f64,
    pub eig_max: f64,
    pub op_distance_to_reference: Option<f64>,
}

/// Inverts when `eig_min > eigen_floor · eig_max`.
pub fn invert_checked(m: &GramMatrix, eigen_floor: f64) -> InverseReport {
    let (lo, hi) = (m.eig_min, m.eig_max);
    let condition_number = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    let mut report = InverseReport {
        inverse: None,
        invertible: false,
        condition_number,
        eig_min: lo,
        eig_max: hi,
        op_distance_to_reference: None,
    };
    if !(hi > 0.0 && lo > eigen_floor * hi) {
        return report;
    }
    let inv = match m.entries.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => {
            let eig = m.entries.clone().symmetric_eigen();
            let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
            &eig.eigenvectors * d * eig.eigenvectors.transpose()
        }
    };
    let inv = (&inv + inv.transpose()) * 0.5;
    let k = m.k();
    let resid = (m.entries() * &inv - DMatrix::<f64>::identity(k, k)).amax();
    if !resid.is_finite() || resid >= 1e-8 {
        return report;
    }
    report.inverse = Some(inv);
    report.invertible = true;
    report
}

/// Largest absolute eigenvalue of `A - B`.
pub fn op_norm_distance(a: &GramMatrix, b: &GramMatrix) -> Result<f64> {
    op_norm_sym(a.entries(), b.entries())
}

pub fn op_norm_sym(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    let diff = a - b;
    let diff = (&diff + diff.transpose()) * 0.5;
    Ok(diff.symmetric_eigenvalues().amax())
}

/// `Π_{g,k}[h](x) = z(x)ᵀ c` with `c = Ω⁻¹ ∫ g h z`.
#[derive(Debug, Clone)]
pub struct Projection {
    basis: Basis,
    pub coefficients: DVector<f64>,
}

impl Projection {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let mut sv = SparseVector::default();
        self.basis.evaluate_sparse(x, &mut sv)?;
        Ok(sv.indices.iter().zip(&sv.values).map(|(j, v)| self.coefficients[*j] * v).sum())
    }
}

pub fn project<G, H>(basis: &Basis, m_inv: &DMatrix<f64>, g: &G, h: &H, quad: &QuadratureSpec) -> Result<Projection>
where
    G: Fn(&[f64]) -> f64 + Sync + ?Sized,
    H: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    if m_inv.shape() != (basis.size(), basis.size()) {
        return Err(Error::Dimension("inverse gram does not match the basis".into()));
    }
    quad.require_resolution(basis.spec().cells_per_dim())?;
    let grid = quad.grid(basis.dim())?;
    let moment = weighted_moment_on(basis, g, h, &grid)?;
    Ok(Projection {
        basis: basis.clone(),
        coefficients: m_inv * moment,
    })
}

/// Quadrature inputs shared by the bias oracles.
struct BiasParts {
    omega: DMatrix<f64>,
    omega_inv: DMatrix<f64>,
    /// `∫ g δp z`
    a: DVector<f64>,
    /// `∫ g δb z`
    c: DVector<f64>,
    /// `∫ g (I-Π)δb (I-Π)δp`
    tb: f64,
}

fn bias_parts<G, B, P>(basis: &Basis, g: &G, b_err: &B, p_err: &P, quad: &QuadratureSpec) -> Result<BiasParts>
where
    G: Fn(&[f64]) -> f64 + Sync + ?Sized,
    B: Fn(&[f64]) -> f64 + Sync + ?Sized,
    P: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    quad.require_resolution(basis.spec().cells_per_dim())?;
    let grid = quad.grid(basis.dim())?;
    let omega = quadrature_gram_on(basis, g, &grid)?;
    let inv = invert_checked(&omega, 1e-13)
        .inverse
        .ok_or_else(|| Error::Numerical("population gram is singular".into()))?;
    let a = weighted_moment_on(basis, g, p_err, &grid)?;
    let c = weighted_moment_on(basis, g, b_err, &grid)?;
    let cb = &inv * &c;
    let cp = &inv * &a;
    let mut acc = CompensatedSum::new();
    let mut sv = SparseVector::default();
    for i in 0..grid.len() {
        let x = grid.point(i);
        let w = grid.weights[i] * g(x);
        if w == 0.0 {
            continue;
        }
        basis.evaluate_sparse(x, &mut sv)?;
        let (mut fb, mut fp) = (0.0, 0.0);
        for (j, v) in sv.indices.iter().zip(&sv.values) {
            fb += cb[*j] * v;
            fp += cp[*j] * v;
        }
        acc.add(w * (b_err(x) - fb) * (p_err(x) - fp));
    }
    Ok(BiasParts {
        omega: omega.entries().clone(),
        omega_inv: inv,
        a,
        c,
        tb: acc.value(),
    })
}

/// `TB_k = σ ∫ g (I-Π)[b-b̂] (I-Π)[p-p̂]`.
pub fn truncation_bias<G, B, P>(
    basis: &Basis,
    g: &G,
    b_err: &B,
    p_err: &P,
    quad: &QuadratureSpec,
    sign: f64,
) -> Result<f64>
where
    G: Fn(&[f64]) -> f64 + Sync + ?Sized,
    B: Fn(&[f64]) -> f64 + Sync + ?Sized,
    P: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    Ok(sign * bias_parts(basis, g, b_err, p_err, quad)?.tb)
}

/// Conditional-on-training bias decomposition of `ψ̂_{m,k}(Ω̂)` for a fixed
/// `Ω̂` and fixed nuisance errors.
#[derive(Debug, Clone)]
pub struct BiasOracle {
    /// Truncation bias, signed.
    pub truncation: f64,
    /// Bias of the first-order estimator, `σ ∫ g δb δp`.
    pub first_order: f64,
    /// `E[ÎF_jj]` for `j = 2..=m_max` (index 0 is order 2).
    pub per_order_mean: Vec<f64>,
    /// Estimation bias `EB_m` for `m = 1..=m_max` (index 0 is order 1).
    pub estimation: Vec<f64>,
    /// `‖Ω̂ - Ω‖_op`.
    pub op_distance: f64,
}

impl BiasOracle {
    /// Total bias of `ψ̂_{m,k}`.
    pub fn total(&self, m: usize) -> f64 {
        self.truncation + self.estimation[m - 1]
    }
}

/// With `Δ = Ω - Ω̂`, `W = Ω̂⁻¹`: `E[ÎF_jj] = (-1)^{j-1} σ aᵀ W (ΔW)^{j-2} c`
/// and `EB_m = (-1)^{m-1} σ aᵀ Ω⁻¹ (ΔW)^{m-1} c`.
#[allow(clippy::too_many_arguments)]
pub fn estimation_bias<G, B, P>(
    basis: &Basis,
    g: &G,
    b_err: &B,
    p_err: &P,
    omega_hat_inv: &DMatrix<f64>,
    omega_hat: &DMatrix<f64>,
    quad: &QuadratureSpec,
    sign: f64,
    m_max: usize,
) -> Result<BiasOracle>
where
    G: Fn(&[f64]) -> f64 + Sync + ?Sized,
    B: Fn(&[f64]) -> f64 + Sync + ?Sized,
    P: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    let parts = bias_parts(basis, g, b_err, p_err, quad)?;
    let delta = &parts.omega - omega_hat;
    let dw = &delta * omega_hat_inv;
    let mut estimation = Vec::with_capacity(m_max);
    let mut per_order_mean = Vec::new();
    // v = (ΔW)^{j} c
    let mut v = parts.c.clone();
    let mut alt = 1.0;
    for _ in 1..=m_max {
        estimation.push(alt * sign * parts.a.dot(&(&parts.omega_inv * &v)));
        alt = -alt;
        v = &dw * v;
    }
    let mut v = parts.c.clone();
    for j in 2..=m_max.max(1) {
        let s = if j % 2 == 0 { -1.0 } else { 1.0 };
        per_order_mean.push(s * sign * parts.a.dot(&(omega_hat_inv * &v)));
        v = &dw * v;
    }
    let first_order = sign * (parts.tb + parts.a.dot(&(&parts.omega_inv * &parts.c)));
    Ok(BiasOracle {
        truncation: sign * parts.tb,
        first_order,
        per_order_mean,
        estimation,
        op_distance: op_norm_sym(&parts.omega, omega_hat)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_basis, BasisSpec};
    use crate::functionals::mar_mean_spec;

    fn haar(d: usize, q: usize) -> Basis {
        build_basis(&BasisSpec::haar(d, q)).unwrap()
    }

    #[test]
    fn constant_basis_unit_weights() {
        let b = haar(1, 1);
        let g = empirical_gram_weighted(&b, &[0.1, 0.5, 0.9], &[1.0, 1.0, 1.0]).unwrap();
        assert!((g.entries()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mar_weights_average_indicator() {
        let b = haar(1, 1);
        let ds = Dataset::new(vec![1.0, 0.0, 1.0, 1.0], vec![1.0, 0.0, 0.0, 1.0], vec![0.1, 0.2, 0.3, 0.4], 1).unwrap();
        let g = empirical_gram(&b, &ds, &mar_mean_spec()).unwrap();
        assert_eq!(g.entries()[(0, 0)], 0.75);
    }

    #[test]
    fn two_point_outer_products() {
        let b = haar(1, 2);
        let g = empirical_gram_weighted(&b, &[0.25, 0.75], &[1.0, 1.0]).unwrap();
        // z(0.25) = (1, 1), z(0.75) = (1, -1)
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!((g.entries() - expect).amax() < 1e-15);
    }

    #[test]
    fn haar_uniform_is_identity() {
        let b = haar(2, 4);
        let g = quadrature_gram(&b, &|_: &[f64]| 1.0, &QuadratureSpec::midpoint(64)).unwrap();
        assert!((g.entries() - DMatrix::<f64>::identity(16, 16)).amax() < 1e-10);
    }

    #[test]
    fn linear_density_haar_two() {
        // g = 2x: ∫ g = 1, ∫ g ψ = ∫_0^.5 2x - ∫_.5^1 2x = 0.25 - 0.75 = -0.5
        let b = haar(1, 2);
        let g = quadrature_gram(&b, &|x: &[f64]| 2.0 * x[0], &QuadratureSpec::midpoint(256)).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 1.0]);
        assert!((g.entries() - expect).amax() < 1e-12);
        let one = quadrature_gram(&haar(1, 1), &|x: &[f64]| 2.0 * x[0], &QuadratureSpec::midpoint(16)).unwrap();
        assert!((one.entries()[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn coarse_quadrature_rejected() {
        let b = haar(1, 16);
        assert!(quadrature_gram(&b, &|_: &[f64]| 1.0, &QuadratureSpec::midpoint(8)).is_err());
    }

    #[test]
    fn inversion_verdicts() {
        let id = GramMatrix::new(DMatrix::identity(3, 3), GramSource::Quadrature, 0).unwrap();
        let r = invert_checked(&id, 1e-8);
        assert!(r.invertible);
        assert_eq!(r.condition_number, 1.0);
        assert!((r.inverse.unwrap() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-15);
        let sing = GramMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-12])), GramSource::Quadrature, 0).unwrap();
        assert!(!invert_checked(&sing, 1e-8).invertible);
    }

    #[test]
    fn op_distance_examples() {
        let a = GramMatrix::new(DMatrix::identity(3, 3), GramSource::Quadrature, 0).unwrap();
        let b = GramMatrix::new(DMatrix::identity(3, 3) * 2.0, GramSource::Quadrature, 0).unwrap();
        assert_eq!(op_norm_distance(&a, &a).unwrap(), 0.0);
        assert!((op_norm_distance(&a, &b).unwrap() - 1.0).abs() < 1e-14);
        let c = GramMatrix::new(DMatrix::identity(2, 2), GramSource::Quadrature, 0).unwrap();
        assert!(op_norm_distance(&a, &c).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let b = haar(1, 4);
        let g = quadrature_gram(&b, &|x: &[f64]| 0.5 + x[0], &QuadratureSpec::midpoint(64)).unwrap();
        let mut buf = Vec::new();
        g.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 16 * 8);
        let back = GramMatrix::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back.entries(), g.entries());
        assert_eq!(back.source, GramSource::Quadrature);
        buf[0] = b'X';
        assert!(GramMatrix::read_binary(buf.as_slice()).is_err());
    }

    #[test]
    fn projection_reproduces_span_and_is_idempotent() {
        let b = haar(1, 4);
        let quad = QuadratureSpec::midpoint(64);
        let g = |x: &[f64]| 0.5 + x[0];
        let inv = invert_checked(&quadrature_gram(&b, &g, &quad).unwrap(), 1e-8).inverse.unwrap();
        let h = |x: &[f64]| (5.0 * x[0]).sin();
        let p1 = project(&b, &inv, &g, &h, &quad).unwrap();
        let p2 = project(&b, &inv, &g, &|x: &[f64]| p1.eval(x).unwrap(), &quad).unwrap();
        assert!((&p1.coefficients - &p2.coefficients).amax() < 1e-10);
    }

    #[test]
    fn truncation_bias_vanishes_in_span() {
        let b = haar(1, 4);
        let quad = QuadratureSpec::midpoint(64);
        let g = |x: &[f64]| 0.5 + x[0];
        let in_span = |x: &[f64]| if x[0] < 0.25 { 0.3 } else { -0.1 };
        let tb = truncation_bias(&b, &g, &in_span, &|x: &[f64]| x[0] * x[0], &quad, -1.0).unwrap();
        assert!(tb.abs() < 1e-12);
        let tb = truncation_bias(&b, &g, &|x: &[f64]| x[0], &|_: &[f64]| 0.0, &quad, 1.0).unwrap();
        assert_eq!(tb, 0.0);
    }

    #[test]
    fn estimation_bias_identities() {
        let b = haar(1, 4);
        let quad = QuadratureSpec::midpoint(64);
        let g = |x: &[f64]| 0.5 + x[0];
        let omega = quadrature_gram(&b, &g, &quad).unwrap();
        let perturbed = omega.entries() * 1.1;
        let w = perturbed.clone().try_inverse().unwrap();
        let be = |x: &[f64]| (3.0 * x[0]).cos();
        let pe = |x: &[f64]| x[0] - 0.4;
        let o = estimation_bias(&b, &g, &be, &pe, &w, &perturbed, &quad, -1.0, 4).unwrap();
        // first-order bias plus the expected corrections equals TB + EB_m
        let mut run = o.first_order;
        for m in 2..=4 {
            run += o.per_order_mean[m - 2];
            assert!((run - o.total(m)).abs() < 1e-12, "m = {m}");
        }
        // with Ω̂ = Ω every estimation bias beyond order one vanishes
        let exact = estimation_bias(&b, &g, &be, &pe, &omega.entries().clone().try_inverse().unwrap(), omega.entries(), &quad, -1.0, 3).unwrap();
        assert!(exact.estimation[1].abs() < 1e-12);
        assert!(exact.op_distance < 1e-12);
    }
}
