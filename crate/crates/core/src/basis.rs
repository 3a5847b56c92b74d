//! Complete basis families on `[0, 1]^d`: tensor-product Haar wavelets and
//! tensor-product B-splines on a uniform clamped knot grid.
//!
//! Tensor products enumerate the `k = q^d` functions in row-major order over
//! the univariate indices, first coordinate slowest. Univariate B-splines are
//! scaled by `sqrt(q)` so that the Gram matrix under the uniform density has
//! eigenvalues of order one for every `q`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gram;
use crate::quadrature::QuadratureSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Haar,
    BSpline,
}

/// Which family, in how many dimensions, and how many univariate functions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BasisSpec {
    pub family: Family,
    pub dim: usize,
    /// Polynomial degree of the B-spline pieces; ignored for Haar.
    pub order: usize,
    /// Univariate basis size `q`.
    pub per_dim: usize,
}

impl BasisSpec {
    pub fn haar(dim: usize, per_dim: usize) -> Self {
        Self {
            family: Family::Haar,
            dim,
            order: 0,
            per_dim,
        }
    }

    /// Haar basis with scaling function plus wavelet levels `0..=level`
    /// (`q = 2^(level+1)`); `level = -1` is the constant-only basis.
    pub fn haar_level(dim: usize, level: i32) -> Result<Self> {
        if !(-1..=30).contains(&level) {
            return Err(Error::Basis(format!("haar level {level} out of range")));
        }
        Ok(Self::haar(dim, 1usize << (level + 1)))
    }

    pub fn bspline(dim: usize, degree: usize, per_dim: usize) -> Self {
        Self {
            family: Family::BSpline,
            dim,
            order: degree,
            per_dim,
        }
    }

    /// Total size `k = q^d`, or `None` on overflow.
    pub fn size(&self) -> usize {
        self.checked_size().unwrap_or(usize::MAX)
    }

    fn checked_size(&self) -> Option<usize> {
        self.per_dim.checked_pow(self.dim as u32)
    }

    pub fn family_name(&self) -> &'static str {
        match self.family {
            Family::Haar => "haar",
            Family::BSpline => "bspline",
        }
    }

    /// Cells per dimension at the finest resolution of the family.
    pub fn cells_per_dim(&self) -> usize {
        match self.family {
            Family::Haar => self.per_dim,
            Family::BSpline => self.per_dim.saturating_sub(self.order).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Basis("dimension must be at least 1".into()));
        }
        if self.per_dim == 0 {
            return Err(Error::Basis("univariate size must be positive".into()));
        }
        match self.family {
            Family::Haar => {
                if !self.per_dim.is_power_of_two() {
                    return Err(Error::Basis(format!(
                        "haar univariate size {} is not a power of two",
                        self.per_dim
                    )));
                }
            }
            Family::BSpline => {
                if self.per_dim < self.order + 1 {
                    return Err(Error::Basis(format!(
                        "bspline of degree {} needs q >= {}, got {}",
                        self.order,
                        self.order + 1,
                        self.per_dim
                    )));
                }
            }
        }
        if self.checked_size().is_none() {
            return Err(Error::Basis("basis size overflows".into()));
        }
        Ok(())
    }

    /// Largest realizable basis of this family and dimension with at most
    /// `k` functions (per-dimension size rounded down). Returns `None` when
    /// even the smallest member exceeds `k`.
    pub fn largest_within(family: Family, dim: usize, order: usize, k: usize) -> Option<Self> {
        let min_q = match family {
            Family::Haar => 1,
            Family::BSpline => order + 1,
        };
        let mut best = None;
        let mut q = min_q;
        loop {
            let size = match q.checked_pow(dim as u32) {
                Some(s) => s,
                None => break,
            };
            if size > k {
                break;
            }
            best = Some(q);
            q = match family {
                Family::Haar => q * 2,
                Family::BSpline => q + 1,
            };
        }
        best.map(|q| match family {
            Family::Haar => Self::haar(dim, q),
            Family::BSpline => Self::bspline(dim, order, q),
        })
    }
}

impl fmt::Display for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            Family::Haar => {
                let level = self.per_dim.trailing_zeros() as i64 - 1;
                write!(f, "haar:d={},L={}", self.dim, level)
            }
            Family::BSpline => write!(f, "bspline:d={},s={},q={}", self.dim, self.order, self.per_dim),
        }
    }
}

impl FromStr for BasisSpec {
    type Err = Error;

    /// Parses `haar:d=<d>,L=<L>` or `bspline:d=<d>,s=<s>,q=<q>`.
    fn from_str(s: &str) -> Result<Self> {
        let (family, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Basis(format!("preset '{s}' lacks a family prefix")))?;
        let mut d = None;
        let mut level = None;
        let mut degree = None;
        let mut q = None;
        for part in rest.split(',') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Basis(format!("malformed preset field '{part}'")))?;
            let parse_int = |v: &str| {
                v.trim()
                    .parse::<i64>()
                    .map_err(|_| Error::Basis(format!("preset field '{part}' is not an integer")))
            };
            match key.trim() {
                "d" => d = Some(parse_int(value)?),
                "L" => level = Some(parse_int(value)?),
                "s" => degree = Some(parse_int(value)?),
                "q" => q = Some(parse_int(value)?),
                other => return Err(Error::Basis(format!("unknown preset field '{other}'"))),
            }
        }
        let d = d.ok_or_else(|| Error::Basis("preset needs d=<dimension>".into()))?;
        if d < 1 {
            return Err(Error::Basis("dimension must be at least 1".into()));
        }
        let spec = match family.trim() {
            "haar" => {
                let level = level.ok_or_else(|| Error::Basis("haar preset needs L=<level>".into()))?;
                BasisSpec::haar_level(d as usize, level as i32)?
            }
            "bspline" => {
                let degree = degree.ok_or_else(|| Error::Basis("bspline preset needs s=<order>".into()))?;
                let q = q.ok_or_else(|| Error::Basis("bspline preset needs q=<size>".into()))?;
                if degree < 0 || q < 1 {
                    return Err(Error::Basis("bspline order and size must be non-negative".into()));
                }
                BasisSpec::bspline(d as usize, degree as usize, q as usize)
            }
            other => return Err(Error::Basis(format!("unknown basis family '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Construction knobs.
#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    /// Points per dimension of the locality certification grid.
    pub certification_grid: usize,
    /// Upper bound on the bytes of a dense `k × k` Gram matrix.
    pub memory_cap_bytes: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            certification_grid: 512,
            memory_cap_bytes: 1 << 30,
        }
    }
}

/// An evaluable basis with its certified locality constant
/// (`sup_x |z(x)|^2 <= B_loc · k` on the certification grid).
#[derive(Debug, Clone)]
pub struct Basis {
    spec: BasisSpec,
    locality_constant: f64,
    knots: Vec<f64>,
    scale: f64,
}

/// Nonzero entries of a basis vector.
#[derive(Debug, Clone, Default)]
pub struct SparseVector {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn build_basis(spec: &BasisSpec) -> Result<Basis> {
    build_basis_with(spec, &BuildOptions::default())
}

pub fn build_basis_with(spec: &BasisSpec, opts: &BuildOptions) -> Result<Basis> {
    spec.validate()?;
    let k = spec.size();
    let gram_bytes = k.checked_mul(k).and_then(|v| v.checked_mul(8));
    let table_bytes = opts.certification_grid.checked_mul(spec.per_dim).and_then(|v| v.checked_mul(8));
    match (gram_bytes, table_bytes) {
        (Some(g), Some(t)) if g <= opts.memory_cap_bytes && t <= opts.memory_cap_bytes => {}
        _ => {
            return Err(Error::Basis(format!(
                "basis of size {k} exceeds the memory cap of {} bytes",
                opts.memory_cap_bytes
            )))
        }
    }
    let knots = match spec.family {
        Family::Haar => Vec::new(),
        Family::BSpline => clamped_uniform_knots(spec.order, spec.per_dim),
    };
    let mut basis = Basis {
        spec: spec.clone(),
        locality_constant: f64::NAN,
        knots,
        scale: (spec.per_dim as f64).sqrt(),
    };
    basis.locality_constant = basis.certify_locality(opts.certification_grid.max(2));
    Ok(basis)
}

fn clamped_uniform_knots(degree: usize, q: usize) -> Vec<f64> {
    let intervals = q - degree;
    let mut knots = Vec::with_capacity(q + degree + 1);
    knots.extend(std::iter::repeat(0.0).take(degree + 1));
    for i in 1..intervals {
        knots.push(i as f64 / intervals as f64);
    }
    knots.extend(std::iter::repeat(1.0).take(degree + 1));
    knots
}

/// Values of the `q` unnormalized B-splines of the given degree at `t`.
/// They form a partition of unity on `[0, 1]`.
pub fn bspline_unnormalized(degree: usize, q: usize, t: f64) -> Result<Vec<f64>> {
    let spec = BasisSpec::bspline(1, degree, q);
    spec.validate()?;
    check_coordinate(0, t)?;
    let knots = clamped_uniform_knots(degree, q);
    let mut out = vec![0.0; q];
    let (first, vals) = bspline_nonzero(&knots, degree, q, t);
    for (i, v) in vals.into_iter().enumerate() {
        out[first + i] = v;
    }
    Ok(out)
}

/// Cox-de Boor evaluation of the `degree + 1` nonzero B-splines at `t`;
/// returns the index of the first one and their values.
fn bspline_nonzero(knots: &[f64], degree: usize, q: usize, t: f64) -> (usize, Vec<f64>) {
    let intervals = q - degree;
    let cell = ((t * intervals as f64).floor() as usize).min(intervals - 1);
    let span = cell + degree;
    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    (span - degree, n)
}

fn check_coordinate(index: usize, value: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::OutOfDomain { index, value });
    }
    Ok(())
}

impl Basis {
    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn size(&self) -> usize {
        self.spec.size()
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn locality_constant(&self) -> f64 {
        self.locality_constant
    }

    /// Nonzero normalized univariate values at `t` (assumed in `[0, 1]`).
    fn univariate_sparse(&self, t: f64, out: &mut SparseVector) {
        out.indices.clear();
        out.values.clear();
        let q = self.spec.per_dim;
        match self.spec.family {
            Family::Haar => {
                out.indices.push(0);
                out.values.push(1.0);
                let mut scale = 1usize;
                while scale < q {
                    let pos = t * scale as f64;
                    let shift = (pos.floor() as usize).min(scale - 1);
                    let u = pos - shift as f64;
                    let amp = (scale as f64).sqrt();
                    out.indices.push(scale + shift);
                    out.values.push(if u < 0.5 { amp } else { -amp });
                    scale *= 2;
                }
            }
            Family::BSpline => {
                let (first, vals) = bspline_nonzero(&self.knots, self.spec.order, q, t);
                for (i, v) in vals.into_iter().enumerate() {
                    if v != 0.0 {
                        out.indices.push(first + i);
                        out.values.push(v * self.scale);
                    }
                }
            }
        }
    }

    /// Dense normalized univariate values at `t`.
    pub fn univariate(&self, t: f64) -> Result<Vec<f64>> {
        check_coordinate(0, t)?;
        let mut sv = SparseVector::default();
        self.univariate_sparse(t, &mut sv);
        let mut out = vec![0.0; self.spec.per_dim];
        for (i, v) in sv.indices.iter().zip(&sv.values) {
            out[*i] = *v;
        }
        Ok(out)
    }

    /// Nonzero entries of `z(x)`, indices increasing.
    pub fn evaluate_sparse(&self, x: &[f64], out: &mut SparseVector) -> Result<()> {
        if x.len() != self.spec.dim {
            return Err(Error::Dimension(format!(
                "point has {} coordinates, basis expects {}",
                x.len(),
                self.spec.dim
            )));
        }
        for (i, &v) in x.iter().enumerate() {
            check_coordinate(i, v)?;
        }
        let q = self.spec.per_dim;
        out.indices.clear();
        out.values.clear();
        out.indices.push(0);
        out.values.push(1.0);
        let mut uni = SparseVector::default();
        let mut next = SparseVector::default();
        for &t in x {
            self.univariate_sparse(t, &mut uni);
            next.indices.clear();
            next.values.clear();
            for (pi, pv) in out.indices.iter().zip(&out.values) {
                for (ui, uv) in uni.indices.iter().zip(&uni.values) {
                    next.indices.push(pi * q + ui);
                    next.values.push(pv * uv);
                }
            }
            std::mem::swap(out, &mut next);
        }
        // Haar univariate indices are not sorted; restore order.
        if self.spec.family == Family::Haar && self.spec.dim > 1 {
            let mut pairs: Vec<(usize, f64)> = out.indices.iter().copied().zip(out.values.iter().copied()).collect();
            pairs.sort_unstable_by_key(|p| p.0);
            out.indices = pairs.iter().map(|p| p.0).collect();
            out.values = pairs.iter().map(|p| p.1).collect();
        }
        Ok(())
    }

    /// Writes `z(x)` into `out` (length `k`).
    pub fn evaluate_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if out.len() != self.size() {
            return Err(Error::Dimension(format!(
                "output buffer has length {}, basis size is {}",
                out.len(),
                self.size()
            )));
        }
        let mut sv = SparseVector::default();
        self.evaluate_sparse(x, &mut sv)?;
        out.fill(0.0);
        for (i, v) in sv.indices.iter().zip(&sv.values) {
            out[*i] = *v;
        }
        Ok(())
    }

    /// `z(x) = (z_1(x), ..., z_k(x))`.
    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.size()];
        self.evaluate_into(x, &mut out)?;
        Ok(out)
    }

    /// Basis evaluations at every row of a row-major `n × d` point array.
    pub fn design_matrix(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.spec.dim;
        let n = points.len() / d;
        let k = self.size();
        let mut z = DMatrix::zeros(n, k);
        let mut sv = SparseVector::default();
        for i in 0..n {
            self.evaluate_sparse(&points[i * d..(i + 1) * d], &mut sv)?;
            for (j, v) in sv.indices.iter().zip(&sv.values) {
                z[(i, *j)] = *v;
            }
        }
        Ok(z)
    }

    /// `(sup_grid sum_i u_i(t)^2 / q)^d`. On a tensor grid the supremum of
    /// a product of non-negative factors is the product of the suprema.
    fn certify_locality(&self, grid: usize) -> f64 {
        let q = self.spec.per_dim as f64;
        let mut sv = SparseVector::default();
        let mut sup: f64 = 0.0;
        for i in 0..grid {
            let t = i as f64 / (grid - 1) as f64;
            self.univariate_sparse(t, &mut sv);
            let s: f64 = sv.values.iter().map(|v| v * v).sum();
            sup = sup.max(s);
        }
        (sup / q).powi(self.spec.dim as i32)
    }
}

/// `min_c ∫ (f - c·z)^2 dx` under the uniform density, computed by solving
/// the quadrature normal equations and integrating the squared residual.
pub fn l2_approximation_error<F>(basis: &Basis, f: F, quad: &QuadratureSpec) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    quad.require_resolution(basis.spec().cells_per_dim())?;
    let grid = quad.grid(basis.dim())?;
    let gram = gram::quadrature_gram_on(basis, &|_| 1.0, &grid)?;
    let rhs = gram::weighted_moment_on(basis, &|_| 1.0, &f, &grid)?;
    let coef = solve_spd(gram.entries(), &rhs)?;
    let mut acc = crate::numeric::CompensatedSum::new();
    let mut sv = SparseVector::default();
    for i in 0..grid.len() {
        let x = grid.point(i);
        basis.evaluate_sparse(x, &mut sv)?;
        let fit: f64 = sv.indices.iter().zip(&sv.values).map(|(j, v)| coef[*j] * v).sum();
        let r = f(x) - fit;
        acc.add(grid.weights[i] * r * r);
    }
    Ok(acc.value().max(0.0))
}

/// Solves `A c = b` for symmetric positive semi-definite `A`, falling back
/// to a pseudo-inverse when Cholesky fails.
pub(crate) fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    let svd = a.clone().svd(true, true);
    svd.solve(b, 1e-12 * svd.singular_values.max())
        .map_err(|e| Error::Numerical(e.to_string()))
}
