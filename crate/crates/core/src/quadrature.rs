//! Tensor-product quadrature on the unit cube.
//!
//! Two rules are provided. The midpoint rule is exact for piecewise-constant
//! integrands whose cells align with the grid, which is what the Haar Gram
//! computations need. Composite Gauss-Legendre is used for simulation truths
//! where smooth integrands must be resolved far below test tolerances.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rule {
    Midpoint,
    /// Composite Gauss-Legendre with the given number of points per panel.
    GaussLegendre(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    /// Panels per dimension (for the midpoint rule, panels = nodes).
    pub panels_per_dim: usize,
    pub rule: Rule,
}

impl QuadratureSpec {
    pub fn midpoint(nodes_per_dim: usize) -> Self {
        Self {
            panels_per_dim: nodes_per_dim,
            rule: Rule::Midpoint,
        }
    }

    pub fn gauss_legendre(panels_per_dim: usize, points: usize) -> Self {
        Self {
            panels_per_dim,
            rule: Rule::GaussLegendre(points),
        }
    }

    /// 256 midpoint nodes per dimension for `d <= 2`, 64 for `d = 3` and above.
    pub fn default_for_dim(d: usize) -> Self {
        if d <= 2 {
            Self::midpoint(256)
        } else {
            Self::midpoint(64)
        }
    }

    pub fn nodes_per_dim(&self) -> usize {
        match self.rule {
            Rule::Midpoint => self.panels_per_dim,
            Rule::GaussLegendre(p) => self.panels_per_dim * p,
        }
    }

    /// Same rule with twice the panels.
    pub fn refined(&self) -> Self {
        Self {
            panels_per_dim: self.panels_per_dim * 2,
            ..*self
        }
    }

    /// Rejects grids that cannot resolve `cells` per dimension.
    pub fn require_resolution(&self, cells: usize) -> Result<()> {
        if self.panels_per_dim < cells {
            return Err(Error::QuadratureTooCoarse {
                nodes: self.nodes_per_dim(),
                required: cells,
            });
        }
        Ok(())
    }

    /// One-dimensional nodes and weights on [0, 1].
    pub fn nodes_1d(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.panels_per_dim == 0 {
            return Err(Error::Config("quadrature needs at least one panel".into()));
        }
        let h = 1.0 / self.panels_per_dim as f64;
        match self.rule {
            Rule::Midpoint => {
                let nodes = (0..self.panels_per_dim)
                    .map(|i| (i as f64 + 0.5) * h)
                    .collect();
                Ok((nodes, vec![h; self.panels_per_dim]))
            }
            Rule::GaussLegendre(p) => {
                if p == 0 {
                    return Err(Error::Config("Gauss-Legendre needs at least one point".into()));
                }
                let (xs, ws) = gauss_legendre(p);
                let mut nodes = Vec::with_capacity(self.panels_per_dim * p);
                let mut weights = Vec::with_capacity(self.panels_per_dim * p);
                for panel in 0..self.panels_per_dim {
                    let left = panel as f64 * h;
                    for (x, w) in xs.iter().zip(&ws) {
                        nodes.push(left + 0.5 * h * (x + 1.0));
                        weights.push(0.5 * h * w);
                    }
                }
                Ok((nodes, weights))
            }
        }
    }

    /// Materialized tensor grid in dimension `d`.
    pub fn grid(&self, d: usize) -> Result<QuadGrid> {
        let (nodes, weights) = self.nodes_1d()?;
        let m = nodes.len();
        let total = m
            .checked_pow(d as u32)
            .ok_or_else(|| Error::Config("quadrature grid too large".into()))?;
        let mut points = Vec::with_capacity(total * d);
        let mut w = Vec::with_capacity(total);
        let mut idx = vec![0usize; d];
        for _ in 0..total {
            let mut wt = 1.0;
            for &i in &idx {
                points.push(nodes[i]);
                wt *= weights[i];
            }
            w.push(wt);
            // row-major increment, last coordinate fastest
            for pos in (0..d).rev() {
                idx[pos] += 1;
                if idx[pos] < m {
                    break;
                }
                idx[pos] = 0;
            }
        }
        Ok(QuadGrid {
            dim: d,
            points,
            weights: w,
        })
    }
}

/// Flattened tensor grid: `points` is row-major `len × dim`.
#[derive(Debug, Clone)]
pub struct QuadGrid {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadGrid {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn integrate<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        let mut acc = crate::numeric::CompensatedSum::new();
        for i in 0..self.len() {
            acc.add(self.weights[i] * f(self.point(i)));
        }
        acc.value()
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(p: usize) -> (Vec<f64>, Vec<f64>) {
    if p == 1 {
        return (vec![0.0], vec![2.0]);
    }
    let mut xs = vec![0.0; p];
    let mut ws = vec![0.0; p];
    for i in 0..p.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (p as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=p {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            // p1 = P_p(x), p0 = P_{p-1}(x)
            dp = p as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        xs[i] = -x;
        xs[p - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        ws[i] = w;
        ws[p - 1 - i] = w;
    }
    (xs, ws)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        for p in 1..=8 {
            let (xs, ws) = gauss_legendre(p);
            for deg in 0..(2 * p) {
                let approx: f64 = xs.iter().zip(&ws).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((approx - exact).abs() < 1e-13, "p={p} deg={deg}");
            }
        }
    }

    #[test]
    fn midpoint_grid_weights_sum_to_one() {
        let g = QuadratureSpec::midpoint(8).grid(2).unwrap();
        assert_eq!(g.len(), 64);
        assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert_eq!(g.point(1), &[1.0 / 16.0, 3.0 / 16.0]);
    }

    #[test]
    fn composite_rule_resolves_smooth_integrand() {
        let g = QuadratureSpec::gauss_legendre(4, 5).grid(1).unwrap();
        let v = g.integrate(|x| (3.0 * x[0]).exp());
        assert!((v - ((3.0f64).exp() - 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn coarse_grid_is_rejected() {
        assert!(QuadratureSpec::midpoint(4).require_resolution(8).is_err());
        assert!(QuadratureSpec::midpoint(8).require_resolution(8).is_ok());
    }
}
