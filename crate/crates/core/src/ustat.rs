//! Distinct-index chain U-statistics `ÎF_{j,j,k}`.
//!
//! Each middle factor `(R_i Ω̂⁻¹ − I)` with `R_i = |h1|_i z_i z_iᵀ` is expanded,
//! so order `j` becomes an alternating binomial combination of path averages
//!
//! ```text
//! P_r = (n)_{r+2}⁻¹ Σ_{distinct a, c_1..c_r, b} ε_p,a Q_{a c_1} w_{c_1} Q_{c_1 c_2} ⋯ w_{c_r} Q_{c_r b} ε_b,b
//! ```
//!
//! with `Q_ab = z_aᵀ Ω̂⁻¹ z_b` and `w = |h1|`. The distinct-index restriction
//! is removed by Möbius inversion over set partitions of the path positions;
//! every partition leaves an unrestricted sum over a small quotient graph,
//! evaluated through the factorization `Q = (ZΩ̂⁻¹) Zᵀ` without forming the
//! `n × n` kernel.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::{binomial, falling_factorial, CompensatedSum};

/// Highest order the engine accepts.
pub const HARD_MAX_ORDER: usize = 6;

#[derive(Debug, Clone)]
pub struct ChainInputs {
    pub eps_p: Vec<f64>,
    pub eps_b: Vec<f64>,
    pub abs_h1: Vec<f64>,
    /// `n × k`, row `i` is `z(X_i)`.
    pub z: DMatrix<f64>,
    pub omega_inv: DMatrix<f64>,
    pub sign_flag: bool,
}

impl ChainInputs {
    pub fn new(
        eps_p: Vec<f64>,
        eps_b: Vec<f64>,
        abs_h1: Vec<f64>,
        z: DMatrix<f64>,
        omega_inv: DMatrix<f64>,
        sign_flag: bool,
    ) -> Result<Self> {
        let n = z.nrows();
        let k = z.ncols();
        if eps_p.len() != n || eps_b.len() != n || abs_h1.len() != n {
            return Err(Error::Dimension(format!(
                "residual lengths ({}, {}, {}) do not match {n} basis rows",
                eps_p.len(),
                eps_b.len(),
                abs_h1.len()
            )));
        }
        if omega_inv.shape() != (k, k) {
            return Err(Error::Dimension(format!(
                "inverse gram is {:?}, basis size is {k}",
                omega_inv.shape()
            )));
        }
        let scale = omega_inv.amax().max(1.0);
        if (&omega_inv - omega_inv.transpose()).amax() > 1e-10 * scale {
            return Err(Error::Numerical("inverse gram is not symmetric".into()));
        }
        if eps_p.iter().chain(&eps_b).chain(&abs_h1).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("chain residuals".into()));
        }
        Ok(Self {
            eps_p,
            eps_b,
            abs_h1,
            z,
            omega_inv,
            sign_flag,
        })
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn k(&self) -> usize {
        self.z.ncols()
    }

    fn sigma(&self) -> f64 {
        if self.sign_flag {
            -1.0
        } else {
            1.0
        }
    }
}

/// `Q = L Rᵀ` with `L = Z Ω̂⁻¹`, `R = Z`, both stored row-major.
#[derive(Debug, Clone)]
pub struct QKernel {
    n: usize,
    k: usize,
    l: Vec<f64>,
    r: Vec<f64>,
    diag: Vec<f64>,
}

impl QKernel {
    pub fn new(inputs: &ChainInputs) -> Self {
        let (n, k) = (inputs.n(), inputs.k());
        let lm = &inputs.z * &inputs.omega_inv;
        let mut l = vec![0.0; n * k];
        let mut r = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                l[i * k + j] = lm[(i, j)];
                r[i * k + j] = inputs.z[(i, j)];
            }
        }
        let diag = (0..n).map(|a| dot(&l[a * k..(a + 1) * k], &r[a * k..(a + 1) * k])).collect();
        Self { n, k, l, r, diag }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn l_row(&self, a: usize) -> &[f64] {
        &self.l[a * self.k..(a + 1) * self.k]
    }

    #[inline]
    fn r_row(&self, a: usize) -> &[f64] {
        &self.r[a * self.k..(a + 1) * self.k]
    }

    /// `Q_ab`.
    pub fn q(&self, a: usize, b: usize) -> f64 {
        dot(self.l_row(a), self.r_row(b))
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    /// Row `a` of `Q`.
    pub fn row(&self, a: usize) -> Vec<f64> {
        let la = self.l_row(a);
        (0..self.n).map(|b| dot(la, self.r_row(b))).collect()
    }

    /// `Σ_a w_a L_a`.
    fn weighted_l(&self, w: &[f64]) -> Vec<f64> {
        let mut acc = vec![CompensatedSum::new(); self.k];
        for (a, &wa) in w.iter().enumerate() {
            if wa != 0.0 {
                for (j, v) in self.l_row(a).iter().enumerate() {
                    acc[j].add(wa * v);
                }
            }
        }
        acc.iter().map(CompensatedSum::value).collect()
    }

    /// `Σ_a w_a R_aᵀ L_a` (`k × k`, row-major).
    fn weighted_rl(&self, w: &[f64]) -> Vec<f64> {
        let k = self.k;
        let mut acc = vec![0.0; k * k];
        for (a, &wa) in w.iter().enumerate() {
            if wa == 0.0 {
                continue;
            }
            let (ra, la) = (self.r_row(a), self.l_row(a));
            for i in 0..k {
                let s = wa * ra[i];
                for j in 0..k {
                    acc[i * k + j] += s * la[j];
                }
            }
        }
        acc
    }

    /// `m_b = Σ_a w_a Q_ab^p`.
    fn message(&self, w: &[f64], p: u32) -> Vec<f64> {
        let (n, k) = (self.n, self.k);
        match p {
            1 => {
                let t = self.weighted_l(w);
                (0..n).map(|b| dot(self.r_row(b), &t)).collect()
            }
            2 => {
                let mut g = vec![0.0; k * k];
                for (a, &wa) in w.iter().enumerate() {
                    if wa == 0.0 {
                        continue;
                    }
                    let la = self.l_row(a);
                    for i in 0..k {
                        let s = wa * la[i];
                        for j in 0..k {
                            g[i * k + j] += s * la[j];
                        }
                    }
                }
                (0..n)
                    .map(|b| {
                        let rb = self.r_row(b);
                        (0..k).map(|i| rb[i] * dot(&g[i * k..(i + 1) * k], rb)).sum()
                    })
                    .collect()
            }
            3 if k * k <= n => {
                let mut t = vec![0.0; k * k * k];
                for (a, &wa) in w.iter().enumerate() {
                    if wa == 0.0 {
                        continue;
                    }
                    let la = self.l_row(a);
                    for i in 0..k {
                        for j in 0..k {
                            let s = wa * la[i] * la[j];
                            let base = (i * k + j) * k;
                            for (l, v) in la.iter().enumerate() {
                                t[base + l] += s * v;
                            }
                        }
                    }
                }
                (0..n)
                    .map(|b| {
                        let rb = self.r_row(b);
                        let mut s = 0.0;
                        for i in 0..k {
                            for j in 0..k {
                                s += rb[i] * rb[j] * dot(&t[(i * k + j) * k..(i * k + j + 1) * k], rb);
                            }
                        }
                        s
                    })
                    .collect()
            }
            _ => (0..n)
                .into_par_iter()
                .map(|b| {
                    let rb = self.r_row(b);
                    let mut acc = CompensatedSum::new();
                    for (a, &wa) in w.iter().enumerate() {
                        if wa != 0.0 {
                            acc.add(wa * dot(self.l_row(a), rb).powi(p as i32));
                        }
                    }
                    acc.value()
                })
                .collect(),
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unrestricted sum over a quotient multigraph: vertices carry weight
/// vectors over the sample, each edge of multiplicity `p` contributes `Q^p`.
#[derive(Debug, Clone)]
struct Graph {
    weights: Vec<Option<Vec<f64>>>,
    /// `(u, v) → multiplicity`, `u < v`.
    edges: BTreeMap<(usize, usize), u32>,
}

impl Graph {
    fn neighbors(&self, v: usize) -> Vec<(usize, u32)> {
        self.edges
            .iter()
            .filter_map(|(&(a, b), &p)| {
                if a == v {
                    Some((b, p))
                } else if b == v {
                    Some((a, p))
                } else {
                    None
                }
            })
            .collect()
    }

    fn remove(&mut self, v: usize) {
        self.weights[v] = None;
        self.edges.retain(|&(a, b), _| a != v && b != v);
    }

    fn alive(&self) -> Vec<usize> {
        (0..self.weights.len()).filter(|&v| self.weights[v].is_some()).collect()
    }

    /// Vertices of `start`'s component, in walk order when it is a simple cycle.
    fn simple_cycle(&self, start: usize) -> Option<Vec<usize>> {
        let mut order = vec![start];
        let mut prev = usize::MAX;
        let mut cur = start;
        loop {
            let nb = self.neighbors(cur);
            if nb.len() != 2 || nb.iter().any(|&(_, p)| p != 1) {
                return None;
            }
            let next = if nb[0].0 != prev { nb[0].0 } else { nb[1].0 };
            if next == start {
                return Some(order);
            }
            prev = cur;
            cur = next;
            order.push(cur);
            if order.len() > self.weights.len() {
                return None;
            }
        }
    }
}

fn hadamard(into: &mut [f64], by: &[f64]) {
    for (a, b) in into.iter_mut().zip(by) {
        *a *= b;
    }
}

fn evaluate(mut g: Graph, q: &QKernel) -> f64 {
    let mut total = 1.0;
    loop {
        let alive = g.alive();
        if alive.is_empty() {
            return total;
        }
        if total == 0.0 {
            return 0.0;
        }
        // isolated vertices and leaves
        let mut progressed = false;
        for &v in &alive {
            let nb = g.neighbors(v);
            match nb.len() {
                0 => {
                    total *= crate::numeric::csum(g.weights[v].as_ref().unwrap());
                    g.remove(v);
                    progressed = true;
                }
                1 => {
                    let (u, p) = nb[0];
                    let msg = q.message(g.weights[v].as_ref().unwrap(), p);
                    hadamard(g.weights[u].as_mut().unwrap(), &msg);
                    g.remove(v);
                    progressed = true;
                }
                _ => {}
            }
            if progressed {
                break;
            }
        }
        if progressed {
            continue;
        }
        // a component that is a plain cycle collapses to a trace
        if let Some(cycle) = g.simple_cycle(alive[0]) {
            let k = q.k;
            let mut prod: Option<Vec<f64>> = None;
            for &v in &cycle {
                let m = q.weighted_rl(g.weights[v].as_ref().unwrap());
                prod = Some(match prod {
                    None => m,
                    Some(acc) => {
                        let mut out = vec![0.0; k * k];
                        for i in 0..k {
                            for l in 0..k {
                                let s = acc[i * k + l];
                                if s != 0.0 {
                                    for j in 0..k {
                                        out[i * k + j] += s * m[l * k + j];
                                    }
                                }
                            }
                        }
                        out
                    }
                });
            }
            let prod = prod.unwrap();
            total *= (0..k).map(|i| prod[i * k + i]).sum::<f64>();
            for v in cycle {
                g.remove(v);
            }
            continue;
        }
        // condition on the busiest vertex
        let v = *alive
            .iter()
            .max_by_key(|&&v| (g.neighbors(v).len(), std::cmp::Reverse(v)))
            .unwrap();
        let nb = g.neighbors(v);
        let wv = g.weights[v].clone().unwrap();
        let mut rest = g.clone();
        rest.remove(v);
        let parts: Vec<f64> = (0..q.n)
            .into_par_iter()
            .map(|a| {
                if wv[a] == 0.0 {
                    return 0.0;
                }
                let row = q.row(a);
                let mut sub = rest.clone();
                for &(u, p) in &nb {
                    let w = sub.weights[u].as_mut().unwrap();
                    for (x, r) in w.iter_mut().zip(&row) {
                        *x *= r.powi(p as i32);
                    }
                }
                wv[a] * evaluate(sub, q)
            })
            .collect();
        return total * crate::numeric::csum(&parts);
    }
}

/// All set partitions of `0..m` as block labels (restricted growth strings).
pub fn set_partitions(m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if m == 0 {
        out.push(Vec::new());
        return out;
    }
    let mut a = vec![0usize; m];
    fn rec(i: usize, max: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == a.len() {
            out.push(a.clone());
            return;
        }
        for label in 0..=max + 1 {
            a[i] = label;
            rec(i + 1, max.max(label), a, out);
        }
    }
    rec(1, 0, &mut a, &mut out);
    out
}

/// Möbius weight `Π_B (-1)^{|B|-1} (|B|-1)!`.
fn mobius(labels: &[usize]) -> f64 {
    let blocks = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; blocks];
    for &l in labels {
        sizes[l] += 1;
    }
    sizes
        .iter()
        .map(|&s| {
            let f = crate::numeric::factorial(s - 1);
            if s % 2 == 0 {
                -f
            } else {
                f
            }
        })
        .product()
}

/// `Σ` over distinct tuples of the chain `y_0(a) Q y_1 Q ⋯ Q y_last`.
pub fn distinct_path_sum(q: &QKernel, position_weights: &[&[f64]]) -> f64 {
    let len = position_weights.len();
    let parts: Vec<f64> = set_partitions(len)
        .into_par_iter()
        .map(|labels| {
            let blocks = labels.iter().max().unwrap() + 1;
            let mut weights = vec![vec![1.0; q.n]; blocks];
            for (pos, &b) in labels.iter().enumerate() {
                hadamard(&mut weights[b], position_weights[pos]);
            }
            let mut edges = BTreeMap::new();
            for pos in 0..len - 1 {
                let (u, v) = (labels[pos], labels[pos + 1]);
                if u == v {
                    hadamard(&mut weights[u], &q.diag);
                } else {
                    *edges.entry((u.min(v), u.max(v))).or_insert(0) += 1;
                }
            }
            if weights.iter().any(|w| w.iter().all(|&x| x == 0.0)) {
                return 0.0;
            }
            let g = Graph {
                weights: weights.into_iter().map(Some).collect(),
                edges,
            };
            mobius(&labels) * evaluate(g, q)
        })
        .collect();
    crate::numeric::csum(&parts)
}

/// `P_r` for `r = 0..=r_max`.
pub fn path_averages(inputs: &ChainInputs, q: &QKernel, r_max: usize) -> Result<Vec<f64>> {
    let n = inputs.n();
    if n < r_max + 2 {
        return Err(Error::Config(format!("order needs at least {} records, have {n}", r_max + 2)));
    }
    Ok((0..=r_max)
        .map(|r| {
            let mut pw: Vec<&[f64]> = Vec::with_capacity(r + 2);
            pw.push(&inputs.eps_p);
            for _ in 0..r {
                pw.push(&inputs.abs_h1);
            }
            pw.push(&inputs.eps_b);
            distinct_path_sum(q, &pw) / falling_factorial(n, r + 2)
        })
        .collect())
}

/// Order-`j` statistic from path averages `P_0..P_{j-2}`.
fn combine(j: usize, sigma: f64, p: &[f64]) -> f64 {
    let mut acc = CompensatedSum::new();
    for (r, pr) in p.iter().enumerate().take(j - 1) {
        let sgn = if (j - 2 - r) % 2 == 0 { 1.0 } else { -1.0 };
        acc.add(binomial(j - 2, r) * sgn * pr);
    }
    let outer = if (j - 1) % 2 == 0 { 1.0 } else { -1.0 };
    outer * sigma * acc.value()
}

/// `ÎF_{2,2,k}` in `O(nk + k²)`.
pub fn if22(inputs: &ChainInputs) -> Result<f64> {
    let n = inputs.n();
    if n < 2 {
        return Err(Error::Config("second order needs at least 2 records".into()));
    }
    let q = QKernel::new(inputs);
    let u = q.weighted_l(&inputs.eps_p);
    let v: Vec<f64> = {
        let mut acc = vec![CompensatedSum::new(); q.k];
        for (a, &e) in inputs.eps_b.iter().enumerate() {
            for (j, r) in q.r_row(a).iter().enumerate() {
                acc[j].add(e * r);
            }
        }
        acc.iter().map(CompensatedSum::value).collect()
    };
    let diag: CompensatedSum = (0..n).map(|a| inputs.eps_p[a] * q.diag[a] * inputs.eps_b[a]).collect();
    let p0 = (dot(&u, &v) - diag.value()) / falling_factorial(n, 2);
    Ok(-inputs.sigma() * p0)
}

fn check_order(j: usize, m_max: usize, n: usize) -> Result<()> {
    if j < 2 {
        return Err(Error::Config(format!("order {j} is below 2")));
    }
    if j > m_max.min(HARD_MAX_ORDER) {
        return Err(Error::Config(format!(
            "order {j} exceeds the maximum {}",
            m_max.min(HARD_MAX_ORDER)
        )));
    }
    if n < j {
        return Err(Error::Config(format!("order {j} needs at least {j} records, have {n}")));
    }
    Ok(())
}

/// `ÎF_{j,j,k}` for a single order.
pub fn ifjj(j: usize, inputs: &ChainInputs, m_max: usize) -> Result<f64> {
    check_order(j, m_max, inputs.n())?;
    if j == 2 {
        return if22(inputs);
    }
    let q = QKernel::new(inputs);
    let p = path_averages(inputs, &q, j - 2)?;
    Ok(combine(j, inputs.sigma(), &p))
}

/// `[ÎF_22, …, ÎF_mm]`, sharing the kernel and path averages across orders.
pub fn if_orders(inputs: &ChainInputs, m: usize, m_max: usize) -> Result<Vec<f64>> {
    if m < 2 {
        return Ok(Vec::new());
    }
    check_order(m, m_max, inputs.n())?;
    let q = QKernel::new(inputs);
    let p = path_averages(inputs, &q, m - 2)?;
    Ok((2..=m).map(|j| combine(j, inputs.sigma(), &p)).collect())
}

/// Worst-case work estimate `2^{j-2} · Bell(j) · n · k` for reports.
pub fn cost_estimate(j: usize, n: usize, k: usize) -> f64 {
    let bell = set_partitions(j).len() as f64;
    2f64.powi(j as i32 - 2) * bell * n as f64 * k as f64
}

/// Literal ordered sum `Σ_{i_1 ≠ ⋯ ≠ i_j} ÎF_{j,j,k,ī_j}`, without the
/// normalization. Testing oracle.
pub fn brute_force_raw_sum(j: usize, inputs: &ChainInputs) -> Result<f64> {
    let n = inputs.n();
    if j < 2 {
        return Err(Error::Config(format!("order {j} is below 2")));
    }
    if n > 30 || (n as f64).powi(j as i32) > 1e8 {
        return Err(Error::Guard(format!("n = {n}, j = {j} is too large to enumerate")));
    }
    if n < j {
        return Err(Error::Config(format!("order {j} needs at least {j} records")));
    }
    let w = &inputs.omega_inv;
    let zrow = |i: usize| -> nalgebra::DVector<f64> { inputs.z.row(i).transpose() };
    // u_i = ε_p,i Ω̂⁻¹ z_i, v_i = z_i ε_b,i, and z_i for middle factors
    let u: Vec<_> = (0..n).map(|i| (w * zrow(i)) * inputs.eps_p[i]).collect();
    let v: Vec<_> = (0..n).map(|i| zrow(i) * inputs.eps_b[i]).collect();
    let zs: Vec<_> = (0..n).map(zrow).collect();
    let wz: Vec<_> = (0..n).map(|i| w * zrow(i)).collect();
    let sign = (if (j - 1) % 2 == 0 { 1.0 } else { -1.0 }) * inputs.sigma();

    // middle positions s = j, j-1, ..., 3 applied right to left
    fn middle(
        depth: usize,
        used: &mut Vec<bool>,
        vec: nalgebra::DVector<f64>,
        i1: usize,
        ctx: &Ctx,
        acc: &mut CompensatedSum,
    ) {
        if depth == 0 {
            acc.add(ctx.u[i1].dot(&vec));
            return;
        }
        for s in 0..used.len() {
            if used[s] {
                continue;
            }
            used[s] = true;
            // (R_s Ω̂⁻¹ − I) vec = |h1|_s z_s (z_sᵀ Ω̂⁻¹ vec) − vec
            let next = &ctx.zs[s] * (ctx.abs_h1[s] * ctx.wz[s].dot(&vec)) - &vec;
            middle(depth - 1, used, next, i1, ctx, acc);
            used[s] = false;
        }
    }
    struct Ctx<'a> {
        u: &'a [nalgebra::DVector<f64>],
        zs: &'a [nalgebra::DVector<f64>],
        wz: &'a [nalgebra::DVector<f64>],
        abs_h1: &'a [f64],
    }
    let ctx = Ctx {
        u: &u,
        zs: &zs,
        wz: &wz,
        abs_h1: &inputs.abs_h1,
    };
    let mut acc = CompensatedSum::new();
    let mut used = vec![false; n];
    for i1 in 0..n {
        used[i1] = true;
        for i2 in 0..n {
            if used[i2] {
                continue;
            }
            used[i2] = true;
            middle(j - 2, &mut used, v[i2].clone(), i1, &ctx, &mut acc);
            used[i2] = false;
        }
        used[i1] = false;
    }
    Ok(sign * acc.value())
}

/// Normalized enumeration oracle: raw sum divided by `(n)_j`.
pub fn brute_force_ifjj(j: usize, inputs: &ChainInputs) -> Result<f64> {
    Ok(brute_force_raw_sum(j, inputs)? / falling_factorial(inputs.n(), j))
}

/// A kernel tabulated over all `m`-tuples (with repetition) of a finite
/// support with atom probabilities `probs`; the sampling law is i.i.d.
/// draws from that support.
#[derive(Debug, Clone)]
pub struct KernelTable {
    pub support: usize,
    pub m: usize,
    pub probs: Vec<f64>,
    /// Row-major over `support^m`, first argument slowest.
    pub values: Vec<f64>,
}

impl KernelTable {
    pub fn from_fn<F: Fn(&[usize]) -> f64>(probs: Vec<f64>, m: usize, f: F) -> Result<Self> {
        let support = probs.len();
        let total = support
            .checked_pow(m as u32)
            .filter(|&t| t <= 1 << 22)
            .ok_or_else(|| Error::Guard(format!("kernel table {support}^{m} too large")))?;
        let mut idx = vec![0usize; m];
        let mut values = Vec::with_capacity(total);
        for _ in 0..total {
            values.push(f(&idx));
            for pos in (0..m).rev() {
                idx[pos] += 1;
                if idx[pos] < support {
                    break;
                }
                idx[pos] = 0;
            }
        }
        Ok(Self {
            support,
            m,
            probs,
            values,
        })
    }

    /// Average over all argument permutations.
    pub fn symmetrize(&self) -> Self {
        let perms = permutations(self.m);
        let mut out = self.clone();
        let mut idx = vec![0usize; self.m];
        let mut buf = vec![0usize; self.m];
        for (flat, slot) in out.values.iter_mut().enumerate() {
            unflatten(flat, self.support, &mut idx);
            let mut s = 0.0;
            for p in &perms {
                for (t, &pi) in p.iter().enumerate() {
                    buf[t] = idx[pi];
                }
                s += self.values[flatten(&buf, self.support)];
            }
            *slot = s / perms.len() as f64;
        }
        out
    }
}

fn flatten(idx: &[usize], support: usize) -> usize {
    idx.iter().fold(0, |acc, &i| acc * support + i)
}

fn unflatten(mut flat: usize, support: usize, out: &mut [usize]) {
    for slot in out.iter_mut().rev() {
        *slot = flat % support;
        flat /= support;
    }
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(m - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, m - 1);
            out.push(q);
        }
    }
    out
}

/// `Var(U_n) = Σ_{l=1}^m C(m,l)² / C(n,l) · E[f_l²]` from the explicit
/// Hoeffding components `f_l` of a symmetric kernel.
pub fn hoeffding_variance(table: &KernelTable, n: usize) -> Result<f64> {
    let (support, m) = (table.support, table.m);
    if n < m {
        return Err(Error::Config(format!("sample size {n} below kernel order {m}")));
    }
    if (table.probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(Error::Config("atom probabilities must sum to 1".into()));
    }
    // conditional expectations g_c(x_1..x_c) = E f(x_1..x_c, X_{c+1}..X_m)
    let mut cond: Vec<Vec<f64>> = vec![Vec::new(); m + 1];
    cond[m] = table.values.clone();
    for c in (0..m).rev() {
        let upper = &cond[c + 1];
        let len = support.pow(c as u32);
        let mut out = vec![0.0; len];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = (0..support).map(|x| table.probs[x] * upper[i * support + x]).sum();
        }
        cond[c] = out;
    }
    let mut var = CompensatedSum::new();
    let mut idx = vec![0usize; m];
    let mut sub = Vec::with_capacity(m);
    for l in 1..=m {
        // f_l(x) = Σ_{S ⊆ [l]} (-1)^{l-|S|} g_{|S|}(x_S)
        let len = support.pow(l as u32);
        let mut second = CompensatedSum::new();
        for flat in 0..len {
            unflatten(flat, support, &mut idx[..l]);
            let mut fl = 0.0;
            for mask in 0u32..(1 << l) {
                sub.clear();
                for (t, &x) in idx[..l].iter().enumerate() {
                    if mask & (1 << t) != 0 {
                        sub.push(x);
                    }
                }
                let sgn = if (l - sub.len()) % 2 == 0 { 1.0 } else { -1.0 };
                fl += sgn * cond[sub.len()][flatten(&sub, support)];
            }
            let p: f64 = idx[..l].iter().map(|&x| table.probs[x]).product();
            second.add(p * fl * fl);
        }
        var.add(binomial(m, l).powi(2) / binomial(n, l) * second.value());
    }
    Ok(var.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_inputs(rng: &mut ChaCha20Rng, n: usize, k: usize, sign_flag: bool) -> ChainInputs {
        let z = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        let spd = &a * a.transpose() + DMatrix::identity(k, k) * 0.5;
        let inv = spd.try_inverse().unwrap();
        let inv = (&inv + inv.transpose()) * 0.5;
        let v = |rng: &mut ChaCha20Rng| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>();
        let eps_p = v(rng);
        let eps_b = v(rng);
        let abs_h1 = (0..n).map(|_| rng.random_range(0.0..1.5)).collect();
        ChainInputs::new(eps_p, eps_b, abs_h1, z, inv, sign_flag).unwrap()
    }

    fn scalar_inputs(eps_p: Vec<f64>, eps_b: Vec<f64>) -> ChainInputs {
        let n = eps_p.len();
        ChainInputs::new(eps_p, eps_b, vec![1.0; n], DMatrix::from_element(n, 1, 1.0), DMatrix::identity(1, 1), false)
            .unwrap()
    }

    #[test]
    fn two_record_example() {
        let inp = scalar_inputs(vec![1.0, 2.0], vec![3.0, 4.0]);
        assert_eq!(brute_force_raw_sum(2, &inp).unwrap(), -10.0);
        assert!((if22(&inp).unwrap() + 5.0).abs() < 1e-15);
        assert!((brute_force_ifjj(2, &inp).unwrap() + 5.0).abs() < 1e-15);
    }

    #[test]
    fn zero_front_or_back_residual() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut inp = random_inputs(&mut rng, 8, 2, true);
        inp.eps_p = vec![0.0; 8];
        assert_eq!(if22(&inp).unwrap(), 0.0);
        let mut inp = random_inputs(&mut rng, 8, 2, true);
        inp.eps_b = vec![0.0; 8];
        for v in if_orders(&inp, 4, 4).unwrap() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn centered_middle_factor_vanishes() {
        // |h1| z² = 1 = Ω̂ for every record, so R_i Ω̂⁻¹ − I = 0
        let inp = ChainInputs::new(
            vec![0.3, -1.0, 2.0],
            vec![1.0, 0.5, -0.2],
            vec![1.0; 3],
            DMatrix::from_element(3, 1, 1.0),
            DMatrix::identity(1, 1),
            false,
        )
        .unwrap();
        assert!(ifjj(3, &inp, 4).unwrap().abs() < 1e-15);
        assert_eq!(brute_force_ifjj(3, &inp).unwrap(), 0.0);
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for &n in &[8usize, 10, 12] {
            for &k in &[2usize, 3] {
                for &j in &[3usize, 4] {
                    let inp = random_inputs(&mut rng, n, k, n % 4 == 0);
                    let fast = ifjj(j, &inp, 4).unwrap();
                    let slow = brute_force_ifjj(j, &inp).unwrap();
                    assert!((fast - slow).abs() <= 1e-10 * (1.0 + slow.abs()), "n {n} k {k} j {j}: {fast} vs {slow}");
                }
            }
        }
    }

    #[test]
    fn higher_orders_match_enumeration() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for &j in &[5usize, 6] {
            let inp = random_inputs(&mut rng, 7, 2, false);
            let fast = ifjj(j, &inp, 6).unwrap();
            let slow = brute_force_ifjj(j, &inp).unwrap();
            assert!((fast - slow).abs() <= 1e-10 * (1.0 + slow.abs()), "j {j}: {fast} vs {slow}");
        }
    }

    #[test]
    fn fifteen_record_second_order() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let inp = random_inputs(&mut rng, 15, 4, true);
        let fast = if22(&inp).unwrap();
        let slow = brute_force_ifjj(2, &inp).unwrap();
        assert!((fast - slow).abs() <= 1e-11 * slow.abs().max(1e-300));
    }

    #[test]
    fn three_records_third_order_has_six_terms() {
        // all-ones kernel pieces with the middle factor (2 - 1) = 1: each term is 1
        let inp = ChainInputs::new(vec![1.0; 3], vec![1.0; 3], vec![2.0; 3], DMatrix::from_element(3, 1, 1.0), DMatrix::identity(1, 1), false)
            .unwrap();
        assert_eq!(brute_force_raw_sum(3, &inp).unwrap(), 6.0);
    }

    #[test]
    fn order_guards() {
        let inp = scalar_inputs(vec![1.0, 2.0, 3.0], vec![1.0, 1.0, 1.0]);
        assert!(ifjj(4, &inp, 4).is_err());
        assert!(ifjj(5, &inp, 4).is_err());
        assert!(ifjj(7, &scalar_inputs(vec![1.0; 8], vec![1.0; 8]), 7).is_err());
        assert!(brute_force_raw_sum(3, &scalar_inputs(vec![1.0; 31], vec![1.0; 31])).is_err());
    }

    #[test]
    fn bell_numbers() {
        let counts: Vec<usize> = (1..=6).map(|m| set_partitions(m).len()).collect();
        assert_eq!(counts, vec![1, 2, 5, 15, 52, 203]);
    }

    #[test]
    fn constant_kernel_has_no_variance() {
        let t = KernelTable::from_fn(vec![0.25; 4], 2, |_| 3.0).unwrap();
        assert!(hoeffding_variance(&t, 10).unwrap().abs() < 1e-15);
    }

    #[test]
    fn sample_mean_variance() {
        let vals = [1.0, 2.0, 4.0];
        let probs = vec![0.2, 0.5, 0.3];
        let t = KernelTable::from_fn(probs.clone(), 1, |i| vals[i[0]]).unwrap();
        let mu: f64 = vals.iter().zip(&probs).map(|(v, p)| v * p).sum();
        let var: f64 = vals.iter().zip(&probs).map(|(v, p)| p * (v - mu).powi(2)).sum();
        assert!((hoeffding_variance(&t, 7).unwrap() - var / 7.0).abs() < 1e-14);
    }

    /// Variance of the U-statistic by drawing samples from the support.
    fn resampled_variance(t: &KernelTable, n: usize, reps: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let cdf: Vec<f64> = t
            .probs
            .iter()
            .scan(0.0, |s, p| {
                *s += p;
                Some(*s)
            })
            .collect();
        let mut stats = Vec::with_capacity(reps);
        for _ in 0..reps {
            let draws: Vec<usize> = (0..n)
                .map(|_| {
                    let u: f64 = rng.random();
                    cdf.iter().position(|&c| u < c).unwrap_or(t.support - 1)
                })
                .collect();
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        s += t.values[draws[i] * t.support + draws[j]];
                    }
                }
            }
            stats.push(s / (n * (n - 1)) as f64);
        }
        let var = crate::numeric::sample_variance(&stats);
        // standard error of a sample variance ≈ var · sqrt(2/(reps-1)) for near-normal stats
        let m4 = {
            let mu = crate::numeric::mean(&stats);
            stats.iter().map(|s| (s - mu).powi(4)).sum::<f64>() / reps as f64
        };
        let se = ((m4 - var * var) / reps as f64).sqrt();
        (var, se)
    }

    #[test]
    fn degenerate_product_kernel_matches_resampling() {
        // X = (U, V) independent, each mean zero; kernel u_i v_j symmetrized
        let us = [-1.0, 2.0];
        let vs = [-1.5, 0.5];
        let (pu, pv) = ([2.0 / 3.0, 1.0 / 3.0], [0.25, 0.75]);
        let mut probs = Vec::new();
        for a in 0..2 {
            for b in 0..2 {
                probs.push(pu[a] * pv[b]);
            }
        }
        let raw = KernelTable::from_fn(probs, 2, |ix| us[ix[0] / 2] * vs[ix[1] % 2]).unwrap();
        let t = raw.symmetrize();
        let n = 8;
        let formula = hoeffding_variance(&t, n).unwrap();
        let eu2: f64 = us.iter().zip(&pu).map(|(u, p)| p * u * u).sum();
        let ev2: f64 = vs.iter().zip(&pv).map(|(v, p)| p * v * v).sum();
        assert!((formula - eu2 * ev2 / (n * (n - 1)) as f64).abs() < 1e-14);
        let (mc, se) = resampled_variance(&t, n, 100_000, 17);
        assert!((mc - formula).abs() < 3.0 * se, "{mc} vs {formula} (se {se})");
    }

    #[test]
    fn nondegenerate_kernel_uses_squared_binomials() {
        let vals = [0.0, 1.0, 3.0];
        let probs = vec![0.3, 0.3, 0.4];
        let t = KernelTable::from_fn(probs, 2, |ix| vals[ix[0]] + vals[ix[1]] + vals[ix[0]] * vals[ix[1]]).unwrap();
        let n = 6;
        let formula = hoeffding_variance(&t, n).unwrap();
        let (mc, se) = resampled_variance(&t, n, 100_000, 23);
        assert!((mc - formula).abs() < 3.0 * se, "{mc} vs {formula} (se {se})");
    }
}
