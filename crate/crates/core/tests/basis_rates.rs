use hoif::basis::{build_basis, l2_approximation_error, BasisSpec};
use hoif::gram::quadrature_gram;
use hoif::numeric::log_log_slope;
use hoif::quadrature::QuadratureSpec;
use nalgebra::DMatrix;

/// `Σ_j 2^{-jβ} cos(2^j π x)`, of smoothness exactly `β` (non-integer `β`).
fn lacunary(beta: f64, x: f64) -> f64 {
    (0..14).map(|j| 2f64.powf(-(j as f64) * beta) * (2f64.powi(j) * std::f64::consts::PI * x).cos()).sum()
}

fn rate(spec: impl Fn(usize) -> BasisSpec, sizes: &[usize], f: impl Fn(&[f64]) -> f64 + Sync + Copy) -> f64 {
    let quad = QuadratureSpec::gauss_legendre(8192, 4);
    let errs: Vec<f64> = sizes
        .iter()
        .map(|&q| l2_approximation_error(&build_basis(&spec(q)).unwrap(), f, &quad).unwrap().sqrt())
        .collect();
    let ks: Vec<f64> = sizes.iter().map(|&q| q as f64).collect();
    log_log_slope(&ks, &errs)
}

#[test]
fn haar_orthonormal_under_lebesgue() {
    for spec in [BasisSpec::haar(1, 16), BasisSpec::haar(2, 4), BasisSpec::haar(3, 2)] {
        let basis = build_basis(&spec).unwrap();
        let g = quadrature_gram(&basis, &|_: &[f64]| 1.0, &QuadratureSpec::midpoint(32)).unwrap();
        let k = basis.size();
        assert!((g.entries() - DMatrix::identity(k, k)).amax() < 1e-12, "{spec}");
    }
}

#[test]
fn haar_rate_tracks_smoothness_below_one() {
    for beta in [0.5, 0.8] {
        let slope = rate(|q| BasisSpec::haar(1, q), &[16, 32, 64, 128], move |x| lacunary(beta, x[0]));
        assert!((slope + beta).abs() < 0.15, "β = {beta}: slope {slope}");
    }
}

#[test]
fn haar_rate_saturates_at_one() {
    let smooth = |x: &[f64]| (2.0 * x[0]).sin() + x[0] * x[0];
    let slope = rate(|q| BasisSpec::haar(1, q), &[16, 32, 64, 128], smooth);
    assert!((slope + 1.0).abs() < 0.1, "slope {slope}");
}

#[test]
fn quadratic_spline_rates() {
    for beta in [1.5, 2.5] {
        let slope = rate(|q| BasisSpec::bspline(1, 2, q), &[19, 35, 67, 131], move |x| lacunary(beta, x[0]));
        assert!((slope + beta).abs() < 0.25, "β = {beta}: slope {slope}");
    }
}

#[test]
fn tensor_haar_rate_in_two_dimensions() {
    // k^{-β/d} with β = 1 for a smooth function
    let f = |x: &[f64]| (x[0] + 2.0 * x[1]).sin();
    let quad = QuadratureSpec::gauss_legendre(128, 2);
    let qs = [4usize, 8, 16, 32];
    let errs: Vec<f64> = qs
        .iter()
        .map(|&q| l2_approximation_error(&build_basis(&BasisSpec::haar(2, q)).unwrap(), f, &quad).unwrap().sqrt())
        .collect();
    let ks: Vec<f64> = qs.iter().map(|&q| (q * q) as f64).collect();
    let slope = log_log_slope(&ks, &errs);
    assert!((slope + 0.5).abs() < 0.05, "slope {slope}");
}
