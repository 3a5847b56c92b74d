use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hoif::basis::{build_basis, BasisSpec, Family};
use hoif::data::{format_f64, Dataset, OutcomePolicy};
use hoif::estimator::{
    arms, assemble, default_tuning, estimate, prepare_arm, realize_k, split_sample, EstimateReport, EstimatorConfig,
    NuisanceMethod, Variant, CSV_COLUMNS,
};
use hoif::functionals::FunctionalId;
use hoif::gram::{quadrature_gram, GramMatrix};
use hoif::nuisance::{plugin_from_columns, SeriesOptions};
use hoif::numeric::log_log_slope;
use hoif::quadrature::QuadratureSpec;
use hoif::sim::{self, run_study, StudyConfig, StudyNuisance, StudyTuning, TrainingDesign, AGGREGATE_COLUMNS};

use crate::config::RunConfig;
use crate::Failure;

/// What a successful command wants the process to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Ok,
    ZeroConvention,
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = PathBuf::from(cfg.get("output.dir"));
    fs::create_dir_all(&dir).map_err(|e| Failure::validation(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_artifact(path: &Path, header: &str, body: &[u8]) -> Result<(), Failure> {
    let mut f = fs::File::create(path).map_err(|e| Failure::validation(format!("cannot write {}: {e}", path.display())))?;
    f.write_all(header.as_bytes())?;
    f.write_all(body)?;
    Ok(())
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    write_artifact(&dir.join("resolved_config.txt"), &cfg.header()?, cfg.canonical().as_bytes())
}

fn family(cfg: &RunConfig, key: &str) -> Result<Family, Failure> {
    match cfg.get(key) {
        "haar" => Ok(Family::Haar),
        "bspline" => Ok(Family::BSpline),
        other => Err(Failure::validation(format!("{key} = '{other}': expected haar or bspline"))),
    }
}

fn quadrature(cfg: &RunConfig, d: usize) -> Result<QuadratureSpec, Failure> {
    let panels = if cfg.is_auto("quadrature.panels") {
        None
    } else {
        Some(cfg.parse::<usize>("quadrature.panels")?)
    };
    match cfg.get("quadrature.rule") {
        "midpoint" => Ok(panels.map_or(QuadratureSpec::default_for_dim(d), QuadratureSpec::midpoint)),
        "gauss_legendre" => Ok(QuadratureSpec::gauss_legendre(
            panels.unwrap_or(if d <= 2 { 64 } else { 16 }),
            cfg.parse("quadrature.points")?,
        )),
        other => Err(Failure::validation(format!("quadrature.rule = '{other}': expected midpoint or gauss_legendre"))),
    }
}

fn functional(cfg: &RunConfig, fallback: FunctionalId) -> Result<FunctionalId, Failure> {
    if cfg.is_auto("functional") {
        Ok(fallback)
    } else {
        cfg.parse("functional")
    }
}

/// Estimator settings for dimension `d`; `n_est` drives the default tuning.
fn estimator_config(cfg: &RunConfig, id: FunctionalId, d: usize, n_est: usize) -> Result<EstimatorConfig, Failure> {
    let variant: Variant = cfg.parse("estimator.variant")?;
    let m_max: usize = cfg.parse("estimator.m_max")?;
    let fam = family(cfg, "basis.family")?;
    let order = if fam == Family::Haar { 0 } else { cfg.parse("basis.degree")? };
    let (k_rule, m_rule) = default_tuning(n_est, variant, m_max);
    let k = if cfg.is_auto("basis.k") { k_rule } else { cfg.parse("basis.k")? };
    let m = if cfg.is_auto("estimator.m") { m_rule } else { cfg.parse("estimator.m")? };
    let mut est = EstimatorConfig::new(id, realize_k(fam, d, order, k)?);
    est.requested_k = Some(k);
    est.variant = variant;
    est.m_max = m_max;
    est.m = m;
    est.seed = cfg.seed()?;
    est.split_fraction = cfg.parse("estimator.split_fraction")?;
    est.eigen_floor = cfg.parse("estimator.eigen_floor")?;
    est.cross_fit = cfg.flag("estimator.cross_fit")?;
    est.level = cfg.parse("estimator.level")?;
    est.hypothesis_b = cfg.parse("estimator.hypothesis_b")?;
    let degree: usize = cfg.parse("nuisance.degree")?;
    est.nuisance_basis = BasisSpec::bspline(d, degree, degree + 1);
    est.series = SeriesOptions {
        k_grid: cfg.list("nuisance.k_grid")?,
        folds: cfg.parse("nuisance.folds")?,
        sigma_floor: cfg.parse("nuisance.sigma_floor")?,
        seed: 0,
    };
    est.quadrature = quadrature(cfg, d)?;
    est.nuisance = match cfg.get("nuisance.method") {
        "series" => NuisanceMethod::Series,
        "zero" => NuisanceMethod::Zero,
        // filled in by the caller, which has the data
        "plugin" => NuisanceMethod::Fixed(Vec::new()),
        other => return Err(Failure::validation(format!("nuisance.method = '{other}': expected series, zero or plugin"))),
    };
    est.validate()?;
    Ok(est)
}

fn n_est_for(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(1.0) as usize
}

fn plugin_columns(cfg: &RunConfig, key: &str, id: FunctionalId, prefix: char) -> Vec<String> {
    if cfg.is_auto(key) {
        match id {
            FunctionalId::Ate => vec![format!("{prefix}1_hat"), format!("{prefix}0_hat")],
            _ => vec![format!("{prefix}_hat")],
        }
    } else {
        cfg.get(key).split(',').map(|s| s.trim().to_string()).collect()
    }
}

fn gram_path(dir: &Path, arm: usize) -> PathBuf {
    dir.join(format!("omega_hat_arm{arm}.bin"))
}

pub fn cmd_estimate(cfg: &RunConfig) -> Result<Completion, Failure> {
    let input = cfg.get("input");
    if input.is_empty() {
        return Err(Failure::validation("estimate needs an input CSV (--input or input = ...)"));
    }
    let id = functional(cfg, FunctionalId::MarMean)?;
    let policy = match id {
        FunctionalId::MarMean => OutcomePolicy::MissingWhenUntreated,
        _ => OutcomePolicy::Always,
    };
    let dim = if cfg.is_auto("data.dim") { None } else { Some(cfg.parse("data.dim")?) };
    let data = Dataset::read_csv_path(Path::new(input), dim, policy)?;
    let fraction: f64 = cfg.parse("estimator.split_fraction")?;
    let mut est = estimator_config(cfg, id, data.dim(), n_est_for(data.len(), fraction))?;

    if let NuisanceMethod::Fixed(sets) = &mut est.nuisance {
        let bs = plugin_columns(cfg, "nuisance.b_column", id, 'b');
        let ps = plugin_columns(cfg, "nuisance.p_column", id, 'p');
        let n_arms = arms(id).len();
        if bs.len() != n_arms || ps.len() != n_arms {
            return Err(Failure::validation(format!("{id} needs {n_arms} plug-in column(s) for b and for p")));
        }
        for (b, p) in bs.iter().zip(&ps) {
            sets.push(plugin_from_columns(&data, b, p)?);
        }
    }
    let load = cfg.get("gram.load");
    if !load.is_empty() {
        let grams = (0..arms(id).len())
            .map(|i| {
                let path = gram_path(Path::new(load), i);
                let f = fs::File::open(&path)
                    .map_err(|e| Failure::validation(format!("cannot read {}: {e}", path.display())))?;
                Ok(GramMatrix::read_binary(std::io::BufReader::new(f))?)
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        est.hooks.omega_hat = Some(grams);
    }

    let dir = out_dir(cfg)?;
    let report = if cfg.flag("gram.save")? {
        if est.cross_fit {
            return Err(Failure::validation("gram.save needs a single split (estimator.cross_fit = false)"));
        }
        save_and_estimate(&data, &est, &dir)?
    } else {
        estimate(&data, &est)?
    };
    let header = cfg.header()?;
    write_artifact(&dir.join("estimate.csv"), &header, &report_csv(&report)?)?;
    write_artifact(&dir.join("estimate.txt"), &header, report.text_block().as_bytes())?;
    write_resolved(&dir, cfg)?;
    print!("{}", report.text_block());
    Ok(if report.zero_convention_applied {
        Completion::ZeroConvention
    } else {
        Completion::Ok
    })
}

/// Single split that keeps `Ω̂` for reuse.
fn save_and_estimate(data: &Dataset, est: &EstimatorConfig, dir: &Path) -> Result<EstimateReport, Failure> {
    let (e, t) = split_sample(data, est.split_fraction, est.seed)?;
    let arm_list = arms(est.functional);
    let prepared = arm_list
        .iter()
        .enumerate()
        .map(|(i, (spec, _))| prepare_arm(&t, spec, i, est))
        .collect::<Result<Vec<_>, _>>()?;
    for (i, p) in prepared.iter().enumerate() {
        if let Some(g) = &p.omega_hat {
            let mut buf = Vec::new();
            g.write_binary(&mut buf)?;
            fs::write(gram_path(dir, i), buf)?;
        }
    }
    let signs: Vec<f64> = arm_list.iter().map(|a| a.1).collect();
    Ok(assemble(&e, t.len(), &prepared, &signs, est)?)
}

fn report_csv(report: &EstimateReport) -> Result<Vec<u8>, Failure> {
    let mut w = csv_writer();
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    w.write_record(report.csv_row()).map_err(csv_err)?;
    w.into_inner().map_err(|e| Failure::internal(e.to_string()))
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn csv_err(e: csv::Error) -> Failure {
    Failure::internal(format!("csv: {e}"))
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Completion, Failure> {
    let scn = sim::scenario(cfg.get("sim.scenario"))?;
    let id = functional(cfg, scn.functional)?;
    if id != scn.functional {
        return Err(Failure::validation(format!(
            "scenario {} estimates {}, config asks for {id}",
            scn.id, scn.functional
        )));
    }
    let n: usize = cfg.parse("sim.n")?;
    let reps: usize = cfg.parse("sim.reps")?;
    let design = match cfg.get("sim.design") {
        "resample" => TrainingDesign::Resample,
        "fixed" => TrainingDesign::Fixed {
            n_train: cfg.parse("sim.n_train")?,
        },
        other => return Err(Failure::validation(format!("sim.design = '{other}': expected resample or fixed"))),
    };
    let nuisance = match cfg.get("sim.nuisance") {
        "config" => StudyNuisance::Config,
        "truth" => StudyNuisance::Truth,
        "b_correct" => StudyNuisance::BCorrect,
        "p_correct" => StudyNuisance::PCorrect,
        other => {
            return Err(Failure::validation(format!(
                "sim.nuisance = '{other}': expected config, truth, b_correct or p_correct"
            )))
        }
    };
    if cfg.get("nuisance.method") == "plugin" {
        return Err(Failure::validation("nuisance.method = plugin is not available in simulations"));
    }
    let fraction: f64 = cfg.parse("estimator.split_fraction")?;
    let n_est = match design {
        TrainingDesign::Resample => n_est_for(n, fraction),
        TrainingDesign::Fixed { .. } => n,
    };
    let estimator = estimator_config(cfg, id, scn.d, n_est)?;
    let study = StudyConfig {
        n,
        reps,
        seed: cfg.seed()?,
        estimator,
        design,
        nuisance,
        tuning: StudyTuning::AsConfigured,
    };
    let budget: f64 = cfg.parse("sim.budget_minutes")?;
    let t0 = Instant::now();
    let result = run_study(&scn, &study)?;
    let minutes = t0.elapsed().as_secs_f64() / 60.0;
    if minutes > budget {
        eprintln!("warning: study took {minutes:.1} min, over the {budget} min budget");
    }

    let dir = out_dir(cfg)?;
    let header = cfg.header()?;
    let mut rows = Vec::new();
    result.write_rows_csv(&mut rows)?;
    let mut agg = Vec::new();
    result.write_aggregate_csv(&mut agg, true)?;
    write_artifact(&dir.join("replications.csv"), &header, &rows)?;
    write_artifact(&dir.join("aggregate.csv"), &header, &agg)?;
    write_resolved(&dir, cfg)?;

    let failed = result.rows.iter().filter(|r| r.report.is_none()).count();
    println!(
        "{}: psi = {}, efficiency bound = {}, {} reps ({} failed)",
        scn.id,
        format_f64(result.psi_true),
        format_f64(result.efficiency_bound),
        reps,
        failed
    );
    for a in &result.aggregates {
        println!(
            "  {:<8} bias {:>+.5}  sd {:.5}  rmse {:.5}{}",
            a.estimator,
            a.bias,
            a.sd,
            a.rmse,
            a.coverage.map(|c| format!("  coverage {c:.3}")).unwrap_or_default()
        );
    }
    Ok(Completion::Ok)
}

/// A row of an aggregate file plus where it came from.
struct AggRow {
    source: String,
    fields: Vec<String>,
}

impl AggRow {
    fn col(&self, name: &str) -> &str {
        let i = AGGREGATE_COLUMNS.iter().position(|c| *c == name).expect("aggregate column");
        &self.fields[i]
    }

    fn num(&self, name: &str) -> f64 {
        self.col(name).parse().unwrap_or(f64::NAN)
    }

    fn key(&self, names: &[&str]) -> Vec<String> {
        names.iter().map(|n| self.col(n).to_string()).collect()
    }
}

fn read_aggregate(path: &Path) -> Result<Vec<AggRow>, Failure> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Failure::validation(format!("cannot read {}: {e}", path.display())))?;
    let headers: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if headers != AGGREGATE_COLUMNS {
        return Err(Failure::validation(format!(
            "schema mismatch in {}: expected columns {}",
            path.display(),
            AGGREGATE_COLUMNS.join(",")
        )));
    }
    rdr.records()
        .map(|r| {
            let r = r.map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
            Ok(AggRow {
                source: path.display().to_string(),
                fields: r.iter().map(str::to_string).collect(),
            })
        })
        .collect()
}

/// Least-squares log-log slope of `y` on `x` within groups sharing `key`.
fn grouped_slopes(rows: &[AggRow], key: &[&str], x: &str, y: impl Fn(&AggRow) -> f64) -> Vec<f64> {
    let mut groups: BTreeMap<Vec<String>, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let g = groups.entry(r.key(key)).or_default();
        g.0.push(r.num(x));
        g.1.push(y(r));
    }
    rows.iter()
        .map(|r| {
            let (xs, ys) = &groups[&r.key(key)];
            log_log_slope(xs, ys)
        })
        .collect()
}

pub const REPORT_EXTRA: [&str; 4] = ["source", "slope_bias_vs_k", "slope_rmse_vs_n", "slope_opdist_vs_n_train"];

pub fn cmd_report(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<Completion, Failure> {
    if inputs.is_empty() {
        return Err(Failure::validation("report needs at least one aggregate CSV"));
    }
    let mut rows = Vec::new();
    for p in inputs {
        rows.extend(read_aggregate(p)?);
    }
    let base = ["scenario", "functional", "variant", "design", "nuisance", "estimator"];
    let with_n: Vec<&str> = base.iter().copied().chain(["n_est"]).collect();
    let with_k: Vec<&str> = base.iter().copied().chain(["k"]).collect();
    let bias_k = grouped_slopes(&rows, &with_n, "k", |r| r.num("bias").abs());
    let rmse_n = grouped_slopes(&rows, &base, "n_est", |r| r.num("rmse"));
    let dist_n = grouped_slopes(&rows, &with_k, "n_train", |r| r.num("mean_op_distance"));

    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        let ka = (rows[a].col("variant"), rows[a].col("scenario"), rows[a].num("n_est") as u64);
        let kb = (rows[b].col("variant"), rows[b].col("scenario"), rows[b].num("n_est") as u64);
        ka.cmp(&kb)
    });

    let mut w = csv_writer();
    let header: Vec<&str> = AGGREGATE_COLUMNS.iter().copied().chain(REPORT_EXTRA).collect();
    w.write_record(&header).map_err(csv_err)?;
    for &i in &order {
        let r = &rows[i];
        let mut rec = r.fields.clone();
        rec.push(r.source.clone());
        for v in [bias_k[i], rmse_n[i], dist_n[i]] {
            rec.push(format_f64(v));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let body = w.into_inner().map_err(|e| Failure::internal(e.to_string()))?;
    let dir = out_dir(cfg)?;
    write_artifact(&dir.join("comparison.csv"), &cfg.header()?, &body)?;
    write_resolved(&dir, cfg)?;

    println!("{:<10} {:<10} {:>7} {:>5} {:<9} {:>11} {:>10} {:>9}", "variant", "scenario", "n_est", "k", "estimator", "bias", "rmse", "coverage");
    for &i in &order {
        let r = &rows[i];
        println!(
            "{:<10} {:<10} {:>7} {:>5} {:<9} {:>11.6} {:>10.6} {:>9}",
            r.col("variant"),
            r.col("scenario"),
            r.col("n_est"),
            r.col("k"),
            r.col("estimator"),
            r.num("bias"),
            r.num("rmse"),
            r.col("coverage")
        );
    }
    Ok(Completion::Ok)
}

pub fn cmd_basis_inspect(cfg: &RunConfig, preset: Option<&str>, at: Option<&str>) -> Result<Completion, Failure> {
    let spec = match preset {
        Some(p) => p.parse::<BasisSpec>()?,
        None => {
            if cfg.is_auto("basis.k") {
                return Err(Failure::validation("basis-inspect needs --basis or an explicit basis.k"));
            }
            let d = if cfg.is_auto("data.dim") { 1 } else { cfg.parse("data.dim")? };
            let fam = family(cfg, "basis.family")?;
            let order = if fam == Family::Haar { 0 } else { cfg.parse("basis.degree")? };
            realize_k(fam, d, order, cfg.parse("basis.k")?)?
        }
    };
    let basis = build_basis(&spec)?;
    let mut text = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(text, "basis            {spec}");
    let _ = writeln!(text, "family           {}", spec.family_name());
    let _ = writeln!(text, "dimension        {}", spec.dim);
    let _ = writeln!(text, "per_dim          {}", spec.per_dim);
    let _ = writeln!(text, "size             {}", spec.size());
    let _ = writeln!(text, "cells_per_dim    {}", spec.cells_per_dim());
    let _ = writeln!(text, "locality_const   {}", format_f64(basis.locality_constant()));
    if let Some(at) = at {
        let x = at
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| Failure::validation(format!("--at '{s}': {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if x.len() != spec.dim {
            return Err(Failure::validation(format!("--at has {} coordinates, basis has d = {}", x.len(), spec.dim)));
        }
        let z = basis.evaluate(&x)?;
        let vals: Vec<String> = z.iter().map(|v| format_f64(*v)).collect();
        let _ = writeln!(text, "z({at}) = {}", vals.join(","));
    }
    let dir = out_dir(cfg)?;
    if cfg.flag("gram.save")? {
        let g = quadrature_gram(&basis, &|_: &[f64]| 1.0, &quadrature(cfg, spec.dim)?)?;
        let mut buf = Vec::new();
        g.write_binary(&mut buf)?;
        fs::write(dir.join("gram_uniform.bin"), buf)?;
        let _ = writeln!(text, "gram_eig_range   {} {}", format_f64(g.eig_min), format_f64(g.eig_max));
    }
    write_artifact(&dir.join("inspect.txt"), &cfg.header()?, text.as_bytes())?;
    write_resolved(&dir, cfg)?;
    print!("{text}");
    Ok(Completion::Ok)
}
