use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn hoif(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hoif"))
        .args(args)
        .current_dir(cwd)
        .env_remove("HOIF_SEED")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let lines = data_lines(path);
    let text = lines.join("\n");
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let idx = rdr.headers().unwrap().iter().position(|h| h == name).unwrap();
    rdr.records().map(|r| r.unwrap()[idx].to_string()).collect()
}

#[test]
fn fixture_config_reproduces_golden_report() {
    let out = tempfile::tempdir().unwrap();
    let o = hoif(&["estimate", "-c", "estimate.cfg", "-o", out.path().to_str().unwrap()], &fixtures());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let got = fs::read_to_string(out.path().join("estimate.csv")).unwrap();
    let want = fs::read_to_string(fixtures().join("golden_estimate.csv")).unwrap();
    assert_eq!(got, want);
    for f in ["estimate.txt", "resolved_config.txt"] {
        assert!(fs::read_to_string(out.path().join(f)).unwrap().starts_with("# hoif "));
    }
}

#[test]
fn missing_covariate_column_is_a_validation_error() {
    let out = tempfile::tempdir().unwrap();
    let o = hoif(
        &["estimate", "-c", "estimate.cfg", "--set", "data.dim=2", "-o", out.path().to_str().unwrap()],
        &fixtures(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("column X2 absent"), "{}", stderr(&o));
}

#[test]
fn forced_zero_convention_exits_three_and_still_writes() {
    let out = tempfile::tempdir().unwrap();
    let o = hoif(
        &["estimate", "-c", "estimate.cfg", "--set", "estimator.eigen_floor=1e30", "-o", out.path().to_str().unwrap()],
        &fixtures(),
    );
    assert_eq!(o.status.code(), Some(3));
    let csv = out.path().join("estimate.csv");
    assert_eq!(column(&csv, "psi_hat"), vec!["0.0"]);
    assert_eq!(column(&csv, "zero_convention"), vec!["1"]);
}

#[test]
fn unknown_keys_and_bad_values_rejected() {
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().to_str().unwrap();
    let o = hoif(&["estimate", "-c", "estimate.cfg", "--set", "basis.kk=4", "-o", dir], &fixtures());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown config key 'basis.kk'"));
    let o = hoif(&["estimate", "-c", "estimate.cfg", "--set", "estimator.variant=best", "-o", dir], &fixtures());
    assert_eq!(o.status.code(), Some(2));
    let bad = out.path().join("bad.cfg");
    fs::write(&bad, "seed = 1\nnot.a.key = 2\n").unwrap();
    let o = hoif(&["estimate", "-c", bad.to_str().unwrap(), "-o", dir], &fixtures());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":2: unknown config key 'not.a.key'"), "{}", stderr(&o));
}

#[test]
fn malformed_rows_name_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    fs::write(&csv, "A,Y,X1\n1,0,0.2\n1,x,0.3\n").unwrap();
    let o = hoif(&["estimate", "-i", csv.to_str().unwrap(), "-o", dir.path().to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 2, column Y"), "{}", stderr(&o));

    fs::write(&csv, "A,Y,X1\n1,0,0.2\n1,1,1.3\n").unwrap();
    let o = hoif(&["estimate", "-i", csv.to_str().unwrap(), "-o", dir.path().to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("outside [0, 1]"), "{}", stderr(&o));
}

#[test]
fn seed_precedence_file_env_flag() {
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().to_str().unwrap();
    let seed_line = |o: &Output| {
        assert!(o.status.success(), "{}", stderr(o));
        fs::read_to_string(out.path().join("resolved_config.txt"))
            .unwrap()
            .lines()
            .find(|l| l.starts_with("seed = "))
            .unwrap()
            .to_string()
    };
    let o = hoif(&["estimate", "-c", "estimate.cfg", "-o", dir], &fixtures());
    assert_eq!(seed_line(&o), "seed = 3");
    let o = Command::new(env!("CARGO_BIN_EXE_hoif"))
        .args(["estimate", "-c", "estimate.cfg", "-o", dir])
        .current_dir(fixtures())
        .env("HOIF_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(seed_line(&o), "seed = 11");
    let o = Command::new(env!("CARGO_BIN_EXE_hoif"))
        .args(["estimate", "-c", "estimate.cfg", "--seed", "12", "-o", dir])
        .current_dir(fixtures())
        .env("HOIF_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(seed_line(&o), "seed = 12");
}

#[test]
fn gram_cache_round_trip() {
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().to_str().unwrap();
    let o = hoif(&["estimate", "-c", "estimate.cfg", "--set", "gram.save=true", "-o", dir], &fixtures());
    assert!(o.status.success(), "{}", stderr(&o));
    let bin = fs::read(out.path().join("omega_hat_arm0.bin")).unwrap();
    assert_eq!(&bin[..4], b"HGRM");
    assert_eq!(bin.len(), 16 + 8 * 4);
    let first = column(&out.path().join("estimate.csv"), "psi_hat");

    let again = tempfile::tempdir().unwrap();
    let load = format!("gram.load={dir}");
    let o = hoif(
        &["estimate", "-c", "estimate.cfg", "--set", &load, "-o", again.path().to_str().unwrap()],
        &fixtures(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(column(&again.path().join("estimate.csv"), "psi_hat"), first);
}

#[test]
fn simulate_rejects_single_replication() {
    let out = tempfile::tempdir().unwrap();
    let o = hoif(&["simulate", "--scenario", "S4", "--reps", "1", "-o", out.path().to_str().unwrap()], out.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("reps ≥ 2"));
    let o = hoif(&["simulate", "--scenario", "S9", "-o", out.path().to_str().unwrap()], out.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_is_reproducible_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |dir: &Path, threads: &str| {
        let o = hoif(
            &[
                "simulate",
                "--scenario",
                "S4",
                "--reps",
                "40",
                "--n",
                "600",
                "--seed",
                "21",
                "--threads",
                threads,
                "--set",
                "basis.k=4",
                "-o",
                dir.to_str().unwrap(),
            ],
            dir,
        );
        assert!(o.status.success(), "{}", stderr(&o));
    };
    run(a.path(), "1");
    run(b.path(), "3");
    // resolved_config.txt differs only in output.dir, which the header hash skips
    for f in ["replications.csv", "aggregate.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let coverage = column(&a.path().join("aggregate.csv"), "coverage");
    assert!(coverage.last().unwrap().parse::<f64>().is_ok(), "{coverage:?}");
    assert_eq!(data_lines(&a.path().join("replications.csv")).len(), 41);
}

fn two_sizes(root: &Path) -> (PathBuf, PathBuf) {
    let mut paths = Vec::new();
    for n in ["400", "1600"] {
        let dir = root.join(n);
        let o = hoif(
            &[
                "simulate",
                "--scenario",
                "S4",
                "--reps",
                "20",
                "--n",
                n,
                "--set",
                "nuisance.method=zero",
                "--set",
                "basis.k=4",
                "--set",
                "estimator.m=2",
                "-o",
                dir.to_str().unwrap(),
            ],
            root,
        );
        assert!(o.status.success(), "{}", stderr(&o));
        paths.push(dir.join("aggregate.csv"));
    }
    (paths[0].clone(), paths[1].clone())
}

#[test]
fn report_passthrough_and_two_point_slopes() {
    let root = tempfile::tempdir().unwrap();
    let (small, large) = two_sizes(root.path());
    let single = root.path().join("single");
    let o = hoif(&["report", small.to_str().unwrap(), "-o", single.to_str().unwrap()], root.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let merged = single.join("comparison.csv");
    assert!(column(&merged, "slope_rmse_vs_n").iter().all(|s| s == "NaN"));
    assert_eq!(column(&merged, "rmse"), column(&small, "rmse"));

    let both = root.path().join("both");
    let o = hoif(
        &["report", small.to_str().unwrap(), large.to_str().unwrap(), "-o", both.to_str().unwrap()],
        root.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let merged = both.join("comparison.csv");
    let est = column(&merged, "estimator");
    let rmse = column(&merged, "rmse");
    let n = column(&merged, "n_est");
    let slope = column(&merged, "slope_rmse_vs_n");
    let rows: Vec<usize> = (0..est.len()).filter(|&i| est[i] == "psi_hat").collect();
    assert_eq!(rows.len(), 2);
    let (i, j) = (rows[0], rows[1]);
    let val = |v: &Vec<String>, i: usize| v[i].parse::<f64>().unwrap();
    let expect = (val(&rmse, j).ln() - val(&rmse, i).ln()) / (val(&n, j).ln() - val(&n, i).ln());
    assert!((val(&slope, i) - expect).abs() < 1e-12);
    assert_eq!(slope[i], slope[j]);
}

#[test]
fn report_rejects_other_schemas() {
    let root = tempfile::tempdir().unwrap();
    let o = hoif(
        &["report", fixtures().join("mar.csv").to_str().unwrap(), "-o", root.path().to_str().unwrap()],
        root.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("schema mismatch"));
}

#[test]
fn basis_inspect_reports_and_evaluates() {
    let out = tempfile::tempdir().unwrap();
    let o = hoif(
        &[
            "basis-inspect",
            "--basis",
            "haar:d=1,L=1",
            "--at",
            "0.3",
            "--set",
            "gram.save=true",
            "-o",
            out.path().to_str().unwrap(),
        ],
        out.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("size             4"));
    assert!(text.contains("z(0.3) = 1.0,1.0,-1.4142135623730951,0.0"), "{text}");
    let bin = fs::read(out.path().join("gram_uniform.bin")).unwrap();
    assert_eq!(bin.len(), 16 + 8 * 16);
    let o = hoif(&["basis-inspect", "--basis", "haar:d=1", "-o", out.path().to_str().unwrap()], out.path());
    assert_eq!(o.status.code(), Some(2));
}
