use lkshape_cli::commands::{FitOutput, SelectOutput, TestOutput};
use lkshape_cli::io::{parse_dataset, ShapesFile};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lkshape"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn lkshape")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "lkshape {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let path = dir.join(name);
    let mut args = vec!["simulate", "--seed", "11", "--out", p(&path)];
    args.extend_from_slice(extra);
    ok(&args);
    path
}

#[test]
fn group_map_preserved() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &["--group", "small:3:2,1", "--group", "large:2:2,1"]);
    let ds = parse_dataset(&data).unwrap();
    let groups = ds.groups();
    assert_eq!(groups["small"].len(), 3);
    assert_eq!(groups["large"].len(), 2);
    assert_eq!((ds.n_landmarks, ds.dim), (4, 2));
}

#[test]
fn extract_output_round_trips_into_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &["--group", "a:25:3,1"]);
    let shapes = dir.path().join("shapes.json");
    ok(&["extract", "--input", p(&data), "--out", p(&shapes)]);
    let text = std::fs::read_to_string(&shapes).unwrap();
    let parsed = ShapesFile::from_json(&text).unwrap();
    assert!(parsed.to_json() == text, "shapes JSON changed on re-serialization");
    assert_eq!(parsed.specimens.len(), 25);

    // fitting the JSON and the CSV directly must agree
    let from_json = dir.path().join("f1.json");
    let from_csv = dir.path().join("f2.json");
    ok(&["fit", "--input", p(&shapes), "--family", "gaussian", "--out", p(&from_json)]);
    ok(&["fit", "--input", p(&data), "--family", "gaussian", "--out", p(&from_csv)]);
    let a: FitOutput = serde_json::from_str(&std::fs::read_to_string(&from_json).unwrap()).unwrap();
    let b: FitOutput = serde_json::from_str(&std::fs::read_to_string(&from_csv).unwrap()).unwrap();
    assert_eq!(a.fits, b.fits);
    assert_eq!(a.n, 25);
}

#[test]
fn theta_whitening_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let theta = dir.path().join("theta.csv");
    std::fs::write(&theta, "2.0,0.6\n0.6,0.5\n").unwrap();
    let plain = simulate(dir.path(), "plain.csv", &["--group", "a:10:3,1"]);
    let warped = simulate(dir.path(), "warped.csv", &["--group", "a:10:3,1", "--theta", p(&theta)]);
    let s_plain = dir.path().join("s1.json");
    let s_warped = dir.path().join("s2.json");
    ok(&["extract", "--input", p(&plain), "--out", p(&s_plain)]);
    ok(&["extract", "--input", p(&warped), "--theta", p(&theta), "--out", p(&s_warped)]);
    let a = ShapesFile::from_json(&std::fs::read_to_string(&s_plain).unwrap()).unwrap();
    let b = ShapesFile::from_json(&std::fs::read_to_string(&s_warped).unwrap()).unwrap();
    assert!(b.theta.is_some());
    for (x, y) in a.specimens.iter().zip(&b.specimens) {
        let (x, y) = (x.shape.as_ref().unwrap(), y.shape.as_ref().unwrap());
        assert!((x.r - y.r).abs() < 1e-9 * x.r);
        for (u, v) in x.w.iter().zip(&y.w) {
            assert!((u - v).abs() < 1e-9);
        }
    }
}

#[test]
fn degenerate_specimen_reported_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &["--group", "a:12:3,1"]);
    let mut text = std::fs::read_to_string(&data).unwrap();
    for l in 1..=4 {
        for d in 1..=2 {
            text.push_str(&format!("zz,a,{l},{d},5.0\n"));
        }
    }
    std::fs::write(&data, text).unwrap();
    let shapes = dir.path().join("s.json");
    ok(&["extract", "--input", p(&data), "--out", p(&shapes)]);
    let s = ShapesFile::from_json(&std::fs::read_to_string(&shapes).unwrap()).unwrap();
    let bad = s.specimens.iter().find(|e| e.specimen == "zz").unwrap();
    assert!(bad.flags.degenerate && bad.shape.is_none() && bad.error.is_some());

    let fit = dir.path().join("f.json");
    ok(&["fit", "--input", p(&shapes), "--family", "gaussian", "--out", p(&fit)]);
    let f: FitOutput = serde_json::from_str(&std::fs::read_to_string(&fit).unwrap()).unwrap();
    assert_eq!(f.skipped, vec!["zz".to_string()]);
    assert_eq!(f.n, 12);
}

#[test]
fn reports_are_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &["--group", "a:20:3,1"]);
    let args = ["select", "--input", p(&data), "--family", "gaussian", "--family", "kotz-t2"];
    let one = bin().args(args).env("LKSHAPE_THREADS", "1").output().unwrap();
    let two = bin().args(args).env("LKSHAPE_THREADS", "2").output().unwrap();
    assert!(one.status.success() && two.status.success());
    assert_eq!(one.stdout, two.stdout);
    assert!(!String::from_utf8_lossy(&one.stdout).contains("time"));
}

#[test]
fn select_three_families_ranked() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &["--group", "a:30:3,1"]);
    let out = ok(&["select", "--input", p(&data)]);
    let s: SelectOutput = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(s.schema_version, 1);
    let sel = &s.selection;
    assert_eq!(sel.fits.len(), 3);
    assert_eq!(sel.ranking.len(), 3);
    assert_eq!(sel.comparisons.len(), 3);
    let best = sel.fits.iter().find(|f| f.family == sel.ranking[0]).unwrap();
    assert!(sel.fits.iter().all(|f| best.bic_star <= f.bic_star));
}

#[test]
fn identical_groups_give_p_one_under_best_family() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &["--group", "a:15:3,1"]);
    let text = std::fs::read_to_string(&data).unwrap();
    let mut doubled = text.clone();
    for line in text.lines().skip(1) {
        doubled.push_str(&line.replacen("a-", "b-", 1).replacen(",a,", ",b,", 1));
        doubled.push('\n');
    }
    std::fs::write(&data, doubled).unwrap();
    let out = ok(&[
        "test", "--input", p(&data), "--family", "gaussian", "--family", "kotz-t2",
    ]);
    let t: TestOutput = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(t.sizes, [15, 15]);
    let sel = t.selection.expect("family chosen by BIC*");
    assert_eq!(t.family, sel.ranking[0]);
    assert!(t.lrt.stat <= 1e-6, "stat {}", t.lrt.stat);
    assert!(t.lrt.p_value >= 0.999);
    assert_eq!(t.lrt.df, 6);
}

fn grid(csv: &str) -> Vec<(String, f64)> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[f.len() - 3].parse().unwrap())
        })
        .collect()
}

#[test]
fn density_overlay_integrates_to_one() {
    let steps = 400;
    let out = ok(&[
        "density", "--nu", "2,0.5", "--landmarks", "4", "--dim", "2", "--family", "gaussian",
        "--family", "kotz-t2", "--steps", "400",
    ]);
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("family,theta_1,density,trunc_degree,tail\n"));
    let rows = grid(&csv);
    assert_eq!(rows.len(), 2 * steps);
    for fam in ["gaussian", "kotz-t2"] {
        let sum: f64 = rows.iter().filter(|r| r.0 == fam).map(|r| r.1).sum();
        let integral = sum * std::f64::consts::FRAC_PI_4 / steps as f64;
        assert!((integral - 1.0).abs() < 1e-3, "{fam}: {integral}");
    }
}

#[test]
fn density_skips_out_of_region_points() {
    let out = ok(&["density", "--nu", "1,0.5", "--landmarks", "4", "--dim", "3", "--steps", "8"]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    let skipped: usize = stderr
        .split_whitespace()
        .nth(1)
        .and_then(|w| w.parse().ok())
        .unwrap_or_else(|| panic!("no skip count in {stderr:?}"));
    let rows = grid(&String::from_utf8(out.stdout).unwrap()).len();
    assert!(skipped > 0);
    assert_eq!(rows + skipped, 64);
}

#[test]
fn density_from_fit_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &["--group", "a:20:3,1"]);
    let fit = dir.path().join("f.json");
    ok(&["fit", "--input", p(&data), "--family", "kotz-t2", "--out", p(&fit)]);
    let out = ok(&["density", "--params", p(&fit), "--steps", "100"]);
    let rows = grid(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r.0 == "kotz-t2" && r.1 >= 0.0));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(
        &bad,
        "specimen_id,group,landmark_index,dim_index,value\na,g,1,1,0\na,g,1,2,0\na,g,2,1,1\na,g,2,2,0\na,g,3,1,0\n",
    )
    .unwrap();
    let out = run(&["extract", "--input", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("landmark 3, dim 2"));

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"famlies": ["gaussian"]}"#).unwrap();
    assert_eq!(run(&["fit", "--config", p(&cfg), "--input", p(&bad)]).status.code(), Some(2));
    assert_eq!(run(&["fit", "--family", "cauchy"]).status.code(), Some(2));
    assert_eq!(run(&["fit"]).status.code(), Some(2));

    // a series cut off long before convergence is a numerical failure
    let out = run(&[
        "density", "--nu", "8,4", "--landmarks", "4", "--dim", "2", "--max-degree", "3",
        "--steps", "4",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = bin()
        .args(["density", "--nu", "1", "--landmarks", "4", "--dim", "2"])
        .env("LKSHAPE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_drives_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &["--group", "a:15:3,1"]);
    let out_path = dir.path().join("fit.json");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "input": data,
            "families": ["kotz-t3"],
            "output": out_path,
            "optimizer": {"restarts": 1}
        })
        .to_string(),
    )
    .unwrap();
    ok(&["fit", "--config", p(&cfg)]);
    let f: FitOutput = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(f.fits.len(), 1);
    assert_eq!(f.metadata.optimizer.restarts, 1);
    assert_eq!(f.metadata.families[0].to_string(), "kotz-t3");
}
