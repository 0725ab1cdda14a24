use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn mrp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrp"))
        .args(args)
        .env_remove("MRP_RUN_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// File contents under `dir`, keyed by relative path, without the manifest.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, d: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                if rel != Path::new("manifest.json") {
                    out.insert(rel, std::fs::read(&path).unwrap());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn quick(out: &Path, extra: &[&str]) -> Output {
    let cfg = fixtures().join("config.toml");
    let mut args = vec![
        "run", "--config", p(&cfg), "--out", p(out), "--chains", "2", "--warmup", "120",
        "--iters", "100", "--spec", "C", "--quiet",
    ];
    args.extend(extra);
    mrp(&args)
}

#[test]
fn simulate_reproduces_the_shipped_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mrp(&[
        "simulate", "--out", p(tmp.path()), "--zips", "8", "--counties", "3", "--weeks", "12",
        "--tested-share", "0.2", "--seed", "2021",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["records.csv", "population.csv", "crosswalk.csv", "tracts.csv"] {
        assert_eq!(
            std::fs::read(tmp.path().join(f)).unwrap(),
            std::fs::read(fixtures().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn full_fixture_run_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixtures().join("config.toml");
    let mut snaps = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let o = mrp(&["run", "--config", p(&cfg), "--out", p(&dir), "--quiet"]);
        assert!(o.status.success(), "{}", stderr(&o));
        snaps.push(snapshot(&dir));
    }
    assert!(snaps[0].contains_key(Path::new("report/report.json")));
    assert_eq!(snaps[0].keys().collect::<Vec<_>>(), snaps[1].keys().collect::<Vec<_>>());
    for (k, v) in &snaps[0] {
        assert!(v == &snaps[1][k], "{} differs", k.display());
    }
}

#[test]
fn stages_one_by_one_and_rerun_after_deletion() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let f = fixtures();
    let o = mrp(&[
        "preprocess",
        "--out", p(&dir),
        "--input", p(&f.join("records.csv")),
        "--acs", p(&f.join("population.csv")),
        "--crosswalk", p(&f.join("crosswalk.csv")),
        "--tracts", p(&f.join("tracts.csv")),
        "--seed", "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["accepted"].as_u64().unwrap() > 4000);
    assert!(stderr(&o).contains("rows rejected"));
    for f in ["cells.csv", "poststrat.csv", "geo.csv", "report.json"] {
        assert!(dir.join("preprocess").join(f).exists(), "{f}");
    }

    let out = p(&dir);
    let steps: [&[&str]; 5] = [
        &["describe", "--out", out],
        &["fit", "--out", out, "--spec", "C", "--chains", "2", "--warmup", "100", "--iters", "100", "-q"],
        &["diagnose", "--out", out],
        &["poststratify", "--out", out, "--grouping", "overall", "--grouping", "county:week"],
        &["report", "--out", out],
    ];
    for args in steps {
        let o = mrp(args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    assert!(dir.join("poststratify/C").exists());
    let before = snapshot(&dir.join("poststratify"));
    std::fs::remove_dir_all(dir.join("poststratify")).unwrap();
    let o = mrp(&["poststratify", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(snapshot(&dir.join("poststratify")), before);

    // report needs poststratify again after it was redone
    let o = mrp(&["report", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn missing_crosswalk_names_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let f = fixtures();
    let gone = tmp.path().join("nope.csv");
    let (run, records, acs, tracts) = (
        tmp.path().join("run"),
        f.join("records.csv"),
        f.join("population.csv"),
        f.join("tracts.csv"),
    );
    let base = [
        "preprocess",
        "--out", p(&run),
        "--input", p(&records),
        "--acs", p(&acs),
        "--tracts", p(&tracts),
    ];
    let mut args = base.to_vec();
    args.extend(["--crosswalk", p(&gone)]);
    let o = mrp(&args);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("--crosswalk not found"), "{}", stderr(&o));
    assert!(stderr(&o).contains("[preprocess]"));

    // a fresh run directory, since the first attempt's config is kept in its manifest
    let fresh = tmp.path().join("fresh");
    let mut args = base.to_vec();
    args[2] = p(&fresh);
    let o = mrp(&args);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("missing input path --crosswalk"), "{}", stderr(&o));
}

#[test]
fn exit_codes_by_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");

    assert_eq!(mrp(&["fit", "--bogus"]).status.code(), Some(2));

    let o = mrp(&["fit", "--out", p(&dir)]);
    assert_eq!(o.status.code(), Some(7), "{}", stderr(&o));

    std::fs::write(dir.join(".lock"), "1").unwrap();
    let o = mrp(&["describe", "--out", p(&dir)]);
    assert_eq!(o.status.code(), Some(8), "{}", stderr(&o));
    std::fs::remove_file(dir.join(".lock")).unwrap();

    let o = quick(&tmp.path().join("bad"), &["--spec", "Z"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = mrp(&["fit", "--out", p(&dir), "--chains", "0"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn run_dir_defaults_to_env() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("from-env");
    let f = fixtures();
    let o = Command::new(env!("CARGO_BIN_EXE_mrp"))
        .args([
            "preprocess",
            "--input", p(&f.join("records.csv")),
            "--acs", p(&f.join("population.csv")),
            "--crosswalk", p(&f.join("crosswalk.csv")),
            "--tracts", p(&f.join("tracts.csv")),
        ])
        .env("MRP_RUN_DIR", &dir)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("manifest.json").exists());
}
