// The gistlab binary end to end: exit codes, outputs, determinism.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn manifests() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("manifests")
}

fn gistlab(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gistlab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("GISTLAB_OUT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        let p = e.path();
        if p.is_dir() {
            for (k, v) in tree(&p) {
                out.insert(format!("{}/{k}", e.file_name().to_string_lossy()), v);
            }
        } else {
            out.insert(e.file_name().to_string_lossy().into_owned(), fs::read(&p).unwrap());
        }
    }
    out
}

#[test]
fn empty_grid_writes_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let m = manifests().join("empty_grid.toml");
    let o = gistlab(tmp.path(), &["run", m.to_str().unwrap(), "--out", "out"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("out/grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(csv.starts_with("N,xi,source"));
}

#[test]
fn malformed_manifest_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "kind = \"synthpool-grid\"\n[synthpool.settings]\nstepz = 3\n").unwrap();
    let o = gistlab(tmp.path(), &["run", "bad.toml", "--out", "out"]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stepz"), "{err}");
    assert!(!tmp.path().join("out").exists());

    let o = gistlab(tmp.path(), &["run", "bad.toml", "--set", "synthpool.settings.steps=x"]);
    assert_eq!(code(&o), 2);
}

const GRID_HEADER: &str = "N,xi,source,regime,mask,heads,gist_positions,best_accuracy,best_lr,steps\n";

fn grid_row(xi: usize, regime: &str, mask: &str, acc: f64) -> String {
    format!("128,{xi},HYPERSPHERE,{regime},{mask},1/1,SEQUENTIAL,{acc},0.001,100\n")
}

#[test]
fn summarize_single_row() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("g.csv"), format!("{GRID_HEADER}{}", grid_row(8, "FIXED", "POOL", 0.93))).unwrap();
    let o = gistlab(tmp.path(), &["summarize", "g.csv"]);
    assert_eq!(code(&o), 0);
    let agg = fs::read_to_string(tmp.path().join("aggregate.csv")).unwrap();
    let mut r = csv::Reader::from_reader(agg.as_bytes());
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 1);
    let h = r.headers().unwrap().clone();
    let col = |name: &str| h.iter().position(|c| c == name).unwrap();
    assert_eq!(&rows[0][col("rows")], "1");
    assert_eq!(rows[0][col("mean")].parse::<f64>().unwrap(), 0.93);
}

#[test]
fn summarize_mean_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let accs = [0.91, 0.97, 0.955];
    let mut body = GRID_HEADER.to_string();
    for (xi, a) in [1, 2, 4].iter().zip(accs) {
        body += &grid_row(*xi, "FIXED", "POOL", a);
    }
    body += &grid_row(1, "VARIABLE", "POOL", 0.99);
    body += &grid_row(1, "VARIABLE", "STANDARD", 0.40);
    fs::write(tmp.path().join("good.csv"), &body).unwrap();
    let o = gistlab(tmp.path(), &["summarize", "good.csv", "--out", "agg.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));

    // mean over the two xi = 1 POOL rows, computed here
    let agg = fs::read_to_string(tmp.path().join("agg.csv")).unwrap();
    let mut r = csv::Reader::from_reader(agg.as_bytes());
    let h = r.headers().unwrap().clone();
    let col = |name: &str| h.iter().position(|c| c == name).unwrap();
    let row = r
        .records()
        .map(|x| x.unwrap())
        .find(|x| &x[col("group")] == "POOL" && &x[col("xi")] == "1")
        .unwrap();
    let want = (0.91 + 0.99) / 2.0;
    assert!((row[col("mean")].parse::<f64>().unwrap() - want).abs() < 1e-12);

    // one pool cell below threshold
    fs::write(tmp.path().join("low.csv"), body.replace("0.955", "0.85")).unwrap();
    let o = gistlab(tmp.path(), &["summarize", "low.csv", "--out", "agg2.csv"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("VIOLATION"));

    // the standard mask catching up with its pool twin
    fs::write(tmp.path().join("gap.csv"), body.replace("0.4", "0.8")).unwrap();
    assert_eq!(code(&gistlab(tmp.path(), &["summarize", "gap.csv", "--out", "agg3.csv"])), 1);

    fs::write(tmp.path().join("cols.csv"), "N,xi\n1,1\n").unwrap();
    let o = gistlab(tmp.path(), &["summarize", "cols.csv"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("cols.csv"));
}

#[test]
fn reruns_are_byte_identical_and_stay_in_the_out_dir() {
    for name in ["pool_mask_smoke.toml", "recall_smoke.toml"] {
        let tmp = tempfile::tempdir().unwrap();
        let m = manifests().join(name);
        let m = m.to_str().unwrap();
        // a few steps cannot meet the accuracy checks, so violations (exit 1) are allowed here
        let first = code(&gistlab(tmp.path(), &["run", m, "--out", "a", "--jobs", "1"]));
        assert!(first == 0 || first == 1, "{name}: exit {first}");
        assert_eq!(code(&gistlab(tmp.path(), &["run", m, "--out", "b", "--jobs", "3"])), first);
        let a = tree(&tmp.path().join("a"));
        assert!(a.contains_key("stamp.json") && a.contains_key("checks.csv"));
        assert_eq!(a, tree(&tmp.path().join("b")), "{name}");
        let top: Vec<String> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
        let mut top = top;
        top.sort();
        assert_eq!(top, ["a", "b"]);
    }
}

#[test]
fn export_mask_writes_text_and_bits() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gistlab(tmp.path(), &["export-mask", "--mask", "gist-pool", "--n-ctx", "4", "--xi", "2", "--out", "m", "--name", "gp"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(tmp.path().join("m/gp.txt")).unwrap();
    assert_eq!(text, include_str!("fixtures/gist-pool_n4_xi2.txt"));
    assert!(tmp.path().join("m/gp.bits").exists());

    let o = gistlab(tmp.path(), &["export-mask", "--mask", "gist-pool", "--n-ctx", "4", "--knobs", "{\"pooling_windowz\": 1}"]);
    assert_eq!(code(&o), 2);
}
