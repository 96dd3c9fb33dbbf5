use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn rof(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rof")).args(args).output().expect("spawn rof")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

// Phi-1 style geometry: 16 pairs, p_max 2048. Pairs 11..15 sit just above
// their lower bound with a large key radius; the rest are small and acute.
fn write_spec(dir: &Path) -> PathBuf {
    let theta = |i: usize| 10000f64.powf(-2.0 * i as f64 / 32.0);
    let pairs: Vec<String> = (0..16)
        .map(|i| {
            if i >= 11 {
                let lb = PI + 2048.0 * theta(i) / 2.0;
                format!(r#"{{"phi": {}, "q_radius": 2.0, "k_radius": 8.0}}"#, lb + 0.2)
            } else {
                r#"{"phi": 1.0, "q_radius": 1.0, "k_radius": 1.0}"#.to_string()
            }
        })
        .collect();
    let spec = format!(
        r#"{{"model_name": "toy", "n_layers": 2, "n_heads": 2, "n_positions": 24, "seed": 7, "pairs": [{}]}}"#,
        pairs.join(",")
    );
    let path = dir.join("spec.json");
    fs::write(&path, spec).unwrap();
    path
}

fn synth(dir: &Path) -> PathBuf {
    let spec = write_spec(dir);
    let out = dir.join("toy.rkd");
    let o = rof(&[
        "synth", "--spec", p(&spec), "--output", p(&out), "--head-dim", "64", "--rotary-dim", "32", "--p-max",
        "2048",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn bounds_from_flags_lists_eligible_pairs() {
    let o = rof(&["bounds", "--base", "10000", "--rotary-dim", "32", "--p-max", "2048"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("eligible pairs: 11,12,13,14,15"), "{text}");
    assert!(text.contains("31.25%"), "{text}");
    assert!(text.contains("Mean LB: 3.9269"), "{text}");
}

#[test]
fn synth_then_recall_finds_all_features() {
    let dir = TempDir::new().unwrap();
    let dump = synth(dir.path());
    let o = rof(&["recall", "--input", p(&dump)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("min_radius,positives,ub_recall,lb_recall,lb_relaxed_recall"));
    // 2 layers x 2 heads x 5 large pairs, all above both bounds.
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[1], "20");
    for v in &first[2..] {
        assert!((v.parse::<f64>().unwrap() - 1.0).abs() < 1e-12, "{text}");
    }
}

#[test]
fn classify_pools_multiple_inputs() {
    let dir = TempDir::new().unwrap();
    let dump = synth(dir.path());
    let one = stdout(&rof(&["classify", "--input", p(&dump)]));
    let two = stdout(&rof(&["classify", "--input", p(&dump), p(&dump)]));
    assert_eq!(one.lines().count(), 1 + 2 * 2 * 16);
    assert_eq!(two.lines().count(), 1 + 2 * (2 * 2 * 16));
}

#[test]
fn decompose_with_exclusions_adds_column() {
    let dir = TempDir::new().unwrap();
    let dump = synth(dir.path());
    let o = rof(&[
        "decompose", "--input", p(&dump), "--layer", "1", "--head", "0", "--positions", "64", "--exclude-features",
        "11,12",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let header = text.lines().next().unwrap();
    assert!(header.ends_with("total_excluding"), "{header}");
    assert_eq!(text.lines().count(), 1 + 65);
}

#[test]
fn decompose_writes_attention_and_sinks() {
    let dir = TempDir::new().unwrap();
    let dump = synth(dir.path());
    let svg = dir.path().join("attn.svg");
    let csv = dir.path().join("attn.csv");
    let sinks = dir.path().join("sinks.csv");
    let o = rof(&[
        "decompose", "--input", p(&dump), "--layer", "0", "--head", "1", "--positions", "32", "--output",
        p(&dir.path().join("d.csv")), "--attention-svg", p(&svg), "--attention-csv", p(&csv), "--full",
        "--sink-pair", "12", "--sinks-output", p(&sinks),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    assert!(fs::read_to_string(&csv).unwrap().starts_with("m,n,weight"));
    let s = fs::read_to_string(&sinks).unwrap();
    assert_eq!(s.lines().count(), 1 + 24);
}

#[test]
fn svg_outputs() {
    let dir = TempDir::new().unwrap();
    let dump = synth(dir.path());
    let heat = stdout(&rof(&["heatmap", "--input", p(&dump)]));
    assert!(heat.contains("<svg") && heat.contains("class=\"cell\""));
    assert!(heat.contains("sep-half") && heat.contains("sep-rotary"));
    let scatter = stdout(&rof(&["scatter", "--input", p(&dump)]));
    assert_eq!(scatter.matches("class=\"panel\"").count(), 16);
    assert_eq!(scatter.matches("class=\"bound\"").count(), 5);
}

#[test]
fn compare_extension_runs() {
    let dir = TempDir::new().unwrap();
    let dump = synth(dir.path());
    let deltas = dir.path().join("deltas.csv");
    let sums = dir.path().join("sums.csv");
    let o = rof(&[
        "compare-extension", "--base-input", p(&dump), "--ext-input", p(&dump), "--ext-p-max", "8192",
        "--output", p(&deltas), "--sums-output", p(&sums),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d = fs::read_to_string(&deltas).unwrap();
    assert_eq!(d.lines().count(), 1 + 2 * 2 * 16);
    // Longer context shrinks the eligible set, so some features must drop out.
    assert!(d.contains("dropped_candidate"), "{d}");
    assert!(fs::read_to_string(&sums).unwrap().lines().count() > 1);
}

#[test]
fn inspect_and_stats() {
    let dir = TempDir::new().unwrap();
    let dump = synth(dir.path());
    let text = stdout(&rof(&["inspect", "--input", p(&dump)]));
    assert!(text.contains("model: toy") && text.contains("rotary_dim: 32"));
    let o = rof(&["stats", "--input", p(&dump), "--exclude-positions", "0,1"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 1 + 2 * 2 * 16);
    let spread = rof(&["stats", "--input", p(&dump), "--spread-pair", "13"]);
    assert!(spread.status.success());
    assert_eq!(stdout(&spread).lines().count(), 1 + 2 * 2);
}

#[test]
fn outputs_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = synth(dir.path());
    let a_bytes = fs::read(&a).unwrap();
    let b = synth(dir.path());
    assert_eq!(a_bytes, fs::read(&b).unwrap());
    for args in [vec!["classify"], vec!["scatter"], vec!["heatmap"], vec!["stats"]] {
        let mut full = args.clone();
        full.extend(["--input", p(&a)]);
        assert_eq!(rof(&full).stdout, rof(&full).stdout, "{args:?}");
    }
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(rof(&["bounds", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(rof(&["--help"]).status.code(), Some(0));

    let missing = dir.path().join("missing.rkd");
    let o = rof(&["inspect", "--input", p(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("read dump"));

    let junk = dir.path().join("junk.rkd");
    fs::write(&junk, b"NOPE\0\0\0\0").unwrap();
    assert_eq!(rof(&["classify", "--input", p(&junk)]).status.code(), Some(2));

    let dump = synth(dir.path());
    let o = rof(&["decompose", "--input", p(&dump), "--layer", "9", "--head", "0"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(rof(&["bounds", "--base", "0.5", "--rotary-dim", "32", "--p-max", "2048"]).status.code(), Some(3));
}
