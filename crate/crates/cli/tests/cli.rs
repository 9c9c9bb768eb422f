mod common;

use std::path::Path;
use std::process::{Command, Output};

use concept_lab::conceptor::Decomposition;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_concept-lab")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(bin(&[]).status.code(), Some(2));
    assert_eq!(bin(&["decompose"]).status.code(), Some(2));
    assert_eq!(bin(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(dir.path());
    // a missing subject checkpoint is an input error
    let o = bin(&["decompose", "--out", out, "--concept", "gleeb"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("subject"));

    common::workspace(dir.path());
    let o = bin(&["decompose", "--out", out, "--concept", "gleeb", "--n", "0"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let o = bin(&["decompose", "--out", out, "--concept", "nothing"]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"lambda": 1}"#).unwrap();
    let o = bin(&["decompose", "--out", out, "--concept", "gleeb", "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda"));
}

#[test]
fn decompose_then_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(dir.path());
    common::workspace(dir.path());
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, serde_json::to_vec(&common::tiny_config()).unwrap()).unwrap();
    let o = bin(&["decompose", "--out", out, "--concept", "wump", "--config", path_str(&cfg), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let id = text.lines().find_map(|l| l.strip_prefix("decomposition ")).unwrap().to_string();
    let path = dir.path().join("decompositions").join(format!("{id}.json"));
    let dec = Decomposition::load(&path).unwrap();
    assert_eq!(dec.seed, 3);
    assert_eq!(dec.content_id().unwrap(), id);
    // one registry record per subject training or decomposition
    assert_eq!(std::fs::read_dir(dir.path().join("registry")).unwrap().count(), 1);

    let o = bin(&["inspect", path_str(&path)]);
    assert!(o.status.success());
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), dec.ranked.len());
    for (i, (line, r)) in lines.iter().zip(&dec.ranked).enumerate() {
        let parts: Vec<&str> = line.split(' ').collect();
        assert_eq!(parts.len(), 3, "{line}");
        assert_eq!(parts[0], (i + 1).to_string());
        assert_eq!(parts[1], r.token);
        assert_eq!(parts[2].parse::<f64>().unwrap(), r.coefficient);
    }
}

#[test]
fn zero_scale_matches_single_image_removal() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(dir.path());
    let (ws, _, id) = common::workspace(dir.path());
    let dec_path = ws.decomposition_path(&id);
    let dec = Decomposition::load(&dec_path).unwrap();
    let token = &dec.ranked[1].token;

    let o = bin(&["single-image", "--out", out, "--decomposition", path_str(&dec_path), "--seed", "4", "--tau", "0.9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let si = dir.path().join("single-image").join("gleeb-4");
    for f in ["result.json", "reference.png", "final.png"] {
        assert!(si.join(f).exists(), "{f}");
    }

    let o = bin(&["manipulate", "--out", out, "--decomposition", path_str(&dec_path), "--seed", "4", "--token", token, "--scale", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    let written = line.trim().split_once(' ').unwrap().1.to_string();
    assert_eq!(std::fs::read(&written).unwrap(), std::fs::read(si.join(format!("without_{token}.png"))).unwrap());

    // unit scale reproduces the reference image
    let o = bin(&["manipulate", "--out", out, "--decomposition", path_str(&dec_path), "--seed", "4", "--edit", &format!("{token}=1")]);
    assert!(o.status.success());
    let written = stdout(&o).trim().split_once(' ').unwrap().1.to_string();
    assert_eq!(std::fs::read(&written).unwrap(), std::fs::read(si.join("reference.png")).unwrap());

    let o = bin(&["manipulate", "--out", out, "--decomposition", path_str(&dec_path), "--token", token]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn debias_writes_a_derived_decomposition() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(dir.path());
    let (ws, _, id) = common::workspace(dir.path());
    let dec_path = ws.decomposition_path(&id);
    let dec = Decomposition::load(&dec_path).unwrap();
    let token = dec.ranked[0].token.clone();
    let o = bin(&["debias", "--out", out, "--decomposition", path_str(&dec_path), "--token", &token, "--factor", "0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let new_id = stdout(&o).lines().find_map(|l| l.strip_prefix("decomposition ").map(String::from)).unwrap();
    assert_ne!(new_id, id);
    let derived = ws.load_decomposition(&new_id).unwrap().unwrap();
    let c = derived.ranked.iter().find(|r| r.token == token).unwrap().coefficient;
    assert_eq!(c, 0.5 * dec.ranked[0].coefficient);
}

#[test]
fn gen_data_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(dir.path());
    let o = bin(&["gen-data", "--out", out, "--per-concept", "2", "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("data/manifest.json").exists());
    assert_eq!(std::fs::read_dir(dir.path().join("data/gleeb")).unwrap().count(), 2);

    // unreadable study files are runtime failures
    let o = bin(&["report", "--out", out, path_str(&dir.path().join("missing.json"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn baseline_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(dir.path());
    common::workspace(dir.path());
    let cfg = dir.path().join("basis.json");
    std::fs::write(&cfg, r#"{"images": 4, "timesteps": [2, 5]}"#).unwrap();
    let o = bin(&["baseline", "pca", "--out", out, "--concept", "gleeb", "--n-components", "3", "--count", "2", "--config", path_str(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let study = dir.path().join("baseline/gleeb-pca/study.json");
    assert!(study.exists());
    let report_dir = dir.path().join("report");
    let o = bin(&["report", "--out", path_str(&report_dir), path_str(&study)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(report_dir.join("report.json").exists());
    assert!(report_dir.join("tables/baselines.csv").exists());
}
