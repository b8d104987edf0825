use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ddnet_core::datagen::{InterconnectionData, LocalData, NodeDataset};
use nalgebra::DMatrix;

fn ddnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddnet")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn small_campaign(dir: &Path) -> Output {
    ddnet(&[
        "campaign",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "11",
        "--set",
        "k=4",
        "--set",
        "extra_edges=1",
        "--set",
        "trials=3",
        "--set",
        "algorithm=alg2",
        "--set",
        "keep_node_results=true",
    ])
}

#[test]
fn unknown_verb_is_a_usage_error() {
    assert_eq!(code(&ddnet(&["frobnicate"])), 2);
    assert_eq!(code(&ddnet(&[])), 2);
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{ not json").unwrap();
    let out = ddnet(&["campaign", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    fs::write(&path, r#"{"k": 0}"#).unwrap();
    assert_eq!(code(&ddnet(&["campaign", "--config", path.to_str().unwrap()])), 2);
    assert_eq!(code(&ddnet(&["synth"])), 2);
}

#[test]
fn zero_excitation_synthesis_is_rejected() {
    let (n, m, p, samples) = (2, 1, 1, 20);
    let local = LocalData::new(
        DMatrix::zeros(n, samples),
        DMatrix::zeros(n, samples),
        DMatrix::zeros(m, samples),
        DMatrix::zeros(p, samples),
        DMatrix::zeros(p, samples),
    )
    .unwrap();
    // Informative neighbor data, so only the local data is degenerate.
    let y_tilde = DMatrix::from_fn(2, samples, |r, c| ((3 * c + 7 * r) as f64).sin());
    let v_tilde = DMatrix::from_row_slice(1, 2, &[-1.5, 1.5]) * &y_tilde;
    let inter = InterconnectionData::new(v_tilde, y_tilde, vec![0, 1]).unwrap();
    let data = NodeDataset {
        node: 0,
        samples,
        samples_tilde: samples,
        eps_l: 1e-3,
        eps_g: 1e-3,
        local,
        interconnection: inter,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("node.json");
    fs::write(&path, data.to_json().unwrap()).unwrap();
    let out = ddnet(&["synth", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("synth.json").exists());
}

#[test]
fn campaign_simulate_and_verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_campaign(dir.path());
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("campaign.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "header plus one row per trial");
    assert!(dir.path().join("summary.json").exists());

    let artifact = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_str().unwrap().starts_with("trial_"));
    let Some(artifact) = artifact else {
        panic!("no feasible trial in the small campaign");
    };
    let art = artifact.to_str().unwrap();
    let sim_dir = dir.path().join("sim");
    let sim = ddnet(&["simulate", "--config", art, "--out", sim_dir.to_str().unwrap(), "--set", "steps=200"]);
    assert_eq!(code(&sim), 0, "stderr: {}", String::from_utf8_lossy(&sim.stderr));
    let traj = fs::read_dir(&sim_dir).unwrap().next().unwrap().unwrap().path();
    assert!(fs::read_to_string(traj).unwrap().lines().count() > 200);

    let ver = ddnet(&["verify", "--config", art, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&ver), 0, "stderr: {}", String::from_utf8_lossy(&ver.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);

    assert_eq!(code(&ddnet(&["simulate", "--config", art, "--set", "noise=maybe"])), 2);
}
