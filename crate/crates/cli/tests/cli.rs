use std::path::Path;
use std::process::{Command, Output};

use flowguide::io::{read_slat, write_ffld, write_slat, ClustersFile, CorrespondenceFile, FeatureFile};
use flowguide::partition::FeatureField;
use flowguide::slat::{init_latent_state, StructuredLatent};
use flowguide::Matrix;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowguide"))
        .args(args)
        .current_dir(dir)
        .env_remove("FLOWGUIDE_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// A shape with one voxel per feature row, along the x axis.
fn write_points(dir: &Path, name: &str, rows: &[&[f64]]) {
    let cells: Vec<[u32; 3]> = (0..rows.len() as u32).map(|i| [i, 0, 0]).collect();
    let shape = StructuredLatent::from_positions(32, 1, &cells).unwrap();
    let features = Matrix::from_vec(rows.len(), rows[0].len(), rows.concat());
    let file = FeatureFile::for_shape(&shape, FeatureField::new(name, features).unwrap()).unwrap();
    write_ffld(&dir.join(format!("{name}.ffld")), &file).unwrap();
    write_slat(&dir.join(format!("{name}.slat")), &shape).unwrap();
}

fn labels(dir: &Path, source: usize) -> Vec<usize> {
    ClustersFile::read(&dir.join("clusters.json")).unwrap().sources[source].labels.clone()
}

#[test]
fn cluster_two_pairs() {
    let dir = tempfile::tempdir().unwrap();
    write_points(dir.path(), "p", &[&[0.0, 0.0], &[0.1, 0.0], &[10.0, 0.0], &[10.1, 0.0]]);
    ok(dir.path(), &["cluster", "--features", "p.ffld", "--k", "2", "--seed", "4"]);
    let l = labels(dir.path(), 0);
    assert_eq!(l[0], l[1]);
    assert_eq!(l[2], l[3]);
    assert_ne!(l[0], l[2]);
}

#[test]
fn cluster_k_one_and_k_all() {
    let dir = tempfile::tempdir().unwrap();
    write_points(dir.path(), "p", &[&[1.0], &[2.0], &[6.0]]);
    ok(dir.path(), &["cluster", "--features", "p.ffld", "--k", "1"]);
    let file = ClustersFile::read(&dir.path().join("clusters.json")).unwrap();
    assert_eq!(file.sources[0].labels, vec![0, 0, 0]);
    assert_eq!(file.centroids, vec![vec![3.0]]);

    ok(dir.path(), &["cluster", "--features", "p.ffld", "--k", "3"]);
    let file = ClustersFile::read(&dir.path().join("clusters.json")).unwrap();
    let mut l = file.sources[0].labels.clone();
    l.sort();
    assert_eq!(l, vec![0, 1, 2]);
    assert_eq!(file.sources[0].inertia, 0.0);

    let out = run(dir.path(), &["cluster", "--features", "p.ffld", "--k", "4"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn cosegment_shares_cluster_ids() {
    let dir = tempfile::tempdir().unwrap();
    write_points(dir.path(), "q", &[&[1.0, 0.0], &[1.0, 0.05]]);
    write_points(dir.path(), "a", &[&[1.0, 0.02], &[0.0, 1.0], &[0.05, 1.0], &[1.0, 0.0]]);
    ok(dir.path(), &["cluster", "--features", "q.ffld", "--features", "a.ffld", "--k", "2"]);
    let (q, a) = (labels(dir.path(), 0), labels(dir.path(), 1));
    assert_eq!(q[0], q[1]);
    assert_eq!(a, vec![q[0], 1 - q[0], 1 - q[0], q[0]]);
}

fn correspond_args<'a>(q: &'a str, a: &'a str, mode: &'a str) -> Vec<String> {
    [
        "correspond",
        "--query-slat", &format!("{q}.slat"),
        "--query-features", &format!("{q}.ffld"),
        "--appearance-slat", &format!("{a}.slat"),
        "--appearance-features", &format!("{a}.ffld"),
        "--mode", mode,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn ok_owned(dir: &Path, args: &[String]) -> String {
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(dir, &args)
}

fn target(dir: &Path) -> Vec<usize> {
    CorrespondenceFile::read(&dir.join("correspondence.json")).unwrap().target
}

#[test]
fn correspond_identity_and_global_nn() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--seed", "2"]);
    ok_owned(d, &correspond_args("query", "query", "coseg_nn"));
    let t = target(d);
    assert_eq!(t, (0..t.len()).collect::<Vec<_>>());

    write_points(d, "q", &[&[1.0, 0.0], &[0.0, 1.0]]);
    write_points(d, "a", &[&[0.9, 0.1], &[0.1, 0.9]]);
    ok_owned(d, &correspond_args("q", "a", "global_nn"));
    assert_eq!(target(d), vec![0, 1]);
}

#[test]
fn swapped_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth"]);
    let mut args = correspond_args("query", "appearance", "coseg_nn");
    args.swap(4, 8);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(code(&run(d, &args)), 2);

    // a correspondence built for other shapes is refused by transfer
    ok_owned(d, &correspond_args("appearance", "query", "global_nn"));
    std::fs::write(
        d.join("run.json"),
        r#"{"query_slat": "query.slat", "guidance": {"objective": "appearance"},
            "appearance": {"slat": "appearance.slat", "correspondence": "correspondence.json"}}"#,
    )
    .unwrap();
    let out = run(d, &["transfer", "--config", "run.json", "--steps", "3"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest"));
}

fn synth_with_correspondence(d: &Path) {
    ok(d, &["synth", "--seed", "5", "--channels", "3"]);
    ok_owned(d, &correspond_args("query", "appearance", "coseg_nn"));
    std::fs::write(
        d.join("run.json"),
        r#"{"query_slat": "query.slat",
            "velocity": {"kind": "gaussian", "mean": [0.5, 0, -0.5], "std": 0.8},
            "sampler": {"steps": 40, "seed": 8},
            "guidance": {"objective": "appearance", "inner_steps": 3},
            "appearance": {"slat": "appearance.slat", "correspondence": "correspondence.json"}}"#,
    )
    .unwrap();
}

#[test]
fn zero_weight_transfer_equals_sample() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_with_correspondence(d);
    ok(d, &["transfer", "--config", "run.json", "--weight", "0", "--out-dir", "t"]);
    ok(d, &["sample", "--config", "run.json", "--out-dir", "s"]);
    assert_eq!(
        std::fs::read(d.join("t/result.slat")).unwrap(),
        std::fs::read(d.join("s/result.slat")).unwrap()
    );
    // with guidance on, the output moves
    ok(d, &["transfer", "--config", "run.json", "--out-dir", "g"]);
    assert_ne!(
        std::fs::read(d.join("g/result.slat")).unwrap(),
        std::fs::read(d.join("s/result.slat")).unwrap()
    );
}

#[test]
fn transfer_reports_decreasing_appearance_loss() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_with_correspondence(d);
    ok(d, &["transfer", "--config", "run.json", "--weight", "1"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    let records = report["records"].as_array().unwrap();
    assert_eq!(records.len(), 40);
    for r in records {
        assert!(r["loss_after"].as_f64().unwrap() < r["loss_before"].as_f64().unwrap());
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("transfer.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["sampler"], 8);
    assert_eq!(manifest["outputs"].as_object().unwrap().len(), 3);
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 4);
}

#[test]
fn missing_target_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_with_correspondence(d);
    std::fs::remove_file(d.join("correspondence.json")).unwrap();
    assert_eq!(code(&run(d, &["transfer", "--config", "run.json"])), 2);
    std::fs::write(d.join("bad.json"), r#"{"query_slat": "query.slat", "sampler": {"seeds": 1}}"#).unwrap();
    assert_eq!(code(&run(d, &["transfer", "--config", "bad.json"])), 2);
}

#[test]
fn one_step_zero_field_echoes_noise() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--channels", "2"]);
    ok(d, &["sample", "--query-slat", "query.slat", "--steps", "1", "--seed", "12"]);
    let shape = read_slat(&d.join("query.slat")).unwrap();
    let noise = init_latent_state(&shape, 12).values.map(|v| f64::from(v as f32));
    assert_eq!(read_slat(&d.join("result.slat")).unwrap().latents(), &noise);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth"]);
    let sample = |seed: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_flowguide"));
        cmd.args(["sample", "--query-slat", "query.slat", "--steps", "1", "--out-dir", out]).current_dir(d);
        match seed {
            Some(s) => cmd.env("FLOWGUIDE_SEED", s),
            None => cmd.env_remove("FLOWGUIDE_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(d.join(out).join("result.slat")).unwrap()
    };
    ok(d, &["sample", "--query-slat", "query.slat", "--steps", "1", "--seed", "31", "--out-dir", "flag"]);
    assert_eq!(sample(Some("31"), "env"), std::fs::read(d.join("flag/result.slat")).unwrap());
    assert_ne!(sample(None, "none"), std::fs::read(d.join("flag/result.slat")).unwrap());
}

#[test]
fn gradcheck_passes_and_fails_by_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let stdout = ok(d, &["gradcheck", "--instances", "100"]);
    assert_eq!(stdout.matches("max rel err").count(), 6);
    let out = run(d, &["gradcheck", "--instances", "5", "--target", "structure_all_pairs", "--threshold", "1e-30"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn eval_aggregate_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("ranks.jsonl"),
        concat!(
            r#"{"object_id": "a", "view_id": "1", "criterion": "fidelity", "ranks": {"ours": 1, "base": 2}}"#, "\n",
            r#"{"object_id": "a", "view_id": "2", "criterion": "fidelity", "ranks": {"ours": 2, "base": 1}}"#, "\n",
            r#"{"object_id": "b", "view_id": "1", "criterion": "fidelity", "ranks": {"ours": 1, "base": 2}}"#, "\n",
            r#"{"object_id": "a", "view_id": "1", "criterion": "overall", "ranks": {"ours": 1, "base": 2}}"#, "\n",
        ),
    )
    .unwrap();
    let csv = ok(d, &["eval-aggregate", "--records", "ranks.jsonl", "--format", "csv"]);
    // ours: object a (1 + 2)/2 = 1.5, object b 1 → 1.25
    assert_eq!(csv, "method,fidelity,overall\nbase,1.75,2.00\nours,1.25,1.00\n");
    assert_eq!(std::fs::read_to_string(d.join("ranks.csv")).unwrap(), csv);

    std::fs::write(d.join("bad.jsonl"), "{\"object_id\": \"a\"}\n").unwrap();
    assert_eq!(code(&run(d, &["eval-aggregate", "--records", "bad.jsonl"])), 2);
}

#[test]
fn export_ply_and_train_toy() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth"]);
    ok(d, &["export-ply", "--slat", "query.slat"]);
    assert!(std::fs::read_to_string(d.join("result.ply")).unwrap().starts_with("ply\n"));

    let out = ok(d, &["train-toy", "--mean=1,-1", "--std", "0.5", "--steps", "200", "--eval-samples", "500"]);
    assert!(out.contains("held-out velocity MSE"));
    std::fs::write(
        d.join("run.json"),
        r#"{"query_slat": "query.slat", "velocity": {"kind": "trained", "params": "params.json"},
            "sampler": {"steps": 5}}"#,
    )
    .unwrap();
    // the synthetic chair has 8 channels; the toy field has 2
    assert_eq!(code(&run(d, &["sample", "--config", "run.json"])), 2);
}

#[test]
fn usage_errors_and_help() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["frobnicate"])), 1);
    assert_eq!(code(&run(d, &["cluster", "--features", "x.ffld", "--bogus"])), 1);
    assert_eq!(code(&run(d, &["sample"])), 1);
    let help = ok(d, &["transfer", "--help"]);
    for flag in ["--config", "--seed", "--steps", "--weight", "--out", "--ply", "--out-dir"] {
        assert!(help.contains(flag), "{flag}");
    }
    let help = ok(d, &["correspond", "--help"]);
    for flag in ["--query-slat", "--query-features", "--appearance-slat", "--appearance-features", "--mode", "--clusters"] {
        assert!(help.contains(flag), "{flag}");
    }
}
