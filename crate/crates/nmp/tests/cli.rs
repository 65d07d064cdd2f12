//! End-to-end runs of the `nmp` binary on tiny cubes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use nmp::manifest::RunManifest;
use nmp::trajectory_file::{load_trajectory, save_trajectory, Sidecar};
use serde_json::Value;

const CONFIG: &str = r#"{
  "cube": {"n_per_axis": 3, "edge_length": 0.5},
  "gen": {"n_train": 3, "n_val": 2, "n_frames": 24, "velocity_max": [2, 2, -0.5], "seed": 5},
  "sim": {"substeps": 10},
  "train": {"epochs_pretrain": 2, "epochs_finetune": 1, "horizon_cap": 12, "reset_min": 4, "reset_max": 8,
            "constitutive_hidden": [8, 8], "seed": 3}
}"#;

fn nmp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmp")).args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = nmp(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

/// Dataset plus the three two-stage checkpoints, built once.
fn workspace() -> &'static Workspace {
    static WS: OnceLock<Workspace> = OnceLock::new();
    WS.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        std::fs::write(root.join("cfg.json"), CONFIG).unwrap();
        ok(&["gen-data", "--config", "cfg.json", "--out", "data"], &root);
        ok(&["train", "constitutive", "--config", "cfg.json", "--data", "data", "--out", "ck"], &root);
        ok(&["train", "integration", "--config", "cfg.json", "--data", "data", "--out", "ck"], &root);
        ok(
            &[
                "train", "finetune", "--config", "cfg.json", "--data", "data",
                "--constitutive", "neural:ck/constitutive.nmpc", "--integration", "neural:ck/integration.nmpc", "--out", "ck",
            ],
            &root,
        );
        Workspace { _tmp: tmp, root }
    })
}

fn files_under(dir: &Path, ext: &[&str]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| ext.iter().any(|e| x == *e)) {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn same_files(a: &Path, b: &Path, ext: &[&str]) {
    let fa = files_under(a, ext);
    assert_eq!(fa, files_under(b, ext));
    assert!(!fa.is_empty());
    for f in &fa {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{}", f.display());
    }
}

#[test]
fn gen_data_counts_seeds_and_determinism() {
    let ws = workspace();
    let data = ws.root.join("data");
    let train = files_under(&data.join("train"), &["nmpt"]);
    let val = files_under(&data.join("val"), &["nmpt"]);
    assert_eq!((train.len(), val.len()), (3, 2));
    let mut seeds: Vec<u64> = files_under(&data, &["json"])
        .iter()
        .filter(|p| p.starts_with("train") || p.starts_with("val"))
        .map(|p| serde_json::from_slice::<Sidecar>(&std::fs::read(data.join(p)).unwrap()).unwrap().seed)
        .collect();
    seeds.sort();
    seeds.dedup();
    assert_eq!(seeds, vec![5, 6, 7, 8, 9]);

    let again = ws.root.join("data_again");
    let out = Command::new(env!("CARGO_BIN_EXE_nmp"))
        .args(["gen-data", "--config", "cfg.json", "--out", "data_again"])
        .env("NMP_THREADS", "2")
        .current_dir(&ws.root)
        .output()
        .unwrap();
    assert!(out.status.success());
    same_files(&data, &again, &["nmpt"]);
    let sidecars = |d: &Path| files_under(d, &["json"]).into_iter().filter(|p| !p.to_string_lossy().contains("manifest")).count();
    assert_eq!(sidecars(&data), sidecars(&again));
}

#[test]
fn manifest_replays_the_run() {
    let ws = workspace();
    let text = std::fs::read_to_string(ws.root.join("data/gen-data.manifest.json")).unwrap();
    let m: RunManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(m.command, "gen-data");
    assert_eq!(m.seed, 5);
    assert_eq!(m.outputs.len(), 1 + 5);
    assert!(m.finished_unix_ms >= m.started_unix_ms);

    let train: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(ws.root.join("ck/finetune.manifest.json")).unwrap()).unwrap();
    assert_eq!(train.inputs.len(), 2 + 1 + 5);
    let stale: Vec<String> = train
        .inputs
        .iter()
        .filter(|i| nmp::atomic::sha256_file(&ws.root.join(&i.path)).unwrap() != i.sha256)
        .map(|i| i.path.clone())
        .collect();
    assert!(stale.is_empty(), "{stale:?}");

    // the snapshot alone reproduces the generated data
    std::fs::write(ws.root.join("snapshot.json"), serde_json::to_string(&m.config).unwrap()).unwrap();
    ok(&["gen-data", "--config", "snapshot.json", "--out", "data_replay"], &ws.root);
    same_files(&ws.root.join("data"), &ws.root.join("data_replay"), &["nmpt"]);
}

#[test]
fn training_is_reproducible() {
    let ws = workspace();
    ok(&["train", "constitutive", "--config", "cfg.json", "--data", "data", "--out", "ck_again"], &ws.root);
    assert_eq!(
        std::fs::read(ws.root.join("ck/constitutive.nmpc")).unwrap(),
        std::fs::read(ws.root.join("ck_again/constitutive.nmpc")).unwrap()
    );
    assert_eq!(
        std::fs::read(ws.root.join("ck/constitutive_metrics.csv")).unwrap(),
        std::fs::read(ws.root.join("ck_again/constitutive_metrics.csv")).unwrap()
    );
    for stage in ["constitutive", "integration", "finetune"] {
        assert!(ws.root.join(format!("ck/{stage}.nmpc")).exists());
    }
    let csv = std::fs::read_to_string(ws.root.join("ck/constitutive_metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
}

#[test]
fn remaining_stages_run() {
    let ws = workspace();
    ok(
        &[
            "train", "positions-only", "--config", "cfg.json", "--data", "data",
            "--constitutive", "neural:ck/finetune.nmpc", "--integration", "neural:ck/finetune.nmpc", "--out", "ck2",
        ],
        &ws.root,
    );
    ok(&["train", "joint-scratch", "--config", "cfg.json", "--data", "data", "--out", "ck2"], &ws.root);
    // joint training from scratch gets the combined epoch budget
    let csv = std::fs::read_to_string(ws.root.join("ck2/joint-scratch_metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
}

#[test]
fn prerequisite_and_capability_errors() {
    let ws = workspace();
    let out = nmp(&["train", "finetune", "--config", "cfg.json", "--data", "data", "--out", "x"], &ws.root);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrained"));
    let out = nmp(
        &[
            "train", "finetune", "--config", "cfg.json", "--data", "data",
            "--constitutive", "neural:missing.nmpc", "--integration", "neural:ck/integration.nmpc", "--out", "x",
        ],
        &ws.root,
    );
    assert_eq!(code(&out), 1);

    // forceless copy of the training split
    let bare = ws.root.join("bare");
    for split in ["train", "val"] {
        std::fs::create_dir_all(bare.join(split)).unwrap();
        for f in files_under(&ws.root.join("data").join(split), &["nmpt"]) {
            let t = load_trajectory(&ws.root.join("data").join(split).join(&f)).unwrap();
            save_trajectory(&bare.join(split).join(&f), &t.without_forces()).unwrap();
        }
    }
    std::fs::copy(ws.root.join("data/mesh.json"), bare.join("mesh.json")).unwrap();
    let out = nmp(&["train", "constitutive", "--config", "cfg.json", "--data", "bare", "--out", "x"], &ws.root);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("forces"));
}

#[test]
fn usage_and_config_errors() {
    let ws = workspace();
    std::fs::write(ws.root.join("empty.json"), r#"{"gen": {"n_train": 0, "n_val": 0}}"#).unwrap();
    let out = nmp(&["gen-data", "--config", "empty.json", "--out", "nothing"], &ws.root);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing to generate"));
    assert_eq!(code(&nmp(&["frobnicate"], &ws.root)), 1);
    assert_eq!(code(&nmp(&["--help"], &ws.root)), 0);
    std::fs::write(ws.root.join("typo.json"), r#"{"trian": {}}"#).unwrap();
    assert_eq!(code(&nmp(&["make-mesh", "--config", "typo.json", "--out", "m.json"], &ws.root)), 1);
    let out = nmp(
        &["eval", "--data", "data", "--constitutive", "semi-implicit", "--integration", "semi-implicit", "--out", "e.json"],
        &ws.root,
    );
    assert_eq!(code(&out), 1);
    let out = Command::new(env!("CARGO_BIN_EXE_nmp"))
        .args(["make-mesh", "--out", "m.json"])
        .env("NMP_THREADS", "zero")
        .current_dir(&ws.root)
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert_eq!(code(&nmp(&["eval", "--data", "nowhere", "--constitutive", "analytic", "--integration", "semi-implicit", "--out", "e.json"], &ws.root)), 2);
}

fn report(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn eval_ground_truth_against_itself() {
    let ws = workspace();
    ok(
        &[
            "eval", "--config", "cfg.json", "--data", "data", "--constitutive", "analytic", "--integration",
            "semi-implicit", "--horizons", "6,12,24", "--out", "ev/gt.json",
        ],
        &ws.root,
    );
    let r = report(&ws.root.join("ev/gt.json"));
    let trajs = r["trajectories"].as_array().unwrap();
    assert_eq!(trajs.len(), 2);
    for t in trajs {
        let rows = t["rmse"].as_array().unwrap();
        assert_eq!(rows.len(), 3);
        for row in rows {
            assert_eq!(row["rmse"].as_f64().unwrap(), 0.0);
        }
        assert_eq!(t["violations_per_frame"].as_array().unwrap().len(), 25);
    }
    assert_eq!(r["aggregate"].as_array().unwrap().len(), 3);
    assert!(ws.root.join("ev/gt.manifest.json").exists());
}

#[test]
fn eval_neural_with_timing() {
    let ws = workspace();
    ok(
        &[
            "eval", "--config", "cfg.json", "--data", "data", "--constitutive", "neural:ck/finetune.nmpc", "--integration",
            "neural:ck/finetune.nmpc", "--horizons", "6,12", "--timing", "3", "--out", "ev/nn.json",
        ],
        &ws.root,
    );
    let r = report(&ws.root.join("ev/nn.json"));
    assert!(r["ms_per_1000_frames"].as_f64().unwrap() > 0.0);
    for a in r["aggregate"].as_array().unwrap() {
        assert!(a["rmse_mean"].as_f64().unwrap() > 0.0);
        assert!(a["rmse_std"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn coarse_checkpoint_runs_on_finer_mesh() {
    let ws = workspace();
    std::fs::write(
        ws.root.join("fine.json"),
        CONFIG.replace("\"n_per_axis\": 3", "\"n_per_axis\": 4").replace("\"n_train\": 3, \"n_val\": 2", "\"n_train\": 0, \"n_val\": 1"),
    )
    .unwrap();
    ok(&["gen-data", "--config", "fine.json", "--out", "fine"], &ws.root);
    ok(
        &[
            "eval", "--config", "fine.json", "--data", "fine", "--constitutive", "neural:ck/finetune.nmpc", "--integration",
            "neural:ck/finetune.nmpc", "--horizons", "24", "--out", "ev/fine.json",
        ],
        &ws.root,
    );
    let r = report(&ws.root.join("ev/fine.json"));
    assert!(r["trajectories"][0]["divergence_frame"].is_null());
    // a trajectory on a different mesh is rejected
    let out = nmp(
        &[
            "eval", "--config", "cfg.json", "--data", "fine", "--mesh", "data/mesh.json", "--constitutive", "analytic",
            "--integration", "semi-implicit", "--out", "ev/bad.json",
        ],
        &ws.root,
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn rollout_writes_trajectory_and_surfaces() {
    let ws = workspace();
    ok(
        &[
            "rollout", "--config", "cfg.json", "--constitutive", "analytic", "--integration", "semi-implicit:5e-5:10",
            "--mesh", "data/mesh.json", "--initial", "data/val/traj_0000.nmpt", "--frames", "24", "--obj-every", "8",
            "--out", "ro/gt.nmpt",
        ],
        &ws.root,
    );
    assert_eq!(
        std::fs::read(ws.root.join("ro/gt.nmpt")).unwrap(),
        std::fs::read(ws.root.join("data/val/traj_0000.nmpt")).unwrap()
    );
    assert_eq!(files_under(&ws.root.join("ro/gt.obj"), &["obj"]).len(), 4);
}

#[test]
fn divergence_exit_code() {
    let ws = workspace();
    std::fs::write(
        ws.root.join("coarse_dt.json"),
        r#"{"cube": {"n_per_axis": 3, "edge_length": 0.5}, "sim": {"dt_frame": 0.05, "substeps": 1}, "material": {"young": 5e7}}"#,
    )
    .unwrap();
    let out = nmp(
        &[
            "rollout", "--config", "coarse_dt.json", "--constitutive", "analytic", "--integration", "semi-implicit",
            "--initial", "data/val/traj_0000.nmpt", "--frames", "50", "--out", "ro/blowup.nmpt",
        ],
        &ws.root,
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let partial = load_trajectory(&ws.root.join("ro/blowup.nmpt")).unwrap();
    assert!(partial.len() < 51);
}
