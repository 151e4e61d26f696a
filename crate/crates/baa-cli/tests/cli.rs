//! End-to-end subprocess tests of the `baa` binary: the full tiny pipeline,
//! artifact layout, idempotent reruns, and the exit-code contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use tempfile::TempDir;

const TINY_CONFIG: &str = r#"
seed = 7
channels = 8

[dataset]
seed = 7
image_size = 16
train_scenes = 2
test_scenes = 1
clutter_per_scene = 6
source_train_sequences = 10
seq_len = 5
target_train_images = 16
test_trajectories = 2
test_traj_len = 6

[pretrain]
epochs = 2
batch_sequences = 5

[adapt]
batch = 8
epochs = 1

[eval]
max_len = 6
refine_iters = 4
"#;

fn baa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_baa"))
        .args(args)
        .output()
        .expect("spawn baa")
}

fn run_ok(args: &[&str]) {
    let out = baa(args);
    assert!(
        out.status.success(),
        "baa {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> String {
    p.to_str().expect("utf-8 path").to_string()
}

/// One pipeline run shared by the read-only tests: dataset, pretrained
/// checkpoint, adapted checkpoint.
struct Pipeline {
    _dir: TempDir,
    config: PathBuf,
    data: PathBuf,
    pre: PathBuf,
    adapt: PathBuf,
}

fn pipeline() -> &'static Pipeline {
    static PIPELINE: OnceLock<Pipeline> = OnceLock::new();
    PIPELINE.get_or_init(|| {
        let dir = TempDir::new().expect("tempdir");
        let config = dir.path().join("tiny.toml");
        std::fs::write(&config, TINY_CONFIG).expect("write config");
        let data = dir.path().join("data");
        let pre = dir.path().join("pre");
        let adapt = dir.path().join("adapt");
        run_ok(&["gen-data", "--config", &s(&config), "--out", &s(&data)]);
        run_ok(&[
            "pretrain",
            "--config",
            &s(&config),
            "--data",
            &s(&data),
            "--out",
            &s(&pre),
        ]);
        run_ok(&[
            "adapt",
            "--config",
            &s(&config),
            "--data",
            &s(&data),
            "--checkpoint",
            &s(&pre.join("checkpoint")),
            "--out",
            &s(&adapt),
        ]);
        Pipeline { _dir: dir, config, data, pre, adapt }
    })
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn visit(root: &Path, sub: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(root.join(sub))
            .expect("read_dir")
            .collect::<Result<_, _>>()
            .expect("entries");
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let rel = sub.join(e.file_name());
            if e.file_type().expect("file_type").is_dir() {
                visit(root, &rel, out);
            } else {
                out.push((rel.clone(), std::fs::read(root.join(rel)).expect("read")));
            }
        }
    }
    let mut out = Vec::new();
    visit(dir, Path::new(""), &mut out);
    out
}

#[test]
fn full_tiny_pipeline_completes_quickly_with_all_artifacts() {
    let t0 = Instant::now();
    let p = pipeline();

    for split in ["source_train", "source_test", "target_train", "target_test"] {
        assert!(p.data.join(split).is_dir(), "missing split {split}");
    }
    assert!(p.data.join("manifest.json").is_file());

    for dir in [&p.pre, &p.adapt] {
        for artifact in [
            "checkpoint/state.json",
            "training_log.csv",
            "metrics.json",
            "ape_vs_length.svg",
            "ape_vs_length.csv",
            "run_manifest.json",
        ] {
            assert!(dir.join(artifact).is_file(), "missing {artifact} in {}", dir.display());
        }
    }

    let log = read(&p.adapt.join("training_log.csv"));
    assert!(log.starts_with("step,V_Dts,V_Dst,GEN_loss,CE_loss,V_F\n"));
    assert!(log.lines().count() > 1, "adaptation logged no steps");

    assert!(t0.elapsed().as_secs() < 300, "tiny pipeline exceeded five minutes");
}

#[test]
fn reruns_into_the_same_directory_are_byte_identical() {
    let p = pipeline();
    let dir = TempDir::new().expect("tempdir");
    let out = dir.path().join("pre");
    let args = [
        "pretrain",
        "--config",
        &s(&p.config),
        "--data",
        &s(&p.data),
        "--out",
        &s(&out),
    ];
    run_ok(&args);
    let first = tree(&out);
    run_ok(&args);
    assert_eq!(first, tree(&out), "pretrain rerun changed artifacts");

    let data2 = dir.path().join("data");
    let gen = ["gen-data", "--config", &s(&p.config), "--out", &s(&data2)];
    run_ok(&gen);
    let first = tree(&data2);
    run_ok(&gen);
    assert_eq!(first, tree(&data2), "gen-data rerun changed artifacts");

    // identical inputs give the same manifest hash across directories
    let a: serde_json::Value = serde_json::from_str(&read(&p.data.join("run_manifest.json")))
        .expect("manifest json");
    let b: serde_json::Value =
        serde_json::from_str(&read(&data2.join("run_manifest.json"))).expect("manifest json");
    assert_eq!(a["inputs_hash"], b["inputs_hash"]);
    assert_eq!(a["command"], b["command"]);
}

#[test]
fn eval_overlays_one_curve_per_checkpoint() {
    let p = pipeline();
    let dir = TempDir::new().expect("tempdir");
    let out = dir.path().join("eval");
    run_ok(&[
        "eval",
        "--config",
        &s(&p.config),
        "--data",
        &s(&p.data),
        "--checkpoint",
        &s(&p.pre.join("checkpoint")),
        "--checkpoint",
        &s(&p.adapt.join("checkpoint")),
        "--out",
        &s(&out),
    ]);

    let svg = read(&out.join("ape_vs_length.svg"));
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains(">pre<") && svg.contains(">adapt<"), "curve labels missing");

    let metrics: serde_json::Value =
        serde_json::from_str(&read(&out.join("metrics.json"))).expect("metrics json");
    let entries = metrics.as_array().expect("array of models");
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0]["label"], "pre");
    assert_eq!(entries[1]["label"], "adapt");
    for e in entries {
        let curve = e["report"]["ape_curve"].as_array().expect("curve");
        assert_eq!(curve.len(), 5, "six-frame trajectories give five post-anchor horizons");
    }

    let csv = read(&out.join("ape_vs_length.csv"));
    assert_eq!(csv.lines().next(), Some("length,pre,adapt"));

    assert!(out.join("training_log.csv").is_file());
    assert!(out.join("training_log.adapt.csv").is_file());
}

#[test]
fn ablate_mode_none_keeps_the_pretrained_network() {
    let p = pipeline();
    let dir = TempDir::new().expect("tempdir");
    let out = dir.path().join("none");
    run_ok(&[
        "ablate",
        "--mode",
        "none",
        "--config",
        &s(&p.config),
        "--data",
        &s(&p.data),
        "--checkpoint",
        &s(&p.pre.join("checkpoint")),
        "--out",
        &s(&out),
    ]);

    // every network tensor survives adaptation untouched
    for entry in std::fs::read_dir(p.pre.join("checkpoint")).expect("read_dir") {
        let entry = entry.expect("entry");
        let name = entry.file_name().into_string().expect("name");
        if name.starts_with("net.") {
            let before = std::fs::read(entry.path()).expect("read");
            let after = std::fs::read(out.join("checkpoint").join(&name)).expect("read");
            assert_eq!(before, after, "{name} changed under mode none");
        }
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&read(&out.join("run_manifest.json"))).expect("manifest");
    assert_eq!(manifest["command"], "ablate --mode none");

    let log = read(&out.join("training_log.csv"));
    assert_eq!(log, "step,V_Dts,V_Dst,GEN_loss,CE_loss,V_F\n", "mode none trains nothing");
}

#[test]
fn histogram_reports_mass_for_both_domains() {
    let p = pipeline();
    let dir = TempDir::new().expect("tempdir");
    let out = dir.path().join("hist");
    run_ok(&[
        "histogram",
        "--phase",
        "pre",
        "--config",
        &s(&p.config),
        "--data",
        &s(&p.data),
        "--checkpoint",
        &s(&p.pre.join("checkpoint")),
        "--out",
        &s(&out),
    ]);

    let metrics: serde_json::Value =
        serde_json::from_str(&read(&out.join("metrics.json"))).expect("metrics json");
    assert_eq!(metrics["phase"], "pre");
    assert_eq!(metrics["bins"], 64);
    for key in ["source_mass_below", "target_mass_below"] {
        let v = metrics[key].as_f64().expect("fraction");
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }

    let csv = read(&out.join("histogram.csv"));
    assert_eq!(csv.lines().next(), Some("bin_left,source,target"));
    assert_eq!(csv.lines().count(), 65, "64 bins plus header");
    assert_eq!(read(&out.join("histogram.svg")).matches("<polyline").count(), 2);

    // an adapted checkpoint is not a pre-adaptation state
    let bad = baa(&[
        "histogram",
        "--phase",
        "pre",
        "--config",
        &s(&p.config),
        "--data",
        &s(&p.data),
        "--checkpoint",
        &s(&p.adapt.join("checkpoint")),
        "--out",
        &s(&dir.path().join("hist2")),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn exit_codes_follow_the_documented_contract() {
    let p = pipeline();
    let dir = TempDir::new().expect("tempdir");
    let out = s(&dir.path().join("x"));

    let bad_config = dir.path().join("bad.toml");
    std::fs::write(&bad_config, "bogus_key = 3\n").expect("write");
    let r = baa(&["gen-data", "--config", &s(&bad_config), "--out", &out]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("bogus_key"));

    let bad_section = dir.path().join("bad2.toml");
    std::fs::write(&bad_section, "[adapt]\ndisc_lr = 0.0005\n").expect("write");
    let r = baa(&["pretrain", "--config", &s(&bad_section), "--data", &s(&p.data), "--out", &out]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("3:1"));

    let r = baa(&[
        "pretrain",
        "--config",
        &s(&p.config),
        "--data",
        &s(&dir.path().join("missing")),
        "--out",
        &out,
    ]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("gen-data"), "no remediation hint");

    let r = baa(&[
        "adapt",
        "--config",
        &s(&p.config),
        "--data",
        &s(&p.data),
        "--checkpoint",
        &s(&dir.path().join("missing")),
        "--out",
        &out,
    ]);
    assert_eq!(r.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&r.stderr).contains("pretrain"), "no remediation hint");

    // adapting with a different config than the checkpoint's is refused
    let r = baa(&[
        "adapt",
        "--seed",
        "99",
        "--config",
        &s(&p.config),
        "--data",
        &s(&p.data),
        "--checkpoint",
        &s(&p.pre.join("checkpoint")),
        "--out",
        &out,
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn seed_flag_overrides_both_seeds() {
    let p = pipeline();
    let dir = TempDir::new().expect("tempdir");
    let out = dir.path().join("data9");
    run_ok(&["gen-data", "--config", &s(&p.config), "--seed", "9", "--out", &s(&out)]);
    let manifest: serde_json::Value =
        serde_json::from_str(&read(&out.join("run_manifest.json"))).expect("manifest");
    assert_eq!(manifest["config"]["seed"], 9);
    assert_eq!(manifest["config"]["dataset"]["seed"], 9);

    // a different seed renders a different world
    let base = std::fs::read(p.data.join("manifest.json")).expect("read");
    let other = std::fs::read(out.join("manifest.json")).expect("read");
    assert_ne!(base, other);
}
