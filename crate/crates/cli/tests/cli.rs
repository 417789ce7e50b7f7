use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use semclip_core::store::{attention_layers, Checkpoint};

fn semclip(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semclip"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = semclip(dir, args);
    assert!(
        out.status.success(),
        "semclip {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    semclip(dir, args).status.code().unwrap()
}

/// One-shot episode with a short query set, an initialized checkpoint and a
/// tuned copy.
fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--k", "1", "--m", "14", "--out", "ep"]);
    ok(d, &["init", "--checkpoint", "base.ckpt"]);
    ok(
        d,
        &[
            "finetune",
            "--checkpoint",
            "base.ckpt",
            "--data",
            "ep/support",
            "--out",
            "tuned.ckpt",
            "--out-dir",
            "curves",
            "--set",
            "epochs=10",
        ],
    );
    dir
}

#[test]
fn init_is_reproducible_and_has_twelve_attention_layers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["init", "--checkpoint", "a.ckpt", "--seed", "5"]);
    ok(d, &["init", "--checkpoint", "b.ckpt", "--seed", "5"]);
    ok(d, &["init", "--checkpoint", "c.ckpt", "--seed", "6"]);
    let a = fs::read(d.join("a.ckpt")).unwrap();
    assert!(a == fs::read(d.join("b.ckpt")).unwrap());
    assert!(a != fs::read(d.join("c.ckpt")).unwrap());

    let ckpt = Checkpoint::from_bytes(&a).unwrap();
    assert_eq!(attention_layers(&ckpt).len(), 12);
    for (name, t) in &ckpt.tensors {
        if name.contains(".vvv.") {
            assert_eq!(ckpt.tensors[&name.replace(".vvv.", ".qkv.")], *t, "{name}");
        }
    }
    assert!(ckpt.meta("run.config").unwrap().contains("seed = 5"));
}

#[test]
fn surgery_subcommand_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["init", "--checkpoint", "a.ckpt"]);
    let before = fs::read(d.join("a.ckpt")).unwrap();
    let report = ok(d, &["surgery", "--checkpoint", "a.ckpt", "--out", "b.ckpt"]);
    assert!(report.contains("copied 48 tensors"), "{report}");
    assert!(before == fs::read(d.join("b.ckpt")).unwrap());
}

#[test]
fn one_shot_pipeline_writes_every_artifact() {
    let dir = prepared();
    let d = dir.path();
    for curve in ["curves/transform_loss.csv", "curves/head_loss.csv"] {
        let text = fs::read_to_string(d.join(curve)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,loss"));
        assert_eq!(lines.count(), 10, "{curve}");
    }

    ok(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "tuned.ckpt",
            "--data",
            "ep/query",
            "--out-dir",
            "eval",
        ],
    );
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("eval/metrics.json")).unwrap()).unwrap();
    let mut keys: Vec<&str> = json
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        [
            "accuracy",
            "confusion",
            "f1",
            "f1max",
            "iauroc",
            "pauroc",
            "precision",
            "recall"
        ]
    );
    let confusion = json["confusion"].as_array().unwrap();
    assert_eq!(confusion.len(), 7);
    let total: u64 = confusion
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(total, 14);

    let predictions = fs::read_to_string(d.join("eval/predictions.csv")).unwrap();
    assert!(predictions.starts_with("image_id,predicted_class,p_good,"));
    assert_eq!(predictions.lines().count(), 15);
    let map = fs::read(d.join("eval/maps/0000_good.f32")).unwrap();
    assert_eq!(&map[..8], &[64, 0, 0, 0, 64, 0, 0, 0]);
    assert_eq!(map.len(), 8 + 4 * 64 * 64);
    assert!(fs::read(d.join("eval/maps/0000_good.pgm"))
        .unwrap()
        .starts_with(b"P5\n64 64\n255\n"));

    ok(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "tuned.ckpt",
            "--data",
            "ep/query",
            "--out-dir",
            "again",
            "--no-maps",
        ],
    );
    assert_eq!(
        fs::read(d.join("eval/metrics.json")).unwrap(),
        fs::read(d.join("again/metrics.json")).unwrap()
    );
}

#[test]
fn finetune_rerun_gives_identical_bytes() {
    let dir = prepared();
    let d = dir.path();
    ok(
        d,
        &[
            "finetune",
            "--checkpoint",
            "base.ckpt",
            "--data",
            "ep/support",
            "--out",
            "again.ckpt",
            "--out-dir",
            "curves2",
            "--set",
            "epochs=10",
            "--threads",
            "2",
        ],
    );
    assert!(fs::read(d.join("tuned.ckpt")).unwrap() == fs::read(d.join("again.ckpt")).unwrap());
}

#[test]
fn no_transform_skips_training() {
    let dir = prepared();
    let d = dir.path();
    ok(
        d,
        &[
            "finetune",
            "--checkpoint",
            "base.ckpt",
            "--data",
            "ep/support",
            "--out",
            "nt.ckpt",
            "--out-dir",
            "nt",
            "--set",
            "epochs=10",
            "--ablate",
            "no_transform",
        ],
    );
    assert_eq!(
        fs::read_to_string(d.join("nt/transform_loss.csv"))
            .unwrap()
            .trim(),
        "epoch,loss"
    );
    let ckpt = Checkpoint::load(d.join("nt.ckpt")).unwrap();
    let w = &ckpt.tensors["seg.transform.1.weight"];
    let n = w.rows();
    for i in 0..n {
        for j in 0..w.cols() {
            assert_eq!(w.data()[i * w.cols() + j], if i == j { 1.0 } else { 0.0 });
        }
    }
    ok(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "nt.ckpt",
            "--data",
            "ep/query",
            "--out-dir",
            "nte",
            "--no-maps",
            "--ablate",
            "no_transform",
        ],
    );
}

#[test]
fn classify_and_segment_single_images() {
    let dir = prepared();
    let d = dir.path();
    let csv = ok(
        d,
        &[
            "classify",
            "--checkpoint",
            "tuned.ckpt",
            "--image",
            "ep/query/0001_bridge.pgm",
        ],
    );
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    let probs: f32 = lines[1]
        .split(',')
        .skip(2)
        .map(|p| p.parse::<f32>().unwrap())
        .sum();
    assert!((probs - 1.0).abs() < 1e-4, "{}", lines[1]);

    let alpha_one = ok(
        d,
        &[
            "classify",
            "--checkpoint",
            "tuned.ckpt",
            "--data",
            "ep/query",
            "--alpha",
            "1",
        ],
    );
    let pc_only = ok(
        d,
        &[
            "classify",
            "--checkpoint",
            "tuned.ckpt",
            "--data",
            "ep/query",
            "--ablate",
            "pc_only",
        ],
    );
    assert_eq!(alpha_one, pc_only);
    let alpha_zero = ok(
        d,
        &[
            "classify",
            "--checkpoint",
            "tuned.ckpt",
            "--data",
            "ep/query",
            "--alpha",
            "0",
        ],
    );
    let ps_only = ok(
        d,
        &[
            "classify",
            "--checkpoint",
            "tuned.ckpt",
            "--data",
            "ep/query",
            "--ablate",
            "ps_only",
        ],
    );
    assert_eq!(alpha_zero, ps_only);

    ok(
        d,
        &[
            "segment",
            "--checkpoint",
            "tuned.ckpt",
            "--image",
            "ep/query/0001_bridge.pgm",
            "--out-map",
            "bridge",
        ],
    );
    let raw = fs::read(d.join("bridge.f32")).unwrap();
    assert_eq!(raw.len(), 8 + 4 * 64 * 64);
    let values: Vec<f32> = raw[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(d.join("bridge.pgm").exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.cfg"), "# small run\nseed = 9\nalpha = 0.5\n").unwrap();
    ok(
        d,
        &[
            "init",
            "--config",
            "run.cfg",
            "--checkpoint",
            "a.ckpt",
            "--seed",
            "3",
        ],
    );
    let meta = Checkpoint::load(d.join("a.ckpt")).unwrap();
    let cfg = meta.meta("run.config").unwrap();
    assert!(
        cfg.contains("seed = 3") && cfg.contains("alpha = 0.5"),
        "{cfg}"
    );
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = prepared();
    let d = dir.path();
    assert_eq!(code(d, &["init", "--alpha", "1.5"]), 2);
    assert_eq!(
        code(d, &["init", "--ablate", "ps_only", "--ablate", "pc_only"]),
        2
    );
    assert_eq!(code(d, &["init", "--ablate", "no_such_flag"]), 2);
    assert_eq!(code(d, &["init", "--config", "missing.cfg"]), 2);

    ok(
        d,
        &[
            "init",
            "--checkpoint",
            "small.ckpt",
            "--classes",
            "good,particle",
        ],
    );
    assert_eq!(
        code(
            d,
            &[
                "finetune",
                "--checkpoint",
                "small.ckpt",
                "--data",
                "ep/support"
            ]
        ),
        3
    );
    assert_eq!(
        code(
            d,
            &[
                "evaluate",
                "--checkpoint",
                "base.ckpt",
                "--data",
                "ep/query"
            ]
        ),
        3
    );
    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(
        code(
            d,
            &[
                "evaluate",
                "--checkpoint",
                "junk.ckpt",
                "--data",
                "ep/query"
            ]
        ),
        3
    );

    assert_eq!(
        code(
            d,
            &[
                "finetune",
                "--checkpoint",
                "base.ckpt",
                "--data",
                "ep/support",
                "--out",
                "x.ckpt",
                "--out-dir",
                "x",
                "--set",
                "lr=3e38",
                "--set",
                "epochs=40",
            ]
        ),
        4
    );
}
