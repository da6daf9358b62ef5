//! End-to-end runs of the `sfcn` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sfcn::model::{save_checkpoint, Model, ModelConfig, ParamGroup};
use sfcn::Tensor;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// A config with one-epoch stages and everything under a temp dir.
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().display();
        let cfg = format!(
            "seed = 5\n{extra}\n[train]\nbatch_size = 4\nval_every = 1\nbudgets = {{ detection = 1, classification = 1, joint = 1 }}\n\n[paths]\ndataset = \"{root}/data\"\ncheckpoints = \"{root}/ckpt\"\nreports = \"{root}/reports\"\n"
        );
        fs::write(dir.path().join("run.toml"), cfg).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.path("run.toml");
        Command::new(env!("CARGO_BIN_EXE_sfcn"))
            .arg("--config")
            .arg(&cfg)
            .args(["--threads", "1"])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        out
    }
}

/// Every file under `dir` with its bytes, keyed by relative path.
fn digest(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn synth_writes_manifest_and_split_files() {
    let ws = Workspace::new("");
    ws.ok(&["synth", "--n", "10"]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["images"].as_array().unwrap().len(), 10);
    assert_eq!(
        [lines(&ws.path("data/train.txt")), lines(&ws.path("data/val.txt")), lines(&ws.path("data/test.txt"))],
        [7, 1, 2]
    );
    assert_eq!(fs::read_dir(ws.path("data/images")).unwrap().count(), 10);
}

#[test]
fn synth_is_reproducible_and_rejects_zero_images() {
    let ws = Workspace::new("");
    ws.ok(&["synth", "--n", "6", "--out", ws.path("a").to_str().unwrap()]);
    ws.ok(&["synth", "--n", "6", "--out", ws.path("b").to_str().unwrap()]);
    assert_eq!(digest(&ws.path("a")), digest(&ws.path("b")));
    ws.ok(&["--seed", "6", "synth", "--n", "6", "--out", ws.path("c").to_str().unwrap()]);
    assert_ne!(digest(&ws.path("a")), digest(&ws.path("c")));
    let out = ws.run(&["synth", "--n", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_keys_abort_before_side_effects() {
    let ws = Workspace::new("[objective]\nlamda = 0.5");
    let out = ws.run(&["synth", "--n", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));
    assert!(!ws.path("data").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let ws = Workspace::new("");
    assert_eq!(ws.run(&["train", "--regime", "ours"]).status.code(), Some(1));
    assert_eq!(ws.run(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn train_without_dataset_is_a_config_error_with_no_outputs() {
    let ws = Workspace::new("");
    let out = ws.run(&["train", "--regime", "opi_full"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!ws.path("reports").exists() && !ws.path("ckpt").exists());
}

#[test]
fn opi_full_writes_three_stage_checkpoints_and_a_log() {
    let ws = Workspace::new("");
    ws.ok(&["synth", "--n", "12"]);
    ws.ok(&["train", "--regime", "opi_full", "--quiet"]);
    for (i, s) in ["detection", "classification", "joint"].iter().enumerate() {
        assert!(ws.path(&format!("ckpt/opi_full/stage{}_{s}.ckpt", i + 1)).is_file(), "{s}");
    }
    let log = fs::read_to_string(ws.path("reports/opi_full/train_log.csv")).unwrap();
    assert!(log.starts_with("step,stage,lr,loss_det,loss_cls,loss_decay,loss_total,n_cls"));
    assert!(ws.path("reports/opi_full/eval_val.csv").is_file());
}

#[test]
fn fcn5cls_checkpoint_has_no_detection_parameters() {
    let ws = Workspace::new("");
    ws.ok(&["synth", "--n", "12"]);
    ws.ok(&["train", "--regime", "fcn5cls", "--quiet"]);
    let model = sfcn::model::read_checkpoint(&ws.path("ckpt/fcn5cls/stage1_five_class.ckpt")).unwrap();
    assert!(model.params.names().all(|n| ParamGroup::of(n) != ParamGroup::Detection));
    assert!(!model.params.names().any(|n| n.starts_with("det.")));
    // The single-head checkpoint still evaluates under the sibling config.
    ws.ok(&["eval", "--checkpoint", ws.path("ckpt/fcn5cls/stage1_five_class.ckpt").to_str().unwrap()]);
}

#[test]
fn train_and_eval_are_byte_reproducible() {
    let ws = Workspace::new("");
    ws.ok(&["synth", "--n", "12"]);
    let mut runs = Vec::new();
    for _ in 0..2 {
        ws.ok(&["train", "--regime", "opi_skip_clspretrain", "--quiet"]);
        let ckpt = ws.path("ckpt/opi_skip_clspretrain/stage2_joint.ckpt");
        ws.ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--per-image"]);
        let mut d = digest(&ws.path("ckpt"));
        d.extend(digest(&ws.path("reports")));
        runs.push(d);
    }
    assert_eq!(runs[0], runs[1]);
    assert!(runs[0].contains_key("eval_test.csv") && runs[0].contains_key("eval_test_images.jsonl"));
}

#[test]
fn empty_split_gives_a_flagged_zero_report() {
    let ws = Workspace::new("split_ratio = [1, 1, 0]");
    ws.ok(&["synth", "--n", "4"]);
    let model = Model::build(&ModelConfig::desk(), 1).unwrap();
    save_checkpoint(&model, &ws.path("m.ckpt")).unwrap();
    let out = ws.ok(&["eval", "--checkpoint", ws.path("m.ckpt").to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let summary = fs::read_to_string(ws.path("reports/eval_test_summary.txt")).unwrap();
    assert!(summary.starts_with("WARNING"));
    let csv = fs::read_to_string(ws.path("reports/eval_test.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("test,0,0,0,0,0,0,0,0,0,0,0,true"));
}

#[test]
fn checkpoint_shape_mismatch_reports_both_shapes() {
    let ws = Workspace::new("");
    ws.ok(&["synth", "--n", "4"]);
    let narrow = ModelConfig {
        base_channels: 4,
        ..ModelConfig::desk()
    };
    save_checkpoint(&Model::build(&narrow, 1).unwrap(), &ws.path("m.ckpt")).unwrap();
    let out = ws.run(&["eval", "--checkpoint", ws.path("m.ckpt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    // First mismatch in name order: the classification head sees 4x base channels.
    assert!(err.contains("expects [5, 32, 1, 1]") && err.contains("has [5, 16, 1, 1]"), "{err}");
}

/// A desk model whose detection logits strongly favour background.
fn background_model() -> Model {
    let mut m = Model::build(&ModelConfig::desk(), 2).unwrap();
    m.params.get_mut("det.up2.bias").unwrap().data_mut().copy_from_slice(&[20.0, -20.0]);
    m
}

fn write_rgb_png(path: &Path, value: [u8; 3]) {
    let buf: Vec<u8> = (0..32 * 32).flat_map(|_| value).collect();
    image::save_buffer(path, &buf, 32, 32, image::ExtendedColorType::Rgb8).unwrap();
}

fn read_npy(path: &Path) -> (Vec<usize>, Vec<f64>) {
    let bytes = fs::read(path).unwrap();
    assert_eq!(&bytes[..8], b"\x93NUMPY\x01\x00");
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    assert_eq!((10 + hlen) % 64, 0);
    let header = std::str::from_utf8(&bytes[10..10 + hlen]).unwrap();
    let shape_str = header.split("'shape': (").nth(1).unwrap().split(')').next().unwrap();
    let shape: Vec<usize> = shape_str.split(',').filter_map(|s| s.trim().parse().ok()).collect();
    let data = bytes[10 + hlen..].chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    (shape, data)
}

#[test]
fn infer_on_blank_image_emits_nothing_and_dumps_normalized_maps() {
    let ws = Workspace::new("");
    save_checkpoint(&background_model(), &ws.path("m.ckpt")).unwrap();
    write_rgb_png(&ws.path("blank.png"), [230, 199, 217]);
    let out = ws.ok(&[
        "infer",
        "--checkpoint",
        ws.path("m.ckpt").to_str().unwrap(),
        "--image",
        ws.path("blank.png").to_str().unwrap(),
        "--dump-maps",
        ws.path("maps").to_str().unwrap(),
    ]);
    assert!(out.stdout.is_empty());
    for (file, channels) in [("det.npy", 2), ("cls.npy", 5)] {
        let (shape, data) = read_npy(&ws.path(&format!("maps/{file}")));
        assert_eq!(shape, vec![channels, 32, 32]);
        for px in 0..32 * 32 {
            let s: f64 = (0..channels).map(|c| data[c * 1024 + px]).sum();
            assert!((s - 1.0).abs() < 1e-9, "{file} pixel {px}: {s}");
        }
    }
}

#[test]
fn infer_records_carry_the_documented_fields() {
    let ws = Workspace::new("");
    let mut m = Model::build(&ModelConfig::desk(), 3).unwrap();
    m.params.get_mut("det.up2.bias").unwrap().data_mut().copy_from_slice(&[-20.0, 20.0]);
    save_checkpoint(&m, &ws.path("m.ckpt")).unwrap();
    write_rgb_png(&ws.path("img.png"), [80, 40, 120]);
    ws.ok(&[
        "infer",
        "--checkpoint",
        ws.path("m.ckpt").to_str().unwrap(),
        "--image",
        ws.path("img.png").to_str().unwrap(),
        "--out",
        ws.path("pts.jsonl").to_str().unwrap(),
    ]);
    let text = fs::read_to_string(ws.path("pts.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().expect("some detections")).unwrap();
    for key in ["row", "col", "objectness", "category", "class_probs"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(first["class_probs"].as_array().unwrap().len(), 5);
}

#[test]
fn infer_rejects_wrong_image_size() {
    let ws = Workspace::new("");
    save_checkpoint(&background_model(), &ws.path("m.ckpt")).unwrap();
    let buf = vec![128u8; 16 * 16 * 3];
    image::save_buffer(ws.path("small.png"), &buf, 16, 16, image::ExtendedColorType::Rgb8).unwrap();
    let out = ws.run(&[
        "infer",
        "--checkpoint",
        ws.path("m.ckpt").to_str().unwrap(),
        "--image",
        ws.path("small.png").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("16x16"));
}

#[test]
fn written_tensor_round_trips_through_npy() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, 7.0]).unwrap();
    sfcn::cli::write_npy(&dir.path().join("t.npy"), &t).unwrap();
    let (shape, data) = read_npy(&dir.path().join("t.npy"));
    assert_eq!(shape, vec![2, 3]);
    assert_eq!(data, t.data());
}
