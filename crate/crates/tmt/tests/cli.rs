//! The `tmt` binary end to end, on tiny configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use tmt::checkpoint;
use tmt::cli::{CHECKPOINT_FILE, DIAGNOSTIC_FILE, METRICS_FILE, REPORT_FILE};
use tmt_core::data::{Frames, Tracklet};
use tmt_core::pooling::FeatureCube;
use tmt_core::Tensor;

const TINY_IMAGES: &str = r#"
eval_every = 1

[synth]
num_identities = 4
tracklets_per_id = 2
frames_per_tracklet = 4
image_height = 8
image_width = 4

[model]
frames = 2
channels = 8
depth_self = 1
depth_cross = 1
input = { kind = "images", height = 8, width = 4 }

[train]
epochs = 2
batch_size = 4
"#;

fn tmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn train(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", s(config), "--out", s(out)];
    args.extend_from_slice(extra);
    tmt(&args)
}

/// Identity-dependent cube tracklets: a fixed pattern per identity plus
/// small per-tracklet noise.
fn cube_tracklets(ids: usize, per_id: usize, frames: usize, (h, w, c): (usize, usize, usize), seed: u64) -> Vec<Tracklet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = frames * h * w * c;
    let mut out = Vec::new();
    for id in 0..ids {
        let pattern: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[n], 1.0, &mut rng)).collect();
        for k in 0..per_id {
            let cubes: Vec<FeatureCube> = pattern
                .iter()
                .map(|p| {
                    let noise = Tensor::uniform(&[n], 0.05, &mut rng);
                    let v = p.add(&noise).unwrap().reshape(&[frames, h * w, c]).unwrap();
                    FeatureCube::new(v, h, w).unwrap()
                })
                .collect();
            out.push(Tracklet {
                identity: id,
                camera: k,
                frames: Frames::Cubes(cubes.try_into().unwrap()),
            });
        }
    }
    out
}

fn cube_config(data_dir: &Path, epochs: usize) -> String {
    format!(
        r#"
[data]
kind = "cubes"
dir = "{}"

[model]
frames = 2
channels = 4
depth_self = 1
depth_cross = 1
input = {{ kind = "cubes", height = 2, width = 2 }}

[train]
epochs = {epochs}
batch_size = 4
"#,
        data_dir.display()
    )
}

#[test]
fn training_twice_is_bit_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY_IMAGES);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = train(&cfg, out, &["--seed", "7"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in [CHECKPOINT_FILE, METRICS_FILE] {
        assert!(fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    // The reports differ only in the echoed output directory.
    let report = |dir: &Path| {
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join(REPORT_FILE)).unwrap()).unwrap();
        v["config"]["out_dir"] = serde_json::Value::Null;
        v
    };
    assert_eq!(report(&a), report(&b));
    let metrics = fs::read_to_string(a.join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,lr,loss,rank1,map");
    assert_eq!(lines.len(), 3);
    assert!(lines[1..].iter().all(|l| !l.ends_with(',')), "every epoch is evaluated: {metrics}");

    let c = train(&cfg, &tmp.path().join("c"), &["--seed", "8"]);
    assert_eq!(code(&c), 0);
    assert!(fs::read(a.join(CHECKPOINT_FILE)).unwrap() != fs::read(tmp.path().join("c").join(CHECKPOINT_FILE)).unwrap());
}

#[test]
fn zero_epochs_write_the_initialisation() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY_IMAGES);
    let out = tmp.path().join("init");
    let o = train(&cfg, &out, &["--epochs", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let header = checkpoint::load_header(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(header.epochs_trained, 0);
    assert_eq!(fs::read_to_string(out.join(METRICS_FILE)).unwrap(), "epoch,lr,loss,rank1,map\n");
    let (model, _) = checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(model.config().frames, 2);
}

#[test]
fn invalid_configuration_reports_every_problem_and_writes_nothing() {
    let tmp = TempDir::new().unwrap();
    let bad = TINY_IMAGES
        .replace("frames = 2", "frames = 0")
        .replace("batch_size = 4", "batch_size = 3")
        .replace("num_identities = 4", "num_identities = 0");
    let cfg = write_config(tmp.path(), "bad.toml", &bad);
    let out = tmp.path().join("never");
    let o = train(&cfg, &out, &[]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    for needle in ["model.frames", "train.batch_size", "synth.num_identities"] {
        assert!(err.contains(needle), "{needle} missing from: {err}");
    }
    assert!(!out.exists());

    let typo = write_config(tmp.path(), "typo.toml", "[model]\nframs = 3\n");
    assert_eq!(code(&train(&typo, &out, &[])), 1);
    assert_eq!(code(&train(&tmp.path().join("missing.toml"), &out, &[])), 3);
    assert!(!out.exists());
}

#[test]
fn non_finite_loss_exits_with_a_diagnostic() {
    let tmp = TempDir::new().unwrap();
    let text = TINY_IMAGES.replace("batch_size = 4", "batch_size = 4\nlr = 1e300");
    let cfg = write_config(tmp.path(), "explode.toml", &text);
    let out = tmp.path().join("run");
    let o = train(&cfg, &out, &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let diag: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(DIAGNOSTIC_FILE)).unwrap()).unwrap();
    assert!(diag["error"].as_str().unwrap().contains("non-finite"), "{diag}");
    assert!(!out.join(CHECKPOINT_FILE).exists());
}

#[test]
fn self_retrieval_under_single_gallery_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("cubes");
    tmt::cubes::write_tracklets(&data, &cube_tracklets(4, 2, 3, (2, 2, 4), 1), "test").unwrap();
    let cfg = write_config(tmp.path(), "cubes.toml", &cube_config(&data, 1));
    let out = tmp.path().join("run");
    let o = train(&cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let ck = out.join(CHECKPOINT_FILE);
    let o = tmt(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--gallery",
        s(&data),
        "--query",
        s(&data),
        "--protocol",
        "single_gallery",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["rank1"].as_f64(), Some(1.0));
    assert!(report["map"].is_null());
    assert_eq!(report["skipped_queries"].as_u64(), Some(0));
}

#[test]
fn eval_rejects_empty_and_incompatible_data() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("cubes");
    tmt::cubes::write_tracklets(&data, &cube_tracklets(4, 2, 3, (2, 2, 4), 2), "test").unwrap();
    let cfg = write_config(tmp.path(), "cubes.toml", &cube_config(&data, 0));
    let out = tmp.path().join("run");
    assert_eq!(code(&train(&cfg, &out, &[])), 0);
    let ck = out.join(CHECKPOINT_FILE);

    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = tmt(&["eval", "--checkpoint", s(&ck), "--gallery", s(&data), "--query", s(&empty)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no .tmtc files"));

    let wide = tmp.path().join("wide");
    tmt::cubes::write_tracklets(&wide, &cube_tracklets(2, 1, 3, (2, 2, 6), 3), "test").unwrap();
    let o = tmt(&["eval", "--checkpoint", s(&ck), "--gallery", s(&data), "--query", s(&wide)]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("id00000_cam000_00000.tmtc") && err.contains("2×2×6"), "{err}");

    let o = tmt(&["eval", "--checkpoint", s(&ck), "--synthetic"]);
    assert_eq!(code(&o), 1, "cube model cannot read image clips");
}

#[test]
fn tampered_checkpoint_shape_is_named() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY_IMAGES);
    let out = tmp.path().join("run");
    assert_eq!(code(&train(&cfg, &out, &["--epochs", "0"])), 0);
    let ck = out.join(CHECKPOINT_FILE);
    let bytes = fs::read(&ck).unwrap();
    let (mut header, start) = checkpoint::decode_header(&bytes).unwrap();
    let victim = header.manifest[3].name.clone();
    header.manifest[3].shape.push(1);
    header.manifest[3].shape[0] += 1;
    let json = serde_json::to_vec(&header).unwrap();
    let mut tampered = bytes[..6].to_vec();
    tampered.extend_from_slice(&(json.len() as u32).to_le_bytes());
    tampered.extend_from_slice(&json);
    tampered.extend_from_slice(&bytes[start..]);
    let bad = tmp.path().join("bad.tmtk");
    fs::write(&bad, tampered).unwrap();

    let o = tmt(&["eval", "--checkpoint", s(&bad), "--synthetic", "--config", s(&cfg)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains(&format!("tensor {victim}")), "{}", stderr(&o));

    let o = tmt(&["eval", "--checkpoint", s(&ck), "--synthetic", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_block() {
    let o = tmt(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let table = stdout(&o);
    assert_eq!(table.matches("PASS").count(), tmt_core::gradsuite::COMPONENTS.len(), "{table}");

    let o = tmt(&["gradcheck", "--corrupt", "selfview"]);
    assert_eq!(code(&o), 2);
    let table = stdout(&o);
    let failed: Vec<&str> = table.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert_eq!(failed.len(), 1, "{table}");
    assert!(failed[0].starts_with("selfview "));

    assert_eq!(code(&tmt(&["gradcheck", "--corrupt", "nonexistent"])), 1);
    assert_eq!(code(&tmt(&["gradcheck", "--h", "-1"])), 1);
}

#[test]
fn coarse_step_errors_stay_small() {
    let o = tmt(&["gradcheck", "--h", "1e-3"]);
    let table = stdout(&o);
    for line in table.lines().skip(1) {
        let err: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!(err < 1e-2, "{line}");
    }
}

#[test]
fn bench_emits_one_row_per_setting() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", &TINY_IMAGES.replace("epochs = 2", "epochs = 1"));
    let csv_path = tmp.path().join("bench.csv");
    let o = tmt(&[
        "bench",
        "--axis",
        "views",
        "--config",
        s(&cfg),
        "--seeds",
        "2",
        "--out",
        s(&csv_path),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&csv_path).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let headers = rows.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        ["axis", "value", "seeds", "map_mean", "map_std", "rank1_mean", "rank1_std"]
    );
    let records: Vec<_> = rows.records().map(|r| r.unwrap()).collect();
    let values: Vec<&str> = records.iter().map(|r| r.get(1).unwrap()).collect();
    assert_eq!(values, ["spatial", "temporal", "st", "all"]);
    assert!(records.iter().all(|r| r.get(2) == Some("2")));

    let o = tmt(&["bench", "--axis", "T", "--values", "x", "--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&tmt(&["bench", "--axis", "colour"])), 1);
}

#[test]
fn inspect_reads_both_formats() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("cubes");
    let paths = tmt::cubes::write_tracklets(&data, &cube_tracklets(1, 1, 3, (2, 2, 4), 4), "unit").unwrap();
    let o = tmt(&["inspect", s(&paths[0])]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("T=3 H=2 W=2 C=4"));

    let cfg = write_config(tmp.path(), "tiny.toml", TINY_IMAGES);
    let out = tmp.path().join("run");
    assert_eq!(code(&train(&cfg, &out, &["--epochs", "0"])), 0);
    let o = tmt(&["inspect", s(&out.join(CHECKPOINT_FILE))]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("\"manifest\""));

    let junk = tmp.path().join("junk.bin");
    fs::write(&junk, b"nothing to see").unwrap();
    assert_eq!(code(&tmt(&["inspect", s(&junk)])), 3);
}
