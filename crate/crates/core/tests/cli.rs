//! End-to-end runs of the `mtac` binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtac::evaluation::EvalPoint;
use mtac::experiment::RunRecord;
use mtac::multitask::TrainableReport;
use mtac::report::RECORD_FILE;
use mtac::training::TrainConfig;
use mtac::Tensor;

const TINY: &str = r#"
tasks = ["segmentation", "saliency"]

[data]
image_size = 32
train_size = 8
val_size = 4

[codec]
channels_per_stage = [4, 6, 8]
latent_channels = 8
bottleneck_width = 8
bottleneck_depth = 1

[pretrain]
lambda = 100.0
steps = 6
batch_size = 4
decay_steps = []

[predictors]
hidden = 4
steps = 6
batch_size = 4
seg_floor = 0.0

[adapt]
msf_window = 0

[train]
lambda = 100.0
epochs = 2
decay_epochs = [1]
batch_size = 4
"#;

fn mtac(args: &[&str], cache: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtac"))
        .args(args)
        .arg("--quiet")
        .env("MTAC_CACHE_DIR", cache)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    cache: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("tiny.toml");
        std::fs::write(&config, format!("output_dir = {:?}\n{TINY}", s(&root.join("runs")))).unwrap();
        Self {
            cache: root.join("cache"),
            _tmp: tmp,
            root,
            config,
        }
    }

    fn run(&self, args: &[&str]) -> Output {
        mtac(args, &self.cache)
    }
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let f = Fixture::new();
    let missing = f.root.join("nowhere.toml");
    let out = f.run(&["pretrain", "--config", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.toml"));
}

#[test]
fn pretrain_adapt_encode_decode() {
    let f = Fixture::new();
    let pre = f.root.join("pre");
    ok(&f.run(&["pretrain", "--config", s(&f.config), "--run-dir", s(&pre)]));
    for file in ["base.mtck", "predictors.mtck", "manifest.json", "history.csv", "config.toml"] {
        assert!(pre.join(file).is_file(), "{file} missing");
    }

    // A fresh cache retrains from scratch and must land on the same bytes.
    let again = f.root.join("pre2");
    ok(&mtac(&["pretrain", "--config", s(&f.config), "--run-dir", s(&again)], &f.root.join("cache2")));
    assert_eq!(std::fs::read(pre.join("base.mtck")).unwrap(), std::fs::read(again.join("base.mtck")).unwrap());

    let zero = f.run(&["adapt", "--config", s(&f.config), "--pretrained", s(&pre), "--lambda-rd", "0"]);
    assert_eq!(zero.status.code(), Some(2));

    let run = f.root.join("adapt");
    ok(&f.run(&["adapt", "--config", s(&f.config), "--pretrained", s(&pre), "--run-dir", s(&run)]));
    for file in ["adapted.mtck", "history.csv", "config.toml", RECORD_FILE] {
        assert!(run.join(file).is_file(), "{file} missing");
    }
    let adapted = run.join("adapted.mtck");

    let png = f.root.join("in.png");
    let pixels: Vec<f64> = (0..32 * 32 * 3).map(|i| ((i * 37) % 251) as f64 / 250.0).collect();
    mtac::imageio::write_image(&png, &Tensor::from_vec(&[32, 32, 3], pixels)).unwrap();
    let (a, b) = (f.root.join("a.mtac"), f.root.join("b.mtac"));
    for (out, tasks) in [(&a, "segmentation"), (&b, "segmentation,saliency")] {
        ok(&f.run(&[
            "codec", "encode", "--pretrained", s(&pre), "--adapted", s(&adapted), "--input", s(&png), "--output", s(out),
            "--tasks", tasks,
        ]));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());

    let dec = f.root.join("dec");
    ok(&f.run(&[
        "codec", "decode", "--pretrained", s(&pre), "--adapted", s(&adapted), "--input", s(&a), "--out-dir", s(&dec),
        "--tasks", "seg",
    ]));
    assert!(dec.join("reconstruction.png").is_file());
    assert!(dec.join("segmentation.png").is_file());
    assert!(!dec.join("saliency.png").exists());

    let cut = f.root.join("cut.mtac");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    let out = f.run(&[
        "codec", "decode", "--pretrained", s(&pre), "--adapted", s(&adapted), "--input", s(&cut), "--out-dir", s(&dec),
    ]);
    assert_eq!(out.status.code(), Some(4));

    // A base checkpoint that no longer matches its recorded hash is refused.
    let manifest = pre.join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let digest = serde_json::from_str::<serde_json::Value>(&text).unwrap()["base_digest"].as_str().unwrap().to_string();
    std::fs::write(&manifest, text.replace(&digest, &"0".repeat(digest.len()))).unwrap();
    let out = f.run(&["adapt", "--config", s(&f.config), "--pretrained", s(&pre)]);
    assert_eq!(out.status.code(), Some(3));
}

fn write_sweep(dir: &Path, points: &[(f64, f64, f64)]) {
    for &(lambda_rd, bpp, miou) in points {
        let record = RunRecord {
            tasks: vec!["segmentation".into(), "saliency".into()],
            train: TrainConfig {
                lambda_rd,
                ..Default::default()
            },
            history: Vec::new(),
            eval: EvalPoint {
                bpp,
                mse: 0.01,
                psnr: 20.0,
                metrics: [("segmentation".to_string(), miou), ("saliency".to_string(), miou + 0.2)].into(),
            },
            report: TrainableReport {
                total: 100,
                trainable: 5,
                ratio: 0.05,
                base: 95,
                adaptor: 5,
            },
            base_digest_before: "b".into(),
            base_digest_after: "b".into(),
            predictors_digest_before: "p".into(),
            predictors_digest_after: "p".into(),
            train_seconds: 1.0,
        };
        let sub = dir.join(format!("lambda_rd-{lambda_rd}"));
        std::fs::create_dir_all(&sub).unwrap();
        std::fs::write(sub.join(RECORD_FILE), serde_json::to_string(&record).unwrap()).unwrap();
    }
}

#[test]
fn report_needs_four_points_and_anchor_against_itself_is_zero() {
    let f = Fixture::new();
    let three = f.root.join("three");
    write_sweep(&three, &[(0.5, 0.4, 0.6), (1.0, 0.3, 0.55), (2.0, 0.2, 0.5)]);
    let out = f.run(&["report", s(&three), "--anchor", s(&three), "--out-dir", s(&f.root.join("r3"))]);
    assert_eq!(out.status.code(), Some(5));

    let four = f.root.join("four");
    write_sweep(&four, &[(0.25, 0.5, 0.65), (0.5, 0.4, 0.6), (1.0, 0.3, 0.55), (2.0, 0.2, 0.5)]);
    let out_dir = f.root.join("r4");
    ok(&f.run(&["report", s(&four), "--anchor", s(&four), "--single", s(&four), "--out-dir", s(&out_dir)]));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    let cell = &report["bd"][0];
    assert_eq!(cell["bd_rate"].as_f64(), Some(0.0));
    assert_eq!(cell["bd_acc"].as_f64(), Some(0.0));
    let rows = report["delta_m"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r["delta_m"].as_f64() == Some(0.0)));
    assert!(out_dir.join("report.md").is_file());
}
