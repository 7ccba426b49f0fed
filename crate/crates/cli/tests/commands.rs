use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use tempfile::TempDir;
use vitok::autoencoder::IdentityStub;
use vitok::metrics::{EvalReport, LatencyRow};
use vitok_cli::{run, write_report, ReportFormat, RunConfig, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

const TINY: &str = r#"
[model]
enc_depth = 1
dec_depth = 1
width = 16
heads = 2
patch = 8
latent_channels = 4
regularizer = "layernorm"
reg_param = 0.0
name = "tiny"
mlp_multiple = 8

[train]
total_steps = 3
batch_size = 2
budgets = [16, 64]

[flow]
steps = 3
batch_size = 2
sample_grid = [2, 2]

[flow.model]
depth = 1
width = 16
heads = 2
mlp_multiple = 8

[flow.sample]
steps = 2

[data]
count = 4
size_range = [32, 40]

[eval]
max_images = 4
resolutions = [32, 64]
repeats = 1
warmup = 0
"#;

fn setup() -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn vitok(args: &[&str]) -> i32 {
    run(std::iter::once("vitok").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(vitok(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(vitok(&[]), EXIT_USAGE);
    assert_eq!(vitok(&["bench", "--bogus-flag"]), EXIT_USAGE);
    assert_eq!(vitok(&["--help"]), EXIT_OK);
}

#[test]
fn runtime_errors_exit_two() {
    let (dir, cfg) = setup();
    let out = dir.path().join("o");
    let missing = dir.path().join("missing.vtkf");
    assert_eq!(vitok(&["eval", "--config", s(&cfg), "--out", s(&out), "--ae", s(&missing)]), EXIT_RUNTIME);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nwdith = 4\n").unwrap();
    assert_eq!(vitok(&["gen-data", "--config", s(&bad), "--out", s(&out)]), EXIT_RUNTIME);
}

#[test]
fn gen_data_writes_manifest_and_images() {
    let (dir, cfg) = setup();
    let out = dir.path().join("o");
    assert_eq!(vitok(&["gen-data", "--config", s(&cfg), "--out", s(&out), "--count", "5"]), EXIT_OK);
    let manifest = read_json(&out.join("data/manifest.json"));
    assert_eq!(manifest["images"].as_array().unwrap().len(), 5);
    let data = vitok_cli::load_dataset(&out.join("data")).unwrap();
    assert_eq!(data.len(), 5);
    let hash = manifest["config_hash"].as_str().unwrap();
    assert!(fs::read_to_string(out.join("config.toml")).unwrap().contains(hash));
}

#[test]
fn eval_identity_stub_reports_cap() {
    let (dir, cfg) = setup();
    let out = dir.path().join("o");
    let stub = dir.path().join("stub.vtkf");
    IdentityStub { patch: 8 }.to_checkpoint().save(&stub).unwrap();
    assert_eq!(vitok(&["eval", "--config", s(&cfg), "--out", s(&out), "--ae", s(&stub)]), EXIT_OK);
    let report: EvalReport = serde_json::from_value(read_json(&out.join("report.json"))).unwrap();
    assert_eq!(report.psnr_db, 100.0);
    assert!((report.ssim - 1.0).abs() < 1e-6);
    assert!(report.frechet.values().all(|&d| d.abs() < 1e-6), "{:?}", report.frechet);
    let expected = RunConfig::from_toml(TINY).unwrap().hash().unwrap();
    assert_eq!(report.config_hash, expected);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(csv.contains("config_hash"));
}

#[test]
fn bench_grid_has_six_rows() {
    let (dir, cfg) = setup();
    let out = dir.path().join("o");
    let code = vitok(&["bench", "--config", s(&cfg), "--out", s(&out), "--attention", "full,swa", "--resolutions", "64,128,256"]);
    assert_eq!(code, EXIT_OK);
    let report: EvalReport = serde_json::from_value(read_json(&out.join("bench.json"))).unwrap();
    assert_eq!(report.latency_ms.len(), 6);
    let modes: Vec<&str> = report.latency_ms.iter().map(|r| r.mode.as_str()).collect();
    assert_eq!(modes.iter().filter(|m| **m == "full").count(), 3);
    assert!(report.latency_ms.iter().all(|r| r.median > 0.0 && r.error.is_none()));
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(vitok(&["bench", "--config", s(&cfg), "--out", s(&out), "--attention", "sparse"]), EXIT_RUNTIME);
}

#[test]
fn ablate_reg_emits_three_rows() {
    let (dir, cfg) = setup();
    let out = dir.path().join("o");
    assert_eq!(vitok(&["ablate-reg", "--config", s(&cfg), "--out", s(&out), "--steps", "1"]), EXIT_OK);
    let rows = read_json(&out.join("ablate_reg.json"));
    let names: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["kl", "tanh_noise", "layernorm"]);
    assert_eq!(fs::read_to_string(out.join("ablate_reg.csv")).unwrap().lines().count(), 4);
}

#[test]
fn ablate_loss_covers_presets() {
    let (dir, cfg) = setup();
    let out = dir.path().join("o");
    assert_eq!(vitok(&["ablate-loss", "--config", s(&cfg), "--out", s(&out), "--steps", "1"]), EXIT_OK);
    let rows = read_json(&out.join("ablate_loss.json"));
    assert_eq!(rows.as_array().unwrap().len(), vitok::losses::PRESETS.len());
}

#[test]
fn full_pipeline_runs() {
    let (dir, cfg) = setup();
    let out = dir.path().join("o");
    let data = out.join("data");
    assert_eq!(vitok(&["gen-data", "--config", s(&cfg), "--out", s(&out)]), EXIT_OK);
    let ae_dir = dir.path().join("ae");
    assert_eq!(vitok(&["train-ae", "--config", s(&cfg), "--out", s(&ae_dir), "--data", s(&data)]), EXIT_OK);
    let ae = ae_dir.join("ae_final.vtkf");
    let log = fs::read_to_string(ae_dir.join("train_ae.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let flow_dir = dir.path().join("flow");
    assert_eq!(vitok(&["train-flow", "--config", s(&cfg), "--out", s(&flow_dir), "--data", s(&data), "--ae", s(&ae)]), EXIT_OK);
    let flow = flow_dir.join("flow_final.vtkf");
    let sample_dir = dir.path().join("samples");
    let code = vitok(&["sample", "--config", s(&cfg), "--out", s(&sample_dir), "--ae", s(&ae), "--flow", s(&flow), "--count", "3"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(fs::read_dir(sample_dir.join("samples")).unwrap().count(), 3);
    let rec_dir = dir.path().join("rec");
    let code = vitok(&["reconstruct", "--config", s(&cfg), "--out", s(&rec_dir), "--data", s(&data), "--ae", s(&ae), "--window-radius", "1"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(fs::read_dir(rec_dir.join("recon")).unwrap().count(), 4);
    let report: EvalReport = serde_json::from_value(read_json(&rec_dir.join("report.json"))).unwrap();
    assert!(report.psnr_db.is_finite() && report.latent_std > 0.0);
    let ck = vitok::checkpoint::Checkpoint::load(&ae).unwrap();
    assert!(ck.config["config_hash"].is_string());
}

#[test]
fn flags_override_file_values() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(vitok(&["gen-data", "--config", s(&cfg), "--out", s(&a)]), EXIT_OK);
    assert_eq!(vitok(&["gen-data", "--config", s(&cfg), "--out", s(&b), "--seed", "9"]), EXIT_OK);
    let ta = fs::read_to_string(a.join("config.toml")).unwrap();
    let tb = fs::read_to_string(b.join("config.toml")).unwrap();
    assert_ne!(ta.lines().next(), tb.lines().next());
    let parsed = RunConfig::from_toml(&tb).unwrap();
    assert_eq!(parsed.train.seed, 9);
    assert_eq!(parsed.model.width, 16);
}

#[test]
fn seed_env_var_overrides_config() {
    let (dir, cfg) = setup();
    let out = dir.path().join("o");
    let status = Command::new(env!("CARGO_BIN_EXE_vitok"))
        .args(["gen-data", "--config", s(&cfg), "--out", s(&out)])
        .env("VTK_SEED", "41")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_OK));
    let parsed = RunConfig::from_toml(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(parsed.train.seed, 41);
    let status = Command::new(env!("CARGO_BIN_EXE_vitok")).arg("nope").status().unwrap();
    assert_eq!(status.code(), Some(EXIT_USAGE));
}

fn sample_report() -> EvalReport {
    let mut r = EvalReport::empty("abc123");
    r.psnr_db = 31.25;
    r.ssim = 0.9;
    r.frechet.insert("fdd".into(), 1.5);
    for (res, mode) in [(64, "full"), (64, "swa"), (128, "full")] {
        r.latency_ms.push(LatencyRow {
            resolution: res,
            mode: mode.into(),
            median: 1.0 / 3.0,
            p90: 0.5,
            pairs: 10,
            tokens: 4,
            error: None,
        });
    }
    r
}

#[test]
fn write_report_json_round_trips() {
    let dir = TempDir::new().unwrap();
    let (p1, p2) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let r = sample_report();
    write_report(&r, &p1, ReportFormat::Json).unwrap();
    let back: EvalReport = serde_json::from_str(&fs::read_to_string(&p1).unwrap()).unwrap();
    assert_eq!(back, r);
    write_report(&back, &p2, ReportFormat::Json).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
}

#[test]
fn write_report_csv_shape() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("r.csv");
    write_report(&sample_report(), &p, ReportFormat::Csv).unwrap();
    let text = fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().next().unwrap().contains("config_hash"));
    assert!(text.lines().skip(1).all(|l| l.contains("abc123")));
    assert!(write_report(&sample_report(), &dir.path().join("no/such/dir/r.csv"), ReportFormat::Csv).is_err());
}
