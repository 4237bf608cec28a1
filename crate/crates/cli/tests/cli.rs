use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use rgwm::config::PerturbationChoice;
use rgwm::prefix_tuner::{tune_prefix, TuneRequest};
use rgwm::{Config, Pipeline};
use rgwm_core::codebook::{ClusterTable, Codebook};
use rgwm_core::perturb::{apply, NamedPerturbation, PerturbKind, PerturbSpec};
use rgwm_core::pixelcodec::{decode, quantize_8bit};
use rgwm_core::verifier::{count_green, roc_metrics, verify_image, VerifyMode};
use rgwm_core::{TokenGrid, Watermark, WatermarkConfig};
use rgwm_generator::generate_with_wm;

fn rgwm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgwm")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = rgwm(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn zero_delta_and_no_watermark_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["make-codebook", "--out", "cb.bin"]);
    ok(d, &["cluster", "--codebook", "cb.bin", "--out", "cl.json"]);
    let common = ["--codebook", "cb.bin", "--clusters", "cl.json", "--seed", "4"];
    ok(d, &[&["generate", "--delta", "0", "--out", "a.ppm"][..], &common].concat());
    ok(d, &[&["generate", "--no-wm", "--out", "b.ppm"][..], &common].concat());
    ok(d, &[&["generate", "--out", "c.ppm"][..], &common].concat());
    let a = std::fs::read(d.join("a.ppm")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.ppm")).unwrap());
    assert_ne!(a, std::fs::read(d.join("c.ppm")).unwrap());
}

#[test]
fn verify_matches_in_process_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["make-codebook", "--out", "cb.bin"]);
    ok(d, &["cluster", "--codebook", "cb.bin", "--out", "cl.json"]);
    let files = ["--codebook", "cb.bin", "--clusters", "cl.json", "--kappa", "3"];
    ok(d, &[&["generate", "--out", "w.ppm", "--tokens-out", "w.json"][..], &files].concat());
    let report: serde_json::Value = serde_json::from_str(&ok(d, &[&["verify", "--image", "w.ppm"][..], &files].concat())).unwrap();

    let grid = TokenGrid::from_json(&std::fs::read_to_string(d.join("w.json")).unwrap()).unwrap();
    let table = ClusterTable::from_json(&std::fs::read_to_string(d.join("cl.json")).unwrap()).unwrap();
    let wm = Watermark::new(WatermarkConfig::new(3, 0.25, 5.0, Arc::new(table)).unwrap());
    let (green, total) = count_green(&grid, &wm).unwrap();
    assert_eq!(report["green_count"], green);
    assert_eq!(report["T"], total);
    assert_eq!(report["green_fraction"].as_f64().unwrap(), green as f64 / total as f64);
    assert_eq!(report["watermarked"], true);
    assert!(Codebook::load(d.join("cb.bin")).is_ok());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(rgwm(d, &["--config", "missing.json", "make-codebook", "--out", "x"]).status.code(), Some(2));
    std::fs::write(d.join("bad.json"), r#"{"watermark": {"gamma": 2.0}}"#).unwrap();
    assert_eq!(rgwm(d, &["--config", "bad.json", "make-codebook", "--out", "x"]).status.code(), Some(2));
    assert_eq!(rgwm(d, &["verify", "--image", "missing.ppm"]).status.code(), Some(3));
    std::fs::write(d.join("junk.ppm"), b"P5\n1 1\n255\n\0").unwrap();
    assert_eq!(rgwm(d, &["verify", "--image", "junk.ppm"]).status.code(), Some(3));
    assert_eq!(rgwm(d, &["perturb", "--input", "junk.ppm", "--out", "y.ppm", "--perturb", "bogus=1"]).status.code(), Some(3));
    assert_eq!(rgwm(d, &["make-codebook"]).status.code(), Some(2));
}

#[test]
fn evaluate_writes_table_shaped_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["evaluate", "--n-images", "10", "--perturb", "salt_pepper=0.05", "--perturb", "jpeg_like=60", "--out-dir", "ev"]);
    let csv = std::fs::read_to_string(d.join("ev/results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("image_id,mode,perturbation,green_count,T,green_fraction,p_value"));
    // 10 watermarked images x 3 conditions plus 10 clean negatives.
    assert_eq!(lines.count(), 40);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ev/summary.json")).unwrap()).unwrap();
    let rows = summary["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let cell = row["cell"].as_str().unwrap();
        let parts: Vec<&str> = cell.split(" | ").collect();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0], format!("{:.3}", row["auc"].as_f64().unwrap()));
        assert_eq!(parts[1], format!("{:.3}", row["tpr"].as_f64().unwrap()));
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ev/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["evaluate"]["n_images"], 10);
    assert_eq!(manifest["command"], "evaluate");
}

fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.codebook.vocab_size = 128;
    cfg.cluster.k = 16;
    cfg.generate.h = 8;
    cfg.generate.w = 8;
    cfg
}

fn perturbations() -> Vec<NamedPerturbation> {
    vec![
        NamedPerturbation { name: "noise".into(), spec: PerturbSpec::new(PerturbKind::GaussianNoise, 0.1, 0).unwrap() },
        NamedPerturbation { name: "blur".into(), spec: PerturbSpec::new(PerturbKind::GaussianBlur, 2.0, 0).unwrap() },
    ]
}

#[test]
fn prefix_report_matches_direct_recomputation() {
    let cfg = small_config();
    let pipeline = Pipeline::build(&cfg).unwrap();
    let set = perturbations();
    let candidates = [2u64, 5];
    let n = 12;
    let request = TuneRequest { candidates: &candidates, n_images: n, perturbations: &set, mode: VerifyMode::Vq, fpr: 0.1 };
    let report = tune_prefix(&cfg, &pipeline, &request, None).unwrap();

    let render = |grid: &TokenGrid| quantize_8bit(&decode(grid, &pipeline.codebook).unwrap());
    let sampler = |label: String| cfg.sampler_config(cfg.seed(&label));
    let (h, w) = (cfg.generate.h, cfg.generate.w);
    let negatives: Vec<_> = (0..n)
        .map(|i| render(&generate_with_wm(&pipeline.model, None, i % 10, h, w, &sampler(format!("tune/unwm/{i}"))).unwrap()))
        .collect();
    let mut expected = Vec::new();
    for &kappa in &candidates {
        let wm = Watermark::new(WatermarkConfig::new(kappa, 0.25, 5.0, pipeline.table.clone()).unwrap());
        let score = |img: &rgwm_core::Image| verify_image(img, &pipeline.codebook, &wm, VerifyMode::Vq, None).unwrap().green_fraction;
        let neg: Vec<f64> = negatives.iter().map(score).collect();
        for p in &set {
            let pos: Vec<f64> = (0..n)
                .map(|i| {
                    let grid = generate_with_wm(&pipeline.model, Some(&wm), i % 10, h, w, &sampler(format!("tune/wm/{i}"))).unwrap();
                    let spec = p.spec.with_seed(cfg.seed(&format!("tune/perturb/{}/{i}", p.name)));
                    score(&apply(&render(&grid), &spec).unwrap())
                })
                .collect();
            let roc = roc_metrics(&pos, &neg, 0.1).unwrap();
            expected.push((kappa, p.name.clone(), roc.auc, roc.tpr_at_fpr));
        }
    }
    let got: Vec<_> = report.rows.iter().map(|r| (r.kappa, r.perturbation.clone(), r.auc, r.tpr)).collect();
    assert_eq!(got, expected);

    let means: Vec<f64> = candidates.iter().map(|&k| {
        let tprs: Vec<f64> = expected.iter().filter(|e| e.0 == k).map(|e| e.3).collect();
        tprs.iter().sum::<f64>() / tprs.len() as f64
    }).collect();
    let best = if means[1] > means[0] { 1 } else { 0 };
    assert_eq!(report.chosen_kappa, candidates[best]);
    assert_eq!(report.mean_tpr, means[best]);
    assert!(report.candidates.iter().all(|c| c.mean_tpr <= report.mean_tpr));

    assert_eq!(tune_prefix(&cfg, &pipeline, &request, None).unwrap(), report);
}

#[test]
fn prefix_tuning_edge_cases() {
    let cfg = small_config();
    let pipeline = Pipeline::build(&cfg).unwrap();
    let set = perturbations();
    let single = TuneRequest { candidates: &[7], n_images: 4, perturbations: &set[..1], mode: VerifyMode::Vq, fpr: 0.01 };
    assert_eq!(tune_prefix(&cfg, &pipeline, &single, None).unwrap().chosen_kappa, 7);
    let empty = TuneRequest { candidates: &[], ..single.clone() };
    assert!(tune_prefix(&cfg, &pipeline, &empty, None).is_err());
    let tiny = TuneRequest { n_images: 1, ..single };
    assert!(tune_prefix(&cfg, &pipeline, &tiny, None).is_err());
    let mut with_set = cfg.clone();
    with_set.tune_prefix.perturbations = PerturbationChoice::Set("B".into());
    assert_eq!(with_set.tune_prefix.perturbations.resolve().unwrap().len(), 9);
}

#[test]
fn tune_prefix_command_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(
        d,
        &["tune-prefix", "--candidates", "1,2", "--n-images", "4", "--perturb", "gaussian_noise=0.05", "--h", "8", "--w", "8", "--out-dir", "tp"],
    );
    assert!(out.starts_with("chosen kappa"));
    let csv = std::fs::read_to_string(d.join("tp/prefix_report.csv")).unwrap();
    assert!(csv.starts_with("kappa,perturbation,auc,tpr\n"));
    assert_eq!(csv.lines().count(), 3);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("tp/prefix_summary.json")).unwrap()).unwrap();
    assert!(summary["chosen_kappa"].is_u64() && summary["mean_tpr"].is_f64());
}

#[test]
fn train_and_grad_check_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(d, &["train-cc", "--n-images", "8", "--epochs", "2", "--h", "4", "--w", "4", "--out", "cc.bin"]);
    assert!(out.starts_with("final training loss"));
    ok(d, &["generate", "--h", "4", "--w", "4", "--out", "w.ppm"]);
    let report: serde_json::Value =
        serde_json::from_str(&ok(d, &["verify", "--h", "4", "--w", "4", "--image", "w.ppm", "--mode", "cc", "--cc-model", "cc.bin"])).unwrap();
    assert_eq!(report["mode"], "cc");
    assert_eq!(report["T"], 15);
    let out = ok(d, &["grad-check", "--models", "2", "--params", "20"]);
    let err: f64 = out.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err < 1e-4);
}

#[test]
fn shipped_default_config_matches_builtin_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    assert_eq!(Config::load(path).unwrap(), Config::default());
}
