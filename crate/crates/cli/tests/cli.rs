use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fpad_core::dataset::{Label, Manifest};
use fpad_core::evaluation::{evaluate, Protocol};
use fpad_core::imaging::{crop, load_gray_png, to_gray16};
use fpad_core::rethinking::import_cam;
use fpad_core::scoring::{write_scores, ScoreRecord};
use serde_json::Value;

fn fpad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpad")).args(args).output().expect("spawn fpad")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str, live: &str, spoof: &str) -> Output {
    fpad(&["synth", "--out", s(dir), "--seed", seed, "--live", live, "--spoof", spoof])
}

/// Every output file under `dir`, sorted, with its bytes. The echoed run
/// config is left out since it records the output directory.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name() != Some("run_config.json".as_ref()) {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_the_requested_pool_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&synth(&a, "7", "100", "100"));
    ok(&synth(&b, "7", "100", "100"));
    let m = Manifest::read(&a.join("manifest.json")).unwrap();
    assert_eq!(m.samples.len(), 200);
    let split_total = m.splits.train.len() + m.splits.validation.len() + m.splits.test.len();
    assert_eq!(split_total, 200);
    assert_eq!(m.splits.train.len(), 100);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn synth_rejects_empty_pools_and_unwritable_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = synth(&tmp.path().join("d"), "7", "0", "100");
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pool"));

    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = synth(&blocker.join("sub"), "7", "8", "8");
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn bad_flags_are_validation_errors() {
    assert_eq!(fpad(&["synth", "--arch", "resnet"]).status.code(), Some(1));
    assert_eq!(fpad(&["synth", "--weights", "1,2"]).status.code(), Some(1));
    assert_eq!(fpad(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fpad(&["--help"]).status.code(), Some(0));
}

#[test]
fn local_training_without_pretext_names_the_missing_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let out = fpad(&["train", "local", "--out", s(&out_dir), "--data", "/nonexistent/manifest.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing dependency"), "{err}");
    assert!(err.contains(s(&out_dir.join("pretext"))), "{err}");
}

fn rec(id: usize, label: Label, sensor: &str, train: &str, fy: f64) -> ScoreRecord {
    ScoreRecord {
        id: format!("{train}-{sensor}-{id}"),
        label: Some(label),
        sensor: sensor.into(),
        material: None,
        gy_p: fy,
        ly_l: fy,
        ly_s: fy,
        fy,
        train_sensor: Some(train.into()),
    }
}

fn lcg(state: &mut u64) -> f64 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (*state >> 11) as f64 / (1u64 << 53) as f64
}

#[test]
fn eval_on_score_files_matches_direct_metrics_and_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    let sensors = ["green", "digital", "orcathus"];
    let mut recs = Vec::new();
    let mut st = 11u64;
    for tr in sensors {
        for te in sensors.iter().filter(|&&x| x != tr) {
            for i in 0..40 {
                let label = if i % 2 == 0 { Label::Live } else { Label::Spoof };
                let shift = if label == Label::Spoof { 0.3 } else { 0.0 };
                recs.push(rec(i, label, te, tr, (lcg(&mut st) * 0.7 + shift).min(1.0)));
            }
        }
    }
    let scores = tmp.path().join("scores.jsonl");
    write_scores(&scores, &recs).unwrap();
    let out_dir = tmp.path().join("eval");
    let args = ["eval", "--scores", s(&scores), "--protocol", "cross-sensor", "--out", s(&out_dir), "--csv"];
    ok(&fpad(&args));
    let first = fs::read(out_dir.join("eval_report.json")).unwrap();
    ok(&fpad(&args));
    assert_eq!(fs::read(out_dir.join("eval_report.json")).unwrap(), first);
    assert!(out_dir.join("eval_table.csv").is_file());

    let report: Value = serde_json::from_slice(&first).unwrap();
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 6);

    // independent re-summary of the per-cell numbers
    let summarize = |key: &str| {
        let v: Vec<f64> = cells.iter().map(|c| c[key].as_f64().unwrap()).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt())
    };
    for (key, field) in [("ace_percent", "ace"), ("tdr_at_fdr1_percent", "tdr")] {
        let (m, sd) = summarize(key);
        assert!((report[field]["mean"].as_f64().unwrap() - m).abs() < 1e-9);
        assert!((report[field]["sd"].as_f64().unwrap() - sd).abs() < 1e-9);
    }

    // each cell equals the metric computed straight from its records
    for c in cells {
        let (tr, te) = (c["train_sensor"].as_str().unwrap(), c["test_sensor"].as_str().unwrap());
        let mine: Vec<&ScoreRecord> =
            recs.iter().filter(|r| r.sensor == te && r.train_sensor.as_deref() == Some(tr)).collect();
        let sc: Vec<f64> = mine.iter().map(|r| r.fy).collect();
        let lb: Vec<Label> = mine.iter().map(|r| r.label.unwrap()).collect();
        let direct = evaluate(&sc, &lb, 0.5, Protocol::CrossSensor, tr, te).unwrap();
        assert_eq!(c["ace_percent"].as_f64().unwrap(), direct.ace_percent);
        assert_eq!(c["tdr_at_fdr1_percent"].as_f64().unwrap(), direct.tdr_at_fdr1_percent);
    }
}

#[test]
fn protocol_violations_fail_before_inference() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&synth(&data, "3", "8", "8"));
    // one sensor cannot form a cross-sensor protocol; no checkpoints exist either
    let out = fpad(&[
        "eval",
        "--protocol",
        "cross-sensor",
        "--data",
        s(&data.join("manifest.json")),
        "--out",
        s(&tmp.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("protocol violation"));
}

/// Tiny end-to-end run: synth, the three training stages, infer, eval, cam.
#[test]
fn three_stage_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    ok(&synth(&data, "5", "8", "8"));
    let cfg = root.join("c.json");
    fs::write(
        &cfg,
        r#"{
            "seed": 3,
            "out_dir": "run",
            "manifest": "data/manifest.json",
            "global_checkpoint": "run/global",
            "pretext_checkpoint": "run/pretext",
            "local_checkpoint": "run/local",
            "train": {"epochs": 1, "batch_size": 8, "learning_rate": 0.001, "verbose": false},
            "cutout": {"n_windows": 2, "window_size": 32},
            "pretext": {"steps": 2},
            "patches": {"per_image": 2}
        }"#,
    )
    .unwrap();
    let c = s(&cfg);
    let run = root.join("run");

    ok(&fpad(&["train", "global", "--config", c]));
    for f in ["manifest.json", "weights.bin", "train_report.json"] {
        assert!(run.join("global").join(f).is_file(), "{f}");
    }
    ok(&fpad(&["train", "local-pretext", "--config", c]));
    assert!(run.join("pretext/weights.bin").is_file());
    ok(&fpad(&["train", "local", "--config", c]));
    assert!(run.join("local/weights.bin").is_file());

    ok(&fpad(&["infer", "--config", c]));
    let lines = fs::read_to_string(run.join("scores.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);

    let eval_out = root.join("eval");
    ok(&fpad(&["eval", "--config", c, "--scores", s(&run.join("scores.jsonl")), "--out", s(&eval_out), "--roc"]));
    let report: Value = serde_json::from_slice(&fs::read(eval_out.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 1);
    assert!(eval_out.join("roc_0.png").is_file());

    // cam on one test image, twice, with byte-identical outputs
    let manifest = Manifest::read(&data.join("manifest.json")).unwrap();
    let entry = manifest.samples.iter().find(|m| m.id == manifest.splits.test[0]).unwrap();
    let image = data.join(&entry.path);
    let (cam_a, cam_b) = (root.join("cam_a"), root.join("cam_b"));
    ok(&fpad(&["cam", "--config", c, "--image", s(&image), "--out", s(&cam_a)]));
    ok(&fpad(&["cam", "--config", c, "--image", s(&image), "--out", s(&cam_b)]));
    assert_eq!(tree(&cam_a), tree(&cam_b));

    let src = load_gray_png(&image).unwrap();
    let lcam = import_cam(&cam_a.join("lcam.f32")).unwrap();
    let scam = import_cam(&cam_a.join("scam.f32")).unwrap();
    assert_eq!(lcam.values.dim(), src.dim());
    assert_eq!(scam.values.dim(), src.dim());
    for (l, s) in lcam.values.iter().zip(scam.values.iter()) {
        assert!((s + l).abs() <= 1e-5);
    }
    for f in ["lcam_overlay.png", "scam_overlay.png", "s_patch.png"] {
        assert!(cam_a.join(f).is_file(), "{f}");
    }

    // crop oracle: the L-Patch PNG holds the source pixels at the reported origin
    let summary: Value = serde_json::from_slice(&fs::read(cam_a.join("cam.json")).unwrap()).unwrap();
    let o = &summary["l_patch_origin"];
    let origin = (o[0].as_u64().unwrap() as usize, o[1].as_u64().unwrap() as usize);
    let expected = to_gray16(crop(&src, origin, 96).unwrap().view());
    let written = image::open(cam_a.join("l_patch.png")).unwrap().into_luma16();
    assert_eq!(written.dimensions(), (96, 96));
    assert_eq!(written.as_raw(), expected.as_raw());

    let small = root.join("small.png");
    fpad_core::imaging::save_gray8_png(&small, ndarray::Array2::<f64>::zeros((64, 200)).view()).unwrap();
    let out = fpad(&["cam", "--config", c, "--image", s(&small), "--out", s(&root.join("cam_small"))]);
    assert_eq!(out.status.code(), Some(1));
}
