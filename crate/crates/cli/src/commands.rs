use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType::F32;
use serde::Serialize;

use fpad_core::backbone::checkpoint::{load_classifier, CheckpointManifest};
use fpad_core::backbone::ClassifierModel;
use fpad_core::dataset::{
    derive_seed, generate_synthetic, load_dataset, write_dataset, ClassCounts, DatasetSplit,
    FingerprintSample, Label, PATCH_SIZE,
};
use fpad_core::evaluation::{
    evaluate, protocol_cells, render_roc_png, run_protocol, Protocol, ProtocolReport,
};
use fpad_core::imaging::{self, heatmap_overlay, load_gray_png};
use fpad_core::rethinking::{binary_cam_fusion, cam_patch_extract, export_cam, CamOptions};
use fpad_core::scoring::{predict_batch, read_scores, write_scores, ScoreRecord};
use fpad_core::training::{
    finetune_local, label_map, prepare_patches, pretrain_local_inpainting, train_global, TrainReport,
};
use fpad_core::{Error, Result};

use crate::config::{require_checkpoint, require_file, RunConfig};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const REPORT_FILE: &str = "eval_report.json";

// stage tags for derived seeds
const STAGE_GLOBAL: u64 = 1;
const STAGE_PRETEXT: u64 = 2;
const STAGE_LOCAL: u64 = 3;
const STAGE_PATCHES: u64 = 4;

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Config(format!(
        "cannot create output directory {}: {e}",
        cfg.out_dir.display()
    )))?;
    fs::write(cfg.out_dir.join(RUN_CONFIG_FILE), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

/// `live` and `spoof` are pool totals, split 2:1:1 into train, validation
/// and test.
pub fn synth(cfg: &RunConfig, live: Option<usize>, spoof: Option<usize>) -> Result<PathBuf> {
    let mut synth = cfg.synth.clone();
    if live.is_some() || spoof.is_some() {
        let total = |c: fn(&ClassCounts) -> usize| {
            c(&synth.train) + c(&synth.validation) + c(&synth.test)
        };
        let live = live.unwrap_or_else(|| total(|c| c.live));
        let spoof = spoof.unwrap_or_else(|| total(|c| c.spoof));
        let (tl, vl, el) = split_pool(live)?;
        let (ts, vs, es) = split_pool(spoof)?;
        synth.train = ClassCounts { live: tl, spoof: ts };
        synth.validation = ClassCounts { live: vl, spoof: vs };
        synth.test = ClassCounts { live: el, spoof: es };
    }
    let split = generate_synthetic(&synth, cfg.seed)?;
    prepare_out(cfg)?;
    let path = write_dataset(&split, &cfg.out_dir)?;
    let (a, b, c) = split.counts();
    println!("wrote {} ({a} train, {b} validation, {c} test)", path.display());
    Ok(path)
}

fn split_pool(n: usize) -> Result<(usize, usize, usize)> {
    if n < 4 {
        return Err(Error::Config(format!("a class pool of {n} cannot fill three splits (need at least 4)")));
    }
    let quarter = n / 4;
    Ok((n - 2 * quarter, quarter, quarter))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Global,
    LocalPretext,
    Local,
}

pub fn train(cfg: &RunConfig, stage: Stage) -> Result<TrainReport> {
    // the dependency check comes before any data is read
    let pretrained_dir = cfg.pretext_dir();
    if stage == Stage::Local {
        require_checkpoint(&pretrained_dir, "pretext")?;
    }
    let split = load_dataset(cfg.manifest_path()?)?;
    prepare_out(cfg)?;
    let report = match stage {
        Stage::Global => {
            let dir = cfg.global_dir();
            train_global(&split, &cfg.train_for(STAGE_GLOBAL), &cfg.cutout, Some(&dir))?.1
        }
        Stage::LocalPretext => {
            let patches = prepare_patches(&split.train, &cfg.patches, derive_seed(cfg.seed, &[STAGE_PATCHES]))?;
            let pixels: Vec<_> = patches.into_iter().map(|p| p.pixels).collect();
            let dir = cfg.pretext_dir();
            pretrain_local_inpainting(&pixels, &cfg.train_for(STAGE_PRETEXT), &cfg.pretext, Some(&dir))?.2
        }
        Stage::Local => {
            let (pretrained, manifest) = load_classifier(&pretrained_dir, F32)?;
            check_arch(cfg, &manifest, &pretrained_dir)?;
            let seed = derive_seed(cfg.seed, &[STAGE_PATCHES]);
            let tr = prepare_patches(&split.train, &cfg.patches, seed)?;
            let va = prepare_patches(&split.validation, &cfg.patches, derive_seed(seed, &[1]))?;
            let labels = label_map(split.samples());
            let dir = cfg.local_dir();
            finetune_local(&pretrained, &tr, &va, &labels, &cfg.train_for(STAGE_LOCAL), Some(&dir))?.1
        }
    };
    if let Some(p) = &report.checkpoint_path {
        println!("checkpoint {}", p.display());
    }
    Ok(report)
}

fn check_arch(cfg: &RunConfig, manifest: &CheckpointManifest, dir: &Path) -> Result<()> {
    if manifest.arch_id != cfg.train.arch {
        return Err(Error::Config(format!(
            "{} holds a {} model, config asks for {}",
            dir.display(),
            manifest.arch_id,
            cfg.train.arch
        )));
    }
    Ok(())
}

fn load_pair(global: &Path, local: &Path) -> Result<(ClassifierModel, ClassifierModel)> {
    require_checkpoint(global, "global")?;
    require_checkpoint(local, "local")?;
    let (gf, _) = load_classifier(global, F32)?;
    let (lf, _) = load_classifier(local, F32)?;
    Ok((gf, lf))
}

fn score_samples(
    samples: &[FingerprintSample],
    gf: &ClassifierModel,
    lf: &ClassifierModel,
    cfg: &RunConfig,
) -> Result<Vec<ScoreRecord>> {
    let results = predict_batch(samples, gf, lf, cfg.weights)?;
    Ok(samples.iter().zip(&results).map(|(s, r)| ScoreRecord::from_result(s, r)).collect())
}

/// Scores the test split, or a single image, and writes a score file.
pub fn infer(cfg: &RunConfig, image: Option<&Path>) -> Result<PathBuf> {
    let (gf, lf) = load_pair(&cfg.global_dir(), &cfg.local_dir())?;
    let samples = match image {
        Some(p) => vec![single_sample(p)?],
        None => load_dataset(cfg.manifest_path()?)?.test,
    };
    prepare_out(cfg)?;
    let records = score_samples(&samples, &gf, &lf, cfg)?;
    let path = cfg.out_dir.join(SCORES_FILE);
    write_scores(&path, &records)?;
    for r in &records {
        println!("{} fy {:.6}", r.id, r.fy);
    }
    Ok(path)
}

fn single_sample(path: &Path) -> Result<FingerprintSample> {
    require_file(path, "image")?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let image = load_gray_png(path)?;
    // the label is unknown; it is not used for scoring
    FingerprintSample::new(&id, image, Label::Live, "unknown", None)
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub scores: Option<PathBuf>,
    pub csv: bool,
    pub roc: bool,
}

pub fn eval(cfg: &RunConfig, opts: &EvalOptions) -> Result<ProtocolReport> {
    let report = match &opts.scores {
        Some(path) => {
            let records = read_scores(path)?;
            report_from_scores(cfg.protocol, &records, cfg.threshold)?
        }
        None => report_from_checkpoints(cfg)?,
    };
    prepare_out(cfg)?;
    fs::write(cfg.out_dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    if opts.csv {
        report.write_csv(&cfg.out_dir.join("eval_table.csv"))?;
    }
    if opts.roc {
        for (i, c) in report.cells.iter().enumerate() {
            render_roc_png(&c.roc, &cfg.out_dir.join(format!("roc_{i}.png")))?;
        }
    }
    for c in &report.cells {
        println!(
            "{} {} -> {}: ACE {:.2}% TDR@FDR=1% {:.2}%",
            c.protocol, c.train_sensor, c.test_sensor, c.ace_percent, c.tdr_at_fdr1_percent
        );
    }
    println!("mean ACE {} TDR {}", report.ace, report.tdr);
    Ok(report)
}

/// Cross-material: every record forms one cell. Cross-sensor: records are
/// grouped by (train sensor, test sensor), and every group must cross.
pub fn report_from_scores(protocol: Protocol, records: &[ScoreRecord], threshold: f64) -> Result<ProtocolReport> {
    if records.is_empty() {
        return Err(Error::Data("score file is empty".into()));
    }
    let mut groups: BTreeMap<(String, String), (Vec<f64>, Vec<Label>)> = BTreeMap::new();
    for r in records {
        let label = r.label.ok_or_else(|| Error::Data(format!("record {} has no label", r.id)))?;
        let train = r.train_sensor.clone().unwrap_or_else(|| r.sensor.clone());
        let key = match protocol {
            Protocol::CrossMaterial => (String::new(), String::new()),
            Protocol::CrossSensor => {
                if r.train_sensor.is_none() {
                    return Err(Error::Protocol(format!("record {} lacks train_sensor", r.id)));
                }
                if train == r.sensor {
                    return Err(Error::Protocol(format!(
                        "record {} was scored on its training sensor {train}",
                        r.id
                    )));
                }
                (train, r.sensor.clone())
            }
        };
        let g = groups.entry(key).or_default();
        g.0.push(r.fy);
        g.1.push(label);
    }
    if protocol == Protocol::CrossMaterial {
        let train = records[0].train_sensor.clone().unwrap_or_else(|| records[0].sensor.clone());
        let (scores, labels) = groups.into_values().next().expect("one group");
        let cell = evaluate(&scores, &labels, threshold, protocol, &train, &records[0].sensor)?;
        return ProtocolReport::from_cells(protocol, vec![cell]);
    }
    if groups.len() < 2 {
        return Err(Error::Protocol("cross-sensor needs at least two train/test sensor pairs".into()));
    }
    let cells = groups
        .into_iter()
        .map(|((tr, te), (s, l))| evaluate(&s, &l, threshold, protocol, &tr, &te))
        .collect::<Result<Vec<_>>>()?;
    ProtocolReport::from_cells(protocol, cells)
}

fn report_from_checkpoints(cfg: &RunConfig) -> Result<ProtocolReport> {
    let runs: Vec<(PathBuf, PathBuf, PathBuf)> = if cfg.runs.is_empty() {
        vec![(cfg.manifest_path()?.to_path_buf(), cfg.global_dir(), cfg.local_dir())]
    } else {
        cfg.runs.iter().map(|r| (r.manifest.clone(), r.global_checkpoint.clone(), r.local_checkpoint.clone())).collect()
    };
    let datasets = runs.iter().map(|(m, _, _)| load_dataset(m)).collect::<Result<Vec<DatasetSplit>>>()?;
    protocol_cells(cfg.protocol, &datasets)?;
    for (_, g, l) in &runs {
        require_checkpoint(g, "global")?;
        require_checkpoint(l, "local")?;
    }
    let index_of = |d: &DatasetSplit| datasets.iter().position(|x| x.manifest_path == d.manifest_path);
    let mut all = Vec::new();
    let report = run_protocol(cfg.protocol, &datasets, cfg.threshold, |train, test| {
        let i = index_of(train).ok_or_else(|| Error::Internal("unknown dataset".into()))?;
        let (gf, lf) = load_pair(&runs[i].1, &runs[i].2)?;
        let mut records = score_samples(&test.test, &gf, &lf, cfg)?;
        let train_sensor = train.train.first().map(|s| s.sensor.clone());
        for r in &mut records {
            r.train_sensor = train_sensor.clone();
        }
        let out = (records.iter().map(|r| r.fy).collect(), test.test.iter().map(|s| s.label).collect());
        all.extend(records);
        Ok(out)
    })?;
    prepare_out(cfg)?;
    write_scores(&cfg.out_dir.join(SCORES_FILE), &all)?;
    Ok(report)
}

pub const CAM_SUMMARY_FILE: &str = "cam.json";

/// Contents of `cam.json`.
#[derive(Debug, Clone, Serialize)]
pub struct CamSummary {
    pub source_id: String,
    pub gy_p: f64,
    pub l_patch_origin: (usize, usize),
    pub s_patch_origin: (usize, usize),
}

pub fn cam(cfg: &RunConfig, image_path: &Path) -> Result<CamSummary> {
    let dir = cfg.global_dir();
    require_checkpoint(&dir, "global")?;
    let sample = single_sample(image_path)?;
    let (h, w) = sample.image.dim();
    if h < PATCH_SIZE || w < PATCH_SIZE {
        return Err(Error::Shape(format!("{h}x{w} image is smaller than a {PATCH_SIZE}x{PATCH_SIZE} patch")));
    }
    let (gf, _) = load_classifier(&dir, F32)?;
    let cams = binary_cam_fusion(&gf, &sample.image, &sample.id, CamOptions::default())?;
    let l = cam_patch_extract(&sample.image, &cams.lcam, PATCH_SIZE)?;
    let s = cam_patch_extract(&sample.image, &cams.scam, PATCH_SIZE)?;
    prepare_out(cfg)?;
    let out = &cfg.out_dir;
    export_cam(&cams.lcam, out, "lcam")?;
    export_cam(&cams.scam, out, "scam")?;
    heatmap_overlay(&sample.image, &cams.lcam.values)?.save(out.join("lcam_overlay.png"))?;
    heatmap_overlay(&sample.image, &cams.scam.values)?.save(out.join("scam_overlay.png"))?;
    imaging::save_gray16_png(&out.join("l_patch.png"), l.pixels.view())?;
    imaging::save_gray16_png(&out.join("s_patch.png"), s.pixels.view())?;
    let summary = CamSummary {
        source_id: sample.id.clone(),
        gy_p: cams.gy_p,
        l_patch_origin: l.origin,
        s_patch_origin: s.origin,
    };
    fs::write(out.join(CAM_SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    println!("gy_p {:.6} l_patch {:?} s_patch {:?}", cams.gy_p, l.origin, s.origin);
    Ok(summary)
}
