//! Test-stage pipeline: global score, binary-CAM fusion, local scores of the
//! L-Patch and S-Patch, and weighted fusion.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::ClassifierModel;
use crate::dataset::{FingerprintSample, Label, Patch, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::rethinking::{binary_cam_fusion, cam_patch_extract, CamOptions, CamResult};

/// Fusion weights `(w_g, w_l, w_s)`. They need not sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub global: f64,
    pub live_patch: f64,
    pub spoof_patch: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
    }
}

impl FusionWeights {
    pub const fn new(global: f64, live_patch: f64, spoof_patch: f64) -> Self {
        Self { global, live_patch, spoof_patch }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.global, self.live_patch, self.spoof_patch]
    }

    pub fn sum(&self) -> f64 {
        self.global + self.live_patch + self.spoof_patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("fusion weights must be finite and nonnegative: {self}")));
        }
        Ok(())
    }

    pub fn fuse(&self, gy_p: f64, ly_l: f64, ly_s: f64) -> f64 {
        self.global * gy_p + self.live_patch * ly_l + self.spoof_patch * ly_s
    }
}

impl fmt::Display for FusionWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.global, self.live_patch, self.spoof_patch)
    }
}

impl FromStr for FusionWeights {
    type Err = Error;

    /// Parses `wg,wl,ws`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad weights {s:?}: {e}")))?;
        let [g, l, sp] = parts[..] else {
            return Err(Error::Config(format!("expected three weights, got {s:?}")));
        };
        let w = Self::new(g, l, sp);
        w.validate()?;
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub id: String,
    pub gy_p: f64,
    pub ly_l: f64,
    pub ly_s: f64,
    pub fy: f64,
    pub l_patch_origin: (usize, usize),
    pub s_patch_origin: (usize, usize),
    pub weights: FusionWeights,
}

impl FusionResult {
    /// Hard decision at 0.5 on the fused score.
    pub fn is_spoof(&self) -> bool {
        self.fy > 0.5
    }
}

/// Everything the test stage computes for one sample.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub result: FusionResult,
    pub cams: CamResult,
    pub l_patch: Patch,
    pub s_patch: Patch,
}

pub fn predict_detailed(
    sample: &FingerprintSample,
    gf: &ClassifierModel,
    lf: &ClassifierModel,
    weights: FusionWeights,
) -> Result<Prediction> {
    let wrap = |e: Error| Error::Scoring { id: sample.id.clone(), source: Box::new(e) };
    weights.validate().map_err(wrap)?;
    let (h, w) = sample.image.dim();
    if h < PATCH_SIZE || w < PATCH_SIZE {
        return Err(wrap(Error::Shape(format!(
            "{h}x{w} image cannot hold a {PATCH_SIZE}x{PATCH_SIZE} patch"
        ))));
    }
    let run = || -> Result<Prediction> {
        let cams = binary_cam_fusion(gf, &sample.image, &sample.id, CamOptions::default())?;
        let l_patch = cam_patch_extract(&sample.image, &cams.lcam, PATCH_SIZE)?;
        let s_patch = cam_patch_extract(&sample.image, &cams.scam, PATCH_SIZE)?;
        let ly_l = lf.score_patch(&l_patch.pixels)?;
        let ly_s = lf.score_patch(&s_patch.pixels)?;
        let result = FusionResult {
            id: sample.id.clone(),
            gy_p: cams.gy_p,
            ly_l,
            ly_s,
            fy: weights.fuse(cams.gy_p, ly_l, ly_s),
            l_patch_origin: l_patch.origin,
            s_patch_origin: s_patch.origin,
            weights,
        };
        Ok(Prediction { result, cams, l_patch, s_patch })
    };
    run().map_err(wrap)
}

/// Fused spoofness of one sample. Never applies training-time transforms.
pub fn predict(
    sample: &FingerprintSample,
    gf: &ClassifierModel,
    lf: &ClassifierModel,
    weights: FusionWeights,
) -> Result<FusionResult> {
    Ok(predict_detailed(sample, gf, lf, weights)?.result)
}

/// Order-preserving elementwise [`predict`].
pub fn predict_batch(
    samples: &[FingerprintSample],
    gf: &ClassifierModel,
    lf: &ClassifierModel,
    weights: FusionWeights,
) -> Result<Vec<FusionResult>> {
    if samples.is_empty() {
        return Err(Error::Data("empty sample batch".into()));
    }
    samples.iter().map(|s| predict(s, gf, lf, weights)).collect()
}

/// One line of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    pub sensor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub material: Option<String>,
    pub gy_p: f64,
    pub ly_l: f64,
    pub ly_s: f64,
    pub fy: f64,
    /// Sensor the models were trained on, for cross-sensor score files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_sensor: Option<String>,
}

impl ScoreRecord {
    pub fn from_result(sample: &FingerprintSample, r: &FusionResult) -> Self {
        Self {
            id: sample.id.clone(),
            label: Some(sample.label),
            sensor: sample.sensor.clone(),
            material: sample.material.clone(),
            gy_p: r.gy_p,
            ly_l: r.ly_l,
            ly_s: r.ly_s,
            fy: r.fy,
            train_sensor: None,
        }
    }
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}
