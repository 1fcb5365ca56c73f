//! Fingerprint data ingestion, synthetic desk-scale data and ROI patches.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, Image};

/// Side length of the square patches used for ROI extraction and scoring.
pub const PATCH_SIZE: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Live = 0,
    Spoof = 1,
}

impl Label {
    pub fn as_index(self) -> u32 {
        self as u32
    }

    pub fn from_index(i: u32) -> Option<Self> {
        match i {
            0 => Some(Label::Live),
            1 => Some(Label::Spoof),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Live => "live",
            Label::Spoof => "spoof",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintSample {
    pub id: String,
    pub image: Image,
    pub label: Label,
    pub sensor: String,
    pub material: Option<String>,
}

impl FingerprintSample {
    pub fn new(
        id: impl Into<String>,
        image: Image,
        label: Label,
        sensor: impl Into<String>,
        material: Option<String>,
    ) -> Result<Self> {
        let id = id.into();
        let (h, w) = image.dim();
        if h < PATCH_SIZE || w < PATCH_SIZE {
            return Err(Error::SampleRejected {
                min: PATCH_SIZE,
                ids: vec![id],
            });
        }
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("sample {id} has pixels outside [0, 1]")));
        }
        Ok(Self {
            id,
            image,
            label,
            sensor: sensor.into(),
            material,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: Image,
    pub origin: (usize, usize),
    pub variance: f64,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub threshold_used: f64,
    /// Set when no grid patch passed the threshold.
    pub empty_warning: bool,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<FingerprintSample>,
    pub validation: Vec<FingerprintSample>,
    pub test: Vec<FingerprintSample>,
    pub manifest_path: String,
}

impl DatasetSplit {
    pub fn new(
        train: Vec<FingerprintSample>,
        validation: Vec<FingerprintSample>,
        test: Vec<FingerprintSample>,
        manifest_path: impl Into<String>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in train.iter().chain(&validation).chain(&test) {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Manifest(format!(
                    "sample id {} appears more than once across splits",
                    s.id
                )));
            }
        }
        Ok(Self {
            train,
            validation,
            test,
            manifest_path: manifest_path.into(),
        })
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }

    pub fn samples(&self) -> impl Iterator<Item = &FingerprintSample> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    /// Spoof materials present in `samples`.
    pub fn spoof_materials(samples: &[FingerprintSample]) -> BTreeSet<String> {
        samples
            .iter()
            .filter(|s| s.label == Label::Spoof)
            .filter_map(|s| s.material.clone())
            .collect()
    }

    /// Spoof materials shared by train and test; empty for a valid
    /// cross-material layout.
    pub fn shared_spoof_materials(&self) -> BTreeSet<String> {
        let train = Self::spoof_materials(&self.train);
        let test = Self::spoof_materials(&self.test);
        train.intersection(&test).cloned().collect()
    }

    pub fn is_cross_material(&self) -> bool {
        self.shared_spoof_materials().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    pub path: String,
    pub label: Label,
    pub sensor: String,
    #[serde(default)]
    pub material: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ManifestSplits {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub validation: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<ManifestSample>,
    pub splits: ManifestSplits,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
    }

    /// Checks id uniqueness, split references and split disjointness.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample id {}", s.id)));
            }
        }
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for (name, list) in [
            ("train", &self.splits.train),
            ("validation", &self.splits.validation),
            ("test", &self.splits.test),
        ] {
            for id in list {
                if !ids.contains(id.as_str()) {
                    return Err(Error::Manifest(format!(
                        "split {name} references unknown sample {id}"
                    )));
                }
                if let Some(prev) = owner.insert(id, name) {
                    return Err(Error::Manifest(format!(
                        "sample {id} appears in both {prev} and {name}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Loads every sample referenced by a manifest's splits. Image paths are
/// resolved relative to the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<DatasetSplit> {
    let manifest = Manifest::read(manifest_path)?;
    manifest.validate()?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let by_id: BTreeMap<&str, &ManifestSample> =
        manifest.samples.iter().map(|s| (s.id.as_str(), s)).collect();

    let mut rejected = Vec::new();
    let mut load = |ids: &[String]| -> Result<Vec<FingerprintSample>> {
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let entry = by_id[id.as_str()];
            let path = base.join(&entry.path);
            if !path.is_file() {
                return Err(Error::Ingestion {
                    path,
                    reason: "file not found".into(),
                });
            }
            let image = imaging::load_gray_png(&path)?;
            match FingerprintSample::new(
                &entry.id,
                image,
                entry.label,
                &entry.sensor,
                entry.material.clone(),
            ) {
                Ok(s) => out.push(s),
                Err(Error::SampleRejected { ids, .. }) => rejected.extend(ids),
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    };
    let train = load(&manifest.splits.train)?;
    let validation = load(&manifest.splits.validation)?;
    let test = load(&manifest.splits.test)?;
    if !rejected.is_empty() {
        return Err(Error::SampleRejected {
            min: PATCH_SIZE,
            ids: rejected,
        });
    }
    DatasetSplit::new(
        train,
        validation,
        test,
        manifest_path.to_string_lossy().into_owned(),
    )
}

/// Writes a split as 16-bit PNGs under `dir/images` plus `dir/manifest.json`.
/// Returns the manifest path.
pub fn write_dataset(split: &DatasetSplit, dir: &Path) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir)?;
    let mut samples = Vec::new();
    for s in split.samples() {
        let rel = format!("images/{}.png", s.id);
        imaging::save_gray16_png(&dir.join(&rel), s.image.view())?;
        samples.push(ManifestSample {
            id: s.id.clone(),
            path: rel,
            label: s.label,
            sensor: s.sensor.clone(),
            material: s.material.clone(),
        });
    }
    let ids = |v: &[FingerprintSample]| v.iter().map(|s| s.id.clone()).collect();
    let manifest = Manifest {
        samples,
        splits: ManifestSplits {
            train: ids(&split.train),
            validation: ids(&split.validation),
            test: ids(&split.test),
        },
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Population variance of a pixel block, computed in two passes.
pub fn patch_variance(pixels: ArrayView2<'_, f64>) -> f64 {
    let n = pixels.len() as f64;
    let mean = pixels.iter().sum::<f64>() / n;
    pixels.iter().map(|&p| (p - mean) * (p - mean)).sum::<f64>() / n
}

/// Top-left origins of the regular patch grid at `stride`.
pub fn grid_origins(h: usize, w: usize, patch_size: usize, stride: usize) -> Vec<(usize, usize)> {
    if patch_size > h || patch_size > w || stride == 0 {
        return Vec::new();
    }
    let rows = (0..=h - patch_size).step_by(stride);
    rows.flat_map(|r| (0..=w - patch_size).step_by(stride).map(move |c| (r, c)))
        .collect()
}

/// Default ROI threshold: `factor` times the mean grid-patch variance.
pub fn adaptive_threshold(img: &Image, patch_size: usize, stride: usize, factor: f64) -> f64 {
    let origins = grid_origins(img.nrows(), img.ncols(), patch_size, stride);
    if origins.is_empty() {
        return 0.0;
    }
    let total: f64 = origins
        .iter()
        .map(|&(r, c)| patch_variance(img.slice(s![r..r + patch_size, c..c + patch_size])))
        .sum();
    factor * total / origins.len() as f64
}

/// Keeps the grid patches whose variance exceeds `t`.
pub fn extract_roi_patches(
    sample: &FingerprintSample,
    patch_size: usize,
    stride: usize,
    t: f64,
) -> Result<PatchSet> {
    if stride == 0 {
        return Err(Error::Config("patch stride must be at least 1".into()));
    }
    let (h, w) = sample.image.dim();
    if patch_size == 0 || patch_size > h.min(w) {
        return Err(Error::Shape(format!(
            "patch size {patch_size} does not fit a {h}x{w} image"
        )));
    }
    let patches: Vec<Patch> = grid_origins(h, w, patch_size, stride)
        .into_iter()
        .filter_map(|(r, c)| {
            let view = sample.image.slice(s![r..r + patch_size, c..c + patch_size]);
            let variance = patch_variance(view);
            (variance > t).then(|| Patch {
                pixels: view.to_owned(),
                origin: (r, c),
                variance,
                source_id: sample.id.clone(),
            })
        })
        .collect();
    Ok(PatchSet {
        empty_warning: patches.is_empty(),
        patches,
        threshold_used: t,
    })
}

/// Draws `n` patches: without replacement when enough are available,
/// otherwise with replacement.
pub fn sample_training_patches(set: &PatchSet, n: usize, rng_seed: u64) -> Result<PatchSet> {
    if n == 0 {
        return Err(Error::Sampling("requested zero patches".into()));
    }
    if set.is_empty() {
        return Err(Error::Sampling("cannot sample from an empty patch set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let picks: Vec<usize> = if set.len() >= n {
        index::sample(&mut rng, set.len(), n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..set.len())).collect()
    };
    Ok(PatchSet {
        patches: picks.into_iter().map(|i| set.patches[i].clone()).collect(),
        threshold_used: set.threshold_used,
        empty_warning: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub live: usize,
    pub spoof: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub train: ClassCounts,
    pub validation: ClassCounts,
    pub test: ClassCounts,
    pub train_materials: Vec<String>,
    pub test_materials: Vec<String>,
    pub sensor: String,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 160,
            width: 160,
            train: ClassCounts { live: 100, spoof: 100 },
            validation: ClassCounts { live: 50, spoof: 50 },
            test: ClassCounts { live: 50, spoof: 50 },
            train_materials: vec![SpoofRecipe::Smoothing.name().into(), SpoofRecipe::Flattening.name().into()],
            test_materials: vec![SpoofRecipe::Occlusion.name().into()],
            sensor: "synthetic".into(),
            noise_sigma: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 160 || self.width < 160 {
            return Err(Error::Config(format!(
                "synthetic images must be at least 160x160, got {}x{}",
                self.height, self.width
            )));
        }
        for (name, c) in [("train", self.train), ("validation", self.validation), ("test", self.test)] {
            if c.live == 0 || c.spoof == 0 {
                return Err(Error::Config(format!(
                    "{name} split needs at least one live and one spoof sample"
                )));
            }
        }
        if self.train_materials.is_empty() || self.test_materials.is_empty() {
            return Err(Error::Config("spoof material lists must be nonempty".into()));
        }
        for m in self.train_materials.iter().chain(&self.test_materials) {
            SpoofRecipe::from_name(m)?;
        }
        if let Some(m) = self.test_materials.iter().find(|m| self.train_materials.contains(m)) {
            return Err(Error::Config(format!(
                "material {m} appears in both train and test material lists"
            )));
        }
        if !(0.0..0.5).contains(&self.noise_sigma) {
            return Err(Error::Config("noise_sigma must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Degradations that turn a live ridge pattern into a synthetic spoof.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpoofRecipe {
    Smoothing,
    Flattening,
    Occlusion,
}

impl SpoofRecipe {
    pub fn name(self) -> &'static str {
        match self {
            SpoofRecipe::Smoothing => "smoothing",
            SpoofRecipe::Flattening => "flattening",
            SpoofRecipe::Occlusion => "occlusion",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "smoothing" => Ok(SpoofRecipe::Smoothing),
            "flattening" => Ok(SpoofRecipe::Flattening),
            "occlusion" => Ok(SpoofRecipe::Occlusion),
            other => Err(Error::Config(format!("unknown spoof material {other}"))),
        }
    }
}

// splitmix64 finalizer, used to derive per-sample seeds
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// Generates a cross-material synthetic dataset: train and validation spoofs
/// use `train_materials`, test spoofs use `test_materials`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<DatasetSplit> {
    cfg.validate()?;
    let mut splits = Vec::new();
    for (si, (name, counts, materials)) in [
        ("train", cfg.train, &cfg.train_materials),
        ("validation", cfg.validation, &cfg.train_materials),
        ("test", cfg.test, &cfg.test_materials),
    ]
    .into_iter()
    .enumerate()
    {
        let mut samples = Vec::with_capacity(counts.live + counts.spoof);
        for i in 0..counts.live {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[si as u64, 0, i as u64]));
            let img = synth_live(cfg, &mut rng);
            let id = format!("{}-{name}-live-{i:04}", cfg.sensor);
            samples.push(FingerprintSample::new(id, img, Label::Live, &cfg.sensor, None)?);
        }
        for i in 0..counts.spoof {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[si as u64, 1, i as u64]));
            let material = &materials[i % materials.len()];
            let img = synth_spoof(cfg, SpoofRecipe::from_name(material)?, &mut rng);
            let id = format!("{}-{name}-spoof-{i:04}", cfg.sensor);
            samples.push(FingerprintSample::new(
                id,
                img,
                Label::Spoof,
                &cfg.sensor,
                Some(material.clone()),
            )?);
        }
        splits.push(samples);
    }
    let test = splits.pop().unwrap_or_default();
    let validation = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    DatasetSplit::new(train, validation, test, "<synthetic>")
}

struct RidgeField {
    /// ridge intensity in [0, 1], dark ridges on a light background
    pattern: Image,
    /// 1 inside the finger region, fading to 0 at the margin
    mask: Image,
    /// closeness to a ridge centre line in [0, 1]
    ridge: Image,
}

fn ridge_field(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> RidgeField {
    let (h, w) = (cfg.height, cfg.width);
    let (hf, wf) = (h as f64, w as f64);
    let period = rng.random_range(6.0..12.0);
    // ridge lines are level sets of the distance to a core point, warped by a
    // smooth displacement; the orientation therefore turns across the image
    let core = (
        hf * rng.random_range(-0.3..1.3),
        wf * rng.random_range(-0.3..1.3),
    );
    let warp_amp = rng.random_range(1.0..3.5);
    let warp_len = (rng.random_range(60.0..120.0), rng.random_range(60.0..120.0));
    let warp_phase = (
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let centre = (hf * rng.random_range(0.45..0.55), wf * rng.random_range(0.45..0.55));
    let axes = (hf * rng.random_range(0.34..0.42), wf * rng.random_range(0.30..0.38));
    let edge = 6.0;

    let mut pattern = Array2::zeros((h, w));
    let mut mask = Array2::zeros((h, w));
    let mut ridge = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64, c as f64);
            let dist = ((y - core.0).powi(2) + (x - core.1).powi(2)).sqrt();
            let warp = warp_amp
                * ((std::f64::consts::TAU * x / warp_len.0 + warp_phase.0).sin()
                    + (std::f64::consts::TAU * y / warp_len.1 + warp_phase.1).cos());
            let phase = std::f64::consts::TAU * (dist + warp) / period;
            let v = 0.5 + 0.5 * phase.cos();
            pattern[[r, c]] = v;
            ridge[[r, c]] = 1.0 - v;
            let ry = (y - centre.0) / axes.0;
            let rx = (x - centre.1) / axes.1;
            let rho = (ry * ry + rx * rx).sqrt();
            let scale = axes.0.min(axes.1);
            mask[[r, c]] = ((1.0 - rho) * scale / edge).clamp(0.0, 1.0);
        }
    }
    RidgeField { pattern, mask, ridge }
}

const BACKGROUND: f64 = 0.95;

fn compose(field: &RidgeField, texture: &Image) -> Image {
    let mut out = Array2::zeros(texture.dim());
    ndarray::Zip::from(&mut out)
        .and(texture)
        .and(&field.mask)
        .for_each(|o, &t, &m| *o = m * t + (1.0 - m) * BACKGROUND);
    out
}

fn add_noise(img: &mut Image, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        img.mapv_inplace(|v| (v + normal.sample(rng)).clamp(0.0, 1.0));
    } else {
        img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
}

fn synth_live(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Image {
    let field = ridge_field(cfg, rng);
    let mut texture = field.pattern.clone();
    // sweat pores: small light dots sitting on ridge centres
    let (h, w) = texture.dim();
    let n_pores = h * w / 55;
    for _ in 0..n_pores {
        let r = rng.random_range(1..h - 1);
        let c = rng.random_range(1..w - 1);
        if field.ridge[[r, c]] < 0.75 {
            continue;
        }
        let lift = rng.random_range(0.45..0.75);
        texture[[r, c]] = (texture[[r, c]] + lift).min(1.0);
        for (dr, dc) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
            let rr = (r as i64 + dr) as usize;
            let cc = (c as i64 + dc) as usize;
            texture[[rr, cc]] = (texture[[rr, cc]] + 0.5 * lift).min(1.0);
        }
    }
    let mut img = compose(&field, &texture);
    add_noise(&mut img, cfg.noise_sigma, rng);
    // same normalization as ingestion, so written datasets reload unchanged
    imaging::min_max_normalize(&mut img);
    img
}

fn synth_spoof(cfg: &SynthConfig, recipe: SpoofRecipe, rng: &mut ChaCha8Rng) -> Image {
    let field = ridge_field(cfg, rng);
    let texture = match recipe {
        SpoofRecipe::Smoothing => gaussian_blur(&field.pattern, rng.random_range(1.1..1.6)),
        SpoofRecipe::Flattening => {
            let k = rng.random_range(0.35..0.55);
            gaussian_blur(&field.pattern, 0.7).mapv(|v| 0.5 + k * (v - 0.5))
        }
        SpoofRecipe::Occlusion => {
            let mut t = gaussian_blur(&field.pattern, 0.8);
            let (h, w) = t.dim();
            let blobs = rng.random_range(4..8);
            for _ in 0..blobs {
                let cy = rng.random_range(0.2..0.8) * h as f64;
                let cx = rng.random_range(0.2..0.8) * w as f64;
                let ry = rng.random_range(8.0..20.0);
                let rx = rng.random_range(8.0..20.0);
                let level = rng.random_range(0.45..0.7);
                for ((r, c), v) in t.indexed_iter_mut() {
                    let d = ((r as f64 - cy) / ry).powi(2) + ((c as f64 - cx) / rx).powi(2);
                    if d < 1.0 {
                        let a = (1.0 - d).sqrt();
                        *v = a * level + (1.0 - a) * *v;
                    }
                }
            }
            t
        }
    };
    let mut img = compose(&field, &texture);
    add_noise(&mut img, cfg.noise_sigma, rng);
    // same normalization as ingestion, so written datasets reload unchanged
    imaging::min_max_normalize(&mut img);
    img
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let (h, w) = img.dim();
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            tmp[[r, c]] = kernel
                .iter()
                .enumerate()
                .map(|(k, wgt)| wgt * img[[r, clampi(c as i64 + k as i64 - radius, w)]])
                .sum();
        }
    }
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            out[[r, c]] = kernel
                .iter()
                .enumerate()
                .map(|(k, wgt)| wgt * tmp[[clampi(r as i64 + k as i64 - radius, h), c]])
                .sum();
        }
    }
    out
}

/// The geometric augmentations applied to one training image.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentOps {
    pub vflip: bool,
    pub hflip: bool,
    pub angle_deg: Option<f64>,
}

pub const MAX_ROTATION_DEG: f64 = 15.0;

impl AugmentOps {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let vflip = rng.random_bool(0.5);
        let hflip = rng.random_bool(0.5);
        let angle_deg = rng
            .random_bool(0.5)
            .then(|| rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG));
        Self { vflip, hflip, angle_deg }
    }
}

pub fn flip_vertical(img: &Image) -> Image {
    img.slice(s![..;-1, ..]).to_owned()
}

pub fn flip_horizontal(img: &Image) -> Image {
    img.slice(s![.., ..;-1]).to_owned()
}

/// Rotates about the image centre with bilinear sampling; samples falling
/// outside the image replicate the nearest edge pixel.
pub fn rotate(img: &Image, angle_deg: f64) -> Image {
    if angle_deg == 0.0 {
        return img.clone();
    }
    let (h, w) = img.dim();
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let sample = |y: f64, x: f64| -> f64 {
        let y = y.clamp(0.0, h as f64 - 1.0);
        let x = x.clamp(0.0, w as f64 - 1.0);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
        let bot = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    };
    Array2::from_shape_fn((h, w), |(r, c)| {
        // inverse mapping: output pixel -> source coordinate
        let dy = r as f64 - cy;
        let dx = c as f64 - cx;
        let sy = cos * dy - sin * dx + cy;
        let sx = sin * dy + cos * dx + cx;
        sample(sy, sx).clamp(0.0, 1.0)
    })
}

pub fn apply_augment(img: &Image, ops: &AugmentOps) -> Image {
    let mut out = img.clone();
    if ops.vflip {
        out = flip_vertical(&out);
    }
    if ops.hflip {
        out = flip_horizontal(&out);
    }
    if let Some(a) = ops.angle_deg {
        out = rotate(&out, a);
    }
    out
}

/// Applies a seeded random subset of {vertical flip, horizontal flip,
/// rotation within +-15 degrees}.
pub fn augment(img: &Image, rng_seed: u64) -> Image {
    crate::transforms::probe::record_augment();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let ops = AugmentOps::sample(&mut rng);
    apply_augment(img, &ops)
}

/// Shuffles sample order deterministically; used for batching.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}
