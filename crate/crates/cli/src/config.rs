use std::fs;
use std::path::{Path, PathBuf};

use fpad_core::backbone::Arch;
use fpad_core::dataset::SynthConfig;
use fpad_core::evaluation::{Protocol, DEFAULT_THRESHOLD};
use fpad_core::scoring::FusionWeights;
use fpad_core::training::{PatchConfig, PretextConfig, TrainConfig};
use fpad_core::transforms::CutoutConfig;
use fpad_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Resolved settings for one invocation. Loaded from JSON, then patched by
/// command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Every stage derives its own seed from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset manifest written by `synth` or prepared by hand.
    pub manifest: Option<PathBuf>,
    pub global_checkpoint: Option<PathBuf>,
    pub pretext_checkpoint: Option<PathBuf>,
    pub local_checkpoint: Option<PathBuf>,
    /// One entry per dataset for cross-sensor runs from checkpoints.
    pub runs: Vec<RunPaths>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub cutout: CutoutConfig,
    pub pretext: PretextConfig,
    pub patches: PatchConfig,
    pub weights: FusionWeights,
    pub protocol: Protocol,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPaths {
    pub manifest: PathBuf,
    pub global_checkpoint: PathBuf,
    pub local_checkpoint: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            manifest: None,
            global_checkpoint: None,
            pretext_checkpoint: None,
            local_checkpoint: None,
            runs: Vec::new(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            cutout: CutoutConfig::default(),
            pretext: PretextConfig::default(),
            patches: PatchConfig::default(),
            weights: FusionWeights::default(),
            protocol: Protocol::CrossMaterial,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Flag values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub arch: Option<Arch>,
    pub weights: Option<FusionWeights>,
    pub protocol: Option<Protocol>,
    pub manifest: Option<PathBuf>,
}

impl RunConfig {
    /// Relative paths in the file are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for p in [
            &mut self.manifest,
            &mut self.global_checkpoint,
            &mut self.pretext_checkpoint,
            &mut self.local_checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for r in &mut self.runs {
            fix(&mut r.manifest);
            fix(&mut r.global_checkpoint);
            fix(&mut r.local_checkpoint);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out_dir = p.clone();
        }
        if let Some(a) = o.arch {
            self.train.arch = a;
        }
        if let Some(w) = o.weights {
            self.weights = w;
        }
        if let Some(p) = o.protocol {
            self.protocol = p;
        }
        if let Some(m) = &o.manifest {
            self.manifest = Some(m.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.cutout.validate()?;
        self.weights.validate()?;
        if !self.threshold.is_finite() {
            return Err(Error::Config("threshold must be finite".into()));
        }
        if self.patches.per_image == 0 || self.patches.stride == 0 {
            return Err(Error::Config("patches.per_image and patches.stride must be positive".into()));
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        let p = self
            .manifest
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset manifest given (--data or \"manifest\")".into()))?;
        require_file(p, "dataset manifest")?;
        Ok(p)
    }

    pub fn global_dir(&self) -> PathBuf {
        self.global_checkpoint.clone().unwrap_or_else(|| self.out_dir.join("global"))
    }

    pub fn pretext_dir(&self) -> PathBuf {
        self.pretext_checkpoint.clone().unwrap_or_else(|| self.out_dir.join("pretext"))
    }

    pub fn local_dir(&self) -> PathBuf {
        self.local_checkpoint.clone().unwrap_or_else(|| self.out_dir.join("local"))
    }

    /// Per-stage copy of the training settings with a derived seed.
    pub fn train_for(&self, stage: u64) -> TrainConfig {
        TrainConfig { seed: fpad_core::dataset::derive_seed(self.seed, &[stage]), ..self.train.clone() }
    }
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Dependency { path: path.to_path_buf(), what: format!("{what} not found") })
    }
}

/// A checkpoint directory must hold both of its files.
pub fn require_checkpoint(dir: &Path, what: &str) -> Result<()> {
    use fpad_core::backbone::checkpoint::{MANIFEST_FILE, WEIGHTS_FILE};
    for f in [MANIFEST_FILE, WEIGHTS_FILE] {
        if !dir.join(f).is_file() {
            return Err(Error::Dependency {
                path: dir.to_path_buf(),
                what: format!("{what} checkpoint not found"),
            });
        }
    }
    Ok(())
}
