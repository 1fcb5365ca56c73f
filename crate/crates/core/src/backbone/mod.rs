//! Two-class classifiers exposing a five-level feature pyramid, the
//! in-painting decoder, the training losses and checkpoint I/O.
//!
//! Every classifier is bound by a [`TapSpec`]: taps FT1..FT3 are spatial maps
//! at increasing downsampling, FT4 is the deepest spatial map and FT5 is the
//! globally pooled feature vector. Rethinking, decoding and perceptual loss
//! only rely on that contract, never on block internals.

pub mod checkpoint;
pub mod decoder;
pub mod loss;
pub mod mobilenet;
pub mod params;
pub mod tiny;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, Image};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use decoder::{decode_inpaint, DecoderModel};
pub use loss::{classification_loss, classification_loss_tensor, mse_loss, mse_loss_tensor, perceptual_loss};
use params::{Init, ParamStore};

/// Inputs smaller than this on either side are rejected.
pub const MIN_INPUT_SIDE: usize = 33;

/// Convolution padding is `(k - 1) / 2` at every layer, so a stride-`s` layer
/// maps a side `n` to `ceil(n / s)`.
pub const PADDING_CONVENTION: &str = "same-ceil";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "reference-large")]
    ReferenceLarge,
    #[serde(rename = "tiny")]
    Tiny,
}

impl Arch {
    pub fn id(self) -> &'static str {
        match self {
            Arch::ReferenceLarge => "reference-large",
            Arch::Tiny => "tiny",
        }
    }

    pub fn tap_spec(self) -> TapSpec {
        match self {
            Arch::ReferenceLarge => mobilenet::tap_spec(),
            Arch::Tiny => tiny::tap_spec(),
        }
    }

    /// Side length patches are resized to before entering a local classifier.
    pub fn patch_input_side(self) -> usize {
        match self {
            Arch::ReferenceLarge => 224,
            Arch::Tiny => 96,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference-large" => Ok(Arch::ReferenceLarge),
            "tiny" => Ok(Arch::Tiny),
            other => Err(Error::Config(format!("unknown architecture {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tap {
    pub index: usize,
    /// `None` for the globally pooled tap.
    pub downsample: Option<usize>,
    pub channels: usize,
}

impl Tap {
    pub const fn spatial(index: usize, downsample: usize, channels: usize) -> Self {
        Self { index, downsample: Some(downsample), channels }
    }

    pub const fn pooled(index: usize, channels: usize) -> Self {
        Self { index, downsample: None, channels }
    }

    /// Expected spatial size of this tap for an `h x w` input.
    pub fn spatial_dims(&self, h: usize, w: usize) -> (usize, usize) {
        match self.downsample {
            Some(d) => (h.div_ceil(d), w.div_ceil(d)),
            None => (1, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSpec {
    pub taps: Vec<Tap>,
}

impl TapSpec {
    pub fn new(taps: [Tap; 5]) -> Self {
        Self { taps: taps.to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps.len() != 5 {
            return Err(Error::Config(format!("tap spec needs 5 taps, has {}", self.taps.len())));
        }
        if self.taps[..3].iter().any(|t| t.downsample.is_none()) {
            return Err(Error::Config("taps FT1..FT3 must be spatial".into()));
        }
        let order = |t: &Tap| t.downsample.unwrap_or(usize::MAX);
        if self.taps.windows(2).any(|w| order(&w[0]) >= order(&w[1])) {
            return Err(Error::Config("tap downsample factors must strictly increase".into()));
        }
        for (i, t) in self.taps.iter().enumerate() {
            if t.index != i + 1 || t.channels == 0 {
                return Err(Error::Config(format!("malformed tap {i}: {t:?}")));
            }
        }
        Ok(())
    }

    /// Tap `k`, 1-based.
    pub fn tap(&self, k: usize) -> &Tap {
        &self.taps[k - 1]
    }

    pub fn channels(&self) -> Vec<usize> {
        self.taps.iter().map(|t| t.channels).collect()
    }
}

/// Feature maps FT1..FT5 as `(N, C, H, W)` tensors (FT5 is `(N, C, 1, 1)`).
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub maps: Vec<Tensor>,
}

impl FeaturePyramid {
    /// Tap `k`, 1-based.
    pub fn map(&self, k: usize) -> &Tensor {
        &self.maps[k - 1]
    }

    /// Checks channel counts and spatial sizes against `spec` for an
    /// `h x w` input.
    pub fn conforms(&self, spec: &TapSpec, h: usize, w: usize) -> Result<()> {
        if self.maps.len() != spec.taps.len() {
            return Err(Error::Shape(format!("pyramid has {} maps", self.maps.len())));
        }
        for (t, m) in spec.taps.iter().zip(&self.maps) {
            let (_, c, mh, mw) = m.dims4()?;
            let (eh, ew) = t.spatial_dims(h, w);
            if c != t.channels || mh.abs_diff(eh) > 1 || mw.abs_diff(ew) > 1 {
                return Err(Error::Shape(format!(
                    "FT{} is {c}x{mh}x{mw}, expected {}x{eh}x{ew}",
                    t.index, t.channels
                )));
            }
        }
        Ok(())
    }
}

/// A network producing a per-sample score and a feature pyramid, with
/// optional additive offsets injected at FT1..FT3. Zero offsets leave the
/// forward pass unchanged and let callers differentiate with respect to the
/// taps themselves.
pub trait TapNetwork {
    fn tap_spec(&self) -> &TapSpec;

    fn dtype(&self) -> DType;

    /// `x` is `(N, 1, H, W)` or `(N, 3, H, W)`; returns `(N,)` scores.
    fn score_with_taps(
        &self,
        x: &Tensor,
        offsets: Option<&[Tensor; 3]>,
    ) -> Result<(Tensor, FeaturePyramid)>;
}

pub(crate) fn add_offset(t: Tensor, offsets: Option<&[Tensor; 3]>, k: usize) -> Result<Tensor> {
    match offsets {
        Some(o) => Ok((t + &o[k])?),
        None => Ok(t),
    }
}

#[derive(Debug, Clone)]
enum Net {
    Tiny(tiny::TinyNet),
    Large(Box<mobilenet::MobileNetV3>),
}

/// A two-class live/spoof classifier (used for both the global and the local
/// role).
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    arch: Arch,
    seed: u64,
    store: ParamStore,
    net: Net,
    tap_spec: TapSpec,
}

impl ClassifierModel {
    /// Builds a randomly initialised (fan-in scaled) model.
    pub fn new(arch: Arch, dtype: DType, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(dtype);
        let net = {
            let mut init = Init::new(&mut store, seed);
            match arch {
                Arch::Tiny => Net::Tiny(tiny::TinyNet::new(&mut init)?),
                Arch::ReferenceLarge => Net::Large(Box::new(mobilenet::MobileNetV3::new(&mut init)?)),
            }
        };
        let tap_spec = arch.tap_spec();
        tap_spec.validate()?;
        Ok(Self { arch, seed, store, net, tap_spec })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Independent copy with its own parameter storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = Self::new(self.arch, self.store.dtype(), self.seed)?;
        copy.store.assign_from(&self.store)?;
        Ok(copy)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let copy = Self::new(self.arch, dtype, self.seed)?;
        copy.store.assign_from(&self.store.to_dtype(dtype)?)?;
        Ok(copy)
    }

    fn prepare_input(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
            return Err(Error::Shape(format!(
                "input {h}x{w} is below the {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE} minimum"
            )));
        }
        let x = x.to_dtype(self.store.dtype())?;
        match c {
            1 => Ok(x.broadcast_as((n, 3, h, w))?.contiguous()?),
            3 => Ok(x),
            _ => Err(Error::Shape(format!("expected 1 or 3 input channels, got {c}"))),
        }
    }

    /// Raw `(N, 2)` logits and taps. `train` switches batch normalisation
    /// to batch statistics.
    pub fn logits_with_taps(
        &self,
        x: &Tensor,
        train: bool,
        offsets: Option<&[Tensor; 3]>,
    ) -> Result<(Tensor, FeaturePyramid)> {
        let x = self.prepare_input(x)?;
        let (logits, maps) = match &self.net {
            Net::Tiny(net) => net.forward(&x, offsets)?,
            Net::Large(net) => net.forward(&x, train, offsets)?,
        };
        Ok((logits, FeaturePyramid { maps }))
    }

    /// Class probabilities `(N, 2)`: column 0 live, column 1 spoof.
    pub fn probabilities(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (logits, _) = self.logits_with_taps(x, train, None)?;
        Ok(candle_nn::ops::softmax(&logits, 1)?)
    }

    /// Spoofness `(N,)`, the spoof component of the softmax output.
    pub fn spoofness(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.probabilities(x, train)?.narrow(1, 1, 1)?.flatten_all()?)
    }

    /// Scores a single image and returns its feature pyramid.
    pub fn forward_with_taps(&self, image: &Image) -> Result<(f64, FeaturePyramid)> {
        let x = imaging::image_tensor(image, self.store.dtype(), self.device())?;
        let (score, pyramid) = self.score_with_taps(&x, None)?;
        Ok((score.to_dtype(DType::F64)?.to_vec1::<f64>()?[0], pyramid))
    }

    pub fn score_image(&self, image: &Image) -> Result<f64> {
        let x = imaging::image_tensor(image, self.store.dtype(), self.device())?;
        Ok(self.spoofness(&x, false)?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
    }

    /// Stacks patches into a batch resized to this model's patch input side.
    pub fn patch_batch(&self, patches: &[Image]) -> Result<Tensor> {
        let x = imaging::images_tensor(patches, self.store.dtype(), self.device())?;
        let side = self.arch.patch_input_side();
        imaging::resize_tensor(&x, side, side)
    }

    /// Local spoofness of one patch after resizing to the patch input side.
    pub fn score_patch(&self, patch: &Image) -> Result<f64> {
        let x = self.patch_batch(std::slice::from_ref(patch))?;
        Ok(self.spoofness(&x, false)?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
    }
}

impl TapNetwork for ClassifierModel {
    fn tap_spec(&self) -> &TapSpec {
        &self.tap_spec
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn score_with_taps(
        &self,
        x: &Tensor,
        offsets: Option<&[Tensor; 3]>,
    ) -> Result<(Tensor, FeaturePyramid)> {
        let (logits, pyramid) = self.logits_with_taps(x, false, offsets)?;
        let p = candle_nn::ops::softmax(&logits, 1)?;
        Ok((p.narrow(1, 1, 1)?.flatten_all()?, pyramid))
    }
}

/// Scores one image with `model`; free-function form of
/// [`ClassifierModel::forward_with_taps`].
pub fn forward_with_taps(model: &ClassifierModel, image: &Image) -> Result<(f64, FeaturePyramid)> {
    model.forward_with_taps(image)
}
