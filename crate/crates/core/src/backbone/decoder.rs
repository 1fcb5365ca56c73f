//! U-Net style decoder that reconstructs a patch from a classifier's feature
//! pyramid: FT5 conditions the deepest map, then skip connections at FT3,
//! FT2 and FT1 with nearest-neighbour upsampling in between. The last conv
//! runs at FT1 resolution and emits `r*r` sub-pixel channels that are
//! rearranged to the classifier input side.

use candle_core::{DType, Tensor};

use super::params::{Conv, Init, ParamStore};
use super::{FeaturePyramid, TapSpec};
use crate::dataset::PATCH_SIZE;
use crate::error::{Error, Result};
use crate::imaging;

#[derive(Debug)]
pub struct DecoderModel {
    store: ParamStore,
    tap_spec: TapSpec,
    input_side: usize,
    seed: u64,
    condition: Conv,
    up3: Conv,
    up2: Conv,
    up1: Conv,
    refine: Conv,
    output: Conv,
    factor: usize,
}

impl DecoderModel {
    /// `input_side` is the side of the classifier input the pyramid comes
    /// from; the decoder reconstructs at that side and resamples to the
    /// 96x96 patch resolution.
    pub fn new(tap_spec: &TapSpec, input_side: usize, dtype: DType, seed: u64) -> Result<Self> {
        tap_spec.validate()?;
        let c = tap_spec.channels();
        let mut store = ParamStore::new(dtype);
        let mut init = Init::new(&mut store, seed);
        let condition = init.conv("condition", c[4], c[3], 1, 1, 1, true)?;
        let up3 = init.conv("up3", c[3] + c[2], c[2], 3, 1, 1, true)?;
        let up2 = init.conv("up2", c[2] + c[1], c[1], 3, 1, 1, true)?;
        let up1 = init.conv("up1", c[1] + c[0], c[0], 3, 1, 1, true)?;
        let ft1 = tap_spec.taps[0].spatial_dims(input_side, input_side).0;
        if ft1 == 0 || input_side % ft1 != 0 {
            return Err(Error::Compatibility(format!(
                "input side {input_side} is not a multiple of FT1 side {ft1}"
            )));
        }
        let factor = input_side / ft1;
        let refine = init.conv("refine", c[0], c[0], 3, 1, 1, true)?;
        let output = init.conv("output", c[0], factor * factor, 3, 1, 1, true)?;
        Ok(Self {
            store,
            tap_spec: tap_spec.clone(),
            input_side,
            seed,
            condition,
            up3,
            up2,
            up1,
            refine,
            output,
            factor,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn tap_spec(&self) -> &TapSpec {
        &self.tap_spec
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check(&self, pyramid: &FeaturePyramid) -> Result<()> {
        if pyramid.maps.len() != 5 {
            return Err(Error::Compatibility(format!(
                "pyramid has {} maps, decoder expects 5",
                pyramid.maps.len()
            )));
        }
        for (t, m) in self.tap_spec.taps.iter().zip(&pyramid.maps) {
            let c = m.dim(1)?;
            if c != t.channels {
                return Err(Error::Compatibility(format!(
                    "FT{} has {c} channels, decoder was built for {}",
                    t.index, t.channels
                )));
            }
        }
        Ok(())
    }

    /// Reconstruction `(N, 1, 96, 96)` with values in `(0, 1)`.
    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<Tensor> {
        self.check(pyramid)?;
        let up_cat = |x: &Tensor, skip: &Tensor| -> Result<Tensor> {
            let (_, _, h, w) = skip.dims4()?;
            let x = x.upsample_nearest2d(h, w)?;
            Ok(Tensor::cat(&[&x, skip], 1)?)
        };
        let cond = self.condition.forward(pyramid.map(5))?;
        let x = pyramid.map(4).broadcast_add(&cond)?.relu()?;
        let x = self.up3.forward(&up_cat(&x, pyramid.map(3))?)?.relu()?;
        let x = self.up2.forward(&up_cat(&x, pyramid.map(2))?)?.relu()?;
        let x = self.up1.forward(&up_cat(&x, pyramid.map(1))?)?.relu()?;
        let x = self.refine.forward(&x)?.relu()?;
        let x = depth_to_space(&self.output.forward(&x)?, self.factor)?;
        let x = candle_nn::ops::sigmoid(&x)?;
        imaging::resize_tensor(&x, PATCH_SIZE, PATCH_SIZE)
    }
}

/// `(N, r*r, H, W)` to `(N, 1, H*r, W*r)`; channel `i*r + j` fills offset `(i, j)`.
fn depth_to_space(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if c != r * r {
        return Err(Error::Shape(format!("{c} channels for factor {r}")));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    Ok(x
        .reshape((n, r, r, h, w))?
        .permute((0, 3, 1, 4, 2))?
        .contiguous()?
        .reshape((n, 1, h * r, w * r))?)
}

/// Reconstructs the clean patch from the pyramid of a corrupted one.
pub fn decode_inpaint(decoder: &DecoderModel, pyramid: &FeaturePyramid) -> Result<Tensor> {
    decoder.forward(pyramid)
}
