//! Small plain-convolution classifier with the same five tap roles as the
//! reference network. Cheap enough for desk-scale training and gradient
//! checks.

use candle_core::Tensor;

use super::params::{global_avg_pool, Conv, Init};
use super::{add_offset, Tap, TapSpec};
use crate::error::Result;

const C1: usize = 16;
const C2: usize = 24;
const C3: usize = 32;
const C4: usize = 48;
const C5: usize = 64;

pub fn tap_spec() -> TapSpec {
    TapSpec::new([
        Tap::spatial(1, 2, C1),
        Tap::spatial(2, 4, C2),
        Tap::spatial(3, 8, C3),
        Tap::spatial(4, 32, C4),
        Tap::pooled(5, C5),
    ])
}

#[derive(Debug, Clone)]
pub struct TinyNet {
    stage1: Conv,
    stage2: Conv,
    stage3: Conv,
    stage4a: Conv,
    stage4b: Conv,
    head: Conv,
    classifier: Conv,
}

impl TinyNet {
    pub fn new(init: &mut Init<'_>) -> Result<Self> {
        Ok(Self {
            stage1: init.conv("stage1", 3, C1, 3, 2, 1, true)?,
            stage2: init.conv("stage2", C1, C2, 3, 2, 1, true)?,
            stage3: init.conv("stage3", C2, C3, 3, 2, 1, true)?,
            stage4a: init.conv("stage4a", C3, C4, 3, 2, 1, true)?,
            stage4b: init.conv("stage4b", C4, C4, 3, 2, 1, true)?,
            head: init.conv("head", C4, C5, 1, 1, 1, true)?,
            classifier: init.conv("classifier", C5, 2, 1, 1, 1, true)?,
        })
    }

    /// Returns `(N, 2)` logits and the five taps.
    pub fn forward(&self, x: &Tensor, offsets: Option<&[Tensor; 3]>) -> Result<(Tensor, Vec<Tensor>)> {
        let ft1 = add_offset(self.stage1.forward(x)?.relu()?, offsets, 0)?;
        let ft2 = add_offset(self.stage2.forward(&ft1)?.relu()?, offsets, 1)?;
        let ft3 = add_offset(self.stage3.forward(&ft2)?.relu()?, offsets, 2)?;
        let ft4 = self.stage4b.forward(&self.stage4a.forward(&ft3)?.relu()?)?.relu()?;
        let ft5 = global_avg_pool(&self.head.forward(&ft4)?.relu()?)?;
        let logits = self.classifier.forward(&ft5)?.flatten_from(1)?;
        Ok((logits, vec![ft1, ft2, ft3, ft4, ft5]))
    }
}
