//! Large MobileNetV3 variant: 14 bottlenecks, global average pooling in
//! place of the fixed 7x7 pool, and a two-unit head.

use candle_core::Tensor;

use super::params::{global_avg_pool, hard_sigmoid, hard_swish, BatchNorm, Conv, Init};
use super::{add_offset, Tap, TapSpec};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Nl {
    Relu,
    HSwish,
}

impl Nl {
    fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Nl::Relu => Ok(x.relu()?),
            Nl::HSwish => hard_swish(x),
        }
    }
}

struct BneckSetting {
    kernel: usize,
    expand: usize,
    out: usize,
    se: bool,
    nl: Nl,
    stride: usize,
}

const fn b(kernel: usize, expand: usize, out: usize, se: bool, nl: Nl, stride: usize) -> BneckSetting {
    BneckSetting { kernel, expand, out, se, nl, stride }
}

const SETTINGS: [BneckSetting; 14] = [
    b(3, 16, 16, false, Nl::Relu, 1),
    b(3, 64, 24, false, Nl::Relu, 2),
    b(3, 72, 24, false, Nl::Relu, 1),
    b(5, 72, 40, true, Nl::Relu, 2),
    b(5, 120, 40, true, Nl::Relu, 1),
    b(5, 120, 40, true, Nl::Relu, 1),
    b(3, 240, 80, false, Nl::HSwish, 2),
    b(3, 200, 80, false, Nl::HSwish, 1),
    b(3, 184, 80, false, Nl::HSwish, 1),
    b(3, 480, 112, true, Nl::HSwish, 1),
    b(3, 672, 112, true, Nl::HSwish, 1),
    b(5, 672, 160, true, Nl::HSwish, 2),
    b(5, 960, 160, true, Nl::HSwish, 1),
    b(5, 960, 160, true, Nl::HSwish, 1),
];

/// Bottleneck indices whose outputs are FT1..FT4.
const TAP_AFTER: [usize; 4] = [0, 2, 5, 12];

pub fn tap_spec() -> TapSpec {
    TapSpec::new([
        Tap::spatial(1, 2, 16),
        Tap::spatial(2, 4, 24),
        Tap::spatial(3, 8, 40),
        Tap::spatial(4, 32, 160),
        Tap::pooled(5, 960),
    ])
}

fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut n = (((v + d / 2.0) / d).floor() * d).max(d);
    if n < 0.9 * v {
        n += d;
    }
    n as usize
}

#[derive(Debug, Clone)]
struct SqueezeExcite {
    fc1: Conv,
    fc2: Conv,
}

impl SqueezeExcite {
    fn new(init: &mut Init<'_>, name: &str, channels: usize) -> Result<Self> {
        let squeeze = make_divisible(channels as f64 / 4.0, 8);
        Ok(Self {
            fc1: init.conv(&format!("{name}.fc1"), channels, squeeze, 1, 1, 1, true)?,
            fc2: init.conv(&format!("{name}.fc2"), squeeze, channels, 1, 1, 1, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = global_avg_pool(x)?;
        let s = self.fc1.forward(&s)?.relu()?;
        let s = hard_sigmoid(&self.fc2.forward(&s)?)?;
        Ok(x.broadcast_mul(&s)?)
    }
}

#[derive(Debug, Clone)]
struct Bneck {
    expand: Option<(Conv, BatchNorm)>,
    depthwise: (Conv, BatchNorm),
    se: Option<SqueezeExcite>,
    project: (Conv, BatchNorm),
    nl: Nl,
    residual: bool,
}

impl Bneck {
    fn new(init: &mut Init<'_>, name: &str, c_in: usize, s: &BneckSetting) -> Result<Self> {
        let expand = if s.expand != c_in {
            Some((
                init.conv(&format!("{name}.expand"), c_in, s.expand, 1, 1, 1, false)?,
                init.batch_norm(&format!("{name}.expand_bn"), s.expand)?,
            ))
        } else {
            None
        };
        let depthwise = (
            init.conv(&format!("{name}.depthwise"), s.expand, s.expand, s.kernel, s.stride, s.expand, false)?,
            init.batch_norm(&format!("{name}.depthwise_bn"), s.expand)?,
        );
        let se = if s.se {
            Some(SqueezeExcite::new(init, &format!("{name}.se"), s.expand)?)
        } else {
            None
        };
        let project = (
            init.conv(&format!("{name}.project"), s.expand, s.out, 1, 1, 1, false)?,
            init.batch_norm(&format!("{name}.project_bn"), s.out)?,
        );
        Ok(Self {
            expand,
            depthwise,
            se,
            project,
            nl: s.nl,
            residual: s.stride == 1 && c_in == s.out,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        if let Some((conv, bn)) = &self.expand {
            y = self.nl.apply(&bn.forward(&conv.forward(&y)?, train)?)?;
        }
        y = self.nl.apply(&self.depthwise.1.forward(&self.depthwise.0.forward(&y)?, train)?)?;
        if let Some(se) = &self.se {
            y = se.forward(&y)?;
        }
        y = self.project.1.forward(&self.project.0.forward(&y)?, train)?;
        Ok(if self.residual { (y + x)? } else { y })
    }
}

#[derive(Debug, Clone)]
pub struct MobileNetV3 {
    stem: (Conv, BatchNorm),
    blocks: Vec<Bneck>,
    last: (Conv, BatchNorm),
    pre_head: Conv,
    classifier: Conv,
}

impl MobileNetV3 {
    pub fn new(init: &mut Init<'_>) -> Result<Self> {
        let stem = (init.conv("stem", 3, 16, 3, 2, 1, false)?, init.batch_norm("stem_bn", 16)?);
        let mut c_in = 16;
        let mut blocks = Vec::with_capacity(SETTINGS.len());
        for (i, s) in SETTINGS.iter().enumerate() {
            blocks.push(Bneck::new(init, &format!("bneck{i:02}"), c_in, s)?);
            c_in = s.out;
        }
        let last = (init.conv("last", c_in, 960, 1, 1, 1, false)?, init.batch_norm("last_bn", 960)?);
        let pre_head = init.conv("pre_head", 960, 1280, 1, 1, 1, true)?;
        let classifier = init.conv("classifier", 1280, 2, 1, 1, 1, true)?;
        Ok(Self { stem, blocks, last, pre_head, classifier })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        train: bool,
        offsets: Option<&[Tensor; 3]>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let mut y = hard_swish(&self.stem.1.forward(&self.stem.0.forward(x)?, train)?)?;
        let mut taps = Vec::with_capacity(5);
        for (i, block) in self.blocks.iter().enumerate() {
            y = block.forward(&y, train)?;
            if let Some(k) = TAP_AFTER.iter().position(|&t| t == i) {
                if k < 3 {
                    y = add_offset(y, offsets, k)?;
                }
                taps.push(y.clone());
            }
        }
        let y = hard_swish(&self.last.1.forward(&self.last.0.forward(&y)?, train)?)?;
        let ft5 = global_avg_pool(&y)?;
        taps.push(ft5.clone());
        let y = hard_swish(&self.pre_head.forward(&ft5)?)?;
        let logits = self.classifier.forward(&y)?.flatten_from(1)?;
        Ok((logits, taps))
    }
}
