//! Reverse scoring, binary-CAM fusion and CAM-guided patch localization.
//!
//! For a global score `g` the fusion differentiates `g` (liveness polarity,
//! L-CAM) and `1 - g` (spoofness polarity, S-CAM) with respect to taps
//! FT1..FT3, pools each gradient to per-channel weights, forms the weighted
//! channel mean of the tap, resizes it to the image and averages the three
//! scales. No rectifier is applied unless asked for, so S-CAM is exactly the
//! negation of L-CAM.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::TapNetwork;
use crate::dataset::{patch_variance, Patch};
use crate::error::{Error, Result};
use crate::imaging::{self, Image};

/// Taps that feed the CAM (FT1..FT3).
pub const CAM_TAPS: usize = 3;

pub fn reverse_score(gy: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gy) {
        return Err(Error::Domain(format!("score {gy} is outside [0, 1]")));
    }
    Ok(1.0 - gy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CamKind {
    #[serde(rename = "L-CAM")]
    LCam,
    #[serde(rename = "S-CAM")]
    SCam,
}

impl CamKind {
    pub fn file_stem(self) -> &'static str {
        match self {
            CamKind::LCam => "lcam",
            CamKind::SCam => "scam",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub values: Array2<f64>,
    pub kind: CamKind,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Predicted,
    Reversed,
}

/// `rz[k]` holds the `C_{k+1}` pooled gradients of tap `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeights {
    pub rz: Vec<Vec<f64>>,
    pub polarity: Polarity,
}

#[derive(Debug, Clone)]
pub struct CamResult {
    pub lcam: ActivationMap,
    pub scam: ActivationMap,
    pub gy_p: f64,
    pub live_weights: ChannelWeights,
    pub spoof_weights: ChannelWeights,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CamOptions {
    /// Clamp fused maps at zero (Grad-CAM style). Off by default.
    pub rectify: bool,
}

fn weighted_map(ft: &Tensor, grad: &Tensor, h: usize, w: usize) -> Result<(Tensor, Vec<f64>)> {
    let (_, c, _, _) = ft.dims4()?;
    let rz = grad.mean_keepdim(3)?.mean_keepdim(2)?;
    let map = ft.broadcast_mul(&rz)?.sum_keepdim(1)?.affine(1.0 / c as f64, 0.0)?;
    let map = imaging::resize_tensor(&map, h, w)?;
    let rz = rz.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok((map, rz))
}

fn fuse(
    pyramid_maps: &[Tensor],
    grads: &[Tensor],
    h: usize,
    w: usize,
    opts: CamOptions,
) -> Result<(Image, Vec<Vec<f64>>)> {
    let mut acc: Option<Tensor> = None;
    let mut rz = Vec::with_capacity(CAM_TAPS);
    for (ft, g) in pyramid_maps.iter().zip(grads) {
        let (m, r) = weighted_map(ft, g, h, w)?;
        rz.push(r);
        acc = Some(match acc {
            Some(a) => (a + m)?,
            None => m,
        });
    }
    let mut fused = acc.expect("three taps").affine(1.0 / CAM_TAPS as f64, 0.0)?;
    if opts.rectify {
        fused = fused.relu()?;
    }
    Ok((imaging::tensor_to_image(&fused)?, rz))
}

/// Runs the binary-CAM fusion of `model` on one image. The model is only read.
pub fn binary_cam_fusion<N: TapNetwork + ?Sized>(
    model: &N,
    image: &Image,
    source_id: &str,
    opts: CamOptions,
) -> Result<CamResult> {
    let (h, w) = image.dim();
    let x = imaging::image_tensor(image, model.dtype(), &Device::Cpu)?;
    let (_, plain) = model.score_with_taps(&x, None)?;
    let probes = (0..CAM_TAPS)
        .map(|k| Ok(Var::zeros(plain.map(k + 1).shape(), model.dtype(), &Device::Cpu)?))
        .collect::<Result<Vec<_>>>()?;
    let offsets: [Tensor; 3] = std::array::from_fn(|k| probes[k].as_tensor().clone());
    let (score, pyramid) = model.score_with_taps(&x, Some(&offsets))?;
    let gy_p = score.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0];
    let gy_r = score.affine(-1.0, 1.0)?;

    let grads_of = |target: &Tensor| -> Result<Vec<Tensor>> {
        let store = target.sum_all()?.backward()?;
        probes
            .iter()
            .enumerate()
            .map(|(k, p)| {
                store.get(p.as_tensor()).cloned().ok_or_else(|| {
                    Error::Internal(format!("tap FT{} is not connected to the score", k + 1))
                })
            })
            .collect()
    };
    let live_grads = grads_of(&score)?;
    let spoof_grads = grads_of(&gy_r)?;

    let taps: Vec<Tensor> = (1..=CAM_TAPS).map(|k| pyramid.map(k).detach()).collect();
    let (lvals, lrz) = fuse(&taps, &live_grads, h, w, opts)?;
    let (svals, srz) = fuse(&taps, &spoof_grads, h, w, opts)?;
    Ok(CamResult {
        lcam: ActivationMap { values: lvals, kind: CamKind::LCam, source_id: source_id.to_string() },
        scam: ActivationMap { values: svals, kind: CamKind::SCam, source_id: source_id.to_string() },
        gy_p,
        live_weights: ChannelWeights { rz: lrz, polarity: Polarity::Predicted },
        spoof_weights: ChannelWeights { rz: srz, polarity: Polarity::Reversed },
    })
}

/// Summed-area table with a zero first row and column.
fn summed_area(values: &Array2<f64>, offset: f64) -> Array2<f64> {
    let (h, w) = values.dim();
    let mut sat = Array2::zeros((h + 1, w + 1));
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += values[[r, c]] - offset;
            sat[[r + 1, c + 1]] = sat[[r, c + 1]] + row;
        }
    }
    sat
}

fn best_window(values: &Array2<f64>, size: usize, maximize: bool) -> Result<(usize, usize)> {
    let (h, w) = values.dim();
    if size == 0 || size > h || size > w {
        return Err(Error::Shape(format!("{size}x{size} window does not fit a {h}x{w} map")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("activation map has non-finite values".into()));
    }
    // Shifting by the extreme value keeps equal windows bitwise equal.
    let offset = if maximize {
        values.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    };
    let sat = summed_area(values, offset);
    let mut best = (0, 0);
    let mut best_sum = f64::NAN;
    for r in 0..=(h - size) {
        for c in 0..=(w - size) {
            let s = sat[[r + size, c + size]] - sat[[r, c + size]] - sat[[r + size, c]] + sat[[r, c]];
            let better = best_sum.is_nan() || if maximize { s > best_sum } else { s < best_sum };
            if better {
                best_sum = s;
                best = (r, c);
            }
        }
    }
    Ok(best)
}

/// Origin of the `size`-square window with the largest sum; ties go to the
/// lexicographically smallest origin.
pub fn max_window_origin(values: &Array2<f64>, size: usize) -> Result<(usize, usize)> {
    best_window(values, size, true)
}

/// Origin of the window with the smallest sum, same tie rule.
pub fn min_window_origin(values: &Array2<f64>, size: usize) -> Result<(usize, usize)> {
    best_window(values, size, false)
}

/// Crops the patch whose window sum over `cam` is maximal.
pub fn cam_patch_extract(image: &Image, cam: &ActivationMap, patch_size: usize) -> Result<Patch> {
    if cam.values.dim() != image.dim() {
        return Err(Error::Shape(format!(
            "CAM {:?} does not match image {:?}",
            cam.values.dim(),
            image.dim()
        )));
    }
    let origin = max_window_origin(&cam.values, patch_size)?;
    let pixels = imaging::crop(image, origin, patch_size)?;
    Ok(Patch {
        variance: patch_variance(pixels.view()),
        pixels,
        origin,
        source_id: cam.source_id.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CamSidecar {
    pub height: usize,
    pub width: usize,
    pub kind: CamKind,
    pub source_id: String,
}

/// Writes `<stem>.f32` (row-major f32 LE) and `<stem>.json`; returns the raw path.
pub fn export_cam(cam: &ActivationMap, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let (h, w) = cam.values.dim();
    let mut raw = Vec::with_capacity(h * w * 4);
    for v in cam.values.iter() {
        raw.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let raw_path = dir.join(format!("{stem}.f32"));
    fs::write(&raw_path, raw)?;
    let sidecar = CamSidecar { height: h, width: w, kind: cam.kind, source_id: cam.source_id.clone() };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(raw_path)
}

pub fn import_cam(raw_path: &Path) -> Result<ActivationMap> {
    let sidecar: CamSidecar = serde_json::from_str(&fs::read_to_string(raw_path.with_extension("json"))?)?;
    let raw = fs::read(raw_path)?;
    if raw.len() != sidecar.height * sidecar.width * 4 {
        return Err(Error::Shape(format!(
            "{} holds {} bytes, sidecar says {}x{}",
            raw_path.display(),
            raw.len(),
            sidecar.height,
            sidecar.width
        )));
    }
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Ok(ActivationMap {
        values: Array2::from_shape_vec((sidecar.height, sidecar.width), values)
            .map_err(|e| Error::Shape(e.to_string()))?,
        kind: sidecar.kind,
        source_id: sidecar.source_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Arch, ClassifierModel, FeaturePyramid, Tap, TapSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reverse_score_cases() {
        assert!((reverse_score(0.3).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(reverse_score(0.5).unwrap(), 0.5);
        for x in [0.0, 0.125, 0.9, 1.0] {
            assert_eq!(reverse_score(reverse_score(x).unwrap()).unwrap(), x);
        }
        assert!(matches!(reverse_score(1.5), Err(Error::Domain(_))));
        assert!(reverse_score(-0.01).is_err());
    }

    /// FT_k = w_c * x at full resolution for all three taps, score is
    /// sum_k sum_c v_c * mean(FT_k[c]).
    struct LinearNet {
        w: Vec<f64>,
        v: Vec<f64>,
        spec: TapSpec,
    }

    impl TapNetwork for LinearNet {
        fn tap_spec(&self) -> &TapSpec {
            &self.spec
        }

        fn dtype(&self) -> DType {
            DType::F64
        }

        fn score_with_taps(&self, x: &Tensor, offsets: Option<&[Tensor; 3]>) -> Result<(Tensor, FeaturePyramid)> {
            let c = self.w.len();
            let w = Tensor::new(self.w.as_slice(), &Device::Cpu)?.reshape((1, c, 1, 1))?;
            let v = Tensor::new(self.v.as_slice(), &Device::Cpu)?.reshape((1, c, 1, 1))?;
            let base = x.broadcast_mul(&w)?;
            let mut maps = Vec::new();
            let mut score = Tensor::zeros(1, DType::F64, &Device::Cpu)?;
            for k in 0..3 {
                let ft = match offsets {
                    Some(o) => (&base + &o[k])?,
                    None => base.clone(),
                };
                let s = ft.mean_keepdim(3)?.mean_keepdim(2)?.broadcast_mul(&v)?.sum_all()?;
                score = score.broadcast_add(&s)?;
                maps.push(ft);
            }
            maps.push(base.clone());
            maps.push(base.mean_keepdim(3)?.mean_keepdim(2)?);
            Ok((score, FeaturePyramid { maps }))
        }
    }

    #[test]
    fn linear_model_cam_has_closed_form() {
        let w = vec![0.5, -1.25, 2.0];
        let v = vec![1.5, 0.25, -0.75];
        let spec = TapSpec {
            taps: vec![Tap::spatial(1, 1, 3), Tap::spatial(2, 1, 3), Tap::spatial(3, 1, 3), Tap::spatial(4, 1, 3), Tap::pooled(5, 3)],
        };
        let net = LinearNet { w: w.clone(), v: v.clone(), spec };
        let img = Array2::from_shape_fn((7, 5), |(r, c)| ((r * 5 + c) as f64 * 0.37).sin().abs());
        let res = binary_cam_fusion(&net, &img, "lin", CamOptions::default()).unwrap();
        // dg/dFT_k[c,h,w] = v_c / (H W); map = (1/C) sum_c v_c/(HW) * w_c * x
        let hw = 35.0;
        let coeff: f64 = w.iter().zip(&v).map(|(a, b)| a * b / hw).sum::<f64>() / 3.0;
        for ((r, c), &val) in res.lcam.values.indexed_iter() {
            assert!((val - coeff * img[[r, c]]).abs() < 1e-6);
        }
        for rz in &res.live_weights.rz {
            for (got, vc) in rz.iter().zip(&v) {
                assert!((got - vc / hw).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scam_negates_lcam_and_params_are_untouched() {
        let model = ClassifierModel::new(Arch::Tiny, DType::F32, 5).unwrap();
        let before = model.deep_clone().unwrap();
        let img = Array2::from_shape_fn((100, 120), |(r, c)| ((r as f64 * 0.4).sin() * (c as f64 * 0.3).cos() + 1.0) / 2.0);
        let res = binary_cam_fusion(&model, &img, "s", CamOptions::default()).unwrap();
        assert_eq!(res.lcam.values.dim(), (100, 120));
        for (a, b) in res.lcam.values.iter().zip(res.scam.values.iter()) {
            assert!((a + b).abs() <= 1e-5);
        }
        assert!(model.params().equals(before.params()).unwrap());
        assert!((res.gy_p - model.score_image(&img).unwrap()).abs() < 1e-6);
        let lo = max_window_origin(&res.scam.values, 96).unwrap();
        assert_eq!(lo, min_window_origin(&res.lcam.values, 96).unwrap());
    }

    fn brute_force(values: &Array2<f64>, size: usize) -> (usize, usize) {
        let (h, w) = values.dim();
        let mut best = (0, 0);
        let mut best_sum = f64::NEG_INFINITY;
        for r in 0..=(h - size) {
            for c in 0..=(w - size) {
                let s: f64 = values.slice(ndarray::s![r..r + size, c..c + size]).sum();
                if s > best_sum {
                    best_sum = s;
                    best = (r, c);
                }
            }
        }
        best
    }

    #[test]
    fn window_search_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let (h, w) = (rng.random_range(20..40), rng.random_range(20..40));
            let size = rng.random_range(1..=h.min(w));
            let vals = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0));
            assert_eq!(max_window_origin(&vals, size).unwrap(), brute_force(&vals, size));
        }
    }

    #[test]
    fn block_and_uniform_maps() {
        let img = Array2::from_shape_fn((160, 150), |(r, c)| ((r + c) % 9) as f64 / 8.0);
        let mut vals = Array2::zeros((160, 150));
        vals.slice_mut(ndarray::s![30..126, 41..137]).fill(1.0);
        let cam = ActivationMap { values: vals, kind: CamKind::LCam, source_id: "b".into() };
        let p = cam_patch_extract(&img, &cam, 96).unwrap();
        assert_eq!(p.origin, (30, 41));
        assert_eq!(p.pixels, img.slice(ndarray::s![30..126, 41..137]).to_owned());
        let uniform = ActivationMap { values: Array2::from_elem((160, 150), 0.3), ..cam.clone() };
        assert_eq!(cam_patch_extract(&img, &uniform, 96).unwrap().origin, (0, 0));
        let small = Array2::zeros((90, 200));
        let cam_small = ActivationMap { values: small.clone(), ..cam };
        assert!(matches!(cam_patch_extract(&small, &cam_small, 96), Err(Error::Shape(_))));
    }

    #[test]
    fn cam_export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cam = ActivationMap {
            values: Array2::from_shape_fn((3, 4), |(r, c)| r as f64 - 0.5 * c as f64),
            kind: CamKind::SCam,
            source_id: "x1".into(),
        };
        let raw = export_cam(&cam, dir.path(), "scam").unwrap();
        assert_eq!(std::fs::read(&raw).unwrap().len(), 48);
        assert_eq!(import_cam(&raw).unwrap(), cam);
    }
}
