//! Grayscale image helpers shared by the dataset, rethinking and CLI layers.
//!
//! Images are `Array2<f64>` indexed `[row, col]` with values in `[0, 1]`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{ImageBuffer, Luma, Rgb};
use ndarray::{s, Array2, ArrayView2};

use crate::error::{Error, Result};

pub type Image = Array2<f64>;

/// Rescales values linearly so the minimum maps to 0 and the maximum to 1.
/// A constant image maps to all zeros.
pub fn min_max_normalize(img: &mut Image) {
    let (lo, hi) = img
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    if !span.is_finite() || span <= 0.0 {
        img.fill(0.0);
        return;
    }
    img.mapv_inplace(|v| (v - lo) / span);
}

/// Reads an 8- or 16-bit PNG as grayscale and min-max normalizes it.
pub fn load_gray_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = dynimg.into_luma16();
    let (w, h) = gray.dimensions();
    let mut img = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        f64::from(gray.get_pixel(c as u32, r as u32)[0])
    });
    min_max_normalize(&mut img);
    Ok(img)
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

pub fn to_gray8(img: ArrayView2<'_, f64>) -> ImageBuffer<Luma<u8>, Vec<u8>> {
    let (h, w) = img.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |c, r| {
        Luma([(clamp_unit(img[[r as usize, c as usize]]) * 255.0).round() as u8])
    })
}

pub fn to_gray16(img: ArrayView2<'_, f64>) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    let (h, w) = img.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |c, r| {
        Luma([(clamp_unit(img[[r as usize, c as usize]]) * 65535.0).round() as u16])
    })
}

pub fn save_gray8_png(path: &Path, img: ArrayView2<'_, f64>) -> Result<()> {
    to_gray8(img).save(path)?;
    Ok(())
}

pub fn save_gray16_png(path: &Path, img: ArrayView2<'_, f64>) -> Result<()> {
    to_gray16(img).save(path)?;
    Ok(())
}

pub fn crop(img: &Image, origin: (usize, usize), size: usize) -> Result<Image> {
    let (h, w) = img.dim();
    let (r, c) = origin;
    if r + size > h || c + size > w {
        return Err(Error::Shape(format!(
            "crop of {size}x{size} at ({r}, {c}) exceeds {h}x{w} image"
        )));
    }
    Ok(img.slice(s![r..r + size, c..c + size]).to_owned())
}

/// Interpolation matrix of shape `(out_len, in_len)` for bilinear resampling
/// with half-pixel centers (align-corners off). Source coordinates below zero
/// are clamped to zero, the upper neighbour is clamped to the last index.
pub fn bilinear_weights(in_len: usize, out_len: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out_len, in_len));
    if in_len == 0 || out_len == 0 {
        return m;
    }
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        let frac = src - lo as f64;
        m[[o, lo]] += 1.0 - frac;
        m[[o, hi]] += frac;
    }
    m
}

pub fn resize_bilinear(img: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Image {
    let (h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.to_owned();
    }
    let rh = bilinear_weights(h, out_h);
    let rw = bilinear_weights(w, out_w);
    rh.dot(&img).dot(&rw.t())
}

/// Differentiable bilinear resize of an `(N, C, H, W)` tensor, expressed as
/// two matrix products so gradients flow through it.
pub fn resize_tensor(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dtype = x.dtype();
    let rh = matrix_tensor(&bilinear_weights(h, out_h), dtype, dev)?;
    let rwt = matrix_tensor(&bilinear_weights(w, out_w).t().to_owned(), dtype, dev)?;
    let y = rh.broadcast_matmul(&x.contiguous()?)?;
    Ok(y.broadcast_matmul(&rwt)?)
}

fn matrix_tensor(m: &Array2<f64>, dtype: DType, dev: &Device) -> Result<Tensor> {
    let (r, c) = m.dim();
    let data: Vec<f64> = m.iter().copied().collect();
    Ok(Tensor::from_vec(data, (r, c), dev)?.to_dtype(dtype)?)
}

/// Packs one image as a `(1, 1, H, W)` tensor.
pub fn image_tensor(img: &Image, dtype: DType, dev: &Device) -> Result<Tensor> {
    images_tensor(std::slice::from_ref(img), dtype, dev)
}

/// Stacks equally sized images into an `(N, 1, H, W)` tensor.
pub fn images_tensor(imgs: &[Image], dtype: DType, dev: &Device) -> Result<Tensor> {
    let Some(first) = imgs.first() else {
        return Err(Error::Shape("empty image batch".into()));
    };
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(imgs.len() * h * w);
    for img in imgs {
        if img.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {h}x{w} with {:?} images",
                img.dim()
            )));
        }
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(data, (imgs.len(), 1, h, w), dev)?.to_dtype(dtype)?)
}

/// Extracts a `(H, W)` map from a tensor whose leading dims are all 1.
pub fn tensor_to_image(t: &Tensor) -> Result<Image> {
    let dims = t.dims();
    if dims.len() < 2 || dims[..dims.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::Shape(format!("expected a single map, got {dims:?}")));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let v: Vec<f64> = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    Array2::from_shape_vec((h, w), v).map_err(|e| Error::Shape(e.to_string()))
}

const VIRIDIS: [[f64; 3]; 6] = [
    [68.0, 1.0, 84.0],
    [65.0, 68.0, 135.0],
    [42.0, 120.0, 142.0],
    [34.0, 168.0, 132.0],
    [122.0, 209.0, 81.0],
    [253.0, 231.0, 37.0],
];

/// Piecewise-linear approximation of the viridis ramp for `t` in `[0, 1]`.
pub fn viridis(t: f64) -> [f64; 3] {
    let t = clamp_unit(t) * (VIRIDIS.len() - 1) as f64;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [
        a[0] + (b[0] - a[0]) * f,
        a[1] + (b[1] - a[1]) * f,
        a[2] + (b[2] - a[2]) * f,
    ]
}

/// Colors `map` (min-max scaled) with the viridis ramp and alpha-blends it at
/// 0.5 over the grayscale `base`.
pub fn heatmap_overlay(base: &Image, map: &Image) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>> {
    if base.dim() != map.dim() {
        return Err(Error::Shape(format!(
            "overlay map {:?} does not match image {:?}",
            map.dim(),
            base.dim()
        )));
    }
    let mut scaled = map.clone();
    min_max_normalize(&mut scaled);
    let (h, w) = base.dim();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |c, r| {
        let (r, c) = (r as usize, c as usize);
        let g = clamp_unit(base[[r, c]]) * 255.0;
        let col = viridis(scaled[[r, c]]);
        Rgb([
            (0.5 * g + 0.5 * col[0]).round() as u8,
            (0.5 * g + 0.5 * col[1]).round() as u8,
            (0.5 * g + 0.5 * col[2]).round() as u8,
        ])
    }))
}
