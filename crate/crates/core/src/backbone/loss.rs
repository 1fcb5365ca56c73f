use candle_core::{DType, Tensor};
use ndarray::ArrayView2;

use super::ClassifierModel;
use crate::dataset::Label;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

/// Binary cross-entropy of a spoofness probability against a label.
pub fn classification_loss(spoofness: f64, label: Label) -> f64 {
    let p = spoofness.clamp(EPS, 1.0 - EPS);
    let y = f64::from(label.as_index());
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean binary cross-entropy over a batch; `labels` holds 0/1 values.
pub fn classification_loss_tensor(spoofness: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if spoofness.dims() != labels.dims() {
        return Err(Error::Shape(format!(
            "scores {:?} vs labels {:?}",
            spoofness.dims(),
            labels.dims()
        )));
    }
    let p = spoofness.clamp(EPS, 1.0 - EPS)?;
    let y = labels.to_dtype(p.dtype())?;
    let pos = (&y * p.log()?)?;
    let neg = (y.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

pub fn mse_loss(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("mse of {:?} and {:?}", a.dim(), b.dim())));
    }
    let n = a.len() as f64;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

pub fn mse_loss_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("mse of {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Mean over taps FT1..FT3 of the feature-space MSE between `recon` and
/// `target`, both `(N, 1, 96, 96)`. Target features carry no gradient.
pub fn perceptual_loss(
    recon: &Tensor,
    target: &Tensor,
    extractor: &ClassifierModel,
    train: bool,
) -> Result<Tensor> {
    if recon.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "perceptual loss of {:?} and {:?}",
            recon.dims(),
            target.dims()
        )));
    }
    let side = extractor.arch().patch_input_side();
    let resize = |x: &Tensor| crate::imaging::resize_tensor(x, side, side);
    let (_, fr) = extractor.logits_with_taps(&resize(recon)?, train, None)?;
    let (_, ft) = extractor.logits_with_taps(&resize(&target.detach())?, train, None)?;
    let mut total: Option<Tensor> = None;
    for k in 1..=3 {
        let term = mse_loss_tensor(fr.map(k), &ft.map(k).detach())?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok((total.expect("three taps") / 3.0)?)
}

/// Scalar value of a 0-d tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        assert!(classification_loss(1.0 - EPS, Label::Spoof) < 1e-6);
        assert!(classification_loss(0.0, Label::Live) < 1e-6);
    }

    #[test]
    fn even_odds_cost_ln2() {
        assert!((classification_loss(0.5, Label::Spoof) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn tensor_loss_matches_scalar_oracle() {
        let ps: [f64; 6] = [0.1, 0.8, 0.45, 0.999, 1e-9, 0.6];
        let ys = [Label::Live, Label::Spoof, Label::Spoof, Label::Live, Label::Spoof, Label::Live];
        // oracle: direct per-sample formula, averaged
        let oracle: f64 = ps
            .iter()
            .zip(ys)
            .map(|(&p, y)| {
                let p: f64 = p.clamp(1e-7, 1.0 - 1e-7);
                let y = f64::from(y as u8);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / ps.len() as f64;
        let p = Tensor::new(&ps, &Device::Cpu).unwrap();
        let y = Tensor::new(&ys.map(|l| f64::from(l.as_index())), &Device::Cpu).unwrap();
        let got = scalar(&classification_loss_tensor(&p, &y).unwrap()).unwrap();
        assert!((got - oracle).abs() < 1e-9);
        let mean_scalar: f64 =
            ps.iter().zip(ys).map(|(&p, y)| classification_loss(p, y)).sum::<f64>() / ps.len() as f64;
        assert!((mean_scalar - oracle).abs() < 1e-12);
    }

    #[test]
    fn loss_is_convex_in_probability() {
        for y in [Label::Live, Label::Spoof] {
            for i in 1..40 {
                for j in (i + 1)..40 {
                    let (a, b) = (i as f64 / 40.0, j as f64 / 40.0);
                    let mid = classification_loss((a + b) / 2.0, y);
                    let avg = (classification_loss(a, y) + classification_loss(b, y)) / 2.0;
                    assert!(mid <= avg + 1e-12);
                }
            }
        }
    }

    #[test]
    fn mse_hand_cases_and_errors() {
        let z = ndarray::Array2::<f64>::zeros((4, 5));
        let o = ndarray::Array2::<f64>::ones((4, 5));
        assert_eq!(mse_loss(z.view(), z.view()).unwrap(), 0.0);
        assert_eq!(mse_loss(z.view(), o.view()).unwrap(), 1.0);
        let bad = ndarray::Array2::<f64>::zeros((5, 4));
        assert!(mse_loss(z.view(), bad.view()).is_err());
    }
}
