use candle_core::{DType, Device, Tensor, Var};
use fpad_core::backbone::loss::scalar;
use fpad_core::backbone::{
    decode_inpaint, mse_loss, mse_loss_tensor, perceptual_loss, Arch, ClassifierModel, DecoderModel,
    TapNetwork,
};
use fpad_core::imaging::{image_tensor, images_tensor, resize_tensor, Image};
use fpad_core::Error;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((h, w), |_| rng.random::<f64>())
}

fn ridge_image(h: usize, w: usize, phase: f64) -> Image {
    Array2::from_shape_fn((h, w), |(r, c)| {
        0.5 + 0.4 * ((r as f64 * 0.7 + c as f64 * 0.3 + phase).sin())
    })
}

/// Stride chain oracle: each stride-2 stage maps n to ceil(n / 2).
fn halve(n: usize, times: u32) -> usize {
    (0..times).fold(n, |m, _| m.div_ceil(2))
}

fn tap_dims(model: &ClassifierModel, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
    let (_, pyr) = model.forward_with_taps(&random_image(h, w, 1)).unwrap();
    pyr.maps.iter().map(|m| {
        let (_, c, mh, mw) = m.dims4().unwrap();
        (c, mh, mw)
    }).collect()
}

#[test]
fn reference_large_taps_at_224() {
    let m = ClassifierModel::new(Arch::ReferenceLarge, DType::F32, 0).unwrap();
    let d = tap_dims(&m, 224, 224);
    assert_eq!(d[0], (16, 112, 112));
    assert_eq!(d[1], (24, 56, 56));
    assert_eq!(d[2], (40, 28, 28));
    assert_eq!(d[3], (160, 7, 7));
    assert_eq!(d[4], (960, 1, 1));
}

#[test]
fn reference_large_accepts_non_square_input() {
    let m = ClassifierModel::new(Arch::ReferenceLarge, DType::F32, 0).unwrap();
    let d = tap_dims(&m, 320, 256);
    assert_eq!((d[2].1, d[2].2), (halve(320, 3), halve(256, 3)));
    assert_eq!((d[2].1, d[2].2), (40, 32));
    let (p, _) = m.forward_with_taps(&random_image(320, 256, 2)).unwrap();
    assert!((0.0..=1.0).contains(&p));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tiny_taps_conform_for_any_admissible_size(h in 33usize..200, w in 33usize..200) {
        let m = ClassifierModel::new(Arch::Tiny, DType::F32, 3).unwrap();
        let (p, pyr) = m.forward_with_taps(&random_image(h, w, (h * 1000 + w) as u64)).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        pyr.conforms(m.tap_spec(), h, w).unwrap();
        for (k, t) in m.tap_spec().taps.iter().enumerate().take(3) {
            let (_, _, mh, mw) = pyr.maps[k].dims4().unwrap();
            let (eh, ew) = t.spatial_dims(h, w);
            prop_assert!(mh.abs_diff(eh) <= 1 && mw.abs_diff(ew) <= 1);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(3))]

    #[test]
    fn reference_taps_conform_for_random_sizes(h in 33usize..180, w in 33usize..180) {
        let m = ClassifierModel::new(Arch::ReferenceLarge, DType::F32, 3).unwrap();
        let (_, pyr) = m.forward_with_taps(&random_image(h, w, 9)).unwrap();
        pyr.conforms(m.tap_spec(), h, w).unwrap();
    }
}

fn zero_offsets(model: &ClassifierModel, x: &Tensor) -> [Var; 3] {
    let (_, pyr) = model.score_with_taps(x, None).unwrap();
    std::array::from_fn(|k| Var::zeros(pyr.maps[k].dims(), DType::F64, &Device::Cpu).unwrap())
}

fn score_with(model: &ClassifierModel, x: &Tensor, offsets: &[Tensor; 3]) -> f64 {
    let (s, _) = model.score_with_taps(x, Some(offsets)).unwrap();
    s.to_vec1::<f64>().unwrap()[0]
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Backward gradients of spoofness with respect to FT1..FT3 against central
/// finite differences, on sampled coordinates.
#[test]
fn tap_gradients_match_finite_differences() {
    let model = ClassifierModel::new(Arch::Tiny, DType::F64, 11).unwrap();
    let x = image_tensor(&ridge_image(72, 64, 0.4), DType::F64, &Device::Cpu).unwrap();
    let vars = zero_offsets(&model, &x);
    let offs: [Tensor; 3] = std::array::from_fn(|k| vars[k].as_tensor().clone());
    let (s, _) = model.score_with_taps(&x, Some(&offs)).unwrap();
    let grads = s.sum_all().unwrap().backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut good, mut total) = (0, 0);
    let h = 1e-6;
    for k in 0..3 {
        let g = grads.get(&vars[k]).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let dims = vars[k].dims().to_vec();
        for _ in 0..20 {
            let i = rng.random_range(0..g.len());
            let bump = |d: f64| {
                let mut v = vec![0.0; g.len()];
                v[i] = d;
                let t = Tensor::from_vec(v, dims.as_slice(), &Device::Cpu).unwrap();
                let mut o = offs.clone();
                o[k] = t;
                score_with(&model, &x, &o)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            total += 1;
            if rel_err(fd, g[i]) <= 1e-3 {
                good += 1;
            }
        }
    }
    assert!(good * 100 >= total * 95, "{good}/{total} coordinates within 1e-3");
}

fn decoder_pair(seed: u64) -> (ClassifierModel, DecoderModel) {
    let lf = ClassifierModel::new(Arch::Tiny, DType::F64, seed).unwrap();
    let de = DecoderModel::new(lf.tap_spec(), Arch::Tiny.patch_input_side(), DType::F64, seed + 1).unwrap();
    (lf, de)
}

#[test]
fn decoder_output_is_a_bounded_patch() {
    let (lf, de) = decoder_pair(1);
    let x = images_tensor(&[random_image(96, 96, 1), random_image(96, 96, 2)], DType::F64, &Device::Cpu).unwrap();
    let (_, pyr) = lf.logits_with_taps(&x, true, None).unwrap();
    let r = decode_inpaint(&de, &pyr).unwrap();
    assert_eq!(r.dims(), &[2, 1, 96, 96]);
    let v = r.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn mismatched_pyramid_is_a_compatibility_error() {
    let de = DecoderModel::new(&Arch::Tiny.tap_spec(), 96, DType::F32, 0).unwrap();
    let large = ClassifierModel::new(Arch::ReferenceLarge, DType::F32, 0).unwrap();
    let (_, pyr) = large.forward_with_taps(&random_image(96, 96, 3)).unwrap();
    assert!(matches!(de.forward(&pyr), Err(Error::Compatibility(_))));
}

/// Perturbing decoder parameters changes the output, and the change matches
/// the backward gradient.
#[test]
fn decoder_gradients_match_finite_differences() {
    let (lf, de) = decoder_pair(4);
    let x = image_tensor(&ridge_image(96, 96, 1.1), DType::F64, &Device::Cpu).unwrap();
    let target = image_tensor(&random_image(96, 96, 8), DType::F64, &Device::Cpu).unwrap();
    let loss = || {
        let (_, pyr) = lf.logits_with_taps(&x, true, None).unwrap();
        mse_loss_tensor(&decode_inpaint(&de, &pyr).unwrap(), &target).unwrap()
    };
    let grads = loss().backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    let mut checked = 0;
    for (name, var) in de.params().named_params() {
        let g = grads.get(var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let orig = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for _ in 0..3 {
            let i = rng.random_range(0..orig.len());
            let eval = |d: f64| {
                let mut v = orig.clone();
                v[i] += d;
                var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
                scalar(&loss()).unwrap()
            };
            let (up, down) = (eval(h), eval(-h));
            var.set(&Tensor::from_vec(orig.clone(), var.dims(), &Device::Cpu).unwrap()).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(fd, g[i]) <= 1e-3, "{name}[{i}]: fd {fd} vs backward {}", g[i]);
            checked += 1;
        }
    }
    assert!(checked >= 18);
    // gradients also reach the classifier
    let lf_grad = lf.params().named_params().filter(|(_, v)| grads.get(v).is_some()).count();
    assert!(lf_grad > 0);
}

#[test]
fn perceptual_loss_identity_symmetry_and_oracle() {
    let lf = ClassifierModel::new(Arch::Tiny, DType::F64, 6).unwrap();
    let dev = Device::Cpu;
    let a = images_tensor(&[random_image(96, 96, 1)], DType::F64, &dev).unwrap();
    let b = images_tensor(&[ridge_image(96, 96, 0.2)], DType::F64, &dev).unwrap();
    assert_eq!(scalar(&perceptual_loss(&a, &a, &lf, false).unwrap()).unwrap(), 0.0);
    let ab = scalar(&perceptual_loss(&a, &b, &lf, false).unwrap()).unwrap();
    let ba = scalar(&perceptual_loss(&b, &a, &lf, false).unwrap()).unwrap();
    assert!(ab > 0.0);
    assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));

    // oracle: taps from forward_with_taps, mse by explicit accumulation
    let side = Arch::Tiny.patch_input_side();
    let taps = |t: &Tensor| {
        let t = resize_tensor(t, side, side).unwrap();
        let img = t.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let img = Array2::from_shape_fn((side, side), |(r, c)| img[r][c]);
        lf.forward_with_taps(&img).unwrap().1
    };
    let (pa, pb) = (taps(&a), taps(&b));
    let mut oracle = 0.0;
    for k in 1..=3 {
        let va = pa.map(k).flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let vb = pb.map(k).flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let sq: f64 = va.iter().zip(&vb).map(|(x, y)| (x - y) * (x - y)).sum();
        oracle += sq / va.len() as f64;
    }
    oracle /= 3.0;
    assert!((ab - oracle).abs() <= 1e-6, "{ab} vs {oracle}");
}

#[test]
fn mse_matches_pairwise_accumulation() {
    fn pairwise(v: &[f64]) -> f64 {
        if v.len() <= 2 {
            return v.iter().sum();
        }
        let (l, r) = v.split_at(v.len() / 2);
        pairwise(l) + pairwise(r)
    }
    for seed in 0..5 {
        let a = random_image(37, 53, seed);
        let b = random_image(37, 53, seed + 100);
        let sq: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).collect();
        let oracle = pairwise(&sq) / sq.len() as f64;
        assert!((mse_loss(a.view(), b.view()).unwrap() - oracle).abs() <= 1e-12);
        assert_eq!(mse_loss(a.view(), a.view()).unwrap(), 0.0);
    }
}

/// One small gradient step on perceptual + pixel loss lowers the loss on the
/// same batch.
#[test]
fn one_step_on_inpainting_loss_decreases_it() {
    let (lf, de) = decoder_pair(9);
    let dev = Device::Cpu;
    let clean: Vec<Image> = (0..3).map(|i| ridge_image(96, 96, i as f64)).collect();
    let noisy: Vec<Image> = clean.iter().enumerate().map(|(i, c)| c + &(random_image(96, 96, i as u64) * 0.2)).collect();
    let xc = images_tensor(&clean, DType::F64, &dev).unwrap();
    let xn = images_tensor(&noisy, DType::F64, &dev).unwrap();
    let loss = || {
        let (_, pyr) = lf.logits_with_taps(&xn, true, None).unwrap();
        let r = decode_inpaint(&de, &pyr).unwrap();
        (perceptual_loss(&r, &xc, &lf, true).unwrap() + mse_loss_tensor(&r, &xc).unwrap()).unwrap()
    };
    let l0 = loss();
    let before = scalar(&l0).unwrap();
    let grads = l0.backward().unwrap();
    for (_, v) in lf.params().named_params().chain(de.params().named_params()) {
        if let Some(g) = grads.get(v) {
            v.set(&(v.as_tensor() - (g * 1e-3).unwrap()).unwrap()).unwrap();
        }
    }
    let after = scalar(&loss()).unwrap();
    assert!(after < before, "{after} !< {before}");
}
