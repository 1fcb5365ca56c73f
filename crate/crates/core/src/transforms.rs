//! Training-time input corruptions: Cut-out masking for the global
//! classifier and pixel-window shuffling for the in-painting pretext task.

use ndarray::s;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CutoutConfig {
    pub n_windows: usize,
    pub window_size: usize,
}

impl Default for CutoutConfig {
    fn default() -> Self {
        Self { n_windows: 10, window_size: 96 }
    }
}

impl CutoutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_windows == 0 || self.window_size == 0 {
            return Err(Error::Config("cutout needs n_windows >= 1 and window_size >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShuffleConfig {
    pub n_windows: usize,
    pub window_size: usize,
}

impl Default for ShuffleConfig {
    fn default() -> Self {
        Self { n_windows: 5, window_size: 32 }
    }
}

impl ShuffleConfig {
    pub fn validate(&self, patch_side: usize) -> Result<()> {
        if self.n_windows == 0 || self.window_size == 0 || self.window_size > patch_side {
            return Err(Error::Config(format!(
                "shuffle windows must be nonempty and at most {patch_side} pixels wide"
            )));
        }
        Ok(())
    }
}

/// Half-open pixel rectangle `[top, bottom) x [left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Window {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.top..self.bottom).contains(&r) && (self.left..self.right).contains(&c)
    }

    pub fn area(&self) -> usize {
        (self.bottom - self.top) * (self.right - self.left)
    }
}

/// Square cut-out windows with uniformly random centres, clipped to the image.
pub fn cutout_windows(h: usize, w: usize, cfg: &CutoutConfig, rng_seed: u64) -> Vec<Window> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let half = cfg.window_size / 2;
    (0..cfg.n_windows)
        .map(|_| {
            let cy = rng.random_range(0..h) as i64;
            let cx = rng.random_range(0..w) as i64;
            let top = (cy - half as i64).max(0) as usize;
            let left = (cx - half as i64).max(0) as usize;
            let bottom = ((cy - half as i64 + cfg.window_size as i64).max(0) as usize).min(h);
            let right = ((cx - half as i64 + cfg.window_size as i64).max(0) as usize).min(w);
            Window { top, left, bottom, right }
        })
        .collect()
}

/// Zeroes `cfg.n_windows` random square regions of `image`.
pub fn cutout(image: &Image, cfg: &CutoutConfig, rng_seed: u64) -> Image {
    probe::record_cutout_image();
    let (h, w) = image.dim();
    let mut out = image.clone();
    if h == 0 || w == 0 {
        return out;
    }
    for win in cutout_windows(h, w, cfg, rng_seed) {
        out.slice_mut(s![win.top..win.bottom, win.left..win.right]).fill(0.0);
    }
    out
}

/// Batch-level cut-out: one invocation per training batch, each image with
/// its own derived seed.
pub fn cutout_batch(images: &[Image], cfg: &CutoutConfig, rng_seed: u64) -> Vec<Image> {
    probe::record_cutout_batch();
    images
        .iter()
        .enumerate()
        .map(|(i, img)| cutout(img, cfg, crate::dataset::derive_seed(rng_seed, &[i as u64])))
        .collect()
}

/// Interior shuffle windows for a `side x side` patch.
pub fn shuffle_windows(side: usize, cfg: &ShuffleConfig, rng: &mut ChaCha8Rng) -> Vec<Window> {
    (0..cfg.n_windows)
        .map(|_| {
            let top = rng.random_range(0..=side - cfg.window_size);
            let left = rng.random_range(0..=side - cfg.window_size);
            Window {
                top,
                left,
                bottom: top + cfg.window_size,
                right: left + cfg.window_size,
            }
        })
        .collect()
}

/// Permutes the pixels inside `cfg.n_windows` random interior windows.
/// Windows may overlap; later windows permute already-shuffled values.
pub fn pixel_shuffle(patch: &Image, cfg: &ShuffleConfig, rng_seed: u64) -> Result<Image> {
    pixel_shuffle_with_windows(patch, cfg, rng_seed).map(|(img, _)| img)
}

pub fn pixel_shuffle_with_windows(
    patch: &Image,
    cfg: &ShuffleConfig,
    rng_seed: u64,
) -> Result<(Image, Vec<Window>)> {
    let (h, w) = patch.dim();
    if h != w {
        return Err(Error::Shape(format!("pixel shuffle expects a square patch, got {h}x{w}")));
    }
    cfg.validate(h)?;
    probe::record_shuffle();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let windows = shuffle_windows(h, cfg, &mut rng);
    let mut out = patch.clone();
    for win in &windows {
        let mut block = out.slice_mut(s![win.top..win.bottom, win.left..win.right]);
        let mut values: Vec<f64> = block.iter().copied().collect();
        values.shuffle(&mut rng);
        for (dst, v) in block.iter_mut().zip(values) {
            *dst = v;
        }
    }
    Ok((out, windows))
}

/// Per-thread invocation counters for the training-time transforms, used to
/// check which pipeline stages run which corruptions.
pub mod probe {
    use std::cell::Cell;

    #[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
    pub struct Counts {
        pub cutout_batches: u64,
        pub cutout_images: u64,
        pub shuffles: u64,
        pub augments: u64,
    }

    thread_local! {
        static COUNTS: Cell<Counts> = const { Cell::new(Counts {
            cutout_batches: 0,
            cutout_images: 0,
            shuffles: 0,
            augments: 0,
        }) };
    }

    fn bump(f: impl FnOnce(&mut Counts)) {
        COUNTS.with(|c| {
            let mut v = c.get();
            f(&mut v);
            c.set(v);
        });
    }

    pub(crate) fn record_cutout_batch() {
        bump(|c| c.cutout_batches += 1);
    }

    pub(crate) fn record_cutout_image() {
        bump(|c| c.cutout_images += 1);
    }

    pub(crate) fn record_shuffle() {
        bump(|c| c.shuffles += 1);
    }

    pub(crate) fn record_augment() {
        bump(|c| c.augments += 1);
    }

    pub fn counts() -> Counts {
        COUNTS.with(Cell::get)
    }

    pub fn reset() {
        COUNTS.with(|c| c.set(Counts::default()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random_range(0.01..1.0))
    }

    #[test]
    fn disjoint_interior_windows_zero_exact_area() {
        let (h, w) = (1200, 1200);
        let cfg = CutoutConfig::default();
        let interior = |win: &Window| win.area() == 96 * 96;
        let disjoint = |a: &Window, b: &Window| {
            a.bottom <= b.top || b.bottom <= a.top || a.right <= b.left || b.right <= a.left
        };
        let seed = (0..10_000u64)
            .find(|&s| {
                let wins = cutout_windows(h, w, &cfg, s);
                wins.iter().all(interior)
                    && wins.iter().enumerate().all(|(i, a)| wins[i + 1..].iter().all(|b| disjoint(a, b)))
            })
            .expect("some seed yields disjoint interior windows");
        let img = rand_image(h, w, 1);
        let out = cutout(&img, &cfg, seed);
        // oracle: rasterise the window union and count covered pixels
        let wins = cutout_windows(h, w, &cfg, seed);
        let mut mask = Array2::from_elem((h, w), false);
        for win in &wins {
            for r in win.top..win.bottom {
                for c in win.left..win.right {
                    mask[[r, c]] = true;
                }
            }
        }
        let union = mask.iter().filter(|&&m| m).count();
        assert_eq!(union, 92_160);
        assert_eq!(out.iter().filter(|&&v| v == 0.0).count(), union);
    }

    #[test]
    fn shuffle_rejects_oversized_windows() {
        let img = rand_image(96, 96, 0);
        let cfg = ShuffleConfig { n_windows: 1, window_size: 97 };
        assert!(pixel_shuffle(&img, &cfg, 0).is_err());
    }

    #[test]
    fn transforms_are_seed_deterministic() {
        let img = rand_image(96, 96, 2);
        let cc = CutoutConfig { n_windows: 3, window_size: 20 };
        assert_eq!(cutout(&img, &cc, 4), cutout(&img, &cc, 4));
        let sc = ShuffleConfig::default();
        assert_eq!(pixel_shuffle(&img, &sc, 4).unwrap(), pixel_shuffle(&img, &sc, 4).unwrap());
        assert_ne!(pixel_shuffle(&img, &sc, 4).unwrap(), pixel_shuffle(&img, &sc, 5).unwrap());
    }

    #[test]
    fn probe_counts_batches_and_images() {
        probe::reset();
        let imgs = vec![rand_image(40, 40, 0), rand_image(40, 40, 1)];
        let _ = cutout_batch(&imgs, &CutoutConfig::default(), 0);
        let c = probe::counts();
        assert_eq!((c.cutout_batches, c.cutout_images, c.shuffles), (1, 2, 0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cutout_is_local_and_bounded(h in 1usize..150, w in 1usize..150, n in 1usize..12,
                                       size in 1usize..100, seed in any::<u64>()) {
            let img = rand_image(h, w, seed ^ 1);
            let cfg = CutoutConfig { n_windows: n, window_size: size };
            let out = cutout(&img, &cfg, seed);
            let wins = cutout_windows(h, w, &cfg, seed);
            let mut zeroed = 0;
            for ((r, c), &v) in out.indexed_iter() {
                if wins.iter().any(|win| win.contains(r, c)) {
                    prop_assert_eq!(v, 0.0);
                    zeroed += 1;
                } else {
                    prop_assert_eq!(v, img[[r, c]]);
                }
            }
            prop_assert!(zeroed <= n * size * size);
        }

        #[test]
        fn shuffle_preserves_window_multisets(n in 1usize..8, size in 1usize..=96, seed in any::<u64>()) {
            let img = rand_image(96, 96, seed ^ 7);
            let cfg = ShuffleConfig { n_windows: n, window_size: size };
            let (out, wins) = pixel_shuffle_with_windows(&img, &cfg, seed).unwrap();
            prop_assert_eq!(out.dim(), (96, 96));
            for ((r, c), &v) in out.indexed_iter() {
                if !wins.iter().any(|win| win.contains(r, c)) {
                    prop_assert_eq!(v, img[[r, c]]);
                }
            }
            let sorted = |m: &Image| {
                let mut v: Vec<f64> = m.iter().copied().collect();
                v.sort_by(f64::total_cmp);
                v
            };
            prop_assert_eq!(sorted(&out), sorted(&img));
            if n == 1 {
                let win = wins[0];
                let a = img.slice(s![win.top..win.bottom, win.left..win.right]).to_owned();
                let b = out.slice(s![win.top..win.bottom, win.left..win.right]).to_owned();
                prop_assert_eq!(sorted(&a), sorted(&b));
            }
        }
    }
}
