//! Weak and strong views.
//!
//! Images: weak = random horizontal flip + small shift (edges replicated);
//! strong = weak + two random photometric ops + a square cutout filled with 0.5.
//! Vectors: weak = small Gaussian jitter; strong = larger jitter + a zeroed
//! cyclic block of coordinates.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SampleKind;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// jitter std for weak vector views
    pub weak_noise: f64,
    /// jitter std for strong vector views
    pub strong_noise: f64,
    /// fraction of coordinates (vectors) or side length (images) cut out
    pub cutout_fraction: f64,
    /// max translation in pixels for images
    pub max_shift: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_noise: 0.1,
            strong_noise: 0.4,
            cutout_fraction: 0.25,
            max_shift: 2,
        }
    }
}

impl AugmentConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.weak_noise >= 0.0 && self.strong_noise >= 0.0) {
            out.push("aug_weak_noise and aug_strong_noise must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.cutout_fraction) {
            out.push(format!("aug_cutout_fraction: must lie in [0, 1), got {}", self.cutout_fraction));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair<T> {
    pub weak: Vec<T>,
    pub strong: Vec<T>,
}

impl<T: Scalar> AugmentedPair<T> {
    pub fn new<R: Rng + ?Sized>(sample: &[T], kind: SampleKind, cfg: &AugmentConfig, rng: &mut R) -> Self {
        Self {
            weak: augment(sample, kind, ViewMode::Weak, cfg, rng),
            strong: augment(sample, kind, ViewMode::Strong, cfg, rng),
        }
    }
}

pub fn augment<T: Scalar, R: Rng + ?Sized>(
    sample: &[T],
    kind: SampleKind,
    mode: ViewMode,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Vec<T> {
    debug_assert_eq!(sample.len(), kind.len());
    match kind {
        SampleKind::Vector { .. } => augment_vector(sample, mode, cfg, rng),
        SampleKind::Image { height, width, channels } => {
            let mut img = Image { h: height, w: width, c: channels, px: sample.iter().map(|v| v.as_f64()).collect() };
            img.flip_shift(cfg.max_shift, rng);
            if mode == ViewMode::Strong {
                for _ in 0..2 {
                    img.photometric(rng);
                }
                img.cutout(cfg.cutout_fraction, rng);
            }
            img.px.into_iter().map(T::lit).collect()
        }
    }
}

fn augment_vector<T: Scalar, R: Rng + ?Sized>(sample: &[T], mode: ViewMode, cfg: &AugmentConfig, rng: &mut R) -> Vec<T> {
    let std = match mode {
        ViewMode::Weak => cfg.weak_noise,
        ViewMode::Strong => cfg.strong_noise,
    };
    let mut out: Vec<T> = sample
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            v + T::lit(std * z)
        })
        .collect();
    let dim = out.len();
    if mode == ViewMode::Strong && dim > 0 {
        let block = (cfg.cutout_fraction * dim as f64).round() as usize;
        let start = rng.random_range(0..dim);
        for i in 0..block {
            out[(start + i) % dim] = T::zero();
        }
    }
    out
}

struct Image {
    h: usize,
    w: usize,
    c: usize,
    px: Vec<f64>,
}

impl Image {
    fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.px[(y * self.w + x) * self.c + ch]
    }

    fn flip_shift<R: Rng + ?Sized>(&mut self, max_shift: usize, rng: &mut R) {
        let flip = rng.random_bool(0.5);
        let s = max_shift as i64;
        let (dy, dx) = (rng.random_range(-s..=s), rng.random_range(-s..=s));
        let mut out = vec![0.0; self.px.len()];
        for y in 0..self.h {
            let sy = (y as i64 + dy).clamp(0, self.h as i64 - 1) as usize;
            for x in 0..self.w {
                let xf = if flip { self.w - 1 - x } else { x };
                let sx = (xf as i64 + dx).clamp(0, self.w as i64 - 1) as usize;
                for ch in 0..self.c {
                    out[(y * self.w + x) * self.c + ch] = self.at(sy, sx, ch);
                }
            }
        }
        self.px = out;
    }

    fn photometric<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let m: f64 = rng.random_range(0.05..0.5);
        match rng.random_range(0..5) {
            // brightness
            0 => {
                let d = if rng.random_bool(0.5) { m } else { -m };
                self.px.iter_mut().for_each(|p| *p = (*p + d * 0.5).clamp(0.0, 1.0));
            }
            // contrast around the mean
            1 => {
                let mean = self.px.iter().sum::<f64>() / self.px.len().max(1) as f64;
                let f = if rng.random_bool(0.5) { 1.0 + m } else { 1.0 - m };
                self.px.iter_mut().for_each(|p| *p = (mean + (*p - mean) * f).clamp(0.0, 1.0));
            }
            // solarize
            2 => {
                let t = 1.0 - m;
                self.px.iter_mut().for_each(|p| {
                    if *p > t {
                        *p = 1.0 - *p
                    }
                });
            }
            // posterize
            3 => {
                let levels = (16.0 * (1.0 - m)).max(2.0).round();
                self.px.iter_mut().for_each(|p| *p = (*p * levels).floor().min(levels - 1.0) / (levels - 1.0));
            }
            // pixel noise
            _ => {
                self.px.iter_mut().for_each(|p| {
                    let z: f64 = rng.sample(StandardNormal);
                    *p = (*p + 0.2 * m * z).clamp(0.0, 1.0);
                });
            }
        }
    }

    fn cutout<R: Rng + ?Sized>(&mut self, fraction: f64, rng: &mut R) {
        let side = (fraction * self.h.min(self.w) as f64).round() as usize;
        if side == 0 {
            return;
        }
        let y0 = rng.random_range(0..=self.h - side);
        let x0 = rng.random_range(0..=self.w - side);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                for ch in 0..self.c {
                    self.px[(y * self.w + x) * self.c + ch] = 0.5;
                }
            }
        }
    }
}
