//! Stochastic view generation for contrastive training.
//!
//! Ops run in a fixed order: crop with bilinear rescale, horizontal flip,
//! brightness/contrast/saturation jitter, gaussian blur, gaussian noise,
//! then a clamp to `[0, 1]`. Every random draw comes from a stream keyed by
//! the policy seed and a caller-chosen draw index.

use anomem_autodiff::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{stream, TAG_AUGMENT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    /// Range of the crop area as a fraction of the image area.
    pub crop_scale: [f64; 2],
    pub flip_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Probability of applying the color jitter group.
    pub jitter_p: f64,
    pub blur_sigma: [f64; 2],
    pub blur_p: f64,
    pub noise_std: f64,
    pub noise_p: f64,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_scale: [0.5, 1.0],
            flip_p: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            jitter_p: 0.8,
            blur_sigma: [0.1, 1.0],
            blur_p: 0.5,
            noise_std: 0.02,
            noise_p: 0.5,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// A policy that leaves images untouched.
    pub fn identity() -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            flip_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            jitter_p: 0.0,
            blur_sigma: [0.0, 0.0],
            blur_p: 0.0,
            noise_std: 0.0,
            noise_p: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi) {
            return Err(invalid(format!("crop_scale [{lo}, {hi}] must satisfy 0 < min <= max")));
        }
        if hi > 1.0 {
            return Err(invalid(format!("crop_scale max {hi} exceeds the image")));
        }
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("blur_p", self.blur_p),
            ("noise_p", self.noise_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("noise_std", self.noise_std),
            ("blur_sigma min", self.blur_sigma[0]),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.blur_sigma[0] > self.blur_sigma[1] {
            return Err(invalid("blur_sigma min exceeds max"));
        }
        Ok(())
    }

    /// One augmented view of an `[H×W×C]` image with values in `[0, 1]`.
    pub fn sample_view(&self, image: &Tensor, draw_index: u64) -> Result<Tensor> {
        self.validate()?;
        let &[h, w, c] = image.shape() else {
            return Err(invalid(format!("image must be H×W×C, got {:?}", image.shape())));
        };
        let mut rng = stream(self.seed, &[TAG_AUGMENT, draw_index]);
        let mut img = Img {
            h,
            w,
            c,
            px: image.data().to_vec(),
        };

        let scale = uniform(&mut rng, self.crop_scale[0], self.crop_scale[1]);
        let side = scale.sqrt();
        let ch = ((h as f64 * side).round() as usize).clamp(1, h);
        let cw = ((w as f64 * side).round() as usize).clamp(1, w);
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        if (ch, cw) != (h, w) {
            img = img.crop_resize(y0, x0, ch, cw);
        }

        if rng.random::<f64>() < self.flip_p {
            img.flip();
        }

        if rng.random::<f64>() < self.jitter_p {
            let b = uniform(&mut rng, 1.0 - self.brightness, 1.0 + self.brightness).max(0.0);
            let k = uniform(&mut rng, 1.0 - self.contrast, 1.0 + self.contrast).max(0.0);
            let s = uniform(&mut rng, 1.0 - self.saturation, 1.0 + self.saturation).max(0.0);
            img.px.iter_mut().for_each(|v| *v *= b);
            let mean = img.px.iter().sum::<f64>() / img.px.len() as f64;
            img.px.iter_mut().for_each(|v| *v = mean + (*v - mean) * k);
            if c == 3 {
                for p in img.px.chunks_mut(3) {
                    let gray = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
                    p.iter_mut().for_each(|v| *v = gray + (*v - gray) * s);
                }
            }
        }

        if rng.random::<f64>() < self.blur_p {
            let sigma = uniform(&mut rng, self.blur_sigma[0], self.blur_sigma[1]);
            if sigma > 0.0 {
                img.blur(sigma);
            }
        }

        if rng.random::<f64>() < self.noise_p && self.noise_std > 0.0 {
            let n = Normal::new(0.0, self.noise_std).unwrap();
            img.px.iter_mut().for_each(|v| *v += n.sample(&mut rng));
        }

        img.px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Tensor::new([h, w, c], img.px)?)
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

struct Img {
    h: usize,
    w: usize,
    c: usize,
    px: Vec<f64>,
}

impl Img {
    fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.px[(y * self.w + x) * self.c + ch]
    }

    /// Crops `ch×cw` at `(y0, x0)` and resamples it back to `h×w`.
    fn crop_resize(&self, y0: usize, x0: usize, ch: usize, cw: usize) -> Img {
        let mut px = vec![0.0; self.px.len()];
        let sy = ch as f64 / self.h as f64;
        let sx = cw as f64 / self.w as f64;
        for y in 0..self.h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
            let (iy, ty) = (fy.floor() as usize, fy - fy.floor());
            let iy1 = (iy + 1).min(ch - 1);
            for x in 0..self.w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
                let (ix, tx) = (fx.floor() as usize, fx - fx.floor());
                let ix1 = (ix + 1).min(cw - 1);
                for c in 0..self.c {
                    let a = self.at(y0 + iy, x0 + ix, c);
                    let b = self.at(y0 + iy, x0 + ix1, c);
                    let d = self.at(y0 + iy1, x0 + ix, c);
                    let e = self.at(y0 + iy1, x0 + ix1, c);
                    let top = a + (b - a) * tx;
                    let bot = d + (e - d) * tx;
                    px[(y * self.w + x) * self.c + c] = top + (bot - top) * ty;
                }
            }
        }
        Img {
            h: self.h,
            w: self.w,
            c: self.c,
            px,
        }
    }

    fn flip(&mut self) {
        let (w, c) = (self.w, self.c);
        for row in self.px.chunks_mut(w * c) {
            for x in 0..w / 2 {
                for ch in 0..c {
                    row.swap(x * c + ch, (w - 1 - x) * c + ch);
                }
            }
        }
    }

    /// Separable gaussian blur with clamped borders.
    fn blur(&mut self, sigma: f64) {
        let r = (3.0 * sigma).ceil() as isize;
        let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= total);
        let (h, w, c) = (self.h as isize, self.w as isize, self.c);
        let mut tmp = vec![0.0; self.px.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (j, kv) in k.iter().enumerate() {
                        let xx = (x + j as isize - r).clamp(0, w - 1);
                        acc += kv * self.px[((y * w + xx) as usize) * c + ch];
                    }
                    tmp[((y * w + x) as usize) * c + ch] = acc;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (j, kv) in k.iter().enumerate() {
                        let yy = (y + j as isize - r).clamp(0, h - 1);
                        acc += kv * tmp[((yy * w + x) as usize) * c + ch];
                    }
                    self.px[((y * w + x) as usize) * c + ch] = acc;
                }
            }
        }
    }
}
