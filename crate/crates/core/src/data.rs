//! Labeled image sets: a procedural generator, the 3073-byte CIFAR record
//! codec, and the one-vs-all protocol split.

use std::f64::consts::PI;

use anomem_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{stream, TAG_SPLIT};

/// Images `[N×H×W×C]` in `[0, 1]`, binary labels (1 = normal) and the
/// original class of every image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub class_ids: Vec<u32>,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<u8>, class_ids: Vec<u32>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(invalid(format!("images must be N×H×W×C, got {:?}", images.shape())));
        }
        let n = images.shape()[0];
        if labels.len() != n || class_ids.len() != n {
            return Err(invalid("image, label and class counts differ"));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(invalid("labels must be 0 or 1"));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            class_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn image_len(&self) -> usize {
        let (h, w, c) = self.image_dims();
        h * w * c
    }

    pub fn image(&self, i: usize) -> Tensor {
        let (h, w, c) = self.image_dims();
        let n = self.image_len();
        Tensor::new([h, w, c], self.images.data()[i * n..(i + 1) * n].to_vec()).unwrap()
    }

    /// Stacks the selected images into `[k×H×W×C]`.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let (h, w, c) = self.image_dims();
        let n = self.image_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
        }
        Tensor::new([idx.len(), h, w, c], data).unwrap()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: self.batch(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_ids: idx.iter().map(|&i| self.class_ids[i]).collect(),
        }
    }

    /// Sets label 1 on `normal_class` and 0 elsewhere.
    pub fn relabel(&mut self, normal_class: u32) {
        for (y, &c) in self.labels.iter_mut().zip(&self.class_ids) {
            *y = u8::from(c == normal_class);
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.iter().max().map_or(0, |&m| m as usize + 1)
    }
}

/// Parameters of the procedural benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Per-channel offset separating class mean colors.
    pub tint: f64,
    /// Std of a random per-image, per-channel color cast.
    pub color_cast: f64,
    /// Amplitude of the smooth random background field.
    pub field: f64,
    /// Std of i.i.d. pixel noise.
    pub pixel_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 2,
            per_class: 650,
            height: 32,
            width: 32,
            channels: 3,
            tint: 0.04,
            color_cast: 0.05,
            field: 0.1,
            pixel_noise: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid(format!("synthetic data needs K >= 2 classes, got {}", self.classes)));
        }
        if self.per_class == 0 || self.height < 4 || self.width < 4 || self.channels == 0 {
            return Err(invalid("synthetic data needs per_class >= 1 and images of at least 4×4"));
        }
        for (name, v) in [
            ("tint", self.tint),
            ("color_cast", self.color_cast),
            ("field", self.field),
            ("pixel_noise", self.pixel_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Class-specific generative statistics.
struct ClassStyle {
    angle: f64,
    freq: f64,
    shape: usize,
    tint: Vec<f64>,
}

fn class_style(c: usize, spec: &SyntheticSpec) -> ClassStyle {
    let k = spec.classes as f64;
    let phase = 2.0 * PI * c as f64 / k;
    let tint = (0..spec.channels)
        .map(|ch| spec.tint * (phase + 2.0 * PI * ch as f64 / 3.0).cos())
        .collect();
    ClassStyle {
        angle: PI * c as f64 / k,
        freq: 2.0 + 1.5 * (c % 5) as f64,
        shape: c % 3,
        tint,
    }
}

/// Smooth random field: bilinear upsampling of a coarse gaussian grid.
fn smooth_field(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    const G: usize = 5;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let grid: Vec<f64> = (0..G * G).map(|_| normal.sample(rng)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / (h - 1) as f64 * (G - 1) as f64;
        let iy = (fy.floor() as usize).min(G - 2);
        let ty = fy - iy as f64;
        for x in 0..w {
            let fx = x as f64 / (w - 1) as f64 * (G - 1) as f64;
            let ix = (fx.floor() as usize).min(G - 2);
            let tx = fx - ix as f64;
            let a = grid[iy * G + ix];
            let b = grid[iy * G + ix + 1];
            let c = grid[(iy + 1) * G + ix];
            let d = grid[(iy + 1) * G + ix + 1];
            out[y * w + x] = (a * (1.0 - tx) + b * tx) * (1.0 - ty) + (c * (1.0 - tx) + d * tx) * ty;
        }
    }
    out
}

fn shape_mask(kind: usize, h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let r = rng.random_range(0.15..0.3) * h.min(w) as f64;
    let cy = rng.random_range(r..h as f64 - r);
    let cx = rng.random_range(r..w as f64 - r);
    let mut m = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let inside = match kind {
                0 => dy * dy + dx * dx <= r * r,
                1 => dy.abs() <= r * 0.8 && dx.abs() <= r * 0.8,
                _ => (dy.abs() <= r * 0.3 && dx.abs() <= r) || (dx.abs() <= r * 0.3 && dy.abs() <= r),
            };
            m[y * w + x] = f64::from(u8::from(inside));
        }
    }
    m
}

fn render(c: usize, spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<f64> {
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let style = class_style(c, spec);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(0.12..0.25);
    let brightness = rng.random_range(-0.1..0.1);
    let shape_sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let shape_amp = rng.random_range(0.1..0.2) * shape_sign;
    let cast: Vec<f64> = (0..ch).map(|_| spec.color_cast * normal.sample(rng)).collect();
    let field = smooth_field(h, w, rng);
    let mask = shape_mask(style.shape, h, w, rng);
    let (ca, sa) = (style.angle.cos(), style.angle.sin());
    let mut px = vec![0.0; h * w * ch];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 * ca + y as f64 * sa) / w as f64;
            let grating = amp * (2.0 * PI * style.freq * u + phase).cos();
            let base = 0.5 + brightness + grating + spec.field * field[y * w + x] + shape_amp * mask[y * w + x];
            for k in 0..ch {
                let v = base + style.tint[k] + cast[k] + spec.pixel_noise * normal.sample(rng);
                px[(y * w + x) * ch + k] = v.clamp(0.0, 1.0);
            }
        }
    }
    px
}

/// Procedural K-class image set, `per_class` images per class in class
/// order. Class 0 is labeled normal.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<LabeledImageSet> {
    spec.validate()?;
    let n = spec.classes * spec.per_class;
    let per = spec.height * spec.width * spec.channels;
    let mut data = Vec::with_capacity(n * per);
    let mut class_ids = Vec::with_capacity(n);
    for c in 0..spec.classes {
        for i in 0..spec.per_class {
            let mut rng = stream(seed, &[0x5E_ED, c as u64, i as u64]);
            data.extend(render(c, spec, &mut rng));
            class_ids.push(c as u32);
        }
    }
    let labels = class_ids.iter().map(|&c| u8::from(c == 0)).collect();
    LabeledImageSet::new(
        Tensor::new([n, spec.height, spec.width, spec.channels], data)?,
        labels,
        class_ids,
    )
}

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Decodes one record: a label byte then R, G and B planes of 32×32 bytes.
pub fn parse_cifar_record(bytes: &[u8]) -> Result<(u8, Tensor)> {
    if bytes.len() != CIFAR_RECORD {
        return Err(Error::Format {
            offset: bytes.len().min(CIFAR_RECORD),
            msg: format!("record must be {CIFAR_RECORD} bytes, got {}", bytes.len()),
        });
    }
    let label = bytes[0];
    if label > 9 {
        return Err(Error::Format {
            offset: 0,
            msg: format!("label {label} outside 0..=9"),
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut px = vec![0.0; plane * 3];
    for c in 0..3 {
        for p in 0..plane {
            px[p * 3 + c] = f64::from(bytes[1 + c * plane + p]) / 255.0;
        }
    }
    Ok((label, Tensor::new([CIFAR_SIDE, CIFAR_SIDE, 3], px)?))
}

/// Inverse of [`parse_cifar_record`]; pixels are rounded to the nearest
/// 1/255 step.
pub fn encode_cifar_record(label: u8, image: &Tensor) -> Result<Vec<u8>> {
    if label > 9 {
        return Err(invalid(format!("label {label} outside 0..=9")));
    }
    if image.shape() != [CIFAR_SIDE, CIFAR_SIDE, 3] {
        return Err(invalid(format!("CIFAR images are 32×32×3, got {:?}", image.shape())));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = vec![0u8; CIFAR_RECORD];
    out[0] = label;
    for c in 0..3 {
        for p in 0..plane {
            out[1 + c * plane + p] = (image.data()[p * 3 + c].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(out)
}

/// Reads a concatenation of CIFAR records. Every image is labeled normal
/// until [`LabeledImageSet::relabel`] is applied.
pub fn parse_cifar_file(bytes: &[u8]) -> Result<LabeledImageSet> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            offset: bytes.len() - bytes.len() % CIFAR_RECORD,
            msg: format!("file length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * CIFAR_RECORD);
    let mut class_ids = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let (label, img) = parse_cifar_record(rec).map_err(|e| match e {
            Error::Format { offset, msg } => Error::Format {
                offset: i * CIFAR_RECORD + offset,
                msg,
            },
            other => other,
        })?;
        data.extend_from_slice(img.data());
        class_ids.push(u32::from(label));
    }
    LabeledImageSet::new(
        Tensor::new([n, CIFAR_SIDE, CIFAR_SIDE, 3], data)?,
        vec![1; n],
        class_ids,
    )
}

/// Train and test indices for one resample of the one-vs-all protocol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub normal_class: u32,
    pub seed: u64,
    pub train: Vec<usize>,
    pub train_labels: Vec<u8>,
    pub test: Vec<usize>,
    pub test_labels: Vec<u8>,
}

/// Anomalies needed so they make up a fraction `gamma` of the training set.
pub fn anomaly_count(normals: usize, gamma: f64) -> usize {
    (gamma * normals as f64 / (1.0 - gamma)).round() as usize
}

/// Splits `set` for `normal_class`. The test set holds `test_per_class`
/// normals and as many anomalies. Training takes `train_normals` of the
/// remaining normals (all of them when `None`) plus enough anomalies from
/// the other classes for an anomaly fraction of `gamma`.
pub fn make_one_vs_all_split(
    set: &LabeledImageSet,
    normal_class: u32,
    gamma: f64,
    seed: u64,
    train_normals: Option<usize>,
    test_per_class: usize,
) -> Result<ProtocolSplit> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(invalid(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    let mut normals: Vec<usize> = (0..set.len()).filter(|&i| set.class_ids[i] == normal_class).collect();
    let mut anomalies: Vec<usize> = (0..set.len()).filter(|&i| set.class_ids[i] != normal_class).collect();
    if normals.is_empty() {
        return Err(invalid(format!("normal class {normal_class} absent from the data")));
    }
    let mut rng = stream(seed, &[TAG_SPLIT, u64::from(normal_class)]);
    normals.shuffle(&mut rng);
    anomalies.shuffle(&mut rng);
    if normals.len() <= test_per_class || anomalies.len() < test_per_class {
        return Err(invalid(format!(
            "need more than {test_per_class} normals and at least {test_per_class} anomalies, have {} and {}",
            normals.len(),
            anomalies.len()
        )));
    }
    let pool = normals.len() - test_per_class;
    let n_train = train_normals.unwrap_or(pool);
    if n_train == 0 || n_train > pool {
        return Err(invalid(format!("requested {n_train} training normals, {pool} available")));
    }
    let n_anom = anomaly_count(n_train, gamma);
    if n_anom > anomalies.len() - test_per_class {
        return Err(invalid(format!(
            "gamma {gamma} needs {n_anom} training anomalies, only {} available",
            anomalies.len() - test_per_class
        )));
    }
    let mut test = normals[..test_per_class].to_vec();
    test.extend_from_slice(&anomalies[..test_per_class]);
    let mut test_labels = vec![1u8; test_per_class];
    test_labels.extend(std::iter::repeat_n(0u8, test_per_class));
    let mut train = normals[test_per_class..test_per_class + n_train].to_vec();
    train.extend_from_slice(&anomalies[test_per_class..test_per_class + n_anom]);
    let mut train_labels = vec![1u8; n_train];
    train_labels.extend(std::iter::repeat_n(0u8, n_anom));
    Ok(ProtocolSplit {
        normal_class,
        seed,
        train,
        train_labels,
        test,
        test_labels,
    })
}

impl ProtocolSplit {
    pub fn train_set(&self, set: &LabeledImageSet) -> LabeledImageSet {
        let mut s = set.subset(&self.train);
        s.labels = self.train_labels.clone();
        s
    }

    pub fn test_set(&self, set: &LabeledImageSet) -> LabeledImageSet {
        let mut s = set.subset(&self.test);
        s.labels = self.test_labels.clone();
        s
    }
}
