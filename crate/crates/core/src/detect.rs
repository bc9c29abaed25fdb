//! Deviation maps and anomaly scores.

use anomem_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::Mode;
use crate::encoder::EncoderState;
use crate::error::{invalid, Result};
use crate::memory::{BoundMemory, HopfieldMemory};

/// `Δ = z − HF(z)` for `[B×D]` vectors or `[B×H×W×C]` maps.
pub fn deviation_map<'t>(z: &Var<'t>, mem: &BoundMemory<'t>) -> Result<Var<'t>> {
    let recalled = if z.shape().len() == 2 { mem.retrieve(z)? } else { mem.spatial(z)? };
    Ok(z.sub(&recalled)?)
}

/// Frobenius norm of each sample's deviation (leading axis is the batch).
pub fn score_oneclass(delta: &Tensor) -> Vec<f64> {
    let b = delta.shape()[0];
    let per = delta.len() / b;
    delta
        .data()
        .chunks(per)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Head output per scale and sample: `result[s][k]`.
pub fn score_ssad(deltas: &[Tensor], heads: &[ScaleHead]) -> Result<Vec<Vec<f64>>> {
    if deltas.len() != heads.len() {
        return Err(invalid(format!("{} deviation maps for {} heads", deltas.len(), heads.len())));
    }
    deltas.iter().zip(heads).map(|(d, h)| h.score(d)).collect()
}

/// `Σ λ_s·s_s / Σ λ_s`.
pub fn fuse_scores(per_scale: &[f64], weights: &[f64]) -> Result<f64> {
    if per_scale.is_empty() || per_scale.len() != weights.len() {
        return Err(invalid(format!(
            "{} scores for {} scale weights",
            per_scale.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(invalid("scale weights must be positive"));
    }
    let total: f64 = weights.iter().sum();
    Ok(per_scale.iter().zip(weights).map(|(s, w)| s * w).sum::<f64>() / total)
}

/// Average pooling to a `grid×grid` map, a fixed per-feature
/// standardization and a two-layer MLP with a scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleHead {
    pub grid: usize,
    /// Subtracted from each pooled feature.
    pub in_mean: Tensor,
    /// Divides each centered pooled feature.
    pub in_std: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ScaleHead {
    pub fn init(channels: usize, grid: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        if grid == 0 || hidden == 0 || channels == 0 {
            return Err(invalid("head needs positive grid, width and channels"));
        }
        let fan = grid * grid * channels;
        let he = |fan_in: usize, n: usize, rng: &mut dyn rand::RngCore| -> Vec<f64> {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            (0..n).map(|_| d.sample(rng)).collect()
        };
        Ok(Self {
            grid,
            in_mean: Tensor::zeros([fan]),
            in_std: Tensor::full([fan], 1.0),
            w1: Tensor::new([fan, hidden], he(fan, fan * hidden, rng))?,
            b1: Tensor::zeros([hidden]),
            w2: Tensor::new([hidden, 1], he(hidden, hidden, rng))?,
            b2: Tensor::zeros([1]),
        })
    }

    pub fn input_width(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    /// Sets the input standardization from the pooled features of `deltas`.
    /// Features with spread below `1e-12` are only centered.
    pub fn fit_input(&mut self, deltas: &Tensor) -> Result<()> {
        let tape = Tape::new();
        let pooled = self.bind(&tape, false).pool(&tape.constant(deltas.clone()))?;
        let x = pooled.value();
        let (n, f) = (x.shape()[0], x.shape()[1]);
        if f != self.input_width() || n == 0 {
            return Err(invalid(format!("head expects {} pooled inputs, got {f}", self.input_width())));
        }
        let mut mean = vec![0.0; f];
        for row in x.data().chunks(f) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut var = vec![0.0; f];
        for row in x.data().chunks(f) {
            var.iter_mut().zip(row).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n as f64);
        }
        let std = var.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        self.in_mean = Tensor::new([f], mean)?;
        self.in_std = Tensor::new([f], std)?;
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundHead<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundHead {
            grid: self.grid,
            in_shift: tape.constant(self.in_mean.map(|m| -m)),
            in_gain: self.in_std.map(|s| 1.0 / s),
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
        }
    }

    /// Scores on plain values; `delta` is `[B×H×W×C]` or `[B×D]`.
    pub fn score(&self, delta: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let head = self.bind(&tape, false);
        let out = head.forward(&tape.constant(delta.clone()))?;
        Ok(out.value().data().to_vec())
    }
}

#[derive(Clone, Debug)]
pub struct BoundHead<'t> {
    pub grid: usize,
    pub in_shift: Var<'t>,
    pub in_gain: Tensor,
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> BoundHead<'t> {
    /// Pooled features `[B × grid²·C]`. A `[B×D]` input counts as a 1×1 map.
    pub fn pool(&self, delta: &Var<'t>) -> Result<Var<'t>> {
        let s = delta.shape();
        let (b, h, w, c) = match s[..] {
            [b, d] => (b, 1, 1, d),
            [b, h, w, c] => (b, h, w, c),
            _ => return Err(invalid(format!("deviation must be [B×D] or [B×H×W×C], got {s:?}"))),
        };
        let g = self.grid;
        if h % g != 0 || w % g != 0 {
            return Err(invalid(format!("pool grid {g} does not divide the {h}×{w} map")));
        }
        let map = delta.reshape([b, h, w, c])?;
        let pooled = if (h, w) == (g, g) { map } else { map.average_pool(h / g, w / g)? };
        Ok(pooled.reshape([b, g * g * c])?)
    }

    /// `[B]` head outputs.
    pub fn forward(&self, delta: &Var<'t>) -> Result<Var<'t>> {
        let x = self.pool(delta)?;
        if x.shape()[1] != self.w1.shape()[0] {
            return Err(invalid(format!(
                "head expects {} pooled inputs, got {}",
                self.w1.shape()[0],
                x.shape()[1]
            )));
        }
        let b = x.shape()[0];
        let gain = Tensor::new(x.shape().to_vec(), self.in_gain.data().repeat(b))?;
        let x = x.add_bias(&self.in_shift)?.mul(&x.tape().constant(gain))?;
        let hdn = x.matmul(&self.w1)?.add_bias(&self.b1)?.relu()?;
        Ok(hdn.matmul(&self.w2)?.add_bias(&self.b2)?.reshape([b])?)
    }

    pub fn params(&self) -> Vec<Var<'t>> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

/// Per-scale and fused anomaly score of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub per_scale: Vec<f64>,
    pub fused: f64,
    pub mode: Mode,
}

/// Everything needed to score images: a frozen encoder, one memory and
/// optionally one head per scored scale.
pub struct Detector<'a> {
    pub encoder: &'a EncoderState,
    /// Memory per encoder scale; `None` for scales that are not scored.
    pub memories: &'a [Option<HopfieldMemory>],
    /// Head per encoder scale, used in SSAD mode.
    pub heads: &'a [Option<ScaleHead>],
    /// Confidence weight per encoder scale.
    pub weights: &'a [f64],
    pub mode: Mode,
    pub normalize_before_memory: bool,
}

impl Detector<'_> {
    fn scored_scales(&self) -> Vec<usize> {
        (0..self.memories.len()).filter(|&s| self.memories[s].is_some()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.encoder.spec.stages.len();
        if self.memories.len() != n || self.weights.len() != n {
            return Err(invalid("detector needs one memory slot and one weight per scale"));
        }
        if self.scored_scales().is_empty() {
            return Err(invalid("detector has no memory to score with"));
        }
        if self.mode == Mode::Ssad {
            if self.heads.len() != n {
                return Err(invalid("ssad scoring needs one head slot per scale"));
            }
            for s in self.scored_scales() {
                if self.heads[s].is_none() {
                    return Err(invalid(format!("ssad scoring needs a head for scale {}", s + 1)));
                }
            }
        }
        Ok(())
    }

    /// Deviation maps for a batch of images, one per scored scale.
    pub fn deviations(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let enc = self.encoder.bind(&tape, false);
        let zs = enc.forward(&tape.constant(images.clone()))?;
        let mut out = Vec::new();
        for s in self.scored_scales() {
            let mem = self.memories[s].as_ref().unwrap().bind(&tape, false)?;
            let z = if self.normalize_before_memory {
                normalize_vectors(&zs[s])?
            } else {
                zs[s]
            };
            out.push((*deviation_map(&z, &mem)?.value()).clone());
        }
        Ok(out)
    }

    /// Scores a `[B×H×W×C]` batch.
    pub fn score_batch(&self, images: &Tensor) -> Result<Vec<AnomalyScore>> {
        self.validate()?;
        let scales = self.scored_scales();
        let deltas = self.deviations(images)?;
        let per: Vec<Vec<f64>> = match self.mode {
            Mode::OneClass => deltas.iter().map(score_oneclass).collect(),
            Mode::Ssad => scales
                .iter()
                .zip(&deltas)
                .map(|(&s, d)| self.heads[s].as_ref().unwrap().score(d))
                .collect::<Result<_>>()?,
        };
        let w: Vec<f64> = scales.iter().map(|&s| self.weights[s]).collect();
        let b = images.shape()[0];
        (0..b)
            .map(|k| {
                let per_scale: Vec<f64> = per.iter().map(|p| p[k]).collect();
                Ok(AnomalyScore {
                    fused: fuse_scores(&per_scale, &w)?,
                    per_scale,
                    mode: self.mode,
                })
            })
            .collect()
    }

    /// Scores a whole image set in chunks.
    pub fn score_all(&self, images: &Tensor, chunk: usize) -> Result<Vec<AnomalyScore>> {
        let n = images.shape()[0];
        let per = images.len() / n;
        let shape = images.shape()[1..].to_vec();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let mut s = vec![end - start];
            s.extend_from_slice(&shape);
            let batch = Tensor::new(s, images.data()[start * per..end * per].to_vec())?;
            out.extend(self.score_batch(&batch)?);
        }
        Ok(out)
    }
}

/// L2-normalizes every depth vector of a `[B×D]` or `[B×H×W×C]` input.
pub fn normalize_vectors<'t>(z: &Var<'t>) -> Result<Var<'t>> {
    let axis = z.shape().len() - 1;
    Ok(z.l2_normalize(axis)?)
}
