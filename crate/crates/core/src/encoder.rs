//! Staged convolutional encoder.
//!
//! Every block is a 3×3 same-padded convolution, a bias and a relu. A stage
//! is a run of blocks sharing one stride. The output of every stage is
//! exposed as a feature map; the last stage is globally averaged into a
//! `[B×D]` embedding.

use anomem_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Output channels of each block in the stage.
    pub widths: Vec<usize>,
    /// Stride of every block in the stage.
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stages: Vec<StageSpec>,
    /// Pixels enter the first block as `(x − input_mean) / input_std`.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            stages: vec![
                StageSpec {
                    widths: vec![16, 64],
                    stride: 2,
                },
                StageSpec {
                    widths: vec![96, 128],
                    stride: 2,
                },
            ],
            input_mean: 0.5,
            input_std: 0.25,
        }
    }
}

fn out_extent(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(invalid("encoder input dims must be positive"));
        }
        if !(self.input_mean.is_finite() && self.input_std.is_finite() && self.input_std > 0.0) {
            return Err(invalid("encoder input_std must be positive and input_mean finite"));
        }
        if self.stages.is_empty() {
            return Err(invalid("encoder needs at least one stage"));
        }
        let (mut h, mut w) = (self.height, self.width);
        for (s, st) in self.stages.iter().enumerate() {
            if st.widths.is_empty() || st.widths.contains(&0) {
                return Err(invalid(format!("stage {s} needs positive block widths")));
            }
            if st.stride < 2 {
                return Err(invalid(format!("stage {s} must downsample (stride >= 2)")));
            }
            for _ in &st.widths {
                if h < KERNEL || w < KERNEL {
                    return Err(invalid(format!("stage {s}: map {h}×{w} smaller than the kernel")));
                }
                h = out_extent(h, st.stride);
                w = out_extent(w, st.stride);
            }
        }
        Ok(())
    }

    /// `(H, W, C)` of each stage output before any pooling.
    pub fn stage_maps(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (self.height, self.width);
        self.stages
            .iter()
            .map(|st| {
                for _ in &st.widths {
                    h = out_extent(h, st.stride);
                    w = out_extent(w, st.stride);
                }
                (h, w, *st.widths.last().unwrap())
            })
            .collect()
    }

    /// `(H, W, C)` of each exposed scale; the last is `(1, 1, D)`.
    pub fn scale_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut maps = self.stage_maps();
        let last = maps.last_mut().unwrap();
        *last = (1, 1, last.2);
        maps
    }

    pub fn embed_dim(&self) -> usize {
        *self.stages.last().unwrap().widths.last().unwrap()
    }

    fn blocks(&self) -> Vec<(usize, usize, usize)> {
        let mut c_in = self.channels;
        let mut out = Vec::new();
        for st in &self.stages {
            for &c_out in &st.widths {
                out.push((c_in, c_out, st.stride));
                c_in = c_out;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub spec: EncoderSpec,
    /// One `[3×3×C_in×C_out]` kernel per block, in order.
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl EncoderState {
    /// He-normal kernels, zero biases.
    pub fn init(spec: &EncoderSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for (c_in, c_out, _) in spec.blocks() {
            let fan_in = KERNEL * KERNEL * c_in;
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            let data = (0..fan_in * c_out).map(|_| dist.sample(rng)).collect();
            kernels.push(Tensor::new([KERNEL, KERNEL, c_in, c_out], data)?);
            biases.push(Tensor::zeros([c_out]));
        }
        Ok(Self {
            spec: spec.clone(),
            kernels,
            biases,
        })
    }

    pub fn num_params(&self) -> usize {
        self.kernels.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundEncoder<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundEncoder {
            spec: self.spec.clone(),
            kernels: self.kernels.iter().map(leaf).collect(),
            biases: self.biases.iter().map(leaf).collect(),
        }
    }

    /// Forward pass on plain values.
    pub fn forward(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let enc = self.bind(&tape, false);
        let x = tape.constant(images.clone());
        Ok(enc
            .forward(&x)?
            .into_iter()
            .map(|v| (*v.value()).clone())
            .collect())
    }

    /// Parameters in the fixed order kernels then biases.
    pub fn params(&self) -> Vec<&Tensor> {
        self.kernels.iter().chain(&self.biases).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.kernels.iter_mut().chain(self.biases.iter_mut()).collect()
    }
}

pub struct BoundEncoder<'t> {
    pub spec: EncoderSpec,
    pub kernels: Vec<Var<'t>>,
    pub biases: Vec<Var<'t>>,
}

impl<'t> BoundEncoder<'t> {
    /// `images` is `[B×H×W×C]`. Returns one map per stage: `[B×H×W×C]` for
    /// intermediate stages and `[B×D]` for the last.
    pub fn forward(&self, images: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let shape = images.shape();
        let s = &self.spec;
        if shape.len() != 4 || shape[1..] != [s.height, s.width, s.channels] {
            return Err(anomem_autodiff::TensorError::Dimension {
                op: "encoder_forward",
                msg: format!("images {shape:?}, expected [B, {}, {}, {}]", s.height, s.width, s.channels),
            }
            .into());
        }
        let batch = shape[0];
        let shift = images.tape().constant(Tensor::full([s.channels], -s.input_mean));
        let mut x = images.add_bias(&shift)?.scale(1.0 / s.input_std)?;
        let mut out = Vec::with_capacity(s.stages.len());
        let mut block = 0;
        for (si, st) in s.stages.iter().enumerate() {
            for _ in &st.widths {
                x = x
                    .conv2d(&self.kernels[block], st.stride)?
                    .add_bias(&self.biases[block])?
                    .relu()?;
                block += 1;
            }
            if si + 1 == s.stages.len() {
                let sh = x.shape();
                let pooled = x.average_pool(sh[1], sh[2])?;
                out.push(pooled.reshape([batch, sh[3]])?);
            } else {
                out.push(x);
            }
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<Var<'t>> {
        self.kernels.iter().chain(&self.biases).copied().collect()
    }
}
