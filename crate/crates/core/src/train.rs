//! Stage 1 (encoder and memories, contrastive) and stage 2 (scale heads,
//! supervised) training loops.

use anomem_autodiff::{Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode, StageOptim};
use crate::data::LabeledImageSet;
use crate::detect::{Detector, ScaleHead};
use crate::encoder::EncoderState;
use crate::error::{invalid, Error, Result};
use crate::losses::{loss_com_ms, loss_sup, sample_positions_with, MsOptions, ScaleTerm};
use crate::memory::HopfieldMemory;
use crate::optim::{Schedule, SgdNesterov};
use crate::rng::{
    derive_seed, stream, TAG_AUGMENT, TAG_ENCODER_INIT, TAG_HEAD_INIT, TAG_MEMORY_INIT, TAG_POSITIONS,
    TAG_SHUFFLE, TAG_STAGE2_SHUFFLE,
};

/// One line of training telemetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub steps: usize,
    /// Mean objective over the epoch's steps.
    pub loss: f64,
    /// Stage 1: mean contrastive term per sampled position, per scale.
    pub com: Vec<f64>,
    /// Stage 1: mean variance term per sampled position, per scale.
    pub var: Vec<f64>,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
}

/// Untrained encoder and memories for `cfg`.
pub fn init_model(cfg: &ExperimentConfig) -> Result<(EncoderState, Vec<Option<HopfieldMemory>>)> {
    cfg.validate()?;
    let encoder = EncoderState::init(&cfg.encoder, &mut stream(cfg.seed, &[TAG_ENCODER_INIT]))?;
    let shapes = cfg.encoder.scale_shapes();
    let active = cfg.active_scales();
    let mut memories = Vec::with_capacity(shapes.len());
    for (s, &(_, _, c)) in shapes.iter().enumerate() {
        memories.push(if active.contains(&s) {
            let mut rng = stream(cfg.seed, &[TAG_MEMORY_INIT, s as u64]);
            Some(HopfieldMemory::init(c, cfg.memory.sizes[s], &cfg.memory, &mut rng)?)
        } else {
            None
        });
    }
    Ok((encoder, memories))
}

fn batches(n: usize, batch: usize, perm: &[usize]) -> Vec<Vec<usize>> {
    perm.chunks(batch.min(n).max(1)).map(<[usize]>::to_vec).collect()
}

fn numeric_to_diverged(e: Error, what: &str, epoch: usize, step: usize) -> Error {
    match e {
        Error::Tensor(TensorError::Numeric { op }) => Error::Diverged {
            term: format!("{what} (in {op})"),
            epoch,
            step,
        },
        other => other,
    }
}

#[derive(Debug)]
pub struct Stage1Output {
    pub encoder: EncoderState,
    pub memories: Vec<Option<HopfieldMemory>>,
    pub velocity: Vec<Tensor>,
    pub telemetry: Vec<EpochRecord>,
}

/// Builds two augmented views of each selected image.
fn make_views(
    cfg: &ExperimentConfig,
    data: &LabeledImageSet,
    idx: &[usize],
    epoch: usize,
    step: usize,
) -> Result<(Tensor, Tensor)> {
    let views: Vec<(Tensor, Tensor)> = idx
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let img = data.image(i);
            let draw = |v: u64| derive_seed(cfg.seed, &[TAG_AUGMENT, epoch as u64, step as u64, k as u64, v]);
            Ok((
                cfg.augment.sample_view(&img, draw(0))?,
                cfg.augment.sample_view(&img, draw(1))?,
            ))
        })
        .collect::<Result<_>>()?;
    let (h, w, c) = data.image_dims();
    let stack = |pick: fn(&(Tensor, Tensor)) -> &Tensor| {
        let data: Vec<f64> = views.iter().flat_map(|v| pick(v).data().to_vec()).collect();
        Tensor::new([idx.len(), h, w, c], data)
    };
    Ok((stack(|v| &v.0)?, stack(|v| &v.1)?))
}

/// Stage-1 training: two augmented views per image, memory-gated
/// multi-scale contrastive loss, one joint SGD step per minibatch.
/// `on_epoch` receives each epoch's telemetry as it completes.
pub fn train_stage1(
    cfg: &ExperimentConfig,
    data: &LabeledImageSet,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Stage1Output> {
    let (mut encoder, mut memories) = init_model(cfg)?;
    if data.is_empty() {
        return Err(invalid("stage 1 needs a non-empty training set"));
    }
    if data.image_dims() != (cfg.encoder.height, cfg.encoder.width, cfg.encoder.channels) {
        return Err(invalid("training images do not match the encoder input dims"));
    }
    if cfg.mode == Mode::OneClass && data.labels.iter().any(|&y| y != 1) {
        return Err(invalid("one-class training data must contain normals only"));
    }
    let active = cfg.active_scales();
    let weights = cfg.scale_weights();
    let shapes = cfg.encoder.scale_shapes();
    let o: StageOptim = cfg.optim.as_stage();
    let n = data.len();
    let steps_per_epoch = n.div_ceil(o.batch_size.min(n));
    let total = (o.epochs * steps_per_epoch).max(1);
    let schedule = Schedule::new(o.lr_max, o.lr_min, total)?;

    let mut param_refs: Vec<&Tensor> = encoder.params();
    for &s in &active {
        param_refs.push(memories[s].as_ref().unwrap().weights());
    }
    let mut opt = SgdNesterov::new(o.momentum, o.weight_decay, &param_refs);
    let opts = MsOptions {
        tau: cfg.loss.tau,
        lambda_v: cfg.loss.lambda_v,
        variance_mode: cfg.flags.variance_mode,
        normalize_before_memory: cfg.flags.normalize_before_memory,
    };

    let mut telemetry = Vec::with_capacity(o.epochs);
    let mut global = 0;
    for epoch in 0..o.epochs {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut stream(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        let mut rec = EpochRecord {
            stage: 1,
            epoch,
            steps: 0,
            loss: 0.0,
            com: vec![0.0; active.len()],
            var: vec![0.0; active.len()],
            lr: schedule.lr(global)?,
        };
        let mut positions_seen = vec![0usize; active.len()];
        for (step, idx) in batches(n, o.batch_size, &perm).into_iter().enumerate() {
            let lr = schedule.lr(global)?;
            let y: Vec<u8> = idx.iter().map(|&i| data.labels[i]).collect();
            let (va, vb) = make_views(cfg, data, &idx, epoch, step)?;

            let tape = Tape::new();
            let enc = encoder.bind(&tape, true);
            let bound: Vec<_> = active
                .iter()
                .map(|&s| memories[s].as_ref().unwrap().bind(&tape, true))
                .collect::<Result<_>>()?;
            let run = || -> Result<_> {
                let za = enc.forward(&tape.constant(va))?;
                let zb = enc.forward(&tape.constant(vb))?;
                let mut terms = Vec::with_capacity(active.len());
                for (k, &s) in active.iter().enumerate() {
                    let (h, w, _) = shapes[s];
                    let positions = if s + 1 == shapes.len() {
                        vec![0]
                    } else {
                        let mut rng = stream(
                            cfg.seed,
                            &[TAG_POSITIONS, epoch as u64, step as u64, s as u64],
                        );
                        sample_positions_with(h, w, cfg.loss.ratios[s], &mut rng)?
                    };
                    terms.push(ScaleTerm {
                        za: za[s],
                        zb: zb[s],
                        memory: cfg.flags.use_memory.then_some(bound[k]),
                        weight: weights[s],
                        positions,
                    });
                }
                loss_com_ms(&terms, &y, &opts)
            };
            let loss = run().map_err(|e| numeric_to_diverged(e, "L_COM-MS", epoch, step))?;
            for (k, (&c, &v)) in loss.com.iter().zip(&loss.var).enumerate() {
                if !c.is_finite() {
                    return Err(Error::Diverged {
                        term: format!("L_COM at scale {}", active[k] + 1),
                        epoch,
                        step,
                    });
                }
                if !v.is_finite() {
                    return Err(Error::Diverged {
                        term: format!("L_V at scale {}", active[k] + 1),
                        epoch,
                        step,
                    });
                }
            }
            let grads = tape
                .backward(loss.total)
                .map_err(|e| numeric_to_diverged(e.into(), "gradient", epoch, step))?;
            let mut gvars: Vec<Var<'_>> = enc.params();
            gvars.extend(bound.iter().map(|b| b.x));
            let g: Vec<Tensor> = gvars.iter().map(|v| grads.wrt(v)).collect();
            if g.iter().any(|t| !t.is_finite()) {
                return Err(Error::Diverged {
                    term: "gradient".into(),
                    epoch,
                    step,
                });
            }

            let mut params: Vec<&mut Tensor> = encoder.params_mut();
            let mut mem_w: Vec<Tensor> = active
                .iter()
                .map(|&s| memories[s].as_ref().unwrap().weights().clone())
                .collect();
            params.extend(mem_w.iter_mut());
            opt.step(&mut params, &g, lr)?;
            for (&s, w) in active.iter().zip(mem_w) {
                memories[s].as_mut().unwrap().set_weights(w)?;
            }

            rec.steps += 1;
            rec.loss += loss.total.item();
            for k in 0..active.len() {
                rec.com[k] += loss.com[k];
                rec.var[k] += loss.var[k];
                let s = active[k];
                positions_seen[k] += if s + 1 == shapes.len() {
                    1
                } else {
                    crate::losses::sample_count(shapes[s].0, shapes[s].1, cfg.loss.ratios[s])?
                };
            }
            global += 1;
        }
        rec.loss /= rec.steps as f64;
        for k in 0..active.len() {
            rec.com[k] /= positions_seen[k] as f64;
            rec.var[k] /= positions_seen[k] as f64;
        }
        log::info!("stage 1 epoch {epoch}: loss {:.5}", rec.loss);
        on_epoch(&rec);
        telemetry.push(rec);
    }
    Ok(Stage1Output {
        encoder,
        memories,
        velocity: opt.velocity,
        telemetry,
    })
}

#[derive(Debug)]
pub struct Stage2Output {
    /// One slot per encoder scale; all `None` in one-class mode.
    pub heads: Vec<Option<ScaleHead>>,
    pub telemetry: Vec<EpochRecord>,
    /// `L_SUP` over the whole training set before the first step.
    pub initial_loss: Option<f64>,
    /// `L_SUP` over the whole training set after the last step.
    pub final_loss: Option<f64>,
}

/// Mean `L_SUP` of `heads` over precomputed deviation maps.
fn sup_loss(heads: &[(usize, ScaleHead)], deltas: &[Tensor], y: &[u8], margin: f64) -> Result<f64> {
    let tape = Tape::new();
    let mut d = Vec::with_capacity(heads.len());
    for ((_, h), delta) in heads.iter().zip(deltas) {
        let out = h.bind(&tape, false).forward(&tape.constant(delta.clone()))?;
        d.push(out.clamp_min_pass_through()?);
    }
    Ok(loss_sup(&d, y, margin)?.item())
}

fn rows_of(t: &Tensor, idx: &[usize]) -> Tensor {
    let per = t.len() / t.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).unwrap()
}

/// Stage-2 training of one head per scored scale on frozen deviation maps.
/// Head outputs below zero are clamped to zero before the hinge loss, with
/// the gradient passed through unchanged.
pub fn train_stage2(
    cfg: &ExperimentConfig,
    data: &LabeledImageSet,
    encoder: &EncoderState,
    memories: &[Option<HopfieldMemory>],
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Stage2Output> {
    cfg.validate()?;
    let n_scales = cfg.num_scales();
    if cfg.mode == Mode::OneClass {
        return Ok(Stage2Output {
            heads: vec![None; n_scales],
            telemetry: Vec::new(),
            initial_loss: None,
            final_loss: None,
        });
    }
    if cfg.protocol.gamma <= 0.0 || !data.labels.contains(&0) {
        return Err(invalid(
            "ssad mode needs labeled anomalies (gamma > 0); use one-class scoring instead",
        ));
    }
    if !data.labels.contains(&1) {
        return Err(invalid("ssad training data contains no normals"));
    }
    let weights = cfg.scale_weights();
    let no_heads = vec![None; n_scales];
    let det = Detector {
        encoder,
        memories,
        heads: &no_heads,
        weights: &weights,
        mode: Mode::OneClass,
        normalize_before_memory: cfg.flags.normalize_before_memory,
    };
    let scored: Vec<usize> = (0..n_scales).filter(|&s| memories[s].is_some()).collect();
    let n = data.len();
    let all: Vec<usize> = (0..n).collect();
    let mut deltas: Vec<Vec<Tensor>> = vec![Vec::new(); scored.len()];
    for chunk in all.chunks(256) {
        for (k, d) in det.deviations(&data.batch(chunk))?.into_iter().enumerate() {
            deltas[k].push(d);
        }
    }
    let deltas: Vec<Tensor> = deltas
        .into_iter()
        .map(|parts| {
            let mut shape = parts[0].shape().to_vec();
            shape[0] = n;
            Tensor::new(shape, parts.into_iter().flat_map(Tensor::into_data).collect())
        })
        .collect::<std::result::Result<_, _>>()?;

    let shapes = cfg.encoder.scale_shapes();
    let mut heads: Vec<(usize, ScaleHead)> = Vec::new();
    for &s in &scored {
        let grid = if s + 1 == n_scales { 1 } else { cfg.stage2.pool_grid };
        let mut rng = stream(cfg.seed, &[TAG_HEAD_INIT, s as u64]);
        let mut head = ScaleHead::init(shapes[s].2, grid, cfg.stage2.hidden, &mut rng)?;
        head.fit_input(&deltas[heads.len()])?;
        heads.push((s, head));
    }
    let margin = cfg.loss.margin;
    let initial = sup_loss(&heads, &deltas, &data.labels, margin)?;

    let o = cfg.stage2.as_stage();
    let steps_per_epoch = n.div_ceil(o.batch_size.min(n));
    let schedule = Schedule::new(o.lr_max, o.lr_min, (o.epochs * steps_per_epoch).max(1))?;
    let refs: Vec<&Tensor> = heads.iter().flat_map(|(_, h)| h.params()).collect();
    let mut opt = SgdNesterov::new(o.momentum, o.weight_decay, &refs);
    let mut telemetry = Vec::new();
    let mut global = 0;
    for epoch in 0..o.epochs {
        let mut perm = all.clone();
        perm.shuffle(&mut stream(cfg.seed, &[TAG_STAGE2_SHUFFLE, epoch as u64]));
        let mut rec = EpochRecord {
            stage: 2,
            epoch,
            steps: 0,
            loss: 0.0,
            com: Vec::new(),
            var: Vec::new(),
            lr: schedule.lr(global)?,
        };
        for (step, idx) in batches(n, o.batch_size, &perm).into_iter().enumerate() {
            let lr = schedule.lr(global)?;
            let y: Vec<u8> = idx.iter().map(|&i| data.labels[i]).collect();
            let tape = Tape::new();
            let bound: Vec<_> = heads.iter().map(|(_, h)| h.bind(&tape, true)).collect();
            let mut d = Vec::with_capacity(bound.len());
            for (b, delta) in bound.iter().zip(&deltas) {
                let out = b.forward(&tape.constant(rows_of(delta, &idx)))?;
                d.push(out.clamp_min_pass_through()?);
            }
            let loss = loss_sup(&d, &y, margin).map_err(|e| numeric_to_diverged(e, "L_SUP", epoch, step))?;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = bound.iter().flat_map(|b| b.params()).map(|v| grads.wrt(&v)).collect();
            let mut params: Vec<&mut Tensor> = heads.iter_mut().flat_map(|(_, h)| h.params_mut()).collect();
            opt.step(&mut params, &g, lr)?;
            rec.steps += 1;
            rec.loss += loss.item();
            global += 1;
        }
        rec.loss /= rec.steps.max(1) as f64;
        log::info!("stage 2 epoch {epoch}: L_SUP {:.5}", rec.loss);
        on_epoch(&rec);
        telemetry.push(rec);
    }
    let final_loss = sup_loss(&heads, &deltas, &data.labels, margin)?;
    let mut out = vec![None; n_scales];
    for (s, h) in heads {
        out[s] = Some(h);
    }
    Ok(Stage2Output {
        heads: out,
        telemetry,
        initial_loss: Some(initial),
        final_loss: Some(final_loss),
    })
}
