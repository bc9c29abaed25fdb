//! Metrics, the linear probe, and protocol runs and sweeps.

use anomem_autodiff::kernels::dot;
use anomem_autodiff::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Mode};
use crate::data::{make_one_vs_all_split, LabeledImageSet, ProtocolSplit};
use crate::detect::{AnomalyScore, Detector};
use crate::error::{invalid, Result};
use crate::rng::{stream, TAG_PROBE};
use crate::train::{train_stage1, train_stage2, EpochRecord};

/// Area under the ROC curve via the Mann–Whitney statistic with midranks.
/// `is_anomaly[k] == 1` marks a positive; higher scores mean more anomalous.
pub fn auroc(scores: &[f64], is_anomaly: &[u8]) -> Result<f64> {
    if scores.len() != is_anomaly.len() {
        return Err(invalid("score and label counts differ"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("scores contain NaN"));
    }
    let n_a = is_anomaly.iter().filter(|&&y| y == 1).count();
    let n_n = is_anomaly.iter().filter(|&&y| y == 0).count();
    if n_a + n_n != scores.len() {
        return Err(invalid("labels must be 0 or 1"));
    }
    if n_a == 0 || n_n == 0 {
        return Err(invalid("auroc needs both anomalies and normals"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; tied entries share the mean of their ranks.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..scores.len()).filter(|&k| is_anomaly[k] == 1).map(|k| ranks[k]).sum();
    let (na, nn) = (n_a as f64, n_n as f64);
    Ok((rank_sum - na * (na + 1.0) / 2.0) / (na * nn))
}

const PROBE_TOL: f64 = 1e-6;
const PROBE_MAX_ITERS: usize = 5000;

/// Held-out accuracy of a multinomial logistic regression trained by
/// full-batch gradient descent on an 80/20 split of `features` (`[N×F]`).
/// Features are standardized with training-fold statistics.
pub fn linear_probe(features: &Tensor, classes: &[u32], seed: u64) -> Result<f64> {
    let &[n, f] = features.shape() else {
        return Err(invalid("probe features must be N×F"));
    };
    if classes.len() != n {
        return Err(invalid("feature and class counts differ"));
    }
    let mut ids: Vec<u32> = classes.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(invalid("linear probe needs at least two classes"));
    }
    let k = ids.len();
    let label: Vec<usize> = classes.iter().map(|c| ids.binary_search(c).unwrap()).collect();

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(seed, &[TAG_PROBE]));
    let n_train = (n as f64 * 0.8).round() as usize;
    let (tr, te) = perm.split_at(n_train);
    if tr.is_empty() || te.is_empty() {
        return Err(invalid("probe split leaves an empty fold"));
    }
    let tr_classes = {
        let mut c: Vec<usize> = tr.iter().map(|&i| label[i]).collect();
        c.sort_unstable();
        c.dedup();
        c.len()
    };
    if tr_classes < 2 {
        return Err(invalid("probe training fold holds a single class"));
    }

    let row = |i: usize| &features.data()[i * f..(i + 1) * f];
    let mut mean = vec![0.0; f];
    let mut sd = vec![0.0; f];
    for &i in tr {
        for (m, v) in mean.iter_mut().zip(row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= tr.len() as f64);
    for &i in tr {
        for ((s, v), m) in sd.iter_mut().zip(row(i)).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    sd.iter_mut().for_each(|s| {
        *s = (*s / tr.len() as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    });
    // A trailing constant column acts as the bias.
    let std_row = |i: usize| -> Vec<f64> {
        let mut r: Vec<f64> = row(i).iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect();
        r.push(1.0);
        r
    };
    let xtr: Vec<Vec<f64>> = tr.iter().map(|&i| std_row(i)).collect();
    let xte: Vec<Vec<f64>> = te.iter().map(|&i| std_row(i)).collect();
    let ytr: Vec<usize> = tr.iter().map(|&i| label[i]).collect();

    let w = if f < xtr.len() {
        probe_primal(&xtr, &ytr, k)
    } else {
        probe_dual(&xtr, &ytr, k)
    };
    let correct = xte
        .iter()
        .zip(te)
        .filter(|(x, &i)| {
            let logits: Vec<f64> = w.iter().map(|wk| dot(wk, x)).collect();
            argmax(&logits) == label[i]
        })
        .count();
    Ok(correct as f64 / te.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax residuals `p − onehot(y)` for a logit row, written into `out`.
fn residual(logits: &[f64], y: usize, out: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    for (j, o) in out.iter_mut().enumerate() {
        *o = (logits[j] - m).exp() / z - f64::from(u8::from(j == y));
    }
}

/// Largest eigenvalue of a symmetric PSD operator by power iteration.
fn top_eigenvalue(dim: usize, apply: impl Fn(&[f64]) -> Vec<f64>) -> f64 {
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let w = apply(&v);
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = dot(&v, &w);
        v = w.into_iter().map(|x| x / norm).collect();
    }
    // Power iteration approaches from below; a small margin keeps the step
    // inside the stable range.
    lambda * 1.05
}

/// Gradient descent on `W [K×F]`. Returns the weight rows.
fn probe_primal(x: &[Vec<f64>], y: &[usize], k: usize) -> Vec<Vec<f64>> {
    let (n, f) = (x.len(), x[0].len());
    let lmax = top_eigenvalue(f, |v| {
        let xv: Vec<f64> = x.iter().map(|r| dot(r, v)).collect();
        let mut out = vec![0.0; f];
        for (r, s) in x.iter().zip(&xv) {
            for (o, a) in out.iter_mut().zip(r) {
                *o += a * s;
            }
        }
        out
    });
    let lr = 1.0 / (0.5 * lmax / n as f64).max(1e-12);
    let mut w = vec![vec![0.0; f]; k];
    let mut res = vec![0.0; k];
    for _ in 0..PROBE_MAX_ITERS {
        let mut g = vec![vec![0.0; f]; k];
        for (r, &yi) in x.iter().zip(y) {
            let logits: Vec<f64> = w.iter().map(|wk| dot(wk, r)).collect();
            residual(&logits, yi, &mut res);
            for (gk, &rk) in g.iter_mut().zip(&res) {
                for (gv, a) in gk.iter_mut().zip(r) {
                    *gv += rk * a;
                }
            }
        }
        let mut norm2 = 0.0;
        for gk in g.iter_mut() {
            for v in gk.iter_mut() {
                *v /= n as f64;
                norm2 += *v * *v;
            }
        }
        if norm2.sqrt() < PROBE_TOL {
            break;
        }
        for (wk, gk) in w.iter_mut().zip(&g) {
            for (wv, gv) in wk.iter_mut().zip(gk) {
                *wv -= lr * gv;
            }
        }
    }
    w
}

/// The same gradient descent run in the span of the training rows:
/// `W = Aᵀ X` with `A [N×K]`, which is exact because every gradient is a
/// combination of training rows. Used when features outnumber samples.
fn probe_dual(x: &[Vec<f64>], y: &[usize], k: usize) -> Vec<Vec<f64>> {
    let (n, f) = (x.len(), x[0].len());
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = dot(&x[i], &x[j]);
            gram[i * n + j] = v;
            gram[j * n + i] = v;
        }
    }
    let lmax = top_eigenvalue(n, |v| (0..n).map(|i| dot(&gram[i * n..(i + 1) * n], v)).collect());
    let lr = 1.0 / (0.5 * lmax / n as f64).max(1e-12);
    // a[k] holds coefficient column k over training rows; logits[k] = G a[k]
    // is kept up to date alongside it.
    let mut a = vec![vec![0.0; n]; k];
    let mut logits = vec![vec![0.0; n]; k];
    let mut res = vec![0.0; k];
    let mut r = vec![vec![0.0; n]; k];
    let mut li = vec![0.0; k];
    for _ in 0..PROBE_MAX_ITERS {
        for i in 0..n {
            for j in 0..k {
                li[j] = logits[j][i];
            }
            residual(&li, y[i], &mut res);
            for j in 0..k {
                r[j][i] = res[j] / n as f64;
            }
        }
        let gr: Vec<Vec<f64>> = r
            .iter()
            .map(|rk| (0..n).map(|i| dot(&gram[i * n..(i + 1) * n], rk)).collect())
            .collect();
        // ‖∇W‖² = Σ_k r_kᵀ G r_k.
        let norm2: f64 = r.iter().zip(&gr).map(|(rk, gk)| dot(rk, gk)).sum();
        if norm2.max(0.0).sqrt() < PROBE_TOL {
            break;
        }
        for j in 0..k {
            for i in 0..n {
                a[j][i] -= lr * r[j][i];
                logits[j][i] -= lr * gr[j][i];
            }
        }
    }
    a.iter()
        .map(|ak| {
            let mut w = vec![0.0; f];
            for (row, &c) in x.iter().zip(ak) {
                for (wv, xv) in w.iter_mut().zip(row) {
                    *wv += c * xv;
                }
            }
            w
        })
        .collect()
}

/// Result of one protocol resample.
pub struct RunOutcome {
    pub split: ProtocolSplit,
    pub checkpoint: Checkpoint,
    pub scores: Vec<AnomalyScore>,
    pub auroc: f64,
    /// AUROC of each scored scale on its own.
    pub scale_aurocs: Vec<f64>,
    pub telemetry: Vec<EpochRecord>,
}

/// Trains both stages on one resample of the one-vs-all split and scores
/// its test set. `seed` drives both the split and training.
pub fn run_protocol(cfg: &ExperimentConfig, data: &LabeledImageSet, seed: u64) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    cfg.validate()?;
    let p = &cfg.protocol;
    if cfg.mode == Mode::Ssad && p.gamma <= 0.0 {
        return Err(invalid("ssad mode needs gamma > 0; use one-class mode for gamma = 0"));
    }
    let split = make_one_vs_all_split(data, p.normal_class, p.gamma, seed, p.train_normals, p.test_per_class)?;
    let train = split.train_set(data);
    let test = split.test_set(data);
    let mut telemetry = Vec::new();
    let s1 = train_stage1(&cfg, &train, &mut |r| telemetry.push(r.clone()))?;
    let s2 = train_stage2(&cfg, &train, &s1.encoder, &s1.memories, &mut |r| telemetry.push(r.clone()))?;
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        encoder: s1.encoder,
        memories: s1.memories,
        heads: s2.heads,
        velocity: s1.velocity,
    };
    let scores = score_set(&checkpoint, &test.images, cfg.mode)?;
    let is_anomaly: Vec<u8> = test.labels.iter().map(|&y| 1 - y).collect();
    let fused: Vec<f64> = scores.iter().map(|s| s.fused).collect();
    let auroc_fused = auroc(&fused, &is_anomaly)?;
    let n_scored = scores.first().map_or(0, |s| s.per_scale.len());
    let scale_aurocs = (0..n_scored)
        .map(|j| auroc(&scores.iter().map(|s| s.per_scale[j]).collect::<Vec<_>>(), &is_anomaly))
        .collect::<Result<_>>()?;
    Ok(RunOutcome {
        split,
        checkpoint,
        scores,
        auroc: auroc_fused,
        scale_aurocs,
        telemetry,
    })
}

/// Scores images with a checkpoint in the given mode.
pub fn score_set(ck: &Checkpoint, images: &Tensor, mode: Mode) -> Result<Vec<AnomalyScore>> {
    let weights = ck.scale_weights();
    let det = Detector {
        encoder: &ck.encoder,
        memories: &ck.memories,
        heads: &ck.heads,
        weights: &weights,
        mode,
        normalize_before_memory: ck.config.flags.normalize_before_memory,
    };
    det.score_all(images, 128)
}

/// Final-scale embeddings of every image, `[N×D]`.
pub fn embed(ck: &Checkpoint, images: &Tensor) -> Result<Tensor> {
    let n = images.shape()[0];
    let per = images.len() / n;
    let d = ck.encoder.spec.embed_dim();
    let mut out = Vec::with_capacity(n * d);
    for start in (0..n).step_by(128) {
        let end = (start + 128).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let batch = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
        let z = ck.encoder.forward(&batch)?;
        out.extend_from_slice(z.last().unwrap().data());
    }
    Ok(Tensor::new([n, d], out)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    MemorySize,
    SamplingRatio,
    Gamma,
}

impl std::str::FromStr for SweepAxis {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "memory_size" => Ok(SweepAxis::MemorySize),
            "sampling_ratio" => Ok(SweepAxis::SamplingRatio),
            "gamma" => Ok(SweepAxis::Gamma),
            other => Err(invalid(format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// Per-grid-point summary over protocol resamples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub axis: Option<SweepAxis>,
    pub value: Option<f64>,
    pub seeds: Vec<u64>,
    pub aurocs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub median: f64,
    pub auroc: f64,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl EvalReport {
    pub fn from_aurocs(axis: Option<SweepAxis>, value: Option<f64>, seeds: Vec<u64>, aurocs: Vec<f64>) -> Self {
        let n = aurocs.len() as f64;
        let mean = aurocs.iter().sum::<f64>() / n;
        let std = if aurocs.len() > 1 {
            (aurocs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            axis,
            value,
            median: median(&aurocs),
            seeds,
            aurocs,
            mean,
            std,
            auroc: mean,
        }
    }
}

/// `cfg` with the sweep axis set to `value`.
pub fn apply_axis(cfg: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::MemorySize => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(invalid(format!("memory size must be a positive integer, got {value}")));
            }
            c.memory.sizes.iter_mut().for_each(|s| *s = value as usize);
        }
        SweepAxis::SamplingRatio => {
            let last = c.loss.ratios.len() - 1;
            c.loss.ratios[..last].iter_mut().for_each(|r| *r = value);
        }
        SweepAxis::Gamma => {
            c.protocol.gamma = value;
            c.mode = if value > 0.0 { Mode::Ssad } else { Mode::OneClass };
        }
    }
    c.validate()?;
    Ok(c)
}

/// Runs every seed of `cfg.protocol.seeds` at each grid point.
pub fn sweep(
    cfg: &ExperimentConfig,
    data: &LabeledImageSet,
    axis: SweepAxis,
    grid: &[f64],
) -> Result<Vec<EvalReport>> {
    if grid.is_empty() {
        return Err(invalid("sweep grid must not be empty"));
    }
    grid.iter()
        .map(|&v| {
            let c = apply_axis(cfg, axis, v)?;
            let aurocs = c
                .protocol
                .seeds
                .par_iter()
                .map(|&s| run_protocol(&c, data, s).map(|o| o.auroc))
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalReport::from_aurocs(Some(axis), Some(v), c.protocol.seeds.clone(), aurocs))
        })
        .collect()
}
