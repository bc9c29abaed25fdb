//! Training objectives.
//!
//! All losses are built on a tape so they can be differentiated. Feature
//! batches are `[B×d]` with row `k` of branch A paired with row `k` of
//! branch B. Labels use 1 for normal and 0 for anomalous.

use anomem_autodiff::{Tensor, TensorError, Var};
use rand::Rng;

use crate::config::VarianceMode;
use crate::error::{invalid, Result};
use crate::memory::BoundMemory;
use crate::rng::{stream, TAG_POSITIONS};

fn check_labels(y: &[u8], rows: usize) -> Result<()> {
    if y.len() != rows {
        return Err(invalid(format!("{} labels for {rows} rows", y.len())));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(invalid("labels must be 0 or 1"));
    }
    Ok(())
}

fn rows_cols(v: &Var<'_>, op: &'static str) -> Result<(usize, usize)> {
    match v.shape()[..] {
        [r, c] => Ok((r, c)),
        ref s => Err(TensorError::Dimension {
            op,
            msg: format!("rank-2 input expected, got {s:?}"),
        }
        .into()),
    }
}

/// `−log( exp(cos(a,p)/τ) / Σ_{q∈pool} exp(cos(a,q)/τ) )` where `pool` is a
/// `[P×d]` matrix whose row `positive` is the positive. `anchor` is `[1×d]`.
pub fn nt_xent<'t>(anchor: &Var<'t>, pool: &Var<'t>, positive: usize, tau: f64) -> Result<Var<'t>> {
    let (ar, d) = rows_cols(anchor, "nt_xent")?;
    let (p, pd) = rows_cols(pool, "nt_xent")?;
    if ar != 1 || pd != d || positive >= p {
        return Err(invalid("nt_xent needs a 1×d anchor, a P×d pool and a positive index < P"));
    }
    if !(tau > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    let degenerate = |v: &Var<'_>| {
        v.value()
            .data()
            .chunks(d)
            .any(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt() <= anomem_autodiff::NORMALIZE_EPS)
    };
    if degenerate(anchor) || degenerate(pool) {
        return Err(TensorError::Numeric { op: "nt_xent" }.into());
    }
    let a = anchor.l2_normalize(1)?;
    let q = pool.l2_normalize(1)?;
    let logits = a.matmul(&q.transpose()?)?.scale(1.0 / tau)?;
    let logp = logits.log_softmax(1)?;
    Ok(logp.take(&[positive], [1])?.scale(-1.0)?)
}

/// Symmetric two-view NT-Xent averaged over all `2B` anchors. Each anchor's
/// pool is every other row of `[zA; zB]`. Zero rows have zero similarity to
/// everything.
pub fn loss_com<'t>(za: &Var<'t>, zb: &Var<'t>, tau: f64) -> Result<Var<'t>> {
    let (b, d) = rows_cols(za, "loss_com")?;
    if rows_cols(zb, "loss_com")? != (b, d) {
        return Err(invalid("loss_com branches must have equal shapes"));
    }
    if b == 0 {
        return Err(invalid("loss_com needs a non-empty batch"));
    }
    if !(tau > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    let n = 2 * b;
    let z = Var::concat_rows(&[*za, *zb])?.l2_normalize(1)?;
    let sims = z.matmul(&z.transpose()?)?.scale(1.0 / tau)?;
    if n == 2 {
        // Each anchor's pool is just its positive.
        return Ok(sims.sum()?.scale(0.0)?);
    }
    let mut off = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        off.extend((0..n).filter(|&j| j != i).map(|j| i * n + j));
    }
    let logp = sims.take(&off, [n, n - 1])?.log_softmax(1)?;
    let pos: Vec<usize> = (0..n)
        .map(|i| {
            let (j, shifted) = if i < b { (i + b, i + b - 1) } else { (i - b, i - b) };
            debug_assert!(j != i);
            i * (n - 1) + shifted
        })
        .collect();
    Ok(logp.take(&pos, [n])?.mean()?.scale(-1.0)?)
}

/// `−(1/Σy) Σ_k y_k √Var(z_k)` with the variance taken across the feature
/// dimensions of each normal row. In [`VarianceMode::Batch`] the variance
/// is instead taken per dimension across normal rows and the square roots
/// are averaged over dimensions. Returns 0 when the batch has no normals.
pub fn loss_variance<'t>(z_mem: &Var<'t>, y: &[u8], mode: VarianceMode) -> Result<Var<'t>> {
    let (rows, _) = rows_cols(z_mem, "loss_variance")?;
    check_labels(y, rows)?;
    let normal: Vec<usize> = (0..rows).filter(|&k| y[k] == 1).collect();
    if normal.is_empty() {
        log::warn!("variance loss: batch has no normal rows, returning 0");
        return Ok(z_mem.tape().constant(Tensor::scalar(0.0)));
    }
    let zn = if normal.len() == rows { *z_mem } else { z_mem.gather_rows(&normal)? };
    let sd = match mode {
        VarianceMode::PerSample => zn.variance(1)?.sqrt()?,
        VarianceMode::Batch => zn.variance(0)?.sqrt()?,
    };
    Ok(sd.mean()?.scale(-1.0)?)
}

/// Number of positions sampled from an `h×w` map at ratio `r`.
pub fn sample_count(h: usize, w: usize, r: f64) -> Result<usize> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(invalid(format!("sampling ratio {r} outside (0, 1]")));
    }
    // The epsilon keeps products like 10 × 0.3 = 2.9999999999999996 at 3.
    let n = ((h * w) as f64 * r + 1e-9).floor() as usize;
    if n == 0 {
        return Err(invalid(format!("ratio {r} samples no position from a {h}×{w} map")));
    }
    Ok(n.min(h * w))
}

/// `⌊h·w·r⌋` distinct flat positions `i·w + j`, uniform without
/// replacement, in ascending order.
pub fn sample_positions_with(h: usize, w: usize, r: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = sample_count(h, w, r)?;
    let mut idx = rand::seq::index::sample(rng, h * w, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn sample_positions(h: usize, w: usize, r: f64, seed: u64) -> Result<Vec<usize>> {
    sample_positions_with(h, w, r, &mut stream(seed, &[TAG_POSITIONS]))
}

/// One scale's contribution to the multi-scale loss.
pub struct ScaleTerm<'t> {
    /// Branch-A features, `[B×H×W×C]` or `[B×D]` (a single position).
    pub za: Var<'t>,
    pub zb: Var<'t>,
    /// Gate for branch A; `None` skips the gate and the variance term.
    pub memory: Option<BoundMemory<'t>>,
    pub weight: f64,
    /// Sampled flat positions; ignored for `[B×D]` inputs.
    pub positions: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MsOptions {
    pub tau: f64,
    pub lambda_v: f64,
    pub variance_mode: VarianceMode,
    pub normalize_before_memory: bool,
}

pub struct MsLoss<'t> {
    pub total: Var<'t>,
    /// Per scale: sum over sampled positions of the contrastive term.
    pub com: Vec<f64>,
    /// Per scale: sum over sampled positions of the variance term.
    pub var: Vec<f64>,
    /// Total number of sampled positions.
    pub positions: usize,
}

/// Flattens a scale input to `[B·P×C]` rows ordered position-major.
fn rows_at<'t>(z: &Var<'t>, positions: &[usize]) -> Result<(Var<'t>, usize, usize)> {
    let s = z.shape();
    match s.len() {
        2 => Ok((*z, 1, s[1])),
        4 => {
            let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
            if positions.is_empty() || positions.iter().any(|&p| p >= hw) {
                return Err(invalid("sampled positions outside the feature map"));
            }
            let flat = z.reshape([b * hw, c])?;
            let idx: Vec<usize> = positions
                .iter()
                .flat_map(|&p| (0..b).map(move |k| k * hw + p))
                .collect();
            Ok((flat.gather_rows(&idx)?, positions.len(), c))
        }
        _ => Err(invalid(format!("scale features must be [B×D] or [B×H×W×C], got {s:?}"))),
    }
}

/// `(1/Σ|Ω|) Σ_s Σ_{p∈Ω_s} λ_s [L_COM + λ_V·L_V]`.
pub fn loss_com_ms<'t>(scales: &[ScaleTerm<'t>], y: &[u8], opt: &MsOptions) -> Result<MsLoss<'t>> {
    if scales.is_empty() {
        return Err(invalid("multi-scale loss needs at least one scale"));
    }
    let b = scales[0].za.shape()[0];
    check_labels(y, b)?;
    let mut total: Option<Var<'t>> = None;
    let mut com = Vec::new();
    let mut var = Vec::new();
    let mut count = 0;
    for sc in scales {
        if sc.za.shape() != sc.zb.shape() || sc.za.shape()[0] != b {
            return Err(invalid("branch features must agree in shape and batch size"));
        }
        let (mut ra, np, _) = rows_at(&sc.za, &sc.positions)?;
        let (mut rb, _, _) = rows_at(&sc.zb, &sc.positions)?;
        if opt.normalize_before_memory {
            ra = ra.l2_normalize(1)?;
            rb = rb.l2_normalize(1)?;
        }
        let y_all: Vec<u8> = (0..np).flat_map(|_| y.iter().copied()).collect();
        let gated = match &sc.memory {
            Some(m) => m.gate(&ra, &y_all)?,
            None => ra,
        };
        let (mut c_sum, mut v_sum) = (0.0, 0.0);
        let mut scale_total: Option<Var<'t>> = None;
        for p in 0..np {
            let idx: Vec<usize> = (p * b..(p + 1) * b).collect();
            let (ga, gb) = if np == 1 {
                (gated, rb)
            } else {
                (gated.gather_rows(&idx)?, rb.gather_rows(&idx)?)
            };
            let lc = loss_com(&ga, &gb, opt.tau)?;
            c_sum += lc.item();
            let term = if sc.memory.is_some() && opt.lambda_v != 0.0 {
                let lv = loss_variance(&ga, y, opt.variance_mode)?;
                v_sum += lv.item();
                lc.add(&lv.scale(opt.lambda_v)?)?
            } else {
                lc
            };
            scale_total = Some(match scale_total {
                None => term,
                Some(t) => t.add(&term)?,
            });
        }
        let weighted = scale_total.unwrap().scale(sc.weight)?;
        total = Some(match total {
            None => weighted,
            Some(t) => t.add(&weighted)?,
        });
        com.push(c_sum);
        var.push(v_sum);
        count += np;
    }
    Ok(MsLoss {
        total: total.unwrap().scale(1.0 / count as f64)?,
        com,
        var,
        positions: count,
    })
}

/// `y·max(d − 1/M, 0) + (1−y)·max(M − d, 0)` on plain values.
pub fn loss_dist(d: f64, y: u8, margin: f64) -> Result<f64> {
    if !(margin > 0.0) {
        return Err(invalid("margin must be positive"));
    }
    if !(d >= 0.0) {
        return Err(invalid(format!("distance must be non-negative, got {d}")));
    }
    Ok(match y {
        1 => (d - 1.0 / margin).max(0.0),
        0 => (margin - d).max(0.0),
        _ => return Err(invalid("labels must be 0 or 1")),
    })
}

/// Elementwise double-hinge loss for a `[B]` vector of distances.
pub fn loss_dist_terms<'t>(d: &Var<'t>, y: &[u8], margin: f64) -> Result<Var<'t>> {
    if !(margin > 0.0) {
        return Err(invalid("margin must be positive"));
    }
    let dv = d.value();
    if dv.rank() != 1 {
        return Err(invalid("distances must be a vector"));
    }
    check_labels(y, dv.len())?;
    if dv.data().iter().any(|&v| v < 0.0) {
        return Err(invalid("distances must be non-negative"));
    }
    let tape = d.tape();
    let n = dv.len();
    let mask_n = tape.constant(Tensor::from_vec(y.iter().map(|&v| f64::from(v)).collect()));
    let mask_a = tape.constant(Tensor::from_vec(y.iter().map(|&v| 1.0 - f64::from(v)).collect()));
    let inner = tape.constant(Tensor::full([n], 1.0 / margin));
    let outer = tape.constant(Tensor::full([n], margin));
    let normal = d.sub(&inner)?.relu()?.mul(&mask_n)?;
    let anomal = outer.sub(d)?.relu()?.mul(&mask_a)?;
    Ok(normal.add(&anomal)?)
}

/// Mean of the double-hinge loss over every (scale, sample) pair.
/// `distances[s]` is the `[B]` vector of scale `s`.
pub fn loss_sup<'t>(distances: &[Var<'t>], y: &[u8], margin: f64) -> Result<Var<'t>> {
    if distances.is_empty() {
        return Err(invalid("loss_sup needs at least one scale"));
    }
    let mut total: Option<Var<'t>> = None;
    for d in distances {
        let s = loss_dist_terms(d, y, margin)?.sum()?;
        total = Some(match total {
            None => s,
            Some(t) => t.add(&s)?,
        });
    }
    Ok(total
        .unwrap()
        .scale(1.0 / (distances.len() * y.len()) as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use anomem_autodiff::Tape;

    #[test]
    fn hinge_examples() {
        assert_eq!(loss_dist(0.4, 1, 2.0).unwrap(), 0.0);
        assert_eq!(loss_dist(1.5, 1, 2.0).unwrap(), 1.0);
        assert_eq!(loss_dist(3.0, 0, 2.0).unwrap(), 0.0);
        assert!(loss_dist(-0.1, 1, 2.0).is_err());
    }

    #[test]
    fn loss_sup_example() {
        let tape = Tape::new();
        let d1 = tape.constant(Tensor::from_vec(vec![1.5]));
        let d2 = tape.constant(Tensor::from_vec(vec![3.0]));
        let l = loss_sup(&[d1, d2], &[1], 2.0).unwrap();
        assert!((l.item() - 1.75).abs() < 1e-15);
    }

    #[test]
    fn sample_count_floor() {
        assert_eq!(sample_count(8, 8, 0.3).unwrap(), 19);
        assert_eq!(sample_count(10, 1, 0.3).unwrap(), 3);
        assert_eq!(sample_count(4, 4, 1.0).unwrap(), 16);
        assert!(sample_count(2, 2, 0.1).is_err());
    }

    #[test]
    fn variance_example() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::new([1, 2], vec![0.0, 2.0]).unwrap());
        let v = loss_variance(&z, &[1], VarianceMode::PerSample).unwrap();
        assert_eq!(v.item(), -1.0);
        let none = loss_variance(&z, &[0], VarianceMode::PerSample).unwrap();
        assert_eq!(none.item(), 0.0);
    }
}
