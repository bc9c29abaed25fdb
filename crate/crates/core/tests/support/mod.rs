//! Independent reference implementations and finite-difference cases
//! shared by the integration tests.
#![allow(dead_code)]

use anomem::autodiff::gradcheck::{numeric_gradient, relative_error};
use anomem::losses::{
    loss_com, loss_com_ms, loss_dist_terms, loss_sup, loss_variance, nt_xent, MsOptions, ScaleTerm,
};
use anomem::{BoundMemory, Tape, Tensor, Var, VarianceMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random labels with at least `normals` ones and `anomalies` zeros.
pub fn labels(rng: &mut ChaCha8Rng, n: usize, normals: usize, anomalies: usize) -> Vec<u8> {
    loop {
        let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let ones = y.iter().filter(|&&v| v == 1).count();
        if ones >= normals && n - ones >= anomalies {
            return y;
        }
    }
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

pub fn unit(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    a.iter().map(|v| v / n).collect()
}

// ---------------------------------------------------------------------------
// Brute-force losses, written directly from the formulas with plain loops.

pub fn nt_xent_bf(anchor: &[f64], positive: &[f64], pool: &[Vec<f64>], tau: f64) -> f64 {
    let num = (cosine(anchor, positive) / tau).exp();
    let den: f64 = pool.iter().map(|p| (cosine(anchor, p) / tau).exp()).sum();
    -(num / den).ln()
}

pub fn loss_com_bf(za: &[Vec<f64>], zb: &[Vec<f64>], tau: f64) -> f64 {
    let b = za.len();
    let all: Vec<&Vec<f64>> = za.iter().chain(zb.iter()).collect();
    let mut total = 0.0;
    for k in 0..b {
        for (anchor_idx, pos_idx) in [(k, b + k), (b + k, k)] {
            let pool: Vec<Vec<f64>> = (0..2 * b).filter(|&j| j != anchor_idx).map(|j| all[j].clone()).collect();
            total += nt_xent_bf(all[anchor_idx], all[pos_idx], &pool, tau);
        }
    }
    total / (2 * b) as f64
}

/// One update with prototypes given as a list.
pub fn hopfield_step_bf(protos: &[Vec<f64>], beta: f64, q: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = protos.iter().map(|p| beta * dot(q, p)).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    let mut out = vec![0.0; q.len()];
    for (p, wi) in protos.iter().zip(&w) {
        for (o, v) in out.iter_mut().zip(p) {
            *o += wi / s * v;
        }
    }
    out
}

pub fn retrieve_bf(protos: &[Vec<f64>], beta: f64, tol: f64, max_iters: usize, q: &[f64]) -> Vec<f64> {
    let mut xi = q.to_vec();
    for _ in 0..max_iters {
        let next = hopfield_step_bf(protos, beta, &xi);
        let change = xi.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        xi = next;
        if change < tol {
            break;
        }
    }
    xi
}

/// Prototypes are the columns of a `[d×N]` matrix.
pub fn columns(x: &Tensor) -> Vec<Vec<f64>> {
    let (d, n) = (x.shape()[0], x.shape()[1]);
    (0..n).map(|j| (0..d).map(|i| x.data()[i * n + j]).collect()).collect()
}

fn pop_var(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

pub fn loss_variance_bf(z: &[Vec<f64>], y: &[u8], mode: VarianceMode) -> f64 {
    let normal: Vec<&Vec<f64>> = z.iter().zip(y).filter(|(_, &l)| l == 1).map(|(r, _)| r).collect();
    if normal.is_empty() {
        return 0.0;
    }
    match mode {
        VarianceMode::PerSample => -normal.iter().map(|r| pop_var(r).sqrt()).sum::<f64>() / normal.len() as f64,
        VarianceMode::Batch => {
            let d = normal[0].len();
            -(0..d)
                .map(|j| pop_var(&normal.iter().map(|r| r[j]).collect::<Vec<_>>()).sqrt())
                .sum::<f64>()
                / d as f64
        }
    }
}

pub struct BfScale {
    /// `[B×H×W×C]` or `[B×D]`.
    pub za: Tensor,
    pub zb: Tensor,
    /// Prototype matrix `[d×N]`, or no memory.
    pub memory: Option<Tensor>,
    pub weight: f64,
}

pub struct BfMemoryParams {
    pub beta: f64,
    pub tol: f64,
    pub max_iters: usize,
}

/// Multi-scale loss with every position sampled, summed term by term.
pub fn loss_com_ms_bf(
    scales: &[BfScale],
    y: &[u8],
    tau: f64,
    lambda_v: f64,
    mode: VarianceMode,
    normalize: bool,
    mem: &BfMemoryParams,
) -> f64 {
    let b = y.len();
    let mut total = 0.0;
    let mut count = 0;
    for sc in scales {
        let shape = sc.za.shape();
        let (positions, c) = if shape.len() == 2 { (1, shape[1]) } else { (shape[1] * shape[2], shape[3]) };
        let at = |t: &Tensor, k: usize, p: usize| -> Vec<f64> {
            let start = (k * positions + p) * c;
            let v = t.data()[start..start + c].to_vec();
            if normalize {
                unit(&v)
            } else {
                v
            }
        };
        for p in 0..positions {
            let mut a: Vec<Vec<f64>> = (0..b).map(|k| at(&sc.za, k, p)).collect();
            let bb: Vec<Vec<f64>> = (0..b).map(|k| at(&sc.zb, k, p)).collect();
            let mut term = 0.0;
            if let Some(x) = &sc.memory {
                let protos = columns(x);
                for k in 0..b {
                    if y[k] == 1 {
                        a[k] = retrieve_bf(&protos, mem.beta, mem.tol, mem.max_iters, &a[k]);
                    }
                }
                term += lambda_v * loss_variance_bf(&a, y, mode);
            }
            term += loss_com_bf(&a, &bb, tau);
            total += sc.weight * term;
            count += 1;
        }
    }
    total / count as f64
}

// ---------------------------------------------------------------------------
// Finite-difference cases.

/// Largest relative error between tape gradients and central differences
/// (h = 1e-5) over all `inputs`, for the scalar built by `f`.
pub fn gradient_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        let numeric = numeric_gradient(
            |x| {
                let tape = Tape::new();
                let vs: Vec<Var<'_>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.constant(if j == i { x.clone() } else { t.clone() }))
                    .collect();
                f(&tape, &vs).item()
            },
            &inputs[i],
            1e-5,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Tolerance so small that retrieval always runs exactly `max_iters`
/// updates, which keeps the unrolled graph fixed under perturbation.
pub const NEVER_CONVERGE: f64 = 1e-300;

pub const LOSS_CASES: &[&str] = &[
    "nt_xent",
    "loss_com",
    "loss_variance_per_sample",
    "loss_variance_batch",
    "loss_com_ms",
    "loss_dist",
    "loss_sup",
    "hopfield_retrieve",
    "mem_gate",
];

fn hinge_distances(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Tensor {
    let v = (0..n)
        .map(|_| loop {
            let d: f64 = rng.random_range(0.05..3.5);
            if (d - 1.0 / margin).abs() > 0.02 && (d - margin).abs() > 0.02 {
                break d;
            }
        })
        .collect();
    Tensor::from_vec(v)
}

pub fn loss_gradient_case(name: &str, seed: u64) -> f64 {
    let mut r = rng(seed.wrapping_mul(7919).wrapping_add(name.len() as u64));
    match name {
        "nt_xent" => {
            let a = uniform(&mut r, &[1, 4], -1.0, 1.0);
            let pool = uniform(&mut r, &[3, 4], -1.0, 1.0);
            gradient_error(&[a, pool], |_, v| nt_xent(&v[0], &v[1], 1, 0.5).unwrap())
        }
        "loss_com" => {
            let za = uniform(&mut r, &[3, 4], -1.0, 1.0);
            let zb = uniform(&mut r, &[3, 4], -1.0, 1.0);
            gradient_error(&[za, zb], |_, v| loss_com(&v[0], &v[1], 0.5).unwrap())
        }
        "loss_variance_per_sample" | "loss_variance_batch" => {
            let mode = if name.ends_with("batch") { VarianceMode::Batch } else { VarianceMode::PerSample };
            let z = uniform(&mut r, &[5, 4], -1.0, 1.0);
            let y = labels(&mut r, 5, 2, 1);
            gradient_error(&[z], |_, v| loss_variance(&v[0], &y, mode).unwrap())
        }
        "loss_com_ms" => {
            let b = 3;
            let za1 = uniform(&mut r, &[b, 2, 2, 3], -1.0, 1.0);
            let zb1 = uniform(&mut r, &[b, 2, 2, 3], -1.0, 1.0);
            let za2 = uniform(&mut r, &[b, 4], -1.0, 1.0);
            let zb2 = uniform(&mut r, &[b, 4], -1.0, 1.0);
            let x1 = uniform(&mut r, &[3, 4], -1.0, 1.0);
            let x2 = uniform(&mut r, &[4, 3], -1.0, 1.0);
            let y = labels(&mut r, b, 1, 1);
            let opt = MsOptions {
                tau: 0.5,
                lambda_v: 0.3,
                variance_mode: VarianceMode::PerSample,
                normalize_before_memory: false,
            };
            gradient_error(&[za1, zb1, za2, zb2, x1, x2], |_, v| {
                let m1 = BoundMemory::new(v[4], 1.0, NEVER_CONVERGE, 2).unwrap();
                let m2 = BoundMemory::new(v[5], 1.0, NEVER_CONVERGE, 2).unwrap();
                let scales = [
                    ScaleTerm { za: v[0], zb: v[1], memory: Some(m1), weight: 1.0, positions: vec![0, 1, 2, 3] },
                    ScaleTerm { za: v[2], zb: v[3], memory: Some(m2), weight: 2.0, positions: vec![] },
                ];
                loss_com_ms(&scales, &y, &opt).unwrap().total
            })
        }
        "loss_dist" => {
            let d = hinge_distances(&mut r, 6, 2.0);
            let y = labels(&mut r, 6, 1, 1);
            gradient_error(&[d], |_, v| loss_dist_terms(&v[0], &y, 2.0).unwrap().sum().unwrap())
        }
        "loss_sup" => {
            let d1 = hinge_distances(&mut r, 4, 2.0);
            let d2 = hinge_distances(&mut r, 4, 2.0);
            let y = labels(&mut r, 4, 1, 1);
            gradient_error(&[d1, d2], |_, v| loss_sup(&v[..2], &y, 2.0).unwrap())
        }
        "hopfield_retrieve" => {
            let x = uniform(&mut r, &[3, 4], -1.0, 1.0);
            let q = uniform(&mut r, &[2, 3], -1.0, 1.0);
            let w = uniform(&mut r, &[2, 3], -1.0, 1.0);
            gradient_error(&[x, q], |tape, v| {
                let m = BoundMemory::new(v[0], 2.0, NEVER_CONVERGE, 2).unwrap();
                let out = m.retrieve(&v[1]).unwrap();
                out.mul(&tape.constant(w.clone())).unwrap().sum().unwrap()
            })
        }
        "mem_gate" => {
            let x = uniform(&mut r, &[3, 4], -1.0, 1.0);
            let z = uniform(&mut r, &[4, 3], -1.0, 1.0);
            let w = uniform(&mut r, &[4, 3], -1.0, 1.0);
            let y = labels(&mut r, 4, 1, 1);
            gradient_error(&[x, z], |tape, v| {
                let m = BoundMemory::new(v[0], 2.0, NEVER_CONVERGE, 3).unwrap();
                let out = m.gate(&v[1], &y).unwrap();
                out.mul(&tape.constant(w.clone())).unwrap().sum().unwrap()
            })
        }
        other => panic!("unknown loss case {other}"),
    }
}

// ---------------------------------------------------------------------------
// Oracle comparisons used by the equivalence criterion.

/// Largest |implementation − brute force| over a batch of random cases for
/// nt_xent, loss_com and loss_com_ms with full sampling.
pub fn oracle_gap(seed: u64) -> [f64; 3] {
    let mut r = rng(seed);
    let b = r.random_range(1..=4);
    let d = r.random_range(2..=5);
    let tau = r.random_range(0.1..1.0);

    let anchor = uniform(&mut r, &[1, d], -1.0, 1.0);
    let p = r.random_range(1..=2 * b);
    let pool = uniform(&mut r, &[p, d], -1.0, 1.0);
    let pos = r.random_range(0..p);
    let tape = Tape::new();
    let got = nt_xent(&tape.constant(anchor.clone()), &tape.constant(pool.clone()), pos, tau)
        .unwrap()
        .item();
    let pr = rows(&pool);
    let want = nt_xent_bf(anchor.data(), &pr[pos], &pr, tau);
    let g1 = (got - want).abs();

    let za = uniform(&mut r, &[b, d], -1.0, 1.0);
    let zb = uniform(&mut r, &[b, d], -1.0, 1.0);
    let got = loss_com(&tape.constant(za.clone()), &tape.constant(zb.clone()), tau).unwrap().item();
    let g2 = (got - loss_com_bf(&rows(&za), &rows(&zb), tau)).abs();

    let s = r.random_range(1..=2);
    let y = labels(&mut r, b, 1, 0);
    let (h, w, c) = (r.random_range(1..=2), r.random_range(1..=2), r.random_range(2..=4));
    let mem = BfMemoryParams { beta: r.random_range(0.5..3.0), tol: 1e-4, max_iters: 16 };
    let mut bf = Vec::new();
    let map_shape = [b, h, w, c];
    for k in 0..s {
        let last = k + 1 == s;
        let (za, zb) = if last {
            (uniform(&mut r, &[b, d], -1.0, 1.0), uniform(&mut r, &[b, d], -1.0, 1.0))
        } else {
            (uniform(&mut r, &map_shape, -1.0, 1.0), uniform(&mut r, &map_shape, -1.0, 1.0))
        };
        let width = if last { d } else { c };
        let n = r.random_range(1..=4);
        bf.push(BfScale {
            za,
            zb,
            memory: Some(uniform(&mut r, &[width, n], -1.5, 1.5)),
            weight: 2f64.powi(k),
        });
    }
    let mode = if r.random_bool(0.5) { VarianceMode::PerSample } else { VarianceMode::Batch };
    let lambda_v = 0.05;
    let opt = MsOptions { tau, lambda_v, variance_mode: mode, normalize_before_memory: false };
    let terms: Vec<ScaleTerm<'_>> = bf
        .iter()
        .map(|sc| {
            let x = tape.constant(sc.memory.clone().unwrap());
            let positions = if sc.za.rank() == 4 { (0..h * w).collect() } else { vec![] };
            ScaleTerm {
                za: tape.constant(sc.za.clone()),
                zb: tape.constant(sc.zb.clone()),
                memory: Some(BoundMemory::new(x, mem.beta, mem.tol, mem.max_iters).unwrap()),
                weight: sc.weight,
                positions,
            }
        })
        .collect();
    let got = loss_com_ms(&terms, &y, &opt).unwrap().total.item();
    let want = loss_com_ms_bf(&bf, &y, tau, lambda_v, mode, false, &mem);
    [g1, g2, (got - want).abs()]
}

// ---------------------------------------------------------------------------
// Metric oracle.

/// Fraction of (anomaly, normal) pairs ranked correctly, ties counting half.
pub fn auroc_pairs(scores: &[f64], is_anomaly: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if is_anomaly[i] == 1 && is_anomaly[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

// ---------------------------------------------------------------------------
// Hull membership via Lawson–Hanson non-negative least squares.

fn solve_normal(a: &[Vec<f64>], b: &[f64], cols: &[usize]) -> Vec<f64> {
    let k = cols.len();
    let mut m = vec![vec![0.0; k + 1]; k];
    for (r, &i) in cols.iter().enumerate() {
        for (c, &j) in cols.iter().enumerate() {
            m[r][c] = a.iter().map(|row| row[i] * row[j]).sum();
        }
        m[r][k] = a.iter().zip(b).map(|(row, bv)| row[i] * bv).sum();
    }
    for p in 0..k {
        let piv = (p..k).max_by(|&x, &y| m[x][p].abs().total_cmp(&m[y][p].abs())).unwrap();
        m.swap(p, piv);
        for r in 0..k {
            if r != p && m[p][p] != 0.0 {
                let f = m[r][p] / m[p][p];
                for c in p..=k {
                    m[r][c] -= f * m[p][c];
                }
            }
        }
    }
    (0..k).map(|r| if m[r][r] == 0.0 { 0.0 } else { m[r][k] / m[r][r] }).collect()
}

/// Solves `min ‖A x − b‖` subject to `x ≥ 0`; `a` is row-major `m×n`.
pub fn nnls(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = a[0].len();
    let mut x = vec![0.0; n];
    let mut passive: Vec<usize> = Vec::new();
    let eps = 1e-14;
    let residual_grad = |x: &[f64]| -> Vec<f64> {
        let r: Vec<f64> = a.iter().zip(b).map(|(row, bv)| bv - dot(row, x)).collect();
        (0..n).map(|j| a.iter().zip(&r).map(|(row, rv)| row[j] * rv).sum()).collect()
    };
    for _ in 0..(3 * n + 10) {
        let w = residual_grad(&x);
        let Some(j) = (0..n)
            .filter(|j| !passive.contains(j) && w[*j] > eps)
            .max_by(|&p, &q| w[p].total_cmp(&w[q]))
        else {
            break;
        };
        passive.push(j);
        loop {
            let s = solve_normal(a, b, &passive);
            if s.iter().all(|&v| v > 0.0) {
                for (&i, &v) in passive.iter().zip(&s) {
                    x[i] = v;
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (&i, &v) in passive.iter().zip(&s) {
                if v <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - v));
                }
            }
            for (&i, &v) in passive.iter().zip(&s) {
                x[i] += alpha * (v - x[i]);
            }
            passive.retain(|&i| x[i] > eps);
            for i in 0..n {
                if !passive.contains(&i) {
                    x[i] = 0.0;
                }
            }
            if passive.is_empty() {
                break;
            }
        }
    }
    x
}

/// Distance from `point` to the convex hull of `protos`, measured as the
/// residual of the simplex-constrained fit (sum-to-one row appended).
pub fn hull_residual(protos: &[Vec<f64>], point: &[f64]) -> f64 {
    let d = point.len();
    let mut a: Vec<Vec<f64>> = (0..d).map(|i| protos.iter().map(|p| p[i]).collect()).collect();
    a.push(vec![1.0; protos.len()]);
    let mut b = point.to_vec();
    b.push(1.0);
    let w = nnls(&a, &b);
    a.iter().zip(&b).map(|(row, bv)| (dot(row, &w) - bv).powi(2)).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Small pipeline configurations.

/// An 8×8 encoder, small memories and short schedules, for tests that run
/// the full pipeline many times.
pub fn tiny_config(seed: u64) -> anomem::ExperimentConfig {
    use anomem::encoder::StageSpec;
    let mut c = anomem::ExperimentConfig::default();
    c.seed = seed;
    c.encoder = anomem::EncoderSpec {
        height: 8,
        width: 8,
        channels: 3,
        stages: vec![StageSpec { widths: vec![8], stride: 2 }, StageSpec { widths: vec![16], stride: 2 }],
        input_mean: 0.5,
        input_std: 0.25,
    };
    c.data.height = 8;
    c.data.width = 8;
    c.data.per_class = 60;
    c.memory.sizes = vec![8, 8];
    c.loss.ratios = vec![0.5, 1.0];
    c.optim.epochs = 2;
    c.optim.batch_size = 16;
    c.stage2.epochs = 5;
    c.stage2.batch_size = 16;
    c.stage2.hidden = 8;
    c.protocol.train_normals = Some(32);
    c.protocol.test_per_class = 10;
    c.protocol.seeds = vec![0, 1];
    c
}
