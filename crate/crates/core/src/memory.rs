//! Modern Hopfield memory layers.
//!
//! A memory stores `N` prototypes as the columns of `X ∈ R^{d×N}`. A query
//! row `ξ` is refined by `ξ ← softmax(β ξ X) Xᵀ` until the largest
//! coordinate change falls below `tol` or `max_iters` updates have run.
//! Rows are tracked independently: a row stops updating as soon as it
//! converges, so the result for a row never depends on the rest of the
//! batch.

use anomem_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{MemoryConfig, MemoryInit};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct HopfieldMemory {
    weights: Tensor,
    pub beta: f64,
    pub tol: f64,
    pub max_iters: usize,
}

/// Outcome of one retrieval, per query row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalTrace {
    /// Updates applied to each row.
    pub iterations: Vec<usize>,
    /// Whether each row met the tolerance before the iteration cap.
    pub converged: Vec<bool>,
}

impl HopfieldMemory {
    pub fn new(weights: Tensor, beta: f64, tol: f64, max_iters: usize) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(invalid(format!("memory weights must be d×N, got {:?}", weights.shape())));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid(format!("beta must be positive, got {beta}")));
        }
        if !(tol > 0.0) || max_iters == 0 {
            return Err(invalid("tol must be positive and max_iters at least 1"));
        }
        if !weights.is_finite() {
            return Err(invalid("memory weights must be finite"));
        }
        Ok(Self {
            weights,
            beta,
            tol,
            max_iters,
        })
    }

    /// Random prototypes of unit norm.
    pub fn init(d: usize, n: usize, cfg: &MemoryConfig, rng: &mut impl Rng) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(invalid("memory needs d >= 1 and N >= 1"));
        }
        let draw = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
            loop {
                let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    return v.into_iter().map(|x| x * cfg.init_scale / norm).collect();
                }
            }
        };
        let columns: Vec<Vec<f64>> = match cfg.init {
            MemoryInit::UnitSphere => (0..n).map(|_| draw(rng)).collect(),
            MemoryInit::Repeated => vec![draw(rng); n],
        };
        let mut w = vec![0.0; d * n];
        for (j, col) in columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                w[i * n + j] = *v;
            }
        }
        Self::new(Tensor::new([d, n], w)?, cfg.beta, cfg.tol, cfg.max_iters)
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn set_weights(&mut self, w: Tensor) -> Result<()> {
        if w.shape() != self.weights.shape() {
            return Err(invalid(format!(
                "memory weights shape {:?} does not match {:?}",
                w.shape(),
                self.weights.shape()
            )));
        }
        self.weights = w;
        Ok(())
    }

    /// Prototype `j` (column `j` of `X`).
    pub fn prototype(&self, j: usize) -> Vec<f64> {
        let n = self.size();
        (0..self.dim()).map(|i| self.weights.data()[i * n + j]).collect()
    }

    pub fn prototype_norms(&self) -> Vec<f64> {
        (0..self.size())
            .map(|j| self.prototype(j).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    fn pairwise_distances(&self) -> Vec<f64> {
        let protos: Vec<Vec<f64>> = (0..self.size()).map(|j| self.prototype(j)).collect();
        let mut out = Vec::new();
        for a in 0..protos.len() {
            for b in a + 1..protos.len() {
                let d2: f64 = protos[a].iter().zip(&protos[b]).map(|(x, y)| (x - y).powi(2)).sum();
                out.push(d2.sqrt());
            }
        }
        out
    }

    /// Smallest Euclidean distance between two prototypes; `None` when
    /// `N = 1`.
    pub fn min_pairwise_distance(&self) -> Option<f64> {
        self.pairwise_distances().into_iter().reduce(f64::min)
    }

    pub fn max_pairwise_distance(&self) -> Option<f64> {
        self.pairwise_distances().into_iter().reduce(f64::max)
    }

    /// Records the weights on `tape`, as a parameter when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<BoundMemory<'t>> {
        let x = if trainable {
            tape.param(self.weights.clone())
        } else {
            tape.constant(self.weights.clone())
        };
        BoundMemory::new(x, self.beta, self.tol, self.max_iters)
    }

    /// Retrieval on plain values, `[B×d]` in and out.
    pub fn retrieve(&self, query: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let mem = self.bind(&tape, false)?;
        let q = tape.constant(query.clone());
        Ok((*mem.retrieve(&q)?.value()).clone())
    }

    /// One update `softmax(β ξ X) Xᵀ` on plain values.
    pub fn update(&self, query: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let mem = self.bind(&tape, false)?;
        let q = tape.constant(query.clone());
        Ok((*mem.step(&q)?.value()).clone())
    }
}

/// A memory whose weights live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundMemory<'t> {
    pub x: Var<'t>,
    xt: Var<'t>,
    pub beta: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl<'t> BoundMemory<'t> {
    pub fn new(x: Var<'t>, beta: f64, tol: f64, max_iters: usize) -> Result<Self> {
        let xt = x.transpose()?;
        Ok(Self {
            x,
            xt,
            beta,
            tol,
            max_iters,
        })
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[0]
    }

    fn check_query(&self, q: &Var<'t>) -> Result<()> {
        let s = q.shape();
        if s.len() != 2 || s[1] != self.dim() {
            return Err(anomem_autodiff::TensorError::Dimension {
                op: "retrieve",
                msg: format!("query {s:?} against memory dim {}", self.dim()),
            }
            .into());
        }
        Ok(())
    }

    /// A single Hopfield update of every row.
    pub fn step(&self, q: &Var<'t>) -> Result<Var<'t>> {
        self.check_query(q)?;
        let attn = q.matmul(&self.x)?.scale(self.beta)?.softmax(1)?;
        Ok(attn.matmul(&self.xt)?)
    }

    pub fn retrieve(&self, q: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.retrieve_traced(q)?.0)
    }

    pub fn retrieve_traced(&self, q: &Var<'t>) -> Result<(Var<'t>, RetrievalTrace)> {
        self.check_query(q)?;
        let rows = q.shape()[0];
        let mut xi = *q;
        let mut active: Vec<usize> = (0..rows).collect();
        let mut trace = RetrievalTrace {
            iterations: vec![0; rows],
            converged: vec![false; rows],
        };
        for _ in 0..self.max_iters {
            let current = if active.len() == rows { xi } else { xi.gather_rows(&active)? };
            let next = self.step(&current)?;
            let (cv, nv) = (current.value(), next.value());
            let d = self.dim();
            let mut still = Vec::with_capacity(active.len());
            for (k, &r) in active.iter().enumerate() {
                trace.iterations[r] += 1;
                let change = cv.data()[k * d..(k + 1) * d]
                    .iter()
                    .zip(&nv.data()[k * d..(k + 1) * d])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if change < self.tol {
                    trace.converged[r] = true;
                } else {
                    still.push(r);
                }
            }
            xi = if active.len() == rows {
                next
            } else {
                let mut map: Vec<usize> = (0..rows).collect();
                for (k, &r) in active.iter().enumerate() {
                    map[r] = rows + k;
                }
                Var::concat_rows(&[xi, next])?.gather_rows(&map)?
            };
            active = still;
            if active.is_empty() {
                break;
            }
        }
        Ok((xi, trace))
    }

    /// `y·HF(z) + (1−y)·z` row by row; labels must be 0 or 1.
    pub fn gate(&self, z: &Var<'t>, y: &[u8]) -> Result<Var<'t>> {
        self.check_query(z)?;
        let rows = z.shape()[0];
        if y.len() != rows {
            return Err(invalid(format!("{} labels for {rows} rows", y.len())));
        }
        if let Some(bad) = y.iter().find(|&&v| v > 1) {
            return Err(invalid(format!("label {bad} outside {{0,1}}")));
        }
        let normal: Vec<usize> = (0..rows).filter(|&r| y[r] == 1).collect();
        if normal.is_empty() {
            return Ok(*z);
        }
        if normal.len() == rows {
            return self.retrieve(z);
        }
        let recalled = self.retrieve(&z.gather_rows(&normal)?)?;
        let mut map: Vec<usize> = (0..rows).collect();
        for (k, &r) in normal.iter().enumerate() {
            map[r] = rows + k;
        }
        Ok(Var::concat_rows(&[*z, recalled])?.gather_rows(&map)?)
    }

    /// Retrieval applied to every depth vector of a `[H×W×C]` or
    /// `[B×H×W×C]` map.
    pub fn spatial(&self, map: &Var<'t>) -> Result<Var<'t>> {
        let shape = map.shape();
        let c = *shape.last().unwrap();
        if !(shape.len() == 3 || shape.len() == 4) || c != self.dim() {
            return Err(anomem_autodiff::TensorError::Dimension {
                op: "spatial_retrieve",
                msg: format!("map {shape:?} against memory dim {}", self.dim()),
            }
            .into());
        }
        let n: usize = shape[..shape.len() - 1].iter().product();
        let flat = map.reshape([n, c])?;
        Ok(self.retrieve(&flat)?.reshape(shape)?)
    }
}
