//! Central finite differences, for checking backward rules.

use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `‖a − b‖₂ / (‖a‖₂ + ‖b‖₂)`, and 0 when both are zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm() + b.norm();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Primitives covered by [`primitive_case`].
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "transpose",
    "conv2d",
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "relu",
    "sqrt",
    "exp",
    "ln",
    "softmax",
    "log_softmax",
    "l2_normalize",
    "sum",
    "mean",
    "sum_axis",
    "mean_axis",
    "variance",
    "average_pool",
    "reshape",
    "gather_rows",
    "take",
    "concat_rows",
];

/// SplitMix64; enough to draw reproducible test inputs without extra deps.
struct Draw(u64);

impl Draw {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn int(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next() % (hi - lo + 1) as u64) as usize
    }

    fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| self.uniform(lo, hi)).collect()).unwrap()
    }

    /// Values bounded away from zero so kinks stay outside the FD stencil.
    fn signed_away_from_zero(&mut self, shape: &[usize]) -> Tensor {
        let mut t = self.tensor(shape, 0.05, 2.0);
        for v in t.data_mut() {
            if self.next() & 1 == 1 {
                *v = -*v;
            }
        }
        t
    }
}

/// Relative error between the backward rule and central differences
/// (`h = 1e-5`) for one seeded random instance of primitive `name`.
///
/// Every input is a trainable leaf and the scalar objective is
/// `sum(w ⊙ op(inputs))` for a random weight tensor `w`.
pub fn primitive_case(name: &str, seed: u64) -> crate::Result<f64> {
    use crate::{Tape, Var};

    let mut d = Draw(seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    let (inputs, build): (Vec<Tensor>, Box<dyn for<'t> Fn(&[Var<'t>]) -> crate::Result<Var<'t>>>) =
        match name {
            "matmul" => {
                let (m, k, n) = (d.int(1, 4), d.int(1, 4), d.int(1, 4));
                (
                    vec![d.tensor(&[m, k], -1.0, 1.0), d.tensor(&[k, n], -1.0, 1.0)],
                    Box::new(|v| v[0].matmul(&v[1])),
                )
            }
            "transpose" => {
                let (r, c) = (d.int(1, 4), d.int(1, 4));
                (vec![d.tensor(&[r, c], -1.0, 1.0)], Box::new(|v| v[0].transpose()))
            }
            "conv2d" => {
                let (h, w) = (d.int(3, 5), d.int(3, 5));
                let (ci, co) = (d.int(1, 3), d.int(1, 3));
                let k = [1, 3][d.int(0, 1)];
                let stride = d.int(1, 2);
                let b = d.int(1, 2);
                (
                    vec![d.tensor(&[b, h, w, ci], -1.0, 1.0), d.tensor(&[k, k, ci, co], -1.0, 1.0)],
                    Box::new(move |v| v[0].conv2d(&v[1], stride)),
                )
            }
            "add" | "sub" | "mul" => {
                let shape = [d.int(1, 3), d.int(1, 4)];
                let name = name.to_owned();
                (
                    vec![d.tensor(&shape, -1.0, 1.0), d.tensor(&shape, -1.0, 1.0)],
                    Box::new(move |v| match name.as_str() {
                        "add" => v[0].add(&v[1]),
                        "sub" => v[0].sub(&v[1]),
                        _ => v[0].mul(&v[1]),
                    }),
                )
            }
            "add_bias" => {
                let c = d.int(1, 4);
                let r = d.int(1, 3);
                (
                    vec![d.tensor(&[r, c], -1.0, 1.0), d.tensor(&[c], -1.0, 1.0)],
                    Box::new(|v| v[0].add_bias(&v[1])),
                )
            }
            "scale" => {
                let c = d.uniform(-2.0, 2.0);
                let n = d.int(1, 5);
                (vec![d.tensor(&[n], -1.0, 1.0)], Box::new(move |v| v[0].scale(c)))
            }
            "relu" => {
                let shape = [d.int(1, 3), d.int(1, 4)];
                (vec![d.signed_away_from_zero(&shape)], Box::new(|v| v[0].relu()))
            }
            "sqrt" | "exp" | "ln" => {
                let n = d.int(1, 6);
                let name = name.to_owned();
                let (lo, hi) = if name == "exp" { (-2.0, 2.0) } else { (0.1, 3.0) };
                (
                    vec![d.tensor(&[n], lo, hi)],
                    Box::new(move |v| match name.as_str() {
                        "sqrt" => v[0].sqrt(),
                        "exp" => v[0].exp(),
                        _ => v[0].ln(),
                    }),
                )
            }
            "softmax" | "log_softmax" | "l2_normalize" | "sum_axis" | "mean_axis" | "variance" => {
                let shape = [d.int(1, 3), d.int(2, 4), d.int(1, 3)];
                let axis = d.int(0, 2);
                let shape = {
                    let mut s = shape;
                    s[axis] = s[axis].max(2);
                    s
                };
                let name = name.to_owned();
                (
                    vec![d.tensor(&shape, -1.5, 1.5)],
                    Box::new(move |v| match name.as_str() {
                        "softmax" => v[0].softmax(axis),
                        "log_softmax" => v[0].log_softmax(axis),
                        "l2_normalize" => v[0].l2_normalize(axis),
                        "sum_axis" => v[0].sum_axis(axis),
                        "mean_axis" => v[0].mean_axis(axis),
                        _ => v[0].variance(axis),
                    }),
                )
            }
            "sum" | "mean" => {
                let shape = [d.int(1, 3), d.int(1, 3)];
                let mean = name == "mean";
                (
                    vec![d.tensor(&shape, -1.0, 1.0)],
                    Box::new(move |v| if mean { v[0].mean() } else { v[0].sum() }),
                )
            }
            "average_pool" => {
                let (wh, ww) = (d.int(1, 2), d.int(1, 2));
                let shape = [d.int(1, 2), wh * d.int(1, 2), ww * d.int(1, 2), d.int(1, 2)];
                (vec![d.tensor(&shape, -1.0, 1.0)], Box::new(move |v| v[0].average_pool(wh, ww)))
            }
            "reshape" => {
                let (r, c) = (d.int(1, 3), d.int(1, 3));
                (vec![d.tensor(&[r, c], -1.0, 1.0)], Box::new(move |v| v[0].reshape([c * r])))
            }
            "gather_rows" => {
                let (rows, cols) = (d.int(1, 4), d.int(1, 3));
                let count = d.int(1, 5);
                let idx: Vec<usize> = (0..count).map(|_| d.int(0, rows - 1)).collect();
                (
                    vec![d.tensor(&[rows, cols], -1.0, 1.0)],
                    Box::new(move |v| v[0].gather_rows(&idx)),
                )
            }
            "take" => {
                let n = d.int(1, 6);
                let count = d.int(1, 5);
                let idx: Vec<usize> = (0..count).map(|_| d.int(0, n - 1)).collect();
                let len = idx.len();
                (vec![d.tensor(&[n], -1.0, 1.0)], Box::new(move |v| v[0].take(&idx, [len])))
            }
            "concat_rows" => {
                let (c, r1, r2) = (d.int(1, 3), d.int(1, 3), d.int(1, 3));
                (
                    vec![d.tensor(&[r1, c], -1.0, 1.0), d.tensor(&[r2, c], -1.0, 1.0)],
                    Box::new(|v| Var::concat_rows(&[v[0], v[1]])),
                )
            }
            other => panic!("unknown primitive {other}"),
        };

    // Weight tensor drawn after the op output shape is known.
    let objective = |xs: &[Tensor], weights: Option<&Tensor>| -> crate::Result<(f64, Tensor)> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&vars)?;
        let w = match weights {
            Some(w) => w.clone(),
            None => Tensor::zeros(out.shape()),
        };
        let val = out.mul(&tape.constant(w))?.sum()?.item();
        Ok((val, (*out.value()).clone()))
    };
    let (_, out0) = objective(&inputs, None)?;
    let w = d.tensor(out0.shape(), -1.0, 1.0);

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = build(&vars)?.mul(&tape.constant(w.clone()))?.sum()?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        let numeric = numeric_gradient(
            |probe| {
                let mut xs = inputs.clone();
                xs[i] = probe.clone();
                objective(&xs, Some(&w)).map(|r| r.0).unwrap_or(f64::NAN)
            },
            &inputs[i],
            1e-5,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
