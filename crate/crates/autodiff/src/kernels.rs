//! Raw slice kernels shared by the forward and backward rules.

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `c[m×k] = a[m×n] · b[k×n]^T`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = dot(arow, brow);
        }
    }
    c
}

/// `c[k×n] = a[m×k]^T · b[m×n]`.
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociation flags.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Geometry of a same-padded 2-D cross-correlation over `[B×H×W×C]` data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        height: usize,
        width: usize,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let pad = k / 2;
        let out_h = (height + 2 * pad - k) / stride + 1;
        let out_w = (width + 2 * pad - k) / stride + 1;
        Self {
            batch,
            height,
            width,
            c_in,
            c_out,
            k,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.c_in
    }

    pub fn positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfolds input patches into rows ordered `(ky, kx, c_in)`, matching the
/// row-major layout of a `[k×k×C_in×C_out]` kernel.
pub fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.positions() * plen];
    let mut row = 0;
    for b in 0..g.batch {
        let img = &input[b * g.height * g.width * g.c_in..];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = (iy as usize * g.width + ix as usize) * g.c_in;
                        let off = (ky * g.k + kx) * g.c_in;
                        dst[off..off + g.c_in].copy_from_slice(&img[src..src + g.c_in]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let mut out = vec![0.0; g.batch * g.height * g.width * g.c_in];
    let mut row = 0;
    for b in 0..g.batch {
        let base = b * g.height * g.width * g.c_in;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * plen..(row + 1) * plen];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = base + (iy as usize * g.width + ix as usize) * g.c_in;
                        let off = (ky * g.k + kx) * g.c_in;
                        for c in 0..g.c_in {
                            out[dst + c] += src[off + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}
