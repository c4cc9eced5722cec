//! Row-wise kernels with hand-derived backward passes.

use crate::scalar::{matmul_nn, matmul_nt, matmul_tn, Scalar};

use super::params::{LayerNorm, Linear};

/// Saved statistics of a layer norm over `rows × dim`.
#[derive(Debug, Clone)]
pub struct NormCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub fn layer_norm<F: Scalar>(x: &[F], dim: usize, ln: &LayerNorm<F>, eps: F) -> (Vec<F>, NormCache<F>) {
    let rows = x.len() / dim;
    let n = F::from_usize(dim).unwrap();
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rs = (var + eps).sqrt().recip();
        rstd[r] = rs;
        for j in 0..dim {
            let h = (row[j] - mean) * rs;
            xhat[r * dim + j] = h;
            y[r * dim + j] = h * ln.gamma[j] + ln.beta[j];
        }
    }
    (y, NormCache { xhat, rstd })
}

/// Accumulates `dgamma`, `dbeta` into `grad` and returns `dx`.
pub fn layer_norm_backward<F: Scalar>(dy: &[F], dim: usize, ln: &LayerNorm<F>, cache: &NormCache<F>, grad: &mut LayerNorm<F>) -> Vec<F> {
    let rows = dy.len() / dim;
    let n = F::from_usize(dim).unwrap();
    let mut dx = vec![F::zero(); dy.len()];
    let mut dxhat = vec![F::zero(); dim];
    for r in 0..rows {
        let (dyr, xh) = (&dy[r * dim..(r + 1) * dim], &cache.xhat[r * dim..(r + 1) * dim]);
        let mut mean_d = F::zero();
        let mut mean_dx = F::zero();
        for j in 0..dim {
            grad.gamma[j] = grad.gamma[j] + dyr[j] * xh[j];
            grad.beta[j] = grad.beta[j] + dyr[j];
            dxhat[j] = dyr[j] * ln.gamma[j];
            mean_d = mean_d + dxhat[j];
            mean_dx = mean_dx + dxhat[j] * xh[j];
        }
        mean_d = mean_d / n;
        mean_dx = mean_dx / n;
        let rs = cache.rstd[r];
        for j in 0..dim {
            dx[r * dim + j] = rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

pub fn linear<F: Scalar>(x: &[F], l: &Linear<F>) -> Vec<F> {
    let rows = x.len() / l.inp;
    let mut y = Vec::with_capacity(rows * l.out);
    for _ in 0..rows {
        y.extend_from_slice(&l.bias);
    }
    matmul_nt(x, &l.weight, &mut y, rows, l.inp, l.out, true);
    y
}

/// Accumulates weight and bias gradients; returns `dx` when asked.
pub fn linear_backward<F: Scalar>(dy: &[F], x: &[F], l: &Linear<F>, grad: &mut Linear<F>, want_dx: bool) -> Option<Vec<F>> {
    let rows = dy.len() / l.out;
    matmul_tn(dy, x, &mut grad.weight, l.out, rows, l.inp, true);
    for r in 0..rows {
        for (g, &d) in grad.bias.iter_mut().zip(&dy[r * l.out..(r + 1) * l.out]) {
            *g = *g + d;
        }
    }
    want_dx.then(|| {
        let mut dx = vec![F::zero(); rows * l.inp];
        matmul_nn(dy, &l.weight, &mut dx, rows, l.out, l.inp, false);
        dx
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + three * a * x * x)
}

/// In-place numerically stable softmax of one row.
pub fn softmax_row<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Log-sum-exp of one row.
pub fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln()
}

/// Sinusoidal absolute position table, `len × dim`.
pub fn sinusoidal_positions<F: Scalar>(len: usize, dim: usize) -> Vec<F> {
    let mut pe = vec![F::zero(); len * dim];
    for t in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            pe[t * dim + i] = F::from_f64_lossy(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// Copies head `h` (columns `h·dh..(h+1)·dh`) of a `rows × d` matrix.
pub fn take_head<F: Scalar>(x: &[F], rows: usize, d: usize, h: usize, dh: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&x[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

pub fn put_head<F: Scalar>(dst: &mut [F], src: &[F], rows: usize, d: usize, h: usize, dh: usize) {
    for r in 0..rows {
        dst[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

/// Full (unmasked) multi-head attention. Returns the context and the
/// per-head probability matrices (`heads × T × T`).
pub fn attention<F: Scalar>(q: &[F], k: &[F], v: &[F], rows: usize, d: usize, heads: usize) -> (Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::from_usize(dh).unwrap().sqrt().recip();
    let mut ctx = vec![F::zero(); rows * d];
    let mut probs = vec![F::zero(); heads * rows * rows];
    let mut out_h = vec![F::zero(); rows * dh];
    for h in 0..heads {
        let (qh, kh, vh) = (take_head(q, rows, d, h, dh), take_head(k, rows, d, h, dh), take_head(v, rows, d, h, dh));
        let a = &mut probs[h * rows * rows..(h + 1) * rows * rows];
        matmul_nt(&qh, &kh, a, rows, dh, rows, false);
        for row in a.chunks_exact_mut(rows) {
            row.iter_mut().for_each(|s| *s = *s * scale);
            softmax_row(row);
        }
        matmul_nn(a, &vh, &mut out_h, rows, rows, dh, false);
        put_head(&mut ctx, &out_h, rows, d, h, dh);
    }
    (ctx, probs)
}

/// Returns `(dq, dk, dv)` given the context gradient.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<F: Scalar>(
    dctx: &[F],
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    rows: usize,
    d: usize,
    heads: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::from_usize(dh).unwrap().sqrt().recip();
    let (mut dq, mut dk, mut dv) = (vec![F::zero(); rows * d], vec![F::zero(); rows * d], vec![F::zero(); rows * d]);
    let mut ds = vec![F::zero(); rows * rows];
    let mut buf = vec![F::zero(); rows * dh];
    for h in 0..heads {
        let (qh, kh, vh) = (take_head(q, rows, d, h, dh), take_head(k, rows, d, h, dh), take_head(v, rows, d, h, dh));
        let dch = take_head(dctx, rows, d, h, dh);
        let a = &probs[h * rows * rows..(h + 1) * rows * rows];
        // dV = Aᵀ dC
        matmul_tn(a, &dch, &mut buf, rows, rows, dh, false);
        put_head(&mut dv, &buf, rows, d, h, dh);
        // dA = dC Vᵀ, then through the row softmax and the scale.
        matmul_nt(&dch, &vh, &mut ds, rows, dh, rows, false);
        for (drow, arow) in ds.chunks_exact_mut(rows).zip(a.chunks_exact(rows)) {
            let dot = drow.iter().zip(arow).map(|(&g, &p)| g * p).sum::<F>();
            for (g, &p) in drow.iter_mut().zip(arow) {
                *g = p * (*g - dot) * scale;
            }
        }
        matmul_nn(&ds, &kh, &mut buf, rows, rows, dh, false);
        put_head(&mut dq, &buf, rows, d, h, dh);
        matmul_tn(&ds, &qh, &mut buf, rows, rows, dh, false);
        put_head(&mut dk, &buf, rows, d, h, dh);
    }
    (dq, dk, dv)
}
