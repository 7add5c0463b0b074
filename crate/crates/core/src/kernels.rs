//! Slice-level forward and backward kernels shared by traced and untraced paths.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    F::gemm(m, k, n, F::one(), a, (k, 1), b, (n, 1), F::zero(), &mut c, (n, 1));
    c
}

/// `x[rows×din] · w[dout×din]ᵀ`.
pub(crate) fn linear<F: Scalar>(x: &[F], w: &[F], rows: usize, din: usize, dout: usize) -> Vec<F> {
    let mut y = vec![F::zero(); rows * dout];
    F::gemm(rows, din, dout, F::one(), x, (din, 1), w, (1, din), F::zero(), &mut y, (dout, 1));
    y
}

/// Gradients of `linear`: returns `(dx, dw)`, each only when requested.
pub(crate) fn linear_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    gy: &[F],
    rows: usize,
    din: usize,
    dout: usize,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>) {
    let dx = want_x.then(|| {
        let mut dx = vec![F::zero(); rows * din];
        F::gemm(rows, dout, din, F::one(), gy, (dout, 1), w, (din, 1), F::zero(), &mut dx, (din, 1));
        dx
    });
    let dw = want_w.then(|| {
        let mut dw = vec![F::zero(); dout * din];
        F::gemm(dout, rows, din, F::one(), gy, (1, dout), x, (din, 1), F::zero(), &mut dw, (din, 1));
        dw
    });
    (dx, dw)
}

pub(crate) fn softmax_rows<F: Scalar>(x: &[F], rows: usize, n: usize) -> Vec<F> {
    let mut out = x.to_vec();
    for r in 0..rows {
        softmax_in_place(&mut out[r * n..(r + 1) * n]);
    }
    out
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
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

/// Softmax backward given the forward output `y`.
pub(crate) fn softmax_backward<F: Scalar>(y: &[F], gy: &[F], rows: usize, n: usize) -> Vec<F> {
    let mut gx = vec![F::zero(); rows * n];
    for r in 0..rows {
        let ys = &y[r * n..(r + 1) * n];
        let gs = &gy[r * n..(r + 1) * n];
        let dot: F = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        for j in 0..n {
            gx[r * n + j] = ys[j] * (gs[j] - dot);
        }
    }
    gx
}

/// Returns the normalized output and the per-row inverse RMS.
pub(crate) fn rms_norm<F: Scalar>(x: &[F], w: &[F], rows: usize, d: usize, eps: F) -> (Vec<F>, Vec<F>) {
    let mut out = vec![F::zero(); rows * d];
    let mut inv = vec![F::zero(); rows];
    let df = F::from_usize(d).unwrap();
    for r in 0..rows {
        let xs = &x[r * d..(r + 1) * d];
        let ms: F = xs.iter().map(|&v| v * v).sum::<F>() / df;
        let denom = (ms + eps).sqrt();
        // zero input with eps = 0 maps to zero output
        let ir = if denom > F::zero() { F::one() / denom } else { F::zero() };
        inv[r] = ir;
        for j in 0..d {
            out[r * d + j] = xs[j] * ir * w[j];
        }
    }
    (out, inv)
}

pub(crate) fn rms_norm_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    inv: &[F],
    gy: &[F],
    rows: usize,
    d: usize,
) -> (Vec<F>, Vec<F>) {
    let mut gx = vec![F::zero(); rows * d];
    let mut gw = vec![F::zero(); d];
    let df = F::from_usize(d).unwrap();
    for r in 0..rows {
        let xs = &x[r * d..(r + 1) * d];
        let gs = &gy[r * d..(r + 1) * d];
        let ir = inv[r];
        // y_j = x_j * ir * w_j ;  d ir / d x_k = -ir^3 x_k / d
        let mut dot = F::zero();
        for j in 0..d {
            gw[j] = gw[j] + gs[j] * xs[j] * ir;
            dot = dot + gs[j] * w[j] * xs[j];
        }
        let coef = ir * ir * ir * dot / df;
        for j in 0..d {
            gx[r * d + j] = gs[j] * w[j] * ir - xs[j] * coef;
        }
    }
    (gx, gw)
}

pub(crate) fn silu<F: Scalar>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

pub(crate) fn silu_grad<F: Scalar>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp());
    s * (F::one() + x * (F::one() - s))
}

/// Rotary tables for positions `start..start + len`, each row `[half]`.
pub(crate) fn rope_tables<F: Scalar>(start: usize, len: usize, head_dim: usize, base: f64) -> (Vec<F>, Vec<F>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(len * half);
    let mut sin = Vec::with_capacity(len * half);
    for p in start..start + len {
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = p as f64 * freq;
            cos.push(F::from_f64_lossy(angle.cos()));
            sin.push(F::from_f64_lossy(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates pairs `(i, i + half)` inside every head. `pos_of_row` gives the
/// table row for each input row; `inverse` applies the transpose rotation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn rope<F: Scalar>(
    x: &[F],
    rows: usize,
    d: usize,
    n_heads: usize,
    cos: &[F],
    sin: &[F],
    pos_of_row: impl Fn(usize) -> usize,
    inverse: bool,
) -> Vec<F> {
    let hd = d / n_heads;
    let half = hd / 2;
    let mut out = x.to_vec();
    for r in 0..rows {
        let p = pos_of_row(r);
        let (c, s) = (&cos[p * half..(p + 1) * half], &sin[p * half..(p + 1) * half]);
        for h in 0..n_heads {
            let base = r * d + h * hd;
            for i in 0..half {
                let a = x[base + i];
                let b = x[base + i + half];
                let sn = if inverse { -s[i] } else { s[i] };
                out[base + i] = a * c[i] - b * sn;
                out[base + i + half] = a * sn + b * c[i];
            }
        }
    }
    out
}

/// Shape bookkeeping for causal multi-head attention.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub n_heads: usize,
    pub d: usize,
    /// Elements between consecutive batch rows in the key/value buffers.
    pub kv_batch_stride: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }
    fn scale<F: Scalar>(&self) -> F {
        F::from_f64_lossy(1.0 / (self.head_dim() as f64).sqrt())
    }
}

/// Causal attention where query `i` sits at absolute position `tk - tq + i`.
/// Returns `(output[B·Tq×d], probs[B×H×Tq×Tk])`.
pub(crate) fn attention<F: Scalar>(q: &[F], k: &[F], v: &[F], dims: AttnDims) -> (Vec<F>, Vec<F>) {
    let AttnDims { batch, tq, tk, n_heads, d, kv_batch_stride } = dims;
    let hd = dims.head_dim();
    let scale: F = dims.scale();
    let offset = tk - tq;
    let mut out = vec![F::zero(); batch * tq * d];
    let mut probs = vec![F::zero(); batch * n_heads * tq * tk];
    for b in 0..batch {
        for h in 0..n_heads {
            let qo = b * tq * d + h * hd;
            let ko = b * kv_batch_stride + h * hd;
            let po = (b * n_heads + h) * tq * tk;
            let p = &mut probs[po..po + tq * tk];
            F::gemm(tq, hd, tk, scale, &q[qo..], (d, 1), &k[ko..], (1, d), F::zero(), p, (tk, 1));
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                for v in row.iter_mut().skip(offset + i + 1) {
                    *v = F::neg_infinity();
                }
                softmax_in_place(row);
            }
            F::gemm(tq, tk, hd, F::one(), p, (tk, 1), &v[ko..], (d, 1), F::zero(), &mut out[qo..], (d, 1));
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)` for contiguous key/value buffers.
pub(crate) fn attention_backward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    gout: &[F],
    dims: AttnDims,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let AttnDims { batch, tq, tk, n_heads, d, kv_batch_stride } = dims;
    let hd = dims.head_dim();
    let scale: F = dims.scale();
    let mut dq = vec![F::zero(); q.len()];
    let mut dk = vec![F::zero(); k.len()];
    let mut dv = vec![F::zero(); v.len()];
    let mut ds = vec![F::zero(); tq * tk];
    for b in 0..batch {
        for h in 0..n_heads {
            let qo = b * tq * d + h * hd;
            let ko = b * kv_batch_stride + h * hd;
            let po = (b * n_heads + h) * tq * tk;
            let p = &probs[po..po + tq * tk];
            // dP = dO · Vᵀ
            F::gemm(tq, hd, tk, F::one(), &gout[qo..], (d, 1), &v[ko..], (1, d), F::zero(), &mut ds, (tk, 1));
            for i in 0..tq {
                let pr = &p[i * tk..(i + 1) * tk];
                let dr = &mut ds[i * tk..(i + 1) * tk];
                let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..tk {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
            }
            F::gemm(tq, tk, hd, scale, &ds, (tk, 1), &k[ko..], (d, 1), F::zero(), &mut dq[qo..], (d, 1));
            F::gemm(tk, tq, hd, scale, &ds, (1, tk), &q[qo..], (d, 1), F::one(), &mut dk[ko..], (d, 1));
            F::gemm(tk, tq, hd, F::one(), p, (1, tk), &gout[qo..], (d, 1), F::one(), &mut dv[ko..], (d, 1));
        }
    }
    (dq, dk, dv)
}

fn check_targets(targets: &[u32], rows: usize, v: usize) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::Dimension(format!(
            "{} targets for {rows} logit rows",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::Index(format!("target {t} outside vocabulary of size {v}")));
    }
    Ok(())
}

/// Mean NLL over selected rows; returns the loss and the softmax probabilities.
pub(crate) fn cross_entropy<F: Scalar>(
    logits: &[F],
    rows: usize,
    v: usize,
    targets: &[u32],
    mask: Option<&[bool]>,
) -> Result<(F, Vec<F>)> {
    check_targets(targets, rows, v)?;
    if let Some(m) = mask {
        if m.len() != rows {
            return Err(Error::Dimension(format!("mask of length {} for {rows} rows", m.len())));
        }
    }
    let probs = softmax_rows(logits, rows, v);
    let mut total = F::zero();
    let mut count = 0usize;
    for r in 0..rows {
        if mask.map_or(true, |m| m[r]) {
            let row = &logits[r * v..(r + 1) * v];
            total = total - log_softmax_at(row, targets[r] as usize);
            count += 1;
        }
    }
    let loss = if count == 0 {
        F::zero()
    } else {
        total / F::from_usize(count).unwrap()
    };
    Ok((loss, probs))
}

/// `log softmax(row)[idx]` via log-sum-exp.
pub(crate) fn log_softmax_at<F: Scalar>(row: &[F], idx: usize) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
    row[idx] - lse
}

/// Per-row log-probabilities of `targets` under `softmax(logits * inv_temp)`.
/// Returns `(logp, probs)`.
pub(crate) fn token_logprobs<F: Scalar>(
    logits: &[F],
    rows: usize,
    v: usize,
    targets: &[u32],
    inv_temp: F,
) -> Result<(Vec<F>, Vec<F>)> {
    check_targets(targets, rows, v)?;
    let scaled: Vec<F> = logits.iter().map(|&x| x * inv_temp).collect();
    let probs = softmax_rows(&scaled, rows, v);
    let lp = (0..rows)
        .map(|r| log_softmax_at(&scaled[r * v..(r + 1) * v], targets[r] as usize))
        .collect();
    Ok((lp, probs))
}
