//! Slice-level forward/backward kernels. Shapes are validated by the caller.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Result};
use crate::real::Real;

/// Row-major `c (+)= a[m,k] @ b[k,n]`, optionally reading `a` or `b` transposed
/// from their stored layout (`a` stored as `[k,m]`, `b` stored as `[n,k]`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::ONE } else { T::ZERO };
    // SAFETY: the slices cover exactly the extents implied by (m, k, n) and
    // the strides above; `c` is uniquely borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Block layout of a broadcast batched matmul.
#[derive(Debug, Clone, PartialEq)]
pub struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// `(a_block, b_block)` per output batch element.
    pub blocks: Vec<(usize, usize)>,
    /// `b` is a single matrix shared by every batch element of `a`, so the
    /// whole product collapses to one `[batch*m, k] @ [k, n]` gemm.
    pub flat_rhs: bool,
}

pub fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return dim_err("matmul", a, b);
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return dim_err("matmul", a, b);
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let rank = ab.len().max(bb.len());
    let mut out_batch = vec![0usize; rank];
    for i in 0..rank {
        let da = if i + ab.len() >= rank { ab[i + ab.len() - rank] } else { 1 };
        let db = if i + bb.len() >= rank { bb[i + bb.len() - rank] } else { 1 };
        out_batch[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return dim_err("matmul", a, b),
        };
    }
    let batch: usize = out_batch.iter().product();
    let a_strides = broadcast_strides(ab, rank);
    let b_strides = broadcast_strides(bb, rank);
    let mut blocks = Vec::with_capacity(batch);
    let mut idx = vec![0usize; rank];
    for _ in 0..batch {
        let ai: usize = idx.iter().zip(&a_strides).map(|(i, s)| i * s).sum();
        let bi: usize = idx.iter().zip(&b_strides).map(|(i, s)| i * s).sum();
        blocks.push((ai, bi));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let flat_rhs = bb.iter().product::<usize>() == 1;
    let mut out_shape = out_batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        blocks,
        flat_rhs,
    })
}

/// Block strides of `dims` right-aligned into `rank` batch axes; broadcast axes get stride 0.
fn broadcast_strides(dims: &[usize], rank: usize) -> Vec<usize> {
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for (i, &d) in dims.iter().enumerate().rev() {
        let slot = rank - dims.len() + i;
        strides[slot] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

pub fn matmul_forward<T: Real>(plan: &MatmulPlan, a: &[T], b: &[T]) -> Vec<T> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let batch = plan.blocks.len();
    let mut out = vec![T::ZERO; batch * m * n];
    if plan.flat_rhs && a.len() == batch * m * k {
        gemm(batch * m, k, n, a, false, b, false, &mut out, false);
        return out;
    }
    for (o, &(ai, bi)) in plan.blocks.iter().enumerate() {
        gemm(
            m,
            k,
            n,
            &a[ai * m * k..(ai + 1) * m * k],
            false,
            &b[bi * k * n..(bi + 1) * k * n],
            false,
            &mut out[o * m * n..(o + 1) * m * n],
            false,
        );
    }
    out
}

/// Gradient wrt `a`: `dA = dC @ B^T`, summed over broadcast blocks.
pub fn matmul_backward_lhs<T: Real>(plan: &MatmulPlan, g: &[T], b: &[T], a_len: usize) -> Vec<T> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let batch = plan.blocks.len();
    let mut da = vec![T::ZERO; a_len];
    if plan.flat_rhs && a_len == batch * m * k {
        gemm(batch * m, n, k, g, false, b, true, &mut da, false);
        return da;
    }
    for (o, &(ai, bi)) in plan.blocks.iter().enumerate() {
        gemm(
            m,
            n,
            k,
            &g[o * m * n..(o + 1) * m * n],
            false,
            &b[bi * k * n..(bi + 1) * k * n],
            true,
            &mut da[ai * m * k..(ai + 1) * m * k],
            true,
        );
    }
    da
}

/// Gradient wrt `b`: `dB = A^T @ dC`, summed over broadcast blocks.
pub fn matmul_backward_rhs<T: Real>(plan: &MatmulPlan, g: &[T], a: &[T], b_len: usize) -> Vec<T> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let batch = plan.blocks.len();
    let mut db = vec![T::ZERO; b_len];
    if plan.flat_rhs && a.len() == batch * m * k {
        gemm(k, batch * m, n, a, true, g, false, &mut db, false);
        return db;
    }
    for (o, &(ai, bi)) in plan.blocks.iter().enumerate() {
        gemm(
            k,
            m,
            n,
            &a[ai * m * k..(ai + 1) * m * k],
            true,
            &g[o * m * n..(o + 1) * m * n],
            false,
            &mut db[bi * k * n..(bi + 1) * k * n],
            true,
        );
    }
    db
}

/// Per-sample, per-channel "same" cross-correlation.
/// `x: [B, C, H, W]`, `kernels: [B, C, K, K]`, K odd.
pub fn depthwise_conv_forward<T: Real>(
    x: &[T],
    kernels: &[T],
    bc: usize,
    h: usize,
    w: usize,
    ks: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    let pad = ks / 2;
    for p in 0..bc {
        let xs = &x[p * h * w..(p + 1) * h * w];
        let kk = &kernels[p * ks * ks..(p + 1) * ks * ks];
        let os = &mut out[p * h * w..(p + 1) * h * w];
        for u in 0..ks {
            let (i0, i1) = valid_range(u, pad, h);
            for v in 0..ks {
                let kv = kk[u * ks + v];
                let (j0, j1) = valid_range(v, pad, w);
                if j0 >= j1 {
                    continue;
                }
                for i in i0..i1 {
                    let src = (i + u - pad) * w + (j0 + v - pad);
                    let dst = i * w + j0;
                    let len = j1 - j0;
                    for (o, &xv) in os[dst..dst + len].iter_mut().zip(&xs[src..src + len]) {
                        *o += kv * xv;
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dkernels)` for [`depthwise_conv_forward`].
pub fn depthwise_conv_backward<T: Real>(
    g: &[T],
    x: &[T],
    kernels: &[T],
    bc: usize,
    h: usize,
    w: usize,
    ks: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dx = vec![T::ZERO; x.len()];
    let mut dk = vec![T::ZERO; kernels.len()];
    let pad = ks / 2;
    for p in 0..bc {
        let xs = &x[p * h * w..(p + 1) * h * w];
        let gs = &g[p * h * w..(p + 1) * h * w];
        let kk = &kernels[p * ks * ks..(p + 1) * ks * ks];
        let dxs = &mut dx[p * h * w..(p + 1) * h * w];
        let dks = &mut dk[p * ks * ks..(p + 1) * ks * ks];
        for u in 0..ks {
            let (i0, i1) = valid_range(u, pad, h);
            for v in 0..ks {
                let kv = kk[u * ks + v];
                let (j0, j1) = valid_range(v, pad, w);
                if j0 >= j1 {
                    continue;
                }
                let len = j1 - j0;
                let mut acc = T::ZERO;
                for i in i0..i1 {
                    let src = (i + u - pad) * w + (j0 + v - pad);
                    let dst = i * w + j0;
                    let grow = &gs[dst..dst + len];
                    for (d, &gv) in dxs[src..src + len].iter_mut().zip(grow) {
                        *d += kv * gv;
                    }
                    for (&gv, &xv) in grow.iter().zip(&xs[src..src + len]) {
                        acc += gv * xv;
                    }
                }
                dks[u * ks + v] = acc;
            }
        }
    }
    (dx, dk)
}

/// Output rows `i` for which `i + u - pad` lands inside `[0, n)`.
fn valid_range(u: usize, pad: usize, n: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(u);
    let hi = (n + pad).saturating_sub(u).min(n);
    (lo, hi.max(lo))
}

/// LayerNorm over rows of length `d`. Returns `(y, xhat, rstd)`.
pub fn layer_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    d: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    let mut rstd = vec![T::ZERO; rows];
    let inv_d = T::ONE / T::from_usize(d);
    for r in 0..rows {
        let xs = &x[r * d..(r + 1) * d];
        let mean = xs.iter().copied().sum::<T>() * inv_d;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::ONE / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let xh = (xs[i] - mean) * rs;
            xhat[r * d + i] = xh;
            y[r * d + i] = xh * gamma[i] + beta[i];
        }
    }
    (y, xhat, rstd)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Real>(
    g: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = g.len() / d;
    let mut dx = vec![T::ZERO; g.len()];
    let mut dgamma = vec![T::ZERO; d];
    let mut dbeta = vec![T::ZERO; d];
    let inv_d = T::ONE / T::from_usize(d);
    for r in 0..rows {
        let gs = &g[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_gy = T::ZERO;
        let mut mean_gy_xh = T::ZERO;
        for i in 0..d {
            let gy = gs[i] * gamma[i];
            mean_gy += gy;
            mean_gy_xh += gy * xh[i];
            dgamma[i] += gs[i] * xh[i];
            dbeta[i] += gs[i];
        }
        mean_gy *= inv_d;
        mean_gy_xh *= inv_d;
        for i in 0..d {
            let gy = gs[i] * gamma[i];
            dx[r * d + i] = rstd[r] * (gy - mean_gy - xh[i] * mean_gy_xh);
        }
    }
    (dx, dgamma, dbeta)
}

/// Max-subtracted softmax over rows of length `n`.
pub fn softmax_forward<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for (xs, os) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let mx = xs.iter().copied().fold(xs[0], T::max);
        let mut total = T::ZERO;
        for (o, &v) in os.iter_mut().zip(xs) {
            *o = (v - mx).exp();
            total += *o;
        }
        let inv = T::ONE / total;
        os.iter_mut().for_each(|o| *o *= inv);
    }
    out
}

pub fn softmax_backward<T: Real>(g: &[T], y: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::ZERO; g.len()];
    for ((gs, ys), ds) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
        let dot: T = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum();
        for i in 0..n {
            ds[i] = ys[i] * (gs[i] - dot);
        }
    }
    dx
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact-erf GeLU, `0.5 x (1 + erf(x / sqrt 2))`.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(FRAC_1_SQRT_2PI) * (-half * x * x).exp();
    cdf + x * pdf
}

/// Mean cross-entropy over rows; returns `(loss, probs)`.
pub fn cross_entropy_forward<T: Real>(logits: &[T], labels: &[usize], classes: usize) -> (T, Vec<T>) {
    let probs = softmax_forward(logits, classes);
    let mut total = T::ZERO;
    for (row, &label) in logits.chunks_exact(classes).zip(labels) {
        let mx = row.iter().copied().fold(row[0], T::max);
        let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
        total += lse - row[label];
    }
    (total / T::from_usize(labels.len()), probs)
}

/// Copies `src` (shape `shape`) into axis order `perm`.
pub fn permute<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    if rank == 0 {
        out.extend_from_slice(src);
        return out;
    }
    let last = rank - 1;
    let (inner_n, inner_s) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let outer: usize = out_shape[..last].iter().product();
    for _ in 0..outer {
        let base: usize = idx[..last].iter().zip(&strides[..last]).map(|(i, s)| i * s).sum();
        if inner_s == 1 {
            out.extend_from_slice(&src[base..base + inner_n]);
        } else {
            out.extend((0..inner_n).map(|j| src[base + j * inner_s]));
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
