//! Independent reference implementations for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Plain triple loop, `a: [m, k]`, `b: [k, n]`.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Six nested loops: per sample, per channel, per output pixel, per tap.
pub fn naive_depthwise(x: &[f64], k: &[f64], b: usize, c: usize, h: usize, w: usize, ks: usize) -> Vec<f64> {
    let pad = (ks as isize - 1) / 2;
    let mut out = vec![0.0; b * c * h * w];
    for s in 0..b {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for u in 0..ks {
                        for v in 0..ks {
                            let yi = i as isize + u as isize - pad;
                            let xj = j as isize + v as isize - pad;
                            if yi < 0 || xj < 0 || yi >= h as isize || xj >= w as isize {
                                continue;
                            }
                            acc += k[((s * c + ch) * ks + u) * ks + v]
                                * x[((s * c + ch) * h + yi as usize) * w + xj as usize];
                        }
                    }
                    out[((s * c + ch) * h + i) * w + j] = acc;
                }
            }
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Central difference of `f` at every coordinate of `p`.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, p: &[f64], h: f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|i| {
            let o = q[i];
            q[i] = o + h;
            let a = f(&q);
            q[i] = o - h;
            let b = f(&q);
            q[i] = o;
            (a - b) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs() + 1e-12))
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn naive_layer_norm(x: &[f64], d: usize, eps: f64) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter().map(move |v| (v - mean) * r).collect::<Vec<_>>()
        })
        .collect()
}

/// `x @ w + b` row by row.
pub fn naive_linear(x: &[f64], w: &[f64], b: &[f64], fan_in: usize, fan_out: usize) -> Vec<f64> {
    let rows = x.len() / fan_in;
    let mut y = naive_matmul(x, w, rows, fan_in, fan_out);
    for r in 0..rows {
        for j in 0..fan_out {
            y[r * fan_out + j] += b[j];
        }
    }
    y
}

/// Overwrites every parameter of the store with uniform noise in `[-scale, scale)`.
pub fn randomize<T: icon_peft_core::Real>(store: &mut icon_peft_core::params::ParamStore<T>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.registry().ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = T::from_f64(r.random_range(-scale..scale));
        }
    }
}

pub fn bits<T: icon_peft_core::Real>(v: &[T]) -> Vec<u64> {
    v.iter().map(|x| x.to_f64().to_bits()).collect()
}
