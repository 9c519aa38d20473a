//! Central finite-difference gradient verification.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Maximum relative error between `analytic` and central differences of `f`
/// over the coordinates in `coords`:
///
/// `|a - n| / (|a| + |n| + 1e-12)`, where `n` is the fourth-order stencil
/// `(8 (f(p + h) - f(p - h)) - (f(p + 2h) - f(p - 2h))) / 12h` along `e_i`.
pub fn finite_diff_check<T, F>(f: F, params: &[T], analytic: &[T], h: f64, coords: &[usize]) -> Result<f64>
where
    T: Real,
    F: FnMut(&[T]) -> Result<T>,
{
    finite_diff_check_floored(f, params, analytic, h, 0.0, coords)
}

/// [`finite_diff_check`] with the denominator held at or above `floor`, so
/// gradients that are structurally zero compare on an absolute scale.
pub fn finite_diff_check_floored<T, F>(
    mut f: F,
    params: &[T],
    analytic: &[T],
    h: f64,
    floor: f64,
    coords: &[usize],
) -> Result<f64>
where
    T: Real,
    F: FnMut(&[T]) -> Result<T>,
{
    if h <= 0.0 {
        return Err(Error::Usage("finite difference step must be positive".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::Dimension {
            op: "finite_diff_check",
            lhs: alloc::vec![params.len()],
            rhs: alloc::vec![analytic.len()],
        });
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe[i];
        let mut at = |offset: f64| -> Result<f64> {
            probe[i] = T::from_f64(orig.to_f64() + offset);
            Ok(f(&probe)?.to_f64())
        };
        let near = at(h)? - at(-h)?;
        let far = at(2.0 * h)? - at(-2.0 * h)?;
        probe[i] = orig;
        let numeric = (8.0 * near - far) / (12.0 * h);
        worst = worst.max(floored_relative_error(analytic[i].to_f64(), numeric, floor));
    }
    Ok(worst)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    floored_relative_error(analytic, numeric, 0.0)
}

/// `|a - n| / max(|a| + |n| + 1e-12, floor)`.
pub fn floored_relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12).max(floor)
}

/// Up to `k` distinct coordinates out of `n`, in ascending order; all of them when `k >= n`.
pub fn sample_coords(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Adds seeded `N(0, std)` noise to every trainable parameter.
///
/// Zero-initialized up-projections otherwise cut the gradient to everything
/// upstream of them, so a check at the raw init would pass vacuously.
pub fn jitter_trainable<T: Real>(store: &mut ParamStore<T>, std: f64, seed: u64) {
    let ids: Vec<_> = store.registry().trainable_ids().collect();
    for id in ids {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id.index() as u64);
        for v in store.get_mut(id).data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = T::from_f64(v.to_f64() + std * z);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Stencil step. Whole-model losses carry ~1e-16 relative rounding, so
    /// much smaller steps swamp coordinates whose gradient is ~1e-7.
    pub h: f64,
    /// Least denominator of the relative error. Key biases, for one, have an
    /// exactly zero gradient (softmax ignores per-row shifts), leaving two
    /// rounding residues to compare.
    pub floor: f64,
    /// Coordinates probed per parameter tensor.
    pub coords_per_group: usize,
    pub seed: u64,
    /// Test fixture: scales matmul right-operand gradients (negative control).
    pub corrupt_backward: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-3,
            floor: 1e-7,
            coords_per_group: 8,
            seed: 0,
            corrupt_backward: false,
        }
    }
}

/// Result for one trainable parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compares the model's analytic cross-entropy gradients (in `T`) with
/// central differences taken on a 64-bit copy of the same weights.
pub fn check_model<T: Real>(
    model: &Model<T>,
    images: &Tensor<f64>,
    labels: &[usize],
    opts: &GradCheckOptions,
) -> Result<Vec<GroupReport>> {
    let x: Tensor<T> = images.cast();
    let mut tape = Tape::new();
    if opts.corrupt_backward {
        tape.corrupt_matmul_backward();
    }
    let out = model.forward(&mut tape, &x, false)?;
    let loss = tape.cross_entropy(out.logits, labels)?;
    tape.backward(loss)?;

    let mut reference = Model {
        arch: model.arch.clone(),
        store: model.store.cast::<f64>(),
    };
    let ids: Vec<_> = model.registry().trainable_ids().collect();
    let mut reports = Vec::with_capacity(ids.len());
    for (g, id) in ids.into_iter().enumerate() {
        let entry = model.registry().get(id);
        let numel = entry.numel();
        let analytic: Vec<T> = match out.bindings.var(id).and_then(|v| tape.grad(v)) {
            Some(grad) => grad.to_vec(),
            None => alloc::vec![T::ZERO; numel],
        };
        let analytic: Vec<f64> = analytic.iter().map(|v| v.to_f64()).collect();
        let coords = sample_coords(numel, opts.coords_per_group, opts.seed.wrapping_add(g as u64));
        let start = reference.store.get(id).data().to_vec();
        let err = finite_diff_check_floored(
            |p: &[f64]| {
                reference.store.get_mut(id).data_mut().copy_from_slice(p);
                let mut t = Tape::new();
                t.set_check_finite(false);
                let o = reference.forward(&mut t, images, false)?;
                let l = t.cross_entropy(o.logits, labels)?;
                Ok(t.value(l)[0])
            },
            &start,
            &analytic,
            opts.h,
            opts.floor,
            &coords,
        )?;
        reference.store.get_mut(id).data_mut().copy_from_slice(&start);
        reports.push(GroupReport {
            name: entry.name.clone(),
            numel,
            checked: coords.len(),
            max_rel_err: err,
        });
    }
    Ok(reports)
}
