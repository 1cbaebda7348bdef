//! Baseline merge methods: linear averaging, SLERP, task arithmetic, TIES and DARE.
//!
//! All kernels widen to f64, accumulate targets in index order and narrow back
//! to the storage dtype.

use super::prng::keyed_uniform;
use super::{check_drop_rate, check_unit_interval, ensure_compatible, map_tensors, MergeError};
use crate::scalar::Element;
use crate::tensor::{Checkpoint, Tensor};
use crate::with_dtype;

const COEFF_SUM_TOL: f64 = 1e-9;
const SLERP_MIN_SIN: f64 = 1e-6;

fn typed<'a, T: Element>(group: &[&'a Tensor]) -> Vec<&'a [T]> {
    group
        .iter()
        .map(|t| t.as_slice::<T>().expect("dtype checked by compatibility"))
        .collect()
}

fn rebuild<T: Element>(like: &Tensor, data: Vec<T>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("kernel preserves length")
}

fn with_base<'a>(base: &'a Checkpoint, targets: &'a [Checkpoint]) -> Result<Vec<&'a Checkpoint>, MergeError> {
    if targets.is_empty() {
        return Err(MergeError::NoTargets);
    }
    let mut all = vec![base];
    all.extend(targets.iter());
    ensure_compatible(&all)?;
    Ok(all)
}

fn linear_kernel<T: Element>(inputs: &[&[T]], coeffs: &[f64]) -> Vec<T> {
    (0..inputs[0].len())
        .map(|i| {
            let mut acc = 0.0f64;
            for (c, x) in coeffs.iter().zip(inputs) {
                acc += c * x[i].widen();
            }
            T::narrow(acc)
        })
        .collect()
}

/// Elementwise `Σ_j coeffs[j] · θ_j`; coefficients must sum to one.
pub fn merge_linear(targets: &[Checkpoint], coeffs: &[f64]) -> Result<Checkpoint, MergeError> {
    let refs: Vec<&Checkpoint> = targets.iter().collect();
    let first = *refs.first().ok_or(MergeError::NoTargets)?;
    if coeffs.len() != targets.len() {
        return Err(MergeError::InvalidParameter(format!(
            "{} coefficients for {} targets",
            coeffs.len(),
            targets.len()
        )));
    }
    let total: f64 = coeffs.iter().sum();
    if (total - 1.0).abs() > COEFF_SUM_TOL {
        return Err(MergeError::InvalidParameter(format!(
            "linear coefficients sum to {total}, expected 1"
        )));
    }
    ensure_compatible(&refs)?;
    Ok(map_tensors(first, &refs, |_, group| {
        with_dtype!(group[0].dtype(), T => rebuild(group[0], linear_kernel(&typed::<T>(group), coeffs)))
    }))
}

fn lerp_kernel<T: Element>(a: &[T], b: &[T], t: f64) -> Vec<T> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| T::narrow((1.0 - t) * x.widen() + t * y.widen()))
        .collect()
}

fn slerp_kernel<T: Element>(a: &[T], b: &[T], t: f64) -> Vec<T> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.widen(), y.widen());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return lerp_kernel(a, b, t);
    }
    let cos = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
    let omega = cos.acos();
    let sin = omega.sin();
    if sin < SLERP_MIN_SIN {
        return lerp_kernel(a, b, t);
    }
    let ca = ((1.0 - t) * omega).sin() / sin;
    let cb = (t * omega).sin() / sin;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| T::narrow(ca * x.widen() + cb * y.widen()))
        .collect()
}

/// Spherical interpolation, applied tensor by tensor. Falls back to linear
/// interpolation when the two tensors are (anti)parallel or one is zero.
pub fn merge_slerp(a: &Checkpoint, b: &Checkpoint, t: f64) -> Result<Checkpoint, MergeError> {
    check_unit_interval("t", t)?;
    ensure_compatible(&[a, b])?;
    Ok(map_tensors(a, &[a, b], |_, group| {
        with_dtype!(group[0].dtype(), T => {
            let s = typed::<T>(group);
            rebuild(group[0], slerp_kernel(s[0], s[1], t))
        })
    }))
}

fn task_arithmetic_kernel<T: Element>(base: &[T], targets: &[&[T]], scale: f64) -> Vec<T> {
    base.iter()
        .enumerate()
        .map(|(i, &b)| {
            let b = b.widen();
            let mut acc = 0.0f64;
            for x in targets {
                acc += x[i].widen() - b;
            }
            T::narrow(b + scale * acc)
        })
        .collect()
}

/// `base + scale · Σ_j (θ_j − base)`.
pub fn merge_task_arithmetic(
    base: &Checkpoint,
    targets: &[Checkpoint],
    scale: f64,
) -> Result<Checkpoint, MergeError> {
    let all = with_base(base, targets)?;
    Ok(map_tensors(base, &all, |_, group| {
        with_dtype!(group[0].dtype(), T => {
            let s = typed::<T>(group);
            rebuild(group[0], task_arithmetic_kernel(s[0], &s[1..], scale))
        })
    }))
}

/// Number of entries TIES keeps out of `n` at the given density.
pub(crate) fn ties_keep_count(n: usize, density: f64) -> usize {
    ((density * n as f64).ceil() as usize).min(n)
}

/// Zeroes all but the `k` largest-magnitude entries; ties keep the lower index.
fn trim_top_k(tau: &mut [f64], k: usize) {
    let mut order: Vec<usize> = (0..tau.len()).collect();
    order.sort_by(|&i, &j| tau[j].abs().total_cmp(&tau[i].abs()).then(i.cmp(&j)));
    for &i in &order[k..] {
        tau[i] = 0.0;
    }
}

fn ties_kernel<T: Element>(base: &[T], targets: &[&[T]], density: f64, scale: f64) -> Vec<T> {
    let n = base.len();
    let keep = ties_keep_count(n, density);
    let trimmed: Vec<Vec<f64>> = targets
        .iter()
        .map(|x| {
            let mut tau: Vec<f64> = x.iter().zip(base).map(|(&x, &b)| x.widen() - b.widen()).collect();
            trim_top_k(&mut tau, keep);
            tau
        })
        .collect();
    (0..n)
        .map(|i| {
            let mut total = 0.0f64;
            for tau in &trimmed {
                total += tau[i];
            }
            // Sign election; an exact tie elects +.
            let positive = total >= 0.0;
            let mut acc = 0.0f64;
            let mut count = 0usize;
            for tau in &trimmed {
                let v = tau[i];
                if (positive && v > 0.0) || (!positive && v < 0.0) {
                    acc += v;
                    count += 1;
                }
            }
            let merged = if count == 0 { 0.0 } else { acc / count as f64 };
            T::narrow(base[i].widen() + scale * merged)
        })
        .collect()
}

/// Trim each task vector to its top `⌈density·n⌉` entries per tensor, elect a
/// sign per scalar, and average the agreeing entries.
pub fn merge_ties(
    base: &Checkpoint,
    targets: &[Checkpoint],
    density: f64,
    scale: f64,
) -> Result<Checkpoint, MergeError> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(MergeError::InvalidParameter(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    let all = with_base(base, targets)?;
    Ok(map_tensors(base, &all, |_, group| {
        with_dtype!(group[0].dtype(), T => {
            let s = typed::<T>(group);
            rebuild(group[0], ties_kernel(s[0], &s[1..], density, scale))
        })
    }))
}

fn dare_kernel<T: Element>(
    name: &str,
    base: &[T],
    targets: &[&[T]],
    drop_rate: f64,
    scale: f64,
    seed: u64,
) -> Vec<T> {
    let rescale = 1.0 / (1.0 - drop_rate);
    base.iter()
        .enumerate()
        .map(|(i, &b)| {
            let b = b.widen();
            let mut acc = 0.0f64;
            for (j, x) in targets.iter().enumerate() {
                let tau = x[i].widen() - b;
                if keyed_uniform(seed, j, name, i) >= drop_rate {
                    acc += tau * rescale;
                }
            }
            T::narrow(b + scale * acc)
        })
        .collect()
}

/// Drops each task-vector entry with probability `drop_rate`, rescales the
/// survivors by `1 / (1 − drop_rate)`, then adds them like task arithmetic.
/// Draws are keyed by `(seed, target index, tensor name, flat index)`.
pub fn merge_dare(
    base: &Checkpoint,
    targets: &[Checkpoint],
    drop_rate: f64,
    scale: f64,
    seed: u64,
) -> Result<Checkpoint, MergeError> {
    check_drop_rate(drop_rate)?;
    let all = with_base(base, targets)?;
    Ok(map_tensors(base, &all, |name, group| {
        with_dtype!(group[0].dtype(), T => {
            let s = typed::<T>(group);
            rebuild(group[0], dare_kernel(name, s[0], &s[1..], drop_rate, scale, seed))
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(values: Vec<f64>) -> Checkpoint {
        Checkpoint::new().with_tensor("w", Tensor::vector(values))
    }

    fn out(c: &Checkpoint) -> Vec<f64> {
        c.get("w").unwrap().to_f64_vec()
    }

    #[test]
    fn linear_examples() {
        let a = v(vec![1.5, -2.0]);
        assert!(merge_linear(std::slice::from_ref(&a), &[1.0]).unwrap().tensors_bit_eq(&a));
        assert_eq!(out(&merge_linear(&[v(vec![0.0]), v(vec![10.0])], &[0.5, 0.5]).unwrap()), [5.0]);
        let r = out(&merge_linear(&[v(vec![1.0]), v(vec![11.0])], &[0.3, 0.7]).unwrap());
        assert!((r[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn linear_coefficient_errors() {
        let a = v(vec![1.0]);
        assert!(matches!(
            merge_linear(&[a.clone(), a.clone()], &[1.0]),
            Err(MergeError::InvalidParameter(_))
        ));
        assert!(matches!(
            merge_linear(&[a.clone(), a], &[0.5, 0.6]),
            Err(MergeError::InvalidParameter(_))
        ));
    }

    #[test]
    fn slerp_endpoints_exact() {
        let a = v(vec![0.3, -1.2, 2.5]);
        let b = v(vec![-0.7, 0.4, 1.1]);
        assert_eq!(out(&merge_slerp(&a, &b, 0.0).unwrap()), out(&a));
        assert_eq!(out(&merge_slerp(&a, &b, 1.0).unwrap()), out(&b));
    }

    #[test]
    fn slerp_quarter_turn_midpoint() {
        let r = out(&merge_slerp(&v(vec![1.0, 0.0]), &v(vec![0.0, 1.0]), 0.5).unwrap());
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((r[0] - h).abs() < 1e-15 && (r[1] - h).abs() < 1e-15, "{r:?}");
    }

    #[test]
    fn slerp_parallel_falls_back_to_linear() {
        let a = v(vec![1.0, 2.0, -3.0]);
        for t in [0.0, 0.25, 0.5, 1.0] {
            assert_eq!(out(&merge_slerp(&a, &a, t).unwrap()), out(&a));
        }
        // Antiparallel: the linear fallback passes through the origin.
        let r = out(&merge_slerp(&v(vec![1.0, 0.0]), &v(vec![-1.0, 0.0]), 0.5).unwrap());
        assert_eq!(r, [0.0, 0.0]);
        // A zero tensor has no direction.
        let r = out(&merge_slerp(&v(vec![0.0, 0.0]), &v(vec![2.0, 4.0]), 0.5).unwrap());
        assert_eq!(r, [1.0, 2.0]);
    }

    #[test]
    fn slerp_rejects_bad_t() {
        let a = v(vec![1.0]);
        assert!(merge_slerp(&a, &a, 1.5).is_err());
        assert!(merge_slerp(&a, &a, -0.1).is_err());
    }

    #[test]
    fn task_arithmetic_examples() {
        let base = v(vec![1.0, -0.5]);
        let t = v(vec![3.0, 0.25]);
        assert!(merge_task_arithmetic(&base, std::slice::from_ref(&t), 1.0).unwrap().tensors_bit_eq(&t));
        assert!(merge_task_arithmetic(&base, &[t], 0.0).unwrap().tensors_bit_eq(&base));
        let r = out(&merge_task_arithmetic(&v(vec![1.0]), &[v(vec![2.0]), v(vec![4.0])], 0.5).unwrap());
        assert_eq!(r, [3.0]);
    }

    #[test]
    fn ties_identical_targets() {
        let base = v(vec![0.5, 1.0, -2.0]);
        let t = v(vec![1.5, 0.75, -4.0]);
        let r = merge_ties(&base, &[t.clone(), t.clone()], 1.0, 1.0).unwrap();
        assert!(r.tensors_bit_eq(&t));
    }

    #[test]
    fn ties_elect_and_disjoint_mean() {
        let base = v(vec![0.0, 0.0]);
        let r = merge_ties(&base, &[v(vec![3.0, -1.0]), v(vec![1.0, 2.0])], 1.0, 1.0).unwrap();
        assert_eq!(out(&r), [2.0, 2.0]);
        let r = merge_ties(&base, &[v(vec![3.0, -1.0]), v(vec![1.0, 2.0])], 1.0, 0.5).unwrap();
        assert_eq!(out(&r), [1.0, 1.0]);
    }

    #[test]
    fn ties_trim_keeps_top_magnitudes() {
        let base = v(vec![0.0, 0.0]);
        let r = merge_ties(&base, &[v(vec![4.0, 0.1])], 0.5, 1.0).unwrap();
        assert_eq!(out(&r), [4.0, 0.0]);
        assert_eq!(ties_keep_count(10, 0.2), 2);
        assert_eq!(ties_keep_count(3, 0.2), 1);
        assert_eq!(ties_keep_count(0, 0.5), 0);
        let mut tau = vec![1.0, -1.0, 0.5];
        trim_top_k(&mut tau, 1);
        assert_eq!(tau, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn ties_sign_tie_elects_positive() {
        let base = v(vec![0.0]);
        let r = merge_ties(&base, &[v(vec![2.0]), v(vec![-2.0])], 1.0, 1.0).unwrap();
        assert_eq!(out(&r), [2.0]);
    }

    #[test]
    fn ties_rejects_bad_density() {
        let a = v(vec![1.0]);
        assert!(merge_ties(&a, std::slice::from_ref(&a), 0.0, 1.0).is_err());
        assert!(merge_ties(&a, std::slice::from_ref(&a), 1.1, 1.0).is_err());
    }

    #[test]
    fn dare_without_drops_is_task_arithmetic() {
        let base = v(vec![0.1, 0.2, 0.3]);
        let ts = [v(vec![0.4, -0.2, 1.3]), v(vec![0.0, 0.9, 0.3])];
        let dare = merge_dare(&base, &ts, 0.0, 0.7, 99).unwrap();
        let ta = merge_task_arithmetic(&base, &ts, 0.7).unwrap();
        assert!(dare.tensors_bit_eq(&ta));
    }

    #[test]
    fn dare_is_seeded() {
        let base = v(vec![0.0; 16]);
        let ts = [v((0..16).map(|i| i as f64).collect())];
        let a = merge_dare(&base, &ts, 0.5, 1.0, 1).unwrap();
        let b = merge_dare(&base, &ts, 0.5, 1.0, 1).unwrap();
        let c = merge_dare(&base, &ts, 0.5, 1.0, 2).unwrap();
        assert!(a.tensors_bit_eq(&b));
        assert!(!a.tensors_bit_eq(&c));
        // Survivors are rescaled by 1 / (1 - p) = 2.
        for (i, x) in out(&a).into_iter().enumerate() {
            assert!(x == 0.0 || x == 2.0 * i as f64);
        }
        assert!(merge_dare(&base, &ts, 1.0, 1.0, 1).is_err());
    }

    #[test]
    fn f32_tensors_stay_f32() {
        let base = Checkpoint::new().with_tensor("w", Tensor::new(vec![2], vec![0.0f32, 1.0]).unwrap());
        let t = Checkpoint::new().with_tensor("w", Tensor::new(vec![2], vec![2.0f32, 3.0]).unwrap());
        let r = merge_task_arithmetic(&base, &[t], 0.5).unwrap();
        assert_eq!(r.get("w").unwrap().as_slice::<f32>().unwrap(), &[1.0, 2.0]);
    }

    proptest! {
        #[test]
        fn slerp_preserves_equal_norms(
            raw_a in prop::collection::vec(-1.0f64..1.0, 2..10),
            raw_b in prop::collection::vec(-1.0f64..1.0, 2..10),
            t in 0.0f64..1.0,
        ) {
            let n = raw_a.len().min(raw_b.len());
            let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (a, b) = (&raw_a[..n], &raw_b[..n]);
            prop_assume!(norm(a) > 1e-3 && norm(b) > 1e-3);
            let b: Vec<f64> = b.iter().map(|x| x * norm(a) / norm(b)).collect();
            let r = out(&merge_slerp(&v(a.to_vec()), &v(b.clone()), t).unwrap());
            let cos = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(&b));
            prop_assume!((1.0 - cos * cos).sqrt() >= SLERP_MIN_SIN);
            prop_assert!((norm(&r) - norm(a)).abs() <= 1e-9 * norm(a));
        }
    }
}
