//! Variation-ratio merging: per-unit weights proportional to how far each
//! fine-tuned target moved away from the shared base.

use serde::Serialize;

use super::{ensure_compatible, map_tensors, MergeError, WeightMode};
use crate::partition::{partition_units, Granularity, LayerPattern, UnitPartition};
use crate::scalar::Element;
use crate::tensor::{Checkpoint, Tensor};
use crate::with_dtype;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UnitDelta {
    pub mean_sq: f64,
    pub mean_abs: f64,
    pub count: usize,
}

/// Per-unit statistics of `target - base`, aligned with a partition's unit ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaStats {
    pub unit_ids: Vec<String>,
    pub units: Vec<UnitDelta>,
}

/// Accumulates squared and absolute deltas in f64, sequentially in
/// (tensor name, flat index) order, so results are bit-reproducible.
pub fn delta_stats(
    base: &Checkpoint,
    target: &Checkpoint,
    partition: &UnitPartition,
) -> Result<DeltaStats, MergeError> {
    ensure_compatible(&[base, target])?;
    let n = partition.num_units();
    let mut sum_sq = vec![0.0f64; n];
    let mut sum_abs = vec![0.0f64; n];
    let mut count = vec![0usize; n];
    for (name, b) in &base.tensors {
        let t = &target.tensors[name];
        with_dtype!(b.dtype(), T => {
            let bs = b.as_slice::<T>().expect("dtype checked");
            let ts = t.as_slice::<T>().expect("dtype checked");
            for (i, (&x0, &x1)) in bs.iter().zip(ts).enumerate() {
                let u = partition
                    .unit_of(name, i)
                    .ok_or_else(|| MergeError::MissingUnitWeight(name.clone()))?;
                let d = x1.widen() - x0.widen();
                sum_sq[u] += d * d;
                sum_abs[u] += d.abs();
                count[u] += 1;
            }
        });
    }
    let units = (0..n)
        .map(|u| {
            let (mean_sq, mean_abs) = if count[u] == 0 {
                (0.0, 0.0)
            } else {
                (sum_sq[u] / count[u] as f64, sum_abs[u] / count[u] as f64)
            };
            UnitDelta {
                mean_sq,
                mean_abs,
                count: count[u],
            }
        })
        .collect();
    Ok(DeltaStats {
        unit_ids: partition.unit_ids().to_vec(),
        units,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitWeights {
    pub unit: String,
    pub weights: Vec<f64>,
}

/// One weight vector (over targets) per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeWeights {
    pub unit_ids: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

impl MergeWeights {
    /// The same weight vector for every unit of `partition`.
    pub fn uniform_over(partition: &UnitPartition, weights: Vec<f64>) -> Self {
        MergeWeights {
            unit_ids: partition.unit_ids().to_vec(),
            weights: vec![weights; partition.num_units()],
        }
    }

    pub fn num_targets(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn to_report(&self) -> Vec<UnitWeights> {
        self.unit_ids
            .iter()
            .zip(&self.weights)
            .map(|(u, w)| UnitWeights {
                unit: u.clone(),
                weights: w.clone(),
            })
            .collect()
    }
}

/// Turns per-target delta statistics into normalized per-unit weights.
///
/// A unit where no target moved gets uniform weights.
pub fn varm_weights(
    stats: &[DeltaStats],
    mode: WeightMode,
    temperature: f64,
) -> Result<MergeWeights, MergeError> {
    let first = stats.first().ok_or(MergeError::NoTargets)?;
    if stats.iter().any(|s| s.unit_ids != first.unit_ids) {
        return Err(MergeError::UnitMismatch);
    }
    let k = stats.len();
    let weights = (0..first.unit_ids.len())
        .map(|u| {
            let scores: Vec<f64> = match mode {
                WeightMode::Square => stats.iter().map(|s| s.units[u].mean_sq).collect(),
                WeightMode::Abs => stats.iter().map(|s| s.units[u].mean_abs).collect(),
                WeightMode::Softmax => {
                    let max = stats
                        .iter()
                        .map(|s| s.units[u].mean_sq)
                        .fold(f64::NEG_INFINITY, f64::max);
                    stats
                        .iter()
                        .map(|s| ((s.units[u].mean_sq - max) / temperature).exp())
                        .collect()
                }
            };
            let total: f64 = scores.iter().sum();
            if total > 0.0 && total.is_finite() {
                scores.iter().map(|s| s / total).collect()
            } else {
                vec![1.0 / k as f64; k]
            }
        })
        .collect();
    Ok(MergeWeights {
        unit_ids: first.unit_ids.clone(),
        weights,
    })
}

fn weighted_kernel<T: Element>(
    name: &str,
    partition: &UnitPartition,
    weights: &[Vec<f64>],
    inputs: &[&[T]],
) -> Vec<T> {
    let n = inputs[0].len();
    (0..n)
        .map(|i| {
            let w = &weights[partition.unit_of(name, i).expect("unit coverage checked")];
            let mut acc = 0.0f64;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (wj, x) in w.iter().zip(inputs) {
                let x = x[i].widen();
                acc += wj * x;
                lo = lo.min(x);
                hi = hi.max(x);
            }
            // Keeps the result inside the targets' hull despite rounding in the weights.
            T::narrow(acc.clamp(lo, hi))
        })
        .collect()
}

/// Elementwise `Σ_j W[unit, j] · θ_j`, with the unit looked up per scalar.
pub fn merge_weighted(
    targets: &[Checkpoint],
    weights: &MergeWeights,
    partition: &UnitPartition,
) -> Result<Checkpoint, MergeError> {
    let refs: Vec<&Checkpoint> = targets.iter().collect();
    let first = *refs.first().ok_or(MergeError::NoTargets)?;
    ensure_compatible(&refs)?;
    if let Some(missing) = partition
        .unit_ids()
        .iter()
        .find(|u| !weights.unit_ids.contains(u))
    {
        return Err(MergeError::MissingUnitWeight(missing.clone()));
    }
    if weights.unit_ids != partition.unit_ids() {
        return Err(MergeError::UnitMismatch);
    }
    if let Some(name) = first.names().find(|n| partition.span(n).is_none()) {
        return Err(MergeError::MissingUnitWeight(name.to_string()));
    }
    if weights.weights.iter().any(|w| w.len() != targets.len()) {
        return Err(MergeError::InvalidParameter(format!(
            "every unit needs {} weights",
            targets.len()
        )));
    }
    Ok(map_tensors(first, &refs, |name, group| {
        with_dtype!(group[0].dtype(), T => {
            let slices: Vec<&[T]> = group.iter().map(|t| t.as_slice::<T>().unwrap()).collect();
            let data = weighted_kernel(name, partition, &weights.weights, &slices);
            Tensor::new(group[0].shape().to_vec(), data).unwrap()
        })
    }))
}

#[derive(Debug, Clone)]
pub struct VarmOutcome {
    pub checkpoint: Checkpoint,
    pub weights: MergeWeights,
    pub partition: UnitPartition,
    pub stats: Vec<DeltaStats>,
}

/// Partitions the base, measures each target's variation, weights and merges.
/// The base itself is not part of the weighted sum.
pub fn merge_varm(
    base: &Checkpoint,
    targets: &[Checkpoint],
    granularity: Granularity,
    mode: WeightMode,
    temperature: f64,
    layer_pattern: &LayerPattern,
) -> Result<VarmOutcome, MergeError> {
    if targets.is_empty() {
        return Err(MergeError::NoTargets);
    }
    let partition = partition_units(base, granularity, layer_pattern);
    let stats = targets
        .iter()
        .map(|t| delta_stats(base, t, &partition))
        .collect::<Result<Vec<_>, _>>()?;
    let weights = varm_weights(&stats, mode, temperature)?;
    let mut checkpoint = merge_weighted(targets, &weights, &partition)?;
    checkpoint.metadata.insert("merge.method".into(), "varm".into());
    checkpoint
        .metadata
        .insert("merge.granularity".into(), granularity.as_str().into());
    checkpoint
        .metadata
        .insert("merge.weight_mode".into(), mode.as_str().into());
    Ok(VarmOutcome {
        checkpoint,
        weights,
        partition,
        stats,
    })
}
