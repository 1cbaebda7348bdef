use serde::Serialize;

use crate::tensor::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MismatchKind {
    Missing,
    Shape,
    Dtype,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub name: String,
    pub kind: MismatchKind,
    /// Index of the checkpoint (in the validated list) that disagrees with the first one.
    pub checkpoint: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompatibilityReport {
    pub compatible: bool,
    pub mismatches: Vec<Mismatch>,
}

impl CompatibilityReport {
    fn from_mismatches(mismatches: Vec<Mismatch>) -> Self {
        CompatibilityReport {
            compatible: mismatches.is_empty(),
            mismatches,
        }
    }
}

/// Compares every checkpoint against the first: same names, shapes and dtypes.
pub fn validate_compatible(ckpts: &[&Checkpoint]) -> CompatibilityReport {
    let Some((reference, rest)) = ckpts.split_first() else {
        return CompatibilityReport::from_mismatches(Vec::new());
    };
    let mut mismatches = Vec::new();
    for (offset, other) in rest.iter().enumerate() {
        let checkpoint = offset + 1;
        for (name, tensor) in &reference.tensors {
            let kind = match other.tensors.get(name) {
                None => Some(MismatchKind::Missing),
                Some(t) if t.shape() != tensor.shape() => Some(MismatchKind::Shape),
                Some(t) if t.dtype() != tensor.dtype() => Some(MismatchKind::Dtype),
                Some(_) => None,
            };
            if let Some(kind) = kind {
                mismatches.push(Mismatch {
                    name: name.clone(),
                    kind,
                    checkpoint,
                });
            }
        }
        for name in other.tensors.keys() {
            if !reference.tensors.contains_key(name) {
                mismatches.push(Mismatch {
                    name: name.clone(),
                    kind: MismatchKind::Missing,
                    checkpoint,
                });
            }
        }
    }
    CompatibilityReport::from_mismatches(mismatches)
}
