//! Assignment of every scalar in a checkpoint to a merge unit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::tensor::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Model,
    Layer,
    Matrix,
    Parameter,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [
        Granularity::Model,
        Granularity::Layer,
        Granularity::Matrix,
        Granularity::Parameter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Model => "model",
            Granularity::Layer => "layer",
            Granularity::Matrix => "matrix",
            Granularity::Parameter => "parameter",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Granularity::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown granularity `{s}`"))
    }
}

pub const DEFAULT_LAYER_PATTERN: &str = r"\.(\d+)\.";
pub const UNASSIGNED_UNIT: &str = "unassigned";

#[derive(Debug, thiserror::Error)]
pub enum PatternError {
    #[error("invalid layer pattern: {0}")]
    Invalid(#[from] regex::Error),
    #[error("layer pattern `{0}` has no capture group for the layer index")]
    NoCaptureGroup(String),
}

/// Extracts an integer layer index from a tensor name via the first capture group.
#[derive(Debug, Clone)]
pub struct LayerPattern(Regex);

impl LayerPattern {
    pub fn new(pattern: &str) -> Result<Self, PatternError> {
        let re = Regex::new(pattern)?;
        if re.captures_len() < 2 {
            return Err(PatternError::NoCaptureGroup(pattern.to_string()));
        }
        Ok(LayerPattern(re))
    }

    pub fn as_str(&self) -> &str {
        self.0.as_str()
    }

    pub fn layer_of(&self, name: &str) -> Option<u64> {
        self.0
            .captures(name)
            .and_then(|c| c.get(1))
            .and_then(|m| m.as_str().parse().ok())
    }
}

impl Default for LayerPattern {
    fn default() -> Self {
        LayerPattern::new(DEFAULT_LAYER_PATTERN).expect("default pattern is valid")
    }
}

/// How the scalars of one tensor map onto unit indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitSpan {
    /// Every scalar of the tensor belongs to this unit.
    Whole(usize),
    /// Scalar `i` belongs to unit `first + i`.
    PerScalar { first: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitPartition {
    pub granularity: Granularity,
    unit_ids: Vec<String>,
    spans: BTreeMap<String, UnitSpan>,
    /// Non-fatal findings, e.g. a layer pattern that matched no tensor.
    pub warnings: Vec<String>,
}

impl UnitPartition {
    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn num_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn span(&self, tensor: &str) -> Option<UnitSpan> {
        self.spans.get(tensor).copied()
    }

    /// Unit index of scalar `index` of tensor `name`.
    pub fn unit_of(&self, name: &str, index: usize) -> Option<usize> {
        self.spans.get(name).map(|span| match *span {
            UnitSpan::Whole(u) => u,
            UnitSpan::PerScalar { first } => first + index,
        })
    }

    /// Number of scalars each unit covers, for the given checkpoint.
    pub fn unit_sizes(&self, ckpt: &Checkpoint) -> Vec<usize> {
        let mut sizes = vec![0; self.unit_ids.len()];
        for (name, tensor) in &ckpt.tensors {
            match self.spans.get(name) {
                Some(UnitSpan::Whole(u)) => sizes[*u] += tensor.numel(),
                Some(UnitSpan::PerScalar { first }) => {
                    for size in &mut sizes[*first..*first + tensor.numel()] {
                        *size += 1;
                    }
                }
                None => {}
            }
        }
        sizes
    }
}

pub fn partition_units(
    ckpt: &Checkpoint,
    granularity: Granularity,
    layer_pattern: &LayerPattern,
) -> UnitPartition {
    let mut unit_ids = Vec::new();
    let mut spans = BTreeMap::new();
    let mut warnings = Vec::new();
    match granularity {
        Granularity::Model => {
            unit_ids.push("model".to_string());
            for name in ckpt.tensors.keys() {
                spans.insert(name.clone(), UnitSpan::Whole(0));
            }
        }
        Granularity::Matrix => {
            for (u, name) in ckpt.tensors.keys().enumerate() {
                unit_ids.push(name.clone());
                spans.insert(name.clone(), UnitSpan::Whole(u));
            }
        }
        Granularity::Parameter => {
            for (name, tensor) in &ckpt.tensors {
                spans.insert(name.clone(), UnitSpan::PerScalar { first: unit_ids.len() });
                unit_ids.extend((0..tensor.numel()).map(|i| format!("{name}[{i}]")));
            }
        }
        Granularity::Layer => {
            let layers: BTreeMap<&str, Option<u64>> = ckpt
                .tensors
                .keys()
                .map(|n| (n.as_str(), layer_pattern.layer_of(n)))
                .collect();
            let mut index_of: BTreeMap<u64, usize> = BTreeMap::new();
            for layer in layers.values().flatten() {
                index_of.entry(*layer).or_insert(0);
            }
            for (u, (layer, slot)) in index_of.iter_mut().enumerate() {
                *slot = u;
                unit_ids.push(format!("layer.{layer}"));
            }
            let unassigned = layers.values().any(Option::is_none).then(|| {
                unit_ids.push(UNASSIGNED_UNIT.to_string());
                unit_ids.len() - 1
            });
            for (name, layer) in layers {
                let u = match layer {
                    Some(l) => index_of[&l],
                    None => unassigned.expect("unassigned unit exists"),
                };
                spans.insert(name.to_string(), UnitSpan::Whole(u));
            }
            if index_of.is_empty() && !ckpt.is_empty() {
                warnings.push(format!(
                    "layer pattern `{}` matched no tensor; all tensors fall into `{UNASSIGNED_UNIT}`",
                    layer_pattern.as_str()
                ));
            }
        }
    }
    UnitPartition {
        granularity,
        unit_ids,
        spans,
        warnings,
    }
}
