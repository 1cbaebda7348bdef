//! Parameter-space merging of fine-tuned checkpoints.

mod baselines;
pub mod prng;
mod varm;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::compat::{validate_compatible, CompatibilityReport};
use crate::partition::{Granularity, LayerPattern, PatternError, DEFAULT_LAYER_PATTERN};
use crate::tensor::{Checkpoint, Tensor};

pub use baselines::{merge_dare, merge_linear, merge_slerp, merge_task_arithmetic, merge_ties};
pub use varm::{
    delta_stats, merge_varm, merge_weighted, varm_weights, DeltaStats, MergeWeights, UnitDelta,
    VarmOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum MergeError {
    #[error("checkpoints are incompatible: {} mismatch(es)", .0.mismatches.len())]
    Incompatible(CompatibilityReport),
    #[error("at least one target checkpoint is required")]
    NoTargets,
    #[error("method `{method}` needs a base checkpoint")]
    MissingBase { method: Method },
    #[error("{0}")]
    InvalidParameter(String),
    #[error("merge weights are missing unit `{0}`")]
    MissingUnitWeight(String),
    #[error("delta statistics disagree on unit ids")]
    UnitMismatch,
    #[error(transparent)]
    Pattern(#[from] PatternError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Varm,
    Linear,
    Slerp,
    #[serde(alias = "ta")]
    TaskArithmetic,
    Ties,
    Dare,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Varm => "varm",
            Method::Linear => "linear",
            Method::Slerp => "slerp",
            Method::TaskArithmetic => "task_arithmetic",
            Method::Ties => "ties",
            Method::Dare => "dare",
        }
    }

    pub fn needs_base(self) -> bool {
        matches!(
            self,
            Method::Varm | Method::TaskArithmetic | Method::Ties | Method::Dare
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "varm" => Ok(Method::Varm),
            "linear" => Ok(Method::Linear),
            "slerp" => Ok(Method::Slerp),
            "ta" | "task_arithmetic" => Ok(Method::TaskArithmetic),
            "ties" => Ok(Method::Ties),
            "dare" => Ok(Method::Dare),
            _ => Err(format!("unknown merge method `{s}`")),
        }
    }
}

/// How per-unit variation statistics become merge weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// Proportional to mean squared change.
    #[default]
    Square,
    /// Proportional to mean absolute change.
    Abs,
    /// Softmax over mean squared change.
    Softmax,
}

impl WeightMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightMode::Square => "square",
            WeightMode::Abs => "abs",
            WeightMode::Softmax => "softmax",
        }
    }
}

impl FromStr for WeightMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "square" => Ok(WeightMode::Square),
            "abs" => Ok(WeightMode::Abs),
            "softmax" => Ok(WeightMode::Softmax),
            _ => Err(format!("unknown weight mode `{s}`")),
        }
    }
}

/// Every knob of every merge method. Fields a method does not use are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeConfig {
    pub method: Method,
    pub granularity: Granularity,
    pub weight_mode: WeightMode,
    /// Softmax temperature; only read in softmax mode.
    pub temperature: f64,
    /// Linear coefficients; uniform when absent.
    pub coeffs: Option<Vec<f64>>,
    pub t: f64,
    pub scale: f64,
    pub density: f64,
    pub drop_rate: f64,
    pub seed: u64,
    pub layer_pattern: String,
    /// Only tensors whose name matches take part; the rest are copied from the
    /// base (or the first target when there is no base).
    pub include: Option<String>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            method: Method::Varm,
            granularity: Granularity::Matrix,
            weight_mode: WeightMode::Square,
            temperature: 1.0,
            coeffs: None,
            t: 0.5,
            scale: 1.0,
            density: 0.2,
            drop_rate: 0.5,
            seed: 0,
            layer_pattern: DEFAULT_LAYER_PATTERN.to_string(),
            include: None,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), MergeError> {
        check_unit_interval("t", self.t)?;
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(MergeError::InvalidParameter(format!(
                "density must lie in (0, 1], got {}",
                self.density
            )));
        }
        check_drop_rate(self.drop_rate)?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(MergeError::InvalidParameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !self.scale.is_finite() {
            return Err(MergeError::InvalidParameter("scale must be finite".into()));
        }
        LayerPattern::new(&self.layer_pattern)?;
        if let Some(p) = &self.include {
            Regex::new(p).map_err(PatternError::from)?;
        }
        Ok(())
    }
}

pub(crate) fn check_unit_interval(name: &str, v: f64) -> Result<(), MergeError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(MergeError::InvalidParameter(format!(
            "{name} must lie in [0, 1], got {v}"
        )))
    }
}

pub(crate) fn check_drop_rate(v: f64) -> Result<(), MergeError> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(MergeError::InvalidParameter(format!(
            "drop_rate must lie in [0, 1), got {v}"
        )))
    }
}

pub(crate) fn ensure_compatible(ckpts: &[&Checkpoint]) -> Result<(), MergeError> {
    let report = validate_compatible(ckpts);
    if report.compatible {
        Ok(())
    } else {
        Err(MergeError::Incompatible(report))
    }
}

/// Applies `f` to every tensor name of `reference`, in parallel, gathering the
/// tensors of the same name from each of `inputs`. Output order does not
/// depend on scheduling.
pub(crate) fn map_tensors<F>(reference: &Checkpoint, inputs: &[&Checkpoint], f: F) -> Checkpoint
where
    F: Fn(&str, &[&Tensor]) -> Tensor + Sync,
{
    let names: Vec<&String> = reference.tensors.keys().collect();
    let merged: Vec<(String, Tensor)> = names
        .par_iter()
        .map(|name| {
            let group: Vec<&Tensor> = inputs.iter().map(|c| &c.tensors[name.as_str()]).collect();
            ((*name).clone(), f(name, &group))
        })
        .collect();
    Checkpoint {
        tensors: merged.into_iter().collect(),
        metadata: BTreeMap::new(),
    }
}

/// Result of [`merge`]: the merged checkpoint plus what the report needs.
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub checkpoint: Checkpoint,
    /// Per-unit weights, for VaRM only.
    pub weights: Option<MergeWeights>,
    pub warnings: Vec<String>,
}

fn filtered(ckpt: &Checkpoint, include: Option<&Regex>) -> Checkpoint {
    match include {
        None => ckpt.clone(),
        Some(re) => Checkpoint {
            tensors: ckpt
                .tensors
                .iter()
                .filter(|(n, _)| re.is_match(n))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
            metadata: BTreeMap::new(),
        },
    }
}

/// Runs the configured method and stamps the method and config into the
/// output metadata.
pub fn merge(
    base: Option<&Checkpoint>,
    targets: &[Checkpoint],
    config: &MergeConfig,
) -> Result<MergeOutcome, MergeError> {
    config.validate()?;
    if targets.is_empty() {
        return Err(MergeError::NoTargets);
    }
    if config.method.needs_base() && base.is_none() {
        return Err(MergeError::MissingBase {
            method: config.method,
        });
    }
    let mut all: Vec<&Checkpoint> = base.into_iter().collect();
    all.extend(targets.iter());
    ensure_compatible(&all)?;

    let include = config
        .include
        .as_deref()
        .map(Regex::new)
        .transpose()
        .map_err(PatternError::from)?;
    let fbase = base.map(|b| filtered(b, include.as_ref()));
    let ftargets: Vec<Checkpoint> = targets.iter().map(|t| filtered(t, include.as_ref())).collect();
    let fbase_ref = fbase.as_ref();

    let mut weights = None;
    let mut warnings = Vec::new();
    let mut merged = match config.method {
        Method::Varm => {
            let pattern = LayerPattern::new(&config.layer_pattern)?;
            let outcome = merge_varm(
                fbase_ref.expect("checked above"),
                &ftargets,
                config.granularity,
                config.weight_mode,
                config.temperature,
                &pattern,
            )?;
            warnings = outcome.partition.warnings.clone();
            weights = Some(outcome.weights);
            outcome.checkpoint
        }
        Method::Linear => {
            let coeffs = match &config.coeffs {
                Some(c) => c.clone(),
                None => vec![1.0 / ftargets.len() as f64; ftargets.len()],
            };
            merge_linear(&ftargets, &coeffs)?
        }
        Method::Slerp => {
            if ftargets.len() != 2 {
                return Err(MergeError::InvalidParameter(format!(
                    "slerp merges exactly two targets, got {}",
                    ftargets.len()
                )));
            }
            merge_slerp(&ftargets[0], &ftargets[1], config.t)?
        }
        Method::TaskArithmetic => {
            merge_task_arithmetic(fbase_ref.expect("checked above"), &ftargets, config.scale)?
        }
        Method::Ties => merge_ties(
            fbase_ref.expect("checked above"),
            &ftargets,
            config.density,
            config.scale,
        )?,
        Method::Dare => merge_dare(
            fbase_ref.expect("checked above"),
            &ftargets,
            config.drop_rate,
            config.scale,
            config.seed,
        )?,
    };

    let reference = base.unwrap_or(&targets[0]);
    for (name, tensor) in &reference.tensors {
        merged
            .tensors
            .entry(name.clone())
            .or_insert_with(|| tensor.clone());
    }
    merged
        .metadata
        .insert("merge.method".into(), config.method.as_str().into());
    merged.metadata.insert(
        "merge.config".into(),
        serde_json::to_string(config).expect("config serializes"),
    );
    Ok(MergeOutcome {
        checkpoint: merged,
        weights,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ck(values: &[(&str, Vec<f64>)]) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (n, v) in values {
            c.insert(*n, Tensor::vector(v.clone()));
        }
        c
    }

    #[test]
    fn config_defaults_and_unknown_keys() {
        let cfg: MergeConfig = serde_json::from_str(r#"{"method":"ta","scale":0.5}"#).unwrap();
        assert_eq!(cfg.method, Method::TaskArithmetic);
        assert_eq!(cfg.density, 0.2);
        assert_eq!(cfg.drop_rate, 0.5);
        assert!(serde_json::from_str::<MergeConfig>(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn config_ranges_are_checked() {
        let bad = [
            MergeConfig { t: 1.5, ..Default::default() },
            MergeConfig { density: 0.0, ..Default::default() },
            MergeConfig { drop_rate: 1.0, ..Default::default() },
            MergeConfig { temperature: 0.0, ..Default::default() },
            MergeConfig { layer_pattern: "no-group".into(), ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!(MergeConfig::default().validate().is_ok());
    }

    #[test]
    fn merge_requires_base_for_delta_methods() {
        let t = ck(&[("a", vec![1.0])]);
        for method in [Method::Varm, Method::TaskArithmetic, Method::Ties, Method::Dare] {
            let cfg = MergeConfig { method, ..Default::default() };
            assert!(matches!(
                merge(None, std::slice::from_ref(&t), &cfg),
                Err(MergeError::MissingBase { .. })
            ));
        }
        let cfg = MergeConfig { method: Method::Linear, ..Default::default() };
        assert!(merge(None, &[t], &cfg).is_ok());
    }

    #[test]
    fn merge_rejects_incompatible_inputs() {
        let a = ck(&[("a", vec![1.0])]);
        let b = ck(&[("a", vec![1.0, 2.0])]);
        let err = merge(Some(&a), &[b], &MergeConfig::default()).unwrap_err();
        assert!(matches!(err, MergeError::Incompatible(_)));
    }

    #[test]
    fn include_filter_passes_other_tensors_through_from_base() {
        let base = ck(&[("embed", vec![0.0, 0.0]), ("blk.0.w", vec![0.0])]);
        let t1 = ck(&[("embed", vec![4.0, 4.0]), ("blk.0.w", vec![2.0])]);
        let t2 = ck(&[("embed", vec![8.0, 8.0]), ("blk.0.w", vec![2.0])]);
        let cfg = MergeConfig {
            method: Method::TaskArithmetic,
            include: Some(r"^blk\.".into()),
            ..Default::default()
        };
        let out = merge(Some(&base), &[t1, t2], &cfg).unwrap().checkpoint;
        assert_eq!(out.get("embed").unwrap().to_f64_vec(), [0.0, 0.0]);
        assert_eq!(out.get("blk.0.w").unwrap().to_f64_vec(), [4.0]);
        assert_eq!(out.metadata["merge.method"], "task_arithmetic");
        assert!(out.metadata["merge.config"].contains("\"include\""));
    }

    #[test]
    fn slerp_needs_two_targets() {
        let a = ck(&[("a", vec![1.0])]);
        let cfg = MergeConfig { method: Method::Slerp, ..Default::default() };
        assert!(matches!(
            merge(None, &[a], &cfg),
            Err(MergeError::InvalidParameter(_))
        ));
    }

    #[test]
    fn method_names_parse() {
        for (s, m) in [("varm", Method::Varm), ("ta", Method::TaskArithmetic), ("dare", Method::Dare)] {
            assert_eq!(s.parse::<Method>().unwrap(), m);
        }
        assert!("fisher".parse::<Method>().is_err());
    }
}
