use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::scalar::Element;

use super::loss::{cross_entropy, token_cross_entropy, DEFAULT_CLAMP};
use super::{DistMatrix, FusionError, GoldLabels};

/// Whether minimum-cross-entropy selection picks whole matrices or single rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MinceGranularity {
    #[default]
    Sequence,
    Token,
}

impl MinceGranularity {
    pub fn as_str(self) -> &'static str {
        match self {
            MinceGranularity::Sequence => "sequence",
            MinceGranularity::Token => "token",
        }
    }
}

impl fmt::Display for MinceGranularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MinceGranularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequence" => Ok(MinceGranularity::Sequence),
            "token" => Ok(MinceGranularity::Token),
            _ => Err(format!("unknown MinCE granularity `{s}`")),
        }
    }
}

/// Fuses the pivot's and a source's distributions by keeping whichever has
/// the lower cross-entropy against the gold tokens. Ties go to the pivot.
///
/// At sequence granularity the whole winning matrix is returned. At token
/// granularity each masked-in row is chosen independently and masked-out rows
/// come from the pivot.
pub fn fuse_mince<T: Element>(
    pivot: &DistMatrix<T>,
    source: &DistMatrix<T>,
    gold: &GoldLabels,
    granularity: MinceGranularity,
) -> Result<DistMatrix<T>, FusionError> {
    if pivot.shape() != source.shape() {
        return Err(FusionError::DimensionMismatch(format!(
            "pivot {:?} and source {:?} differ in shape",
            pivot.shape(),
            source.shape()
        )));
    }
    match granularity {
        MinceGranularity::Sequence => {
            let ce_pivot = cross_entropy(pivot, gold, DEFAULT_CLAMP)?;
            let ce_source = cross_entropy(source, gold, DEFAULT_CLAMP)?;
            Ok(if ce_source < ce_pivot {
                source.clone()
            } else {
                pivot.clone()
            })
        }
        MinceGranularity::Token => {
            // Validates dimensions and gold ids.
            cross_entropy(pivot, gold, DEFAULT_CLAMP)?;
            let mut values = Vec::with_capacity(pivot.values().len());
            for i in 0..pivot.rows() {
                let take_source = gold.loss_mask[i] && {
                    let id = gold.token_ids[i];
                    token_cross_entropy(source, i, id, DEFAULT_CLAMP)
                        < token_cross_entropy(pivot, i, id, DEFAULT_CLAMP)
                };
                let row = if take_source { source.row(i) } else { pivot.row(i) };
                values.extend_from_slice(row);
            }
            Ok(DistMatrix::from_rows_unchecked(pivot.rows(), pivot.cols(), values))
        }
    }
}
