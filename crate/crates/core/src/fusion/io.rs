//! Distribution matrices on disk: a checkpoint container holding one f64
//! tensor `dist` of shape `[N, V]`, with JSON lists in the metadata under
//! `tokens` (token strings of the sequence), optionally `gold` (gold id per
//! row) and optionally `vocab` (token string per column id).

use std::collections::BTreeMap;
use std::path::Path;

use crate::store::{load_checkpoint, save_checkpoint};
use crate::tensor::{Checkpoint, Tensor};

use super::{DistMatrix, FusionError};

pub const DIST_TENSOR: &str = "dist";

#[derive(Debug, Clone, PartialEq)]
pub struct DistFile {
    pub matrix: DistMatrix<f64>,
    pub tokens: Vec<String>,
    pub gold: Option<Vec<usize>>,
    pub vocab: Option<Vec<String>>,
}

impl DistFile {
    pub fn new(matrix: DistMatrix<f64>) -> Self {
        DistFile {
            matrix,
            tokens: Vec::new(),
            gold: None,
            vocab: None,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (rows, cols) = self.matrix.shape();
        let tensor = Tensor::new(vec![rows, cols], self.matrix.values().to_vec())
            .expect("matrix shape matches payload");
        let mut metadata = BTreeMap::new();
        metadata.insert("tokens".to_string(), serde_json::to_string(&self.tokens).unwrap());
        if let Some(gold) = &self.gold {
            metadata.insert("gold".to_string(), serde_json::to_string(gold).unwrap());
        }
        if let Some(vocab) = &self.vocab {
            metadata.insert("vocab".to_string(), serde_json::to_string(vocab).unwrap());
        }
        Checkpoint {
            tensors: [(DIST_TENSOR.to_string(), tensor)].into_iter().collect(),
            metadata,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, FusionError> {
        let tensor = ckpt
            .get(DIST_TENSOR)
            .ok_or_else(|| FusionError::Format(format!("no `{DIST_TENSOR}` tensor")))?;
        let &[rows, cols] = tensor.shape() else {
            return Err(FusionError::Format(format!(
                "`{DIST_TENSOR}` must be 2-D, got shape {:?}",
                tensor.shape()
            )));
        };
        let values = tensor
            .as_slice::<f64>()
            .ok_or_else(|| FusionError::Format(format!("`{DIST_TENSOR}` must be F64")))?
            .to_vec();
        let matrix = DistMatrix::new(rows, cols, values)?;
        let tokens = read_list(ckpt, "tokens")?.unwrap_or_default();
        let gold: Option<Vec<usize>> = read_list(ckpt, "gold")?;
        if let Some(g) = &gold {
            if g.len() != rows {
                return Err(FusionError::Format(format!("{} gold labels for {rows} rows", g.len())));
            }
        }
        let vocab: Option<Vec<String>> = read_list(ckpt, "vocab")?;
        if let Some(v) = &vocab {
            if v.len() != cols {
                return Err(FusionError::Format(format!("vocab of {} entries for {cols} columns", v.len())));
            }
        }
        Ok(DistFile {
            matrix,
            tokens,
            gold,
            vocab,
        })
    }
}

fn read_list<T: serde::de::DeserializeOwned>(ckpt: &Checkpoint, key: &str) -> Result<Option<Vec<T>>, FusionError> {
    ckpt.metadata
        .get(key)
        .map(|raw| {
            serde_json::from_str(raw)
                .map_err(|e| FusionError::Format(format!("metadata `{key}` is not a valid JSON list: {e}")))
        })
        .transpose()
}

pub fn save_dist(file: &DistFile, path: impl AsRef<Path>) -> Result<(), FusionError> {
    Ok(save_checkpoint(&file.to_checkpoint(), path)?)
}

pub fn load_dist(path: impl AsRef<Path>) -> Result<DistFile, FusionError> {
    DistFile::from_checkpoint(&load_checkpoint(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.st");
        let file = DistFile {
            matrix: DistMatrix::softmax(2, 3, &[0.0, 1.0, 2.0, -1.0, 0.5, 0.0]),
            tokens: vec!["a".into(), "\"q\"".into()],
            gold: Some(vec![2, 0]),
            vocab: Some(vec!["x".into(), "y".into(), "z".into()]),
        };
        save_dist(&file, &path).unwrap();
        assert_eq!(load_dist(&path).unwrap(), file);
    }

    #[test]
    fn rejects_wrong_layout() {
        let ck = Checkpoint::new().with_tensor("dist", Tensor::vector(vec![1.0]));
        assert!(matches!(DistFile::from_checkpoint(&ck), Err(FusionError::Format(_))));
        let ck = Checkpoint::new().with_tensor("other", Tensor::vector(vec![1.0]));
        assert!(DistFile::from_checkpoint(&ck).is_err());
        let ck = Checkpoint::new().with_tensor("dist", Tensor::new(vec![1, 2], vec![0.7, 0.7]).unwrap());
        assert!(matches!(DistFile::from_checkpoint(&ck), Err(FusionError::NotStochastic { .. })));
    }
}
