use crate::scalar::Element;

use super::{AlignmentMap, DistMatrix, FusionError};

/// Maps a source model's distributions onto the pivot's rows and vocabulary.
///
/// For each pivot row with an aligned source row, the source's `top_k` most
/// probable tokens (ties: lower id) are moved to their pivot ids through the
/// vocabulary map. Unmapped mass is dropped and the row renormalized; a row
/// that keeps all its mass is copied as is. Pivot rows with no aligned source
/// row, or whose mass was entirely dropped, become one-hot on `gold` when
/// given and uniform otherwise.
pub fn project_distribution<T: Element>(
    source: &DistMatrix<T>,
    map: &AlignmentMap,
    pivot_rows: usize,
    pivot_vocab: usize,
    top_k: usize,
    gold: Option<&[usize]>,
) -> Result<DistMatrix<T>, FusionError> {
    if top_k < 1 {
        return Err(FusionError::InvalidTopK(top_k));
    }
    if pivot_vocab == 0 {
        return Err(FusionError::DimensionMismatch("pivot vocabulary is empty".into()));
    }
    if let Some(g) = gold {
        if g.len() != pivot_rows {
            return Err(FusionError::DimensionMismatch(format!(
                "{} gold labels for {pivot_rows} pivot rows",
                g.len()
            )));
        }
        if let Some(&id) = g.iter().find(|&&id| id >= pivot_vocab) {
            return Err(FusionError::OutOfVocab { id, vocab: pivot_vocab });
        }
    }
    for &(s, p) in &map.pairs {
        if s >= source.rows() || p >= pivot_rows {
            return Err(FusionError::DimensionMismatch(format!(
                "alignment pair ({s}, {p}) outside {} source / {pivot_rows} pivot rows",
                source.rows()
            )));
        }
    }
    if let Some((&s, &p)) = map
        .vocab_map
        .iter()
        .find(|(&s, &p)| s >= source.cols() || p >= pivot_vocab)
    {
        return Err(FusionError::DimensionMismatch(format!(
            "vocabulary mapping {s} -> {p} out of range"
        )));
    }

    let mut values = Vec::with_capacity(pivot_rows * pivot_vocab);
    for r in 0..pivot_rows {
        let projected = map
            .source_row_for(r)
            .and_then(|s| project_row(source.row(s), map, pivot_vocab, top_k));
        match projected {
            Some(row) => values.extend(row.into_iter().map(T::narrow)),
            None => {
                let fallback = match gold {
                    Some(g) => {
                        let mut row = vec![T::zero(); pivot_vocab];
                        row[g[r]] = T::one();
                        row
                    }
                    None => vec![T::narrow(1.0 / pivot_vocab as f64); pivot_vocab],
                };
                values.extend(fallback);
            }
        }
    }
    Ok(DistMatrix::from_rows_unchecked(pivot_rows, pivot_vocab, values))
}

fn project_row<T: Element>(row: &[T], map: &AlignmentMap, pivot_vocab: usize, top_k: usize) -> Option<Vec<f64>> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].widen().total_cmp(&row[a].widen()).then(a.cmp(&b)));
    let mut out = vec![0.0f64; pivot_vocab];
    let mut dropped = false;
    for (rank, &id) in order.iter().enumerate() {
        let p = row[id].widen();
        if p == 0.0 {
            continue;
        }
        match map.vocab_map.get(&id) {
            Some(&pid) if rank < top_k => out[pid] += p,
            _ => dropped = true,
        }
    }
    let kept: f64 = out.iter().sum();
    if kept <= 0.0 {
        return None;
    }
    if dropped {
        out.iter_mut().for_each(|v| *v /= kept);
    }
    Some(out)
}
