//! Monotone alignment between two tokenizations of the same text.

use std::collections::{BTreeMap, HashMap};

/// Row correspondences between a source and a pivot tokenization, plus the
/// source→pivot vocabulary mapping used to move probability mass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlignmentMap {
    /// `(source row, pivot row)`, strictly increasing in both coordinates.
    pub pairs: Vec<(usize, usize)>,
    pub vocab_map: BTreeMap<usize, usize>,
}

impl AlignmentMap {
    pub fn with_vocab_map(mut self, vocab_map: BTreeMap<usize, usize>) -> Self {
        self.vocab_map = vocab_map;
        self
    }

    /// Source row aligned to `pivot_row`, if any.
    pub fn source_row_for(&self, pivot_row: usize) -> Option<usize> {
        self.pairs
            .binary_search_by_key(&pivot_row, |&(_, p)| p)
            .ok()
            .map(|k| self.pairs[k].0)
    }
}

/// Character-level edit distance divided by the longer string's length.
pub fn normalized_edit_distance(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        0.0
    } else {
        strsim::levenshtein(a, b) as f64 / longest as f64
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Step {
    Diagonal,
    SkipSource,
    SkipPivot,
}

/// Aligns two token sequences with edit-distance dynamic programming.
///
/// Diagonal moves cost the normalized character edit distance between the two
/// tokens (zero for identical tokens); skipping a token on either side costs 1.
/// The table is filled over suffixes and traced from the front, so among
/// equal-cost moves a diagonal move is preferred, then skipping a source
/// token, then skipping a pivot token, and earlier positions are matched
/// first. The pairs are the diagonal moves on the resulting path.
pub fn align_tokens<S: AsRef<str>>(source: &[S], pivot: &[S]) -> AlignmentMap {
    let (n, m) = (source.len(), pivot.len());
    if n == 0 || m == 0 {
        return AlignmentMap::default();
    }
    let width = m + 1;
    let at = |i: usize, j: usize| i * width + j;
    // cost[at(i, j)] aligns source[i..] with pivot[j..].
    let mut cost = vec![0.0f64; (n + 1) * width];
    let mut step = vec![Step::Diagonal; (n + 1) * width];
    for i in 0..n {
        cost[at(i, m)] = (n - i) as f64;
        step[at(i, m)] = Step::SkipSource;
    }
    for j in 0..m {
        cost[at(n, j)] = (m - j) as f64;
        step[at(n, j)] = Step::SkipPivot;
    }
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            let a = source[i].as_ref();
            let b = pivot[j].as_ref();
            let sub = if a == b { 0.0 } else { normalized_edit_distance(a, b) };
            let mut best = cost[at(i + 1, j + 1)] + sub;
            let mut choice = Step::Diagonal;
            let skip_source = cost[at(i + 1, j)] + 1.0;
            if skip_source < best {
                best = skip_source;
                choice = Step::SkipSource;
            }
            let skip_pivot = cost[at(i, j + 1)] + 1.0;
            if skip_pivot < best {
                best = skip_pivot;
                choice = Step::SkipPivot;
            }
            cost[at(i, j)] = best;
            step[at(i, j)] = choice;
        }
    }
    let mut pairs = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        match step[at(i, j)] {
            Step::Diagonal => {
                pairs.push((i, j));
                i += 1;
                j += 1;
            }
            Step::SkipSource => i += 1,
            Step::SkipPivot => j += 1,
        }
    }
    AlignmentMap {
        pairs,
        vocab_map: BTreeMap::new(),
    }
}

/// Identity mapping for token strings present in both vocabularies (index = id).
pub fn build_vocab_map<S: AsRef<str>>(source_vocab: &[S], pivot_vocab: &[S]) -> BTreeMap<usize, usize> {
    let mut pivot_ids: HashMap<&str, usize> = HashMap::new();
    for (id, tok) in pivot_vocab.iter().enumerate() {
        pivot_ids.entry(tok.as_ref()).or_insert(id);
    }
    source_vocab
        .iter()
        .enumerate()
        .filter_map(|(id, tok)| pivot_ids.get(tok.as_ref()).map(|&p| (id, p)))
        .collect()
}
