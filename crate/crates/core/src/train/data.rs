use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::tokenize::CharVocab;
use super::TrainError;

/// Token ids with a per-token flag marking assistant (loss-bearing) tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueSample {
    pub token_ids: Vec<usize>,
    pub role_mask: Vec<bool>,
}

impl DialogueSample {
    pub fn new(token_ids: Vec<usize>, role_mask: Vec<bool>) -> Result<Self, TrainError> {
        if token_ids.len() != role_mask.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "{} tokens but {} role flags",
                token_ids.len(),
                role_mask.len()
            )));
        }
        Ok(DialogueSample { token_ids, role_mask })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dialogue {
    pub turns: Vec<Turn>,
}

/// Parses line-delimited dialogues. Blank lines are skipped.
pub fn parse_dialogues(text: &str) -> Result<Vec<Dialogue>, TrainError> {
    let mut dialogues = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: Dialogue = serde_json::from_str(line).map_err(|e| TrainError::Corpus {
            line: i + 1,
            message: e.to_string(),
        })?;
        dialogues.push(d);
    }
    if dialogues.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    Ok(dialogues)
}

/// Tokenizes each dialogue per character, masks user turns, and cuts the
/// concatenation into blocks of at most `block_len` tokens. Blocks without
/// any assistant token are dropped.
pub fn blocks_from_dialogues(dialogues: &[Dialogue], vocab: &CharVocab, block_len: usize) -> Vec<DialogueSample> {
    let mut samples = Vec::new();
    for d in dialogues {
        let mut ids = Vec::new();
        let mut mask = Vec::new();
        for turn in &d.turns {
            let encoded = vocab.encode(&turn.text);
            mask.extend(std::iter::repeat_n(turn.role == Role::Assistant, encoded.len()));
            ids.extend(encoded);
        }
        for (ids, mask) in ids.chunks(block_len).zip(mask.chunks(block_len)) {
            if mask.iter().any(|&m| m) {
                samples.push(DialogueSample {
                    token_ids: ids.to_vec(),
                    role_mask: mask.to_vec(),
                });
            }
        }
    }
    samples
}

pub fn ingest_dialogues(path: impl AsRef<Path>, vocab: &CharVocab, block_len: usize) -> Result<Vec<DialogueSample>, TrainError> {
    if block_len < 2 {
        return Err(TrainError::InvalidConfig(format!("block_len must be at least 2, got {block_len}")));
    }
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(blocks_from_dialogues(&parse_dialogues(&text)?, vocab, block_len))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> CharVocab {
        CharVocab::from_texts(["abcdefgh"])
    }

    fn ingest(text: &str, block_len: usize) -> Result<Vec<DialogueSample>, TrainError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, text).unwrap();
        ingest_dialogues(&path, &vocab(), block_len)
    }

    #[test]
    fn single_assistant_turn() {
        let s = ingest(r#"{"turns":[{"role":"assistant","text":"ab"}]}"#, 10).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].token_ids, vec![1, 2]);
        assert_eq!(s[0].role_mask, vec![true, true]);
    }

    #[test]
    fn user_turns_are_masked() {
        let s = ingest(
            r#"{"turns":[{"role":"user","text":"ab"},{"role":"assistant","text":"cd"}]}"#,
            10,
        )
        .unwrap();
        assert_eq!(s[0].role_mask, vec![false, false, true, true]);
    }

    #[test]
    fn long_turns_are_blocked() {
        let s = ingest(r#"{"turns":[{"role":"assistant","text":"abcde"}]}"#, 2).unwrap();
        assert_eq!(s.iter().map(DialogueSample::len).collect::<Vec<_>>(), vec![2, 2, 1]);
    }

    #[test]
    fn blocks_without_assistant_tokens_are_dropped() {
        let s = ingest(
            r#"{"turns":[{"role":"user","text":"abcd"},{"role":"assistant","text":"e"}]}"#,
            2,
        )
        .unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].token_ids, vec![5]);
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let s = ingest(r#"{"turns":[{"role":"assistant","text":"az"}]}"#, 4).unwrap();
        assert_eq!(s[0].token_ids, vec![1, 0]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"turns\":[]}\n\n{\"turns\": oops}\n";
        match ingest(text, 4) {
            Err(TrainError::Corpus { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            ingest(r#"{"turns":[{"role":"system","text":"x"}]}"#, 4),
            Err(TrainError::Corpus { line: 1, .. })
        ));
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(ingest("", 4), Err(TrainError::EmptyCorpus)));
        assert!(matches!(ingest("\n  \n", 4), Err(TrainError::EmptyCorpus)));
    }

    #[test]
    fn tiny_block_len_rejected() {
        assert!(matches!(ingest("{\"turns\":[]}", 1), Err(TrainError::InvalidConfig(_))));
    }
}
