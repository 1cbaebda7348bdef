//! Two deliberately different tokenizers: one token per character, and one
//! token per pair of characters.

use std::collections::{BTreeSet, HashMap};

pub const UNK_TOKEN: &str = "<unk>";
pub const UNK_ID: usize = 0;

/// Character vocabulary; id 0 is reserved for unknown characters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    tokens: Vec<String>,
    ids: HashMap<char, usize>,
}

impl CharVocab {
    /// Vocabulary of every distinct character in `texts`, sorted, after `<unk>`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let chars: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        let mut tokens = vec![UNK_TOKEN.to_string()];
        tokens.extend(chars.into_iter().map(String::from));
        Self::from_tokens(tokens).expect("built from single characters")
    }

    /// Rebuilds a vocabulary from its token list (index = id). Entry 0 must be
    /// `<unk>` and every other entry a single character.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(format!("vocabulary must start with `{UNK_TOKEN}`"));
        }
        let mut ids = HashMap::new();
        for (id, tok) in tokens.iter().enumerate().skip(1) {
            let mut chars = tok.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => {
                    if ids.insert(c, id).is_some() {
                        return Err(format!("duplicate vocabulary entry `{tok}`"));
                    }
                }
                _ => return Err(format!("vocabulary entry `{tok}` is not a single character")),
            }
        }
        Ok(CharVocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, c: char) -> usize {
        self.ids.get(&c).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK_TOKEN, String::as_str)
    }
}

/// Token strings of a character-level tokenization.
pub fn char_tokens(text: &str) -> Vec<String> {
    text.chars().map(String::from).collect()
}

/// Token strings of a character-pair tokenization; an odd final character is
/// its own token.
pub fn pair_tokens(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    chars.chunks(2).map(|c| c.iter().collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_encodes_with_unk() {
        let v = CharVocab::from_texts(["hello", "help"]);
        assert_eq!(v.tokens(), ["<unk>", "e", "h", "l", "o", "p"]);
        assert_eq!(v.encode("hex"), vec![2, 1, UNK_ID]);
        assert_eq!(v.token(4), "o");
        assert_eq!(CharVocab::from_tokens(v.tokens().to_vec()).unwrap(), v);
    }

    #[test]
    fn vocab_from_tokens_validates() {
        assert!(CharVocab::from_tokens(vec!["a".into()]).is_err());
        assert!(CharVocab::from_tokens(vec![UNK_TOKEN.into(), "ab".into()]).is_err());
        assert!(CharVocab::from_tokens(vec![UNK_TOKEN.into(), "a".into(), "a".into()]).is_err());
    }

    #[test]
    fn tokenizers_differ() {
        assert_eq!(char_tokens("abc"), ["a", "b", "c"]);
        assert_eq!(pair_tokens("abcde"), ["ab", "cd", "e"]);
        assert!(pair_tokens("").is_empty());
    }
}
