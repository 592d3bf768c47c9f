//! Token vocabulary: four fixed specials, then corpus tokens in first-seen
//! order. Tokens are lowercased on the way in, matching the answer
//! normalization used for accuracy scoring.

use std::collections::HashMap;

use crate::metrics::normalize_answer;
use crate::model::ModelError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const BEGIN: usize = 1;
    pub const END: usize = 2;
    pub const SEP: usize = 3;

    const SPECIALS: [&'static str; 4] = ["<pad>", "<s>", "</s>", "<sep>"];

    /// Build from whitespace-tokenized, lowercased texts.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for text in texts {
            for tok in normalize_answer(text).split_whitespace() {
                if !ids.contains_key(tok) {
                    ids.insert(tok.to_string(), tokens.len());
                    tokens.push(tok.to_string());
                }
            }
        }
        Vocab { tokens, ids }
    }

    /// Rebuild from a stored id-ordered token list (checkpoints).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, ModelError> {
        for (i, special) in Self::SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(ModelError::BadConfig(format!(
                    "vocab slot {i} must be the special token '{special}'"
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if ids.insert(tok.clone(), i).is_some() {
                return Err(ModelError::BadConfig(format!(
                    "vocab token '{tok}' appears twice"
                )));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the specials are always present
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// All tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenize and map to ids; any token outside the vocabulary is an
    /// error naming the token.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, ModelError> {
        normalize_answer(text)
            .split_whitespace()
            .map(|tok| {
                self.id(tok).ok_or_else(|| ModelError::UnknownToken {
                    token: tok.to_string(),
                })
            })
            .collect()
    }

    /// Join tokens back into text. Unknown ids render as `<unk:id>` rather
    /// than failing — decoding is for display.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| match self.token(id) {
                Some(t) => t.to_string(),
                None => format!("<unk:{id}>"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_pinned_and_first() {
        let v = Vocab::build(["yes no"]);
        assert_eq!(v.token(Vocab::PAD), Some("<pad>"));
        assert_eq!(v.token(Vocab::BEGIN), Some("<s>"));
        assert_eq!(v.token(Vocab::END), Some("</s>"));
        assert_eq!(v.token(Vocab::SEP), Some("<sep>"));
        assert_eq!(v.id("yes"), Some(4));
        assert_eq!(v.id("no"), Some(5));
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn first_seen_order_and_dense_ids() {
        let v = Vocab::build(["c b", "a c b", "d"]);
        let ids: Vec<usize> = ["c", "b", "a", "d"]
            .iter()
            .map(|t| v.id(t).unwrap())
            .collect();
        assert_eq!(ids, vec![4, 5, 6, 7]);
        for id in 0..v.len() {
            assert!(v.token(id).is_some());
        }
    }

    #[test]
    fn case_folds_on_build_and_encode() {
        let v = Vocab::build(["Yes No"]);
        assert_eq!(v.encode("YES  no").unwrap(), vec![4, 5]);
        assert_eq!(v.encode("yes").unwrap(), vec![4]);
    }

    #[test]
    fn unknown_token_error_names_it() {
        let v = Vocab::build(["yes"]);
        match v.encode("yes maybe") {
            Err(ModelError::UnknownToken { token }) => assert_eq!(token, "maybe"),
            other => panic!("expected unknown token error, got {other:?}"),
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::build(["the cat sat on the mat"]);
        let ids = v.encode("the mat sat").unwrap();
        assert_eq!(v.decode(&ids), "the mat sat");
        assert_eq!(v.decode(&[999]), "<unk:999>");
    }

    #[test]
    fn from_tokens_validates_specials_and_uniqueness() {
        let good = Vocab::build(["x y"]);
        let back = Vocab::from_tokens(good.tokens().to_vec()).unwrap();
        assert_eq!(back, good);

        assert!(Vocab::from_tokens(vec!["<pad>".into(), "<s>".into()]).is_err());
        let mut dup = good.tokens().to_vec();
        dup.push("x".into());
        assert!(Vocab::from_tokens(dup).is_err());
    }
}
