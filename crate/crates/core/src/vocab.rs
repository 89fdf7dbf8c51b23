use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type TokenId = u32;

/// Token inventory shared by prompts, answers and rendered feedback.
///
/// The end-of-sequence token and the three FAP separators are ordinary
/// members of the vocab, so a policy can condition on them like any other
/// token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRecord", into = "VocabRecord")]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, TokenId>,
    eos: TokenId,
    separators: [TokenId; 3],
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    tokens: Vec<String>,
    eos: String,
    separators: [String; 3],
}

impl TryFrom<VocabRecord> for Vocab {
    type Error = Error;

    fn try_from(r: VocabRecord) -> Result<Self> {
        Vocab::new(r.tokens, &r.eos, [&r.separators[0], &r.separators[1], &r.separators[2]])
    }
}

impl From<Vocab> for VocabRecord {
    fn from(v: Vocab) -> Self {
        let name = |t: TokenId| v.names[t as usize].clone();
        VocabRecord {
            eos: name(v.eos),
            separators: v.separators.map(name),
            tokens: v.names,
        }
    }
}

impl Vocab {
    pub fn new(tokens: Vec<String>, eos: &str, separators: [&str; 3]) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::InvalidVocab(format!(
                "need at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::InvalidVocab(format!("reserved token {name:?} missing")))
        };
        let eos = lookup(eos)?;
        let separators = [lookup(separators[0])?, lookup(separators[1])?, lookup(separators[2])?];
        let mut reserved = vec![eos, separators[0], separators[1], separators[2]];
        reserved.sort_unstable();
        reserved.dedup();
        if reserved.len() != 4 {
            return Err(Error::InvalidVocab("reserved tokens must be distinct".into()));
        }
        Ok(Vocab {
            names: tokens,
            index,
            eos,
            separators,
        })
    }

    /// Plain vocab `t0..t{size-4}` plus the reserved tokens, for tests and
    /// gradient checks.
    pub fn synthetic(content: usize) -> Self {
        let mut tokens: Vec<String> = (0..content).map(|i| format!("t{i}")).collect();
        tokens.extend(["<eos>", "<sep1>", "<sep2>", "<sep3>"].map(String::from));
        Vocab::new(tokens, "<eos>", ["<sep1>", "<sep2>", "<sep3>"]).expect("synthetic vocab")
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn separators(&self) -> [TokenId; 3] {
        self.separators
    }

    pub fn is_separator(&self, t: TokenId) -> bool {
        self.separators.contains(&t)
    }

    pub fn name(&self, t: TokenId) -> Option<&str> {
        self.names.get(t as usize).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<TokenId> {
        self.index.get(name).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.names
    }

    pub fn check(&self, t: TokenId) -> Result<()> {
        if (t as usize) < self.names.len() {
            Ok(())
        } else {
            Err(Error::UnknownToken {
                token: t,
                vocab_size: self.names.len(),
            })
        }
    }

    pub fn encode(&self, names: &[&str]) -> Result<Vec<TokenId>> {
        names
            .iter()
            .map(|n| {
                self.id(n)
                    .ok_or_else(|| Error::InvalidVocab(format!("unknown token name {n:?}")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[TokenId]) -> Vec<String> {
        tokens
            .iter()
            .map(|&t| self.name(t).unwrap_or("<?>").to_string())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_missing_reserved() {
        let toks = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(Vocab::new(toks(&["a", "a", "e", "s1", "s2", "s3"]), "e", ["s1", "s2", "s3"]).is_err());
        assert!(Vocab::new(toks(&["a", "e", "s1", "s2"]), "e", ["s1", "s2", "s3"]).is_err());
        assert!(Vocab::new(toks(&["a", "e", "s1", "s2"]), "e", ["s1", "s2", "s1"]).is_err());
        let v = Vocab::new(toks(&["a", "e", "s1", "s2", "s3"]), "e", ["s1", "s2", "s3"]).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.eos(), 1);
        assert!(v.is_separator(4));
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocab::synthetic(3);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
    }
}
