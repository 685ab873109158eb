use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::tokenize;
use crate::transformer::{BOS, EOS, NUM_RESERVED, PAD, UNK};

const RESERVED: [&str; NUM_RESERVED as usize] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word/id map. Ids 0..4 are reserved; the rest are ordered by descending
/// corpus frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_words(words: Vec<String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut ids = HashMap::new();
        for w in words {
            let id = all.len() as u32;
            if RESERVED.contains(&w.as_str()) || ids.insert(w.clone(), id).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry {w:?}")));
            }
            all.push(w);
        }
        Ok(Vocabulary { words: all, ids })
    }

    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for c in captions {
            for w in tokenize(c) {
                *freq.entry(w).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_words(words.into_iter().map(|(w, _)| w).collect())
            .expect("frequency keys are unique")
    }

    /// Total size including the reserved ids.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() == NUM_RESERVED as usize
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Word ids of `caption` (no BOS/EOS); unknown words map to UNK.
    pub fn encode(&self, caption: &str) -> Vec<u32> {
        tokenize(caption).iter().map(|w| self.id(w)).collect()
    }

    /// Words up to the first EOS, skipping PAD and BOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Writes non-reserved words one per line; line `n` (from 0) holds id `n + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words[NUM_RESERVED as usize..].join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        if let Some(n) = words
            .iter()
            .position(|w| w.is_empty() || w.contains(char::is_whitespace))
        {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: "vocabulary entries must be single non-empty words".into(),
            });
        }
        Self::from_words(words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = Vocabulary::build(["b a c", "a b", "a d"]);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("c"), 6);
        assert_eq!(v.id("d"), 7);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocabulary::build(["a red cup"]);
        let ids = v.encode("A red cup.");
        assert_eq!(v.decode(&ids), "a red cup");
        let mut framed = vec![BOS];
        framed.extend(&ids);
        framed.extend([EOS, 4, PAD]);
        assert_eq!(v.decode(&framed), "a red cup");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocabulary::build(["x y y z z z"]);
        v.save(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "z\ny\nx\n");
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
