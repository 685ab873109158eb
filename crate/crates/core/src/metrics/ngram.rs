use std::collections::HashMap;
use std::hash::Hash;

/// Counts of every n-gram of one order in a token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NGramCounts<W: Eq + Hash> {
    pub n: usize,
    pub counts: HashMap<Vec<W>, usize>,
}

impl<W: Clone + Eq + Hash> NGramCounts<W> {
    pub fn new(tokens: &[W], n: usize) -> Self {
        let mut counts = HashMap::new();
        if n > 0 && tokens.len() >= n {
            for w in tokens.windows(n) {
                *counts.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        NGramCounts { n, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn get(&self, gram: &[W]) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_bigrams() {
        let c = NGramCounts::new(&["a", "b", "a", "b"], 2);
        assert_eq!(c.get(&["a", "b"]), 2);
        assert_eq!(c.get(&["b", "a"]), 1);
        assert_eq!(c.total(), 3);
        assert!(NGramCounts::new(&["a"], 2).counts.is_empty());
    }
}
