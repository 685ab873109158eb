use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use super::ngram::NGramCounts;
use crate::error::{Error, Result};

/// Width of the Gaussian length penalty.
pub const CIDER_SIGMA: f64 = 6.0;
const MAX_N: usize = 4;

/// Number of images whose reference set contains each n-gram (orders 1..=4).
#[derive(Clone, Debug)]
pub struct DocumentFrequencies<W: Eq + Hash> {
    df: HashMap<Vec<W>, usize>,
    n_docs: usize,
}

impl<W: Clone + Eq + Hash> DocumentFrequencies<W> {
    /// `corpus[i]` holds the reference captions of image `i`.
    pub fn from_references(corpus: &[Vec<Vec<W>>]) -> Self {
        let mut df = HashMap::new();
        for refs in corpus {
            let mut seen: HashSet<Vec<W>> = HashSet::new();
            for r in refs {
                for n in 1..=MAX_N {
                    if r.len() >= n {
                        seen.extend(r.windows(n).map(<[W]>::to_vec));
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        DocumentFrequencies {
            df,
            n_docs: corpus.len(),
        }
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn get(&self, gram: &[W]) -> usize {
        self.df.get(gram).copied().unwrap_or(0)
    }

    fn idf(&self, gram: &[W]) -> f64 {
        (self.n_docs as f64).ln() - (self.get(gram).max(1) as f64).ln()
    }
}

struct TfIdf<W: Eq + Hash> {
    vecs: Vec<HashMap<Vec<W>, f64>>,
    norms: Vec<f64>,
    len: usize,
}

/// Scores candidates against fixed references; reference vectors are built
/// once per call site rather than per candidate.
pub struct CiderScorer<'a, W: Eq + Hash> {
    df: &'a DocumentFrequencies<W>,
}

impl<'a, W: Clone + Eq + Hash> CiderScorer<'a, W> {
    pub fn new(df: &'a DocumentFrequencies<W>) -> Result<Self> {
        if df.n_docs == 0 {
            return Err(Error::Usage(
                "CIDEr-D needs document frequencies from at least one image".into(),
            ));
        }
        Ok(CiderScorer { df })
    }

    fn vectorize(&self, tokens: &[W]) -> TfIdf<W> {
        let mut vecs = Vec::with_capacity(MAX_N);
        let mut norms = Vec::with_capacity(MAX_N);
        for n in 1..=MAX_N {
            let counts = NGramCounts::new(tokens, n);
            let v: HashMap<Vec<W>, f64> = counts
                .counts
                .into_iter()
                .map(|(g, tf)| {
                    let w = tf as f64 * self.df.idf(&g);
                    (g, w)
                })
                .collect();
            norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
            vecs.push(v);
        }
        TfIdf {
            vecs,
            norms,
            len: tokens.len(),
        }
    }

    fn sim(hyp: &TfIdf<W>, r: &TfIdf<W>) -> f64 {
        let delta = hyp.len as f64 - r.len as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut total = 0.0;
        for n in 0..MAX_N {
            let mut val = 0.0;
            for (g, &vh) in &hyp.vecs[n] {
                if let Some(&vr) = r.vecs[n].get(g) {
                    val += vh.min(vr) * vr;
                }
            }
            if hyp.norms[n] != 0.0 && r.norms[n] != 0.0 {
                val /= hyp.norms[n] * r.norms[n];
            }
            total += val * penalty;
        }
        total / MAX_N as f64
    }

    pub fn score(&self, candidate: &[W], references: &[Vec<W>]) -> f64 {
        if references.is_empty() {
            return 0.0;
        }
        let hyp = self.vectorize(candidate);
        let sum: f64 = references
            .iter()
            .map(|r| Self::sim(&hyp, &self.vectorize(r)))
            .sum();
        10.0 * sum / references.len() as f64
    }
}

/// Consensus score of one candidate: TF-IDF n-gram similarity with clipped
/// candidate weights and a Gaussian length penalty, averaged over n = 1..4
/// and over references, scaled by 10.
pub fn cider_d<W: Clone + Eq + Hash>(
    candidate: &[W],
    references: &[Vec<W>],
    df: &DocumentFrequencies<W>,
) -> Result<f64> {
    Ok(CiderScorer::new(df)?.score(candidate, references))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    fn corpus() -> Vec<Vec<Vec<&'static str>>> {
        vec![
            vec![w("a red cup on a table")],
            vec![w("a dog near the door")],
            vec![w("two birds in a tree")],
        ]
    }

    #[test]
    fn identical_sole_reference_scores_ten() {
        let c = corpus();
        let df = DocumentFrequencies::from_references(&c);
        let s = cider_d(&w("a dog near the door"), &c[1], &df).unwrap();
        assert!((s - 10.0).abs() < 1e-9, "{s}");
    }

    #[test]
    fn disjoint_scores_zero() {
        let c = corpus();
        let df = DocumentFrequencies::from_references(&c);
        assert_eq!(cider_d(&w("green grass"), &c[0], &df).unwrap(), 0.0);
    }

    #[test]
    fn empty_frequencies_are_a_usage_error() {
        let df = DocumentFrequencies::<&str>::from_references(&[]);
        assert!(matches!(
            cider_d(&w("a"), &[w("a")], &df),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn repeating_words_does_not_inflate() {
        let c = corpus();
        let df = DocumentFrequencies::from_references(&c);
        let good = cider_d(&w("a red cup on a table"), &c[0], &df).unwrap();
        let spam = cider_d(&w("red red red red red red"), &c[0], &df).unwrap();
        assert!(spam < good);
    }

    #[test]
    fn document_frequency_counts_images_not_occurrences() {
        let c = vec![vec![w("a a"), w("a b")], vec![w("a c")]];
        let df = DocumentFrequencies::from_references(&c);
        assert_eq!(df.get(&["a"]), 2);
        assert_eq!(df.get(&["a", "a"]), 1);
    }
}
