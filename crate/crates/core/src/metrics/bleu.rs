use std::collections::HashMap;
use std::hash::Hash;

use super::ngram::NGramCounts;

/// Clipped n-gram matches and lengths of one candidate, summable over a corpus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn new<W: Clone + Eq + Hash>(candidate: &[W], references: &[Vec<W>], max_n: usize) -> Self {
        let mut matches = vec![0; max_n];
        let mut totals = vec![0; max_n];
        for n in 1..=max_n {
            let cand = NGramCounts::new(candidate, n);
            let mut max_ref: HashMap<&[W], usize> = HashMap::new();
            let ref_counts: Vec<_> = references.iter().map(|r| NGramCounts::new(r, n)).collect();
            for rc in &ref_counts {
                for (g, &c) in &rc.counts {
                    let e = max_ref.entry(g.as_slice()).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            matches[n - 1] = cand
                .counts
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g.as_slice()).copied().unwrap_or(0)))
                .sum();
            totals[n - 1] = cand.total();
        }
        // closest reference length, ties to the shorter one
        let c = candidate.len();
        let ref_len = references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        BleuStats {
            matches,
            totals,
            cand_len: c,
            ref_len,
        }
    }

    fn add(&mut self, other: &BleuStats) {
        if self.matches.is_empty() {
            self.matches = vec![0; other.matches.len()];
            self.totals = vec![0; other.totals.len()];
        }
        for i in 0..self.matches.len() {
            self.matches[i] += other.matches[i];
            self.totals[i] += other.totals[i];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    /// Geometric mean of clipped precisions times the brevity penalty.
    pub fn score(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for (&m, &t) in self.matches.iter().zip(&self.totals) {
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / t as f64).ln();
        }
        let n = self.matches.len() as f64;
        let (c, r) = (self.cand_len as f64, self.ref_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        bp * (log_sum / n).exp()
    }
}

/// Sentence-level BLEU-`n` with clipped counts and brevity penalty. An empty
/// candidate scores 0.
pub fn bleu<W: Clone + Eq + Hash>(candidate: &[W], references: &[Vec<W>], n: usize) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    BleuStats::new(candidate, references, n).score()
}

/// Corpus-level BLEU-`n`: statistics are summed over all pairs before the
/// precisions and brevity penalty are formed.
pub fn corpus_bleu<W: Clone + Eq + Hash>(pairs: &[(&[W], &[Vec<W>])], n: usize) -> f64 {
    let mut total = BleuStats::default();
    for (c, refs) in pairs {
        total.add(&BleuStats::new(c, refs, n));
    }
    total.score()
}
