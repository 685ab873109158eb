use std::hash::Hash;

pub const ROUGE_BETA: f64 = 1.2;

fn lcs<W: Eq>(a: &[W], b: &[W]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure (β = 1.2), maximized over references.
pub fn rouge_l<W: Eq + Hash>(candidate: &[W], references: &[Vec<W>]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let l = lcs(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}
