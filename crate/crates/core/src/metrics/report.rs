use std::collections::BTreeMap;
use std::hash::Hash;

use serde::Serialize;

use super::{bleu, corpus_bleu, rouge_l, CiderScorer, DocumentFrequencies};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScores {
    pub id: String,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

/// Corpus BLEU pools n-gram statistics over all images; ROUGE-L and
/// CIDEr-D are per-image means.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusScores {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub coverage: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub per_image: Vec<ImageScores>,
    pub corpus: CorpusScores,
}

/// Scores one candidate per image against that image's references.
/// Document frequencies come from the references being scored.
pub fn evaluate_captions<W: Clone + Eq + Hash>(
    ids: &[String],
    candidates: &[Vec<W>],
    references: &[Vec<Vec<W>>],
) -> Result<EvaluationReport> {
    let df = DocumentFrequencies::from_references(references);
    let cider = CiderScorer::new(&df)?;
    let per_image: Vec<ImageScores> = ids
        .iter()
        .zip(candidates)
        .zip(references)
        .map(|((id, c), r)| ImageScores {
            id: id.clone(),
            bleu1: bleu(c, r, 1),
            bleu4: bleu(c, r, 4),
            rouge_l: rouge_l(c, r),
            cider_d: cider.score(c, r),
        })
        .collect();
    let pairs: Vec<(&[W], &[Vec<W>])> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| (c.as_slice(), r.as_slice()))
        .collect();
    let n = per_image.len().max(1) as f64;
    let corpus = CorpusScores {
        bleu1: corpus_bleu(&pairs, 1),
        bleu4: corpus_bleu(&pairs, 4),
        rouge_l: per_image.iter().map(|s| s.rouge_l).sum::<f64>() / n,
        cider_d: per_image.iter().map(|s| s.cider_d).sum::<f64>() / n,
        coverage: BTreeMap::new(),
    };
    Ok(EvaluationReport { per_image, corpus })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn perfect_predictions() {
        let refs = vec![
            vec![w("a red cup on a table")],
            vec![w("two dogs in the park")],
        ];
        let cands: Vec<_> = refs.iter().map(|r| r[0].clone()).collect();
        let ids = vec!["x".to_string(), "y".to_string()];
        let r = evaluate_captions(&ids, &cands, &refs).unwrap();
        assert!((r.corpus.bleu4 - 1.0).abs() < 1e-12);
        assert!((r.corpus.rouge_l - 1.0).abs() < 1e-12);
        assert!((r.corpus.cider_d - 10.0).abs() < 1e-9);
        assert_eq!(r.per_image[1].id, "y");
    }
}
