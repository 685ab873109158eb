//! Caption-quality metrics and the object-coverage measure.
//!
//! Metrics are generic over the token type so the same code scores word
//! strings (evaluation reports) and token ids (training rewards).

mod bleu;
mod cider;
mod coverage;
mod hungarian;
mod ngram;
mod report;
mod rouge;

pub use bleu::{bleu, corpus_bleu, BleuStats};
pub use cider::{cider_d, CiderScorer, DocumentFrequencies, CIDER_SIGMA};
pub use coverage::{coverage, extract_nouns, CoverageResult, ObjectAnnotation, WordVectorTable};
pub use hungarian::{hungarian, Assignment};
pub use ngram::NGramCounts;
pub use report::{evaluate_captions, CorpusScores, EvaluationReport, ImageScores};
pub use rouge::{rouge_l, ROUGE_BETA};

/// Lowercases, strips punctuation and splits on whitespace. Special markers
/// (`<bos>`, `<eos>`, `<pad>`) never count as words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .filter(|w| !matches!(*w, "<bos>" | "<eos>" | "<pad>"))
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}
