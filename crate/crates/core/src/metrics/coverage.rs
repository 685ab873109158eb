use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::hungarian::hungarian;
use super::tokenize;
use crate::error::{Error, Result};

/// One annotated object of a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub class: String,
    pub area_frac: f64,
}

/// Unit-norm word vectors of a fixed dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct WordVectorTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct RawTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl TryFrom<RawTable> for WordVectorTable {
    type Error = Error;

    fn try_from(raw: RawTable) -> Result<Self> {
        WordVectorTable::new(raw.dim, raw.vectors)
    }
}

impl WordVectorTable {
    /// Rejects vectors of the wrong dimension or not unit-norm within 1e-6.
    pub fn new(dim: usize, vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        for (w, v) in &vectors {
            if v.len() != dim {
                return Err(Error::Input(format!(
                    "word vector for {w:?} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Input(format!(
                    "word vector for {w:?} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(WordVectorTable { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Exact matches score 1; otherwise the clamped cosine of the two
    /// vectors, or 0 when either word is unknown.
    pub fn profit(&self, a: &str, b: &str) -> f64 {
        if a == b {
            return 1.0;
        }
        match (self.get(a), self.get(b)) {
            (Some(x), Some(y)) => x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>().max(0.0),
            _ => 0.0,
        }
    }
}

/// Nouns of `caption` found in `lexicon`, in order of first appearance.
pub fn extract_nouns(caption: &str, lexicon: &HashSet<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    tokenize(caption)
        .into_iter()
        .filter(|w| lexicon.contains(w) && seen.insert(w.clone()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageResult {
    pub score: f64,
    /// Total assignment profit between caption nouns and classes.
    pub intersection: f64,
    pub n_classes: usize,
    /// No class passed the area threshold; the score is 1 by convention and
    /// such scenes are left out of averages.
    pub vacuous: bool,
}

/// Fraction of the scene's object classes (area strictly above
/// `area_threshold`) matched by caption nouns under an optimal one-to-one
/// assignment.
pub fn coverage(
    caption: &str,
    objects: &[ObjectAnnotation],
    vectors: &WordVectorTable,
    lexicon: &HashSet<String>,
    area_threshold: f64,
) -> CoverageResult {
    let classes: Vec<&str> = objects
        .iter()
        .filter(|o| o.area_frac > area_threshold)
        .map(|o| o.class.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.is_empty() {
        return CoverageResult {
            score: 1.0,
            intersection: 0.0,
            n_classes: 0,
            vacuous: true,
        };
    }
    let nouns = extract_nouns(caption, lexicon);
    let profit: Vec<Vec<f64>> = nouns
        .iter()
        .map(|n| classes.iter().map(|c| vectors.profit(n, c)).collect())
        .collect();
    let intersection = hungarian(&profit).total;
    CoverageResult {
        score: intersection / classes.len() as f64,
        intersection,
        n_classes: classes.len(),
        vacuous: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon(words: &[&str]) -> HashSet<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn table() -> WordVectorTable {
        let mut v = BTreeMap::new();
        v.insert("cup".into(), vec![1.0, 0.0, 0.0]);
        v.insert("mug".into(), vec![0.8, 0.6, 0.0]);
        v.insert("table".into(), vec![0.0, 0.0, 1.0]);
        WordVectorTable::new(3, v).unwrap()
    }

    fn objects(list: &[(&str, f64)]) -> Vec<ObjectAnnotation> {
        list.iter()
            .map(|&(c, a)| ObjectAnnotation {
                class: c.into(),
                area_frac: a,
            })
            .collect()
    }

    #[test]
    fn extracts_ordered_unique_nouns() {
        let lex = lexicon(&["cup", "table", "chair"]);
        assert_eq!(
            extract_nouns("a red cup on the table", &lex),
            vec!["cup", "table"]
        );
        assert_eq!(extract_nouns("a cup and a cup", &lex), vec!["cup"]);
        assert!(extract_nouns("a red sky", &lex).is_empty());
    }

    #[test]
    fn exact_and_partial_coverage() {
        let lex = lexicon(&["cup", "mug", "table"]);
        let objs = objects(&[("cup", 0.2), ("table", 0.5)]);
        let wv = table();
        assert_eq!(
            coverage("a cup on a table", &objs, &wv, &lex, 0.0).score,
            1.0
        );
        assert_eq!(coverage("a cup", &objs, &wv, &lex, 0.0).score, 0.5);
    }

    #[test]
    fn synonym_scores_by_cosine() {
        // cos(mug, cup) = 0.8, table matches exactly: (0.8 + 1) / 2
        let lex = lexicon(&["cup", "mug", "table"]);
        let objs = objects(&[("cup", 0.2), ("table", 0.5)]);
        let r = coverage("a mug on a table", &objs, &table(), &lex, 0.0);
        assert!((r.score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn threshold_filters_and_empty_set_is_vacuous() {
        let lex = lexicon(&["cup", "table"]);
        let objs = objects(&[("cup", 0.02), ("table", 0.5), ("table", 0.3)]);
        let r = coverage("a table", &objs, &table(), &lex, 0.05);
        assert_eq!((r.score, r.n_classes), (1.0, 1));
        let v = coverage("a table", &objs, &table(), &lex, 0.9);
        assert!(v.vacuous);
        assert_eq!(v.score, 1.0);
    }

    #[test]
    fn rejects_non_unit_vectors() {
        let mut v = BTreeMap::new();
        v.insert("x".into(), vec![1.0, 1.0]);
        assert!(WordVectorTable::new(2, v).is_err());
    }
}
