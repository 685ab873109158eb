//! Scenes, the feature-file format, vocabularies, batching and the
//! synthetic scene generator.

mod batch;
mod synthetic;
mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use batch::{batchify, Batch, Example, TruncationWarning};
pub use synthetic::{
    generate_synthetic, DatasetConfig, SyntheticDataset, CONFIG_FILE, LEXICON_FILE, SCENES_FILE,
    WORD_VECTORS_FILE,
};
pub use vocab::Vocabulary;

use crate::error::{Error, Result};
use crate::metrics::{ObjectAnnotation, WordVectorTable};
use crate::tensor::{Real, Tensor};

/// One image: its region features, object annotations and reference
/// captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub id: String,
    pub regions: Vec<Vec<f32>>,
    pub objects: Vec<ObjectAnnotation>,
    pub captions: Vec<String>,
}

impl Scene {
    pub fn region_dim(&self) -> usize {
        self.regions.first().map_or(0, Vec::len)
    }

    pub fn region_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self
            .regions
            .iter()
            .flatten()
            .map(|&x| T::lit(x as f64))
            .collect();
        Tensor::new(vec![self.regions.len(), self.region_dim()], data)
            .expect("scene regions are rectangular")
    }

    fn validate(&self, expected_dim: Option<usize>) -> std::result::Result<(), String> {
        let dim = self.region_dim();
        if self.regions.is_empty() || dim == 0 {
            return Err(format!("scene {:?} has no region features", self.id));
        }
        if let Some(r) = self.regions.iter().find(|r| r.len() != dim) {
            return Err(format!(
                "scene {:?} mixes region dimensions {dim} and {}",
                self.id,
                r.len()
            ));
        }
        if let Some(e) = expected_dim {
            if e != dim {
                return Err(format!(
                    "scene {:?}: region dimension mismatch, expected {e}, actual {dim}",
                    self.id
                ));
            }
        }
        if self.regions.iter().flatten().any(|x| !x.is_finite()) {
            return Err(format!("scene {:?} has non-finite features", self.id));
        }
        if self.captions.is_empty() {
            return Err(format!("scene {:?} has no captions", self.id));
        }
        if let Some(o) = self
            .objects
            .iter()
            .find(|o| !(0.0..=1.0).contains(&o.area_frac))
        {
            return Err(format!(
                "scene {:?}: area fraction {} of {:?} outside [0, 1]",
                self.id, o.area_frac, o.class
            ));
        }
        Ok(())
    }
}

/// Reads a JSON-lines feature file. Blank lines are skipped; every other
/// line must be one scene, and region widths must equal `expected_dim`
/// when given.
pub fn load_features(path: &Path, expected_dim: Option<usize>) -> Result<Vec<Scene>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut scenes = Vec::new();
    let mut dim = expected_dim;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let scene: Scene = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        scene.validate(dim).map_err(parse_err)?;
        dim = Some(scene.region_dim());
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn save_features(path: &Path, scenes: &[Scene]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in scenes {
        let line = serde_json::to_string(s).expect("scenes serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_word_vectors(path: &Path) -> Result<WordVectorTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// One word per line.
pub fn load_lexicon(path: &Path) -> Result<std::collections::HashSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lex: std::collections::HashSet<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_lowercase)
        .collect();
    if lex.is_empty() {
        return Err(Error::Input(format!("{}: empty lexicon", path.display())));
    }
    Ok(lex)
}

/// Stable 90/10 train/validation split keyed on the scene id.
pub fn is_validation(id: &str) -> bool {
    // FNV-1a, fixed across platforms and releases
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h.is_multiple_of(10)
}

/// Splits scenes into (train, validation) by [`is_validation`].
pub fn split(scenes: Vec<Scene>) -> (Vec<Scene>, Vec<Scene>) {
    scenes.into_iter().partition(|s| !is_validation(&s.id))
}
