use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{save_features, Scene};
use crate::error::{Error, Result};
use crate::metrics::{ObjectAnnotation, WordVectorTable};
use crate::tensor::splitmix;

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const WORD_VECTORS_FILE: &str = "word_vectors.json";
pub const LEXICON_FILE: &str = "lexicon.txt";
pub const CONFIG_FILE: &str = "dataset.json";

/// Generator settings. Class and attribute prototypes are drawn from
/// `seed`, so the config alone determines every output byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub num_scenes: usize,
    pub classes: Vec<String>,
    pub attributes: Vec<String>,
    /// Extra lexicon nouns mapped to the class they are a near-synonym of.
    pub synonyms: BTreeMap<String, String>,
    pub connectors: Vec<String>,
    pub region_feature_dim: usize,
    pub noise_sigma: f64,
    /// Size of the perturbation separating a synonym's word vector from
    /// its class vector (before renormalization).
    pub synonym_noise: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub captions_per_scene: usize,
    pub area_min: f64,
    pub area_max: f64,
}

fn strings(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            num_scenes: 500,
            classes: strings(&[
                "cup", "table", "chair", "dog", "cat", "book", "lamp", "plant", "bottle", "laptop",
                "phone", "bowl",
            ]),
            attributes: strings(&["red", "blue", "green", "yellow", "white", "black"]),
            synonyms: [
                ("mug", "cup"),
                ("desk", "table"),
                ("puppy", "dog"),
                ("kitten", "cat"),
            ]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect(),
            connectors: strings(&["and", "with", "near", "beside"]),
            region_feature_dim: 64,
            noise_sigma: 0.1,
            synonym_noise: 0.3,
            min_objects: 2,
            max_objects: 6,
            captions_per_scene: 3,
            area_min: 0.005,
            area_max: 0.4,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let nonempty = [
            ("classes", self.classes.len()),
            ("attributes", self.attributes.len()),
            ("connectors", self.connectors.len()),
            ("num_scenes", self.num_scenes),
            ("region_feature_dim", self.region_feature_dim),
            ("captions_per_scene", self.captions_per_scene),
            ("min_objects", self.min_objects),
        ];
        for (field, n) in nonempty {
            if n == 0 {
                return Err(Error::config(field, "must be non-empty / positive"));
            }
        }
        let words = self
            .classes
            .iter()
            .chain(&self.attributes)
            .chain(&self.connectors);
        let mut seen = BTreeSet::new();
        for w in words.chain(self.synonyms.keys()) {
            if w.is_empty() || w.chars().any(|c| !c.is_ascii_lowercase()) {
                return Err(Error::config(
                    "classes",
                    format!("{w:?} is not a lowercase word"),
                ));
            }
            if !seen.insert(w.as_str()) || w == "a" {
                return Err(Error::config("classes", format!("word {w:?} used twice")));
            }
        }
        if let Some(c) = self.synonyms.values().find(|c| !self.classes.contains(c)) {
            return Err(Error::config("synonyms", format!("unknown class {c:?}")));
        }
        if self.max_objects < self.min_objects || self.max_objects > self.classes.len() {
            return Err(Error::config(
                "max_objects",
                format!(
                    "must lie in min_objects..={} (number of classes)",
                    self.classes.len()
                ),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(
                "noise_sigma",
                "must be finite and non-negative",
            ));
        }
        if !(self.synonym_noise >= 0.0 && self.synonym_noise.is_finite()) {
            return Err(Error::config(
                "synonym_noise",
                "must be finite and non-negative",
            ));
        }
        if !(0.0 <= self.area_min && self.area_min < self.area_max && self.area_max <= 1.0) {
            return Err(Error::config(
                "area_min",
                "need 0 <= area_min < area_max <= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    pub scenes: Vec<Scene>,
    pub word_vectors: WordVectorTable,
    /// Sorted nouns: classes plus synonyms.
    pub lexicon: Vec<String>,
}

impl SyntheticDataset {
    /// Writes the config, scenes, word vectors and lexicon into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        write(
            CONFIG_FILE,
            serde_json::to_string_pretty(&self.config).expect("config serializes") + "\n",
        )?;
        write(
            WORD_VECTORS_FILE,
            serde_json::to_string(&self.word_vectors).expect("vectors serialize") + "\n",
        )?;
        write(LEXICON_FILE, self.lexicon.join("\n") + "\n")?;
        save_features(&dir.join(SCENES_FILE), &self.scenes)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Scenes of 2–6 distinct objects. Each region is its class prototype plus
/// its attribute prototype plus Gaussian noise; each caption names every
/// object as "a <attr> <noun>" in class-list order, joined by randomly
/// chosen connectors. Word vectors are the normalized class prototypes.
pub fn generate_synthetic(config: &DatasetConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let dim = config.region_feature_dim;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(splitmix(config.seed));
    let class_protos: Vec<Vec<f64>> = config
        .classes
        .iter()
        .map(|_| gaussian(&mut proto_rng, dim))
        .collect();
    let attr_protos: Vec<Vec<f64>> = config
        .attributes
        .iter()
        .map(|_| gaussian(&mut proto_rng, dim))
        .collect();

    let mut vectors = BTreeMap::new();
    for (c, p) in config.classes.iter().zip(&class_protos) {
        vectors.insert(c.clone(), unit(p.clone()));
    }
    for (syn, class) in &config.synonyms {
        let base = &vectors[class];
        let dir = unit(gaussian(&mut proto_rng, dim));
        let v: Vec<f64> = base
            .iter()
            .zip(&dir)
            .map(|(b, d)| b + config.synonym_noise * d)
            .collect();
        vectors.insert(syn.clone(), unit(v));
    }
    let word_vectors = WordVectorTable::new(dim, vectors)?;
    let mut lexicon: Vec<String> = config
        .classes
        .iter()
        .chain(config.synonyms.keys())
        .cloned()
        .collect();
    lexicon.sort();

    let scenes = (0..config.num_scenes)
        .map(|i| generate_scene(config, i, &class_protos, &attr_protos))
        .collect();
    Ok(SyntheticDataset {
        config: config.clone(),
        scenes,
        word_vectors,
        lexicon,
    })
}

fn generate_scene(
    config: &DatasetConfig,
    index: usize,
    class_protos: &[Vec<f64>],
    attr_protos: &[Vec<f64>],
) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(config.seed ^ splitmix(index as u64 + 1)));
    let n = rng.random_range(config.min_objects..=config.max_objects);
    let mut classes = sample(&mut rng, config.classes.len(), n).into_vec();
    classes.sort_unstable();
    let attrs: Vec<usize> = classes
        .iter()
        .map(|_| rng.random_range(0..config.attributes.len()))
        .collect();
    let mut regions = Vec::with_capacity(n);
    let mut objects = Vec::with_capacity(n);
    for (&c, &a) in classes.iter().zip(&attrs) {
        let region = class_protos[c]
            .iter()
            .zip(&attr_protos[a])
            .map(|(p, q)| {
                (p + q + config.noise_sigma * rng.sample::<f64, _>(StandardNormal)) as f32
            })
            .collect();
        regions.push(region);
        objects.push(ObjectAnnotation {
            class: config.classes[c].clone(),
            area_frac: rng.random_range(config.area_min..=config.area_max),
        });
    }
    let captions = (0..config.captions_per_scene)
        .map(|_| {
            let mut words = Vec::new();
            for (j, (&c, &a)) in classes.iter().zip(&attrs).enumerate() {
                if j > 0 {
                    let k = rng.random_range(0..config.connectors.len());
                    words.push(config.connectors[k].as_str());
                }
                words.extend(["a", &config.attributes[a], &config.classes[c]]);
            }
            words.join(" ")
        })
        .collect();
    Scene {
        id: format!("scene{index:05}"),
        regions,
        objects,
        captions,
    }
}
