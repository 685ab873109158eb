use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::bench::{run_bench, write_bench};
use super::config::{load_run_config, write_config, RunConfig};
use crate::checkpoint::load_model;
use crate::data::{
    generate_synthetic, load_features, load_lexicon, load_word_vectors, split, Scene, Vocabulary,
    LEXICON_FILE, SCENES_FILE, WORD_VECTORS_FILE,
};
use crate::decoding::{beam_search, greedy_decode};
use crate::error::{Error, Result};
use crate::metrics::{self, evaluate_captions, tokenize, EvaluationReport, WordVectorTable};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor};
use crate::training::{cross_entropy_loss, Trainer, TrainingData};
use crate::transformer::{Model, ModelConfig, RegionBatch, TokenBatch, BOS, NUM_RESERVED};

const DECODE_BATCH: usize = 16;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub(super) fn generate_data(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.data_dir.clone());
    let ds = generate_synthetic(&cfg.dataset)?;
    ds.write(&dir)?;
    println!("wrote {} scenes to {}", ds.scenes.len(), dir.display());
    Ok(())
}

fn load_training_scenes(cfg: &RunConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let scenes = load_features(
        &cfg.data_dir.join(SCENES_FILE),
        Some(cfg.model.region_feature_dim),
    )?;
    let (train, val) = split(scenes);
    if train.is_empty() {
        return Err(Error::Input("the split left no training scenes".into()));
    }
    Ok((train, val))
}

pub(super) fn train(cfg: &RunConfig, resume: Option<PathBuf>) -> Result<()> {
    let (train, val) = load_training_scenes(cfg)?;
    let vocab = Vocabulary::build(
        train
            .iter()
            .flat_map(|s| s.captions.iter().map(String::as_str)),
    );
    if vocab.len() > cfg.model.vocab_size {
        return Err(Error::config(
            "model.vocab_size",
            format!(
                "{} is below the vocabulary size {}",
                cfg.model.vocab_size,
                vocab.len()
            ),
        ));
    }
    let run_dir = &cfg.run_dir;
    create_dir(run_dir)?;
    write_config(&run_dir.join("config.json"), cfg)?;
    vocab.save(&run_dir.join("vocab.txt"))?;
    let eval = if val.is_empty() { train.clone() } else { val };
    let data = TrainingData::new(train, vocab)?;
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(&dir, cfg.train.clone(), &data)?,
        None => Trainer::new(
            Model::new(cfg.model.clone(), cfg.seed)?,
            cfg.train.clone(),
            &data,
        )?,
    };
    let records = trainer.run_ce(&eval, Some(run_dir))?;
    if let Some(r) = records.last() {
        println!(
            "step {} ce_loss {:.4} cider_d {:.3} bleu4 {:.3}; run directory {}",
            r.step,
            r.ce_loss.unwrap_or(f64::NAN),
            r.cider_d,
            r.bleu4,
            run_dir.display()
        );
    }
    Ok(())
}

pub(super) fn finetune_scst(
    from: &Path,
    out: Option<PathBuf>,
    extra: Option<&Path>,
    overrides: &[(String, String)],
    env_seed: Option<String>,
) -> Result<()> {
    let base = from.join("config.json");
    let mut cfg = load_run_config(Some(&base), overrides, env_seed.clone())?;
    if let Some(extra) = extra {
        // the extra file replaces the base; overrides still apply last
        cfg = load_run_config(Some(extra), overrides, env_seed)?;
    }
    let out = out.unwrap_or_else(|| from.join("scst"));
    cfg.run_dir = out.clone();
    let model = load_model::<f32>(&from.join("model.smrt"))?;
    let vocab = Vocabulary::load(&from.join("vocab.txt"))?;
    let (train, val) = load_training_scenes(&cfg)?;
    create_dir(&out)?;
    write_config(&out.join("config.json"), &cfg)?;
    vocab.save(&out.join("vocab.txt"))?;
    let eval = if val.is_empty() { train.clone() } else { val };
    let data = TrainingData::new(train, vocab)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), &data)?;
    trainer.start_scst();
    let records = trainer.run_scst(&eval, Some(&out))?;
    if let Some(r) = records.last() {
        println!(
            "scst step {} reward {:.3} cider_d {:.3}; run directory {}",
            r.step,
            r.scst_reward.unwrap_or(f64::NAN),
            r.cider_d,
            out.display()
        );
    }
    Ok(())
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub caption: String,
    #[serde(default)]
    pub logprob: f64,
    #[serde(default)]
    pub beams: Vec<Beam>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    pub caption: String,
    pub logprob: f64,
}

pub(super) fn generate(
    checkpoint: &Path,
    features: &Path,
    vocab: Option<PathBuf>,
    k: usize,
    max_len: Option<usize>,
    out: &Path,
) -> Result<()> {
    let model = load_model::<f32>(checkpoint)?;
    let vocab_path = vocab.unwrap_or_else(|| {
        checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("vocab.txt")
    });
    let vocab = Vocabulary::load(&vocab_path)?;
    if vocab.len() > model.config.vocab_size {
        return Err(Error::Input(format!(
            "vocabulary has {} entries but the model only {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let scenes = load_features(features, Some(model.config.region_feature_dim))?;
    let max_len = max_len.unwrap_or(model.config.max_seq_len);
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    for chunk in scenes.chunks(DECODE_BATCH) {
        let tensors: Vec<Tensor<f32>> = chunk.iter().map(Scene::region_tensor).collect();
        let sets: Vec<&Tensor<f32>> = tensors.iter().collect();
        let rb = RegionBatch::from_sets(&sets)?;
        let beams = if k == 1 {
            greedy_decode(&model, &rb, max_len)?
                .into_iter()
                .map(|h| vec![h])
                .collect()
        } else {
            beam_search(&model, &rb, k, max_len)?
        };
        for (scene, hyps) in chunk.iter().zip(beams) {
            let beams: Vec<Beam> = hyps
                .iter()
                .map(|h| Beam {
                    caption: vocab.decode(h.words()),
                    logprob: h.logprob_sum,
                })
                .collect();
            let p = Prediction {
                id: scene.id.clone(),
                caption: beams[0].caption.clone(),
                logprob: beams[0].logprob,
                beams,
            };
            let line = serde_json::to_string(&p).expect("prediction serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(out, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    println!("wrote {} predictions to {}", scenes.len(), out.display());
    Ok(())
}

fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut preds = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        preds.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    if preds.is_empty() {
        return Err(Error::Input(format!("{}: no predictions", path.display())));
    }
    Ok(preds)
}

/// Pairs predictions with scenes by id; ids present on only one side are
/// returned separately.
fn align<'a>(
    preds: &'a [Prediction],
    scenes: &'a [Scene],
) -> (Vec<(&'a Prediction, &'a Scene)>, Vec<String>) {
    let by_id: HashMap<&str, &Scene> = scenes.iter().map(|s| (s.id.as_str(), s)).collect();
    let pred_ids: HashSet<&str> = preds.iter().map(|p| p.id.as_str()).collect();
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for p in preds {
        match by_id.get(p.id.as_str()) {
            Some(s) => pairs.push((p, *s)),
            None => missing.push(p.id.clone()),
        }
    }
    missing.extend(
        scenes
            .iter()
            .filter(|s| !pred_ids.contains(s.id.as_str()))
            .map(|s| s.id.clone()),
    );
    for id in &missing {
        log::warn!("id {id:?} is not present in both predictions and references; excluded");
    }
    (pairs, missing)
}

#[derive(Serialize)]
struct EvaluateOutput {
    #[serde(flatten)]
    report: EvaluationReport,
    missing_ids: Vec<String>,
}

pub(super) fn evaluate(predictions: &Path, references: &Path, out: Option<PathBuf>) -> Result<()> {
    let preds = load_predictions(predictions)?;
    let scenes = load_features(references, None)?;
    let (pairs, missing) = align(&preds, &scenes);
    if pairs.is_empty() {
        return Err(Error::Input(
            "no prediction ids match the references".into(),
        ));
    }
    let ids: Vec<String> = pairs.iter().map(|(p, _)| p.id.clone()).collect();
    let cands: Vec<Vec<String>> = pairs.iter().map(|(p, _)| tokenize(&p.caption)).collect();
    let refs: Vec<Vec<Vec<String>>> = pairs
        .iter()
        .map(|(_, s)| s.captions.iter().map(|c| tokenize(c)).collect())
        .collect();
    let report = evaluate_captions(&ids, &cands, &refs)?;
    write_json(
        out.as_deref(),
        &EvaluateOutput {
            report,
            missing_ids: missing,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub thresholds: Vec<f64>,
    /// Mean coverage per threshold over scenes with at least one class
    /// above it.
    pub coverage: Vec<f64>,
    /// Scenes left out per threshold because no class passed it.
    pub vacuous: Vec<usize>,
    pub n_images: usize,
    pub missing_ids: Vec<String>,
}

/// Mean coverage of `captions[i]` against `scenes[i]` at each threshold.
pub fn coverage_report(
    captions: &[&str],
    scenes: &[&Scene],
    vectors: &WordVectorTable,
    lexicon: &HashSet<String>,
    thresholds: &[f64],
) -> Result<CoverageReport> {
    if let Some(s) = scenes.iter().find(|s| s.objects.is_empty()) {
        return Err(Error::Input(format!(
            "scene {:?} has no object annotations",
            s.id
        )));
    }
    let mut means = Vec::with_capacity(thresholds.len());
    let mut vacuous = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let (mut sum, mut n, mut v) = (0.0, 0usize, 0usize);
        for (c, s) in captions.iter().zip(scenes) {
            let r = metrics::coverage(c, &s.objects, vectors, lexicon, t);
            if r.vacuous {
                v += 1;
            } else {
                sum += r.score;
                n += 1;
            }
        }
        means.push(if n == 0 { 1.0 } else { sum / n as f64 });
        vacuous.push(v);
    }
    Ok(CoverageReport {
        thresholds: thresholds.to_vec(),
        coverage: means,
        vacuous,
        n_images: scenes.len(),
        missing_ids: Vec::new(),
    })
}

pub(super) fn coverage(
    predictions: &Path,
    features: &Path,
    word_vectors: Option<PathBuf>,
    lexicon: Option<PathBuf>,
    thresholds: &[f64],
    out: Option<PathBuf>,
) -> Result<()> {
    if let Some(t) = thresholds.iter().find(|t| !(0.0..1.0).contains(*t)) {
        return Err(Error::Usage(format!("threshold {t} outside [0, 1)")));
    }
    let dir = features.parent().unwrap_or(Path::new("."));
    let vectors = load_word_vectors(&word_vectors.unwrap_or_else(|| dir.join(WORD_VECTORS_FILE)))?;
    let lexicon = load_lexicon(&lexicon.unwrap_or_else(|| dir.join(LEXICON_FILE)))?;
    let preds = load_predictions(predictions)?;
    let scenes = load_features(features, None)?;
    let (pairs, missing) = align(&preds, &scenes);
    if pairs.is_empty() {
        return Err(Error::Input("no prediction ids match the features".into()));
    }
    let caps: Vec<&str> = pairs.iter().map(|(p, _)| p.caption.as_str()).collect();
    let sc: Vec<&Scene> = pairs.iter().map(|(_, s)| *s).collect();
    let mut report = coverage_report(&caps, &sc, &vectors, &lexicon, thresholds)?;
    report.missing_ids = missing;
    write_json(out.as_deref(), &report)
}

/// The small model whose gradients `gradcheck` verifies.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        n_enc_layers: 2,
        n_dec_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_memory: 2,
        vocab_size: 16,
        max_seq_len: 8,
        region_feature_dim: 6,
        max_regions: 4,
        dropout_keep: 1.0,
    }
}

/// Central-difference check of every parameter of a freshly initialized
/// [`gradcheck_model_config`] model under a cross-entropy loss on a random
/// two-element batch with unequal region and caption lengths.
pub fn gradcheck_model(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = gradcheck_model_config();
    let mut model = Model::<f64>::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let mut regions = |n: usize| {
        let data = (0..n * cfg.region_feature_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(vec![n, cfg.region_feature_dim], data).expect("shape matches")
    };
    let sets = [regions(3), regions(2)];
    let rb = RegionBatch::from_sets(&[&sets[0], &sets[1]])?;
    let v = cfg.vocab_size as u32;
    let mut word = || rng.random_range(NUM_RESERVED..v);
    let a: Vec<u32> = [BOS].into_iter().chain((0..4).map(|_| word())).collect();
    let b: Vec<u32> = [BOS].into_iter().chain((0..2).map(|_| word())).collect();
    let tokens = TokenBatch::from_sequences(&[&a, &b])?;
    let mut targets = Vec::new();
    for seq in [&a, &b] {
        targets.extend(&seq[1..]);
        targets.push(crate::transformer::EOS);
        targets.extend(std::iter::repeat_n(
            crate::transformer::PAD,
            tokens.t_max - seq.len(),
        ));
    }
    let shell = model.clone();
    grad_check(
        &mut model.params,
        |params, g: &mut Graph<f64>| {
            let logits = shell.forward_with(g, params, &rb, &tokens)?;
            cross_entropy_loss(g, logits, &targets)
        },
        opts,
    )
}

pub(super) fn gradcheck(
    cfg: &RunConfig,
    tol: f64,
    max_coords: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let opts = GradCheckOptions {
        tol,
        max_coords,
        seed: cfg.seed,
        ..GradCheckOptions::default()
    };
    let report = gradcheck_model(cfg.seed, &opts)?;
    for p in &report.per_param {
        println!(
            "{:<28} max_rel_err {:.3e} ({} checked, {} skipped)",
            p.name, p.max_rel_err, p.checked, p.skipped
        );
    }
    if let Some(path) = &out {
        write_json(Some(path), &report)?;
    }
    if report.passed {
        println!(
            "PASS: max relative error {:.3e} < {tol:e}",
            report.max_rel_err
        );
        Ok(())
    } else {
        let w = report.worst().expect("at least one parameter");
        Err(Error::Check(format!(
            "gradient of `{}` at index {}: analytic {:.6e} vs numeric {:.6e} (relative error {:.3e} >= {tol:e})",
            w.name, w.worst_index, w.analytic, w.numeric, w.max_rel_err
        )))
    }
}

pub(super) fn bench(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let rows = run_bench(&cfg.bench, &cfg.model)?;
    for r in &rows {
        println!(
            "layers {} memory {:>2} batch {:>2}: {:8.2} ± {:6.2} ms (median {:.2}, min {:.2})",
            r.n_layers, r.n_memory, r.batch_size, r.mean_ms, r.std_ms, r.median_ms, r.min_ms
        );
    }
    write_bench(out_dir, &rows)?;
    let mut effective = BTreeMap::new();
    effective.insert(
        "bench",
        serde_json::to_value(&cfg.bench).expect("serializes"),
    );
    effective.insert(
        "model",
        serde_json::to_value(&cfg.model).expect("serializes"),
    );
    write_json(Some(&out_dir.join("config.json")), &effective)
}
