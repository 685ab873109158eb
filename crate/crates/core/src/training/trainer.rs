use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::loss::cross_entropy_loss;
use super::schedule::ScheduleConfig;
use super::scst::{scst_step, ScstConfig};
use crate::checkpoint::{load_model, save_model};
use crate::data::{batchify, Batch, Example, Scene, Vocabulary};
use crate::decoding::greedy_decode;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_captions, CiderScorer, DocumentFrequencies};
use crate::tensor::{splitmix, DropoutStream, Graph, Mode, Tensor};
use crate::transformer::{Model, RegionBatch};

const SCST_SALT: u64 = 0x5343_5354;
const DECODE_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub ce_steps: u64,
    /// Evaluate and log every this many steps (0: only at the end).
    pub log_interval: u64,
    /// Save a resumable checkpoint every this many steps (0: only at the end).
    pub checkpoint_interval: u64,
    /// Validation scenes decoded at each log point.
    pub eval_scenes: usize,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub scst: ScstConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 16,
            ce_steps: 2000,
            log_interval: 100,
            checkpoint_interval: 0,
            eval_scenes: 64,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            scst: ScstConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        self.schedule.validate()?;
        self.scst.validate()
    }
}

/// Training scenes with their encoded references and CIDEr-D statistics.
pub struct TrainingData {
    pub scenes: Vec<Scene>,
    pub vocab: Vocabulary,
    pub examples: Vec<Example>,
    /// Word ids of every reference caption, per scene.
    pub references: Vec<Vec<Vec<u32>>>,
    pub df: DocumentFrequencies<u32>,
    regions: Vec<Tensor<f32>>,
}

impl TrainingData {
    pub fn new(scenes: Vec<Scene>, vocab: Vocabulary) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Input("no training scenes".into()));
        }
        let examples = scenes
            .iter()
            .enumerate()
            .flat_map(|(s, sc)| {
                (0..sc.captions.len()).map(move |c| Example {
                    scene: s,
                    caption: c,
                })
            })
            .collect();
        let references: Vec<Vec<Vec<u32>>> = scenes
            .iter()
            .map(|s| s.captions.iter().map(|c| vocab.encode(c)).collect())
            .collect();
        let df = DocumentFrequencies::from_references(&references);
        let regions = scenes.iter().map(Scene::region_tensor).collect();
        Ok(TrainingData {
            scenes,
            vocab,
            examples,
            references,
            df,
            regions,
        })
    }

    /// Restricts training to the given (scene, caption) pairs.
    pub fn with_examples(mut self, examples: Vec<Example>) -> Self {
        self.examples = examples;
        self
    }
}

/// Greedy captions (word ids, no BOS/EOS) for each scene.
pub fn greedy_captions(model: &Model<f32>, scenes: &[&Scene]) -> Result<Vec<Vec<u32>>> {
    let tensors: Vec<Tensor<f32>> = scenes.iter().map(|s| s.region_tensor()).collect();
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in tensors.chunks(DECODE_BATCH) {
        let sets: Vec<&Tensor<f32>> = chunk.iter().collect();
        let rb = RegionBatch::from_sets(&sets)?;
        for h in greedy_decode(model, &rb, model.config.max_seq_len)? {
            out.push(h.words().to_vec());
        }
    }
    Ok(out)
}

/// Mean CIDEr-D of greedy captions on training scenes `which`, scored
/// against training references and document frequencies.
pub fn mean_cider(model: &Model<f32>, data: &TrainingData, which: &[usize]) -> Result<f64> {
    let scenes: Vec<&Scene> = which.iter().map(|&i| &data.scenes[i]).collect();
    let caps = greedy_captions(model, &scenes)?;
    let cider = CiderScorer::new(&data.df)?;
    let total: f64 = caps
        .iter()
        .zip(which)
        .map(|(c, &i)| cider.score(c, &data.references[i]))
        .sum();
    Ok(total / which.len().max(1) as f64)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    /// Mean training loss since the previous record (CE phase only).
    pub ce_loss: Option<f64>,
    pub cider_d: f64,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scst_reward: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Ce,
    Scst,
}

#[derive(Serialize, Deserialize)]
struct TrainState {
    phase: Phase,
    ce_step: u64,
    scst_step: u64,
    adam_step: u64,
}

/// Optimization state for both phases over one dataset. Every step is a
/// pure function of (config, data, step index, current weights and
/// optimizer moments), which makes resumed runs bit-identical.
pub struct Trainer<'d> {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    pub phase: Phase,
    pub ce_step: u64,
    pub scst_step: u64,
    data: &'d TrainingData,
    epoch: Option<(u64, Vec<Batch<f32>>)>,
}

impl<'d> Trainer<'d> {
    pub fn new(model: Model<f32>, config: TrainConfig, data: &'d TrainingData) -> Result<Self> {
        config.validate()?;
        if data.examples.is_empty() {
            return Err(Error::Input("no training examples".into()));
        }
        if data.vocab.len() > model.config.vocab_size {
            return Err(Error::config(
                "model.vocab_size",
                format!(
                    "{} is smaller than the vocabulary ({} entries)",
                    model.config.vocab_size,
                    data.vocab.len()
                ),
            ));
        }
        let adam = AdamState::new(&model.params, config.adam.clone());
        Ok(Trainer {
            model,
            adam,
            config,
            phase: Phase::Ce,
            ce_step: 0,
            scst_step: 0,
            data,
            epoch: None,
        })
    }

    pub fn data(&self) -> &TrainingData {
        self.data
    }

    fn steps_per_epoch(&self) -> u64 {
        self.data.examples.len().div_ceil(self.config.batch_size) as u64
    }

    fn epoch_order(&self, epoch: u64, n: usize, salt: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(splitmix(self.config.seed ^ salt ^ splitmix(epoch + 1)));
        idx.shuffle(&mut rng);
        idx
    }

    /// One cross-entropy update; returns `(loss, lr)`.
    pub fn ce_step(&mut self) -> Result<(f64, f64)> {
        let spe = self.steps_per_epoch();
        let (epoch, idx) = (self.ce_step / spe, (self.ce_step % spe) as usize);
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let order = self.epoch_order(epoch, self.data.examples.len(), 0);
            let examples: Vec<Example> = order.iter().map(|&i| self.data.examples[i]).collect();
            let (batches, _) = batchify(
                &self.data.scenes,
                &examples,
                &self.data.vocab,
                self.config.batch_size,
                self.model.config.max_seq_len,
            )?;
            self.epoch = Some((epoch, batches));
        }
        let batch = &self.epoch.as_ref().expect("epoch batches cached").1[idx];
        let step = self.ce_step;
        let mut g =
            Graph::new(Mode::Train).with_dropout(DropoutStream::new(self.config.seed, step));
        let logits = self.model.forward(&mut g, &batch.regions, &batch.inputs)?;
        let loss = cross_entropy_loss(&mut g, logits, &batch.targets)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "cross-entropy loss".into(),
            });
        }
        g.backward(loss, &mut self.model.params)?;
        if !self.model.params.grads_finite() {
            return Err(Error::NonFinite {
                step,
                what: "gradient".into(),
            });
        }
        let lr = self
            .config
            .schedule
            .lr(step + 1, self.model.config.d_model)?;
        adam_step(&mut self.model.params, &mut self.adam, lr);
        self.ce_step += 1;
        Ok((value, lr))
    }

    /// Switches to self-critical fine-tuning with a fresh optimizer.
    pub fn start_scst(&mut self) {
        if self.phase == Phase::Ce {
            self.phase = Phase::Scst;
            self.adam = AdamState::new(&self.model.params, self.config.adam.clone());
        }
    }

    /// One SCST update over `scst.batch_size` training scenes; returns the
    /// mean sampled reward.
    pub fn scst_step(&mut self) -> Result<f64> {
        self.start_scst();
        let n = self.data.scenes.len();
        let bs = self.config.scst.batch_size.min(n);
        let spe = n.div_ceil(bs) as u64;
        let (epoch, idx) = (self.scst_step / spe, (self.scst_step % spe) as usize);
        let order = self.epoch_order(epoch, n, SCST_SALT);
        let chosen = &order[idx * bs..((idx + 1) * bs).min(n)];
        let sets: Vec<&Tensor<f32>> = chosen.iter().map(|&i| &self.data.regions[i]).collect();
        let regions = RegionBatch::from_sets(&sets)?;
        let refs: Vec<&[Vec<u32>]> = chosen
            .iter()
            .map(|&i| self.data.references[i].as_slice())
            .collect();
        let step = self.scst_step;
        let dropout = DropoutStream::new(self.config.seed ^ SCST_SALT, step);
        let report = scst_step(
            &mut self.model,
            &mut self.adam,
            &regions,
            &refs,
            &self.data.df,
            &self.config.scst,
            dropout,
            self.ce_step + step,
        )?;
        self.scst_step += 1;
        Ok(report.mean_reward)
    }

    /// Greedy-decodes up to `eval_scenes` of `eval` and scores them against
    /// their own references.
    pub fn evaluate(&self, eval: &[Scene]) -> Result<crate::metrics::CorpusScores> {
        let scenes: Vec<&Scene> = eval.iter().take(self.config.eval_scenes).collect();
        if scenes.is_empty() {
            return Err(Error::Input("no evaluation scenes".into()));
        }
        let caps = greedy_captions(&self.model, &scenes)?;
        let refs: Vec<Vec<Vec<u32>>> = scenes
            .iter()
            .map(|s| {
                s.captions
                    .iter()
                    .map(|c| self.data.vocab.encode(c))
                    .collect()
            })
            .collect();
        let ids: Vec<String> = scenes.iter().map(|s| s.id.clone()).collect();
        Ok(evaluate_captions(&ids, &caps, &refs)?.corpus)
    }

    fn record(
        &self,
        eval: &[Scene],
        lr: f64,
        ce_loss: Option<f64>,
        reward: Option<f64>,
    ) -> Result<MetricsRecord> {
        let s = self.evaluate(eval)?;
        Ok(MetricsRecord {
            step: self.ce_step + self.scst_step,
            lr,
            ce_loss,
            cider_d: s.cider_d,
            bleu1: s.bleu1,
            bleu4: s.bleu4,
            rouge_l: s.rouge_l,
            scst_reward: reward,
        })
    }

    /// Runs the CE phase up to `ce_steps`, logging to `run_dir/metrics.jsonl`
    /// and checkpointing under `run_dir/checkpoints` when a directory is given.
    pub fn run_ce(&mut self, eval: &[Scene], run_dir: Option<&Path>) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        let (mut sum, mut count) = (0.0, 0usize);
        while self.ce_step < self.config.ce_steps {
            let (loss, lr) = self.ce_step()?;
            sum += loss;
            count += 1;
            let last = self.ce_step == self.config.ce_steps;
            if last
                || (self.config.log_interval > 0
                    && self.ce_step.is_multiple_of(self.config.log_interval))
            {
                let rec = self.record(eval, lr, Some(sum / count as f64), None)?;
                log::info!(
                    "step {} lr {:.3e} ce {:.4} cider {:.3}",
                    rec.step,
                    lr,
                    sum / count as f64,
                    rec.cider_d
                );
                append_record(run_dir, &rec)?;
                records.push(rec);
                (sum, count) = (0.0, 0);
            }
            self.maybe_checkpoint(run_dir, last)?;
        }
        Ok(records)
    }

    /// Runs `scst.steps` self-critical updates.
    pub fn run_scst(
        &mut self,
        eval: &[Scene],
        run_dir: Option<&Path>,
    ) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        let (mut sum, mut count) = (0.0, 0usize);
        let target = self.config.scst.steps as u64;
        while self.scst_step < target {
            sum += self.scst_step()?;
            count += 1;
            let last = self.scst_step == target;
            if last
                || (self.config.log_interval > 0
                    && self.scst_step.is_multiple_of(self.config.log_interval))
            {
                let rec = self.record(eval, self.config.scst.lr, None, Some(sum / count as f64))?;
                log::info!(
                    "scst step {} reward {:.4} cider {:.3}",
                    self.scst_step,
                    sum / count as f64,
                    rec.cider_d
                );
                append_record(run_dir, &rec)?;
                records.push(rec);
                (sum, count) = (0.0, 0);
            }
            self.maybe_checkpoint(run_dir, last)?;
        }
        Ok(records)
    }

    fn maybe_checkpoint(&self, run_dir: Option<&Path>, last: bool) -> Result<()> {
        let Some(dir) = run_dir else { return Ok(()) };
        let step = self.ce_step + self.scst_step;
        let every = self.config.checkpoint_interval;
        if last || (every > 0 && step.is_multiple_of(every)) {
            self.save(&checkpoint_dir(dir, step))?;
        }
        if last {
            save_model(&dir.join("model.smrt"), &self.model)?;
        }
        Ok(())
    }

    /// Saves weights, optimizer moments and step counters into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_model(&dir.join("model.smrt"), &self.model)?;
        self.adam.save(
            &self.model.params,
            &dir.join("adam_m.smrt"),
            &dir.join("adam_v.smrt"),
        )?;
        let state = TrainState {
            phase: self.phase,
            ce_step: self.ce_step,
            scst_step: self.scst_step,
            adam_step: self.adam.step,
        };
        let p = dir.join("state.json");
        std::fs::write(
            &p,
            serde_json::to_string_pretty(&state).expect("state serializes"),
        )
        .map_err(|e| Error::io(p, e))
    }

    /// Restores a trainer saved with [`Trainer::save`].
    pub fn resume(dir: &Path, config: TrainConfig, data: &'d TrainingData) -> Result<Self> {
        let model = load_model::<f32>(&dir.join("model.smrt"))?;
        let p = dir.join("state.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let state: TrainState = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: p.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let mut t = Trainer::new(model, config, data)?;
        t.adam = AdamState::load(
            &t.model.params,
            t.config.adam.clone(),
            state.adam_step,
            &dir.join("adam_m.smrt"),
            &dir.join("adam_v.smrt"),
        )?;
        t.phase = state.phase;
        t.ce_step = state.ce_step;
        t.scst_step = state.scst_step;
        Ok(t)
    }
}

pub fn checkpoint_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step-{step:06}"))
}

fn append_record(run_dir: Option<&Path>, rec: &MetricsRecord) -> Result<()> {
    let Some(dir) = run_dir else { return Ok(()) };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("metrics.jsonl");
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&p)
        .map_err(|e| Error::io(&p, e))?;
    writeln!(
        f,
        "{}",
        serde_json::to_string(rec).expect("record serializes")
    )
    .map_err(|e| Error::io(&p, e))
}
