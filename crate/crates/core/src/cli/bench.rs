use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::decoding::{greedy_with, ModelScorer, StepScorer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::{Model, ModelConfig, RegionBatch, EOS};

/// Latency grid. Every model has `n_layers` encoder and decoder layers and
/// decodes exactly `steps` tokens, so timings compare equal work.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub layers: Vec<usize>,
    pub memory: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    pub steps: usize,
    pub n_regions: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            layers: vec![2, 6],
            memory: vec![0, 40],
            batch_sizes: vec![1, 8, 32],
            repeats: 10,
            warmup: 2,
            steps: 16,
            n_regions: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n_layers: usize,
    pub n_memory: usize,
    pub batch_size: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
    pub min_ms: f64,
    pub repeats: usize,
}

/// Forbids EOS so every decode runs the full step budget.
struct NoStop<S>(S);

impl<S: StepScorer> StepScorer for NoStop<S> {
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    fn next_log_probs(&mut self, queries: &[(usize, &[u32])]) -> Result<Vec<Vec<f64>>> {
        let mut lps = self.0.next_log_probs(queries)?;
        for lp in &mut lps {
            lp[EOS as usize] = f64::NEG_INFINITY;
        }
        Ok(lps)
    }
}

struct Cell {
    n_layers: usize,
    n_memory: usize,
    batch_size: usize,
    model: Model<f32>,
    regions: RegionBatch<f32>,
    times: Vec<f64>,
}

impl Cell {
    /// Encode plus autoregressive decode; inputs are prepared beforehand.
    fn run(&self, steps: usize) -> Result<f64> {
        let start = Instant::now();
        let scorer = ModelScorer::new(&self.model, &self.regions)?;
        let out = greedy_with(&mut NoStop(scorer), self.batch_size, steps)?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        debug_assert!(out.iter().all(|h| h.generated().len() == steps));
        Ok(elapsed)
    }
}

/// Times every (layers, memory, batch) cell. Repeats are interleaved
/// across cells so slow drift in machine load spreads evenly.
pub fn run_bench(cfg: &BenchConfig, base: &ModelConfig) -> Result<Vec<BenchRow>> {
    if cfg.repeats < 2 {
        return Err(Error::config(
            "bench.repeats",
            "need at least 2 repeats for a spread",
        ));
    }
    if cfg.steps == 0 || cfg.n_regions == 0 {
        return Err(Error::config(
            "bench.steps",
            "steps and n_regions must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cells = Vec::new();
    for &l in &cfg.layers {
        for &m in &cfg.memory {
            let mc = ModelConfig {
                n_enc_layers: l,
                n_dec_layers: l,
                n_memory: m,
                max_seq_len: base.max_seq_len.max(cfg.steps + 1),
                max_regions: base.max_regions.max(cfg.n_regions),
                ..base.clone()
            };
            let model = Model::<f32>::new(mc, cfg.seed)?;
            for &b in &cfg.batch_sizes {
                let dim = base.region_feature_dim;
                let sets: Vec<Tensor<f32>> = (0..b)
                    .map(|_| {
                        let data = (0..cfg.n_regions * dim)
                            .map(|_| rng.sample::<f32, _>(StandardNormal))
                            .collect();
                        Tensor::new(vec![cfg.n_regions, dim], data).expect("shape matches")
                    })
                    .collect();
                let refs: Vec<&Tensor<f32>> = sets.iter().collect();
                cells.push(Cell {
                    n_layers: l,
                    n_memory: m,
                    batch_size: b,
                    model: model.clone(),
                    regions: RegionBatch::from_sets(&refs)?,
                    times: Vec::new(),
                });
            }
        }
    }
    for c in &cells {
        for _ in 0..cfg.warmup {
            c.run(cfg.steps)?;
        }
    }
    for _ in 0..cfg.repeats {
        for c in &mut cells {
            let t = c.run(cfg.steps)?;
            c.times.push(t);
        }
    }
    Ok(cells
        .iter()
        .map(|c| {
            let n = c.times.len() as f64;
            let mean = c.times.iter().sum::<f64>() / n;
            let var = c.times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let mut sorted = c.times.clone();
            sorted.sort_by(f64::total_cmp);
            let mid = sorted.len() / 2;
            let median = if sorted.len() % 2 == 1 {
                sorted[mid]
            } else {
                0.5 * (sorted[mid - 1] + sorted[mid])
            };
            BenchRow {
                n_layers: c.n_layers,
                n_memory: c.n_memory,
                batch_size: c.batch_size,
                mean_ms: mean,
                std_ms: var.sqrt(),
                median_ms: median,
                min_ms: sorted[0],
                repeats: c.times.len(),
            }
        })
        .collect())
}

/// Writes `bench.csv` and `bench.json` into `dir`.
pub fn write_bench(dir: &Path, rows: &[BenchRow]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("bench.csv");
    let mut w = csv::Writer::from_path(&csv_path)
        .map_err(|e| Error::Input(format!("{}: {e}", csv_path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Input(format!("{}: {e}", csv_path.display())))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join("bench.json");
    let text = serde_json::to_string_pretty(rows).expect("rows serialize") + "\n";
    std::fs::write(&json_path, text).map_err(|e| Error::io(json_path, e))
}
