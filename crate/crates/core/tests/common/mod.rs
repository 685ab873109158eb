#![allow(dead_code)]

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use smart::attention::key_padding_mask;
use smart::attention::scaled_dot_attention;
use smart::cli::gradcheck_model_config;
use smart::decoding::{sample_for_scst, BeamHypothesis, ScstSamples, StepScorer};
use smart::tensor::{Graph, Mode, ParamStore, Tensor, Var};
use smart::transformer::{
    add_norm, feed_forward, FeedForwardParams, Model, ModelConfig, NormParams, RegionBatch,
    TokenBatch, BOS, EOS, NUM_RESERVED,
};
use smart::Result;

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub fn small(n_memory: usize) -> ModelConfig {
    ModelConfig {
        n_enc_layers: 3,
        n_dec_layers: 2,
        d_model: 16,
        n_heads: 4,
        d_ff: 32,
        n_memory,
        vocab_size: 20,
        max_seq_len: 8,
        region_feature_dim: 6,
        max_regions: 5,
        dropout_keep: 1.0,
    }
}

pub fn random_sets(seed: u64, sizes: &[usize], dim: usize) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sizes
        .iter()
        .map(|&n| {
            let data = (0..n * dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            Tensor::new(vec![n, dim], data).unwrap()
        })
        .collect()
}

/// Encoder written from plain per-head attention, with no memory handling.
pub fn plain_encoder(
    model: &Model<f64>,
    g: &mut Graph<f64>,
    bound: &[Var],
    rb: &RegionBatch<f64>,
) -> Var {
    let c = &model.config;
    let id = |name: &str| model.params.id(name).unwrap();
    let (n, d, dh) = (rb.n_max, c.d_model, c.d_model / c.n_heads);
    let x = g.input(rb.features.clone());
    let mut h = g.matmul_t(x, bound[id("region_proj.W").0]).unwrap();
    for l in 0..c.n_enc_layers {
        let p = |s: &str| id(&format!("enc.{l}.{s}"));
        let q = g.matmul_t(h, bound[p("attn.Wq").0]).unwrap();
        let k = g.matmul_t(h, bound[p("attn.Wk").0]).unwrap();
        let v = g.matmul_t(h, bound[p("attn.Wv").0]).unwrap();
        let mut elements = Vec::new();
        for (b, &len) in rb.lens.iter().enumerate() {
            let mask = key_padding_mask(n, n, len);
            let k_b = g.slice(k, b * n, n, 0, d).unwrap();
            let v_b = g.slice(v, b * n, n, 0, d).unwrap();
            let mut heads = Vec::new();
            for hd in 0..c.n_heads {
                let kh = g.slice(k_b, 0, n, hd * dh, dh).unwrap();
                let vh = g.slice(v_b, 0, n, hd * dh, dh).unwrap();
                let qh = g.slice(q, b * n, n, hd * dh, dh).unwrap();
                heads.push(scaled_dot_attention(g, qh, kh, vh, &mask).unwrap().0);
            }
            elements.push(g.concat_cols(&heads).unwrap());
        }
        let cat = g.concat_rows(&elements).unwrap();
        let a = g.matmul_t(cat, bound[p("attn.Wo").0]).unwrap();
        let norm = |s: &str| NormParams {
            gain: p(&format!("{s}.gain")),
            bias: p(&format!("{s}.bias")),
        };
        h = add_norm(g, bound, &norm("norm1"), h, a).unwrap();
        let ff = FeedForwardParams {
            v: p("ff.V"),
            b: p("ff.b"),
            u: p("ff.U"),
            c: p("ff.c"),
        };
        let f = feed_forward(g, bound, &ff, h).unwrap();
        h = add_norm(g, bound, &norm("norm2"), h, f).unwrap();
    }
    h
}

/// Three-token toy model whose distribution depends only on the step.
pub struct StepTable(pub Vec<Vec<f64>>);

impl StepScorer for StepTable {
    fn vocab_size(&self) -> usize {
        3
    }
    fn next_log_probs(&mut self, q: &[(usize, &[u32])]) -> Result<Vec<Vec<f64>>> {
        Ok(q.iter().map(|(_, p)| self.0[p.len() - 1].clone()).collect())
    }
}

/// Every sequence ending in EOS or reaching `max_len`, with its score.
pub fn enumerate(table: &[Vec<f64>], max_len: usize) -> Vec<(Vec<u32>, f64)> {
    let mut done = Vec::new();
    let mut live = vec![(Vec::new(), 0.0)];
    for (step, lp) in table.iter().enumerate().take(max_len) {
        let mut next = Vec::new();
        for (seq, score) in &live {
            for tok in 0..3u32 {
                let mut s: Vec<u32> = seq.clone();
                s.push(tok);
                let sc = score + lp[tok as usize];
                if tok == EOS || step + 1 == max_len {
                    done.push((s, sc));
                } else {
                    next.push((s, sc));
                }
            }
        }
        live = next;
    }
    done.sort_by(|a: &(Vec<u32>, f64), b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    done
}

pub fn table(probs: &[[f64; 3]]) -> Vec<Vec<f64>> {
    probs
        .iter()
        .map(|p| p.iter().map(|x| x.ln()).collect())
        .collect()
}

pub fn brute_force(p: &[Vec<f64>]) -> f64 {
    let (m, n) = (p.len(), p[0].len());
    if m <= n {
        (0..n)
            .permutations(m)
            .map(|cols| cols.iter().enumerate().map(|(i, &j)| p[i][j]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    } else {
        (0..m)
            .permutations(n)
            .map(|rows| rows.iter().enumerate().map(|(j, &i)| p[i][j]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn regions(seed: u64) -> RegionBatch<f64> {
    let dim = gradcheck_model_config().region_feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sets: Vec<Tensor<f64>> = [3usize, 2]
        .iter()
        .map(|&n| {
            let data = (0..n * dim)
                .map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            Tensor::new(vec![n, dim], data).unwrap()
        })
        .collect();
    RegionBatch::from_sets(&sets.iter().collect::<Vec<_>>()).unwrap()
}

pub fn sample(model: &Model<f64>, rb: &RegionBatch<f64>, k: usize) -> Vec<Vec<BeamHypothesis>> {
    let mut g = Graph::new(Mode::Train);
    let bound = model.bind(&mut g);
    let enc = model.encode(&mut g, &bound, rb).unwrap();
    let max_len = model.config.max_seq_len;
    sample_for_scst(model, &mut g, &bound, &enc, rb, k, max_len)
        .unwrap()
        .hyps
}

/// Differentiable per-step log-probabilities of fixed hypotheses under
/// `params`.
pub fn rescore(
    model: &Model<f64>,
    params: &ParamStore<f64>,
    g: &mut Graph<f64>,
    rb: &RegionBatch<f64>,
    hyps: &[Vec<BeamHypothesis>],
) -> ScstSamples {
    let bound = g.bind_all(params);
    let enc = model.encode(g, &bound, rb).unwrap();
    let ctx = model.cross_context(g, &bound, &enc).unwrap();
    let flat: Vec<(usize, &BeamHypothesis)> = hyps
        .iter()
        .enumerate()
        .flat_map(|(s, hs)| hs.iter().map(move |h| (s, h)))
        .collect();
    let inputs: Vec<&[u32]> = flat
        .iter()
        .map(|(_, h)| &h.tokens.0[..h.tokens.0.len() - 1])
        .collect();
    let index: Vec<usize> = flat.iter().map(|(s, _)| *s).collect();
    let tokens = TokenBatch::from_sequences(&inputs).unwrap();
    let logits = model.decode(g, &bound, &ctx, &index, &tokens).unwrap();
    let logp = g.log_softmax(logits);
    let mut pick = Vec::new();
    let mut spans = Vec::new();
    for (b, (_, h)) in flat.iter().enumerate() {
        let start = pick.len();
        for (t, &tok) in h.generated().iter().enumerate() {
            pick.push((b * tokens.t_max + t, tok as usize));
        }
        spans.push(start..pick.len());
    }
    let step_logprobs = g.pick(logp, &pick).unwrap();
    ScstSamples {
        hyps: hyps.to_vec(),
        step_logprobs,
        spans,
    }
}

/// Step tables on which width-2 and width-3 beams are exact: early EOS
/// is unlikely enough that no finished hypothesis is pruned too soon.
pub fn hand_set_models() -> Vec<Vec<Vec<f64>>> {
    vec![
        table(&[[0.5, 0.3, 0.2], [0.2, 0.1, 0.7]]),
        table(&[[0.6, 0.3, 0.1], [0.1, 0.2, 0.7]]),
        table(&[[0.5, 0.45, 0.05], [0.3, 0.6, 0.1], [0.05, 0.15, 0.8]]),
        table(&[
            [0.5, 0.48, 0.02],
            [0.6, 0.38, 0.02],
            [0.2, 0.78, 0.02],
            [0.1, 0.1, 0.8],
        ]),
        table(&[
            [0.7, 0.28, 0.02],
            [0.4, 0.55, 0.05],
            [0.3, 0.6, 0.1],
            [0.25, 0.25, 0.5],
        ]),
    ]
}

/// Toy model whose distribution is a fixed function of the whole prefix.
pub struct PrefixHash {
    pub vocab: usize,
    pub seed: u64,
}

impl StepScorer for PrefixHash {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn next_log_probs(&mut self, q: &[(usize, &[u32])]) -> Result<Vec<Vec<f64>>> {
        Ok(q.iter()
            .map(|(s, p)| {
                let mut h = self.seed ^ (*s as u64) << 32;
                for &t in p.iter() {
                    h = h.wrapping_mul(0x100_0000_01b3) ^ t as u64;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(h);
                let logits: Vec<f64> = (0..self.vocab)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                log_softmax(&logits)
            })
            .collect())
    }
}

fn logits_f32(model: &Model<f32>, rb: &RegionBatch<f32>, seq: &[u32]) -> Tensor<f32> {
    let mut g = Graph::inference();
    let tokens = TokenBatch::from_sequences(&[seq]).unwrap();
    let out = model.forward(&mut g, rb, &tokens).unwrap();
    g.value(out).clone()
}

/// Largest change of any logit at positions before a random cut point when
/// every token from the cut onwards is replaced, over `trials` draws.
/// Also checks that the logits at the cut itself do change.
pub fn causality_worst(trials: usize) -> f32 {
    let cfg = ModelConfig {
        vocab_size: 40,
        ..ModelConfig::default()
    };
    let model = Model::<f32>::new(cfg.clone(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f32;
    for _ in 0..trials {
        let n = rng.random_range(1..=cfg.max_regions);
        let data = (0..n * cfg.region_feature_dim)
            .map(|_| Distribution::<f32>::sample(&StandardNormal, &mut rng))
            .collect();
        let set = Tensor::new(vec![n, cfg.region_feature_dim], data).unwrap();
        let rb = RegionBatch::from_sets(&[&set]).unwrap();
        let len = rng.random_range(2..=cfg.max_seq_len);
        let mut seq = vec![BOS];
        seq.extend((1..len).map(|_| rng.random_range(NUM_RESERVED..cfg.vocab_size as u32)));
        let cut = rng.random_range(1..len);
        let mut other = seq.clone();
        for t in &mut other[cut..] {
            *t = rng.random_range(NUM_RESERVED..cfg.vocab_size as u32);
        }
        other[cut] = if seq[cut] == NUM_RESERVED {
            NUM_RESERVED + 1
        } else {
            NUM_RESERVED
        };
        let (a, b) = (
            logits_f32(&model, &rb, &seq),
            logits_f32(&model, &rb, &other),
        );
        for r in 0..cut {
            for (x, y) in a.row(r).iter().zip(b.row(r)) {
                worst = worst.max((x - y).abs());
            }
        }
        assert!(a.row(cut).iter().zip(b.row(cut)).any(|(x, y)| x != y));
    }
    worst
}
