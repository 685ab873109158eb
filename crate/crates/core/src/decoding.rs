//! Autoregressive generation: greedy decoding, beam search, and the
//! beam-based sampler used by self-critical training.
//!
//! Search is written against [`StepScorer`], so the same beam mechanics run
//! over the captioning model ([`ModelScorer`]) or any fixed-logit toy model.
//! Beam scores are raw summed log-probabilities (no length normalization).
//! Ties on score go to the lexicographically smaller token sequence, i.e.
//! lower token id first, then the shorter sequence.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Mode, Real, Var};
use crate::transformer::{
    CrossContext, EncoderOutput, Model, RegionBatch, TokenBatch, TokenSequence, BOS, EOS, PAD,
};

/// Next-token log-probabilities for a batch of prefixes.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    /// For each `(source, prefix)` returns `vocab_size` log-probabilities of
    /// the token following `prefix` (which starts with BOS). Tokens that may
    /// never be generated get `-inf`.
    fn next_log_probs(&mut self, queries: &[(usize, &[u32])]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// BOS followed by the generated tokens.
    pub tokens: TokenSequence,
    pub logprob_sum: f64,
    pub per_step_logprobs: Vec<f64>,
    pub finished: bool,
}

impl BeamHypothesis {
    fn root() -> Self {
        BeamHypothesis {
            tokens: TokenSequence(vec![BOS]),
            logprob_sum: 0.0,
            per_step_logprobs: Vec::new(),
            finished: false,
        }
    }

    /// Generated tokens, EOS included.
    pub fn generated(&self) -> &[u32] {
        &self.tokens.0[1..]
    }

    /// Generated words without EOS.
    pub fn words(&self) -> &[u32] {
        self.tokens.words()
    }

    fn extend(&self, token: u32, logprob: f64, max_len: usize) -> Self {
        let mut tokens = self.tokens.0.clone();
        tokens.push(token);
        let mut steps = self.per_step_logprobs.clone();
        steps.push(logprob);
        let finished = token == EOS || tokens.len() > max_len;
        BeamHypothesis {
            tokens: TokenSequence(tokens),
            logprob_sum: self.logprob_sum + logprob,
            per_step_logprobs: steps,
            finished,
        }
    }
}

/// Higher score first; ties broken by the smaller token sequence.
fn rank(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.logprob_sum
        .total_cmp(&a.logprob_sum)
        .then_with(|| a.tokens.0.cmp(&b.tokens.0))
}

/// Indices of the `k` best finite entries, ties to the lower index.
fn top_k(logprobs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logprobs.len())
        .filter(|&i| logprobs[i] > f64::NEG_INFINITY)
        .collect();
    idx.sort_by(|&a, &b| logprobs[b].total_cmp(&logprobs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn argmax(logprobs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logprobs.iter().enumerate() {
        if v > logprobs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding for `n_sources` inputs at once: start from BOS, append
/// the argmax token, stop at EOS or after `max_len` generated tokens.
pub fn greedy_with<S: StepScorer>(
    scorer: &mut S,
    n_sources: usize,
    max_len: usize,
) -> Result<Vec<BeamHypothesis>> {
    if max_len == 0 {
        return Err(Error::Usage("max_len must be positive".into()));
    }
    let mut hyps = vec![BeamHypothesis::root(); n_sources];
    loop {
        let live: Vec<usize> = (0..n_sources).filter(|&i| !hyps[i].finished).collect();
        if live.is_empty() {
            break;
        }
        let queries: Vec<(usize, &[u32])> = live
            .iter()
            .map(|&i| (i, hyps[i].tokens.0.as_slice()))
            .collect();
        let lps = scorer.next_log_probs(&queries)?;
        for (&i, lp) in live.iter().zip(&lps) {
            let tok = argmax(lp);
            hyps[i] = hyps[i].extend(tok as u32, lp[tok], max_len);
        }
    }
    Ok(hyps)
}

/// Beam search of width `k` for `n_sources` inputs, decoded together.
///
/// Each step expands every live hypothesis by its `k` best tokens; finished
/// hypotheses stay in the pool and compete on raw summed log-probability.
/// Duplicate sequences are collapsed and the pool refilled from the next
/// best candidates. Returns up to `k` hypotheses per source, best first.
pub fn beam_search_with<S: StepScorer>(
    scorer: &mut S,
    n_sources: usize,
    k: usize,
    max_len: usize,
) -> Result<Vec<Vec<BeamHypothesis>>> {
    if k == 0 || k > scorer.vocab_size() {
        return Err(Error::Usage(format!(
            "beam size {k} outside 1..={}",
            scorer.vocab_size()
        )));
    }
    if max_len == 0 {
        return Err(Error::Usage("max_len must be positive".into()));
    }
    let mut pools: Vec<Vec<BeamHypothesis>> = vec![vec![BeamHypothesis::root()]; n_sources];
    loop {
        let mut owners = Vec::new();
        let mut queries: Vec<(usize, &[u32])> = Vec::new();
        for (s, pool) in pools.iter().enumerate() {
            for (h, hyp) in pool.iter().enumerate() {
                if !hyp.finished {
                    owners.push((s, h));
                    queries.push((s, hyp.tokens.0.as_slice()));
                }
            }
        }
        if queries.is_empty() {
            break;
        }
        let lps = scorer.next_log_probs(&queries)?;
        let mut candidates: Vec<Vec<BeamHypothesis>> = pools
            .iter()
            .map(|p| p.iter().filter(|h| h.finished).cloned().collect())
            .collect();
        for (&(s, h), lp) in owners.iter().zip(&lps) {
            let parent = &pools[s][h];
            for tok in top_k(lp, k) {
                candidates[s].push(parent.extend(tok as u32, lp[tok], max_len));
            }
        }
        for (pool, mut cands) in pools.iter_mut().zip(candidates) {
            cands.sort_by(rank);
            let mut seen = HashSet::new();
            cands.retain(|c| seen.insert(c.tokens.0.clone()));
            cands.truncate(k);
            *pool = cands;
        }
    }
    Ok(pools)
}

/// [`StepScorer`] over the captioning model. Holds an inference graph with
/// the encoder output and cross-attention projections; every query call
/// recomputes the decoder on the given prefixes and then discards those
/// nodes. PAD and BOS are never generated.
pub struct ModelScorer<'m, T: Real> {
    model: &'m Model<T>,
    g: Graph<T>,
    bound: Vec<Var>,
    ctx: CrossContext,
    mark: usize,
}

impl<'m, T: Real> ModelScorer<'m, T> {
    pub fn new(model: &'m Model<T>, regions: &RegionBatch<T>) -> Result<Self> {
        let mut g = Graph::inference();
        let bound = model.bind(&mut g);
        let enc = model.encode(&mut g, &bound, regions)?;
        let ctx = model.cross_context(&mut g, &bound, &enc)?;
        let mark = g.len();
        Ok(ModelScorer {
            model,
            g,
            bound,
            ctx,
            mark,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.ctx.n_sources()
    }
}

impl<T: Real> StepScorer for ModelScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn next_log_probs(&mut self, queries: &[(usize, &[u32])]) -> Result<Vec<Vec<f64>>> {
        let seqs: Vec<&[u32]> = queries.iter().map(|q| q.1).collect();
        let index: Vec<usize> = queries.iter().map(|q| q.0).collect();
        let tokens = TokenBatch::from_sequences(&seqs)?;
        let logits = self
            .model
            .decode(&mut self.g, &self.bound, &self.ctx, &index, &tokens)?;
        let v = self.g.value(logits);
        let out = queries
            .iter()
            .enumerate()
            .map(|(b, (_, prefix))| {
                let row = v.row(b * tokens.t_max + prefix.len() - 1);
                let mut lp = log_softmax_f64(row);
                lp[PAD as usize] = f64::NEG_INFINITY;
                lp[BOS as usize] = f64::NEG_INFINITY;
                lp
            })
            .collect();
        self.g.truncate(self.mark);
        Ok(out)
    }
}

fn log_softmax_f64<T: Real>(row: &[T]) -> Vec<f64> {
    let x: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Greedy captions for a batch of region sets.
pub fn greedy_decode<T: Real>(
    model: &Model<T>,
    regions: &RegionBatch<T>,
    max_len: usize,
) -> Result<Vec<BeamHypothesis>> {
    check_max_len(model, max_len)?;
    let mut scorer = ModelScorer::new(model, regions)?;
    greedy_with(&mut scorer, regions.batch_size(), max_len)
}

/// Beam search for a batch of region sets; `k` hypotheses per input.
pub fn beam_search<T: Real>(
    model: &Model<T>,
    regions: &RegionBatch<T>,
    k: usize,
    max_len: usize,
) -> Result<Vec<Vec<BeamHypothesis>>> {
    check_max_len(model, max_len)?;
    let mut scorer = ModelScorer::new(model, regions)?;
    beam_search_with(&mut scorer, regions.batch_size(), k, max_len)
}

fn check_max_len<T: Real>(model: &Model<T>, max_len: usize) -> Result<()> {
    if max_len == 0 || max_len > model.config.max_seq_len {
        return Err(Error::Usage(format!(
            "max_len {max_len} outside 1..={}",
            model.config.max_seq_len
        )));
    }
    Ok(())
}

/// Beam samples whose log-probabilities live on a training graph.
pub struct ScstSamples {
    /// `k` hypotheses per source, grouped by source.
    pub hyps: Vec<Vec<BeamHypothesis>>,
    /// Differentiable log-probability of every generated token, all
    /// hypotheses concatenated in `hyps` order.
    pub step_logprobs: Var,
    /// Range of `step_logprobs` belonging to each hypothesis (flattened
    /// source-major).
    pub spans: Vec<Range<usize>>,
}

impl ScstSamples {
    /// Differentiable `log p(w)` of flattened hypothesis `i`.
    pub fn sequence_logprob<T: Real>(&self, g: &mut Graph<T>, i: usize) -> Result<Var> {
        let n = g.value(self.step_logprobs).len();
        let mut w = vec![T::zero(); n];
        for j in self.spans[i].clone() {
            w[j] = T::one();
        }
        g.weighted_sum(self.step_logprobs, &w)
    }
}

/// Draws `k` hypotheses per source with the same beam mechanics as
/// [`beam_search`], then re-scores them teacher-forced on `g` so every
/// per-step log-probability is differentiable. `enc` must be the encoder
/// output of `regions` on `g` with parameters `bound`.
#[allow(clippy::too_many_arguments)]
pub fn sample_for_scst<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bound: &[Var],
    enc: &EncoderOutput,
    regions: &RegionBatch<T>,
    k: usize,
    max_len: usize,
) -> Result<ScstSamples> {
    if g.mode() != Mode::Train || !g.grad_enabled() {
        return Err(Error::Usage(
            "sample_for_scst needs a training graph with gradients enabled".into(),
        ));
    }
    let hyps = beam_search(model, regions, k, max_len)?;
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
    let tokens = TokenBatch::from_sequences(&inputs)?;
    let ctx = model.cross_context(g, bound, enc)?;
    let logits = model.decode(g, bound, &ctx, &index, &tokens)?;
    let logp = g.log_softmax(logits);
    let mut pick = Vec::new();
    let mut spans = Vec::with_capacity(flat.len());
    for (b, (_, h)) in flat.iter().enumerate() {
        let start = pick.len();
        for (t, &tok) in h.generated().iter().enumerate() {
            pick.push((b * tokens.t_max + t, tok as usize));
        }
        spans.push(start..pick.len());
    }
    let step_logprobs = g.pick(logp, &pick)?;
    Ok(ScstSamples {
        hyps,
        step_logprobs,
        spans,
    })
}

/// Teacher-forced `log p(tokens)` of complete sequences (BOS first, EOS
/// last unless truncated), one per source.
pub fn sequence_log_probs<T: Real>(
    model: &Model<T>,
    regions: &RegionBatch<T>,
    seqs: &[&TokenSequence],
) -> Result<Vec<f64>> {
    let mut g = Graph::inference();
    let inputs: Vec<&[u32]> = seqs.iter().map(|s| &s.0[..s.0.len() - 1]).collect();
    let tokens = TokenBatch::from_sequences(&inputs)?;
    let logits = model.forward(&mut g, regions, &tokens)?;
    let v = g.value(logits);
    Ok(seqs
        .iter()
        .enumerate()
        .map(|(b, s)| {
            s.0[1..]
                .iter()
                .enumerate()
                .map(|(t, &tok)| log_softmax_f64(v.row(b * tokens.t_max + t))[tok as usize])
                .sum()
        })
        .collect())
}
