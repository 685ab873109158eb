use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use crate::decoding::{sample_for_scst, ScstSamples};
use crate::error::{Error, Result};
use crate::metrics::{CiderScorer, DocumentFrequencies};
use crate::tensor::{DropoutStream, Graph, Mode, Real, Var};
use crate::transformer::{Model, RegionBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMetric {
    CiderD,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScstConfig {
    /// Beam width; also the number of samples per image.
    pub k: usize,
    pub lr: f64,
    pub reward: RewardMetric,
    pub steps: usize,
    /// Images per update.
    pub batch_size: usize,
}

impl Default for ScstConfig {
    fn default() -> Self {
        ScstConfig {
            k: 5,
            lr: 5e-6,
            reward: RewardMetric::CiderD,
            steps: 200,
            batch_size: 16,
        }
    }
}

impl ScstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config(
                "scst.k",
                "the mean baseline needs at least 2 samples",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("scst.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("scst.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Surrogate whose gradient is the mean-baseline REINFORCE estimate:
/// for each image, `-(1/k) Σ_i (r_i - b) log p(w_i)` with `b` the mean of
/// its `k` rewards, then averaged over images. Rewards are constants.
pub fn scst_loss<T: Real>(
    g: &mut Graph<T>,
    samples: &ScstSamples,
    rewards: &[Vec<f64>],
) -> Result<Var> {
    if rewards.len() != samples.hyps.len()
        || rewards
            .iter()
            .zip(&samples.hyps)
            .any(|(r, h)| r.is_empty() || r.len() != h.len())
    {
        return Err(Error::Input(
            "one reward per sampled hypothesis required".into(),
        ));
    }
    let n = g.value(samples.step_logprobs).len();
    let mut w = vec![T::zero(); n];
    let n_images = rewards.len() as f64;
    let mut flat = 0;
    for r in rewards {
        let k = r.len() as f64;
        // Mean taken relative to r[0], so equal rewards give a baseline
        // exactly equal to them.
        let b = r[0] + r.iter().map(|x| x - r[0]).sum::<f64>() / k;
        for &ri in r {
            let coef = T::lit(-(ri - b) / k / n_images);
            for j in samples.spans[flat].clone() {
                w[j] = coef;
            }
            flat += 1;
        }
    }
    g.weighted_sum(samples.step_logprobs, &w)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScstStepReport {
    pub loss: f64,
    /// Mean reward over all samples of the batch.
    pub mean_reward: f64,
}

/// Samples `k` beams per image, rewards each with CIDEr-D against that
/// image's references (word ids), and applies one Adam update at the fixed
/// SCST learning rate.
#[allow(clippy::too_many_arguments)]
pub fn scst_step<T: Real>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    regions: &RegionBatch<T>,
    references: &[&[Vec<u32>]],
    df: &DocumentFrequencies<u32>,
    config: &ScstConfig,
    dropout: DropoutStream,
    step: u64,
) -> Result<ScstStepReport> {
    config.validate()?;
    if references.len() != regions.batch_size() {
        return Err(Error::Input("one reference set per image required".into()));
    }
    let cider = CiderScorer::new(df)?;
    let max_len = model.config.max_seq_len;
    let mut g = Graph::new(Mode::Train).with_dropout(dropout);
    let bound = model.bind(&mut g);
    let enc = model.encode(&mut g, &bound, regions)?;
    let samples = sample_for_scst(model, &mut g, &bound, &enc, regions, config.k, max_len)?;
    let rewards: Vec<Vec<f64>> = samples
        .hyps
        .iter()
        .zip(references)
        .map(|(hs, refs)| hs.iter().map(|h| cider.score(h.words(), refs)).collect())
        .collect();
    let loss = scst_loss(&mut g, &samples, &rewards)?;
    let loss_value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite {
            step,
            what: "SCST loss".into(),
        });
    }
    g.backward(loss, &mut model.params)?;
    if !model.params.grads_finite() {
        return Err(Error::NonFinite {
            step,
            what: "SCST gradient".into(),
        });
    }
    adam_step(&mut model.params, adam, config.lr);
    let total: usize = rewards.iter().map(Vec::len).sum();
    Ok(ScstStepReport {
        loss: loss_value,
        mean_reward: rewards.iter().flatten().sum::<f64>() / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_below_two_is_rejected() {
        let c = ScstConfig {
            k: 1,
            ..ScstConfig::default()
        };
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "scst.k"),
            other => panic!("{other:?}"),
        }
    }
}
