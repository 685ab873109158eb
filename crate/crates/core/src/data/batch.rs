use serde::Serialize;

use super::{Scene, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::transformer::{RegionBatch, TokenBatch, BOS, EOS, PAD};

/// A (scene, caption) training pair by index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Example {
    pub scene: usize,
    pub caption: usize,
}

/// One padded mini-batch. `inputs` is BOS followed by the caption words;
/// `targets` is the same words followed by EOS, PAD-padded to the same
/// `t_max`.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub examples: Vec<Example>,
    pub regions: RegionBatch<T>,
    pub inputs: TokenBatch,
    pub targets: Vec<u32>,
}

impl<T> Batch<T> {
    pub fn batch_size(&self) -> usize {
        self.examples.len()
    }

    /// Non-PAD target count.
    pub fn n_tokens(&self) -> usize {
        self.targets.iter().filter(|&&t| t != PAD).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TruncationWarning {
    pub scene_id: String,
    pub caption: usize,
    pub words: usize,
    pub kept: usize,
}

/// Groups `examples` in order into batches of at most `batch_size`. Decoder
/// inputs are capped at `max_len` tokens (BOS included); longer captions are
/// cut and reported.
pub fn batchify<T: Real>(
    scenes: &[Scene],
    examples: &[Example],
    vocab: &Vocabulary,
    batch_size: usize,
    max_len: usize,
) -> Result<(Vec<Batch<T>>, Vec<TruncationWarning>)> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if max_len < 2 {
        return Err(Error::config("max_len", "must be at least 2"));
    }
    let tensors: Vec<Tensor<T>> = scenes.iter().map(Scene::region_tensor).collect();
    let mut warnings = Vec::new();
    let mut batches = Vec::new();
    for chunk in examples.chunks(batch_size) {
        let mut inputs = Vec::with_capacity(chunk.len());
        let mut targets = Vec::with_capacity(chunk.len());
        for ex in chunk {
            let scene = scenes.get(ex.scene).ok_or_else(|| {
                Error::Input(format!("example refers to missing scene {}", ex.scene))
            })?;
            let caption = scene.captions.get(ex.caption).ok_or_else(|| {
                Error::Input(format!(
                    "scene {:?} has no caption {}",
                    scene.id, ex.caption
                ))
            })?;
            let mut words = vocab.encode(caption);
            if words.len() + 1 > max_len {
                warnings.push(TruncationWarning {
                    scene_id: scene.id.clone(),
                    caption: ex.caption,
                    words: words.len(),
                    kept: max_len - 1,
                });
                log::warn!(
                    "caption {} of scene {:?} truncated from {} to {} words",
                    ex.caption,
                    scene.id,
                    words.len(),
                    max_len - 1
                );
                words.truncate(max_len - 1);
            }
            let mut input = vec![BOS];
            input.extend(&words);
            words.push(EOS);
            inputs.push(input);
            targets.push(words);
        }
        let sets: Vec<&Tensor<T>> = chunk.iter().map(|e| &tensors[e.scene]).collect();
        let regions = RegionBatch::from_sets(&sets)?;
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let tokens = TokenBatch::from_sequences(&refs)?;
        let mut flat = Vec::with_capacity(chunk.len() * tokens.t_max);
        for t in &targets {
            flat.extend(t);
            flat.extend(std::iter::repeat_n(PAD, tokens.t_max - t.len()));
        }
        batches.push(Batch {
            examples: chunk.to_vec(),
            regions,
            inputs: tokens,
            targets: flat,
        });
    }
    Ok((batches, warnings))
}
