//! Encoder and decoder stacks and the full captioning model.
//!
//! Every sublayer is post-norm: `LayerNorm(x + Dropout(f(x)))`. The encoder
//! consumes an unordered set of region features (no positional encoding)
//! and its self-attention layers carry the memory slots; the decoder adds
//! sinusoidal encodings to word embeddings and alternates masked
//! self-attention, cross-attention over the encoder output, and a
//! position-wise feed-forward block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend, causal_padding_mask, key_padding_mask, memory_param_count, multi_head_attention,
    project_kv, xavier, AttentionBatch, MultiHeadParams, ProjectedKv,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_RESERVED: u32 = 4;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Memory slots per head in each encoder self-attention layer.
    pub n_memory: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub region_feature_dim: usize,
    pub max_regions: usize,
    pub dropout_keep: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_memory: 8,
            vocab_size: 64,
            max_seq_len: 32,
            region_feature_dim: 64,
            max_regions: 10,
            dropout_keep: 0.9,
        }
    }
}

impl ModelConfig {
    /// Width, heads, feed-forward size and depth used for full-scale runs.
    pub fn full_scale() -> Self {
        ModelConfig {
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            n_memory: 40,
            region_feature_dim: 2048,
            max_regions: 50,
            vocab_size: 10_000,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("region_feature_dim", self.region_feature_dim),
            ("max_regions", self.max_regions),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "n_heads",
                format!("d_model {} not divisible by {}", self.d_model, self.n_heads),
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::config(
                "d_model",
                "sinusoidal encodings need an even width",
            ));
        }
        if self.d_ff < self.d_model {
            return Err(Error::config("d_ff", "must be at least d_model"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len", "must be at least 2"));
        }
        if (self.vocab_size as u32) <= NUM_RESERVED {
            return Err(Error::config(
                "vocab_size",
                "must exceed the 4 reserved tokens",
            ));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::config("dropout_keep", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count; agrees with enumerating [`Model::params`].
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let attn = 4 * d * d;
        let ff = 2 * d * self.d_ff + self.d_ff + d;
        let norm = 2 * d;
        let enc_layer = attn + memory_param_count(self.n_memory, self.n_heads, d) + ff + 2 * norm;
        let dec_layer = 2 * attn + ff + 3 * norm;
        d * self.region_feature_dim
            + self.vocab_size * d
            + self.n_enc_layers * enc_layer
            + self.n_dec_layers * dec_layer
            + self.vocab_size * d
            + self.vocab_size
    }
}

/// Token ids with `BOS` at position 0, no `BOS` elsewhere, and nothing but
/// `PAD` after an `EOS`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn validate(&self) -> Result<()> {
        let ids = &self.0;
        if ids.first() != Some(&BOS) {
            return Err(Error::Input("token sequence must start with BOS".into()));
        }
        if ids[1..].contains(&BOS) {
            return Err(Error::Input("BOS after position 0".into()));
        }
        if let Some(e) = ids.iter().position(|&t| t == EOS) {
            if ids[e + 1..].iter().any(|&t| t != PAD) {
                return Err(Error::Input("tokens after EOS".into()));
            }
        }
        Ok(())
    }

    /// Length excluding trailing padding.
    pub fn true_len(&self) -> usize {
        self.0.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1)
    }

    /// Words between BOS and EOS/PAD.
    pub fn words(&self) -> &[u32] {
        let start = usize::from(self.0.first() == Some(&BOS));
        let end = self.0[start..]
            .iter()
            .position(|&t| t == EOS || t == PAD)
            .map_or(self.0.len(), |p| p + start);
        &self.0[start..end]
    }
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
pub fn positional_encoding<T: Real>(max_len: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::config(
            "d_model",
            format!("positional encoding needs even d, got {d}"),
        ));
    }
    let mut data = Vec::with_capacity(max_len * d);
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data.push(T::lit(angle.sin()));
            data.push(T::lit(angle.cos()));
        }
    }
    Tensor::new(vec![max_len, d], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams {
    /// `d_ff x d`
    pub v: ParamId,
    pub b: ParamId,
    /// `d x d_ff`
    pub u: ParamId,
    pub c: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// `FF(x) = U relu(V x + b) + c`, applied to every row independently.
pub fn feed_forward<T: Real>(
    g: &mut Graph<T>,
    bound: &[Var],
    p: &FeedForwardParams,
    x: Var,
) -> Result<Var> {
    let h = g.matmul_t(x, bound[p.v.0])?;
    let h = g.add_row(h, bound[p.b.0])?;
    let h = g.relu(h);
    let y = g.matmul_t(h, bound[p.u.0])?;
    g.add_row(y, bound[p.c.0])
}

/// `LayerNorm(x + sublayer_output)`.
pub fn add_norm<T: Real>(
    g: &mut Graph<T>,
    bound: &[Var],
    p: &NormParams,
    x: Var,
    sublayer_output: Var,
) -> Result<Var> {
    let s = g.add(x, sublayer_output)?;
    g.layer_norm(s, bound[p.gain.0], bound[p.bias.0], T::lit(LAYER_NORM_EPS))
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadParams,
    norm1: NormParams,
    ff: FeedForwardParams,
    norm2: NormParams,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadParams,
    norm1: NormParams,
    cross_attn: MultiHeadParams,
    norm2: NormParams,
    ff: FeedForwardParams,
    norm3: NormParams,
}

#[derive(Clone, Debug)]
struct Layout {
    region_proj: ParamId,
    embed: ParamId,
    enc: Vec<EncoderLayer>,
    dec: Vec<DecoderLayer>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Padded batch of region sets: `features` is `(B * n_max) x region_dim`.
#[derive(Clone, Debug)]
pub struct RegionBatch<T> {
    pub features: Tensor<T>,
    pub lens: Vec<usize>,
    pub n_max: usize,
}

impl<T: Real> RegionBatch<T> {
    /// Stacks region matrices, padding each set with zero rows to the
    /// largest set size.
    pub fn from_sets(sets: &[&Tensor<T>]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Input("empty region batch".into()))?;
        let dim = first.cols();
        let n_max = sets.iter().map(|s| s.rows()).max().unwrap_or(0);
        let mut data = Vec::with_capacity(sets.len() * n_max * dim);
        let mut lens = Vec::with_capacity(sets.len());
        for s in sets {
            if s.cols() != dim {
                return Err(Error::Shape {
                    op: "region batch",
                    lhs: first.shape().to_vec(),
                    rhs: s.shape().to_vec(),
                });
            }
            if s.rows() == 0 {
                return Err(Error::Input("empty region set".into()));
            }
            data.extend_from_slice(s.data());
            data.extend(std::iter::repeat_n(T::zero(), (n_max - s.rows()) * dim));
            lens.push(s.rows());
        }
        Ok(RegionBatch {
            features: Tensor::new(vec![sets.len() * n_max, dim], data)?,
            lens,
            n_max,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }
}

/// Padded batch of decoder inputs (`B * t_max` ids, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub lens: Vec<usize>,
    pub t_max: usize,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[&[u32]]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Input("empty token batch or sequence".into()));
        }
        let t_max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * t_max);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, t_max - s.len()));
        }
        Ok(TokenBatch {
            ids,
            lens: seqs.iter().map(|s| s.len()).collect(),
            t_max,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.t_max..(b + 1) * self.t_max]
    }
}

/// Encoder output: `(B * n_max) x d` rows plus the true set sizes.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub out: Var,
    pub lens: Vec<usize>,
    pub n_max: usize,
}

/// Cross-attention keys/values of an encoder output, one entry per decoder
/// layer.
#[derive(Clone, Debug)]
pub struct CrossContext {
    kv: Vec<ProjectedKv>,
    lens: Vec<usize>,
    n_max: usize,
}

impl CrossContext {
    pub fn n_sources(&self) -> usize {
        self.lens.len()
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

fn norm_init<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<NormParams> {
    Ok(NormParams {
        gain: store.insert(format!("{prefix}.gain"), Tensor::filled(&[d], T::one()))?,
        bias: store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))?,
    })
}

fn ff_init<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    d_ff: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FeedForwardParams> {
    Ok(FeedForwardParams {
        v: store.insert(format!("{prefix}.V"), xavier(rng, d_ff, d))?,
        b: store.insert(format!("{prefix}.b"), Tensor::zeros(&[d_ff]))?,
        u: store.insert(format!("{prefix}.U"), xavier(rng, d, d_ff))?,
        c: store.insert(format!("{prefix}.c"), Tensor::zeros(&[d]))?,
    })
}

fn lookup<T: Real>(store: &ParamStore<T>, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Input(format!("missing parameter `{name}`")))?;
    let actual = store.get(id).value.shape();
    if actual != shape {
        return Err(Error::Input(format!(
            "parameter `{name}` has shape {actual:?}, config expects {shape:?}"
        )));
    }
    Ok(id)
}

impl<T: Real> Model<T> {
    /// Freshly initialized model; identical `seed` gives identical weights
    /// at either precision (up to rounding).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let d = c.d_model;
        let mut s = ParamStore::new();
        let region_proj = s.insert("region_proj.W", xavier(&mut rng, d, c.region_feature_dim))?;
        let embed = s.insert("embed.W", xavier(&mut rng, c.vocab_size, d))?;
        let mut enc = Vec::with_capacity(c.n_enc_layers);
        for l in 0..c.n_enc_layers {
            let p = format!("enc.{l}");
            enc.push(EncoderLayer {
                attn: MultiHeadParams::init(
                    &mut s,
                    &format!("{p}.attn"),
                    d,
                    c.n_heads,
                    c.n_memory,
                    &mut rng,
                )?,
                norm1: norm_init(&mut s, &format!("{p}.norm1"), d)?,
                ff: ff_init(&mut s, &format!("{p}.ff"), d, c.d_ff, &mut rng)?,
                norm2: norm_init(&mut s, &format!("{p}.norm2"), d)?,
            });
        }
        let mut dec = Vec::with_capacity(c.n_dec_layers);
        for l in 0..c.n_dec_layers {
            let p = format!("dec.{l}");
            dec.push(DecoderLayer {
                self_attn: MultiHeadParams::init(
                    &mut s,
                    &format!("{p}.self_attn"),
                    d,
                    c.n_heads,
                    0,
                    &mut rng,
                )?,
                norm1: norm_init(&mut s, &format!("{p}.norm1"), d)?,
                cross_attn: MultiHeadParams::init(
                    &mut s,
                    &format!("{p}.cross_attn"),
                    d,
                    c.n_heads,
                    0,
                    &mut rng,
                )?,
                norm2: norm_init(&mut s, &format!("{p}.norm2"), d)?,
                ff: ff_init(&mut s, &format!("{p}.ff"), d, c.d_ff, &mut rng)?,
                norm3: norm_init(&mut s, &format!("{p}.norm3"), d)?,
            });
        }
        let out_w = s.insert("out.W", xavier(&mut rng, c.vocab_size, d))?;
        let out_b = s.insert("out.b", Tensor::zeros(&[c.vocab_size]))?;
        Ok(Model {
            config,
            params: s,
            layout: Layout {
                region_proj,
                embed,
                enc,
                dec,
                out_w,
                out_b,
            },
        })
    }

    /// Wraps an existing parameter store (e.g. a loaded checkpoint), checking
    /// that every expected parameter exists with the configured shape.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d_model;
        let s = &params;
        let norm = |p: String| -> Result<NormParams> {
            Ok(NormParams {
                gain: lookup(s, &format!("{p}.gain"), &[d])?,
                bias: lookup(s, &format!("{p}.bias"), &[d])?,
            })
        };
        let ff = |p: String| -> Result<FeedForwardParams> {
            Ok(FeedForwardParams {
                v: lookup(s, &format!("{p}.V"), &[c.d_ff, d])?,
                b: lookup(s, &format!("{p}.b"), &[c.d_ff])?,
                u: lookup(s, &format!("{p}.U"), &[d, c.d_ff])?,
                c: lookup(s, &format!("{p}.c"), &[d])?,
            })
        };
        let mut enc = Vec::new();
        for l in 0..c.n_enc_layers {
            enc.push(EncoderLayer {
                attn: MultiHeadParams::from_store(
                    s,
                    &format!("enc.{l}.attn"),
                    d,
                    c.n_heads,
                    c.n_memory,
                )?,
                norm1: norm(format!("enc.{l}.norm1"))?,
                ff: ff(format!("enc.{l}.ff"))?,
                norm2: norm(format!("enc.{l}.norm2"))?,
            });
        }
        let mut dec = Vec::new();
        for l in 0..c.n_dec_layers {
            dec.push(DecoderLayer {
                self_attn: MultiHeadParams::from_store(
                    s,
                    &format!("dec.{l}.self_attn"),
                    d,
                    c.n_heads,
                    0,
                )?,
                norm1: norm(format!("dec.{l}.norm1"))?,
                cross_attn: MultiHeadParams::from_store(
                    s,
                    &format!("dec.{l}.cross_attn"),
                    d,
                    c.n_heads,
                    0,
                )?,
                norm2: norm(format!("dec.{l}.norm2"))?,
                ff: ff(format!("dec.{l}.ff"))?,
                norm3: norm(format!("dec.{l}.norm3"))?,
            });
        }
        let layout = Layout {
            region_proj: lookup(s, "region_proj.W", &[d, c.region_feature_dim])?,
            embed: lookup(s, "embed.W", &[c.vocab_size, d])?,
            enc,
            dec,
            out_w: lookup(s, "out.W", &[c.vocab_size, d])?,
            out_b: lookup(s, "out.b", &[c.vocab_size])?,
        };
        let expected = config.param_count();
        if params.num_scalars() != expected {
            return Err(Error::Input(format!(
                "checkpoint holds {} scalars, config expects {expected}",
                params.num_scalars()
            )));
        }
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    /// Same weights at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Memory-slot handles of encoder layer `l`.
    pub fn encoder_attention(&self, l: usize) -> &MultiHeadParams {
        &self.layout.enc[l].attn
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        g.bind_all(&self.params)
    }

    /// Encodes a padded batch of region sets.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        regions: &RegionBatch<T>,
    ) -> Result<EncoderOutput> {
        let c = &self.config;
        if regions.features.cols() != c.region_feature_dim {
            return Err(Error::Shape {
                op: "encode",
                lhs: regions.features.shape().to_vec(),
                rhs: vec![regions.n_max * regions.batch_size(), c.region_feature_dim],
            });
        }
        if let Some(&bad) = regions.lens.iter().find(|&&n| n == 0 || n > c.max_regions) {
            return Err(Error::Input(format!(
                "region set of size {bad} outside 1..={}",
                c.max_regions
            )));
        }
        let n = regions.n_max;
        let masks: Vec<_> = regions
            .lens
            .iter()
            .map(|&len| key_padding_mask(n, n, len))
            .collect();
        let index: Vec<usize> = (0..regions.batch_size()).collect();
        let batch = AttentionBatch {
            q_len: n,
            kv_index: &index,
            masks: &masks,
        };
        let x = g.input(regions.features.clone());
        let mut h = g.matmul_t(x, bound[self.layout.region_proj.0])?;
        for layer in &self.layout.enc {
            let a = multi_head_attention(g, bound, &layer.attn, h, h, n, &batch)?;
            let a = g.dropout(a.out, c.dropout_keep)?;
            h = add_norm(g, bound, &layer.norm1, h, a)?;
            let f = feed_forward(g, bound, &layer.ff, h)?;
            let f = g.dropout(f, c.dropout_keep)?;
            h = add_norm(g, bound, &layer.norm2, h, f)?;
        }
        Ok(EncoderOutput {
            out: h,
            lens: regions.lens.clone(),
            n_max: n,
        })
    }

    /// Projects the encoder output into keys/values for every decoder layer.
    pub fn cross_context(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        enc: &EncoderOutput,
    ) -> Result<CrossContext> {
        let kv = self
            .layout
            .dec
            .iter()
            .map(|layer| project_kv(g, bound, &layer.cross_attn, enc.out, enc.n_max))
            .collect::<Result<Vec<_>>>()?;
        Ok(CrossContext {
            kv,
            lens: enc.lens.clone(),
            n_max: enc.n_max,
        })
    }

    /// Decoder logits `(B * t_max) x vocab` for a padded batch of inputs.
    /// Element `b` attends to encoder element `enc_index[b]`.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        ctx: &CrossContext,
        enc_index: &[usize],
        tokens: &TokenBatch,
    ) -> Result<Var> {
        let c = &self.config;
        let t = tokens.t_max;
        if enc_index.len() != tokens.batch_size() {
            return Err(Error::Input(format!(
                "{} token rows but {} encoder indices",
                tokens.batch_size(),
                enc_index.len()
            )));
        }
        if t > c.max_seq_len {
            return Err(Error::Input(format!(
                "decoder input of length {t} exceeds max_seq_len {}",
                c.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                c.vocab_size
            )));
        }
        if let Some(&bad) = enc_index.iter().find(|&&j| j >= ctx.n_sources()) {
            return Err(Error::Input(format!("encoder index {bad} out of range")));
        }
        for b in 0..tokens.batch_size() {
            if tokens.row(b)[0] != BOS {
                return Err(Error::Input("decoder input must start with BOS".into()));
            }
        }
        let ids: Vec<usize> = tokens.ids.iter().map(|&i| i as usize).collect();
        let emb = g.gather(bound[self.layout.embed.0], &ids)?;
        let pe = positional_encoding::<T>(t, c.d_model)?;
        let mut tiled = Vec::with_capacity(ids.len() * c.d_model);
        for _ in 0..tokens.batch_size() {
            tiled.extend_from_slice(pe.data());
        }
        let pe = Tensor::new(vec![ids.len(), c.d_model], tiled)?;
        let mut h = g.add_const(emb, &pe)?;

        let self_masks: Vec<_> = tokens
            .lens
            .iter()
            .map(|&len| causal_padding_mask(t, len))
            .collect();
        let cross_masks: Vec<_> = enc_index
            .iter()
            .map(|&j| key_padding_mask(t, ctx.n_max, ctx.lens[j]))
            .collect();
        let own: Vec<usize> = (0..tokens.batch_size()).collect();
        let self_batch = AttentionBatch {
            q_len: t,
            kv_index: &own,
            masks: &self_masks,
        };
        let cross_batch = AttentionBatch {
            q_len: t,
            kv_index: enc_index,
            masks: &cross_masks,
        };
        for (layer, kv) in self.layout.dec.iter().zip(&ctx.kv) {
            let a = multi_head_attention(g, bound, &layer.self_attn, h, h, t, &self_batch)?;
            let a = g.dropout(a.out, c.dropout_keep)?;
            h = add_norm(g, bound, &layer.norm1, h, a)?;
            let x = attend(g, bound, &layer.cross_attn, h, kv, &cross_batch)?;
            let x = g.dropout(x.out, c.dropout_keep)?;
            h = add_norm(g, bound, &layer.norm2, h, x)?;
            let f = feed_forward(g, bound, &layer.ff, h)?;
            let f = g.dropout(f, c.dropout_keep)?;
            h = add_norm(g, bound, &layer.norm3, h, f)?;
        }
        let logits = g.matmul_t(h, bound[self.layout.out_w.0])?;
        g.add_row(logits, bound[self.layout.out_b.0])
    }

    /// Teacher-forced logits where decoder element `b` pairs with encoder
    /// element `b`.
    pub fn decode_teacher_forced(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        enc: &EncoderOutput,
        tokens: &TokenBatch,
    ) -> Result<Var> {
        let ctx = self.cross_context(g, bound, enc)?;
        let index: Vec<usize> = (0..tokens.batch_size()).collect();
        self.decode(g, bound, &ctx, &index, tokens)
    }

    /// Binds parameters, encodes and decodes in one call.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        regions: &RegionBatch<T>,
        tokens: &TokenBatch,
    ) -> Result<Var> {
        if regions.batch_size() != tokens.batch_size() {
            return Err(Error::Input(format!(
                "{} region sets but {} token rows",
                regions.batch_size(),
                tokens.batch_size()
            )));
        }
        let bound = self.bind(g);
        let enc = self.encode(g, &bound, regions)?;
        self.decode_teacher_forced(g, &bound, &enc, tokens)
    }

    /// [`Model::forward`] with weights taken from `params` instead of
    /// `self.params`; `params` must share this model's layout.
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        regions: &RegionBatch<T>,
        tokens: &TokenBatch,
    ) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::Input(
                "parameter store does not match model layout".into(),
            ));
        }
        let bound = g.bind_all(params);
        let enc = self.encode(g, &bound, regions)?;
        self.decode_teacher_forced(g, &bound, &enc, tokens)
    }
}
