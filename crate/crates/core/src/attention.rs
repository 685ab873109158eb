//! Scaled dot-product multi-head attention with optional learnable memory
//! slots appended to every head's keys and values.
//!
//! Projection weights are stored fused: `Wq`, `Wk`, `Wv` are `d x d` with head
//! `h` occupying rows `h*d_h..(h+1)*d_h`. Memory keys and values are `M x d`
//! matrices whose column block `h*d_h..(h+1)*d_h` holds the `M` slots of head
//! `h`, so each head sees `M` extra key/value pairs that do not depend on the
//! input.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Mask, ParamId, ParamStore, Real, Tensor, Var};

/// Query-position by key-position boolean matrix; `true` = attendable.
pub type AttentionMask = Mask;

/// Causal mask over `t` positions (lower triangular).
pub fn causal_mask(t: usize) -> AttentionMask {
    Mask::from_fn(t, t, |r, c| c <= r)
}

/// `rows x cols` mask where only the first `valid` key columns are attendable.
pub fn key_padding_mask(rows: usize, cols: usize, valid: usize) -> AttentionMask {
    Mask::from_fn(rows, cols, |_, c| c < valid)
}

/// Causal mask that also hides key positions `>= valid`.
pub fn causal_padding_mask(t: usize, valid: usize) -> AttentionMask {
    Mask::from_fn(t, t, |r, c| c <= r && c < valid)
}

/// Parameter handles of one multi-head attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    /// `(memory_keys, memory_values)`, both `M x d`; absent when `M = 0`.
    pub memory: Option<(ParamId, ParamId)>,
    pub n_heads: usize,
    pub d_model: usize,
    pub n_memory: usize,
}

/// One head's weights, materialized for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub memory_keys: Option<Tensor<T>>,
    pub memory_values: Option<Tensor<T>>,
}

pub(crate) fn xavier<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let u = Uniform::new_inclusive(-a, a).expect("finite bounds");
    let data = (0..rows * cols).map(|_| T::lit(u.sample(rng))).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

impl MultiHeadParams {
    /// Registers `{prefix}.Wq/Wk/Wv/Wo` and, for `n_memory > 0`,
    /// `{prefix}.mem_k/mem_v`.
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        n_memory: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::config(
                "n_heads",
                format!("d_model {d_model} not divisible by {n_heads} heads"),
            ));
        }
        let mut w = |name: &str, rng: &mut R| {
            store.insert(format!("{prefix}.{name}"), xavier(rng, d_model, d_model))
        };
        let wq = w("Wq", rng)?;
        let wk = w("Wk", rng)?;
        let wv = w("Wv", rng)?;
        let wo = w("Wo", rng)?;
        let memory = if n_memory > 0 {
            let d_head = d_model / n_heads;
            let normal = Normal::new(0.0, 1.0 / (d_head as f64).sqrt()).expect("positive std");
            let slots = |rng: &mut R| {
                let data = (0..n_memory * d_model)
                    .map(|_| T::lit(normal.sample(rng)))
                    .collect();
                Tensor::new(vec![n_memory, d_model], data).expect("shape matches")
            };
            let mk = store.insert(format!("{prefix}.mem_k"), slots(rng))?;
            let mv = store.insert(format!("{prefix}.mem_v"), slots(rng))?;
            Some((mk, mv))
        } else {
            None
        };
        Ok(MultiHeadParams {
            wq,
            wk,
            wv,
            wo,
            memory,
            n_heads,
            d_model,
            n_memory,
        })
    }

    /// Looks up an existing block by name prefix, checking shapes.
    pub fn from_store<T: Real>(
        store: &ParamStore<T>,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        n_memory: usize,
    ) -> Result<Self> {
        let get = |name: &str, rows: usize| -> Result<ParamId> {
            let full = format!("{prefix}.{name}");
            let id = store
                .id(&full)
                .ok_or_else(|| Error::Input(format!("missing parameter `{full}`")))?;
            let shape = store.get(id).value.shape();
            if shape != [rows, d_model] {
                return Err(Error::Shape {
                    op: "load parameter",
                    lhs: shape.to_vec(),
                    rhs: vec![rows, d_model],
                });
            }
            Ok(id)
        };
        let memory = if n_memory > 0 {
            Some((get("mem_k", n_memory)?, get("mem_v", n_memory)?))
        } else {
            if store.id(&format!("{prefix}.mem_k")).is_some() {
                return Err(Error::Input(format!(
                    "`{prefix}` has memory slots but the config sets n_memory = 0"
                )));
            }
            None
        };
        Ok(MultiHeadParams {
            wq: get("Wq", d_model)?,
            wk: get("Wk", d_model)?,
            wv: get("Wv", d_model)?,
            wo: get("Wo", d_model)?,
            memory,
            n_heads,
            d_model,
            n_memory,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total learned memory slots: `2 * M * H`.
    pub fn memory_slots(&self) -> usize {
        2 * self.n_memory * self.n_heads
    }

    pub fn head<T: Real>(&self, store: &ParamStore<T>, h: usize) -> HeadParams<T> {
        let dh = self.d_head();
        let rows = |id: ParamId| {
            let t = &store.get(id).value;
            let data = t.data()[h * dh * self.d_model..(h + 1) * dh * self.d_model].to_vec();
            Tensor::new(vec![dh, self.d_model], data).expect("head block")
        };
        let cols = |id: ParamId| {
            let t = &store.get(id).value;
            let data = (0..self.n_memory)
                .flat_map(|m| t.row(m)[h * dh..(h + 1) * dh].to_vec())
                .collect();
            Tensor::new(vec![self.n_memory, dh], data).expect("memory block")
        };
        HeadParams {
            wq: rows(self.wq),
            wk: rows(self.wk),
            wv: rows(self.wv),
            memory_keys: self.memory.map(|(k, _)| cols(k)),
            memory_values: self.memory.map(|(_, v)| cols(v)),
        }
    }
}

/// Scalars added per memory-augmented layer: `2 * M * H * d_h = 2 * M * d`.
pub fn memory_param_count(n_memory: usize, n_heads: usize, d_model: usize) -> usize {
    2 * n_memory * n_heads * (d_model / n_heads)
}

/// Number of learned memory slots per layer: `2 * M * H`.
pub fn memory_slot_count(n_memory: usize, n_heads: usize) -> usize {
    2 * n_memory * n_heads
}

/// `softmax(Q Kᵀ / √d_h)` restricted to attendable keys, then averaged
/// values. Returns `(out, weights)`.
pub fn scaled_dot_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttentionMask,
) -> Result<(Var, Var)> {
    let dh = *g.shape(q).last().expect("matrix");
    if g.shape(k)[1] != dh || g.shape(v)[0] != g.shape(k)[0] {
        return Err(Error::Shape {
            op: "scaled_dot_attention",
            lhs: g.shape(k).to_vec(),
            rhs: g.shape(v).to_vec(),
        });
    }
    let logits = g.matmul_t(q, k)?;
    let logits = g.scale(logits, T::one() / T::lit(dh as f64).sqrt());
    let weights = g.masked_softmax(logits, mask)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Keys and values of a key/value sequence, projected once and reusable
/// across calls (the decoder's cross-attention reuses them at every step).
#[derive(Clone, Debug)]
pub struct ProjectedKv {
    k: Var,
    v: Var,
    seq_len: usize,
    n_seqs: usize,
}

/// A batch of attention problems: query element `i` (rows
/// `i*q_len..(i+1)*q_len` of the query sequence) attends to key/value element
/// `kv_index[i]` under `masks[i]` (`q_len x kv_len`, memory columns excluded).
#[derive(Clone, Debug)]
pub struct AttentionBatch<'a> {
    pub q_len: usize,
    pub kv_index: &'a [usize],
    pub masks: &'a [AttentionMask],
}

pub struct AttentionOutput {
    /// `(B * q_len) x d`
    pub out: Var,
    /// Attention weights per query element and head, `q_len x (kv_len + M)`.
    pub weights: Vec<Vec<Var>>,
}

pub fn project_kv<T: Real>(
    g: &mut Graph<T>,
    bound: &[Var],
    p: &MultiHeadParams,
    kv_seq: Var,
    seq_len: usize,
) -> Result<ProjectedKv> {
    let rows = g.shape(kv_seq)[0];
    if seq_len == 0 || !rows.is_multiple_of(seq_len) {
        return Err(Error::Input(format!(
            "key/value rows {rows} not a multiple of sequence length {seq_len}"
        )));
    }
    let k = g.matmul_t(kv_seq, bound[p.wk.0])?;
    let v = g.matmul_t(kv_seq, bound[p.wv.0])?;
    Ok(ProjectedKv {
        k,
        v,
        seq_len,
        n_seqs: rows / seq_len,
    })
}

/// Multi-head attention over pre-projected keys/values. When the block has
/// memory slots they are appended below each element's keys and values and
/// are always attendable.
pub fn attend<T: Real>(
    g: &mut Graph<T>,
    bound: &[Var],
    p: &MultiHeadParams,
    q_seq: Var,
    kv: &ProjectedKv,
    batch: &AttentionBatch<'_>,
) -> Result<AttentionOutput> {
    let d = p.d_model;
    let dh = p.d_head();
    let n_q = batch.kv_index.len();
    if g.shape(q_seq) != [n_q * batch.q_len, d] || batch.masks.len() != n_q {
        return Err(Error::Shape {
            op: "multi_head_attention",
            lhs: g.shape(q_seq).to_vec(),
            rhs: vec![n_q * batch.q_len, d],
        });
    }
    let q = g.matmul_t(q_seq, bound[p.wq.0])?;

    // Per key/value element and head: (keys, values), memory rows appended.
    let mut kv_heads: HashMap<usize, Vec<(Var, Var)>> = HashMap::new();
    let mut element_outs = Vec::with_capacity(n_q);
    let mut weights = Vec::with_capacity(n_q);
    for (i, (&j, mask)) in batch.kv_index.iter().zip(batch.masks).enumerate() {
        if j >= kv.n_seqs {
            return Err(Error::Input(format!(
                "key/value element {j} out of range ({} elements)",
                kv.n_seqs
            )));
        }
        if mask.rows() != batch.q_len || mask.cols() != kv.seq_len {
            return Err(Error::Shape {
                op: "attention mask",
                lhs: vec![mask.rows(), mask.cols()],
                rhs: vec![batch.q_len, kv.seq_len],
            });
        }
        if let std::collections::hash_map::Entry::Vacant(e) = kv_heads.entry(j) {
            let mut k_j = g.slice(kv.k, j * kv.seq_len, kv.seq_len, 0, d)?;
            let mut v_j = g.slice(kv.v, j * kv.seq_len, kv.seq_len, 0, d)?;
            if let Some((mk, mv)) = p.memory {
                k_j = g.concat_rows(&[k_j, bound[mk.0]])?;
                v_j = g.concat_rows(&[v_j, bound[mv.0]])?;
            }
            let rows = kv.seq_len + p.n_memory;
            let mut heads = Vec::with_capacity(p.n_heads);
            for h in 0..p.n_heads {
                let kh = g.slice(k_j, 0, rows, h * dh, dh)?;
                let vh = g.slice(v_j, 0, rows, h * dh, dh)?;
                heads.push((kh, vh));
            }
            e.insert(heads);
        }
        let full_mask = if p.n_memory > 0 {
            mask.extend_cols(p.n_memory)
        } else {
            mask.clone()
        };
        let mut outs = Vec::with_capacity(p.n_heads);
        let mut ws = Vec::with_capacity(p.n_heads);
        for (h, &(kh, vh)) in kv_heads[&j].iter().enumerate() {
            let qh = g.slice(q, i * batch.q_len, batch.q_len, h * dh, dh)?;
            let (o, w) = scaled_dot_attention(g, qh, kh, vh, &full_mask)?;
            outs.push(o);
            ws.push(w);
        }
        element_outs.push(g.concat_cols(&outs)?);
        weights.push(ws);
    }
    let heads = g.concat_rows(&element_outs)?;
    let out = g.matmul_t(heads, bound[p.wo.0])?;
    Ok(AttentionOutput { out, weights })
}

/// Projects `kv_seq` and attends from `q_seq`; see [`attend`].
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    bound: &[Var],
    p: &MultiHeadParams,
    q_seq: Var,
    kv_seq: Var,
    kv_len: usize,
    batch: &AttentionBatch<'_>,
) -> Result<AttentionOutput> {
    let kv = project_kv(g, bound, p, kv_seq, kv_len)?;
    attend(g, bound, p, q_seq, &kv, batch)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Mode;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn single_key_gives_weight_one() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let q = g.input(t(&[1, 2], &[0.3, -2.0]));
        let k = g.input(t(&[1, 2], &[1.0, 5.0]));
        let v = g.input(t(&[1, 2], &[7.0, 8.0]));
        let (o, w) = scaled_dot_attention(&mut g, q, k, v, &Mask::all(1, 1)).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(o).data(), &[7.0, 8.0]);
    }

    #[test]
    fn dominant_diagonal_gives_identity_weights() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let s = 100.0;
        let q = g.input(t(&[3, 3], &[s, 0., 0., 0., s, 0., 0., 0., s]));
        let v = g.input(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let (o, w) = scaled_dot_attention(&mut g, q, q, v, &Mask::all(3, 3)).unwrap();
        assert!(g.value(w).max_abs_diff(&Tensor::eye(3)) < 1e-12);
        assert!(g.value(o).max_abs_diff(g.value(v)) < 1e-9);
    }

    #[test]
    fn hand_computed_two_by_three() {
        // Q = [[1,0],[0,2]], K = [[1,1],[2,0],[0,-1]], V = [[1,2],[3,4],[5,6]], d_h = 2.
        // Logits/√2: row0 = [1,2,0]/√2, row1 = [2,0,-2]/√2.
        let mut g = Graph::<f64>::new(Mode::Eval);
        let q = g.input(t(&[2, 2], &[1., 0., 0., 2.]));
        let k = g.input(t(&[3, 2], &[1., 1., 2., 0., 0., -1.]));
        let v = g.input(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let (o, w) = scaled_dot_attention(&mut g, q, k, v, &Mask::all(2, 3)).unwrap();
        // expected values computed independently with numpy
        let w_exp = [
            0.283_995_409_741_260_03,
            0.575_975_345_215_362,
            0.140_029_245_043_378_02,
            0.767_917_936_138_702_5,
            0.186_693_700_947_502_84,
            0.045_388_362_913_794_66,
        ];
        let o_exp = [
            2.712_067_670_604_236,
            3.712_067_670_604_236,
            1.554_940_853_550_184_3,
            2.554_940_853_550_184,
        ];
        for (a, b) in g.value(w).data().iter().zip(w_exp) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for (a, b) in g.value(o).data().iter().zip(o_exp) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn fully_masked_row_is_an_error_not_nan() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let q = g.input(t(&[2, 2], &[1., 0., 0., 1.]));
        let mask = Mask::from_fn(2, 2, |r, _| r == 0);
        assert!(matches!(
            scaled_dot_attention(&mut g, q, q, q, &mask),
            Err(Error::Decode(_))
        ));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = MultiHeadParams::init(&mut store, "a", 10, 4, 0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn memory_counts() {
        assert_eq!(memory_param_count(0, 8, 512), 0);
        assert_eq!(memory_slot_count(40, 8), 640);
        assert_eq!(memory_param_count(40, 8, 512), 40960);

        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = MultiHeadParams::init(&mut store, "l", 16, 2, 3, &mut rng).unwrap();
        let mem: usize = store
            .iter()
            .filter(|p| p.name.contains("mem_"))
            .map(|p| p.value.len())
            .sum();
        assert_eq!(mem, memory_param_count(3, 2, 16));
        assert_eq!(p.memory_slots(), memory_slot_count(3, 2));
        let h1 = p.head(&store, 1);
        assert_eq!(h1.memory_keys.unwrap().shape(), &[3, 8]);
        assert_eq!(h1.wq.shape(), &[8, 16]);
    }

    #[test]
    fn zero_memory_keys_share_weight_with_zero_scoring_keys() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = MultiHeadParams::init(&mut store, "a", 4, 2, 2, &mut rng).unwrap();
        let (mk, _) = p.memory.unwrap();
        store.get_mut(mk).value = Tensor::zeros(&[2, 4]);
        // one real key that is all zeros after projection: zero input row
        let mut g = Graph::new(Mode::Eval);
        let bound = g.bind_all(&store);
        let x = g.input(t(&[2, 4], &[0., 0., 0., 0., 1., -1., 0.5, 2.]));
        let masks = vec![Mask::all(2, 2)];
        let out = multi_head_attention(
            &mut g,
            &bound,
            &p,
            x,
            x,
            2,
            &AttentionBatch {
                q_len: 2,
                kv_index: &[0],
                masks: &masks,
            },
        )
        .unwrap();
        for &w in &out.weights[0] {
            let w = g.value(w);
            assert_eq!(w.cols(), 4);
            for r in 0..2 {
                let row = w.row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                // key 0 and both memory columns score exactly zero
                assert_eq!(row[0], row[2]);
                assert_eq!(row[2], row[3]);
            }
        }
    }
}
