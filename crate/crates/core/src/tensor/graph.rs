use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Boolean `rows x cols` matrix; `true` marks an attendable column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn all(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        Mask {
            rows,
            cols,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allowed[r * self.cols..(r + 1) * self.cols]
    }

    /// Number of attendable columns per row.
    pub fn row_counts(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| self.row(r).iter().filter(|&&b| b).count())
            .collect()
    }

    /// Appends `extra` always-attendable columns on the right.
    pub fn extend_cols(&self, extra: usize) -> Mask {
        Mask::from_fn(self.rows, self.cols + extra, |r, c| {
            c >= self.cols || self.get(r, c)
        })
    }
}

/// Counter-based source of dropout masks: every mask is a pure function of
/// `(seed, step, site)`, where `site` counts dropout calls within a step.
#[derive(Clone, Copy, Debug, Default)]
pub struct DropoutStream {
    pub seed: u64,
    pub step: u64,
    site: u64,
}

impl DropoutStream {
    pub fn new(seed: u64, step: u64) -> Self {
        DropoutStream {
            seed,
            step,
            site: 0,
        }
    }

    fn next_rng(&mut self) -> ChaCha8Rng {
        let key = splitmix(self.seed ^ splitmix(self.step ^ splitmix(self.site)));
        self.site += 1;
        ChaCha8Rng::seed_from_u64(key)
    }
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    AddConst(Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        scale: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Slice {
        x: Var,
        r0: usize,
        c0: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Pick {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        w: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording tape. Nodes are appended in execution order and
/// [`Graph::backward`] visits them in exact reverse order.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    grad_enabled: bool,
    dropout: DropoutStream,
    relu_pattern: u64,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / c, c)
}

impl<T: Real> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            grad_enabled: true,
            dropout: DropoutStream::default(),
            relu_pattern: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// Graph that records values only; [`Graph::backward`] is refused.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new(Mode::Eval)
        }
    }

    pub fn with_dropout(mut self, stream: DropoutStream) -> Self {
        self.dropout = stream;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after `mark` (a previous [`Graph::len`]).
    /// Handles created after `mark` become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    /// Hash of the sign pattern of every ReLU input seen so far. Two forward
    /// passes with different patterns sit on different sides of a kink.
    pub fn relu_pattern(&self) -> u64 {
        self.relu_pattern
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled
            && match op {
                Op::Param(_) => true,
                _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
            };
        // Intermediates kept only for backward are dropped when recording is off.
        let op = if self.grad_enabled {
            op
        } else {
            match op {
                Op::LayerNorm { x, gain, bias, .. } => Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat: Vec::new(),
                    rstd: Vec::new(),
                },
                Op::Dropout { x, .. } => Op::Dropout {
                    x,
                    scale: Vec::new(),
                },
                other => other,
            }
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, &[])
    }

    /// Leaf holding a copy of a parameter; backward accumulates into its grad.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        if p.requires_grad {
            self.push(p.value.clone(), Op::Param(id), &[])
        } else {
            self.push(p.value.clone(), Op::Input, &[])
        }
    }

    /// Binds every parameter of `store`, indexed by `ParamId`.
    pub fn bind_all(&mut self, store: &ParamStore<T>) -> Vec<Var> {
        store.ids().map(|id| self.param(store, id)).collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, true)
    }

    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            T::zero(),
            out.data_mut(),
        );
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o + y;
        }
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(shape_err("add_const", self.shape(a), c.shape()));
        }
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(c.data()) {
            *o = *o + y;
        }
        Ok(self.push(out, Op::AddConst(a), &[a]))
    }

    /// `x[r, :] + bias` for every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = matrix_dims(self.shape(x));
        if self.value(bias).len() != c {
            return Err(shape_err("add_row", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &y) in row.iter_mut().zip(&b) {
                *o = *o + y;
            }
        }
        Ok(self.push(out, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|o| *o = *o * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut h = self.relu_pattern;
        for o in out.data_mut() {
            let pos = *o > T::zero();
            h = (h ^ pos as u64).wrapping_mul(0x0100_0000_01b3);
            if !pos {
                *o = T::zero();
            }
        }
        self.relu_pattern = h;
        self.push(out, Op::Relu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_row(row, None);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Softmax over the last axis restricted to attendable columns. Masked
    /// entries receive the additive [`Real::MASK_LOGIT`] and are then set to
    /// exactly zero. A row without attendable columns is an error.
    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let (r, c) = matrix_dims(self.shape(x));
        if mask.rows() != r || mask.cols() != c {
            return Err(shape_err(
                "masked_softmax",
                self.shape(x),
                &[mask.rows(), mask.cols()],
            ));
        }
        let mut out = self.value(x).clone();
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            let allowed = mask.row(i);
            if !allowed.iter().any(|&b| b) {
                return Err(Error::Decode(format!(
                    "attention row {i} has no attendable key"
                )));
            }
            softmax_row(row, Some(allowed));
        }
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Normalizes each row over the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (r, c) = matrix_dims(self.shape(x));
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let n = T::lit(c as f64);
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                row[j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Inverted dropout: identity in eval mode or when `keep_prob == 1`.
    pub fn dropout(&mut self, x: Var, keep_prob: f64) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::config(
                "dropout_keep",
                format!("keep probability {keep_prob} outside (0, 1]"),
            ));
        }
        if self.mode == Mode::Eval || keep_prob == 1.0 {
            return Ok(x);
        }
        let mut rng = self.dropout.next_rng();
        let inv = T::lit(1.0 / keep_prob);
        let n = self.value(x).len();
        let scale: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep_prob {
                    inv
                } else {
                    T::zero()
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &s) in out.data_mut().iter_mut().zip(&scale) {
            *o = *o * s;
        }
        Ok(self.push(out, Op::Dropout { x, scale }, &[x]))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = matrix_dims(self.shape(table));
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Input(format!(
                "row id {bad} out of range for {r} rows"
            )));
        }
        if ids.is_empty() {
            return Err(Error::Input("gather with no ids".into()));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Sub-matrix `x[r0..r0+rows, c0..c0+cols]`.
    pub fn slice(&mut self, x: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var> {
        let (r, c) = matrix_dims(self.shape(x));
        if rows == 0 || cols == 0 || r0 + rows > r || c0 + cols > c {
            return Err(shape_err("slice", self.shape(x), &[r0, rows, c0, cols]));
        }
        let t = self.value(x);
        if c0 == 0 && cols == c && r0 == 0 && rows == r {
            return Ok(x);
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in r0..r0 + rows {
            data.extend_from_slice(&t.row(i)[c0..c0 + cols]);
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::Slice { x, r0, c0 }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let c = matrix_dims(self.shape(parts[0])).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = matrix_dims(self.shape(p));
            if pc != c {
                return Err(shape_err(
                    "concat_rows",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let r = matrix_dims(self.shape(parts[0])).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = matrix_dims(self.shape(p));
            if pr != r {
                return Err(shape_err(
                    "concat_cols",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Vector of selected entries `x[r_i, c_i]`.
    pub fn pick(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = matrix_dims(self.shape(x));
        if idx.is_empty() {
            return Err(Error::Input("pick with no indices".into()));
        }
        if let Some(&(i, j)) = idx.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(Error::Input(format!(
                "pick index ({i}, {j}) outside {r}x{c}"
            )));
        }
        let t = self.value(x);
        let data: Vec<T> = idx.iter().map(|&(i, j)| t.at(i, j)).collect();
        let out = Tensor::new(vec![idx.len()], data)?;
        Ok(self.push(
            out,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// `Σ w_i · x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: &[T]) -> Result<Var> {
        if self.value(x).len() != w.len() {
            return Err(shape_err("weighted_sum", self.shape(x), &[w.len()]));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(w)
            .map(|(&a, &b)| a * b)
            .sum::<T>();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum { x, w: w.to_vec() },
            &[x],
        ))
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients in `store` are
    /// zeroed first, then receive d(loss)/d(param).
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Usage(
                "backward on a graph with gradients disabled".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        store.zero_grad();
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads, store);
        }
        Ok(())
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        dy: &[T],
        grads: &mut [Option<Vec<T>>],
        store: &mut ParamStore<T>,
    ) {
        let y = &node.value;
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                for (g, &d) in store.get_mut(*id).grad.data_mut().iter_mut().zip(dy) {
                    *g = *g + d;
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if *tb { sb[0] } else { sb[1] };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].needs_grad {
                    let ga = self.grad_slot(grads, *a);
                    if !*ta {
                        // dA (m x k) += dC · op(B)ᵀ
                        T::gemm(m, n, k, dy, false, bv, !*tb, T::one(), ga);
                    } else {
                        // dA (k x m) += op(B) · dCᵀ
                        T::gemm(k, n, m, bv, *tb, dy, true, T::one(), ga);
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.grad_slot(grads, *b);
                    if !*tb {
                        // dB (k x n) += op(A)ᵀ · dC
                        T::gemm(k, m, n, av, !*ta, dy, false, T::one(), gb);
                    } else {
                        // dB (n x k) += dCᵀ · op(A)
                        T::gemm(n, m, k, dy, true, av, *ta, T::one(), gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.nodes[v.0].needs_grad {
                        axpy(self.grad_slot(grads, v), dy, T::one());
                    }
                }
            }
            Op::AddConst(x) => {
                axpy(self.grad_slot(grads, *x), dy, T::one());
            }
            Op::AddRow { x, bias } => {
                if self.nodes[x.0].needs_grad {
                    axpy(self.grad_slot(grads, *x), dy, T::one());
                }
                if self.nodes[bias.0].needs_grad {
                    let gb = self.grad_slot(grads, *bias);
                    let c = gb.len();
                    for row in dy.chunks(c) {
                        axpy(gb, row, T::one());
                    }
                }
            }
            Op::Scale(x, s) => axpy(self.grad_slot(grads, *x), dy, *s),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = self.grad_slot(grads, *x);
                for ((g, &d), &v) in gx.iter_mut().zip(dy).zip(xv) {
                    if v > T::zero() {
                        *g = *g + d;
                    }
                }
            }
            Op::Softmax(x) => {
                let c = y.cols();
                let gx = self.grad_slot(grads, *x);
                for ((g, d), yr) in gx.chunks_mut(c).zip(dy.chunks(c)).zip(y.data().chunks(c)) {
                    let dot = d.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..c {
                        g[j] = g[j] + yr[j] * (d[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = y.cols();
                let gx = self.grad_slot(grads, *x);
                for ((g, d), yr) in gx.chunks_mut(c).zip(dy.chunks(c)).zip(y.data().chunks(c)) {
                    let total = d.iter().copied().sum::<T>();
                    for j in 0..c {
                        g[j] = g[j] + d[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = y.cols();
                let n = T::lit(c as f64);
                let g = self.value(*gain).data().to_vec();
                if self.nodes[gain.0].needs_grad {
                    let gg = self.grad_slot(grads, *gain);
                    for (d, h) in dy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + d[j] * h[j];
                        }
                    }
                }
                if self.nodes[bias.0].needs_grad {
                    let gb = self.grad_slot(grads, *bias);
                    for d in dy.chunks(c) {
                        axpy(gb, d, T::one());
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let gx = self.grad_slot(grads, *x);
                    for (i, ((gr, d), h)) in gx
                        .chunks_mut(c)
                        .zip(dy.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..c {
                            let dh = d[j] * g[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * h[j];
                        }
                        mean_dh = mean_dh / n;
                        mean_dh_h = mean_dh_h / n;
                        for j in 0..c {
                            let dh = d[j] * g[j];
                            gr[j] = gr[j] + rstd[i] * (dh - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Dropout { x, scale } => {
                let gx = self.grad_slot(grads, *x);
                for ((g, &d), &s) in gx.iter_mut().zip(dy).zip(scale) {
                    *g = *g + d * s;
                }
            }
            Op::Gather { table, ids } => {
                let c = y.cols();
                let gt = self.grad_slot(grads, *table);
                for (k, &i) in ids.iter().enumerate() {
                    axpy(
                        &mut gt[i * c..(i + 1) * c],
                        &dy[k * c..(k + 1) * c],
                        T::one(),
                    );
                }
            }
            Op::Slice { x, r0, c0 } => {
                let xc = self.value(*x).cols();
                let (rows, cols) = (y.rows(), y.cols());
                let gx = self.grad_slot(grads, *x);
                for i in 0..rows {
                    let dst = (r0 + i) * xc + c0;
                    axpy(
                        &mut gx[dst..dst + cols],
                        &dy[i * cols..(i + 1) * cols],
                        T::one(),
                    );
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.nodes[p.0].needs_grad {
                        axpy(self.grad_slot(grads, p), &dy[off..off + len], T::one());
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let gp = self.grad_slot(grads, p);
                        for (i, row) in gp.chunks_mut(pc).enumerate() {
                            axpy(row, &dy[i * total + c0..i * total + c0 + pc], T::one());
                        }
                    }
                    c0 += pc;
                }
            }
            Op::Pick { x, idx } => {
                let c = self.value(*x).cols();
                let gx = self.grad_slot(grads, *x);
                for (&(i, j), &d) in idx.iter().zip(dy) {
                    gx[i * c + j] = gx[i * c + j] + d;
                }
            }
            Op::Sum(x) => {
                let gx = self.grad_slot(grads, *x);
                gx.iter_mut().for_each(|g| *g = *g + dy[0]);
            }
            Op::WeightedSum { x, w } => {
                let gx = self.grad_slot(grads, *x);
                axpy(gx, w, dy[0]);
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], s: T) {
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = *d + s * x;
    }
}

fn softmax_row<T: Real>(row: &mut [T], allowed: Option<&[bool]>) {
    if let Some(mask) = allowed {
        for (v, &ok) in row.iter_mut().zip(mask) {
            if !ok {
                *v = *v + T::MASK_LOGIT;
            }
        }
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
    if let Some(mask) = allowed {
        for (v, &ok) in row.iter_mut().zip(mask) {
            if !ok {
                *v = T::zero();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};

    fn randt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn opts(tol: f64) -> GradCheckOptions {
        GradCheckOptions {
            tol,
            ..Default::default()
        }
    }

    /// Projects an output onto fixed random weights so every coordinate of
    /// the result carries gradient.
    fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..g.value(y).len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        g.weighted_sum(y, &w).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = randt(&mut rng, &[3, 5]);
        let i3 = g.input(Tensor::eye(3));
        let bv = g.input(b.clone());
        let c = g.matmul(i3, bv).unwrap();
        assert_eq!(g.value(c), &b);

        let a = g.input(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let ones = g.input(Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap());
        let c = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradients_all_transpose_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut store = ParamStore::new();
            let sa = if ta { [5, 4] } else { [4, 5] };
            let sb = if tb { [3, 5] } else { [5, 3] };
            let a = store.insert("a", randt(&mut rng, &sa)).unwrap();
            let b = store.insert("b", randt(&mut rng, &sb)).unwrap();
            let rep = grad_check(
                &mut store,
                |s, g| {
                    let (av, bv) = (g.param(s, a), g.param(s, b));
                    let c = g.matmul_ex(av, ta, bv, tb)?;
                    Ok(project(g, c, 9))
                },
                &opts(1e-6),
            )
            .unwrap();
            assert!(rep.passed, "ta={ta} tb={tb}: {rep:?}");
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.input(Tensor::filled(&[1, 4], 3.7));
        let y = g.softmax(x);
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = g.input(Tensor::from_f64(&[1, 2], &[1000.0, 0.0]).unwrap());
        let y = g.softmax(x);
        assert_eq!(g.value(y).data()[0], 1.0);
        assert!(g.value(y).data()[1] < 1e-300);
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_rejects_empty_rows() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.input(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 0.5, 0.5, 9.0]).unwrap());
        let mask = Mask::from_fn(2, 3, |r, c| c <= r);
        let y = g.masked_softmax(x, &mask).unwrap();
        let v = g.value(y);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.at(1, 2), 0.0);
        assert!((v.at(1, 0) - 0.5).abs() < 1e-15);
        let empty = Mask::from_fn(2, 3, |r, _| r == 0);
        assert!(matches!(g.masked_softmax(x, &empty), Err(Error::Decode(_))));
    }

    #[test]
    fn softmax_and_log_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let x = store.insert("x", randt(&mut rng, &[3, 6])).unwrap();
        let mask = Mask::from_fn(3, 6, |r, c| c <= r + 2);
        let rep = grad_check(
            &mut store,
            |s, g| {
                let xv = g.param(s, x);
                let a = g.softmax(xv);
                let b = g.masked_softmax(xv, &mask)?;
                let c = g.log_softmax(xv);
                let ab = g.add(a, b)?;
                let abc = g.add(ab, c)?;
                Ok(project(g, abc, 4))
            },
            &opts(1e-6),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn layer_norm_examples_and_gradient() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        // rows already zero-mean, unit-variance
        let x = g.input(
            Tensor::from_f64(&[2, 4], &[1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0]).unwrap(),
        );
        let gain = g.input(Tensor::filled(&[4], 1.0));
        let bias = g.input(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(x)) < 1e-3);

        let c = g.input(Tensor::filled(&[1, 4], 2.5));
        let b = g.input(Tensor::from_f64(&[4], &[0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = g.layer_norm(c, gain, b, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let xi = store.insert("x", randt(&mut rng, &[3, 5])).unwrap();
        let gi = store.insert("g", randt(&mut rng, &[5])).unwrap();
        let bi = store.insert("b", randt(&mut rng, &[5])).unwrap();
        let rep = grad_check(
            &mut store,
            |s, g| {
                let (x, ga, b) = (g.param(s, xi), g.param(s, gi), g.param(s, bi));
                let y = g.layer_norm(x, ga, b, 1e-5)?;
                Ok(project(g, y, 6))
            },
            &opts(1e-5),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn relu_examples_and_gradient() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.input(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let x = g.input(Tensor::filled(&[4], -3.0));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let xi = store.insert("x", randt(&mut rng, &[4, 4])).unwrap();
        let rep = grad_check(
            &mut store,
            |s, g| {
                let x = g.param(s, xi);
                let y = g.relu(x);
                Ok(project(g, y, 8))
            },
            &opts(1e-6),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut store = ParamStore::new();
        let xi = store.insert("x", Tensor::<f64>::zeros(&[3])).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let x = g.param(&store, xi);
        let y = g.relu(x);
        let l = g.sum(y);
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.get(xi).grad.data(), &[0.0; 3]);
    }

    #[test]
    fn dropout_modes() {
        let t = Tensor::<f64>::filled(&[100, 1000], 1.0);
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.input(t.clone());
        let y = g.dropout(x, 0.9).unwrap();
        assert_eq!(g.value(y), &t);

        let mut g = Graph::<f64>::new(Mode::Train).with_dropout(DropoutStream::new(11, 0));
        let x = g.input(t.clone());
        let y = g.dropout(x, 1.0).unwrap();
        assert_eq!(g.value(y), &t);
        // Monte-Carlo: mean of 1e5 inverted-dropout draws stays near the input.
        let y = g.dropout(x, 0.9).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / 1e5;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
        assert!((zeros as f64 / 1e5 - 0.1).abs() < 0.01);

        assert!(matches!(g.dropout(x, 0.0), Err(Error::Config { .. })));
        assert!(matches!(g.dropout(x, 1.5), Err(Error::Config { .. })));
    }

    #[test]
    fn dropout_masks_are_reproducible() {
        let run = |seed, step| {
            let mut g = Graph::<f64>::new(Mode::Train).with_dropout(DropoutStream::new(seed, step));
            let x = g.input(Tensor::filled(&[64], 1.0));
            let y = g.dropout(x, 0.5).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(1, 2), run(1, 2));
        assert_ne!(run(1, 2), run(1, 3));
        assert_ne!(run(1, 2), run(2, 2));
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let a = store.insert("a", randt(&mut rng, &[4, 6])).unwrap();
        let b = store.insert("b", randt(&mut rng, &[2, 6])).unwrap();
        let bias = store.insert("bias", randt(&mut rng, &[6])).unwrap();
        let rep = grad_check(
            &mut store,
            |s, g| {
                let (av, bv, cv) = (g.param(s, a), g.param(s, b), g.param(s, bias));
                let rows = g.concat_rows(&[av, bv])?;
                let left = g.slice(rows, 1, 4, 0, 3)?;
                let right = g.slice(rows, 0, 4, 3, 3)?;
                let cols = g.concat_cols(&[right, left])?;
                let biased = g.add_row(cols, cv)?;
                let emb = g.gather(biased, &[3, 0, 3, 1])?;
                let sc = g.scale(emb, -0.7);
                let picked = g.pick(sc, &[(0, 1), (2, 5), (0, 1), (3, 3)])?;
                let p1 = project(g, picked, 13);
                let p2 = project(g, sc, 14);
                let both = g.concat_rows(&[p1, p2])?;
                Ok(g.sum(both))
            },
            &opts(1e-6),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn backward_linear_case_and_disconnected_param() {
        let mut store = ParamStore::new();
        let w = store
            .insert(
                "w",
                Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            )
            .unwrap();
        let unused = store.insert("unused", Tensor::filled(&[2], 1.0)).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let wv = g.param(&store, w);
        let _ = g.param(&store, unused);
        let x = g.input(Tensor::from_f64(&[3, 1], &[0.5, -1.0, 2.0]).unwrap());
        let y = g.matmul(wv, x).unwrap();
        let l = g.sum(y);
        g.backward(l, &mut store).unwrap();
        // dW[i, j] = x[j] for every row i
        assert_eq!(store.get(w).grad.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        assert_eq!(store.get(unused).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut store = ParamStore::new();
        let w = store
            .insert("w", Tensor::<f64>::filled(&[2, 2], 1.0))
            .unwrap();
        let mut g = Graph::new(Mode::Eval);
        let wv = g.param(&store, w);
        assert!(matches!(g.backward(wv, &mut store), Err(Error::Usage(_))));
        let mut g = Graph::<f64>::inference();
        let wv = g.param(&store, w);
        let l = g.sum(wv);
        assert!(matches!(g.backward(l, &mut store), Err(Error::Usage(_))));
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let w = store.insert("w", randt(&mut rng, &[3, 4])).unwrap();
        let xt = randt(&mut rng, &[4, 2]);
        let build = |g: &mut Graph<f64>, s: &ParamStore<f64>, which: u8| {
            let wv = g.param(s, w);
            let x = g.input(xt.clone());
            let y = g.matmul(wv, x).unwrap();
            let l1 = {
                let r = g.relu(y);
                g.sum(r)
            };
            let l2 = {
                let sm = g.softmax(y);
                project(g, sm, 22)
            };
            match which {
                1 => l1,
                2 => l2,
                _ => {
                    let both = g.concat_rows(&[l1, l2]).unwrap();
                    g.sum(both)
                }
            }
        };
        let mut grads = Vec::new();
        for which in 0..3u8 {
            let mut g = Graph::new(Mode::Eval);
            let l = build(&mut g, &store, which);
            g.backward(l, &mut store).unwrap();
            grads.push(store.get(w).grad.clone());
        }
        for i in 0..12 {
            let sum = grads[1].data()[i] + grads[2].data()[i];
            assert!((grads[0].data()[i] - sum).abs() <= 1e-12);
        }
    }

    #[test]
    fn corrupted_gradient_fails_the_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut store = ParamStore::new();
        let w = store.insert("w", randt(&mut rng, &[3])).unwrap();
        let rep = grad_check(
            &mut store,
            |s, g| {
                let wv = g.param(s, w);
                let l = g.sum(wv);
                // hidden dependence on w that the tape never sees
                let hidden: f64 = s.get(w).value.data().iter().map(|v| v * v).sum();
                let c = g.input(Tensor::scalar(hidden));
                let both = g.concat_rows(&[l, c])?;
                Ok(g.sum(both))
            },
            &opts(1e-4),
        )
        .unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.worst().unwrap().name, "w");
    }

    #[test]
    fn linear_model_passes_tight_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let w = store.insert("w", randt(&mut rng, &[2, 3])).unwrap();
        let xt = randt(&mut rng, &[3, 4]);
        let rep = grad_check(
            &mut store,
            |s, g| {
                let wv = g.param(s, w);
                let x = g.input(xt.clone());
                let y = g.matmul(wv, x)?;
                Ok(project(g, y, 32))
            },
            &opts(1e-7),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
