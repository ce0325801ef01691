//! Reverse-mode differentiation over the learnable subgraph.
//!
//! A [`Tape`] records primitive operations eagerly: building a node computes
//! its forward value immediately, and [`Tape::backward`] walks the recording
//! in reverse accumulating exact adjoints. Only the primitives the network
//! needs exist: linear maps, elementwise arithmetic, softmax, sigmoid/tanh/
//! gelu, layer normalization, grouped multi-head attention, depthwise 3-D
//! convolution, mode products with constant matrices, gathers, broadcasts,
//! and the MSE head.
//!
//! Invariants:
//! * Replaying the tape forward reproduces every recorded value bit-exactly
//!   ([`Tape::replay_check`]); stochastic masks (dropout, drop-path) are
//!   stored on the node, so replay and finite differences see frozen masks.
//! * Backward produces a gradient for every parameter leaf touched by the
//!   loss; untouched parameters are simply absent (callers zero-fill).
//! * Values belong to one tape; using them with another is an error.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{mode_product_raw, Dims4, Matrix};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId {
    tape: u64,
    index: usize,
}

enum Op<T> {
    Const,
    Param(String),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    ScaleByScalar { a: usize, s: usize },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, din: usize, dout: usize },
    Softmax { a: usize, width: usize },
    Sigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, width: usize, stats: Vec<(T, T)> },
    Dropout { a: usize, mask: Vec<T> },
    DropPath { a: usize, keep: T },
    GatherRows { a: usize, idx: Arc<Vec<usize>>, width: usize },
    GatherElems { a: usize, idx: Arc<Vec<usize>> },
    Concat { parts: Vec<usize> },
    Mhsa { q: usize, k: usize, v: usize, heads: usize, head_dim: usize, groups: Arc<Vec<usize>>, probs: Vec<T> },
    DwConv3d { x: usize, w: usize, b: usize, grid: (usize, usize, usize), dim: usize },
    ScaleMode { a: usize, v: usize, mode: usize, dims: Dims4 },
    ModeProductConst { a: usize, m: Arc<Matrix<T>>, mode: usize, in_dims: Dims4 },
    Rank1Mix { coeffs: usize, u: Arc<Matrix<T>>, v: Arc<Matrix<T>> },
    BroadcastChannel { v: usize, dims: Dims4 },
    Reshape(usize),
    Mse { pred: usize, target: Arc<Vec<T>> },
}

/// Node output storage: owned buffers for computed values, shared handles
/// for parameter leaves (no copy per forward).
enum Value<T> {
    Owned(Vec<T>),
    Shared(Arc<Vec<T>>),
}

impl<T> std::ops::Deref for Value<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        match self {
            Value::Owned(v) => v,
            Value::Shared(v) => v,
        }
    }
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
}

/// Recorded computation graph over the learnable subnetworks.
pub struct Tape<T: Scalar> {
    id: u64,
    train: bool,
    rng: ChaCha8Rng,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    /// `train` enables stochastic regularizers (dropout, drop-path); their
    /// masks derive from `seed` in call order.
    pub fn new(train: bool, seed: u64) -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            nodes: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, op: Op<T>) -> ValueId {
        self.nodes.push(Node { value: Value::Owned(value), op });
        ValueId {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push_shared(&mut self, value: Arc<Vec<T>>, op: Op<T>) -> ValueId {
        self.nodes.push(Node { value: Value::Shared(value), op });
        ValueId {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: ValueId) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::OffTape);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: ValueId) -> Result<&[T]> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn constant(&mut self, data: Vec<T>) -> ValueId {
        self.push(data, Op::Const)
    }

    /// Leaf that receives a gradient under `name`.
    pub fn param(&mut self, name: impl Into<String>, data: Vec<T>) -> ValueId {
        self.push(data, Op::Param(name.into()))
    }

    /// Parameter leaf sharing an existing buffer (no copy).
    pub fn param_shared(&mut self, name: impl Into<String>, data: Arc<Vec<T>>) -> ValueId {
        self.push_shared(data, Op::Param(name.into()))
    }

    fn binary_same_len(&self, a: ValueId, b: ValueId) -> Result<(usize, usize)> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        if self.nodes[ia].value.len() != self.nodes[ib].value.len() {
            return Err(Error::shape(
                format!("{} elements", self.nodes[ia].value.len()),
                format!("{}", self.nodes[ib].value.len()),
            ));
        }
        Ok((ia, ib))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ia, ib) = self.binary_same_len(a, b)?;
        let value = zip_map(&self.nodes[ia].value, &self.nodes[ib].value, |x, y| x + y);
        Ok(self.push(value, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ia, ib) = self.binary_same_len(a, b)?;
        let value = zip_map(&self.nodes[ia].value, &self.nodes[ib].value, |x, y| x - y);
        Ok(self.push(value, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ia, ib) = self.binary_same_len(a, b)?;
        let value = zip_map(&self.nodes[ia].value, &self.nodes[ib].value, |x, y| x * y);
        Ok(self.push(value, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: ValueId, k: T) -> Result<ValueId> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.iter().map(|&x| x * k).collect();
        Ok(self.push(value, Op::Scale(ia, k)))
    }

    /// Multiply a tensor by a scalar-valued node (length 1).
    pub fn scale_by_scalar(&mut self, a: ValueId, s: ValueId) -> Result<ValueId> {
        let ia = self.check(a)?;
        let is = self.check(s)?;
        if self.nodes[is].value.len() != 1 {
            return Err(Error::shape("scalar (1 element)", format!("{}", self.nodes[is].value.len())));
        }
        let k = self.nodes[is].value[0];
        let value = self.nodes[ia].value.iter().map(|&x| x * k).collect();
        Ok(self.push(value, Op::ScaleByScalar { a: ia, s: is }))
    }

    /// `x` as `rows` rows of `din`, `w` as `dout x din` (row-major), plus an
    /// optional bias of `dout`: returns `rows x dout`.
    pub fn linear(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        rows: usize,
        din: usize,
        dout: usize,
    ) -> Result<ValueId> {
        let ix = self.check(x)?;
        let iw = self.check(w)?;
        let ib = b.map(|v| self.check(v)).transpose()?;
        if self.nodes[ix].value.len() != rows * din {
            return Err(Error::shape(
                format!("{} elements ({rows}x{din})", rows * din),
                format!("{}", self.nodes[ix].value.len()),
            ));
        }
        if self.nodes[iw].value.len() != dout * din {
            return Err(Error::shape(
                format!("{} elements ({dout}x{din})", dout * din),
                format!("{}", self.nodes[iw].value.len()),
            ));
        }
        if let Some(ib) = ib {
            if self.nodes[ib].value.len() != dout {
                return Err(Error::shape(format!("{dout} bias elements"), format!("{}", self.nodes[ib].value.len())));
            }
        }
        let value = linear_forward(
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            ib.map(|i| &self.nodes[i].value[..]),
            rows,
            din,
            dout,
        );
        Ok(self.push(value, Op::Linear { x: ix, w: iw, b: ib, rows, din, dout }))
    }

    /// Row-wise softmax over trailing blocks of `width`.
    pub fn softmax(&mut self, a: ValueId, width: usize) -> Result<ValueId> {
        let ia = self.check(a)?;
        let len = self.nodes[ia].value.len();
        if width == 0 || len % width != 0 {
            return Err(Error::shape(format!("length divisible by {width}"), format!("{len}")));
        }
        let value = softmax_forward(&self.nodes[ia].value, width);
        Ok(self.push(value, Op::Softmax { a: ia, width }))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> Result<ValueId> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.iter().map(|&x| sigmoid(x)).collect();
        Ok(self.push(value, Op::Sigmoid(ia)))
    }

    pub fn tanh(&mut self, a: ValueId) -> Result<ValueId> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.iter().map(|&x| x.tanh()).collect();
        Ok(self.push(value, Op::Tanh(ia)))
    }

    pub fn gelu(&mut self, a: ValueId) -> Result<ValueId> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.iter().map(|&x| gelu(x)).collect();
        Ok(self.push(value, Op::Gelu(ia)))
    }

    /// Pre-activation layer norm over trailing blocks of `width`, with
    /// learnable gain and shift.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        width: usize,
    ) -> Result<ValueId> {
        let ix = self.check(x)?;
        let ig = self.check(gamma)?;
        let ib = self.check(beta)?;
        let len = self.nodes[ix].value.len();
        if width == 0 || len % width != 0 {
            return Err(Error::shape(format!("length divisible by {width}"), format!("{len}")));
        }
        if self.nodes[ig].value.len() != width || self.nodes[ib].value.len() != width {
            return Err(Error::shape(
                format!("gain/shift of {width}"),
                format!("{}/{}", self.nodes[ig].value.len(), self.nodes[ib].value.len()),
            ));
        }
        let (value, stats) = layer_norm_forward(
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
            width,
        );
        Ok(self.push(value, Op::LayerNorm { x: ix, gamma: ig, beta: ib, width, stats }))
    }

    /// Inverted dropout; identity in eval mode.
    pub fn dropout(&mut self, a: ValueId, rate: f64) -> Result<ValueId> {
        let ia = self.check(a)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.train || rate == 0.0 {
            let value = self.nodes[ia].value.to_vec();
            return Ok(self.push(value, Op::Reshape(ia)));
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.nodes[ia].value.len())
            .map(|_| if self.rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let value = zip_map(&self.nodes[ia].value, &mask, |x, m| x * m);
        Ok(self.push(value, Op::Dropout { a: ia, mask }))
    }

    /// Stochastic depth on a residual branch; identity in eval mode.
    pub fn drop_path(&mut self, a: ValueId, rate: f64) -> Result<ValueId> {
        let ia = self.check(a)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("drop-path rate {rate} outside [0, 1)")));
        }
        if !self.train || rate == 0.0 {
            let value = self.nodes[ia].value.to_vec();
            return Ok(self.push(value, Op::Reshape(ia)));
        }
        let keep = if self.rng.gen::<f64>() < rate {
            T::zero()
        } else {
            T::of(1.0 / (1.0 - rate))
        };
        let value = self.nodes[ia].value.iter().map(|&x| x * keep).collect();
        Ok(self.push(value, Op::DropPath { a: ia, keep }))
    }

    /// Gather rows of `width` from `a` by index; duplicates allowed.
    pub fn gather_rows(&mut self, a: ValueId, idx: Arc<Vec<usize>>, width: usize) -> Result<ValueId> {
        let ia = self.check(a)?;
        let len = self.nodes[ia].value.len();
        if width == 0 || len % width != 0 {
            return Err(Error::shape(format!("length divisible by {width}"), format!("{len}")));
        }
        let rows = len / width;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("row index {bad} out of {rows}")));
        }
        let src = &self.nodes[ia].value;
        let mut value = Vec::with_capacity(idx.len() * width);
        for &r in idx.iter() {
            value.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        Ok(self.push(value, Op::GatherRows { a: ia, idx, width }))
    }

    /// Element-level gather (arbitrary permutation or repetition).
    pub fn gather_elems(&mut self, a: ValueId, idx: Arc<Vec<usize>>) -> Result<ValueId> {
        let ia = self.check(a)?;
        let len = self.nodes[ia].value.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::invalid(format!("element index {bad} out of {len}")));
        }
        let src = &self.nodes[ia].value;
        let value = idx.iter().map(|&i| src[i]).collect();
        Ok(self.push(value, Op::GatherElems { a: ia, idx }))
    }

    pub fn concat(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let mut indices = Vec::with_capacity(parts.len());
        for p in parts {
            indices.push(self.check(*p)?);
        }
        let mut value = Vec::new();
        for &i in &indices {
            value.extend_from_slice(&self.nodes[i].value);
        }
        Ok(self.push(value, Op::Concat { parts: indices }))
    }

    /// Grouped multi-head self-attention: rows of `q`/`k`/`v` are tokens of
    /// `heads * head_dim` features; attention runs independently within each
    /// consecutive group of `groups` rows (a window), softmax over keys.
    pub fn mhsa(
        &mut self,
        q: ValueId,
        k: ValueId,
        v: ValueId,
        heads: usize,
        head_dim: usize,
        groups: Arc<Vec<usize>>,
    ) -> Result<ValueId> {
        let iq = self.check(q)?;
        let ik = self.check(k)?;
        let iv = self.check(v)?;
        let width = heads * head_dim;
        let n: usize = groups.iter().sum();
        for (name, i) in [("q", iq), ("k", ik), ("v", iv)] {
            if self.nodes[i].value.len() != n * width {
                return Err(Error::shape(
                    format!("{name} of {n}x{width}"),
                    format!("{}", self.nodes[i].value.len()),
                ));
            }
        }
        let (value, probs) = mhsa_forward(
            &self.nodes[iq].value,
            &self.nodes[ik].value,
            &self.nodes[iv].value,
            heads,
            head_dim,
            &groups,
        );
        Ok(self.push(value, Op::Mhsa { q: iq, k: ik, v: iv, heads, head_dim, groups, probs }))
    }

    /// Depthwise 3x3x3 convolution over tokens laid out on `grid`
    /// (row-major, zero padding): `x` is `N x dim`, `w` is `dim x 27`,
    /// `b` is `dim`.
    pub fn dw_conv3d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        grid: (usize, usize, usize),
        dim: usize,
    ) -> Result<ValueId> {
        let ix = self.check(x)?;
        let iw = self.check(w)?;
        let ib = self.check(b)?;
        let n = grid.0 * grid.1 * grid.2;
        if self.nodes[ix].value.len() != n * dim {
            return Err(Error::shape(format!("{n}x{dim} tokens"), format!("{}", self.nodes[ix].value.len())));
        }
        if self.nodes[iw].value.len() != dim * 27 || self.nodes[ib].value.len() != dim {
            return Err(Error::shape(
                format!("weights {dim}x27 and bias {dim}"),
                format!("{}/{}", self.nodes[iw].value.len(), self.nodes[ib].value.len()),
            ));
        }
        let value = dw_conv3d_forward(
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            &self.nodes[ib].value,
            grid,
            dim,
        );
        Ok(self.push(value, Op::DwConv3d { x: ix, w: iw, b: ib, grid, dim }))
    }

    /// Multiply a rank-4 value elementwise by a vector broadcast along one
    /// mode: `out[.., i, ..] = a[.., i, ..] * v[i]`.
    pub fn scale_mode(&mut self, a: ValueId, v: ValueId, mode: usize, dims: Dims4) -> Result<ValueId> {
        let ia = self.check(a)?;
        let iv = self.check(v)?;
        if self.nodes[ia].value.len() != dims.count() {
            return Err(Error::shape(format!("{} elements for {dims}", dims.count()), format!("{}", self.nodes[ia].value.len())));
        }
        if self.nodes[iv].value.len() != dims.dim(mode) {
            return Err(Error::shape(
                format!("vector of {} for mode {mode}", dims.dim(mode)),
                format!("{}", self.nodes[iv].value.len()),
            ));
        }
        let value = scale_mode_forward(&self.nodes[ia].value, &self.nodes[iv].value, mode, dims);
        Ok(self.push(value, Op::ScaleMode { a: ia, v: iv, mode, dims }))
    }

    /// Mode product with a constant matrix (no gradient into the matrix).
    pub fn mode_product_const(
        &mut self,
        a: ValueId,
        m: Arc<Matrix<T>>,
        mode: usize,
        in_dims: Dims4,
    ) -> Result<ValueId> {
        let ia = self.check(a)?;
        if self.nodes[ia].value.len() != in_dims.count() {
            return Err(Error::shape(
                format!("{} elements for {in_dims}", in_dims.count()),
                format!("{}", self.nodes[ia].value.len()),
            ));
        }
        if m.cols() != in_dims.dim(mode) {
            return Err(Error::shape(
                format!("matrix with {} columns", in_dims.dim(mode)),
                format!("{}x{}", m.rows(), m.cols()),
            ));
        }
        let (_, value) = mode_product_raw(in_dims, &self.nodes[ia].value, &m, mode);
        Ok(self.push(value, Op::ModeProductConst { a: ia, m, mode, in_dims }))
    }

    /// `sum_j coeffs[j] * u_col_j * v_col_j^T` with constant `u`, `v`:
    /// a linear map from `coeffs` to a `u.rows x v.rows` matrix.
    pub fn rank1_mix(&mut self, coeffs: ValueId, u: Arc<Matrix<T>>, v: Arc<Matrix<T>>) -> Result<ValueId> {
        let ic = self.check(coeffs)?;
        let k = self.nodes[ic].value.len();
        if u.cols() != k || v.cols() != k {
            return Err(Error::shape(
                format!("u/v with {k} columns"),
                format!("{}x{} / {}x{}", u.rows(), u.cols(), v.rows(), v.cols()),
            ));
        }
        let value = rank1_mix_forward(&self.nodes[ic].value, &u, &v);
        Ok(self.push(value, Op::Rank1Mix { coeffs: ic, u, v }))
    }

    /// Broadcast a length-C vector over (T, H, W).
    pub fn broadcast_channel(&mut self, v: ValueId, dims: Dims4) -> Result<ValueId> {
        let iv = self.check(v)?;
        if self.nodes[iv].value.len() != dims.c {
            return Err(Error::shape(format!("{} channels", dims.c), format!("{}", self.nodes[iv].value.len())));
        }
        let vol = dims.t * dims.h * dims.w;
        let mut value = Vec::with_capacity(dims.count());
        for c in 0..dims.c {
            let x = self.nodes[iv].value[c];
            value.extend(std::iter::repeat(x).take(vol));
        }
        Ok(self.push(value, Op::BroadcastChannel { v: iv, dims }))
    }

    /// Mean squared error against a constant target; scalar output.
    pub fn mse(&mut self, pred: ValueId, target: Arc<Vec<T>>) -> Result<ValueId> {
        let ip = self.check(pred)?;
        if self.nodes[ip].value.len() != target.len() {
            return Err(Error::shape(format!("{} target elements", self.nodes[ip].value.len()), format!("{}", target.len())));
        }
        let n = T::of_usize(target.len());
        let sum = self.nodes[ip]
            .value
            .iter()
            .zip(target.iter())
            .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
        Ok(self.push(vec![sum / n], Op::Mse { pred: ip, target }))
    }

    /// Exact reverse-mode adjoints for every parameter leaf reachable from
    /// `loss`, which must be scalar-valued.
    pub fn backward(&self, loss: ValueId) -> Result<BTreeMap<String, Vec<T>>> {
        let il = self.check(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(Error::invalid(format!(
                "loss must be scalar, has {} elements",
                self.nodes[il].value.len()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[il] = Some(vec![T::one()]);
        let mut grads: BTreeMap<String, Vec<T>> = BTreeMap::new();

        for i in (0..self.nodes.len()).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(name) => {
                    grads
                        .entry(name.clone())
                        .and_modify(|acc| {
                            for (a, &d) in acc.iter_mut().zip(&g) {
                                *a += d;
                            }
                        })
                        .or_insert_with(|| g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    accumulate(&mut adj, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    accumulate(&mut adj, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let da = zip_map(&g, &self.nodes[*b].value, |x, y| x * y);
                    let db = zip_map(&g, &self.nodes[*a].value, |x, y| x * y);
                    accumulate(&mut adj, *a, &da);
                    accumulate(&mut adj, *b, &db);
                }
                Op::Scale(a, k) => {
                    let da: Vec<T> = g.iter().map(|&x| x * *k).collect();
                    accumulate(&mut adj, *a, &da);
                }
                Op::ScaleByScalar { a, s } => {
                    let sval = self.nodes[*s].value[0];
                    let da: Vec<T> = g.iter().map(|&x| x * sval).collect();
                    let ds = g
                        .iter()
                        .zip(self.nodes[*a].value.iter())
                        .fold(T::zero(), |acc, (&gx, &ax)| acc + gx * ax);
                    accumulate(&mut adj, *a, &da);
                    accumulate(&mut adj, *s, &[ds]);
                }
                Op::Linear { x, w, b, rows, din, dout } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    let mut dx = vec![T::zero(); rows * din];
                    let mut dw = vec![T::zero(); dout * din];
                    for r in 0..*rows {
                        let grow = &g[r * dout..(r + 1) * dout];
                        let xrow = &xv[r * din..(r + 1) * din];
                        let dxrow = &mut dx[r * din..(r + 1) * din];
                        for (o, &go) in grow.iter().enumerate() {
                            if go == T::zero() {
                                continue;
                            }
                            let wrow = &wv[o * din..(o + 1) * din];
                            let dwrow = &mut dw[o * din..(o + 1) * din];
                            for j in 0..*din {
                                dxrow[j] += go * wrow[j];
                                dwrow[j] += go * xrow[j];
                            }
                        }
                    }
                    accumulate(&mut adj, *x, &dx);
                    accumulate(&mut adj, *w, &dw);
                    if let Some(ib) = b {
                        let mut db = vec![T::zero(); *dout];
                        for r in 0..*rows {
                            for (o, db_o) in db.iter_mut().enumerate() {
                                *db_o += g[r * dout + o];
                            }
                        }
                        accumulate(&mut adj, *ib, &db);
                    }
                }
                Op::Softmax { a, width } => {
                    let s = &self.nodes[i].value;
                    let mut da = vec![T::zero(); s.len()];
                    for (row_s, (row_g, row_da)) in s
                        .chunks_exact(*width)
                        .zip(g.chunks_exact(*width).zip(da.chunks_exact_mut(*width)))
                    {
                        let dot = row_g
                            .iter()
                            .zip(row_s)
                            .fold(T::zero(), |acc, (&gx, &sx)| acc + gx * sx);
                        for ((d, &gx), &sx) in row_da.iter_mut().zip(row_g).zip(row_s) {
                            *d = sx * (gx - dot);
                        }
                    }
                    accumulate(&mut adj, *a, &da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let da = zip_map(&g, y, |gx, yx| gx * yx * (T::one() - yx));
                    accumulate(&mut adj, *a, &da);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let da = zip_map(&g, y, |gx, yx| gx * (T::one() - yx * yx));
                    accumulate(&mut adj, *a, &da);
                }
                Op::Gelu(a) => {
                    let xv = &self.nodes[*a].value;
                    let da = zip_map(&g, xv, |gx, x| gx * gelu_grad(x));
                    accumulate(&mut adj, *a, &da);
                }
                Op::LayerNorm { x, gamma, beta, width, stats } => {
                    let xv = &self.nodes[*x].value;
                    let gv = &self.nodes[*gamma].value;
                    let w = *width;
                    let rows = xv.len() / w;
                    let mut dx = vec![T::zero(); xv.len()];
                    let mut dgamma = vec![T::zero(); w];
                    let mut dbeta = vec![T::zero(); w];
                    let inv_w = T::one() / T::of_usize(w);
                    for r in 0..rows {
                        let (mean, rstd) = stats[r];
                        let xrow = &xv[r * w..(r + 1) * w];
                        let grow = &g[r * w..(r + 1) * w];
                        let mut sum_gg = T::zero();
                        let mut sum_ggx = T::zero();
                        for j in 0..w {
                            let xhat = (xrow[j] - mean) * rstd;
                            let gg = grow[j] * gv[j];
                            sum_gg += gg;
                            sum_ggx += gg * xhat;
                            dgamma[j] += grow[j] * xhat;
                            dbeta[j] += grow[j];
                        }
                        let dxrow = &mut dx[r * w..(r + 1) * w];
                        for j in 0..w {
                            let xhat = (xrow[j] - mean) * rstd;
                            let gg = grow[j] * gv[j];
                            dxrow[j] = rstd * (gg - inv_w * sum_gg - xhat * inv_w * sum_ggx);
                        }
                    }
                    accumulate(&mut adj, *x, &dx);
                    accumulate(&mut adj, *gamma, &dgamma);
                    accumulate(&mut adj, *beta, &dbeta);
                }
                Op::Dropout { a, mask } => {
                    let da = zip_map(&g, mask, |gx, m| gx * m);
                    accumulate(&mut adj, *a, &da);
                }
                Op::DropPath { a, keep } => {
                    let da: Vec<T> = g.iter().map(|&x| x * *keep).collect();
                    accumulate(&mut adj, *a, &da);
                }
                Op::GatherRows { a, idx, width } => {
                    let mut da = vec![T::zero(); self.nodes[*a].value.len()];
                    for (r, &src) in idx.iter().enumerate() {
                        let grow = &g[r * width..(r + 1) * width];
                        let drow = &mut da[src * width..(src + 1) * width];
                        for (d, &gx) in drow.iter_mut().zip(grow) {
                            *d += gx;
                        }
                    }
                    accumulate(&mut adj, *a, &da);
                }
                Op::GatherElems { a, idx } => {
                    let mut da = vec![T::zero(); self.nodes[*a].value.len()];
                    for (j, &src) in idx.iter().enumerate() {
                        da[src] += g[j];
                    }
                    accumulate(&mut adj, *a, &da);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p].value.len();
                        accumulate(&mut adj, p, &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::Mhsa { q, k, v, heads, head_dim, groups, probs } => {
                    let (dq, dk, dv) = mhsa_backward(
                        &g,
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                        *heads,
                        *head_dim,
                        groups,
                        probs,
                    );
                    accumulate(&mut adj, *q, &dq);
                    accumulate(&mut adj, *k, &dk);
                    accumulate(&mut adj, *v, &dv);
                }
                Op::DwConv3d { x, w, b, grid, dim } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    let (gt, gh, gw) = *grid;
                    let d = *dim;
                    let mut dx = vec![T::zero(); xv.len()];
                    let mut dw = vec![T::zero(); d * 27];
                    let mut db = vec![T::zero(); d];
                    for pt in 0..gt {
                        for ph in 0..gh {
                            for pw in 0..gw {
                                let p = (pt * gh + ph) * gw + pw;
                                let grow = &g[p * d..(p + 1) * d];
                                for (c, &gx) in grow.iter().enumerate() {
                                    db[c] += gx;
                                }
                                let mut o = 0usize;
                                for dt in -1i64..=1 {
                                    for dh in -1i64..=1 {
                                        for dwv in -1i64..=1 {
                                            let (qt, qh, qw) = (
                                                pt as i64 + dt,
                                                ph as i64 + dh,
                                                pw as i64 + dwv,
                                            );
                                            if qt >= 0
                                                && qt < gt as i64
                                                && qh >= 0
                                                && qh < gh as i64
                                                && qw >= 0
                                                && qw < gw as i64
                                            {
                                                let qp = ((qt as usize * gh) + qh as usize) * gw
                                                    + qw as usize;
                                                for c in 0..d {
                                                    let gx = grow[c];
                                                    dw[c * 27 + o] += gx * xv[qp * d + c];
                                                    dx[qp * d + c] += gx * wv[c * 27 + o];
                                                }
                                            }
                                            o += 1;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, *x, &dx);
                    accumulate(&mut adj, *w, &dw);
                    accumulate(&mut adj, *b, &db);
                }
                Op::ScaleMode { a, v, mode, dims } => {
                    let av = &self.nodes[*a].value;
                    let vv = &self.nodes[*v].value;
                    let d = dims.as_array();
                    let inner: usize = d[*mode..].iter().product();
                    let n_mode = d[*mode - 1];
                    let outer: usize = d[..*mode - 1].iter().product();
                    let mut da = vec![T::zero(); av.len()];
                    let mut dv = vec![T::zero(); n_mode];
                    for o in 0..outer {
                        for j in 0..n_mode {
                            let base = (o * n_mode + j) * inner;
                            let vj = vv[j];
                            let mut acc = T::zero();
                            for t in 0..inner {
                                da[base + t] = g[base + t] * vj;
                                acc += g[base + t] * av[base + t];
                            }
                            dv[j] += acc;
                        }
                    }
                    accumulate(&mut adj, *a, &da);
                    accumulate(&mut adj, *v, &dv);
                }
                Op::ModeProductConst { a, m, mode, in_dims } => {
                    let out_dims = in_dims.with_dim(*mode, m.rows());
                    let mt = m.transpose();
                    let (_, da) = mode_product_raw(out_dims, &g, &mt, *mode);
                    accumulate(&mut adj, *a, &da);
                }
                Op::Rank1Mix { coeffs, u, v } => {
                    let kdim = self.nodes[*coeffs].value.len();
                    let mut dc = vec![T::zero(); kdim];
                    let (ru, rv) = (u.rows(), v.rows());
                    for (j, dcj) in dc.iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for a_i in 0..ru {
                            let uj = u.get(a_i, j);
                            if uj == T::zero() {
                                continue;
                            }
                            let grow = &g[a_i * rv..(a_i + 1) * rv];
                            let mut inner = T::zero();
                            for (b_i, &gx) in grow.iter().enumerate() {
                                inner += gx * v.get(b_i, j);
                            }
                            acc += uj * inner;
                        }
                        *dcj = acc;
                    }
                    accumulate(&mut adj, *coeffs, &dc);
                }
                Op::BroadcastChannel { v, dims } => {
                    let vol = dims.t * dims.h * dims.w;
                    let mut dv = vec![T::zero(); dims.c];
                    for (c, dv_c) in dv.iter_mut().enumerate() {
                        for t in 0..vol {
                            *dv_c += g[c * vol + t];
                        }
                    }
                    accumulate(&mut adj, *v, &dv);
                }
                Op::Reshape(a) => {
                    accumulate(&mut adj, *a, &g);
                }
                Op::Mse { pred, target } => {
                    let pv = &self.nodes[*pred].value;
                    let n = T::of_usize(target.len());
                    let two = T::of(2.0);
                    let scale = g[0] * two / n;
                    let dp: Vec<T> = pv
                        .iter()
                        .zip(target.iter())
                        .map(|(&p, &t)| scale * (p - t))
                        .collect();
                    accumulate(&mut adj, *pred, &dp);
                }
            }
        }
        Ok(grads)
    }

    /// Recompute every non-leaf value from the recorded inputs and saved
    /// masks; true when all values match bit-exactly.
    pub fn replay_check(&self) -> bool {
        for (i, node) in self.nodes.iter().enumerate() {
            let recomputed: Option<Vec<T>> = match &node.op {
                Op::Const | Op::Param(_) => None,
                Op::Add(a, b) => Some(zip_map(&self.nodes[*a].value, &self.nodes[*b].value, |x, y| x + y)),
                Op::Sub(a, b) => Some(zip_map(&self.nodes[*a].value, &self.nodes[*b].value, |x, y| x - y)),
                Op::Mul(a, b) => Some(zip_map(&self.nodes[*a].value, &self.nodes[*b].value, |x, y| x * y)),
                Op::Scale(a, k) => Some(self.nodes[*a].value.iter().map(|&x| x * *k).collect()),
                Op::ScaleByScalar { a, s } => {
                    let k = self.nodes[*s].value[0];
                    Some(self.nodes[*a].value.iter().map(|&x| x * k).collect())
                }
                Op::Linear { x, w, b, rows, din, dout } => Some(linear_forward(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    b.map(|ib| &self.nodes[ib].value[..]),
                    *rows,
                    *din,
                    *dout,
                )),
                Op::Softmax { a, width } => Some(softmax_forward(&self.nodes[*a].value, *width)),
                Op::Sigmoid(a) => Some(self.nodes[*a].value.iter().map(|&x| sigmoid(x)).collect()),
                Op::Tanh(a) => Some(self.nodes[*a].value.iter().map(|&x| x.tanh()).collect()),
                Op::Gelu(a) => Some(self.nodes[*a].value.iter().map(|&x| gelu(x)).collect()),
                Op::LayerNorm { x, gamma, beta, width, .. } => Some(
                    layer_norm_forward(
                        &self.nodes[*x].value,
                        &self.nodes[*gamma].value,
                        &self.nodes[*beta].value,
                        *width,
                    )
                    .0,
                ),
                Op::Dropout { a, mask } => Some(zip_map(&self.nodes[*a].value, mask, |x, m| x * m)),
                Op::DropPath { a, keep } => {
                    Some(self.nodes[*a].value.iter().map(|&x| x * *keep).collect())
                }
                Op::GatherRows { a, idx, width } => {
                    let src = &self.nodes[*a].value;
                    let mut out = Vec::with_capacity(idx.len() * width);
                    for &r in idx.iter() {
                        out.extend_from_slice(&src[r * width..(r + 1) * width]);
                    }
                    Some(out)
                }
                Op::GatherElems { a, idx } => {
                    let src = &self.nodes[*a].value;
                    Some(idx.iter().map(|&j| src[j]).collect())
                }
                Op::Concat { parts } => {
                    let mut out = Vec::new();
                    for &p in parts {
                        out.extend_from_slice(&self.nodes[p].value);
                    }
                    Some(out)
                }
                Op::Mhsa { q, k, v, heads, head_dim, groups, .. } => Some(
                    mhsa_forward(
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                        *heads,
                        *head_dim,
                        groups,
                    )
                    .0,
                ),
                Op::DwConv3d { x, w, b, grid, dim } => Some(dw_conv3d_forward(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    &self.nodes[*b].value,
                    *grid,
                    *dim,
                )),
                Op::ScaleMode { a, v, mode, dims } => Some(scale_mode_forward(
                    &self.nodes[*a].value,
                    &self.nodes[*v].value,
                    *mode,
                    *dims,
                )),
                Op::ModeProductConst { a, m, mode, in_dims } => {
                    Some(mode_product_raw(*in_dims, &self.nodes[*a].value, m, *mode).1)
                }
                Op::Rank1Mix { coeffs, u, v } => {
                    Some(rank1_mix_forward(&self.nodes[*coeffs].value, u, v))
                }
                Op::BroadcastChannel { v, dims } => {
                    let vol = dims.t * dims.h * dims.w;
                    let mut out = Vec::with_capacity(dims.count());
                    for c in 0..dims.c {
                        let x = self.nodes[*v].value[c];
                        out.extend(std::iter::repeat(x).take(vol));
                    }
                    Some(out)
                }
                Op::Reshape(a) => Some(self.nodes[*a].value.to_vec()),
                Op::Mse { pred, target } => {
                    let n = T::of_usize(target.len());
                    let sum = self.nodes[*pred]
                        .value
                        .iter()
                        .zip(target.iter())
                        .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
                    Some(vec![sum / n])
                }
            };
            if let Some(r) = recomputed {
                if r.len() != node.value.len()
                    || r.iter().zip(node.value.iter()).any(|(a, b)| a.to_f64() != b.to_f64())
                {
                    let _ = i;
                    return false;
                }
            }
        }
        true
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Vec<T>>], idx: usize, g: &[T]) {
    match &mut adj[idx] {
        Some(existing) => {
            for (a, &d) in existing.iter_mut().zip(g) {
                *a += d;
            }
        }
        slot => *slot = Some(g.to_vec()),
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

// Sigmoid-approximated gelu: x * sigmoid(1.702 x).
const GELU_K: f64 = 1.702;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    x * sigmoid(T::of(GELU_K) * x)
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of(GELU_K);
    let s = sigmoid(k * x);
    s + x * k * s * (T::one() - s)
}

fn linear_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    rows: usize,
    din: usize,
    dout: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); rows * dout];
    if rows >= 4 {
        // Transpose the weights once so the inner loop is a contiguous axpy
        // over the output row (vectorizes; dot-product folds do not), and
        // process four input rows per weight-row load.
        let mut wt = vec![T::zero(); din * dout];
        for o in 0..dout {
            for j in 0..din {
                wt[j * dout + o] = w[o * din + j];
            }
        }
        if let Some(bias) = b {
            for orow in out.chunks_exact_mut(dout) {
                orow.copy_from_slice(bias);
            }
        }
        let blocks = rows / 4;
        for blk in 0..blocks {
            let r = 4 * blk;
            let (x0, rest) = x[r * din..].split_at(din);
            let (x1, rest) = rest.split_at(din);
            let (x2, x3rest) = rest.split_at(din);
            let x3 = &x3rest[..din];
            let (o0, rest) = out[r * dout..(r + 4) * dout].split_at_mut(dout);
            let (o1, rest) = rest.split_at_mut(dout);
            let (o2, o3) = rest.split_at_mut(dout);
            let mut o0 = o0;
            let mut o1 = o1;
            let mut o2 = o2;
            let mut o3 = o3;
            for j in 0..din {
                let wtrow = &wt[j * dout..(j + 1) * dout];
                let (a0, a1, a2, a3) = (x0[j], x1[j], x2[j], x3[j]);
                for (k, &wv) in wtrow.iter().enumerate() {
                    o0[k] += wv * a0;
                    o1[k] += wv * a1;
                    o2[k] += wv * a2;
                    o3[k] += wv * a3;
                }
            }
            let _ = (&mut o0, &mut o1, &mut o2, &mut o3);
        }
        for r in 4 * blocks..rows {
            let xrow = &x[r * din..(r + 1) * din];
            let orow = &mut out[r * dout..(r + 1) * dout];
            for (j, &xj) in xrow.iter().enumerate() {
                if xj == T::zero() {
                    continue;
                }
                let wtrow = &wt[j * dout..(j + 1) * dout];
                for (ov, &wv) in orow.iter_mut().zip(wtrow) {
                    *ov += wv * xj;
                }
            }
        }
        return out;
    }
    // Few rows: dot products amortize better than a weight transpose.
    for r in 0..rows {
        let xrow = &x[r * din..(r + 1) * din];
        let orow = &mut out[r * dout..(r + 1) * dout];
        for (o, ov) in orow.iter_mut().enumerate() {
            let wrow = &w[o * din..(o + 1) * din];
            let base = match b {
                Some(bias) => bias[o],
                None => T::zero(),
            };
            *ov = base + crate::tucker::dot4(wrow, xrow);
        }
    }
    out
}

fn softmax_forward<T: Scalar>(a: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for (row, orow) in a.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut sum = T::zero();
        for (o, &x) in orow.iter_mut().zip(row) {
            let e = (x - max).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

const LN_EPS: f64 = 1e-5;

fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    width: usize,
) -> (Vec<T>, Vec<(T, T)>) {
    let rows = x.len() / width;
    let mut out = vec![T::zero(); x.len()];
    let mut stats = Vec::with_capacity(rows);
    let n = T::of_usize(width);
    let eps = T::of(LN_EPS);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
        let var = row
            .iter()
            .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
            / n;
        let rstd = T::one() / (var + eps).sqrt();
        stats.push((mean, rstd));
        let orow = &mut out[r * width..(r + 1) * width];
        for (j, (o, &v)) in orow.iter_mut().zip(row).enumerate() {
            *o = (v - mean) * rstd * gamma[j] + beta[j];
        }
    }
    (out, stats)
}

#[allow(clippy::too_many_arguments)]
fn mhsa_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    heads: usize,
    head_dim: usize,
    groups: &[usize],
) -> (Vec<T>, Vec<T>) {
    let width = heads * head_dim;
    let scale = T::one() / T::of_usize(head_dim).sqrt();
    let mut out = vec![T::zero(); q.len()];
    let total: usize = groups.iter().map(|&l| l * l * heads).sum();
    let mut probs = vec![T::zero(); total];
    let mut row0 = 0usize;
    let mut poff = 0usize;
    for &len in groups {
        for h in 0..heads {
            let off = h * head_dim;
            let p = &mut probs[poff..poff + len * len];
            poff += len * len;
            for a in 0..len {
                let qrow = &q[(row0 + a) * width + off..(row0 + a) * width + off + head_dim];
                let prow = &mut p[a * len..(a + 1) * len];
                for (b, p_ab) in prow.iter_mut().enumerate() {
                    let krow = &k[(row0 + b) * width + off..(row0 + b) * width + off + head_dim];
                    *p_ab = crate::tucker::dot4(qrow, krow) * scale;
                }
                let max = prow.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let mut sum = T::zero();
                for x in prow.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in prow.iter_mut() {
                    *x = *x / sum;
                }
            }
            // Output = P V.
            for a in 0..len {
                let orow = &mut out[(row0 + a) * width + off..(row0 + a) * width + off + head_dim];
                for b in 0..len {
                    let pab = p[a * len + b];
                    if pab == T::zero() {
                        continue;
                    }
                    let vrow = &v[(row0 + b) * width + off..(row0 + b) * width + off + head_dim];
                    for (o, vv) in orow.iter_mut().zip(vrow) {
                        *o += pab * *vv;
                    }
                }
            }
        }
        row0 += len;
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn mhsa_backward<T: Scalar>(
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    heads: usize,
    head_dim: usize,
    groups: &[usize],
    probs: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let width = heads * head_dim;
    let scale = T::one() / T::of_usize(head_dim).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut row0 = 0usize;
    let mut poff = 0usize;
    for &len in groups {
        for h in 0..heads {
            let off = h * head_dim;
            let p = &probs[poff..poff + len * len];
            poff += len * len;
            // dV += P^T G ; dP = G V^T
            let mut dp = vec![T::zero(); len * len];
            for a in 0..len {
                let grow = &g[(row0 + a) * width + off..(row0 + a) * width + off + head_dim];
                for b in 0..len {
                    let pab = p[a * len + b];
                    let vrow = &v[(row0 + b) * width + off..(row0 + b) * width + off + head_dim];
                    let dvrow = &mut dv[(row0 + b) * width + off..(row0 + b) * width + off + head_dim];
                    let mut dot = T::zero();
                    for ((dvx, vv), gx) in dvrow.iter_mut().zip(vrow).zip(grow) {
                        *dvx += pab * *gx;
                        dot += *gx * *vv;
                    }
                    dp[a * len + b] = dot;
                }
            }
            // Softmax backward per row: dS = P * (dP - rowsum(dP * P)).
            for a in 0..len {
                let prow = &p[a * len..(a + 1) * len];
                let dprow = &mut dp[a * len..(a + 1) * len];
                let dot = dprow
                    .iter()
                    .zip(prow)
                    .fold(T::zero(), |acc, (&d, &pp)| acc + d * pp);
                for (d, &pp) in dprow.iter_mut().zip(prow) {
                    *d = pp * (*d - dot);
                }
            }
            // dQ += dS K * scale ; dK += dS^T Q * scale.
            for a in 0..len {
                let dqrow = &mut dq[(row0 + a) * width + off..(row0 + a) * width + off + head_dim];
                let qrow = &q[(row0 + a) * width + off..(row0 + a) * width + off + head_dim];
                for b in 0..len {
                    let ds = dp[a * len + b] * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = &k[(row0 + b) * width + off..(row0 + b) * width + off + head_dim];
                    let dkrow = &mut dk[(row0 + b) * width + off..(row0 + b) * width + off + head_dim];
                    for j in 0..head_dim {
                        dqrow[j] += ds * krow[j];
                        dkrow[j] += ds * qrow[j];
                    }
                }
            }
        }
        row0 += len;
    }
    (dq, dk, dv)
}

fn dw_conv3d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    grid: (usize, usize, usize),
    dim: usize,
) -> Vec<T> {
    let (gt, gh, gw) = grid;
    let n = gt * gh * gw;
    let mut out = vec![T::zero(); n * dim];
    for row in out.chunks_exact_mut(dim) {
        row.copy_from_slice(b);
    }
    // One pass per offset over its valid slab; runs along the w axis are
    // contiguous token blocks.
    let mut wcol = vec![T::zero(); dim];
    let mut o = 0usize;
    for dt in -1i64..=1 {
        for dh in -1i64..=1 {
            for dwv in -1i64..=1 {
                for (c, wc) in wcol.iter_mut().enumerate() {
                    *wc = w[c * 27 + o];
                }
                o += 1;
                let pt_range = (-dt).max(0) as usize..((gt as i64 - dt).min(gt as i64)) as usize;
                let ph_range = (-dh).max(0) as usize..((gh as i64 - dh).min(gh as i64)) as usize;
                let pw_lo = (-dwv).max(0) as usize;
                let pw_hi = ((gw as i64 - dwv).min(gw as i64)) as usize;
                if pw_lo >= pw_hi {
                    continue;
                }
                let run = pw_hi - pw_lo;
                for pt in pt_range.clone() {
                    let qt = (pt as i64 + dt) as usize;
                    for ph in ph_range.clone() {
                        let qh = (ph as i64 + dh) as usize;
                        let p0 = ((pt * gh + ph) * gw + pw_lo) * dim;
                        let q0 = ((qt * gh + qh) * gw + (pw_lo as i64 + dwv) as usize) * dim;
                        let dst = &mut out[p0..p0 + run * dim];
                        let src = &x[q0..q0 + run * dim];
                        for (orow, xrow) in
                            dst.chunks_exact_mut(dim).zip(src.chunks_exact(dim))
                        {
                            for ((ov, &xv), &wv) in
                                orow.iter_mut().zip(xrow).zip(&wcol)
                            {
                                *ov += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn scale_mode_forward<T: Scalar>(a: &[T], v: &[T], mode: usize, dims: Dims4) -> Vec<T> {
    let d = dims.as_array();
    let inner: usize = d[mode..].iter().product();
    let n_mode = d[mode - 1];
    let outer: usize = d[..mode - 1].iter().product();
    let mut out = vec![T::zero(); a.len()];
    for o in 0..outer {
        for (j, &vj) in v.iter().enumerate().take(n_mode) {
            let base = (o * n_mode + j) * inner;
            for t in 0..inner {
                out[base + t] = a[base + t] * vj;
            }
        }
    }
    out
}

fn rank1_mix_forward<T: Scalar>(coeffs: &[T], u: &Matrix<T>, v: &Matrix<T>) -> Vec<T> {
    let (ru, rv) = (u.rows(), v.rows());
    let mut out = vec![T::zero(); ru * rv];
    for (j, &cj) in coeffs.iter().enumerate() {
        if cj == T::zero() {
            continue;
        }
        for a in 0..ru {
            let ua = cj * u.get(a, j);
            if ua == T::zero() {
                continue;
            }
            let orow = &mut out[a * rv..(a + 1) * rv];
            for (b, o) in orow.iter_mut().enumerate() {
                *o += ua * v.get(b, j);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sample_gaussian, RngSeed};

    fn randvec(n: usize, seed: u64) -> Vec<f64> {
        sample_gaussian::<f64>(Dims4::new(1, 1, 1, n), RngSeed(seed))
            .unwrap()
            .into_data()
    }

    /// Central finite differences on a scalar function of a parameter
    /// vector, comparing against the tape gradient.
    fn check_gradient<F>(build: F, param: &[f64], tol: f64)
    where
        F: Fn(&mut Tape<f64>, ValueId) -> ValueId,
    {
        let mut tape = Tape::new(true, 9);
        let p = tape.param("p", param.to_vec());
        let loss = build(&mut tape, p);
        assert!(tape.replay_check(), "replay mismatch");
        let grads = tape.backward(loss).unwrap();
        let g = &grads["p"];
        let h = 1e-6;
        for i in 0..param.len() {
            let mut plus = param.to_vec();
            plus[i] += h;
            let mut minus = param.to_vec();
            minus[i] -= h;
            let eval = |data: Vec<f64>| -> f64 {
                let mut t = Tape::new(true, 9);
                let p = t.param("p", data);
                let l = build(&mut t, p);
                t.value(l).unwrap()[0]
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-6);
            assert!(
                (fd - g[i]).abs() / denom < tol,
                "coord {i}: analytic {} vs fd {fd}",
                g[i]
            );
        }
    }

    #[test]
    fn linear_matches_closed_form() {
        // loss = ||W x||^2 / n with fixed x: grad = 2 (W x) x^T / n.
        let x = randvec(3, 1);
        let w = randvec(6, 2);
        let mut tape = Tape::new(false, 0);
        let xid = tape.constant(x.clone());
        let wid = tape.param("w", w.clone());
        let y = tape.linear(xid, wid, None, 1, 3, 2).unwrap();
        let loss = tape.mse(y, Arc::new(vec![0.0, 0.0])).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = &grads["w"];
        let wx: Vec<f64> = (0..2)
            .map(|o| (0..3).map(|j| w[o * 3 + j] * x[j]).sum())
            .collect();
        for o in 0..2 {
            for j in 0..3 {
                let expect = 2.0 * wx[o] * x[j] / 2.0;
                assert!((g[o * 3 + j] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn softmax_jacobian() {
        // Gradient of softmax . dot(u) matches (diag(s) - s s^T) u.
        let logits = randvec(5, 3);
        let u = randvec(5, 4);
        let mut tape = Tape::new(false, 0);
        let p = tape.param("p", logits.clone());
        let s = tape.softmax(p, 5).unwrap();
        let uc = tape.constant(u.clone());
        let prod = tape.mul(s, uc).unwrap();
        // Reduce to scalar via mse against zero of the sum... use mse trick:
        // loss = sum(prod)^... simpler: mse(prod, 0) is quadratic; instead
        // use a linear reduction: ones * prod via linear.
        let ones = tape.constant(vec![1.0; 5]);
        let dot = tape.mul(prod, ones).unwrap();
        let w = tape.constant(vec![1.0; 5]);
        let total = tape.linear(dot, w, None, 1, 5, 1).unwrap();
        let loss = tape.scale(total, 1.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = &grads["p"];
        let sv = softmax_forward(&logits, 5);
        let su: f64 = sv.iter().zip(&u).map(|(a, b)| a * b).sum();
        for i in 0..5 {
            let expect = sv[i] * (u[i] - su);
            assert!((g[i] - expect).abs() < 1e-10, "{} vs {expect}", g[i]);
        }
    }

    #[test]
    fn elementwise_ops_fd() {
        let p = randvec(6, 5);
        let target = Arc::new(randvec(6, 6));
        check_gradient(
            |t, p| {
                let a = t.tanh(p).unwrap();
                let b = t.sigmoid(a).unwrap();
                let c = t.gelu(b).unwrap();
                let d = t.scale(c, 1.7).unwrap();
                t.mse(d, target.clone()).unwrap()
            },
            &p,
            1e-6,
        );
    }

    #[test]
    fn layer_norm_fd() {
        let p = randvec(12, 7);
        let target = Arc::new(randvec(12, 8));
        let gamma = randvec(4, 9);
        let beta = randvec(4, 10);
        check_gradient(
            |t, p| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let y = t.layer_norm(p, g, b, 4).unwrap();
                t.mse(y, target.clone()).unwrap()
            },
            &p,
            1e-5,
        );
        // And through gamma/beta.
        let x = randvec(12, 11);
        let target2 = Arc::new(randvec(12, 12));
        check_gradient(
            |t, p| {
                let x = t.constant(x.clone());
                let b = t.constant(beta.clone());
                let y = t.layer_norm(x, p, b, 4).unwrap();
                t.mse(y, target2.clone()).unwrap()
            },
            &gamma,
            1e-5,
        );
    }

    #[test]
    fn mhsa_fd() {
        // 2 heads, head_dim 3, ragged groups (3, 2) over 5 tokens.
        let n = 5;
        let width = 6;
        let q = randvec(n * width, 13);
        let k = randvec(n * width, 14);
        let v = randvec(n * width, 15);
        let target = Arc::new(randvec(n * width, 16));
        let groups = Arc::new(vec![3usize, 2usize]);
        for (which, data) in [("q", &q), ("k", &k), ("v", &v)] {
            let q = q.clone();
            let k = k.clone();
            let v = v.clone();
            let groups = groups.clone();
            let target = target.clone();
            let which = which.to_string();
            check_gradient(
                move |t, p| {
                    let qid = if which == "q" { p } else { t.constant(q.clone()) };
                    let kid = if which == "k" { p } else { t.constant(k.clone()) };
                    let vid = if which == "v" { p } else { t.constant(v.clone()) };
                    let o = t.mhsa(qid, kid, vid, 2, 3, groups.clone()).unwrap();
                    t.mse(o, target.clone()).unwrap()
                },
                data,
                1e-5,
            );
        }
    }

    #[test]
    fn dw_conv3d_fd() {
        let grid = (2usize, 3usize, 2usize);
        let dim = 4;
        let n = 12;
        let x = randvec(n * dim, 17);
        let w = randvec(dim * 27, 18);
        let b = randvec(dim, 19);
        let target = Arc::new(randvec(n * dim, 20));
        // Through x.
        {
            let w = w.clone();
            let b = b.clone();
            let target = target.clone();
            check_gradient(
                move |t, p| {
                    let wid = t.constant(w.clone());
                    let bid = t.constant(b.clone());
                    let y = t.dw_conv3d(p, wid, bid, grid, dim).unwrap();
                    t.mse(y, target.clone()).unwrap()
                },
                &x,
                1e-5,
            );
        }
        // Through w.
        {
            let x = x.clone();
            let b = b.clone();
            let target = target.clone();
            check_gradient(
                move |t, p| {
                    let xid = t.constant(x.clone());
                    let bid = t.constant(b.clone());
                    let y = t.dw_conv3d(xid, p, bid, grid, dim).unwrap();
                    t.mse(y, target.clone()).unwrap()
                },
                &w,
                1e-5,
            );
        }
    }

    #[test]
    fn structured_ops_fd() {
        let dims = Dims4::new(2, 3, 2, 2);
        let core = randvec(dims.count(), 21);
        // Mode-2 product with a 2x3 matrix maps (2,3,2,2) -> (2,2,2,2).
        let target = Arc::new(randvec(2 * 2 * 2 * 2, 22));
        let m = Arc::new(
            Matrix::from_vec(2, 3, randvec(6, 23)).unwrap(),
        );
        // scale_mode + mode_product_const chain, gradient through the vector.
        let vvec = randvec(3, 24);
        {
            let core = core.clone();
            let m = m.clone();
            let target = target.clone();
            check_gradient(
                move |t, p| {
                    let c = t.constant(core.clone());
                    let scaled = t.scale_mode(c, p, 2, dims).unwrap();
                    let out = t
                        .mode_product_const(scaled, m.clone(), 2, dims)
                        .unwrap();
                    t.mse(out, target.clone()).unwrap()
                },
                &vvec,
                1e-6,
            );
        }
        // rank1_mix gradient through coefficients.
        let u = Arc::new(Matrix::from_vec(4, 3, randvec(12, 25)).unwrap());
        let vm = Arc::new(Matrix::from_vec(5, 3, randvec(15, 26)).unwrap());
        let coeffs = randvec(3, 27);
        let target2 = Arc::new(randvec(20, 28));
        check_gradient(
            move |t, p| {
                let out = t.rank1_mix(p, u.clone(), vm.clone()).unwrap();
                t.mse(out, target2.clone()).unwrap()
            },
            &coeffs,
            1e-6,
        );
    }

    #[test]
    fn gather_broadcast_concat_fd() {
        let dims = Dims4::new(3, 2, 2, 2);
        let p = randvec(3, 29);
        let target = Arc::new(randvec(dims.count(), 30));
        check_gradient(
            move |t, p| {
                let b = t.broadcast_channel(p, dims).unwrap();
                t.mse(b, target.clone()).unwrap()
            },
            &p,
            1e-6,
        );

        let rows = randvec(8, 31); // 4 rows of width 2
        let idx = Arc::new(vec![2usize, 0, 2, 3, 1]);
        let target2 = Arc::new(randvec(10, 32));
        check_gradient(
            move |t, p| {
                let g = t.gather_rows(p, idx.clone(), 2).unwrap();
                t.mse(g, target2.clone()).unwrap()
            },
            &rows,
            1e-6,
        );

        let part = randvec(4, 33);
        let target3 = Arc::new(randvec(8, 34));
        check_gradient(
            move |t, p| {
                let c = t.constant(vec![0.5; 4]);
                let both = t.concat(&[p, c]).unwrap();
                t.mse(both, target3.clone()).unwrap()
            },
            &part,
            1e-6,
        );
    }

    #[test]
    fn dropout_masks_frozen_and_replayable() {
        let x = randvec(64, 35);
        let mut tape = Tape::new(true, 77);
        let p = tape.param("p", x.clone());
        let d = tape.dropout(p, 0.5).unwrap();
        let kept: Vec<f64> = tape.value(d).unwrap().to_vec();
        assert!(kept.iter().any(|&v| v == 0.0));
        assert!(tape.replay_check());

        // Same seed, same graph: identical mask.
        let mut tape2 = Tape::new(true, 77);
        let p2 = tape2.param("p", x.clone());
        let d2 = tape2.dropout(p2, 0.5).unwrap();
        assert_eq!(tape2.value(d2).unwrap(), kept.as_slice());

        // Eval mode: identity.
        let mut tape3 = Tape::new(false, 77);
        let p3 = tape3.param("p", x.clone());
        let d3 = tape3.dropout(p3, 0.5).unwrap();
        assert_eq!(tape3.value(d3).unwrap(), x.as_slice());
    }

    #[test]
    fn untouched_params_absent_and_zero_fillable() {
        let mut tape = Tape::new(false, 0);
        let a = tape.param("used", vec![1.0, 2.0]);
        let _unused = tape.param("unused", vec![3.0]);
        let loss = tape.mse(a, Arc::new(vec![0.0, 0.0])).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.contains_key("used"));
        assert!(!grads.contains_key("unused"));
    }

    #[test]
    fn off_tape_rejected() {
        let mut tape_a = Tape::new(false, 0);
        let mut tape_b = Tape::new(false, 0);
        let a = tape_a.param("a", vec![1.0]);
        let b = tape_b.param("b", vec![1.0]);
        match tape_a.add(a, b) {
            Err(Error::OffTape) => {}
            other => panic!("expected off-tape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new(false, 0);
        let a = tape.param("a", vec![1.0, 2.0]);
        assert!(tape.backward(a).is_err());
    }
}
