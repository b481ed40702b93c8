//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every forward operation as a node holding its output
//! buffer and the ids of its inputs. `backward` replays the tape in reverse,
//! accumulating adjoints; gradients of tracked leaves persist on the node and
//! can be harvested back into a [`ParamStore`].
//!
//! The op set is fixed to what the model needs: matrix products (plain and
//! batched), suffix-broadcast add, subtract, scalar scale, ReLU, square,
//! last-dim softmax, last-two-dims transpose, concat/slice/stack, reshape,
//! leading-dim expand, and full reductions.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Square(NodeId),
    SoftmaxLast(NodeId),
    TransposeLast2(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, axis: usize, start: usize, len: usize },
    Reshape(NodeId),
    Expand(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Accumulated gradient; allocated only for tracked leaves.
    grad: Option<Vec<f64>>,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound_params: BTreeMap<String, NodeId>,
}

// ── dense kernels ───────────────────────────────────────────────────

/// Column-tile width of the matmul microkernel; 2×16 f64 accumulators stay
/// in vector registers.
const MM_TILE: usize = 32;

/// c[m×n] += a[m×k] @ b[k×n].
///
/// Register-tiled over 2 output rows × 16 columns with scalar edge handling;
/// per-element accumulation stays in p order, so results are deterministic.
fn mm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let n_main = n - n % MM_TILE;
    let mut j0 = 0;
    while j0 < n_main {
        let mut i = 0;
        while i + 2 <= m {
            let a0 = &a[i * k..(i + 1) * k];
            let a1 = &a[(i + 1) * k..(i + 2) * k];
            let mut acc0 = [0.0f64; MM_TILE];
            let mut acc1 = [0.0f64; MM_TILE];
            for p in 0..k {
                let (x0, x1) = (a0[p], a1[p]);
                let b_tile = &b[p * n + j0..p * n + j0 + MM_TILE];
                for (jj, &bv) in b_tile.iter().enumerate() {
                    acc0[jj] += x0 * bv;
                    acc1[jj] += x1 * bv;
                }
            }
            let c0 = &mut c[i * n + j0..i * n + j0 + MM_TILE];
            for (cv, &v) in c0.iter_mut().zip(&acc0) {
                *cv += v;
            }
            let c1 = &mut c[(i + 1) * n + j0..(i + 1) * n + j0 + MM_TILE];
            for (cv, &v) in c1.iter_mut().zip(&acc1) {
                *cv += v;
            }
            i += 2;
        }
        if i < m {
            let a_row = &a[i * k..(i + 1) * k];
            let mut acc = [0.0f64; MM_TILE];
            for (p, &av) in a_row.iter().enumerate() {
                if av != 0.0 {
                    let b_tile = &b[p * n + j0..p * n + j0 + MM_TILE];
                    for (jj, &bv) in b_tile.iter().enumerate() {
                        acc[jj] += av * bv;
                    }
                }
            }
            let c_row = &mut c[i * n + j0..i * n + j0 + MM_TILE];
            for (cv, &v) in c_row.iter_mut().zip(&acc) {
                *cv += v;
            }
        }
        j0 += MM_TILE;
    }
    if n_main < n {
        // trailing columns, plain accumulate
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &av) in a_row.iter().enumerate() {
                if av != 0.0 {
                    let b_row = &b[p * n + n_main..(p + 1) * n];
                    let c_row = &mut c[i * n + n_main..(i + 1) * n];
                    for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                        *cv += av * bv;
                    }
                }
            }
        }
    }
}

/// Out-of-place transpose of a row-major [rows × cols] block.
fn t2(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

/// Splits `shape` at `axis` into (outer, extent, inner) run lengths.
fn axis_runs(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { shape, data, grad: None, op, tracked });
        id
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.node(id).data
    }

    /// Copies a node's value out as an untracked tensor.
    pub fn value(&self, id: NodeId) -> Tensor {
        Tensor {
            shape: self.node(id).shape.clone(),
            data: self.node(id).data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Accumulated gradient of a tracked leaf, if backward has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    // ── leaves ──────────────────────────────────────────────────────

    /// Inserts a tensor as a leaf; gradient-tracked iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    /// Binds a store parameter as a tracked leaf, caching by name so repeated
    /// lookups within one graph share a single node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound_params.get(name) {
            return Ok(id);
        }
        let t = store.get(name)?;
        let id = self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true);
        self.bound_params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Adds each bound parameter's accumulated gradient into the store.
    pub fn harvest_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, &id) in &self.bound_params {
            if let Some(g) = self.node(id).grad.as_deref() {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    // ── forward ops ─────────────────────────────────────────────────

    /// Matrix product. Accepts [m×k]@[k×n], [B×m×k]@[k×n] (shared rhs), and
    /// [B×m×k]@[B×k×n] (batched).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (3, 2) if sa[2] == sb[0] => (sa[0], sa[1], sa[2], sb[1], vec![sa[0], sa[1], sb[1]]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => {
                (sa[0], sa[1], sa[2], sb[2], vec![sa[0], sa[1], sb[2]])
            }
            _ => {
                return Err(Error::Shape(format!(
                    "matmul: incompatible shapes {sa:?} x {sb:?}"
                )))
            }
        };
        let rhs_batched = sb.len() == 3;
        let mut out = vec![0.0; batch * m * n];
        {
            let da = self.data(a);
            let db = self.data(b);
            for bi in 0..batch {
                let a_off = bi * m * k;
                let b_off = if rhs_batched { bi * k * n } else { 0 };
                mm_acc(
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    &da[a_off..a_off + m * k],
                    &db[b_off..b_off + k * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let tracked = self.node(a).tracked || self.node(b).tracked;
        Ok(self.push(out_shape, out, Op::Matmul(a, b), tracked))
    }

    /// Elementwise add; `b` may also be a right-aligned suffix of `a`'s shape
    /// (bias rows, positional tables), in which case it is tiled over the
    /// leading extents.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let suffix_ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..];
        if !suffix_ok {
            return Err(Error::Shape(format!(
                "add: shape {sb:?} is not {sa:?} or a suffix of it"
            )));
        }
        let bn = self.node(b).data.len();
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + self.node(b).data[i % bn])
            .collect();
        let tracked = self.node(a).tracked || self.node(b).tracked;
        Ok(self.push(sa, data, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("sub: shapes differ {sa:?} vs {sb:?}")));
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let tracked = self.node(a).tracked || self.node(b).tracked;
        Ok(self.push(sa.to_vec(), data, Op::Sub(a, b), tracked))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.node(a).data.iter().map(|&x| x * c).collect();
        let tracked = self.node(a).tracked;
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, c), tracked)
    }

    /// Elementwise max(x, 0); the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.node(a).data.iter().map(|&x| x.max(0.0)).collect();
        let tracked = self.node(a).tracked;
        self.push(self.shape(a).to_vec(), data, Op::Relu(a), tracked)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.node(a).data.iter().map(|&x| x * x).collect();
        let tracked = self.node(a).tracked;
        self.push(self.shape(a).to_vec(), data, Op::Square(a), tracked)
    }

    /// Softmax over the last dimension, computed with max-subtraction.
    pub fn softmax_lastdim(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| Error::Shape("softmax: rank-0 input".into()))?;
        if last == 0 {
            return Err(Error::Shape("softmax: empty last dimension".into()));
        }
        let mut data = self.node(a).data.clone();
        for row in data.chunks_mut(last) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let tracked = self.node(a).tracked;
        Ok(self.push(shape, data, Op::SoftmaxLast(a), tracked))
    }

    /// Swaps the last two dimensions of a 2-D or 3-D tensor.
    pub fn transpose_last2(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("transpose: rank < 2: {shape:?}")));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let src = &self.node(a).data;
        let mut data = vec![0.0; src.len()];
        for bi in 0..batch {
            let off = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    data[off + j * r + i] = src[off + i * c + j];
                }
            }
        }
        let mut out_shape = shape;
        let len = out_shape.len();
        out_shape.swap(len - 2, len - 1);
        let tracked = self.node(a).tracked;
        Ok(self.push(out_shape, data, Op::TransposeLast2(a), tracked))
    }

    /// Concatenates same-rank tensors along `axis`; all other extents must
    /// agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Shape("concat: no inputs".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!(
                "concat: axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let ragged = s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y);
            if ragged {
                return Err(Error::Shape(format!(
                    "concat: shape {s:?} incompatible with {base:?} along axis {axis}"
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_runs(&out_shape, axis);
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut dst = 0;
        for o in 0..outer {
            for &id in inputs {
                let e = self.shape(id)[axis];
                let chunk = e * inner;
                let src = &self.node(id).data[o * chunk..(o + 1) * chunk];
                data[dst..dst + chunk].copy_from_slice(src);
                dst += chunk;
            }
        }
        let tracked = inputs.iter().any(|&id| self.node(id).tracked);
        Ok(self.push(out_shape, data, Op::Concat { inputs: inputs.to_vec(), axis }, tracked))
    }

    /// Stacks equal-shape tensors along a new axis inserted at `axis`.
    pub fn stack(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let reshaped: Vec<NodeId> = inputs
            .iter()
            .map(|&id| {
                let mut s = self.shape(id).to_vec();
                if axis > s.len() {
                    return Err(Error::Shape(format!(
                        "stack: axis {axis} out of range for rank {}",
                        s.len()
                    )));
                }
                s.insert(axis, 1);
                self.reshape(id, s)
            })
            .collect::<Result<_>>()?;
        self.concat(&reshaped, axis)
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice: range {start}..{} invalid for shape {shape:?} axis {axis}",
                start + len
            )));
        }
        let (outer, extent, inner) = axis_runs(&shape, axis);
        let mut data = vec![0.0; outer * len * inner];
        let src = &self.node(a).data;
        for o in 0..outer {
            let s_off = (o * extent + start) * inner;
            let d_off = o * len * inner;
            data[d_off..d_off + len * inner].copy_from_slice(&src[s_off..s_off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let tracked = self.node(a).tracked;
        Ok(self.push(out_shape, data, Op::Slice { input: a, axis, start, len }, tracked))
    }

    pub fn reshape(&mut self, a: NodeId, new_shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.node(a).data.len() {
            return Err(Error::Shape(format!(
                "reshape: {:?} ({} values) cannot become {new_shape:?}",
                self.shape(a),
                self.node(a).data.len()
            )));
        }
        let data = self.node(a).data.clone();
        let tracked = self.node(a).tracked;
        Ok(self.push(new_shape, data, Op::Reshape(a), tracked))
    }

    /// Tiles a tensor across a new leading dimension of extent `batch`.
    pub fn expand(&mut self, a: NodeId, batch: usize) -> Result<NodeId> {
        if batch == 0 {
            return Err(Error::Shape("expand: zero batch".into()));
        }
        let src = &self.node(a).data;
        let mut data = Vec::with_capacity(src.len() * batch);
        for _ in 0..batch {
            data.extend_from_slice(src);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(a));
        let tracked = self.node(a).tracked;
        Ok(self.push(shape, data, Op::Expand(a), tracked))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.node(a).data.iter().sum();
        let tracked = self.node(a).tracked;
        self.push(vec![1], vec![s], Op::SumAll(a), tracked)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.node(a).data.len() as f64;
        let s: f64 = self.node(a).data.iter().sum();
        let tracked = self.node(a).tracked;
        self.push(vec![1], vec![s / n], Op::MeanAll(a), tracked)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Adjoints of tracked leaves are
    /// accumulated onto the node, so repeated calls without a reset add up.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        adj.resize_with(n, || None);
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    let buf = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
                    for (a, b) in buf.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::Matmul(a, b) => self.backward_matmul(&mut adj, a, b, &g),
                Op::Add(a, b) => {
                    self.acc_adj(&mut adj, a, |buf| {
                        for (x, y) in buf.iter_mut().zip(&g) {
                            *x += y;
                        }
                    });
                    let bn = self.nodes[b.0].data.len();
                    self.acc_adj(&mut adj, b, |buf| {
                        for (i, y) in g.iter().enumerate() {
                            buf[i % bn] += y;
                        }
                    });
                }
                Op::Sub(a, b) => {
                    self.acc_adj(&mut adj, a, |buf| {
                        for (x, y) in buf.iter_mut().zip(&g) {
                            *x += y;
                        }
                    });
                    self.acc_adj(&mut adj, b, |buf| {
                        for (x, y) in buf.iter_mut().zip(&g) {
                            *x -= y;
                        }
                    });
                }
                Op::Scale(a, c) => self.acc_adj(&mut adj, a, |buf| {
                    for (x, y) in buf.iter_mut().zip(&g) {
                        *x += c * y;
                    }
                }),
                Op::Relu(a) => {
                    let mask: Vec<f64> = self.nodes[a.0]
                        .data
                        .iter()
                        .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                        .collect();
                    self.acc_adj(&mut adj, a, |buf| {
                        for ((x, y), m) in buf.iter_mut().zip(&g).zip(&mask) {
                            *x += y * m;
                        }
                    });
                }
                Op::Square(a) => {
                    let src = self.nodes[a.0].data.clone();
                    self.acc_adj(&mut adj, a, |buf| {
                        for ((x, y), v) in buf.iter_mut().zip(&g).zip(&src) {
                            *x += 2.0 * v * y;
                        }
                    });
                }
                Op::SoftmaxLast(a) => {
                    let out = self.nodes[i].data.clone();
                    let last = *self.nodes[i].shape.last().unwrap();
                    self.acc_adj(&mut adj, a, |buf| {
                        for ((brow, grow), srow) in buf
                            .chunks_mut(last)
                            .zip(g.chunks(last))
                            .zip(out.chunks(last))
                        {
                            let dot: f64 = grow.iter().zip(srow).map(|(x, y)| x * y).sum();
                            for ((b, &gv), &sv) in brow.iter_mut().zip(grow).zip(srow) {
                                *b += sv * (gv - dot);
                            }
                        }
                    });
                }
                Op::TransposeLast2(a) => {
                    let out_shape = self.nodes[i].shape.clone();
                    let (r, c) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
                    let batch: usize = out_shape[..out_shape.len() - 2].iter().product();
                    self.acc_adj(&mut adj, a, |buf| {
                        for bi in 0..batch {
                            let off = bi * r * c;
                            for x in 0..r {
                                for y in 0..c {
                                    buf[off + y * r + x] += g[off + x * c + y];
                                }
                            }
                        }
                    });
                }
                Op::Concat { inputs, axis } => {
                    let out_shape = self.nodes[i].shape.clone();
                    let (outer, _, inner) = axis_runs(&out_shape, axis);
                    let mut offsets = Vec::with_capacity(inputs.len());
                    let mut acc = 0;
                    for &id in &inputs {
                        offsets.push(acc);
                        acc += self.nodes[id.0].shape[axis];
                    }
                    let total = acc;
                    for (&id, &off) in inputs.iter().zip(&offsets) {
                        let e = self.nodes[id.0].shape[axis];
                        self.acc_adj(&mut adj, id, |buf| {
                            for o in 0..outer {
                                let s_off = (o * total + off) * inner;
                                let d_off = o * e * inner;
                                for j in 0..e * inner {
                                    buf[d_off + j] += g[s_off + j];
                                }
                            }
                        });
                    }
                }
                Op::Slice { input, axis, start, len } => {
                    let in_shape = self.nodes[input.0].shape.clone();
                    let (outer, extent, inner) = axis_runs(&in_shape, axis);
                    self.acc_adj(&mut adj, input, |buf| {
                        for o in 0..outer {
                            let d_off = (o * extent + start) * inner;
                            let s_off = o * len * inner;
                            for j in 0..len * inner {
                                buf[d_off + j] += g[s_off + j];
                            }
                        }
                    });
                }
                Op::Reshape(a) => self.acc_adj(&mut adj, a, |buf| {
                    for (x, y) in buf.iter_mut().zip(&g) {
                        *x += y;
                    }
                }),
                Op::Expand(a) => {
                    let chunk = self.nodes[a.0].data.len();
                    self.acc_adj(&mut adj, a, |buf| {
                        for (j, y) in g.iter().enumerate() {
                            buf[j % chunk] += y;
                        }
                    });
                }
                Op::SumAll(a) => {
                    let gv = g[0];
                    self.acc_adj(&mut adj, a, |buf| {
                        for x in buf.iter_mut() {
                            *x += gv;
                        }
                    });
                }
                Op::MeanAll(a) => {
                    let gv = g[0] / self.nodes[a.0].data.len() as f64;
                    self.acc_adj(&mut adj, a, |buf| {
                        for x in buf.iter_mut() {
                            *x += gv;
                        }
                    });
                }
            }
        }
        Ok(())
    }

    fn acc_adj(&self, adj: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].tracked {
            return;
        }
        let buf = adj[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].data.len()]);
        f(buf);
    }

    fn backward_matmul(&self, adj: &mut [Option<Vec<f64>>], a: NodeId, b: NodeId, g: &[f64]) {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[1]),
            (3, 2) => (sa[0], sa[1], sa[2], sb[1]),
            (3, 3) => (sa[0], sa[1], sa[2], sb[2]),
            _ => unreachable!("validated at forward time"),
        };
        let rhs_batched = sb.len() == 3;
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        // dA[b] += G[b] @ B[b]^T
        self.acc_adj(adj, a, |buf| {
            if rhs_batched {
                for bi in 0..batch {
                    let bt = t2(&db[bi * k * n..(bi + 1) * k * n], k, n);
                    mm_acc(
                        &mut buf[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bt,
                        m,
                        n,
                        k,
                    );
                }
            } else {
                let bt = t2(db, k, n);
                for bi in 0..batch {
                    mm_acc(
                        &mut buf[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bt,
                        m,
                        n,
                        k,
                    );
                }
            }
        });
        // dB[b] += A[b]^T @ G[b]; a shared rhs sums over the batch
        self.acc_adj(adj, b, |buf| {
            for bi in 0..batch {
                let b_off = if rhs_batched { bi * k * n } else { 0 };
                let at = t2(&da[bi * m * k..(bi + 1) * m * k], m, k);
                mm_acc(
                    &mut buf[b_off..b_off + k * n],
                    &at,
                    &g[bi * m * n..(bi + 1) * m * n],
                    k,
                    m,
                    n,
                );
            }
        });
    }
}
