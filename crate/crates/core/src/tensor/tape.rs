//! Reverse-mode tape.
//!
//! A [`Graph`] records primitive ops in creation order, which is a
//! topological order by construction. [`Graph::backward`] consumes the tape
//! and walks it once in reverse, freeing each node as soon as its cotangent
//! has been pushed to its parents.
//!
//! [`Graph::checkpoint`] records a segment as a single hub node that keeps
//! only its inputs. The interior is rebuilt on a fresh tape when the
//! backward pass reaches the hub.

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use super::dense::Tensor;
use super::kernels;
use crate::error::{Error, Result};
use crate::real::Real;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Activation accounting for the current thread, in elements.
///
/// Only values produced by ops are counted; leaves and constants alias
/// storage owned elsewhere.
pub mod memstats {
    use super::{LIVE, PEAK};

    pub fn live() -> usize {
        LIVE.with(|c| c.get())
    }

    pub fn peak() -> usize {
        PEAK.with(|c| c.get())
    }

    /// Resets the high-water mark to the current live count.
    pub fn reset_peak() {
        let l = live();
        PEAK.with(|c| c.set(l));
    }
}

struct LiveGuard(usize);

impl LiveGuard {
    fn new(n: usize) -> Self {
        LIVE.with(|l| {
            let v = l.get() + n;
            l.set(v);
            PEAK.with(|p| p.set(p.get().max(v)));
        });
        LiveGuard(n)
    }
}

impl Drop for LiveGuard {
    fn drop(&mut self) {
        LIVE.with(|l| l.set(l.get() - self.0));
    }
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// Differentiable outputs of a checkpointed segment plus auxiliary values
/// that are copied out during the forward pass and never differentiated.
pub struct SegmentOutputs {
    pub outputs: Vec<Var>,
    pub aux: Vec<Var>,
}

impl SegmentOutputs {
    pub fn new(outputs: Vec<Var>) -> Self {
        SegmentOutputs {
            outputs,
            aux: Vec::new(),
        }
    }
}

pub type SegmentBody<'a, R> = Rc<dyn Fn(&mut Graph<'a, R>, &[Var]) -> Result<SegmentOutputs> + 'a>;

struct SegmentRecord<'a, R: Real> {
    inputs: Vec<usize>,
    body: SegmentBody<'a, R>,
    fingerprints: Vec<u64>,
}

enum Op<'a, R: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, R),
    AddScalar(usize),
    DivScalar(usize, R),
    AddChannel(usize, usize),
    MatMul(usize, usize),
    Conv3x3(usize, usize),
    Silu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    Embedding { table: usize, row: usize },
    Clamp { x: usize, lo: R, hi: R },
    Gather { x: usize, index: Arc<[usize]> },
    /// Forward-only; aliases its input.
    StopGrad,
    /// Forward-only rounding.
    Detached,
    Segment(Box<SegmentRecord<'a, R>>),
    SegmentOutput { hub: usize, slot: usize },
}

struct Node<'a, R: Real> {
    value: Arc<Tensor<R>>,
    op: Op<'a, R>,
    requires_grad: bool,
    _live: LiveGuard,
}

/// Per-leaf gradients returned by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<R> {
    grads: HashMap<Var, Tensor<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(&v)
    }

    /// Gradient of a trainable leaf; untouched leaves hold zeros.
    pub fn wrt(&self, v: Var) -> &Tensor<R> {
        self.grads
            .get(&v)
            .expect("gradient requested for a leaf that does not require grad")
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<R>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Graph<'a, R: Real> {
    id: u32,
    nodes: Vec<Node<'a, R>>,
    fault: Option<Error>,
}

impl<'a, R: Real> Default for Graph<'a, R> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<R: Real>(grads: &mut [Option<Tensor<R>>], p: usize, t: Tensor<R>) {
    match &mut grads[p] {
        Some(g) => g.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn tensor<R: Real>(shape: &[usize], data: Vec<R>) -> Tensor<R> {
    Tensor::from_vec(shape.to_vec(), data).expect("kernel output matches its shape")
}

impl<'a, R: Real> Graph<'a, R> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        v.idx as usize
    }

    pub fn owns(&self, v: Var) -> bool {
        v.tape == self.id && (v.idx as usize) < self.nodes.len()
    }

    fn push(&mut self, value: Arc<Tensor<R>>, op: Op<'a, R>, requires_grad: bool, name: &'static str) -> Var {
        let idx = self.nodes.len();
        let counted = match op {
            Op::Leaf | Op::StopGrad | Op::Segment(_) => 0,
            _ => value.numel(),
        };
        if self.fault.is_none() && !value.all_finite() {
            self.fault = Some(Error::NonFinite { op: name, node: idx });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            _live: LiveGuard::new(counted),
        });
        Var {
            tape: self.id,
            idx: idx as u32,
        }
    }

    fn unary(&mut self, x: Var, value: Tensor<R>, op: Op<'a, R>, name: &'static str) -> Var {
        let rg = self.nodes[self.idx(x)].requires_grad;
        self.push(Arc::new(value), op, rg, name)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor<R>, op: Op<'a, R>, name: &'static str) -> Var {
        let rg = self.nodes[self.idx(a)].requires_grad || self.nodes[self.idx(b)].requires_grad;
        self.push(Arc::new(value), op, rg, name)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<R>) -> Var {
        self.push(Arc::new(t), Op::Leaf, true, "param")
    }

    pub fn param_arc(&mut self, t: Arc<Tensor<R>>) -> Var {
        self.push(t, Op::Leaf, true, "param")
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push(Arc::new(t), Op::Leaf, false, "constant")
    }

    pub fn constant_arc(&mut self, t: Arc<Tensor<R>>) -> Var {
        self.push(t, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[self.idx(v)].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<R>> {
        self.nodes[self.idx(v)].value.clone()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v)].requires_grad
    }

    /// First non-finite value recorded on this tape, if any.
    pub fn fault(&self) -> Option<&Error> {
        self.fault.as_ref()
    }

    pub fn check(&self) -> Result<()> {
        match &self.fault {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let op = Op::Add(self.idx(a), self.idx(b));
        self.binary(a, b, v, op, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let op = Op::Sub(self.idx(a), self.idx(b));
        self.binary(a, b, v, op, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let op = Op::Mul(self.idx(a), self.idx(b));
        self.binary(a, b, v, op, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let op = Op::Div(self.idx(a), self.idx(b));
        self.binary(a, b, v, op, "div")
    }

    pub fn scale(&mut self, x: Var, s: R) -> Var {
        let v = self.value(x).map(|a| a * s);
        let op = Op::Scale(self.idx(x), s);
        self.unary(x, v, op, "scale")
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -R::one())
    }

    pub fn add_scalar(&mut self, x: Var, s: R) -> Var {
        let v = self.value(x).map(|a| a + s);
        let op = Op::AddScalar(self.idx(x));
        self.unary(x, v, op, "add_scalar")
    }

    pub fn div_scalar(&mut self, x: Var, s: R) -> Var {
        let v = self.value(x).map(|a| a / s);
        let op = Op::DivScalar(self.idx(x), s);
        self.unary(x, v, op, "div_scalar")
    }

    /// `x[c, ...] + b[c]`, broadcasting `b` over the trailing dimensions.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b);
        assert!(
            !xs.is_empty() && bs.iter().product::<usize>() == xs[0],
            "add_channel: {xs:?} + {bs:?}"
        );
        let c = xs[0];
        let inner = self.value(x).numel() / c;
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for ch in 0..c {
            let bias = bv[ch];
            for v in &mut out[ch * inner..(ch + 1) * inner] {
                *v += bias;
            }
        }
        let op = Op::AddChannel(self.idx(x), self.idx(b));
        self.binary(x, b, tensor(&xs, out), op, "add_channel")
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let op = Op::MatMul(self.idx(a), self.idx(b));
        self.binary(a, b, tensor(&[m, n], out), op, "matmul")
    }

    /// 3x3, stride 1, zero "same" padding. `x: [cin, h, w]`,
    /// `w: [cout, cin*9]` laid out as `(ci, ky, kx)`.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(
            xs.len() == 3 && ws.len() == 2 && ws[1] == xs[0] * 9,
            "conv3x3: x {xs:?}, w {ws:?}"
        );
        let (cin, h, wd, cout) = (xs[0], xs[1], xs[2], ws[0]);
        let cols = kernels::im2col3x3(self.value(x).data(), cin, h, wd);
        let out = kernels::matmul(self.value(w).data(), &cols, cout, cin * 9, h * wd);
        let op = Op::Conv3x3(self.idx(x), self.idx(w));
        self.binary(x, w, tensor(&[cout, h, wd], out), op, "conv3x3")
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * kernels::sigmoid(a));
        let op = Op::Silu(self.idx(x));
        self.unary(x, v, op, "silu")
    }

    fn rows(&self, x: Var) -> (usize, usize) {
        let s = self.shape(x);
        let n = *s.last().expect("softmax needs at least one dimension");
        (self.value(x).numel() / n, n)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (rows, n) = self.rows(x);
        let src = self.value(x).data();
        let mut out = vec![R::zero(); rows * n];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mx = row.iter().fold(R::neg_infinity(), |m, &v| m.max(v));
            let dst = &mut out[r * n..(r + 1) * n];
            let mut z = R::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - mx).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        let shape = self.shape(x).to_vec();
        let op = Op::Softmax(self.idx(x));
        self.unary(x, tensor(&shape, out), op, "softmax")
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (rows, n) = self.rows(x);
        let src = self.value(x).data();
        let mut out = vec![R::zero(); rows * n];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mx = row.iter().fold(R::neg_infinity(), |m, &v| m.max(v));
            let lse = mx + row.iter().fold(R::zero(), |s, &v| s + (v - mx).exp()).ln();
            for (d, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *d = v - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        let op = Op::LogSoftmax(self.idx(x));
        self.unary(x, tensor(&shape, out), op, "log_softmax")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = (*self.value(x))
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let op = Op::Reshape(self.idx(x));
        self.unary(x, v, op, "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let op = Op::Sum(self.idx(x));
        self.unary(x, v, op, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let op = Op::Mean(self.idx(x));
        self.unary(x, v, op, "mean")
    }

    /// Row `row` of a `[rows, dim]` table, shape `[dim]`.
    pub fn embedding(&mut self, table: Var, row: usize) -> Var {
        let s = self.shape(table).to_vec();
        assert!(s.len() == 2 && row < s[0], "embedding: row {row} of {s:?}");
        let dim = s[1];
        let out = self.value(table).data()[row * dim..(row + 1) * dim].to_vec();
        let op = Op::Embedding {
            table: self.idx(table),
            row,
        };
        self.unary(table, tensor(&[dim], out), op, "embedding")
    }

    /// Identity forward, no gradient.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let v = self.value_arc(x);
        self.push(v, Op::StopGrad, false, "stop_grad")
    }

    /// Round half away from zero. Piecewise constant, so its derivative is
    /// zero wherever it exists.
    pub fn round(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.round());
        self.push(Arc::new(v), Op::Detached, false, "round")
    }

    /// Elementwise clamp; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: R, hi: R) -> Var {
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        let op = Op::Clamp {
            x: self.idx(x),
            lo,
            hi,
        };
        self.unary(x, v, op, "clamp")
    }

    /// `out[i] = x[index[i]]` over flat storage, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Var {
        let src = self.value(x).data();
        assert_eq!(index.len(), shape.iter().product::<usize>(), "gather: index/shape mismatch");
        let out: Vec<R> = index.iter().map(|&i| src[i]).collect();
        let op = Op::Gather {
            x: self.idx(x),
            index,
        };
        self.unary(x, tensor(shape, out), op, "gather")
    }

    /// Runs `body` on a private tape and records only its inputs and
    /// outputs here. The interior is recomputed during backward. `body` must
    /// be a deterministic function of its inputs; a replay whose outputs
    /// differ from the recorded ones fails the backward pass.
    ///
    /// Returns the differentiable outputs and copies of the auxiliary values.
    pub fn checkpoint(&mut self, inputs: &[Var], body: SegmentBody<'a, R>) -> Result<(Vec<Var>, Vec<Tensor<R>>)> {
        let idxs: Vec<usize> = inputs.iter().map(|&v| self.idx(v)).collect();
        let rg = idxs.iter().any(|&i| self.nodes[i].requires_grad);
        let (values, aux, fingerprints) = {
            let mut inner = Graph::new();
            let leaves: Vec<Var> = idxs
                .iter()
                .map(|&i| {
                    let n = &self.nodes[i];
                    inner.push(n.value.clone(), Op::Leaf, n.requires_grad, "segment_input")
                })
                .collect();
            let out = body(&mut inner, &leaves)?;
            inner.check()?;
            let values: Vec<Arc<Tensor<R>>> = out.outputs.iter().map(|&v| inner.value_arc(v)).collect();
            let aux: Vec<Tensor<R>> = out.aux.iter().map(|&v| inner.value(v).clone()).collect();
            let fps = values.iter().map(|v| v.fingerprint()).collect();
            (values, aux, fps)
        };
        let hub = self.push(
            Arc::new(Tensor::zeros(&[0])),
            Op::Segment(Box::new(SegmentRecord {
                inputs: idxs,
                body,
                fingerprints,
            })),
            rg,
            "checkpoint",
        );
        let hub_idx = hub.index();
        let outs = values
            .into_iter()
            .enumerate()
            .map(|(slot, v)| self.push(v, Op::SegmentOutput { hub: hub_idx, slot }, rg, "checkpoint_output"))
            .collect();
        Ok((outs, aux))
    }

    /// Gradient of a scalar `loss` with respect to every trainable leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients<R>> {
        if loss.tape != self.id || loss.index() >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        let v = self.value(loss);
        if !v.is_scalar() {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        let seed = Tensor::ones(v.shape());
        self.backward_seeded(vec![(loss, seed)])
    }

    /// Vector-Jacobian product from arbitrary output cotangents.
    pub fn backward_seeded(self, seeds: Vec<(Var, Tensor<R>)>) -> Result<Gradients<R>> {
        self.check()?;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<R>>> = (0..n).map(|_| None).collect();
        let mut top = 0;
        for (v, s) in seeds {
            if v.tape != self.id || v.index() >= n {
                return Err(Error::ForeignVar);
            }
            if s.shape() != self.value(v).shape() {
                return Err(Error::Shape {
                    op: "backward",
                    detail: format!("seed {:?} for value {:?}", s.shape(), self.value(v).shape()),
                });
            }
            top = top.max(v.index() + 1);
            acc(&mut grads, v.index(), s);
        }

        let id = self.id;
        let mut leaf_grads = HashMap::new();
        let mut seg_cot: HashMap<usize, Vec<Option<Tensor<R>>>> = HashMap::new();
        let mut nodes: Vec<Option<Node<'a, R>>> = self.nodes.into_iter().map(Some).collect();
        for slot in nodes.iter_mut().skip(top) {
            *slot = None;
        }

        for i in (0..top).rev() {
            let node = nodes[i].take().expect("each node is visited once");
            let g = grads[i].take();
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    let g = g.unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                    leaf_grads.insert(Var { tape: id, idx: i as u32 }, g);
                }
                continue;
            }
            if let Op::Segment(rec) = &node.op {
                if let Some(cots) = seg_cot.remove(&i) {
                    let contributions = replay_segment(rec, &nodes, cots)?;
                    for (p, t) in contributions {
                        acc(&mut grads, p, t);
                    }
                }
                continue;
            }
            let Some(g) = g else { continue };
            if !node.requires_grad {
                continue;
            }
            let rg = |p: usize| nodes[p].as_ref().is_some_and(|n| n.requires_grad);
            let val = |p: usize| -> &Tensor<R> { &nodes[p].as_ref().expect("parent precedes child").value };
            match &node.op {
                Op::Leaf | Op::StopGrad | Op::Detached => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if rg(b) {
                        acc(&mut grads, b, g.clone());
                    }
                    if rg(a) {
                        acc(&mut grads, a, g);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if rg(b) {
                        acc(&mut grads, b, g.map(|v| -v));
                    }
                    if rg(a) {
                        acc(&mut grads, a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if rg(b) {
                        let t = g.zip_map(val(a), |gv, av| gv * av);
                        acc(&mut grads, b, t);
                    }
                    if rg(a) {
                        let t = g.zip_map(val(b), |gv, bv| gv * bv);
                        acc(&mut grads, a, t);
                    }
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    if rg(b) {
                        let (av, bv) = (val(a), val(b));
                        let data = g
                            .data()
                            .iter()
                            .zip(av.data().iter().zip(bv.data()))
                            .map(|(&gv, (&x, &y))| -gv * x / (y * y))
                            .collect();
                        acc(&mut grads, b, tensor(g.shape(), data));
                    }
                    if rg(a) {
                        let t = g.zip_map(val(b), |gv, bv| gv / bv);
                        acc(&mut grads, a, t);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|v| v * s));
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::DivScalar(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|v| v / s));
                }
                Op::AddChannel(x, b) => {
                    let (x, b) = (*x, *b);
                    if rg(b) {
                        let bshape = val(b).shape().to_vec();
                        let c = bshape.iter().product::<usize>();
                        let inner = g.numel() / c;
                        let data = (0..c)
                            .map(|ch| {
                                g.data()[ch * inner..(ch + 1) * inner]
                                    .iter()
                                    .fold(R::zero(), |s, &v| s + v)
                            })
                            .collect();
                        acc(&mut grads, b, tensor(&bshape, data));
                    }
                    if rg(x) {
                        acc(&mut grads, x, g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (sa, sb) = (val(a).shape().to_vec(), val(b).shape().to_vec());
                    let (m, k, nn) = (sa[0], sa[1], sb[1]);
                    if rg(b) {
                        let t = kernels::matmul_tn(val(a).data(), g.data(), k, m, nn);
                        acc(&mut grads, b, tensor(&sb, t));
                    }
                    if rg(a) {
                        let t = kernels::matmul_nt(g.data(), val(b).data(), m, nn, k);
                        acc(&mut grads, a, tensor(&sa, t));
                    }
                }
                Op::Conv3x3(x, w) => {
                    let (x, w) = (*x, *w);
                    let (xs, ws) = (val(x).shape().to_vec(), val(w).shape().to_vec());
                    let (cin, h, wd, cout) = (xs[0], xs[1], xs[2], ws[0]);
                    let hw = h * wd;
                    if rg(w) {
                        let cols = kernels::im2col3x3(val(x).data(), cin, h, wd);
                        let t = kernels::matmul_nt(g.data(), &cols, cout, hw, cin * 9);
                        acc(&mut grads, w, tensor(&ws, t));
                    }
                    if rg(x) {
                        let gcols = kernels::matmul_tn(val(w).data(), g.data(), cin * 9, cout, hw);
                        let t = kernels::col2im3x3(&gcols, cin, h, wd);
                        acc(&mut grads, x, tensor(&xs, t));
                    }
                }
                Op::Silu(x) => {
                    let x = *x;
                    let data = g
                        .data()
                        .iter()
                        .zip(val(x).data())
                        .map(|(&gv, &xv)| {
                            let s = kernels::sigmoid(xv);
                            gv * s * (R::one() + xv * (R::one() - s))
                        })
                        .collect();
                    acc(&mut grads, x, tensor(g.shape(), data));
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let n_last = *node.value.shape().last().unwrap();
                    let mut out = vec![R::zero(); y.len()];
                    for r in 0..y.len() / n_last {
                        let (yr, gr) = (&y[r * n_last..][..n_last], &g.data()[r * n_last..][..n_last]);
                        let dot = yr.iter().zip(gr).fold(R::zero(), |s, (&a, &b)| s + a * b);
                        for ((o, &yv), &gv) in out[r * n_last..][..n_last].iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *x, tensor(g.shape(), out));
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.data();
                    let n_last = *node.value.shape().last().unwrap();
                    let mut out = vec![R::zero(); y.len()];
                    for r in 0..y.len() / n_last {
                        let (yr, gr) = (&y[r * n_last..][..n_last], &g.data()[r * n_last..][..n_last]);
                        let gsum = gr.iter().fold(R::zero(), |s, &v| s + v);
                        for ((o, &yv), &gv) in out[r * n_last..][..n_last].iter_mut().zip(yr).zip(gr) {
                            *o = gv - yv.exp() * gsum;
                        }
                    }
                    acc(&mut grads, *x, tensor(g.shape(), out));
                }
                Op::Reshape(x) => {
                    let x = *x;
                    let shape = val(x).shape().to_vec();
                    acc(&mut grads, x, g.reshape(&shape).expect("reshape preserves size"));
                }
                Op::Sum(x) => {
                    let x = *x;
                    let s = g.item();
                    acc(&mut grads, x, Tensor::full(val(x).shape(), s));
                }
                Op::Mean(x) => {
                    let x = *x;
                    let s = g.item() / R::lit(val(x).numel() as f64);
                    acc(&mut grads, x, Tensor::full(val(x).shape(), s));
                }
                Op::Embedding { table, row } => {
                    let (table, row) = (*table, *row);
                    let shape = val(table).shape().to_vec();
                    let mut t = Tensor::zeros(&shape);
                    let dim = shape[1];
                    t.data_mut()[row * dim..(row + 1) * dim].copy_from_slice(g.data());
                    acc(&mut grads, table, t);
                }
                Op::Clamp { x, lo, hi } => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    let data = g
                        .data()
                        .iter()
                        .zip(val(x).data())
                        .map(|(&gv, &xv)| if xv >= lo && xv <= hi { gv } else { R::zero() })
                        .collect();
                    let shape = val(x).shape().to_vec();
                    acc(&mut grads, x, tensor(&shape, data));
                }
                Op::Gather { x, index } => {
                    let x = *x;
                    let shape = val(x).shape().to_vec();
                    let mut t = Tensor::zeros(&shape);
                    let td = t.data_mut();
                    for (&i, &gv) in index.iter().zip(g.data()) {
                        td[i] += gv;
                    }
                    acc(&mut grads, x, t);
                }
                Op::SegmentOutput { hub, slot } => {
                    let (hub, slot) = (*hub, *slot);
                    let nslots = match &nodes[hub].as_ref().expect("hub precedes outputs").op {
                        Op::Segment(rec) => rec.fingerprints.len(),
                        _ => unreachable!("segment output without hub"),
                    };
                    let cots = seg_cot.entry(hub).or_insert_with(|| (0..nslots).map(|_| None).collect());
                    match &mut cots[slot] {
                        Some(c) => c.add_assign(&g),
                        s @ None => *s = Some(g),
                    }
                }
                Op::Segment(_) => unreachable!("hubs are handled before the match"),
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Rebuilds a checkpointed segment from its saved inputs and pulls the
/// output cotangents back to those inputs.
fn replay_segment<'a, R: Real>(
    rec: &SegmentRecord<'a, R>,
    nodes: &[Option<Node<'a, R>>],
    cots: Vec<Option<Tensor<R>>>,
) -> Result<Vec<(usize, Tensor<R>)>> {
    let mut inner = Graph::new();
    let leaves: Vec<Var> = rec
        .inputs
        .iter()
        .map(|&i| {
            let n = nodes[i].as_ref().expect("segment inputs precede the hub");
            inner.push(n.value.clone(), Op::Leaf, n.requires_grad, "segment_input")
        })
        .collect();
    let out = (rec.body)(&mut inner, &leaves)?;
    if out.outputs.len() != rec.fingerprints.len()
        || out
            .outputs
            .iter()
            .zip(&rec.fingerprints)
            .any(|(&v, &fp)| inner.value(v).fingerprint() != fp)
    {
        return Err(Error::ReplayMismatch);
    }
    let seeds: Vec<(Var, Tensor<R>)> = out
        .outputs
        .iter()
        .zip(cots)
        .filter_map(|(&v, c)| c.map(|c| (v, c)))
        .collect();
    let mut inner_grads = inner.backward_seeded(seeds)?;
    Ok(rec
        .inputs
        .iter()
        .zip(&leaves)
        .filter_map(|(&p, &leaf)| {
            let trainable = nodes[p].as_ref().is_some_and(|n| n.requires_grad);
            if trainable {
                inner_grads.take(leaf).map(|g| (p, g))
            } else {
                None
            }
        })
        .collect())
}
