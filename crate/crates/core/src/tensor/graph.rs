use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use super::params::{ParamId, ParamStore, StoreTag};
use super::Mat;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Mat),
    Borrowed(&'p Mat),
}

impl Value<'_> {
    fn get(&self) -> &Mat {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

/// Precomputed relative-position bucket indices for one (query, key) length pair.
#[derive(Clone, Debug)]
pub struct BucketGrid {
    pub queries: usize,
    pub keys: usize,
    pub index: Vec<usize>,
}

pub struct AttentionSpec<'a> {
    pub heads: usize,
    /// `[heads, buckets]` bias table together with the bucket index grid.
    pub bias: Option<(Var, Arc<BucketGrid>)>,
    /// Keys with `false` are excluded from every softmax row.
    pub key_mask: Option<&'a [bool]>,
}

enum Op {
    Leaf,
    Param(StoreTag, ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Modulate { x: Var, scale: Var, shift: Var },
    Gelu(Var),
    Silu(Var),
    GeGlu(Var),
    MeanRows(Var),
    Embed { table: Var, ids: Vec<usize> },
    Blend { a: Var, b: Var, mask: Vec<bool> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        bias: Option<(Var, Arc<BucketGrid>)>,
        probs: Vec<Mat>,
    },
    Mse { pred: Var, target: Mat },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Mat },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    grad: bool,
}

/// Reverse-mode tape over 2-D `f64` matrices.
///
/// Parameters are borrowed from their [`ParamStore`], never copied. Only stores
/// whose tag was passed to [`Graph::new`] receive gradients; everything else is
/// treated as a constant.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    trainable: Vec<StoreTag>,
    bound: HashMap<(StoreTag, ParamId), Var>,
}

/// Parameter gradients for one store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub tag: StoreTag,
    pub slots: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            tag: store.tag(),
            slots: store.iter().map(|(_, _, m)| Some(Array2::zeros(m.raw_dim()))).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    /// Adds `other * weight` into `self`; slots missing in `other` are skipped.
    pub fn accumulate(&mut self, other: &Gradients, weight: f64) {
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.scaled_add(weight, src),
                    None => *dst = Some(src * weight),
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|x| x * k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'p> Graph<'p> {
    pub fn new(trainable: &[StoreTag]) -> Self {
        Self { nodes: Vec::with_capacity(256), trainable: trainable.to_vec(), bound: HashMap::new() }
    }

    /// A graph in which nothing is trainable.
    pub fn inference() -> Self {
        Self::new(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.nodes[v.0].value.get()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn take(mut self, v: Var) -> Mat {
        match std::mem::replace(&mut self.nodes[v.0].value, Value::Owned(Array2::zeros((0, 0)))) {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m.clone(),
        }
    }

    fn push(&mut self, value: Mat, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, m: &'p Mat) -> Var {
        self.nodes.push(Node { value: Value::Borrowed(m), op: Op::Leaf, grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter; repeated binds of the same slot share one node.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        let key = (store.tag(), id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let trainable = self.trainable.contains(&store.tag());
        let op = if trainable { Op::Param(store.tag(), id) } else { Op::Leaf };
        self.nodes.push(Node { value: Value::Borrowed(store.get(id)), op, grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let grad = self.g(a) || self.g(b);
        self.push(out, Op::MatMul(a, b), grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let grad = self.g(a) || self.g(b);
        self.push(out, Op::Add(a, b), grad)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        let grad = self.g(a) || self.g(b);
        self.push(out, Op::Sub(a, b), grad)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let grad = self.g(a) || self.g(b);
        self.push(out, Op::Mul(a, b), grad)
    }

    /// `[m, n] + [1, n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        let grad = self.g(a) || self.g(row);
        self.push(out, Op::AddRow(a, row), grad)
    }

    /// `[m, n] * [1, n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) * self.value(row);
        let grad = self.g(a) || self.g(row);
        self.push(out, Op::MulRow(a, row), grad)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        let grad = self.g(a);
        self.push(out, Op::Scale(a, k), grad)
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let grad = self.g(x);
        self.push(out, Op::LayerNorm { x, rstd }, grad)
    }

    /// `x * (1 + scale) + shift` with `[1, n]` scale and shift.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let s = self.value(scale).mapv(|v| 1.0 + v);
        let out = self.value(x) * &s + self.value(shift);
        let grad = self.g(x) || self.g(scale) || self.g(shift);
        self.push(out, Op::Modulate { x, scale, shift }, grad)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(gelu);
        let grad = self.g(x);
        self.push(out, Op::Gelu(x), grad)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * sigmoid(v));
        let grad = self.g(x);
        self.push(out, Op::Silu(x), grad)
    }

    /// Gated GELU: input `[m, 2f]` split into value and gate halves, output `value * gelu(gate)`.
    pub fn geglu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let f = xv.ncols() / 2;
        let a = xv.slice(s![.., ..f]);
        let b = xv.slice(s![.., f..]);
        let out = Zip::from(&a).and(&b).map_collect(|&a, &b| a * gelu(b));
        let grad = self.g(x);
        self.push(out, Op::GeGlu(x), grad)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let grad = self.g(x);
        self.push(out, Op::MeanRows(x), grad)
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Array2::zeros((ids.len(), tv.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&tv.row(id));
        }
        let grad = self.g(table);
        self.push(out, Op::Embed { table, ids: ids.to_vec() }, grad)
    }

    /// Row select: `mask[i]` picks row `i` of `a`, otherwise row `i` of `b`.
    pub fn blend(&mut self, a: Var, b: Var, mask: &[bool]) -> Var {
        let mut out = self.value(b).clone();
        let av = self.value(a);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(i).assign(&av.row(i));
            }
        }
        let grad = self.g(a) || self.g(b);
        self.push(out, Op::Blend { a, b, mask: mask.to_vec() }, grad)
    }

    /// Multi-head scaled dot-product attention with optional bucketed additive bias.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec<'_>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = qv.dim();
        let lk = kv.nrows();
        let heads = spec.heads;
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((lq, d));
        let mut probs = Vec::with_capacity(heads);
        let bias_table = spec.bias.as_ref().map(|(b, grid)| (self.value(*b), grid));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = qv.slice(cols);
            let kh = kv.slice(cols);
            let mut sc = qh.dot(&kh.t()) * inv;
            if let Some((table, grid)) = &bias_table {
                let trow = table.row(h);
                for ((i, j), x) in sc.indexed_iter_mut() {
                    *x += trow[grid.index[i * lk + j]];
                }
            }
            for mut row in sc.rows_mut() {
                if let Some(mask) = spec.key_mask {
                    for (x, &m) in row.iter_mut().zip(mask) {
                        if !m {
                            *x = f64::NEG_INFINITY;
                        }
                    }
                }
                let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|x| (x - mx).exp());
                let z = row.sum();
                row.mapv_inplace(|x| x / z);
            }
            out.slice_mut(cols).assign(&sc.dot(&vv.slice(cols)));
            probs.push(sc);
        }
        let grad = self.g(q) || self.g(k) || self.g(v) || spec.bias.as_ref().is_some_and(|(b, _)| self.g(*b));
        self.push(out, Op::Attention { q, k, v, heads, bias: spec.bias, probs }, grad)
    }

    /// Mean squared error over every entry, returned as a `[1, 1]` scalar.
    pub fn mse(&mut self, pred: Var, target: Mat) -> Var {
        let pv = self.value(pred);
        let loss = (pv - &target).mapv(|x| x * x).mean().unwrap_or(0.0);
        let grad = self.g(pred);
        self.push(Array2::from_elem((1, 1), loss), Op::Mse { pred, target }, grad)
    }

    /// Mean token cross-entropy of row-wise logits against target ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
            let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|x| (x - mx).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
            loss -= row[t].max(1e-300).ln();
        }
        loss /= targets.len() as f64;
        let grad = self.g(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            grad,
        )
    }

    /// Back-propagates from a scalar node and returns gradients for the store `tag`.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(self.value(loss).raw_dim()));
        let mut out = Gradients { tag: store.tag(), slots: vec![None; store.len()] };

        fn acc(grads: &mut [Option<Mat>], v: Var, d: Mat) {
            match &mut grads[v.0] {
                Some(g) => *g += &d,
                slot @ None => *slot = Some(d),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(tag, id) => {
                    if *tag == store.tag() {
                        out.slots[id.0] = Some(dy);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.g(*a) {
                        acc(&mut grads, *a, dy.dot(&self.value(*b).t()));
                    }
                    if self.g(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&dy));
                    }
                }
                Op::Add(a, b) => {
                    if self.g(*b) {
                        acc(&mut grads, *b, dy.clone());
                    }
                    if self.g(*a) {
                        acc(&mut grads, *a, dy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.g(*b) {
                        acc(&mut grads, *b, -&dy);
                    }
                    if self.g(*a) {
                        acc(&mut grads, *a, dy);
                    }
                }
                Op::Mul(a, b) => {
                    if self.g(*a) {
                        acc(&mut grads, *a, &dy * self.value(*b));
                    }
                    if self.g(*b) {
                        acc(&mut grads, *b, &dy * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.g(*row) {
                        acc(&mut grads, *row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.g(*a) {
                        acc(&mut grads, *a, dy);
                    }
                }
                Op::MulRow(a, row) => {
                    if self.g(*row) {
                        let d = (&dy * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *row, d);
                    }
                    if self.g(*a) {
                        acc(&mut grads, *a, &dy * self.value(*row));
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, *a, dy * *k),
                Op::LayerNorm { x, rstd } => {
                    let y = node.value.get();
                    let n = y.ncols() as f64;
                    let mut dx = dy;
                    for ((mut drow, yrow), &r) in dx.rows_mut().into_iter().zip(y.rows()).zip(rstd) {
                        let mean_d = drow.sum() / n;
                        let mean_dy = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &yv| {
                            *d = r * (*d - mean_d - yv * mean_dy);
                        });
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Modulate { x, scale, shift } => {
                    if self.g(*shift) {
                        acc(&mut grads, *shift, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.g(*scale) {
                        let d = (&dy * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *scale, d);
                    }
                    if self.g(*x) {
                        let s = self.value(*scale).mapv(|v| 1.0 + v);
                        acc(&mut grads, *x, dy * &s);
                    }
                }
                Op::Gelu(x) => {
                    let d = Zip::from(&dy).and(self.value(*x)).map_collect(|&d, &xv| d * gelu_grad(xv));
                    acc(&mut grads, *x, d);
                }
                Op::Silu(x) => {
                    let d = Zip::from(&dy).and(self.value(*x)).map_collect(|&d, &xv| {
                        let sg = sigmoid(xv);
                        d * sg * (1.0 + xv * (1.0 - sg))
                    });
                    acc(&mut grads, *x, d);
                }
                Op::GeGlu(x) => {
                    let xv = self.value(*x);
                    let f = xv.ncols() / 2;
                    let mut dx = Array2::zeros(xv.raw_dim());
                    let a = xv.slice(s![.., ..f]);
                    let b = xv.slice(s![.., f..]);
                    Zip::from(dx.slice_mut(s![.., ..f])).and(&dy).and(&b).for_each(|o, &d, &bv| *o = d * gelu(bv));
                    Zip::from(dx.slice_mut(s![.., f..]))
                        .and(&dy)
                        .and(&a)
                        .and(&b)
                        .for_each(|o, &d, &av, &bv| *o = d * av * gelu_grad(bv));
                    acc(&mut grads, *x, dx);
                }
                Op::MeanRows(x) => {
                    let m = self.value(*x).nrows();
                    let row = dy.row(0).mapv(|v| v / m as f64);
                    let d = row.broadcast((m, row.len())).expect("broadcast").to_owned();
                    acc(&mut grads, *x, d);
                }
                Op::Embed { table, ids } => {
                    let mut d = Array2::zeros(self.value(*table).raw_dim());
                    for (i, &id) in ids.iter().enumerate() {
                        let mut r = d.row_mut(id);
                        r += &dy.row(i);
                    }
                    acc(&mut grads, *table, d);
                }
                Op::Blend { a, b, mask } => {
                    if self.g(*a) {
                        let mut d = dy.clone();
                        for (i, &m) in mask.iter().enumerate() {
                            if !m {
                                d.row_mut(i).fill(0.0);
                            }
                        }
                        acc(&mut grads, *a, d);
                    }
                    if self.g(*b) {
                        let mut d = dy;
                        for (i, &m) in mask.iter().enumerate() {
                            if m {
                                d.row_mut(i).fill(0.0);
                            }
                        }
                        acc(&mut grads, *b, d);
                    }
                }
                Op::Attention { q, k, v, heads, bias, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let inv = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros(qv.raw_dim());
                    let mut dk = Array2::zeros(kv.raw_dim());
                    let mut dv = Array2::zeros(vv.raw_dim());
                    let mut dtable = bias.as_ref().map(|(b, _)| Array2::<f64>::zeros(self.value(*b).raw_dim()));
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let doh = dy.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&doh));
                        let dp = doh.dot(&vv.slice(cols).t());
                        let mut ds = dp;
                        for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum::<f64>();
                            Zip::from(&mut drow).and(&prow).for_each(|x, &pv| *x = pv * (*x - dot));
                        }
                        if let (Some(dt), Some((_, grid))) = (dtable.as_mut(), bias.as_ref()) {
                            let lk = grid.keys;
                            let mut trow = dt.row_mut(h);
                            for ((i, j), &x) in ds.indexed_iter() {
                                trow[grid.index[i * lk + j]] += x;
                            }
                        }
                        dq.slice_mut(cols).assign(&(ds.dot(&kv.slice(cols)) * inv));
                        dk.slice_mut(cols).assign(&(ds.t().dot(&qv.slice(cols)) * inv));
                    }
                    if let (Some(dt), Some((b, _))) = (dtable, bias.as_ref()) {
                        if self.g(*b) {
                            acc(&mut grads, *b, dt);
                        }
                    }
                    if self.g(*q) {
                        acc(&mut grads, *q, dq);
                    }
                    if self.g(*k) {
                        acc(&mut grads, *k, dk);
                    }
                    if self.g(*v) {
                        acc(&mut grads, *v, dv);
                    }
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred);
                    let k = 2.0 * dy[[0, 0]] / pv.len() as f64;
                    acc(&mut grads, *pred, (pv - target) * k);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let k = dy[[0, 0]] / targets.len() as f64;
                    let mut d = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        d[[i, t]] -= 1.0;
                    }
                    acc(&mut grads, *logits, d * k);
                }
            }
        }
        out
    }
}
