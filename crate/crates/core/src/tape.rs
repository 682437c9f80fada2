//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to 2-D tensors during the
//! forward pass. [`Graph::backward`] walks the record in reverse and
//! accumulates gradients for every node that depends on a parameter leaf.
//!
//! The op set is exactly what the toy transformers in this crate need:
//! matrix products, elementwise arithmetic, RMS normalization, rotary
//! positions, GeLU, grouped-head masked attention, row gathers/concats,
//! row pooling and the two losses (cross-entropy, MSE).

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::masks::AttentionMask;
use crate::scalar::Scalar;

pub type Tensor<T> = Array2<T>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Query/key-value head layout of an attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HeadConfig {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl HeadConfig {
    pub fn new(n_heads: usize, n_kv_heads: usize, head_dim: usize) -> Result<Self> {
        let h = HeadConfig {
            n_heads,
            n_kv_heads,
            head_dim,
        };
        h.validate()?;
        Ok(h)
    }

    /// Split a fixed total width over `n_heads`, as in the single-layer
    /// experiments where heads × head_dim stays constant.
    pub fn with_total(n_heads: usize, n_kv_heads: usize, total: usize) -> Result<Self> {
        if n_heads == 0 || total % n_heads != 0 {
            return Err(Error::Shape(format!(
                "total head width {total} not divisible by {n_heads} heads"
            )));
        }
        Self::new(n_heads, n_kv_heads, total / n_heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.n_kv_heads == 0 || self.head_dim == 0 {
            return Err(Error::Shape("head counts and head_dim must be positive".into()));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::Shape(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        Ok(())
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// KV head serving query head `h`.
    pub fn kv_head(&self, h: usize) -> usize {
        h / (self.n_heads / self.n_kv_heads)
    }
}

/// One independent attention problem inside a batched attention op.
///
/// `q_rows` index rows of the query tensor, `k_rows` rows of the key/value
/// tensors, and `mask` is `(q_rows.len(), k_rows.len())`. Every query row
/// must belong to exactly one block.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub q_rows: Vec<usize>,
    pub k_rows: Vec<usize>,
    pub mask: AttentionMask,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Rope {
        x: Var,
        cos: Rc<Array2<T>>,
        sin: Rc<Array2<T>>,
        head_dim: usize,
    },
    Gelu {
        x: Var,
        slope: Array2<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        blocks: Rc<Vec<AttnBlock>>,
        heads: HeadConfig,
        scale: T,
        probs: Vec<Vec<Array2<T>>>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Concat(Vec<Var>),
    PoolRows {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<T>,
    },
    Mse {
        pred: Var,
        target: Array2<T>,
    },
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation for later differentiation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zero(&self, v: Var, shape: (usize, usize)) -> Array2<T> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a) * s;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Row-wise RMS normalization followed by an elementwise gain of shape `(1, d)`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let gv = self.value(gain);
        let (n, d) = xv.dim();
        assert_eq!(gv.dim(), (1, d), "rmsnorm gain shape");
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let mut out = Array2::zeros((n, d));
        let mut inv = Vec::with_capacity(n);
        for (xr, mut or) in xv.outer_iter().zip(out.outer_iter_mut()) {
            let ms = xr.iter().map(|&a| a * a).sum::<T>() / dn;
            let ir = T::one() / (ms + eps).sqrt();
            inv.push(ir);
            Zip::from(&mut or)
                .and(&xr)
                .and(gv.row(0))
                .for_each(|o, &a, &g| *o = a * ir * g);
        }
        let ng = self.ng(x) || self.ng(gain);
        self.push(out, Op::RmsNorm { x, gain, inv_rms: inv }, ng)
    }

    /// Rotary positions on interleaved pairs, per head of width `head_dim`.
    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize, base: f64) -> Result<Var> {
        let (n, w) = self.shape(x);
        if head_dim % 2 != 0 {
            return Err(Error::Shape(format!("rotary head_dim {head_dim} is odd")));
        }
        if w % head_dim != 0 || positions.len() != n {
            return Err(Error::Shape(format!(
                "rope: width {w}, head_dim {head_dim}, rows {n}, positions {}",
                positions.len()
            )));
        }
        let (cos, sin) = rope_tables::<T>(positions, head_dim, base);
        let value = rotate(self.value(x).view(), &cos, &sin, head_dim, false);
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::Rope {
                x,
                cos: Rc::new(cos),
                sin: Rc::new(sin),
                head_dim,
            },
            ng,
        ))
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = xv.clone();
        let mut slope = xv.clone();
        Zip::from(&mut value).and(&mut slope).for_each(|v, s| {
            let (y, dy) = gelu_pair(*v);
            *v = y;
            *s = dy;
        });
        let ng = self.ng(x);
        self.push(value, Op::Gelu { x, slope }, ng)
    }

    /// Batched masked multi-head attention with grouped key/value heads.
    ///
    /// `q` is `(nq, n_heads·head_dim)`; `k` and `v` are `(nk, n_kv_heads·head_dim)`.
    /// Logits are scaled by `1/sqrt(head_dim)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        blocks: Rc<Vec<AttnBlock>>,
        heads: HeadConfig,
    ) -> Result<Var> {
        let (nq, qw) = self.shape(q);
        let (nk, kw) = self.shape(k);
        if qw != heads.q_width() || kw != heads.kv_width() || self.shape(v) != (nk, kw) {
            return Err(Error::Shape(format!(
                "attention widths q {qw} k {kw} vs heads {heads:?}"
            )));
        }
        let mut covered = vec![false; nq];
        for b in blocks.iter() {
            if b.mask.rows() != b.q_rows.len() || b.mask.cols() != b.k_rows.len() {
                return Err(Error::Shape("attention block mask shape".into()));
            }
            for &r in &b.q_rows {
                if r >= nq || covered[r] {
                    return Err(Error::Shape(format!("query row {r} out of range or in two blocks")));
                }
                covered[r] = true;
            }
            if b.k_rows.iter().any(|&c| c >= nk) {
                return Err(Error::Shape("key row out of range".into()));
            }
        }
        if let Some(r) = covered.iter().position(|c| !c) {
            return Err(Error::EmptyAttentionRow(r));
        }
        let scale = T::one() / T::of(heads.head_dim as f64).sqrt();
        let hd = heads.head_dim;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::zeros((nq, qw));
        let mut probs = Vec::with_capacity(blocks.len());
        for b in blocks.iter() {
            let qb = qv.select(Axis(0), &b.q_rows);
            let kb = kv.select(Axis(0), &b.k_rows);
            let vb = vv.select(Axis(0), &b.k_rows);
            let mut per_head = Vec::with_capacity(heads.n_heads);
            for h in 0..heads.n_heads {
                let g = heads.kv_head(h);
                let qh = qb.slice(s![.., h * hd..(h + 1) * hd]);
                let kh = kb.slice(s![.., g * hd..(g + 1) * hd]);
                let vh = vb.slice(s![.., g * hd..(g + 1) * hd]);
                let mut p = qh.dot(&kh.t());
                p *= scale;
                masked_softmax_in_place(&mut p, &b.mask)?;
                let oh = p.dot(&vh);
                for (a, &r) in b.q_rows.iter().enumerate() {
                    out.slice_mut(s![r, h * hd..(h + 1) * hd]).assign(&oh.row(a));
                }
                per_head.push(p);
            }
            probs.push(per_head);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                blocks,
                heads,
                scale,
                probs,
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let value = self.value(x).select(Axis(0), idx);
        let ng = self.ng(x);
        self.push(value, Op::Gather { x, idx: idx.to_vec() }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat column mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::Concat(parts.to_vec()), ng)
    }

    /// Output row `k` is the mean of the input rows listed in `groups[k]`.
    pub fn pool_rows(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let d = xv.ncols();
        let mut out = Array2::zeros((groups.len(), d));
        for (k, grp) in groups.iter().enumerate() {
            assert!(!grp.is_empty(), "empty pooling group");
            let mut row = out.row_mut(k);
            for &r in grp {
                row += &xv.row(r);
            }
            row /= T::of(grp.len() as f64);
        }
        let ng = self.ng(x);
        self.push(out, Op::PoolRows { x, groups }, ng)
    }

    /// Mean token cross-entropy; returns a `(1, 1)` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per logits row");
        let mut probs = lv.clone();
        let mut total = T::zero();
        for (mut row, &t) in probs.outer_iter_mut().zip(targets) {
            let target_logit = row[t];
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|a| (a - m).exp());
            let z: T = row.sum();
            total += z.ln() + m - target_logit;
            row /= z;
        }
        let n = T::of(targets.len() as f64);
        let value = Array2::from_elem((1, 1), total / n);
        let ng = self.ng(logits);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Mean squared error over every entry; returns a `(1, 1)` node.
    pub fn mse(&mut self, pred: Var, target: Array2<T>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim(), "mse shape mismatch");
        let n = T::of(pv.len() as f64);
        let total: T = Zip::from(pv)
            .and(&target)
            .fold(T::zero(), |acc, &p, &t| acc + (p - t) * (p - t));
        let value = Array2::from_elem((1, 1), total / n);
        let ng = self.ng(pred);
        self.push(value, Op::Mse { pred, target }, ng)
    }

    /// Scalar value of a `(1, 1)` node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "not a scalar node");
        val[[0, 0]]
    }

    /// Reverse sweep from the `(1, 1)` node `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Array2<T>>], v: Var, f: impl FnOnce(&mut Array2<T>)) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Array2::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("just set"));
    }

    fn backprop_node(&self, node: &Node<T>, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g * *s),
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let (n, d) = xv.dim();
                let dn = T::of(d as f64);
                if self.ng(*gain) {
                    let mut dg = Array2::zeros((1, d));
                    for r in 0..n {
                        let ir = inv_rms[r];
                        Zip::from(dg.row_mut(0))
                            .and(xv.row(r))
                            .and(g.row(r))
                            .for_each(|o, &a, &gr| *o += a * ir * gr);
                    }
                    self.acc(grads, *gain, dg);
                }
                if self.ng(*x) {
                    let mut dx = Array2::zeros((n, d));
                    for r in 0..n {
                        let ir = inv_rms[r];
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        let dot: T = Zip::from(xr)
                            .and(gv.row(0))
                            .and(gr)
                            .fold(T::zero(), |acc, &a, &w, &go| acc + a * w * go);
                        let c = ir * ir * ir * dot / dn;
                        Zip::from(dx.row_mut(r))
                            .and(xr)
                            .and(gv.row(0))
                            .and(gr)
                            .for_each(|o, &a, &w, &go| *o = ir * w * go - a * c);
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Rope {
                x,
                cos,
                sin,
                head_dim,
            } => {
                self.acc(grads, *x, rotate(g.view(), cos, sin, *head_dim, true));
            }
            Op::Gelu { x, slope } => {
                let dx = g * slope;
                self.acc(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                blocks,
                heads,
                scale,
                probs,
            } => {
                let hd = heads.head_dim;
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = Array2::<T>::zeros(qv.dim());
                let mut dk = Array2::<T>::zeros(kv.dim());
                let mut dvv = Array2::<T>::zeros(vv.dim());
                for (b, per_head) in blocks.iter().zip(probs) {
                    let qb = qv.select(Axis(0), &b.q_rows);
                    let kb = kv.select(Axis(0), &b.k_rows);
                    let vb = vv.select(Axis(0), &b.k_rows);
                    let gb = g.select(Axis(0), &b.q_rows);
                    let mut dkb = Array2::<T>::zeros(kb.dim());
                    let mut dvb = Array2::<T>::zeros(vb.dim());
                    for (h, p) in per_head.iter().enumerate() {
                        let gi = heads.kv_head(h);
                        let cols = s![.., h * hd..(h + 1) * hd];
                        let kvcols = s![.., gi * hd..(gi + 1) * hd];
                        let doh = gb.slice(cols);
                        let vh = vb.slice(kvcols);
                        let kh = kb.slice(kvcols);
                        let qh = qb.slice(cols);
                        // dV
                        let mut dvh = dvb.slice_mut(kvcols);
                        dvh += &p.t().dot(&doh);
                        // dP -> dS
                        let mut ds = doh.dot(&vh.t());
                        for (mut dsr, pr) in ds.outer_iter_mut().zip(p.outer_iter()) {
                            let dotp: T = Zip::from(&dsr).and(&pr).fold(T::zero(), |a, &x, &y| a + x * y);
                            Zip::from(&mut dsr).and(&pr).for_each(|o, &pp| *o = pp * (*o - dotp));
                        }
                        ds *= *scale;
                        let dqh = ds.dot(&kh);
                        for (a, &r) in b.q_rows.iter().enumerate() {
                            let mut row = dq.slice_mut(s![r, h * hd..(h + 1) * hd]);
                            row += &dqh.row(a);
                        }
                        let mut dkh = dkb.slice_mut(kvcols);
                        dkh += &ds.t().dot(&qh);
                    }
                    for (a, &r) in b.k_rows.iter().enumerate() {
                        let mut row = dk.row_mut(r);
                        row += &dkb.row(a);
                        let mut row = dvv.row_mut(r);
                        row += &dvb.row(a);
                    }
                }
                self.acc(grads, *q, dq);
                self.acc(grads, *k, dk);
                self.acc(grads, *v, dvv);
            }
            Op::Gather { x, idx } => {
                self.acc_with(grads, *x, |acc| {
                    for (a, &r) in idx.iter().enumerate() {
                        let mut row = acc.row_mut(r);
                        row += &g.row(a);
                    }
                });
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.shape(p).0;
                    if self.ng(p) {
                        self.acc(grads, p, g.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::PoolRows { x, groups } => {
                self.acc_with(grads, *x, |acc| {
                    for (k, grp) in groups.iter().enumerate() {
                        let w = T::one() / T::of(grp.len() as f64);
                        for &r in grp {
                            let mut row = acc.row_mut(r);
                            row.scaled_add(w, &g.row(k));
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = T::of(targets.len() as f64);
                let upstream = g[[0, 0]] / n;
                let mut d = probs.clone();
                for (mut row, &t) in d.outer_iter_mut().zip(targets) {
                    row[t] -= T::one();
                }
                d *= upstream;
                self.acc(grads, *logits, d);
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let n = T::of(pv.len() as f64);
                let c = T::of(2.0) * g[[0, 0]] / n;
                let d = (pv - target) * c;
                self.acc(grads, *pred, d);
            }
        }
    }
}

/// Numerically stable softmax over allowed entries; masked entries become exactly 0.
pub(crate) fn masked_softmax_in_place<T: Scalar>(p: &mut Array2<T>, mask: &AttentionMask) -> Result<()> {
    for (r, mut row) in p.outer_iter_mut().enumerate() {
        let mut m = T::neg_infinity();
        let mut any = false;
        for (c, &v) in row.iter().enumerate() {
            if mask.get(r, c) {
                any = true;
                if v > m {
                    m = v;
                }
            }
        }
        if !any {
            return Err(Error::EmptyAttentionRow(r));
        }
        let mut z = T::zero();
        for (c, v) in row.iter_mut().enumerate() {
            if mask.get(r, c) {
                *v = (*v - m).exp();
                z += *v;
            } else {
                *v = T::zero();
            }
        }
        row /= z;
    }
    Ok(())
}

fn rope_tables<T: Scalar>(positions: &[usize], head_dim: usize, base: f64) -> (Array2<T>, Array2<T>) {
    use std::cell::RefCell;
    use std::collections::HashMap;
    thread_local! {
        // (head_dim, base bits) -> per position, per pair (cos, sin)
        static TABLES: RefCell<HashMap<(usize, u64), Vec<Vec<(f64, f64)>>>> = RefCell::new(HashMap::new());
    }
    let half = head_dim / 2;
    let max_pos = positions.iter().copied().max().unwrap_or(0);
    TABLES.with(|t| {
        let mut t = t.borrow_mut();
        let rows = t.entry((head_dim, base.to_bits())).or_default();
        let freqs: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / head_dim as f64)).collect();
        while rows.len() <= max_pos {
            let p = rows.len() as f64;
            rows.push(freqs.iter().map(|f| (p * f).sin_cos()).map(|(s, c)| (c, s)).collect());
        }
        let mut cos = Array2::zeros((positions.len(), half));
        let mut sin = Array2::zeros((positions.len(), half));
        for (r, &p) in positions.iter().enumerate() {
            for (i, &(c, s)) in rows[p].iter().enumerate() {
                cos[[r, i]] = T::of(c);
                sin[[r, i]] = T::of(s);
            }
        }
        (cos, sin)
    })
}

fn rotate<T: Scalar>(x: ArrayView2<T>, cos: &Array2<T>, sin: &Array2<T>, head_dim: usize, inverse: bool) -> Array2<T> {
    let (n, w) = x.dim();
    let half = head_dim / 2;
    let mut out = Array2::zeros((n, w));
    for r in 0..n {
        for h in 0..w / head_dim {
            for i in 0..half {
                let c = cos[[r, i]];
                let s = if inverse { -sin[[r, i]] } else { sin[[r, i]] };
                let a = x[[r, h * head_dim + 2 * i]];
                let b = x[[r, h * head_dim + 2 * i + 1]];
                out[[r, h * head_dim + 2 * i]] = a * c - b * s;
                out[[r, h * head_dim + 2 * i + 1]] = a * s + b * c;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Value and derivative sharing one tanh.
fn gelu_pair<T: Scalar>(x: T) -> (T, T) {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let z = c * (x + a * x * x * x);
    // tanh through exp is noticeably cheaper than libm tanh and saturates cleanly
    let t = T::one() - T::of(2.0) / ((z + z).exp() + T::one());
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x);
    (y, dy)
}
