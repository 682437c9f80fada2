//! Numeric primitives and the decoder block.
//!
//! The block follows the Gemma2 layer layout:
//!
//! ```text
//! h   = x + post_attn_norm(attention(pre_attn_norm(x)))
//! out = h + post_mlp_norm(mlp(pre_mlp_norm(h)))
//! ```
//!
//! with a gated GeLU MLP by default. Everything that trains goes through
//! [`block_rows`] on a [`Graph`]; the free functions [`softmax_rows`],
//! [`rmsnorm`], [`rope_apply`], [`attention_forward`] and [`block_forward`]
//! are value-level conveniences built on the same code.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::masks::AttentionMask;
use crate::scalar::Scalar;
use crate::tape::{AttnBlock, Graph, HeadConfig, Var};

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MlpKind {
    #[default]
    GeGlu,
    Gelu,
}

/// Weights of one decoder block. Norm gains are stored as `(1, d)` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub heads: HeadConfig,
    pub mlp: MlpKind,
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub w_gate: Option<Array2<T>>,
    pub w_up: Array2<T>,
    pub w_down: Array2<T>,
    pub pre_attn_norm: Array2<T>,
    pub post_attn_norm: Array2<T>,
    pub pre_mlp_norm: Array2<T>,
    pub post_mlp_norm: Array2<T>,
}

pub(crate) fn normal_matrix<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || T::of(dist.sample(rng)))
}

impl<T: Scalar> BlockParams<T> {
    pub fn init(d: usize, hidden: usize, heads: HeadConfig, mlp: MlpKind, rng: &mut impl Rng) -> Result<Self> {
        heads.validate()?;
        if heads.head_dim % 2 != 0 {
            return Err(Error::Shape(format!("head_dim {} must be even for rotary positions", heads.head_dim)));
        }
        let s_in = 1.0 / (d as f64).sqrt();
        let s_attn = 1.0 / (heads.q_width() as f64).sqrt();
        let s_hidden = 1.0 / (hidden as f64).sqrt();
        Ok(BlockParams {
            heads,
            mlp,
            wq: normal_matrix(d, heads.q_width(), s_in, rng),
            wk: normal_matrix(d, heads.kv_width(), s_in, rng),
            wv: normal_matrix(d, heads.kv_width(), s_in, rng),
            wo: normal_matrix(heads.q_width(), d, s_attn, rng),
            w_gate: match mlp {
                MlpKind::GeGlu => Some(normal_matrix(d, hidden, s_in, rng)),
                MlpKind::Gelu => None,
            },
            w_up: normal_matrix(d, hidden, s_in, rng),
            w_down: normal_matrix(hidden, d, s_hidden, rng),
            pre_attn_norm: Array2::ones((1, d)),
            post_attn_norm: Array2::ones((1, d)),
            pre_mlp_norm: Array2::ones((1, d)),
            post_mlp_norm: Array2::ones((1, d)),
        })
    }

    /// All weights and gains set to zero: the block reduces to its residual path.
    pub fn zeros(d: usize, hidden: usize, heads: HeadConfig, mlp: MlpKind) -> Self {
        BlockParams {
            heads,
            mlp,
            wq: Array2::zeros((d, heads.q_width())),
            wk: Array2::zeros((d, heads.kv_width())),
            wv: Array2::zeros((d, heads.kv_width())),
            wo: Array2::zeros((heads.q_width(), d)),
            w_gate: (mlp == MlpKind::GeGlu).then(|| Array2::zeros((d, hidden))),
            w_up: Array2::zeros((d, hidden)),
            w_down: Array2::zeros((hidden, d)),
            pre_attn_norm: Array2::zeros((1, d)),
            post_attn_norm: Array2::zeros((1, d)),
            pre_mlp_norm: Array2::zeros((1, d)),
            post_mlp_norm: Array2::zeros((1, d)),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w_up.ncols()
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Array2<T>)> {
        let mut v = vec![("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)];
        if let Some(w) = &self.w_gate {
            v.push(("w_gate", w));
        }
        v.extend([
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
            ("pre_attn_norm", &self.pre_attn_norm),
            ("post_attn_norm", &self.post_attn_norm),
            ("pre_mlp_norm", &self.pre_mlp_norm),
            ("post_mlp_norm", &self.post_mlp_norm),
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut v = vec![&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo];
        if let Some(w) = &mut self.w_gate {
            v.push(w);
        }
        v.extend([
            &mut self.w_up,
            &mut self.w_down,
            &mut self.pre_attn_norm,
            &mut self.post_attn_norm,
            &mut self.pre_mlp_norm,
            &mut self.post_mlp_norm,
        ]);
        v
    }

    /// Put every tensor on the graph, in `named_tensors` order.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BlockVars {
        let vars: Vec<Var> = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        self.vars_from(&mut vars.into_iter())
    }

    /// Structure already-placed leaves, taken in `named_tensors` order.
    pub fn vars_from(&self, it: &mut impl Iterator<Item = Var>) -> BlockVars {
        let mut next = || it.next().expect("tensor count");
        let wq = next();
        let wk = next();
        let wv = next();
        let wo = next();
        let w_gate = self.w_gate.as_ref().map(|_| next());
        BlockVars {
            heads: self.heads,
            mlp: self.mlp,
            wq,
            wk,
            wv,
            wo,
            w_gate,
            w_up: next(),
            w_down: next(),
            pre_attn_norm: next(),
            post_attn_norm: next(),
            pre_mlp_norm: next(),
            post_mlp_norm: next(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// [`BlockParams`] placed on a graph.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub heads: HeadConfig,
    pub mlp: MlpKind,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w_gate: Option<Var>,
    pub w_up: Var,
    pub w_down: Var,
    pub pre_attn_norm: Var,
    pub post_attn_norm: Var,
    pub pre_mlp_norm: Var,
    pub post_mlp_norm: Var,
}

impl BlockVars {
    /// Same order as [`BlockParams::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.wq, self.wk, self.wv, self.wo];
        v.extend(self.w_gate);
        v.extend([
            self.w_up,
            self.w_down,
            self.pre_attn_norm,
            self.post_attn_norm,
            self.pre_mlp_norm,
            self.post_mlp_norm,
        ]);
        v
    }
}

/// Which rows of a layer input produce outputs, and what each may attend to.
///
/// `blocks[*].q_rows` index into `q_rows`; `blocks[*].k_rows` index rows of
/// the full layer input.
#[derive(Clone, Debug)]
pub struct RowPlan {
    pub q_rows: Vec<usize>,
    pub blocks: Rc<Vec<AttnBlock>>,
}

impl RowPlan {
    /// Every row is a query row, one block with the given square mask.
    pub fn dense(mask: &AttentionMask) -> Self {
        let n = mask.rows();
        RowPlan {
            q_rows: (0..n).collect(),
            blocks: Rc::new(vec![AttnBlock {
                q_rows: (0..n).collect(),
                k_rows: (0..n).collect(),
                mask: mask.clone(),
            }]),
        }
    }

    fn is_identity(&self, n: usize) -> bool {
        self.q_rows.len() == n && self.q_rows.iter().enumerate().all(|(a, &b)| a == b)
    }
}

/// Attention sublayer on already-normalized rows: rotary q/k, grouped heads, output projection.
pub fn attention_rows<T: Scalar>(
    g: &mut Graph<T>,
    p: &BlockVars,
    x: Var,
    positions: &[usize],
    plan: &RowPlan,
) -> Result<Var> {
    let n = g.shape(x).0;
    let hd = p.heads.head_dim;
    let k = g.matmul(x, p.wk);
    let k = g.rope(k, positions, hd, ROPE_BASE)?;
    let v = g.matmul(x, p.wv);
    let (xq, qpos) = if plan.is_identity(n) {
        (x, positions.to_vec())
    } else {
        let qpos = plan.q_rows.iter().map(|&r| positions[r]).collect::<Vec<_>>();
        (g.gather_rows(x, &plan.q_rows), qpos)
    };
    let q = g.matmul(xq, p.wq);
    let q = g.rope(q, &qpos, hd, ROPE_BASE)?;
    let a = g.attention(q, k, v, plan.blocks.clone(), p.heads)?;
    Ok(g.matmul(a, p.wo))
}

/// One decoder block evaluated for `plan.q_rows`; returns `(q_rows.len(), d)`.
pub fn block_rows<T: Scalar>(
    g: &mut Graph<T>,
    p: &BlockVars,
    h: Var,
    positions: &[usize],
    plan: &RowPlan,
) -> Result<Var> {
    let n = g.shape(h).0;
    if positions.len() != n {
        return Err(Error::Shape(format!("{} positions for {n} rows", positions.len())));
    }
    let normed = g.rmsnorm(h, p.pre_attn_norm, RMS_EPS);
    let a = attention_rows(g, p, normed, positions, plan)?;
    let a = g.rmsnorm(a, p.post_attn_norm, RMS_EPS);
    let base = if plan.is_identity(n) { h } else { g.gather_rows(h, &plan.q_rows) };
    let resid = g.add(base, a);
    let m = g.rmsnorm(resid, p.pre_mlp_norm, RMS_EPS);
    let hidden = match (p.mlp, p.w_gate) {
        (MlpKind::GeGlu, Some(wg)) => {
            let gate = g.matmul(m, wg);
            let gate = g.gelu(gate);
            let up = g.matmul(m, p.w_up);
            g.mul(gate, up)
        }
        _ => {
            let up = g.matmul(m, p.w_up);
            g.gelu(up)
        }
    };
    let down = g.matmul(hidden, p.w_down);
    let down = g.rmsnorm(down, p.post_mlp_norm, RMS_EPS);
    Ok(g.add(resid, down))
}

/// Masked, max-shifted softmax per row; masked entries are exactly zero.
pub fn softmax_rows<T: Scalar>(logits: &Array2<T>, mask: &AttentionMask) -> Result<Array2<T>> {
    if logits.dim() != (mask.rows(), mask.cols()) {
        return Err(Error::Shape("logits and mask differ in shape".into()));
    }
    let mut p = logits.clone();
    crate::tape::masked_softmax_in_place(&mut p, mask)?;
    Ok(p)
}

pub fn rmsnorm<T: Scalar>(x: &Array2<T>, gain: &[T]) -> Result<Array2<T>> {
    if gain.len() != x.ncols() {
        return Err(Error::Shape(format!("gain length {} vs width {}", gain.len(), x.ncols())));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gv = g.constant(Array2::from_shape_vec((1, gain.len()), gain.to_vec()).expect("row"));
    let y = g.rmsnorm(xv, gv, RMS_EPS);
    Ok(g.value(y).clone())
}

/// Rotate interleaved pairs of each head by `position · 10000^(-2i/head_dim)`.
pub fn rope_apply<T: Scalar>(x: &Array2<T>, positions: &[usize], head_dim: usize) -> Result<Array2<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.rope(xv, positions, head_dim, ROPE_BASE)?;
    Ok(g.value(y).clone())
}

/// Attention sublayer (no norms) on `x` under a square mask.
pub fn attention_forward<T: Scalar>(
    x: &Array2<T>,
    params: &BlockParams<T>,
    mask: &AttentionMask,
    positions: &[usize],
) -> Result<Array2<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = attention_rows(&mut g, &p, xv, positions, &RowPlan::dense(mask))?;
    Ok(g.value(out).clone())
}

pub fn block_forward<T: Scalar>(
    x: &Array2<T>,
    params: &BlockParams<T>,
    mask: &AttentionMask,
    positions: &[usize],
) -> Result<Array2<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = block_rows(&mut g, &p, xv, positions, &RowPlan::dense(mask))?;
    Ok(g.value(out).clone())
}

/// Settings for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub epsilon: f64,
    /// Entries sampled per tensor (all entries when the tensor is smaller).
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            samples_per_tensor: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with a small floor so that two near-zero gradients agree.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare reverse-mode gradients of `f` against central finite differences.
///
/// `f` receives the graph and one parameter leaf per tensor in `params` and
/// must return a `(1, 1)` loss node.
pub fn grad_check<F>(f: F, params: &[Array2<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    use rand::seq::index::sample;
    use rand::SeedableRng;

    let eval = |ps: &[Array2<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (t, p) in params.iter().enumerate() {
        let analytic = grads.get_or_zero(vars[t], p.dim());
        if analytic.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                detail: format!("tensor {t}"),
            });
        }
        let picks = sample(&mut rng, p.len(), opts.samples_per_tensor.min(p.len()));
        for idx in picks.iter() {
            let (r, c) = (idx / p.ncols(), idx % p.ncols());
            let mut bumped = params.to_vec();
            bumped[t][[r, c]] += opts.epsilon;
            let up = eval(&bumped)?;
            bumped[t][[r, c]] -= 2.0 * opts.epsilon;
            let down = eval(&bumped)?;
            let numeric = (up - down) / (2.0 * opts.epsilon);
            if !numeric.is_finite() {
                return Err(Error::NonFinite {
                    what: "finite difference",
                    detail: format!("tensor {t} entry ({r}, {c})"),
                });
            }
            worst = worst.max(rel_err(analytic[[r, c]], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst,
        checked,
    })
}

/// Rows of `x` selected by `idx`, as an owned matrix.
pub fn select_rows<T: Scalar>(x: &Array2<T>, idx: &[usize]) -> Array2<T> {
    x.select(Axis(0), idx)
}
