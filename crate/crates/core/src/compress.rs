//! Two-phase compression and prediction.
//!
//! The compression pass runs the context (plus gist tokens, when the method
//! has them) through the model and keeps per-layer states at a few slots.
//! The prediction pass sees only those slots and the query. Every method
//! keeps the BOS state as slot 0; [`CompressedCache::n_compressed`] counts
//! the other slots.

use std::fmt;
use std::ops::Range;
use std::rc::Rc;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{block_rows, BlockParams, BlockVars, RowPlan, RMS_EPS};
use crate::masks::{build_gist_mask, build_gistpool_mask, AttentionMask, GistPoolKnobs, Role, SequenceLayout};
use crate::model::{checkpoint, blocks_named, ModelParams, ModelSpec, ModelVars, BOS};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tape::{AttnBlock, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Full,
    NoContext,
    Gist,
    OffsetGist,
    SepGist,
    SepOffsetGist,
    AvgPool,
    GistPool,
}

/// Which layer's states a cache slot holds for prediction layer `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Convention {
    /// Layer-j inputs, as in an ordinary KV cache.
    Inputs,
    /// Layer-j outputs: gist states shifted one layer down.
    Outputs,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Full,
        Method::NoContext,
        Method::Gist,
        Method::OffsetGist,
        Method::SepGist,
        Method::SepOffsetGist,
        Method::AvgPool,
        Method::GistPool,
    ];

    pub fn convention(self) -> Convention {
        match self {
            Method::OffsetGist | Method::SepOffsetGist | Method::GistPool => Convention::Outputs,
            _ => Convention::Inputs,
        }
    }

    /// Methods with a second parameter set for gist rows.
    pub fn separated(self) -> bool {
        matches!(self, Method::SepGist | Method::SepOffsetGist | Method::GistPool)
    }

    pub fn uses_gists(self) -> bool {
        matches!(
            self,
            Method::Gist | Method::OffsetGist | Method::SepGist | Method::SepOffsetGist | Method::GistPool
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "FULL",
            Method::NoContext => "NO_CONTEXT",
            Method::Gist => "GIST",
            Method::OffsetGist => "OFFSET_GIST",
            Method::SepGist => "SEP_GIST",
            Method::SepOffsetGist => "SEP_OFFSET_GIST",
            Method::AvgPool => "AVG_POOL",
            Method::GistPool => "GIST_POOL",
        }
    }

    fn tag(self) -> u8 {
        Method::ALL.iter().position(|&m| m == self).unwrap() as u8
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionConfig {
    pub method: Method,
    pub xi: usize,
    #[serde(default)]
    pub knobs: Option<GistPoolKnobs>,
    #[serde(default)]
    pub single_gist_embedding: bool,
    #[serde(default)]
    pub separate_gist_positions: bool,
    #[serde(default = "default_lr_mult")]
    pub compression_lr_multiplier: f64,
}

fn default_lr_mult() -> f64 {
    10.0
}

impl CompressionConfig {
    /// Defaults: knobs filled in for GistPool, one embedding per gist, shared positions, 10× multiplier.
    pub fn new(method: Method, xi: usize) -> Self {
        CompressionConfig {
            method,
            xi,
            knobs: (method == Method::GistPool).then(GistPoolKnobs::default),
            single_gist_embedding: false,
            separate_gist_positions: false,
            compression_lr_multiplier: default_lr_mult(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.xi == 0 {
            return Err(Error::Config("xi must be >= 1".into()));
        }
        match (self.method == Method::GistPool, &self.knobs) {
            (true, None) => return Err(Error::Config("GIST_POOL needs mask knobs".into())),
            (false, Some(_)) => return Err(Error::Config(format!("{} takes no mask knobs", self.method))),
            (true, Some(k)) => k.validate()?,
            _ => {}
        }
        if !(self.compression_lr_multiplier.is_finite() && self.compression_lr_multiplier > 0.0) {
            return Err(Error::Config("compression_lr_multiplier must be a positive real".into()));
        }
        Ok(())
    }

    /// Number of compressed slots (BOS excluded) for a context of `n` tokens.
    pub fn compressed_slots(&self, n: usize) -> usize {
        match self.method {
            Method::Full => n,
            Method::NoContext => 0,
            _ => n.div_ceil(self.xi),
        }
    }
}

/// Parameter set a row is computed with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamSet {
    Prediction,
    Compression,
}

/// Gist rows of separated methods run under the compression parameters; everything else under the prediction parameters.
pub fn route_parameters(role: Role, config: &CompressionConfig) -> Result<ParamSet> {
    if !config.method.separated() {
        return Err(Error::Config(format!("{} has a single parameter set", config.method)));
    }
    Ok(if role == Role::Gist {
        ParamSet::Compression
    } else {
        ParamSet::Prediction
    })
}

fn route(role: Role, config: &CompressionConfig) -> ParamSet {
    route_parameters(role, config).unwrap_or(ParamSet::Prediction)
}

/// Prediction parameters, optional compression blocks, gist embeddings.
///
/// The compression set holds blocks only: gist rows never read the token
/// embedding or produce logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub spec: ModelSpec,
    pub theta_p: ModelParams<T>,
    pub theta_c: Option<Vec<BlockParams<T>>>,
    pub gist_embed: Array2<T>,
}

impl<T: Scalar> ModelBundle<T> {
    /// `max_context` sizes the gist table (ignored in single-embedding mode).
    pub fn init(spec: &ModelSpec, config: &CompressionConfig, max_context: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let theta_p = ModelParams::init(spec, rng)?;
        Self::from_params(spec, config, max_context, theta_p, rng)
    }

    /// Wrap existing prediction parameters; θ_c starts as a copy of them.
    pub fn from_params(
        spec: &ModelSpec,
        config: &CompressionConfig,
        max_context: usize,
        theta_p: ModelParams<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let rows = if !config.method.uses_gists() {
            0
        } else if config.single_gist_embedding {
            1
        } else {
            max_context.div_ceil(config.xi).max(1)
        };
        let mean = theta_p.embed.sum_axis(Axis(0)) / T::of(theta_p.embed.nrows() as f64);
        let noise = Normal::new(0.0, 0.02).expect("std");
        let mut gist_embed = Array2::zeros((rows, spec.d_model));
        for mut r in gist_embed.outer_iter_mut() {
            for (c, v) in r.iter_mut().enumerate() {
                *v = mean[c] + T::of(noise.sample(rng));
            }
        }
        let theta_c = config.method.separated().then(|| theta_p.blocks.clone());
        Ok(ModelBundle {
            spec: *spec,
            theta_p,
            theta_c,
            gist_embed,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Array2<T>)> {
        let mut v = self.theta_p.named_tensors("p.");
        if let Some(c) = &self.theta_c {
            v.extend(blocks_named(c, "c."));
        }
        v.push(("gist_embed".into(), &self.gist_embed));
        v
    }

    /// Tensors with their learning-rate group, in [`BundleVars::vars`] order.
    pub fn tensors_mut(&mut self) -> Vec<(&mut Array2<T>, ParamSet)> {
        let mut v: Vec<_> = self.theta_p.tensors_mut().into_iter().map(|t| (t, ParamSet::Prediction)).collect();
        if let Some(c) = &mut self.theta_c {
            for b in c {
                v.extend(b.tensors_mut().into_iter().map(|t| (t, ParamSet::Compression)));
            }
        }
        v.push((&mut self.gist_embed, ParamSet::Compression));
        v
    }

    pub fn bind(&self, g: &mut Graph<T>, freeze: Freeze) -> BundleVars {
        let p = self.theta_p.bind(g, !freeze.theta_p);
        let c = self
            .theta_c
            .as_ref()
            .map(|c| c.iter().map(|b| b.bind(g, !freeze.theta_c)).collect());
        let gist = if freeze.gists {
            g.constant(self.gist_embed.clone())
        } else {
            g.param(self.gist_embed.clone())
        };
        BundleVars { p, c, gist }
    }

    /// Structure already-placed leaves, taken in [`BundleVars::vars`] order.
    pub fn vars_from(&self, vars: &[Var]) -> BundleVars {
        let mut it = vars.iter().copied();
        let p = self.theta_p.vars_from(&mut it);
        let c = self.theta_c.as_ref().map(|c| c.iter().map(|b| b.vars_from(&mut it)).collect());
        let gist = it.next().expect("tensor count");
        BundleVars { p, c, gist }
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        checkpoint::encode(&self.named_tensors())
    }

    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        let loaded = checkpoint::decode(bytes)?;
        let names: Vec<String> = self.named_tensors().into_iter().map(|(n, _)| n).collect();
        checkpoint::restore(&names, self.tensors_mut().into_iter().map(|(t, _)| t).collect(), loaded)
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Which parameter groups are held fixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Freeze {
    pub theta_p: bool,
    pub theta_c: bool,
    pub gists: bool,
}

#[derive(Clone, Debug)]
pub struct BundleVars {
    pub p: ModelVars,
    pub c: Option<Vec<BlockVars>>,
    pub gist: Var,
}

impl BundleVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.p.vars();
        if let Some(c) = &self.c {
            for b in c {
                v.extend(b.vars());
            }
        }
        v.push(self.gist);
        v
    }
}

/// Per-layer states at the compressed slots of one context.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedCache<T> {
    pub method: Method,
    pub convention: Convention,
    /// One `(slots, d)` matrix per layer.
    pub layers: Vec<Array2<T>>,
    /// Rotary position of each slot.
    pub positions: Vec<usize>,
    /// Position of the first query token.
    pub query_start: usize,
}

impl<T: Scalar> CompressedCache<T> {
    pub fn n_slots(&self) -> usize {
        self.positions.len()
    }

    /// Slots other than the retained BOS.
    pub fn n_compressed(&self) -> usize {
        self.n_slots() - 1
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(|v| v.is_finite()))
    }

    /// Layout (little endian): `b"GCCH"`, `u16` version, `u8` element width,
    /// `u8` method, `u8` convention, `u32` layers, `u32` slots, `u32` d,
    /// `u64` query start, `u64` per slot position, then layer data row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.layers.first().map_or(0, |l| l.ncols());
        let mut out = Vec::new();
        out.extend_from_slice(b"GCCH");
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.push(T::WIDTH);
        out.push(self.method.tag());
        out.push(match self.convention {
            Convention::Inputs => 0,
            Convention::Outputs => 1,
        });
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_slots() as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(self.query_start as u64).to_le_bytes());
        for &p in &self.positions {
            out.extend_from_slice(&(p as u64).to_le_bytes());
        }
        for l in &self.layers {
            for v in l.iter() {
                out.extend(v.to_le_bytes_vec());
            }
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("cache: {m}"));
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = at.checked_add(n).filter(|&e| e <= b.len()).ok_or_else(|| bad("truncated"))?;
            let s = &b[at..end];
            at = end;
            Ok(s)
        };
        if take(4)? != b"GCCH" {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let width = take(1)?[0];
        if width != T::WIDTH {
            return Err(bad(&format!("element width {width}, expected {}", T::WIDTH)));
        }
        let method = *Method::ALL.get(take(1)?[0] as usize).ok_or_else(|| bad("unknown method"))?;
        let convention = match take(1)?[0] {
            0 => Convention::Inputs,
            1 => Convention::Outputs,
            _ => return Err(bad("unknown convention")),
        };
        let n_layers = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let slots = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let query_start = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut positions = Vec::with_capacity(slots);
        for _ in 0..slots {
            positions.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let w = width as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let raw = take(slots * d * w)?;
            let data = raw.chunks_exact(w).map(T::from_le_slice).collect();
            layers.push(Array2::from_shape_vec((slots, d), data).expect("shape"));
        }
        if at != b.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(CompressedCache {
            method,
            convention,
            layers,
            positions,
            query_start,
        })
    }
}

const CACHE_VERSION: u16 = 1;

/// Hidden states of one compression pass, all rows, every layer boundary.
#[derive(Clone, Debug)]
pub struct PhaseTrace<T> {
    pub roles: Vec<Role>,
    pub positions: Vec<usize>,
    /// `hidden[0]` is the embedded input; `hidden[j + 1]` is the output of layer `j`.
    pub hidden: Vec<Array2<T>>,
}

/// Mean of each run of `xi` consecutive rows; a shorter final run is averaged over its own size.
pub fn avgpool_states<T: Scalar>(h: &Array2<T>, xi: usize) -> Result<Array2<T>> {
    if h.nrows() == 0 {
        return Err(Error::Shape("nothing to pool".into()));
    }
    if xi == 0 {
        return Err(Error::Config("xi must be >= 1".into()));
    }
    let groups: Vec<Vec<usize>> = (0..h.nrows()).collect::<Vec<_>>().chunks(xi).map(|c| c.to_vec()).collect();
    let mut g = Graph::new();
    let x = g.constant(h.clone());
    let y = g.pool_rows(x, groups);
    Ok(g.value(y).clone())
}

// ---------------------------------------------------------------------------
// Compression-pass planning

/// Where one cache slot comes from in the compression pass.
#[derive(Clone, Debug)]
struct SlotSource {
    rows: Vec<usize>,
    from_output: bool,
}

/// Per-context description of the compression sequence.
#[derive(Clone, Debug)]
struct ContextPlan {
    roles: Vec<Role>,
    /// Token ids; gist `k` is `vocab + k` (or `vocab` in single-embedding mode).
    sources: Vec<usize>,
    positions: Vec<usize>,
    mask: AttentionMask,
    slots: Vec<SlotSource>,
    slot_positions: Vec<usize>,
    query_start: usize,
}

fn check_tokens(tokens: &[usize], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&t) => Err(Error::ReservedToken(t)),
        None => Ok(()),
    }
}

fn plan_context(config: &CompressionConfig, spec: &ModelSpec, gist_rows: usize, context: &[usize]) -> Result<ContextPlan> {
    config.validate()?;
    check_tokens(context, spec.vocab)?;
    let n = context.len();
    if n == 0 && config.method != Method::NoContext {
        return Err(Error::Layout("context must hold at least one token".into()));
    }
    let input_slot = |r: usize| SlotSource {
        rows: vec![r],
        from_output: false,
    };
    match config.method {
        Method::NoContext => Ok(ContextPlan {
            roles: vec![Role::Bos],
            sources: vec![BOS],
            positions: vec![0],
            mask: AttentionMask::causal(1),
            slots: vec![input_slot(0)],
            slot_positions: vec![0],
            query_start: 1,
        }),
        Method::Full | Method::AvgPool => {
            let layout = SequenceLayout::plain(n, 0, 0);
            let mut sources = vec![BOS];
            sources.extend_from_slice(context);
            let (slots, slot_positions) = if config.method == Method::Full {
                ((0..=n).map(input_slot).collect(), (0..=n).collect())
            } else {
                let mut slots = vec![input_slot(0)];
                let mut pos = vec![0];
                for w in (1..=n).collect::<Vec<_>>().chunks(config.xi) {
                    slots.push(SlotSource {
                        rows: w.to_vec(),
                        from_output: false,
                    });
                    pos.push(*w.last().unwrap());
                }
                (slots, pos)
            };
            Ok(ContextPlan {
                roles: layout.roles().to_vec(),
                sources,
                positions: (0..=n).collect(),
                mask: AttentionMask::causal(n + 1),
                slots,
                slot_positions,
                query_start: n + 1,
            })
        }
        _ => {
            let (layout, mask) = if config.method == Method::GistPool {
                let l = SequenceLayout::interspersed(n, config.xi, 0, 0)?;
                let m = build_gistpool_mask(&l, config.knobs.as_ref().expect("validated"))?;
                (l, m)
            } else {
                let l = SequenceLayout::appended(n, config.xi, 0, 0)?;
                let m = build_gist_mask(&l)?;
                (l, m)
            };
            let m_gists = layout.n_gists();
            if !config.single_gist_embedding && m_gists > gist_rows {
                return Err(Error::Config(format!(
                    "context of {n} tokens needs {m_gists} gist embeddings, the table has {gist_rows}"
                )));
            }
            let mut sources = Vec::with_capacity(layout.len());
            let mut positions = Vec::with_capacity(layout.len());
            let (mut tok, mut gist_k, mut ctx_counter) = (context.iter(), 0usize, 0usize);
            let mut last_ctx_pos = 0;
            for (i, &r) in layout.roles().iter().enumerate() {
                match r {
                    Role::Gist => {
                        sources.push(spec.vocab + if config.single_gist_embedding { 0 } else { gist_k });
                        positions.push(if config.separate_gist_positions { gist_k } else { i });
                        gist_k += 1;
                    }
                    _ => {
                        sources.push(if r == Role::Bos { BOS } else { *tok.next().unwrap() });
                        let p = if config.separate_gist_positions { ctx_counter } else { i };
                        positions.push(p);
                        if r == Role::Context {
                            last_ctx_pos = p;
                        }
                        ctx_counter += 1;
                    }
                }
            }
            let offset = config.method.convention() == Convention::Outputs;
            let mut slots = vec![input_slot(0)];
            let mut slot_positions = vec![0];
            for gi in layout.indices(Role::Gist) {
                slots.push(SlotSource {
                    rows: vec![gi],
                    from_output: offset,
                });
                slot_positions.push(positions[gi]);
            }
            Ok(ContextPlan {
                roles: layout.roles().to_vec(),
                sources,
                positions,
                mask,
                slots,
                slot_positions,
                query_start: last_ctx_pos + 1,
            })
        }
    }
}

/// Row groups for one routed layer application.
struct LayerPlan {
    groups: Vec<(ParamSet, RowPlan)>,
    /// Row `r` of the result is row `order[r]` of the concatenated group outputs.
    order: Option<Vec<usize>>,
}

/// `wanted[b]` lists local rows of context `b` whose outputs are needed, ascending.
fn layer_plan(plans: &[ContextPlan], offsets: &[usize], wanted: &[Vec<usize>], config: &CompressionConfig) -> LayerPlan {
    let mut groups = Vec::new();
    let mut produced = Vec::new(); // global row of each concatenated output
    for set in [ParamSet::Prediction, ParamSet::Compression] {
        let mut q_rows = Vec::new();
        let mut blocks = Vec::new();
        for (b, p) in plans.iter().enumerate() {
            let local: Vec<usize> = wanted[b].iter().copied().filter(|&r| route(p.roles[r], config) == set).collect();
            if local.is_empty() {
                continue;
            }
            let start = q_rows.len();
            q_rows.extend(local.iter().map(|r| offsets[b] + r));
            let cols: Vec<usize> = (0..p.roles.len()).collect();
            blocks.push(AttnBlock {
                q_rows: (start..q_rows.len()).collect(),
                k_rows: cols.iter().map(|c| offsets[b] + c).collect(),
                mask: p.mask.submatrix(&local, &cols),
            });
        }
        if !q_rows.is_empty() {
            produced.extend(q_rows.iter().copied());
            groups.push((
                set,
                RowPlan {
                    q_rows,
                    blocks: Rc::new(blocks),
                },
            ));
        }
    }
    let target: Vec<usize> = wanted
        .iter()
        .enumerate()
        .flat_map(|(b, w)| w.iter().map(move |r| offsets[b] + r))
        .collect();
    let order = if produced == target {
        None
    } else {
        let mut at = vec![usize::MAX; offsets.last().copied().unwrap_or(0) + plans.last().map_or(0, |p| p.roles.len())];
        for (k, &r) in produced.iter().enumerate() {
            at[r] = k;
        }
        Some(target.iter().map(|&r| at[r]).collect())
    };
    LayerPlan { groups, order }
}

fn apply_layer<T: Scalar>(
    g: &mut Graph<T>,
    vars: &BundleVars,
    j: usize,
    h: Var,
    positions: &[usize],
    plan: &LayerPlan,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(plan.groups.len());
    for (set, rp) in &plan.groups {
        let bv = match set {
            ParamSet::Prediction => &vars.p.blocks[j],
            ParamSet::Compression => &vars.c.as_ref().expect("compression parameters")[j],
        };
        outs.push(block_rows(g, bv, h, positions, rp)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs) };
    Ok(match &plan.order {
        None => cat,
        Some(o) => g.gather_rows(cat, o),
    })
}

/// Cache held on a graph, for a batch of contexts.
struct GraphCache {
    layers: Vec<Var>,
    /// Slot rows of context `b` in every layer var.
    ranges: Vec<Range<usize>>,
    positions: Vec<usize>,
    query_start: Vec<usize>,
}

fn source_table<T: Scalar>(g: &mut Graph<T>, vars: &BundleVars, has_gists: bool) -> Var {
    if has_gists {
        g.concat_rows(&[vars.p.embed, vars.gist])
    } else {
        vars.p.embed
    }
}

fn compress_graph<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    vars: &BundleVars,
    config: &CompressionConfig,
    contexts: &[&[usize]],
    mut trace: Option<&mut Vec<Var>>,
) -> Result<(GraphCache, Vec<ContextPlan>)> {
    let plans = contexts
        .iter()
        .map(|c| plan_context(config, &bundle.spec, bundle.gist_embed.nrows(), c))
        .collect::<Result<Vec<_>>>()?;
    let mut offsets = Vec::with_capacity(plans.len());
    let mut total = 0;
    for p in &plans {
        offsets.push(total);
        total += p.roles.len();
    }
    let sources: Vec<usize> = plans.iter().flat_map(|p| p.sources.iter().copied()).collect();
    let positions: Vec<usize> = plans.iter().flat_map(|p| p.positions.iter().copied()).collect();
    let table = source_table(g, vars, config.method.uses_gists());
    let mut h = g.gather_rows(table, &sources);

    let n_layers = bundle.spec.n_layers;
    let any_output = plans.iter().any(|p| p.slots.iter().any(|s| s.from_output));
    let full_trace = trace.is_some();
    let all_rows: Vec<Vec<usize>> = plans.iter().map(|p| (0..p.roles.len()).collect()).collect();
    let full_plan = layer_plan(&plans, &offsets, &all_rows, config);
    // Rows read by output slots; the last layer only needs these.
    let out_rows: Vec<Vec<usize>> = plans
        .iter()
        .map(|p| {
            let mut r: Vec<usize> = p.slots.iter().filter(|s| s.from_output).flat_map(|s| s.rows.iter().copied()).collect();
            r.sort_unstable();
            r.dedup();
            r
        })
        .collect();
    let last_plan = layer_plan(&plans, &offsets, &out_rows, config);
    let mut out_index = vec![usize::MAX; total];
    let mut k = 0;
    for (b, w) in out_rows.iter().enumerate() {
        for r in w {
            out_index[offsets[b] + r] = k;
            k += 1;
        }
    }

    let steps = if full_trace || any_output { n_layers } else { n_layers - 1 };
    if let Some(t) = trace.as_deref_mut() {
        t.push(h);
    }
    let mut cache_layers = Vec::with_capacity(n_layers);
    let mut slot_groups_in: Vec<Vec<usize>> = Vec::new();
    let mut slot_groups_out: Vec<Vec<usize>> = Vec::new();
    let mut ranges = Vec::with_capacity(plans.len());
    let mut slot_positions = Vec::new();
    for (b, p) in plans.iter().enumerate() {
        let start = slot_groups_in.len();
        for s in &p.slots {
            let rows: Vec<usize> = s.rows.iter().map(|r| offsets[b] + r).collect();
            slot_groups_out.push(if s.from_output { rows.iter().map(|r| total + r).collect() } else { rows.clone() });
            slot_groups_in.push(rows);
        }
        ranges.push(start..slot_groups_in.len());
        slot_positions.extend(p.slot_positions.iter().copied());
    }
    let singletons = slot_groups_in.iter().all(|s| s.len() == 1);
    let select = |g: &mut Graph<T>, x: Var, groups: &[Vec<usize>]| -> Var {
        if singletons {
            let idx: Vec<usize> = groups.iter().map(|s| s[0]).collect();
            g.gather_rows(x, &idx)
        } else {
            g.pool_rows(x, groups.to_vec())
        }
    };
    for j in 0..n_layers {
        if !any_output {
            cache_layers.push(select(g, h, &slot_groups_in));
            if j < steps {
                h = apply_layer(g, vars, j, h, &positions, &full_plan)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(h);
                }
            }
            continue;
        }
        let last = j + 1 == n_layers;
        let next = if last && !full_trace {
            // Compact output: one row per needed row, expanded to a full-height frame below.
            let compact = apply_layer(g, vars, j, h, &positions, &last_plan)?;
            let groups: Vec<Vec<usize>> = slot_groups_out
                .iter()
                .map(|s| s.iter().map(|&r| if r >= total { total + out_index[r - total] } else { r }).collect())
                .collect();
            let both = g.concat_rows(&[h, compact]);
            cache_layers.push(select(g, both, &groups));
            break;
        } else {
            apply_layer(g, vars, j, h, &positions, &full_plan)?
        };
        if let Some(t) = trace.as_deref_mut() {
            t.push(next);
        }
        let both = g.concat_rows(&[h, next]);
        cache_layers.push(select(g, both, &slot_groups_out));
        h = next;
    }
    Ok((
        GraphCache {
            layers: cache_layers,
            ranges,
            positions: slot_positions,
            query_start: plans.iter().map(|p| p.query_start).collect(),
        },
        plans,
    ))
}

/// Prediction pass: logits for every input row of every sample, stacked.
fn predict_graph<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    spec: &ModelSpec,
    cache: &GraphCache,
    inputs: &[&[usize]],
) -> Result<Var> {
    if inputs.len() != cache.ranges.len() {
        return Err(Error::Shape("one input sequence per cached context".into()));
    }
    for t in inputs {
        if t.is_empty() {
            return Err(Error::Shape("empty query".into()));
        }
        check_tokens(t, spec.vocab)?;
    }
    let n_slots = cache.positions.len();
    let tokens: Vec<usize> = inputs.iter().flat_map(|t| t.iter().copied()).collect();
    let mut positions = cache.positions.clone();
    let mut q_rows = Vec::with_capacity(tokens.len());
    let mut blocks = Vec::with_capacity(inputs.len());
    for (b, t) in inputs.iter().enumerate() {
        let start = q_rows.len();
        for k in 0..t.len() {
            positions.push(cache.query_start[b] + k);
            q_rows.push(n_slots + start + k);
        }
        let slots = cache.ranges[b].clone();
        let ns = slots.len();
        let mut k_rows: Vec<usize> = slots.collect();
        k_rows.extend(n_slots + start..n_slots + start + t.len());
        let mut mask = AttentionMask::new(t.len(), ns + t.len());
        for i in 0..t.len() {
            for c in 0..ns + i + 1 {
                mask.set(i, c, true);
            }
        }
        blocks.push(AttnBlock {
            q_rows: (start..start + t.len()).collect(),
            k_rows,
            mask,
        });
    }
    let plan = RowPlan {
        q_rows,
        blocks: Rc::new(blocks),
    };
    let mut hq = g.gather_rows(vars.embed, &tokens);
    for (j, bv) in vars.blocks.iter().enumerate() {
        let all = g.concat_rows(&[cache.layers[j], hq]);
        hq = block_rows(g, bv, all, &positions, &plan)?;
    }
    let normed = g.rmsnorm(hq, vars.final_norm, RMS_EPS);
    Ok(g.matmul(normed, vars.unembed))
}

fn check_convention<T>(config: &CompressionConfig, cache: &CompressedCache<T>) -> Result<()> {
    if cache.method != config.method || cache.convention != config.method.convention() {
        return Err(Error::Convention(format!(
            "cache built by {} ({:?}) used with {}",
            cache.method, cache.convention, config.method
        )));
    }
    Ok(())
}

fn cache_from_graph<T: Scalar>(g: &Graph<T>, gc: &GraphCache, config: &CompressionConfig) -> CompressedCache<T> {
    CompressedCache {
        method: config.method,
        convention: config.method.convention(),
        layers: gc.layers.iter().map(|&v| g.value(v).clone()).collect(),
        positions: gc.positions.clone(),
        query_start: gc.query_start[0],
    }
}

/// Run the compression pass for one context.
pub fn compress_context<T: Scalar>(bundle: &ModelBundle<T>, config: &CompressionConfig, context: &[usize]) -> Result<CompressedCache<T>> {
    let mut g = Graph::new();
    let vars = bundle.bind(&mut g, Freeze { theta_p: true, theta_c: true, gists: true });
    let (gc, _) = compress_graph(&mut g, bundle, &vars, config, &[context], None)?;
    let cache = cache_from_graph(&g, &gc, config);
    if !cache.is_finite() {
        return Err(Error::NonFinite {
            what: "cache",
            detail: format!("{} over {} tokens", config.method, context.len()),
        });
    }
    Ok(cache)
}

/// Compression pass that also returns every layer's hidden states.
pub fn compress_with_trace<T: Scalar>(
    bundle: &ModelBundle<T>,
    config: &CompressionConfig,
    context: &[usize],
) -> Result<(CompressedCache<T>, PhaseTrace<T>)> {
    let mut g = Graph::new();
    let vars = bundle.bind(&mut g, Freeze { theta_p: true, theta_c: true, gists: true });
    let mut hs = Vec::new();
    let (gc, plans) = compress_graph(&mut g, bundle, &vars, config, &[context], Some(&mut hs))?;
    let cache = cache_from_graph(&g, &gc, config);
    let trace = PhaseTrace {
        roles: plans[0].roles.clone(),
        positions: plans[0].positions.clone(),
        hidden: hs.iter().map(|&v| g.value(v).clone()).collect(),
    };
    Ok((cache, trace))
}

/// Logits `(tokens.len(), vocab)` for a query (optionally followed by answer tokens) against a cache.
pub fn predict_with_cache<T: Scalar>(
    bundle: &ModelBundle<T>,
    config: &CompressionConfig,
    cache: &CompressedCache<T>,
    tokens: &[usize],
) -> Result<Array2<T>> {
    check_convention(config, cache)?;
    if cache.layers.len() != bundle.spec.n_layers {
        return Err(Error::Shape(format!("cache has {} layers, model {}", cache.layers.len(), bundle.spec.n_layers)));
    }
    let mut g = Graph::new();
    let vars = bundle.theta_p.bind(&mut g, false);
    let gc = GraphCache {
        layers: cache.layers.iter().map(|l| g.constant(l.clone())).collect(),
        ranges: vec![0..cache.n_slots()],
        positions: cache.positions.clone(),
        query_start: vec![cache.query_start],
    };
    let logits = predict_graph(&mut g, &vars, &bundle.spec, &gc, &[tokens])?;
    Ok(g.value(logits).clone())
}

/// Greedy continuation of `query` for `max_new` tokens.
pub fn greedy_decode<T: Scalar>(
    bundle: &ModelBundle<T>,
    config: &CompressionConfig,
    cache: &CompressedCache<T>,
    query: &[usize],
    max_new: usize,
) -> Result<Vec<usize>> {
    let mut seq = query.to_vec();
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let logits = predict_with_cache(bundle, config, cache, &seq)?;
        let next = argmax(logits.row(logits.nrows() - 1).iter().copied());
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

pub(crate) fn argmax<T: Scalar>(it: impl Iterator<Item = T>) -> usize {
    let mut best = (0, T::neg_infinity());
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// One uncompressed causal pass over `tokens` (BOS is prepended); logits for every row after BOS.
pub fn full_forward_logits<T: Scalar>(params: &ModelParams<T>, spec: &ModelSpec, tokens: &[usize]) -> Result<Array2<T>> {
    check_tokens(tokens, spec.vocab)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let mut seq = vec![BOS];
    seq.extend_from_slice(tokens);
    let n = seq.len();
    let positions: Vec<usize> = (0..n).collect();
    let plan = RowPlan::dense(&AttentionMask::causal(n));
    let mut h = g.gather_rows(vars.embed, &seq);
    for bv in &vars.blocks {
        h = block_rows(&mut g, bv, h, &positions, &plan)?;
    }
    let h = g.gather_rows(h, &(1..n).collect::<Vec<_>>());
    let normed = g.rmsnorm(h, vars.final_norm, RMS_EPS);
    let logits = g.matmul(normed, vars.unembed);
    Ok(g.value(logits).clone())
}

/// A context, a query, and the answer the model should produce after the query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub context: Vec<usize>,
    pub query: Vec<usize>,
    pub answer: Vec<usize>,
}

/// Both phases on one graph; returns the mean answer cross-entropy node.
pub fn episode_loss<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    vars: &BundleVars,
    config: &CompressionConfig,
    batch: &[Episode],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let contexts: Vec<&[usize]> = batch.iter().map(|e| e.context.as_slice()).collect();
    let (gc, _) = compress_graph(g, bundle, vars, config, &contexts, None)?;
    let mut inputs = Vec::with_capacity(batch.len());
    let mut pick = Vec::new();
    let mut targets = Vec::new();
    let mut row = 0;
    for e in batch {
        if e.query.is_empty() || e.answer.is_empty() {
            return Err(Error::Shape("queries and answers must be non-empty".into()));
        }
        let mut t = e.query.clone();
        t.extend_from_slice(&e.answer[..e.answer.len() - 1]);
        let first = row + e.query.len() - 1;
        pick.extend(first..first + e.answer.len());
        targets.extend_from_slice(&e.answer);
        row += t.len();
        inputs.push(t);
    }
    check_tokens(&targets, bundle.spec.vocab)?;
    let refs: Vec<&[usize]> = inputs.iter().map(|t| t.as_slice()).collect();
    let logits = predict_graph(g, &vars.p, &bundle.spec, &gc, &refs)?;
    let picked = g.gather_rows(logits, &pick);
    Ok(g.cross_entropy(picked, &targets))
}

/// Mean answer cross-entropy without updating anything.
pub fn answer_loss<T: Scalar>(bundle: &ModelBundle<T>, config: &CompressionConfig, batch: &[Episode]) -> Result<f64> {
    let mut g = Graph::new();
    let vars = bundle.bind(&mut g, Freeze { theta_p: true, theta_c: true, gists: true });
    let loss = episode_loss(&mut g, bundle, &vars, config, batch)?;
    Ok(g.scalar(loss).as_f64())
}

/// Optimizer state plus frozen groups.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub adam: Adam<T>,
    pub freeze: Freeze,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(lr: f64) -> Self {
        Trainer {
            adam: Adam::new(lr),
            freeze: Freeze::default(),
        }
    }
}

/// One optimizer step on a batch; returns the pre-update loss.
pub fn train_step<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    config: &CompressionConfig,
    trainer: &mut Trainer<T>,
    batch: &[Episode],
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = bundle.bind(&mut g, trainer.freeze);
    let loss = episode_loss(&mut g, bundle, &vars, config, batch)?;
    let value = g.scalar(loss).as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            detail: format!(
                "{} at step {} (batch of {}, lr {})",
                config.method,
                trainer.adam.steps_taken(),
                batch.len(),
                trainer.adam.lr
            ),
        });
    }
    let mut grads = g.backward(loss);
    let gs: Vec<Option<Array2<T>>> = vars.vars().into_iter().map(|v| grads.take(v)).collect();
    let mut params = Vec::new();
    let mut mults = Vec::new();
    for (t, set) in bundle.tensors_mut() {
        params.push(t);
        mults.push(match set {
            ParamSet::Prediction => 1.0,
            ParamSet::Compression => config.compression_lr_multiplier,
        });
    }
    trainer.adam.update(params, gs, &mults)?;
    Ok(value)
}
