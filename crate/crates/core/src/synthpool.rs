//! Can one decoder layer learn to mean-pool its context?
//!
//! Inputs are `n` context vectors followed by `n / ξ` learnable gist
//! embeddings; the layer is trained with MSE so that gist `k` outputs the mean
//! of context window `k`. Only gist rows carry loss, so only gist rows are
//! computed; keys and values still come from every row. There is no BOS row.

use std::fmt;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compress::avgpool_states;
use crate::error::{Error, Result};
use crate::layers::{block_rows, normal_matrix, BlockParams, BlockVars, MlpKind, RowPlan};
use crate::masks::{build_causal, build_pool_mask, AttentionMask, SequenceLayout};
use crate::optim::Adam;
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::tape::{AttnBlock, Graph, HeadConfig, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Source {
    Hypersphere,
    /// Rows of a fixed low-rank-plus-noise table standing in for a learned vocabulary.
    #[serde(alias = "VOCAB")]
    VocabProxy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Regime {
    Fixed,
    Variable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SynthMask {
    /// Plain causal mask.
    Standard,
    /// Gist `k` sees only its own window (and itself).
    Pool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GistPositions {
    Sequential,
    FrozenZero,
}

macro_rules! upper_display {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = serde_json::to_value(self).expect("unit enum");
                f.write_str(s.as_str().expect("string tag"))
            }
        }
    )*};
}
upper_display!(Source, Regime, SynthMask, GistPositions);

/// Query/KV head counts; the head width follows from the fixed total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadSplit {
    pub n_heads: usize,
    pub n_kv_heads: usize,
}

impl fmt::Display for HeadSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.n_heads, self.n_kv_heads)
    }
}

/// One grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCell {
    pub n: usize,
    pub xi: usize,
    pub source: Source,
    pub regime: Regime,
    pub mask: SynthMask,
    pub heads: HeadSplit,
    pub gist_positions: GistPositions,
}

impl SynthCell {
    pub fn validate(&self) -> Result<()> {
        if self.xi == 0 || self.n == 0 || self.n % self.xi != 0 {
            return Err(Error::Config(format!("N={} must be a positive multiple of xi={}", self.n, self.xi)));
        }
        if self.regime == Regime::Variable && (self.n / 2) % self.xi != 0 {
            return Err(Error::Config(format!("N/2={} must be a multiple of xi={}", self.n / 2, self.xi)));
        }
        Ok(())
    }

    pub fn key(&self) -> String {
        format!(
            "N{}-xi{}-{}-{}-{}-h{}x{}-{}",
            self.n, self.xi, self.source, self.regime, self.mask, self.heads.n_heads, self.heads.n_kv_heads, self.gist_positions
        )
    }

    /// Context lengths a sample may have.
    pub fn context_lengths(&self) -> Vec<usize> {
        match self.regime {
            Regime::Fixed => vec![self.n],
            Regime::Variable => (self.n / 2..=self.n).step_by(self.xi).collect(),
        }
    }
}

/// Model and optimization settings shared by every cell of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSettings {
    pub d_model: usize,
    pub hidden: usize,
    /// Query heads × head width.
    pub head_total: usize,
    pub mlp: MlpKind,
    pub steps: usize,
    pub batch: usize,
    pub lrs: Vec<f64>,
    pub seeds: usize,
    pub eval_samples: usize,
    /// Rows in the stand-in vocabulary table.
    pub vocab_rows: usize,
    /// Skip a cell's remaining runs once one reaches accuracy 1 (the maximum cannot change).
    pub stop_at_perfect: bool,
    /// Record the training loss every this many steps.
    pub log_every: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            d_model: 128,
            hidden: 512,
            head_total: 128,
            mlp: MlpKind::GeGlu,
            steps: 10_000,
            batch: 64,
            lrs: vec![1e-3, 1e-4, 1e-5],
            seeds: 3,
            eval_samples: 32,
            vocab_rows: 4096,
            stop_at_perfect: true,
            log_every: 100,
        }
    }
}

impl SynthSettings {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.hidden == 0 || self.batch == 0 || self.seeds == 0 || self.eval_samples == 0 {
            return Err(Error::Config("synth settings must be positive".into()));
        }
        if self.lrs.is_empty() || self.lrs.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Config("lrs must be a non-empty list of positive reals".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn heads(&self, split: HeadSplit) -> Result<HeadConfig> {
        HeadConfig::with_total(split.n_heads, split.n_kv_heads, self.head_total)
    }
}

/// Full configuration of one training run family.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub cell: SynthCell,
    pub settings: SynthSettings,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample<T> {
    /// `(n_context, d)`.
    pub context: Array2<T>,
    /// `(n_context / ξ, d)`: window means.
    pub targets: Array2<T>,
}

impl<T> SynthSample<T> {
    pub fn n_context(&self) -> usize {
        self.context.nrows()
    }
    pub fn n_gists(&self) -> usize {
        self.targets.nrows()
    }
}

/// Window means; the same computation the AvgPool cache uses.
pub fn pooled_targets<T: Scalar>(context: &Array2<T>, xi: usize) -> Result<Array2<T>> {
    avgpool_states(context, xi)
}

/// Fixed embedding table of the stand-in vocabulary: rank d/4 Gaussian structure plus isotropic noise, rows of norm ≈ 1.
pub fn vocab_proxy<T: Scalar>(rows: usize, d: usize, rng: &mut impl Rng) -> Array2<T> {
    let r = (d / 4).max(1);
    let u: Array2<f64> = normal_matrix(rows, r, 1.0, rng);
    let w: Array2<f64> = normal_matrix(r, d, 1.0 / (r as f64).sqrt(), rng);
    let noise: Array2<f64> = normal_matrix(rows, d, 0.1, rng);
    let table = (u.dot(&w) + noise) / (d as f64).sqrt();
    table.mapv(T::of)
}

/// Data source for one run: owns the stand-in vocabulary when needed.
#[derive(Clone, Debug)]
pub struct SampleSource<T> {
    cell: SynthCell,
    d: usize,
    vocab: Option<Array2<T>>,
}

impl<T: Scalar> SampleSource<T> {
    pub fn new(cell: &SynthCell, settings: &SynthSettings, seed: u64) -> Result<Self> {
        cell.validate()?;
        let vocab = match cell.source {
            Source::Hypersphere => None,
            Source::VocabProxy => Some(vocab_proxy(settings.vocab_rows, settings.d_model, &mut substream(seed, "vocab"))),
        };
        Ok(SampleSource {
            cell: *cell,
            d: settings.d_model,
            vocab,
        })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<SynthSample<T>> {
        let lengths = self.cell.context_lengths();
        let n = lengths[rng.random_range(0..lengths.len())];
        let context = match &self.vocab {
            None => {
                let mut c = Array2::<f64>::zeros((n, self.d));
                for mut row in c.outer_iter_mut() {
                    loop {
                        row.mapv_inplace(|_| StandardNormal.sample(rng));
                        let norm = row.dot(&row).sqrt();
                        if norm > 1e-12 {
                            row /= norm;
                            break;
                        }
                    }
                }
                c.mapv(T::of)
            }
            Some(v) => {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..v.nrows())).collect();
                v.select(Axis(0), &idx)
            }
        };
        let targets = pooled_targets(&context, self.cell.xi)?;
        Ok(SynthSample { context, targets })
    }
}

/// One sample drawn from the stream named by `seed`.
pub fn gen_sample<T: Scalar>(config: &SynthConfig, seed: u64) -> Result<SynthSample<T>> {
    let src = SampleSource::new(&config.cell, &config.settings, seed)?;
    src.sample(&mut substream(seed, "sample"))
}

/// Fraction of rows of `pred` whose nearest row of `truth` (Euclidean, first on ties) has the same index.
pub fn nn_accuracy<T: Scalar>(pred: &Array2<T>, truth: &Array2<T>) -> Result<f64> {
    Ok(nn_hits(pred, truth)? as f64 / pred.nrows().max(1) as f64)
}

fn nn_hits<T: Scalar>(pred: &Array2<T>, truth: &Array2<T>) -> Result<usize> {
    if pred.dim() != truth.dim() {
        return Err(Error::Shape(format!("{:?} predictions vs {:?} targets", pred.dim(), truth.dim())));
    }
    let mut hits = 0;
    for (i, p) in pred.outer_iter().enumerate() {
        let mut best = (usize::MAX, f64::INFINITY);
        for (j, t) in truth.outer_iter().enumerate() {
            let d: f64 = p.iter().zip(t.iter()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        hits += usize::from(best.0 == i);
    }
    Ok(hits)
}

/// Mask over `[context; gists]` with no BOS row.
pub fn synth_mask(mask: SynthMask, n_context: usize, xi: usize) -> Result<AttentionMask> {
    let layout = SequenceLayout::appended(n_context, xi, 0, 0)?;
    let full = match mask {
        SynthMask::Standard => build_causal(&layout),
        SynthMask::Pool => build_pool_mask(&layout)?,
    };
    let keep: Vec<usize> = (1..layout.len()).collect();
    Ok(full.submatrix(&keep, &keep))
}

/// A layer and its gist embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthModel<T> {
    pub block: BlockParams<T>,
    /// One row per gist index, enough for the longest context.
    pub gists: Array2<T>,
}

impl<T: Scalar> SynthModel<T> {
    pub fn init(config: &SynthConfig, rng: &mut impl Rng) -> Result<Self> {
        let s = &config.settings;
        let heads = s.heads(config.cell.heads)?;
        let block = BlockParams::init(s.d_model, s.hidden, heads, s.mlp, rng)?;
        let noise = Normal::new(0.0, 0.02).expect("std");
        let gists = Array2::from_shape_simple_fn((config.cell.n / config.cell.xi, s.d_model), || T::of(noise.sample(rng)));
        Ok(SynthModel { block, gists })
    }

    /// MSE against the targets and the gist-row outputs of each sample, without training.
    pub fn forward(&self, cell: &SynthCell, batch: &[SynthSample<T>]) -> Result<(f64, Vec<Array2<T>>)> {
        let mut g = Graph::new();
        let bv = self.block.bind(&mut g, false);
        let gv = g.constant(self.gists.clone());
        let (loss, out) = synth_loss(&mut MaskCache::default(), &mut g, &bv, gv, self.gists.nrows(), cell, batch)?;
        let ov = g.value(out);
        let mut per = Vec::with_capacity(batch.len());
        let mut at = 0;
        for s in batch {
            per.push(ov.slice(s![at..at + s.n_gists(), ..]).to_owned());
            at += s.n_gists();
        }
        Ok((g.scalar(loss).as_f64(), per))
    }
}

/// Result of one (seed, lr) training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: SynthCell,
    pub seed: usize,
    pub lr: f64,
    pub steps: usize,
    /// `(step, loss)` every `log_every` steps.
    pub losses: Vec<(usize, f64)>,
    pub accuracy: Option<f64>,
    pub failure: Option<String>,
}

/// Evaluation accuracy of a model on `n` fresh samples from `rng`.
pub fn evaluate<T: Scalar>(model: &SynthModel<T>, src: &SampleSource<T>, cell: &SynthCell, n: usize, rng: &mut impl Rng) -> Result<f64> {
    let mut hits = 0;
    let mut total = 0;
    for _ in 0..n {
        let s = src.sample(rng)?;
        let (_, out) = model.forward(cell, std::slice::from_ref(&s))?;
        hits += nn_hits(&out[0], &s.targets)?;
        total += s.n_gists();
    }
    Ok(hits as f64 / total as f64)
}

/// Train one layer; the run seed names every random stream it uses.
pub fn train_layer<T: Scalar>(config: &SynthConfig, lr: f64, seed: u64) -> Result<(SynthModel<T>, RunRecord)> {
    config.cell.validate()?;
    config.settings.validate()?;
    let s = &config.settings;
    let mut model = SynthModel::<T>::init(config, &mut substream(seed, "init"))?;
    let src = SampleSource::<T>::new(&config.cell, s, seed)?;
    let mut data = substream(seed, "train");
    let mut adam = Adam::new(lr);
    let mut masks = MaskCache::default();
    let mut record = RunRecord {
        cell: config.cell,
        seed: 0,
        lr,
        steps: s.steps,
        losses: Vec::new(),
        accuracy: None,
        failure: None,
    };
    for step in 0..s.steps {
        let batch = (0..s.batch).map(|_| src.sample(&mut data)).collect::<Result<Vec<_>>>()?;
        let loss = match train_step(&mut masks, &mut model, &config.cell, &batch, &mut adam) {
            Ok(l) => l,
            Err(e) => {
                record.failure = Some(format!("step {step}: {e}"));
                return Ok((model, record));
            }
        };
        if !loss.is_finite() || loss > 1e6 {
            record.failure = Some(format!("diverged at step {step}: loss {loss}"));
            return Ok((model, record));
        }
        if step % s.log_every == 0 || step + 1 == s.steps {
            record.losses.push((step, loss));
        }
    }
    record.accuracy = Some(evaluate(&model, &src, &config.cell, s.eval_samples, &mut substream(seed, "eval"))?);
    Ok((model, record))
}

fn train_step<T: Scalar>(masks: &mut MaskCache, model: &mut SynthModel<T>, cell: &SynthCell, batch: &[SynthSample<T>], adam: &mut Adam<T>) -> Result<f64> {
    let mut g = Graph::new();
    let bv = model.block.bind(&mut g, true);
    let gv = g.param(model.gists.clone());
    let (loss, _) = synth_loss(masks, &mut g, &bv, gv, model.gists.nrows(), cell, batch)?;
    let value = g.scalar(loss).as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            detail: cell.key(),
        });
    }
    let mut grads = g.backward(loss);
    let mut vars = bv.vars();
    vars.push(gv);
    let gs: Vec<_> = vars.into_iter().map(|v| grads.take(v)).collect();
    let mut params = model.block.tensors_mut();
    params.push(&mut model.gists);
    let mult = vec![1.0; params.len()];
    adam.update(params, gs, &mult)?;
    Ok(value)
}

/// Gist-row masks of the standard layout, one per context length.
#[derive(Default)]
struct MaskCache(std::collections::HashMap<(usize, usize), AttentionMask>);

impl MaskCache {
    fn gist_rows(&mut self, n: usize, xi: usize) -> Result<&AttentionMask> {
        if !self.0.contains_key(&(n, xi)) {
            let m = n / xi;
            let mask = synth_mask(SynthMask::Standard, n, xi)?;
            let cols: Vec<usize> = (0..n + m).collect();
            self.0.insert((n, xi), mask.submatrix(&(n..n + m).collect::<Vec<_>>(), &cols));
        }
        Ok(&self.0[&(n, xi)])
    }
}

/// MSE node and gist-row outputs for `batch`, with the block and gist table already on `g`.
pub fn synth_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    bv: &BlockVars,
    gists: Var,
    cell: &SynthCell,
    batch: &[SynthSample<T>],
) -> Result<(Var, Var)> {
    let rows = g.shape(gists).0;
    synth_loss(&mut MaskCache::default(), g, bv, gists, rows, cell, batch)
}

fn synth_loss<T: Scalar>(
    masks: &mut MaskCache,
    g: &mut Graph<T>,
    bv: &BlockVars,
    gv: Var,
    table_rows: usize,
    cell: &SynthCell,
    batch: &[SynthSample<T>],
) -> Result<(Var, Var)> {
    let views: Vec<_> = batch.iter().map(|s| s.context.view()).collect();
    let ctx = g.constant(ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?);
    let n_ctx_total: usize = batch.iter().map(|s| s.n_context()).sum();
    let table = g.concat_rows(&[ctx, gv]);
    let mut rows = Vec::new();
    let mut positions = Vec::new();
    let mut q_rows = Vec::new();
    let mut blocks = Vec::new();
    let mut ctx_at = 0;
    for s in batch {
        let (n, m) = (s.n_context(), s.n_gists());
        if m > table_rows {
            return Err(Error::Shape(format!("{m} gists, table has {table_rows}")));
        }
        let start = rows.len();
        rows.extend(ctx_at..ctx_at + n);
        rows.extend((0..m).map(|k| n_ctx_total + k));
        positions.extend(0..n);
        positions.extend((0..m).map(|k| match cell.gist_positions {
            GistPositions::Sequential => n + k,
            GistPositions::FrozenZero => 0,
        }));
        let q_start = q_rows.len();
        q_rows.extend(start + n..start + n + m);
        match cell.mask {
            // One small block per gist: its window and itself. Same result as
            // the dense pool mask without scoring the masked-out columns.
            SynthMask::Pool => {
                for k in 0..m {
                    let mut k_rows: Vec<usize> = (start + k * cell.xi..start + (k + 1) * cell.xi).collect();
                    k_rows.push(start + n + k);
                    blocks.push(AttnBlock {
                        q_rows: vec![q_start + k],
                        mask: AttentionMask::full(1, k_rows.len()),
                        k_rows,
                    });
                }
            }
            SynthMask::Standard => {
                blocks.push(AttnBlock {
                    q_rows: (q_start..q_start + m).collect(),
                    k_rows: (start..start + n + m).collect(),
                    mask: masks.gist_rows(n, cell.xi)?.clone(),
                });
            }
        }
        ctx_at += n;
    }
    let h = g.gather_rows(table, &rows);
    let plan = RowPlan {
        q_rows,
        blocks: Rc::new(blocks),
    };
    let out = block_rows(g, bv, h, &positions, &plan)?;
    let views: Vec<_> = batch.iter().map(|s| s.targets.view()).collect();
    let targets = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((g.mse(out, targets), out))
}

/// Best-over-runs summary of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: SynthCell,
    pub best_accuracy: Option<f64>,
    pub best_lr: Option<f64>,
    pub steps: usize,
    pub runs: Vec<RunRecord>,
}

/// Seed of run `s` in `cell`. Mask and gist-position choice are left out so
/// matched cells see the same data and initialization.
pub fn run_seed(global_seed: u64, cell: &SynthCell, s: usize) -> u64 {
    let name = format!(
        "synthpool/N{}/xi{}/{}/{}/h{}x{}/seed{s}",
        cell.n, cell.xi, cell.source, cell.regime, cell.heads.n_heads, cell.heads.n_kv_heads
    );
    crate::rng::subseed(global_seed, &name)
}

/// Every (lr, seed) run of a cell, in order; failures are recorded and skipped.
pub fn run_cell<T: Scalar>(cell: &SynthCell, settings: &SynthSettings, global_seed: u64) -> CellResult {
    let config = SynthConfig {
        cell: *cell,
        settings: settings.clone(),
    };
    let mut runs = Vec::new();
    'outer: for &lr in &settings.lrs {
        for s in 0..settings.seeds {
            let mut rec = match train_layer::<T>(&config, lr, run_seed(global_seed, cell, s)) {
                Ok((_, r)) => r,
                Err(e) => RunRecord {
                    cell: *cell,
                    seed: s,
                    lr,
                    steps: settings.steps,
                    losses: Vec::new(),
                    accuracy: None,
                    failure: Some(e.to_string()),
                },
            };
            rec.seed = s;
            let perfect = rec.accuracy == Some(1.0);
            runs.push(rec);
            if perfect && settings.stop_at_perfect {
                break 'outer;
            }
        }
    }
    let mut best: Option<(f64, f64)> = None;
    for r in &runs {
        if let Some(a) = r.accuracy {
            if best.is_none_or(|(b, _)| a > b) {
                best = Some((a, r.lr));
            }
        }
    }
    CellResult {
        cell: *cell,
        best_accuracy: best.map(|b| b.0),
        best_lr: best.map(|b| b.1),
        steps: settings.steps,
        runs,
    }
}

/// Cells run in parallel; results come back in input order.
pub fn run_grid<T: Scalar>(cells: &[SynthCell], settings: &SynthSettings, global_seed: u64) -> Vec<CellResult> {
    cells.par_iter().map(|c| run_cell::<T>(c, settings, global_seed)).collect()
}

pub const GRID_COLUMNS: [&str; 10] = [
    "N",
    "xi",
    "source",
    "regime",
    "mask",
    "heads",
    "gist_positions",
    "best_accuracy",
    "best_lr",
    "steps",
];

/// One row per cell.
pub fn grid_csv(results: &[CellResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(GRID_COLUMNS).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for r in results {
        let c = &r.cell;
        w.write_record([
            c.n.to_string(),
            c.xi.to_string(),
            c.source.to_string(),
            c.regime.to_string(),
            c.mask.to_string(),
            c.heads.to_string(),
            c.gist_positions.to_string(),
            opt(r.best_accuracy),
            opt(r.best_lr),
            r.steps.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}
