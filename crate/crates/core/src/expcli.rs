//! Experiment manifests, the `gistlab` command line, result files and acceptance checks.
//!
//! A manifest is one TOML file: top-level `kind`, `seed`, optional `out_dir`, `jobs` and
//! `version`, plus one section named after the kind (`synthpool`, `recall`, `constructions`,
//! `grad_suite`). Values resolve in this order, later winning: built-in defaults, the file,
//! `--set path=value` overrides, then the dedicated `--seed`, `--out` and `--jobs` flags.
//! Without `out_dir` or `--out`, results go to `$GISTLAB_OUT/<manifest stem>` (or
//! `gistlab-out/<manifest stem>` when the variable is unset).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compress::{CompressionConfig, Method};
use crate::constructions::{self as cons, ConstructionMatrices, GapCurveOptions, GapPoint, Placement, PlacementOptions};
use crate::error::{Error, Result};
use crate::gradsuite::{run_grad_suite, GradCase, GradSuiteOptions};
use crate::masks::{
    build_causal, build_gist_mask, build_gistpool_mask, build_pool_mask, validate_mask, AttentionMask, GistPoolKnobs,
    MaskMethod, SequenceLayout,
};
use crate::recall::{self, RecallRecord, RecallTask, RunSpec};
use crate::rng::subseed;
use crate::synthpool::{self, CellResult, GistPositions, HeadSplit, Regime, Source, SynthCell, SynthMask, SynthSettings};
use rayon::prelude::*;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const OUT_ENV: &str = "GISTLAB_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    SynthpoolGrid,
    RecallCompare,
    Constructions,
    GradSuite,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Cartesian product of cell axes; any empty axis gives no cells.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridAxes {
    pub n: Vec<usize>,
    pub xi: Vec<usize>,
    pub source: Vec<Source>,
    pub regime: Vec<Regime>,
    pub mask: Vec<SynthMask>,
    pub heads: Vec<HeadSplit>,
    pub gist_positions: Vec<GistPositions>,
}

impl GridAxes {
    pub fn cells(&self) -> Vec<SynthCell> {
        let mut out = Vec::new();
        for &n in &self.n {
            for &xi in &self.xi {
                for &source in &self.source {
                    for &regime in &self.regime {
                        for &mask in &self.mask {
                            for &heads in &self.heads {
                                for &gist_positions in &self.gist_positions {
                                    out.push(SynthCell {
                                        n,
                                        xi,
                                        source,
                                        regime,
                                        mask,
                                        heads,
                                        gist_positions,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthGridConfig {
    pub settings: SynthSettings,
    pub grid: GridAxes,
    /// Extra cells appended after the grid product.
    pub cells: Vec<SynthCell>,
    pub precision: Precision,
}

impl SynthGridConfig {
    pub fn all_cells(&self) -> Vec<SynthCell> {
        let mut c = self.grid.cells();
        c.extend(self.cells.iter().copied());
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecallConfig {
    pub task: RecallTask,
    pub n_layers: usize,
    pub d_model: usize,
    /// `None` means `4 * d_model`.
    pub hidden: Option<usize>,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub methods: Vec<Method>,
    /// Rates for methods that compress; FULL and NO_CONTEXT run once.
    pub xis: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub cosine_decay: bool,
    /// Rate multiplier for compression-only parameters; `None` keeps the method default.
    pub compression_lr_multiplier: Option<f64>,
    pub seeds: usize,
    pub precision: Precision,
}

impl Default for RecallConfig {
    fn default() -> Self {
        RecallConfig {
            task: RecallTask::default(),
            n_layers: 2,
            d_model: 64,
            hidden: None,
            n_heads: 4,
            n_kv_heads: 2,
            methods: Method::ALL.to_vec(),
            xis: vec![1, 2, 4],
            steps: 3000,
            batch: 32,
            lr: 1e-3,
            cosine_decay: false,
            compression_lr_multiplier: None,
            seeds: 3,
            precision: Precision::F64,
        }
    }
}

impl RecallConfig {
    pub fn specs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &m in &self.methods {
            let rates: Vec<usize> = if matches!(m, Method::Full | Method::NoContext) {
                vec![1]
            } else {
                self.xis.clone()
            };
            for xi in rates {
                let mut cc = CompressionConfig::new(m, xi);
                if let Some(x) = self.compression_lr_multiplier {
                    cc.compression_lr_multiplier = x;
                }
                let mut s = RunSpec::new(self.n_layers, self.d_model, cc);
                s.cosine_decay = self.cosine_decay;
                s.hidden = self.hidden.unwrap_or(4 * self.d_model);
                s.n_heads = self.n_heads;
                s.n_kv_heads = self.n_kv_heads;
                s.steps = self.steps;
                s.batch = self.batch;
                s.lr = self.lr;
                out.push(s);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CopyConfig {
    pub d: usize,
    pub l: usize,
    pub weight: f64,
    pub curve_ls: Vec<usize>,
}

impl Default for CopyConfig {
    fn default() -> Self {
        CopyConfig {
            d: 4,
            l: 8,
            weight: 0.999,
            curve_ls: vec![2, 4, 8, 16, 32, 64, 128],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub d: usize,
    pub l: usize,
    pub xi: usize,
    pub eps_same: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            d: 8,
            l: 32,
            xi: 4,
            eps_same: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapConfig {
    pub d: usize,
    pub k_norm: f64,
    pub q_norm: f64,
    pub x_norm: f64,
    pub ls: Vec<usize>,
    pub ascent_steps: usize,
    pub starts: usize,
    pub delta: f64,
    pub iterations: usize,
    pub restarts: usize,
}

impl Default for GapConfig {
    fn default() -> Self {
        let u = GapCurveOptions::unit(8, 0);
        GapConfig {
            d: 8,
            k_norm: 1.0,
            q_norm: 1.0,
            x_norm: 1.0,
            ls: u.ls,
            ascent_steps: u.ascent_steps,
            starts: u.starts,
            delta: 5.0,
            iterations: u.placement.iterations,
            restarts: u.placement.restarts,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstructionsConfig {
    pub copy: CopyConfig,
    pub pool: PoolConfig,
    pub gap: GapConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: Kind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthpool: Option<SynthGridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<RecallConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constructions: Option<ConstructionsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_suite: Option<GradSuiteOptions>,
}

fn field_err(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

impl Manifest {
    pub fn new(kind: Kind) -> Self {
        Manifest {
            kind,
            seed: 0,
            out_dir: None,
            jobs: None,
            version: None,
            synthpool: None,
            recall: None,
            constructions: None,
            grad_suite: None,
        }
    }

    /// Parse TOML text; errors carry the line, column and field reported by the parser.
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    /// Parse, apply `path=value` overrides, then validate.
    pub fn from_toml_with(text: &str, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Self::from_toml(text);
        }
        // parse once untouched so syntax errors keep their line numbers
        let _: Manifest = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for s in sets {
            apply_set(&mut table, s)?;
        }
        let m: Manifest = table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("after --set: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let sections = [
            ("synthpool", self.synthpool.is_some(), Kind::SynthpoolGrid),
            ("recall", self.recall.is_some(), Kind::RecallCompare),
            ("constructions", self.constructions.is_some(), Kind::Constructions),
            ("grad_suite", self.grad_suite.is_some(), Kind::GradSuite),
        ];
        for (name, present, owner) in sections {
            if present && owner != self.kind {
                return Err(field_err(name, format!("section does not apply to kind {:?}", self.kind)));
            }
        }
        if self.jobs == Some(0) {
            return Err(field_err("jobs", "must be at least 1"));
        }
        match self.kind {
            Kind::SynthpoolGrid => {
                let c = self.synthpool.clone().unwrap_or_default();
                c.settings.validate().map_err(|e| field_err("synthpool.settings", e))?;
                for (i, cell) in c.all_cells().iter().enumerate() {
                    cell.validate().map_err(|e| field_err(&format!("synthpool cell {i} ({})", cell.key()), e))?;
                    c.settings.heads(cell.heads).map_err(|e| field_err("synthpool.grid.heads", e))?;
                }
            }
            Kind::RecallCompare => {
                let c = self.recall.clone().unwrap_or_default();
                c.task.validate().map_err(|e| field_err("recall.task", e))?;
                if c.seeds == 0 {
                    return Err(field_err("recall.seeds", "must be at least 1"));
                }
                for s in c.specs() {
                    s.validate(&c.task).map_err(|e| field_err("recall", e))?;
                }
            }
            Kind::Constructions => {
                let c = self.constructions.clone().unwrap_or_default();
                if c.copy.d < 2 || c.copy.l < 2 || c.copy.curve_ls.iter().any(|&l| l < 2) {
                    return Err(field_err("constructions.copy", "d and every l must be at least 2"));
                }
                if !(c.copy.weight > 0.0 && c.copy.weight < 1.0) {
                    return Err(field_err("constructions.copy.weight", "must lie in (0, 1)"));
                }
                if c.pool.xi == 0 || c.pool.l % c.pool.xi != 0 || c.pool.d < 2 {
                    return Err(field_err("constructions.pool", "xi must divide l and d must be at least 2"));
                }
                if c.gap.d < 2 || c.gap.ls.iter().any(|&l| l < 2) || c.gap.starts == 0 {
                    return Err(field_err("constructions.gap", "d and every l must be at least 2, starts at least 1"));
                }
            }
            Kind::GradSuite => {
                let g = self.grad_suite.unwrap_or_default();
                if !(g.epsilon > 0.0 && g.tolerance > 0.0) {
                    return Err(field_err("grad_suite", "epsilon and tolerance must be positive"));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring where results go and how many workers run.
    pub fn config_hash(&self) -> String {
        let mut m = self.clone();
        m.out_dir = None;
        m.jobs = None;
        let json = serde_json::to_string(&m).expect("manifest serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects path=value, got {assignment:?}")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set {path}: `{k}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Files of one run; every write lands inside `root` via temp file and rename.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(OutDir { root: root.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(Error::Config(format!("output name {name:?} must be a plain file name")));
        }
        write_atomic(&self.root.join(name), bytes)
    }
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(path.to_path_buf())
}

/// One acceptance criterion evaluated on results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(criterion: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            criterion: criterion.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Hypersphere cells at N = 128: pool cells reach 0.90, and standard variable-length cells
/// trail their pool twin by at least 0.30. Other cells are reported but not judged.
pub fn synth_checks(results: &[CellResult]) -> Vec<Check> {
    let mut out = Vec::new();
    for r in results {
        let c = &r.cell;
        if c.source != Source::Hypersphere || c.n != 128 {
            continue;
        }
        if c.mask == SynthMask::Pool {
            let ok = r.best_accuracy.is_some_and(|a| a >= 0.90);
            out.push(Check::new(
                format!("pool-mask {}", c.key()),
                ok,
                format!("best nn accuracy {} (need >= 0.90)", fmt_opt(r.best_accuracy)),
            ));
        }
        if c.mask == SynthMask::Standard && c.regime == Regime::Variable {
            let twin = results.iter().find(|p| {
                p.cell
                    == SynthCell {
                        mask: SynthMask::Pool,
                        ..*c
                    }
            });
            let (ok, detail) = match (twin.and_then(|t| t.best_accuracy), r.best_accuracy) {
                (Some(p), Some(s)) => (p - s >= 0.30, format!("pool {p:.4} - standard {s:.4} = {:.4} (need >= 0.30)", p - s)),
                (None, _) => (false, "no matched pool-mask result".to_string()),
                (_, None) => (false, "standard cell produced no accuracy".to_string()),
            };
            out.push(Check::new(format!("standard-mask gap {}", c.key()), ok, detail));
        }
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("none".into(), |x| format!("{x:.4}"))
}

/// FULL reaches 0.95; NO_CONTEXT stays within 3 sigma of chance; GIST_POOL at xi = 1 keeps
/// its answer loss at most 10% above FULL's (being lower is fine).
pub fn recall_checks(records: &[RecallRecord], task: &RecallTask) -> Vec<Check> {
    let summary = recall::summarize(records);
    let find = |m: Method, xi: usize| summary.iter().find(|s| s.method == m && s.xi == xi);
    let mut out = Vec::new();
    let full = find(Method::Full, 1);
    if let Some(f) = full {
        let ok = f.failures == 0 && f.mean_exact_match.is_some_and(|a| a >= 0.95);
        out.push(Check::new(
            "recall FULL exact match",
            ok,
            format!("mean {} over {} runs (need >= 0.95)", fmt_opt(f.mean_exact_match), f.runs),
        ));
    }
    let p = task.chance();
    let sigma = (p * (1.0 - p) / task.n_eval as f64).sqrt();
    for r in records.iter().filter(|r| r.method == Method::NoContext) {
        let ok = r.exact_match.is_some_and(|a| (a - p).abs() <= 3.0 * sigma);
        out.push(Check::new(
            format!("recall NO_CONTEXT chance seed {}", r.seed),
            ok,
            format!("exact match {} vs chance {p:.4} +- {:.4}", fmt_opt(r.exact_match), 3.0 * sigma),
        ));
    }
    if let (Some(f), Some(g)) = (full, find(Method::GistPool, 1)) {
        let (ok, detail) = match (f.mean_eval_loss, g.mean_eval_loss) {
            (Some(a), Some(b)) => (b <= 1.10 * a, format!("GIST_POOL {b:.5} vs FULL {a:.5}, ratio {:.4} (need <= 1.10)", b / a)),
            _ => (false, "missing eval loss".into()),
        };
        out.push(Check::new("recall GIST_POOL xi=1 loss vs FULL", ok && g.failures == 0, detail));
    }
    out
}

/// Results of the three constructions at their configured sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructionReport {
    pub copy_epsilon: f64,
    pub copy_f: f64,
    pub copy_min_target_weight: f64,
    pub copy_identity_residual: f64,
    pub copy_bound_holds: bool,
    pub pool_eps_same: f64,
    pub pool_eps_diff: f64,
    pub pool_f: f64,
    pub pool_max_out_of_window_mass: f64,
    pub pool_max_in_window_deviation: f64,
    pub pool_bounds_hold: bool,
    pub gap_delta: f64,
    pub gap_first_below: Option<usize>,
    pub copy_curve: Vec<cons::CopyCurvePoint>,
    pub gap_curve: Vec<GapPoint>,
}

pub fn run_constructions(c: &ConstructionsConfig, seed: u64) -> Result<ConstructionReport> {
    let pts = cons::spaced_sphere_points(c.copy.l, c.copy.d, Placement::Regular, subseed(seed, "copy"))?;
    let values = cons::random_values(c.copy.l, c.copy.d, subseed(seed, "copy"));
    let f = cons::copy_scale_for_weight(&pts, c.copy.weight)?;
    let m = ConstructionMatrices::copy(c.copy.d, f);
    let (mut wmin, mut resid, mut bound) = (f64::INFINITY, 0.0f64, true);
    for i in 0..c.copy.l {
        let o = cons::copy_attention(&pts, &values, &m, i)?;
        wmin = wmin.min(o.weights[i]);
        resid = resid.max(o.identity_residual);
        bound &= o.bound_holds;
    }
    let copy_curve = cons::copy_scale_curve(c.copy.d, &c.copy.curve_ls, c.copy.weight, subseed(seed, "copy-curve"))?;

    let placement = Placement::Clustered {
        xi: c.pool.xi,
        eps_same: c.pool.eps_same,
    };
    let cl = cons::spaced_sphere_points(c.pool.l, c.pool.d, placement, subseed(seed, "pool"))?;
    let win = cl.windows.clone().expect("clustered points carry windows");
    let pool_f = cons::pool_scale(&win);
    let pm = ConstructionMatrices::pool(c.pool.d, pool_f, c.pool.xi);
    let pv = cons::random_values(c.pool.l, c.pool.d, subseed(seed, "pool"));
    let (mut leak, mut dev, mut pbound) = (0.0f64, 0.0f64, true);
    for w in 0..c.pool.l / c.pool.xi {
        let o = cons::pool_attention(&cl, &pv, &pm, w)?;
        leak = leak.max(o.out_of_window_mass);
        dev = dev.max(o.in_window_deviation);
        pbound &= o.bounds_hold;
    }

    let g = &c.gap;
    let gap_curve = cons::attention_gap_curve(&GapCurveOptions {
        d: g.d,
        k_norm: g.k_norm,
        q_norm: g.q_norm,
        x_norm: g.x_norm,
        ls: g.ls.clone(),
        ascent_steps: g.ascent_steps,
        starts: g.starts,
        seed: subseed(seed, "gap"),
        placement: PlacementOptions {
            iterations: g.iterations,
            restarts: g.restarts,
            riesz_s: None,
        },
    })?;
    Ok(ConstructionReport {
        copy_epsilon: pts.epsilon,
        copy_f: f,
        copy_min_target_weight: wmin,
        copy_identity_residual: resid,
        copy_bound_holds: bound,
        pool_eps_same: win.eps_same,
        pool_eps_diff: win.eps_diff,
        pool_f,
        pool_max_out_of_window_mass: leak,
        pool_max_in_window_deviation: dev,
        pool_bounds_hold: pbound,
        gap_delta: g.delta,
        gap_first_below: cons::first_below(&gap_curve, g.delta),
        copy_curve,
        gap_curve,
    })
}

pub fn construction_checks(r: &ConstructionReport) -> Vec<Check> {
    let mut out = vec![
        Check::new(
            "copy logit identities",
            r.copy_identity_residual < 1e-10 && r.copy_bound_holds,
            format!("max residual {:.2e} (need < 1e-10), off-target bound holds: {}", r.copy_identity_residual, r.copy_bound_holds),
        ),
        Check::new(
            "copy target weight at bisected F",
            r.copy_min_target_weight >= 0.999,
            format!("F {:.6}, min target weight {:.6} (need >= 0.999)", r.copy_f, r.copy_min_target_weight),
        ),
        Check::new(
            "pool leakage and uniformity",
            r.pool_max_out_of_window_mass < 0.01 && r.pool_max_in_window_deviation < 0.01,
            format!(
                "F {:.4}: out-of-window mass {:.2e}, in-window deviation {:.2e} (need both < 0.01)",
                r.pool_f, r.pool_max_out_of_window_mass, r.pool_max_in_window_deviation
            ),
        ),
        Check::new("pool logit bounds", r.pool_bounds_hold, format!("holds: {}", r.pool_bounds_hold)),
    ];
    let c = &r.gap_curve;
    let monotone = c.windows(2).all(|w| w[1].gap_bound <= w[0].gap_bound);
    out.push(Check::new(
        "gap bound non-increasing in l",
        monotone,
        c.iter().map(|p| format!("{}:{:.4}", p.l, p.gap_bound)).collect::<Vec<_>>().join(" "),
    ));
    let valid = c.iter().all(|p| p.gap_empirical <= p.gap_bound);
    out.push(Check::new(
        "empirical gap within bound",
        valid,
        c.iter().map(|p| format!("{}:{:.4}", p.l, p.gap_empirical)).collect::<Vec<_>>().join(" "),
    ));
    let last = c.last().map(|p| p.l).unwrap_or(0);
    out.push(Check::new(
        format!("bound and empirical gap below {} by l={last}", r.gap_delta),
        r.gap_first_below.is_some(),
        match r.gap_first_below {
            Some(l) => format!("first l = {l}"),
            None => format!(
                "bound at l={last} is {:.4}",
                c.last().map_or(f64::NAN, |p| p.gap_bound)
            ),
        },
    ));
    out
}

pub fn grad_checks(cases: &[GradCase], tolerance: f64) -> Vec<Check> {
    cases
        .iter()
        .map(|c| {
            Check::new(
                format!("gradient {}", c.name),
                c.max_rel_err < tolerance,
                format!("max rel err {:.3e} over {} entries (need < {tolerance:e})", c.max_rel_err, c.checked),
            )
        })
        .collect()
}

/// Files written and failed checks of one run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub checks: Vec<Check>,
}

impl RunOutcome {
    pub fn violations(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

#[derive(Serialize)]
struct Stamp<'a> {
    kind: Kind,
    seed: u64,
    config_sha256: String,
    version: &'a str,
}

fn jsonl<S: Serialize>(rows: &[S]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Flat per-run table for recall results.
#[derive(Serialize)]
struct RecallRow<'a> {
    method: Method,
    xi: usize,
    n_layers: usize,
    d_model: usize,
    seed: u64,
    steps: usize,
    final_train_loss: Option<f64>,
    eval_loss: Option<f64>,
    exact_match: Option<f64>,
    chance: f64,
    n_eval: usize,
    failure: &'a str,
}

/// Execute `m`, writing every artifact under `out`.
pub fn run_manifest(m: &Manifest, out: &Path) -> Result<RunOutcome> {
    m.validate()?;
    if let Some(v) = &m.version {
        if v != VERSION {
            eprintln!("note: manifest written for version {v}, running {VERSION}");
        }
    }
    let dir = OutDir::create(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(m.jobs.unwrap_or(1))
        .build()
        .map_err(|e| Error::Config(format!("jobs: {e}")))?;
    let mut files = Vec::new();
    let checks = pool.install(|| -> Result<Vec<Check>> {
        match m.kind {
            Kind::SynthpoolGrid => {
                let c = m.synthpool.clone().unwrap_or_default();
                let cells = c.all_cells();
                let results: Vec<CellResult> = cells
                    .par_iter()
                    .map(|cell| {
                        let t = std::time::Instant::now();
                        let r = match c.precision {
                            Precision::F32 => synthpool::run_cell::<f32>(cell, &c.settings, m.seed),
                            Precision::F64 => synthpool::run_cell::<f64>(cell, &c.settings, m.seed),
                        };
                        eprintln!("cell {}: best {} over {} runs, {:.0}s", cell.key(), fmt_opt(r.best_accuracy), r.runs.len(), t.elapsed().as_secs_f64());
                        r
                    })
                    .collect();
                files.push(dir.write("grid.csv", &synthpool::grid_csv(&results)?)?);
                let runs: Vec<_> = results.iter().flat_map(|r| r.runs.iter()).collect();
                files.push(dir.write("runs.jsonl", &jsonl(&runs)?)?);
                let failed: Vec<_> = runs.iter().filter(|r| r.failure.is_some()).collect();
                files.push(dir.write("failures.jsonl", &jsonl(&failed)?)?);
                Ok(synth_checks(&results))
            }
            Kind::RecallCompare => {
                let c = m.recall.clone().unwrap_or_default();
                let data = recall::gen_recall(&c.task, subseed(m.seed, "recall/data"))?;
                let seeds: Vec<u64> = (0..c.seeds).map(|s| subseed(m.seed, &format!("recall/model{s}"))).collect();
                let specs = c.specs();
                let records = match c.precision {
                    Precision::F32 => recall::train_compare::<f32>(&specs, &data, &seeds)?,
                    Precision::F64 => recall::train_compare::<f64>(&specs, &data, &seeds)?,
                };
                files.push(dir.write("records.jsonl", recall::records_jsonl(&records)?.as_bytes())?);
                let rows: Vec<RecallRow> = records
                    .iter()
                    .map(|r| RecallRow {
                        method: r.method,
                        xi: r.xi,
                        n_layers: r.n_layers,
                        d_model: r.d_model,
                        seed: r.seed,
                        steps: r.steps,
                        final_train_loss: r.final_train_loss,
                        eval_loss: r.eval_loss,
                        exact_match: r.exact_match,
                        chance: c.task.chance(),
                        n_eval: c.task.n_eval,
                        failure: r.failure.as_deref().unwrap_or(""),
                    })
                    .collect();
                files.push(dir.write("records.csv", cons::to_csv(&rows)?.as_bytes())?);
                let summary = recall::summarize(&records);
                files.push(dir.write("summary.csv", recall::summary_csv(&summary)?.as_bytes())?);
                let failed: Vec<_> = records.iter().filter(|r| r.failure.is_some()).collect();
                files.push(dir.write("failures.jsonl", &jsonl(&failed)?)?);
                for v in recall::degradation_violations(&summary) {
                    eprintln!("note: {v}");
                }
                Ok(recall_checks(&records, &c.task))
            }
            Kind::Constructions => {
                let c = m.constructions.clone().unwrap_or_default();
                let r = run_constructions(&c, m.seed)?;
                files.push(dir.write("copy_curve.csv", cons::to_csv(&r.copy_curve)?.as_bytes())?);
                files.push(dir.write("gap_curve.csv", cons::to_csv(&r.gap_curve)?.as_bytes())?);
                let json = serde_json::to_vec_pretty(&r).map_err(|e| Error::Format(e.to_string()))?;
                files.push(dir.write("constructions.json", &json)?);
                Ok(construction_checks(&r))
            }
            Kind::GradSuite => {
                let mut o = m.grad_suite.unwrap_or_default();
                o.seed = m.seed;
                let cases = run_grad_suite(&o)?;
                files.push(dir.write("grad_suite.csv", cons::to_csv(&cases)?.as_bytes())?);
                Ok(grad_checks(&cases, o.tolerance))
            }
        }
    })?;
    files.push(dir.write("checks.csv", cons::to_csv(&checks)?.as_bytes())?);
    let stamp = Stamp {
        kind: m.kind,
        seed: m.seed,
        config_sha256: m.config_hash(),
        version: VERSION,
    };
    let json = serde_json::to_vec_pretty(&stamp).map_err(|e| Error::Format(e.to_string()))?;
    files.push(dir.write("stamp.json", &json)?);
    Ok(RunOutcome { files, checks })
}

/// Aggregated row of a results table: one metric for one group and rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub file: String,
    pub group: String,
    pub xi: usize,
    pub metric: String,
    pub rows: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub checks: Vec<Check>,
}

impl Summary {
    pub fn table(&self) -> String {
        let mut s = format!("{:<14} {:<18} {:>4} {:<16} {:>5} {:>10} {:>10} {:>10}\n", "file", "group", "xi", "metric", "rows", "mean", "min", "max");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:<18} {:>4} {:<16} {:>5} {:>10.4} {:>10.4} {:>10.4}",
                r.file, r.group, r.xi, r.metric, r.rows, r.mean, r.min, r.max
            );
        }
        for c in self.checks.iter().filter(|c| !c.passed) {
            let _ = writeln!(s, "VIOLATION {}: {}", c.criterion, c.detail);
        }
        s
    }
}

type Records = Vec<BTreeMap<String, String>>;

fn read_table(path: &Path) -> Result<(Vec<String>, Records)> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        rows.push(header.iter().cloned().zip(rec.iter().map(String::from)).collect());
    }
    Ok((header, rows))
}

fn num(path: &Path, row: &BTreeMap<String, String>, col: &str) -> Result<Option<f64>> {
    let v = &row[col];
    if v.is_empty() {
        return Ok(None);
    }
    v.parse()
        .map(Some)
        .map_err(|_| Error::Format(format!("{}: column {col} holds non-number {v:?}", path.display())))
}

fn aggregate(file: &str, group: &str, xi: usize, metric: &str, vals: &[f64]) -> SummaryRow {
    SummaryRow {
        file: file.to_string(),
        group: group.to_string(),
        xi,
        metric: metric.to_string(),
        rows: vals.len(),
        mean: vals.iter().sum::<f64>() / vals.len() as f64,
        min: vals.iter().cloned().fold(f64::INFINITY, f64::min),
        max: vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }
}

const RECALL_COLUMNS: [&str; 7] = ["method", "xi", "seed", "eval_loss", "exact_match", "chance", "n_eval"];

fn parse_enum<T: serde::de::DeserializeOwned>(path: &Path, col: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| Error::Format(format!("{}: column {col} has unknown value {v:?}", path.display())))
}

fn parse_usize(path: &Path, col: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Format(format!("{}: column {col} holds non-integer {v:?}", path.display())))
}

/// Per-group means of pooling-grid or recall result tables, with acceptance flags.
pub fn summarize_files(paths: &[PathBuf]) -> Result<Summary> {
    let mut out = Summary::default();
    for path in paths {
        let (header, rows) = read_table(path)?;
        let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        let has = |cols: &[&str]| cols.iter().all(|c| header.iter().any(|h| h == c));
        if has(&synthpool::GRID_COLUMNS) {
            let mut results = Vec::new();
            let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
            for r in &rows {
                let heads = r["heads"]
                    .split_once('/')
                    .and_then(|(a, b)| Some(HeadSplit { n_heads: a.parse().ok()?, n_kv_heads: b.parse().ok()? }))
                    .ok_or_else(|| Error::Format(format!("{}: column heads has bad value {:?}", path.display(), r["heads"])))?;
                let cell = SynthCell {
                    n: parse_usize(path, "N", &r["N"])?,
                    xi: parse_usize(path, "xi", &r["xi"])?,
                    source: parse_enum(path, "source", &r["source"])?,
                    regime: parse_enum(path, "regime", &r["regime"])?,
                    mask: parse_enum(path, "mask", &r["mask"])?,
                    heads,
                    gist_positions: parse_enum(path, "gist_positions", &r["gist_positions"])?,
                };
                let acc = num(path, r, "best_accuracy")?;
                if let Some(a) = acc {
                    groups.entry((r["mask"].clone(), cell.xi)).or_default().push(a);
                }
                results.push(CellResult {
                    cell,
                    best_accuracy: acc,
                    best_lr: num(path, r, "best_lr")?,
                    steps: parse_usize(path, "steps", &r["steps"])?,
                    runs: Vec::new(),
                });
            }
            for ((g, xi), v) in groups {
                out.rows.push(aggregate(&file, &g, xi, "best_accuracy", &v));
            }
            out.checks.extend(synth_checks(&results));
        } else if has(&RECALL_COLUMNS) {
            let mut records = Vec::new();
            let mut groups: BTreeMap<(String, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
            let mut task: Option<RecallTask> = None;
            for r in &rows {
                let method: Method = parse_enum(path, "method", &r["method"])?;
                let xi = parse_usize(path, "xi", &r["xi"])?;
                let em = num(path, r, "exact_match")?;
                let loss = num(path, r, "eval_loss")?;
                let g = groups.entry((r["method"].clone(), xi)).or_default();
                g.0.extend(em);
                g.1.extend(loss);
                let chance = num(path, r, "chance")?.unwrap_or(f64::NAN);
                let n_values = (1.0 / chance).round() as usize;
                task = Some(RecallTask {
                    n_values,
                    n_eval: parse_usize(path, "n_eval", &r["n_eval"])?,
                    ..RecallTask::default()
                });
                records.push(RecallRecord {
                    method,
                    xi,
                    n_layers: 0,
                    d_model: 0,
                    seed: r["seed"].parse().unwrap_or(0),
                    steps: 0,
                    final_train_loss: None,
                    eval_loss: loss,
                    exact_match: em,
                    failure: r.get("failure").filter(|f| !f.is_empty()).cloned(),
                });
            }
            for ((g, xi), (em, loss)) in groups {
                if !em.is_empty() {
                    out.rows.push(aggregate(&file, &g, xi, "exact_match", &em));
                }
                if !loss.is_empty() {
                    out.rows.push(aggregate(&file, &g, xi, "eval_loss", &loss));
                }
            }
            if let Some(t) = task {
                out.checks.extend(recall_checks(&records, &t));
            }
        } else {
            return Err(Error::Format(format!(
                "{}: missing columns; expected a pooling grid ({}) or recall records ({})",
                path.display(),
                synthpool::GRID_COLUMNS.join(","),
                RECALL_COLUMNS.join(",")
            )));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskKind {
    Causal,
    Gist,
    Pool,
    GistPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LayoutKind {
    Appended,
    Interspersed,
}

/// What `export-mask` builds.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskRequest {
    pub mask: MaskKind,
    pub n_ctx: usize,
    pub xi: usize,
    pub n_query: usize,
    pub n_answer: usize,
    pub layout: Option<LayoutKind>,
    pub knobs: GistPoolKnobs,
}

/// Build the requested mask and check it against its own rules.
pub fn build_mask(r: &MaskRequest) -> Result<(SequenceLayout, AttentionMask)> {
    let appended = || SequenceLayout::appended(r.n_ctx, r.xi, r.n_query, r.n_answer);
    let (layout, mask, method) = match r.mask {
        MaskKind::Causal => {
            let l = SequenceLayout::plain(r.n_ctx, r.n_query, r.n_answer);
            let m = build_causal(&l);
            (l, m, MaskMethod::Causal)
        }
        MaskKind::Gist => {
            let l = appended()?;
            let m = build_gist_mask(&l)?;
            (l, m, MaskMethod::Gist)
        }
        MaskKind::Pool => {
            let l = appended()?;
            let m = build_pool_mask(&l)?;
            (l, m, MaskMethod::Pool { gist_self: true })
        }
        MaskKind::GistPool => {
            let l = match r.layout.unwrap_or(LayoutKind::Interspersed) {
                LayoutKind::Interspersed => SequenceLayout::interspersed(r.n_ctx, r.xi, r.n_query, r.n_answer)?,
                LayoutKind::Appended => appended()?,
            };
            let m = build_gistpool_mask(&l, &r.knobs)?;
            (l, m, MaskMethod::GistPool(r.knobs))
        }
    };
    if let Some(v) = validate_mask(&mask, &layout, &method).first() {
        return Err(Error::Layout(format!("built mask breaks its own rules: {v}")));
    }
    Ok((layout, mask))
}

/// Write `<name>.txt` and `<name>.bits` into `dir`.
pub fn export_mask(r: &MaskRequest, dir: &Path, name: &str) -> Result<Vec<PathBuf>> {
    let (_, mask) = build_mask(r)?;
    let out = OutDir::create(dir)?;
    Ok(vec![
        out.write(&format!("{name}.txt"), mask.to_text().as_bytes())?,
        out.write(&format!("{name}.bits"), &mask.to_bitset())?,
    ])
}

#[derive(Debug, Parser)]
#[command(name = "gistlab", version, about = "Gist-token compression experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment described by a manifest.
    Run {
        manifest: PathBuf,
        /// Output directory; overrides the manifest and $GISTLAB_OUT.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; results do not depend on it.
        #[arg(long)]
        jobs: Option<usize>,
        /// Override one manifest value, e.g. `--set synthpool.settings.steps=200`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        sets: Vec<String>,
    },
    /// Aggregate result tables per method and rate, flagging acceptance violations.
    Summarize {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Summary CSV path (default: aggregate.csv beside the first input).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a mask as a text grid and a packed bitset.
    ExportMask {
        #[arg(long, value_enum)]
        mask: MaskKind,
        #[arg(long)]
        n_ctx: usize,
        #[arg(long, default_value_t = 1)]
        xi: usize,
        #[arg(long, default_value_t = 1)]
        n_query: usize,
        #[arg(long, default_value_t = 1)]
        n_answer: usize,
        /// Gist placement for gist-pool (default interspersed).
        #[arg(long, value_enum)]
        layout: Option<LayoutKind>,
        /// GistPool knobs as JSON, e.g. `{"pooling_windows": "inf", "gists_attend_bos": false}`.
        #[arg(long)]
        knobs: Option<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Base file name (default derived from the arguments).
        #[arg(long)]
        name: Option<String>,
    },
    /// Finite-difference check of every trainable architecture.
    GradSuite {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

fn default_out(stem: &str) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(stem),
        _ => PathBuf::from("gistlab-out").join(stem),
    }
}

fn report(outcome: &RunOutcome) -> i32 {
    for c in &outcome.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.criterion, c.detail);
    }
    if outcome.violations().is_empty() {
        EXIT_OK
    } else {
        EXIT_VIOLATION
    }
}

fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run {
            manifest,
            out,
            seed,
            jobs,
            sets,
        } => {
            let text = fs::read_to_string(&manifest).map_err(|e| Error::Config(format!("{}: {e}", manifest.display())))?;
            let mut m = Manifest::from_toml_with(&text, &sets).map_err(|e| Error::Config(format!("{}: {e}", manifest.display())))?;
            if let Some(s) = seed {
                m.seed = s;
            }
            if let Some(j) = jobs {
                m.jobs = Some(j);
            }
            m.validate()?;
            let stem = manifest.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
            let dir = out.or_else(|| m.out_dir.clone()).unwrap_or_else(|| default_out(&stem));
            let t = std::time::Instant::now();
            let outcome = run_manifest(&m, &dir)?;
            eprintln!("{:?} finished in {:.1}s; results in {}", m.kind, t.elapsed().as_secs_f64(), dir.display());
            Ok(report(&outcome))
        }
        Command::Summarize { files, out } => {
            let s = summarize_files(&files)?;
            print!("{}", s.table());
            let target = out.unwrap_or_else(|| {
                files[0].parent().unwrap_or(Path::new(".")).join("aggregate.csv")
            });
            write_atomic(&target, cons::to_csv(&s.rows)?.as_bytes())?;
            Ok(if s.checks.iter().all(|c| c.passed) { EXIT_OK } else { EXIT_VIOLATION })
        }
        Command::ExportMask {
            mask,
            n_ctx,
            xi,
            n_query,
            n_answer,
            layout,
            knobs,
            out,
            name,
        } => {
            let knobs = match knobs {
                Some(j) => serde_json::from_str(&j).map_err(|e| Error::Knobs(e.to_string()))?,
                None => GistPoolKnobs::default(),
            };
            let req = MaskRequest {
                mask,
                n_ctx,
                xi,
                n_query,
                n_answer,
                layout,
                knobs,
            };
            let name = name.unwrap_or_else(|| {
                let kind = mask.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
                format!("{kind}_n{n_ctx}_xi{xi}")
            });
            for p in export_mask(&req, &out, &name)? {
                println!("{}", p.display());
            }
            Ok(EXIT_OK)
        }
        Command::GradSuite { out, seed, tolerance } => {
            let mut m = Manifest::new(Kind::GradSuite);
            m.seed = seed;
            let mut o = GradSuiteOptions::default();
            if let Some(t) = tolerance {
                o.tolerance = t;
            }
            m.grad_suite = Some(o);
            m.validate()?;
            let outcome = run_manifest(&m, &out.unwrap_or_else(|| default_out("grad-suite")))?;
            Ok(report(&outcome))
        }
    }
}

/// Parse `args` (program name first) and run; returns the process exit code.
pub fn main_with_args<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_field_is_named() {
        let e = Manifest::from_toml("kind = \"grad-suite\"\n[grad_suite]\nepsilonn = 1e-5\n").unwrap_err();
        let s = e.to_string();
        assert!(s.contains("epsilonn"), "{s}");
        assert!(s.contains("line 3"), "{s}");
    }

    #[test]
    fn foreign_section_is_rejected() {
        let e = Manifest::from_toml("kind = \"grad-suite\"\n[recall]\nsteps = 3\n").unwrap_err();
        assert!(e.to_string().contains("recall"));
    }

    #[test]
    fn set_overrides_nested_values() {
        let m = Manifest::from_toml_with(
            "kind = \"synthpool-grid\"\n[synthpool.settings]\nsteps = 10\n",
            &["synthpool.settings.steps=3".into(), "seed=7".into()],
        )
        .unwrap();
        assert_eq!(m.synthpool.unwrap().settings.steps, 3);
        assert_eq!(m.seed, 7);
    }

    #[test]
    fn hash_ignores_output_location() {
        let mut a = Manifest::new(Kind::GradSuite);
        let h = a.config_hash();
        a.out_dir = Some("x".into());
        a.jobs = Some(3);
        assert_eq!(h, a.config_hash());
        a.seed = 1;
        assert_ne!(h, a.config_hash());
    }

    #[test]
    fn out_dir_rejects_paths() {
        let d = tempfile::tempdir().unwrap();
        let o = OutDir::create(d.path()).unwrap();
        assert!(o.write("../x", b"1").is_err());
        assert!(o.write("a/b", b"1").is_err());
        o.write("ok.txt", b"1").unwrap();
        assert_eq!(fs::read(d.path().join("ok.txt")).unwrap(), b"1");
        assert!(!d.path().join(".ok.txt.tmp").exists());
    }

    #[test]
    fn recall_specs_run_baselines_once() {
        let c = RecallConfig {
            methods: vec![Method::Full, Method::GistPool],
            xis: vec![1, 4],
            ..RecallConfig::default()
        };
        let s: Vec<(Method, usize)> = c.specs().iter().map(|s| (s.compression.method, s.compression.xi)).collect();
        assert_eq!(s, vec![(Method::Full, 1), (Method::GistPool, 1), (Method::GistPool, 4)]);
    }
}
