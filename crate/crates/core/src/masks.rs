//! Attention masks for every compression method.
//!
//! A [`SequenceLayout`] tags each position with its [`Role`]. The builders
//! turn a layout into an [`AttentionMask`] where entry `(i, j)` is `true`
//! iff query row `i` may attend to key column `j`:
//!
//! * [`build_causal`]: plain lower triangle.
//! * [`build_gist_mask`]: gists appended after the context; query and answer
//!   rows see only BOS, the gists and earlier query/answer tokens.
//! * [`build_pool_mask`]: appended gists, gist `k` restricted to its own
//!   pooling window of ξ context tokens.
//! * [`build_gistpool_mask`]: gists interspersed after every ξ context
//!   tokens, with the [`GistPoolKnobs`] ablation switches.
//!
//! [`validate_mask`] re-derives the expected value of every entry from a
//! per-entry rule and reports each mismatch as a [`Violation`].

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Bos,
    Context,
    Gist,
    Query,
    Answer,
}

/// Where the gist tokens sit relative to the context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arrangement {
    /// No gist tokens at all.
    Plain,
    /// All gists after the last context token.
    Appended,
    /// One gist after every ξ context tokens; the last gist closes the remainder.
    Interspersed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    roles: Vec<Role>,
    xi: usize,
    arrangement: Arrangement,
}

impl SequenceLayout {
    /// BOS, context, query, answer; no gists.
    pub fn plain(n_context: usize, n_query: usize, n_answer: usize) -> Self {
        let mut roles = vec![Role::Bos];
        roles.extend(std::iter::repeat_n(Role::Context, n_context));
        roles.extend(std::iter::repeat_n(Role::Query, n_query));
        roles.extend(std::iter::repeat_n(Role::Answer, n_answer));
        SequenceLayout {
            roles,
            xi: 1,
            arrangement: Arrangement::Plain,
        }
    }

    /// BOS, context, `ceil(n/ξ)` gists, query, answer.
    pub fn appended(n_context: usize, xi: usize, n_query: usize, n_answer: usize) -> Result<Self> {
        check_rate(n_context, xi)?;
        let mut roles = vec![Role::Bos];
        roles.extend(std::iter::repeat_n(Role::Context, n_context));
        roles.extend(std::iter::repeat_n(Role::Gist, n_context.div_ceil(xi)));
        roles.extend(std::iter::repeat_n(Role::Query, n_query));
        roles.extend(std::iter::repeat_n(Role::Answer, n_answer));
        Ok(SequenceLayout {
            roles,
            xi,
            arrangement: Arrangement::Appended,
        })
    }

    /// BOS, then ξ context tokens followed by a gist, repeated; query, answer.
    pub fn interspersed(n_context: usize, xi: usize, n_query: usize, n_answer: usize) -> Result<Self> {
        check_rate(n_context, xi)?;
        let mut roles = vec![Role::Bos];
        let mut left = n_context;
        while left > 0 {
            let w = left.min(xi);
            roles.extend(std::iter::repeat_n(Role::Context, w));
            roles.push(Role::Gist);
            left -= w;
        }
        roles.extend(std::iter::repeat_n(Role::Query, n_query));
        roles.extend(std::iter::repeat_n(Role::Answer, n_answer));
        Ok(SequenceLayout {
            roles,
            xi,
            arrangement: Arrangement::Interspersed,
        })
    }

    /// Validate an explicit role sequence and infer its arrangement.
    pub fn from_roles(roles: Vec<Role>, xi: usize) -> Result<Self> {
        if xi == 0 {
            return Err(Error::Layout("compression rate must be >= 1".into()));
        }
        if roles.first() != Some(&Role::Bos) || roles.iter().filter(|&&r| r == Role::Bos).count() != 1 {
            return Err(Error::Layout("exactly one BOS, at index 0".into()));
        }
        let n_ctx = roles.iter().filter(|&&r| r == Role::Context).count();
        let n_gist = roles.iter().filter(|&&r| r == Role::Gist).count();
        let body_end = roles
            .iter()
            .position(|&r| matches!(r, Role::Query | Role::Answer))
            .unwrap_or(roles.len());
        if roles[body_end..].iter().any(|&r| !matches!(r, Role::Query | Role::Answer)) {
            return Err(Error::Layout("context/gist after query or answer".into()));
        }
        let tail = &roles[body_end..];
        if let Some(a) = tail.iter().position(|&r| r == Role::Answer) {
            if tail[a..].contains(&Role::Query) {
                return Err(Error::Layout("query after answer".into()));
            }
        }
        let candidates: Vec<SequenceLayout> = if n_gist == 0 {
            vec![Self::plain(n_ctx, 0, 0)]
        } else {
            let mut v = vec![];
            if let Ok(l) = Self::appended(n_ctx, xi, 0, 0) {
                v.push(l);
            }
            if let Ok(l) = Self::interspersed(n_ctx, xi, 0, 0) {
                v.push(l);
            }
            v
        };
        for c in candidates {
            if c.roles[..] == roles[..body_end] {
                return Ok(SequenceLayout {
                    roles,
                    xi,
                    arrangement: c.arrangement,
                });
            }
        }
        Err(Error::Layout(format!(
            "{n_gist} gists over {n_ctx} context tokens at rate {xi} match no valid arrangement"
        )))
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn role(&self, i: usize) -> Role {
        self.roles[i]
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn xi(&self) -> usize {
        self.xi
    }

    pub fn arrangement(&self) -> Arrangement {
        self.arrangement
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    pub fn n_context(&self) -> usize {
        self.count(Role::Context)
    }

    pub fn n_gists(&self) -> usize {
        self.count(Role::Gist)
    }

    /// Sequence indices holding `role`, in order.
    pub fn indices(&self, role: Role) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] == role).collect()
    }

    /// For each gist (in order), the sequence indices of the context tokens in its window.
    pub fn gist_windows(&self) -> Vec<Vec<usize>> {
        let ctx = self.indices(Role::Context);
        ctx.chunks(self.xi).map(|c| c.to_vec()).collect()
    }

    /// Pooling-window ordinal of every context index (`None` for other roles).
    pub fn window_of(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.len()];
        let mut k = 0;
        for (i, &r) in self.roles.iter().enumerate() {
            if r == Role::Context {
                out[i] = Some(k / self.xi);
                k += 1;
            }
        }
        out
    }

    /// Gist ordinal of every gist index.
    pub fn gist_ordinal(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.len()];
        let mut k = 0;
        for (i, &r) in self.roles.iter().enumerate() {
            if r == Role::Gist {
                out[i] = Some(k);
                k += 1;
            }
        }
        out
    }
}

fn check_rate(n_context: usize, xi: usize) -> Result<()> {
    if xi == 0 {
        return Err(Error::Layout("compression rate must be >= 1".into()));
    }
    if n_context == 0 {
        return Err(Error::Layout("gist layouts need at least one context token".into()));
    }
    Ok(())
}

/// Dense boolean allow-matrix, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "AttentionMask {}x{}", self.rows, self.cols)?;
        f.write_str(&self.to_text())
    }
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            data: vec![true; rows * cols],
        }
    }

    pub fn causal(n: usize) -> Self {
        let mut m = Self::new(n, n);
        for i in 0..n {
            for j in 0..=i {
                m.set(i, j, true);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.cols + j] = v;
    }

    pub fn count_allowed(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.data[i * self.cols..(i + 1) * self.cols].iter().filter(|&&b| b).count()
    }

    pub fn allowed_in_row(&self, i: usize) -> Vec<usize> {
        (0..self.cols).filter(|&j| self.get(i, j)).collect()
    }

    /// Rows `rows` and columns `cols` of this mask, in the given order.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> AttentionMask {
        let mut m = AttentionMask::new(rows.len(), cols.len());
        for (a, &i) in rows.iter().enumerate() {
            for (b, &j) in cols.iter().enumerate() {
                m.set(a, b, self.get(i, j));
            }
        }
        m
    }

    /// Plain-text grid: one line per row, `1` for allowed, `0` for blocked.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for i in 0..self.rows {
            for j in 0..self.cols {
                s.push(if self.get(i, j) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let cols = lines.first().map(|l| l.trim().len()).unwrap_or(0);
        let mut m = AttentionMask::new(lines.len(), cols);
        for (i, l) in lines.iter().enumerate() {
            let l = l.trim();
            if l.len() != cols {
                return Err(Error::Format(format!("mask line {} has {} columns, expected {cols}", i + 1, l.len())));
            }
            for (j, ch) in l.chars().enumerate() {
                match ch {
                    '1' => m.set(i, j, true),
                    '0' => {}
                    other => return Err(Error::Format(format!("mask line {}: unexpected {other:?}", i + 1))),
                }
            }
        }
        Ok(m)
    }

    /// Compact binary: `GMSK`, u32 rows, u32 cols (little endian), then
    /// row-major bits packed least-significant-bit first.
    pub fn to_bitset(&self) -> Vec<u8> {
        let mut out = b"GMSK".to_vec();
        out.extend((self.rows as u32).to_le_bytes());
        out.extend((self.cols as u32).to_le_bytes());
        let mut bytes = vec![0u8; self.data.len().div_ceil(8)];
        for (k, &b) in self.data.iter().enumerate() {
            if b {
                bytes[k / 8] |= 1 << (k % 8);
            }
        }
        out.extend(bytes);
        out
    }

    pub fn from_bitset(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != b"GMSK" {
            return Err(Error::Format("missing GMSK header".into()));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4")) as usize;
        let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4")) as usize;
        let body = &bytes[12..];
        if body.len() != (rows * cols).div_ceil(8) {
            return Err(Error::Format(format!("bitset body {} bytes for {rows}x{cols}", body.len())));
        }
        let mut m = AttentionMask::new(rows, cols);
        for k in 0..rows * cols {
            m.data[k] = body[k / 8] >> (k % 8) & 1 == 1;
        }
        Ok(m)
    }
}

/// How many pooling windows a gist may look back over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolingWindows {
    Finite(usize),
    Unbounded,
}

impl Serialize for PoolingWindows {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PoolingWindows::Finite(n) => s.serialize_u64(*n as u64),
            PoolingWindows::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for PoolingWindows {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(PoolingWindows::Finite(n as usize)),
            Raw::S(s) if s == "unbounded" || s == "inf" => Ok(PoolingWindows::Unbounded),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "pooling_windows must be a positive integer or \"unbounded\", got {s:?}"
            ))),
        }
    }
}

/// Mask ablation switches for interspersed gists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GistPoolKnobs {
    pub pooling_windows: PoolingWindows,
    pub contexts_attend_gists: bool,
    pub gists_attend_gists: bool,
    pub gists_attend_self: bool,
    pub gists_attend_bos: bool,
}

impl Default for GistPoolKnobs {
    /// The configuration used for every GistPool run: 5 windows, contexts
    /// blind to gists, gists see earlier gists, themselves and BOS.
    fn default() -> Self {
        GistPoolKnobs {
            pooling_windows: PoolingWindows::Finite(5),
            contexts_attend_gists: false,
            gists_attend_gists: true,
            gists_attend_self: true,
            gists_attend_bos: true,
        }
    }
}

impl GistPoolKnobs {
    pub fn validate(&self) -> Result<()> {
        match self.pooling_windows {
            PoolingWindows::Finite(0) => Err(Error::Knobs("pooling_windows must be >= 1".into())),
            PoolingWindows::Unbounded if !self.gists_attend_bos => Err(Error::Knobs(
                "unbounded pooling windows always include BOS; gists_attend_bos=false is inconsistent".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Every ablation row: {1, 5} windows × 16 flag combinations, plus the
    /// 8 unbounded rows (BOS implied).
    pub fn ablation_grid() -> Vec<GistPoolKnobs> {
        let mut out = Vec::new();
        for pw in [PoolingWindows::Finite(1), PoolingWindows::Finite(5), PoolingWindows::Unbounded] {
            for bits in 0..16u32 {
                let k = GistPoolKnobs {
                    pooling_windows: pw,
                    contexts_attend_gists: bits & 1 != 0,
                    gists_attend_gists: bits & 2 != 0,
                    gists_attend_self: bits & 4 != 0,
                    gists_attend_bos: bits & 8 != 0,
                };
                if k.validate().is_ok() {
                    out.push(k);
                }
            }
        }
        out
    }
}

/// Whether gist `k`'s look-back covers the first window, and with it the BOS slot.
fn reaches_sequence_start(knobs: &GistPoolKnobs, k: usize) -> bool {
    match knobs.pooling_windows {
        PoolingWindows::Finite(n) => k < n,
        PoolingWindows::Unbounded => true,
    }
}

/// Which construction a mask is checked against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMethod {
    Causal,
    Gist,
    Pool { gist_self: bool },
    GistPool(GistPoolKnobs),
}

/// Options for [`build_pool_mask_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolMaskOptions {
    /// Gist rows also attend to their own position.
    pub gist_self: bool,
    /// Reject context lengths not divisible by ξ instead of using a short final window.
    pub strict: bool,
}

impl Default for PoolMaskOptions {
    fn default() -> Self {
        PoolMaskOptions {
            gist_self: true,
            strict: false,
        }
    }
}

pub fn build_causal(layout: &SequenceLayout) -> AttentionMask {
    AttentionMask::causal(layout.len())
}

fn allow_prediction_rows(layout: &SequenceLayout, m: &mut AttentionMask) {
    let gists = layout.indices(Role::Gist);
    for i in 0..layout.len() {
        if !matches!(layout.role(i), Role::Query | Role::Answer) {
            continue;
        }
        m.set(i, 0, true);
        for &g in &gists {
            m.set(i, g, true);
        }
        for j in 0..=i {
            if matches!(layout.role(j), Role::Query | Role::Answer) {
                m.set(i, j, true);
            }
        }
    }
}

fn allow_context_rows(layout: &SequenceLayout, m: &mut AttentionMask, see_gists: bool) {
    for i in 0..layout.len() {
        if !matches!(layout.role(i), Role::Bos | Role::Context) {
            continue;
        }
        for j in 0..=i {
            match layout.role(j) {
                Role::Bos | Role::Context => m.set(i, j, true),
                Role::Gist if see_gists => m.set(i, j, true),
                _ => {}
            }
        }
    }
}

fn require(layout: &SequenceLayout, want: &[Arrangement], who: &str) -> Result<()> {
    if want.contains(&layout.arrangement()) {
        Ok(())
    } else {
        Err(Error::Layout(format!(
            "{who} needs a {want:?} layout, got {:?}",
            layout.arrangement()
        )))
    }
}

/// Gist bottleneck over appended gists.
pub fn build_gist_mask(layout: &SequenceLayout) -> Result<AttentionMask> {
    require(layout, &[Arrangement::Appended], "gist mask")?;
    let mut m = AttentionMask::new(layout.len(), layout.len());
    allow_context_rows(layout, &mut m, false);
    for i in layout.indices(Role::Gist) {
        for j in 0..=i {
            m.set(i, j, true);
        }
    }
    allow_prediction_rows(layout, &mut m);
    Ok(m)
}

/// Pool mask with self-attending gists and a short final window when needed.
pub fn build_pool_mask(layout: &SequenceLayout) -> Result<AttentionMask> {
    build_pool_mask_with(layout, PoolMaskOptions::default())
}

pub fn build_pool_mask_with(layout: &SequenceLayout, opts: PoolMaskOptions) -> Result<AttentionMask> {
    require(layout, &[Arrangement::Appended], "pool mask")?;
    if opts.strict && layout.n_context() % layout.xi() != 0 {
        return Err(Error::Layout(format!(
            "context length {} not divisible by rate {}",
            layout.n_context(),
            layout.xi()
        )));
    }
    let mut m = AttentionMask::new(layout.len(), layout.len());
    allow_context_rows(layout, &mut m, false);
    let windows = layout.gist_windows();
    for (k, g) in layout.indices(Role::Gist).into_iter().enumerate() {
        m.set(g, 0, true);
        for &c in &windows[k] {
            m.set(g, c, true);
        }
        if opts.gist_self {
            m.set(g, g, true);
        }
    }
    allow_prediction_rows(layout, &mut m);
    Ok(m)
}

/// GistPool mask; accepts interspersed or appended gists.
pub fn build_gistpool_mask(layout: &SequenceLayout, knobs: &GistPoolKnobs) -> Result<AttentionMask> {
    knobs.validate()?;
    require(
        layout,
        &[Arrangement::Interspersed, Arrangement::Appended],
        "gistpool mask",
    )?;
    let mut m = AttentionMask::new(layout.len(), layout.len());
    allow_context_rows(layout, &mut m, knobs.contexts_attend_gists);
    let windows = layout.gist_windows();
    let gists = layout.indices(Role::Gist);
    for (k, &g) in gists.iter().enumerate() {
        // unbounded look-back covers every earlier context token, whatever the arrangement
        let (first_window, last_window) = match knobs.pooling_windows {
            PoolingWindows::Finite(n) => ((k + 1).saturating_sub(n), k),
            PoolingWindows::Unbounded => (0, windows.len() - 1),
        };
        if knobs.gists_attend_bos || reaches_sequence_start(knobs, k) {
            m.set(g, 0, true);
        }
        for w in &windows[first_window..=last_window] {
            for &c in w.iter().filter(|&&c| c < g) {
                m.set(g, c, true);
            }
        }
        if knobs.gists_attend_gists {
            for &h in &gists[..k] {
                m.set(g, h, true);
            }
        }
        if knobs.gists_attend_self {
            m.set(g, g, true);
        }
    }
    allow_prediction_rows(layout, &mut m);
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    /// Mask shape differs from the layout.
    Shape,
    /// Row allows nothing.
    EmptyRow,
    /// Allowed entry above the diagonal.
    Future,
    /// BOS column blocked.
    BosBlocked,
    /// Query/answer row sees a raw context column.
    Bottleneck,
    /// Gist row sees context outside its pooling windows.
    Window,
    /// Any other disagreement with the method's rule.
    Rule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Violation {
    pub row: usize,
    pub col: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.col {
            Some(c) => write!(f, "{:?} at ({}, {})", self.kind, self.row, c),
            None => write!(f, "{:?} at row {}", self.kind, self.row),
        }
    }
}

/// Per-entry statement of each method's rule.
fn expected_entry(layout: &SequenceLayout, method: &MaskMethod, win: &[Option<usize>], gord: &[Option<usize>], i: usize, j: usize) -> bool {
    if j > i {
        return false;
    }
    let (ri, rj) = (layout.role(i), layout.role(j));
    if j == 0 {
        return match (method, ri) {
            (MaskMethod::GistPool(k), Role::Gist) => {
                k.gists_attend_bos || reaches_sequence_start(k, gord[i].expect("gist ordinal"))
            }
            _ => true,
        };
    }
    let predicting = matches!(ri, Role::Query | Role::Answer);
    match method {
        MaskMethod::Causal => true,
        MaskMethod::Gist => match ri {
            Role::Bos => false,
            Role::Context => rj == Role::Context,
            Role::Gist => true,
            _ => rj != Role::Context,
        },
        MaskMethod::Pool { gist_self } => match ri {
            Role::Bos => false,
            Role::Context => rj == Role::Context,
            Role::Gist => {
                (rj == Role::Context && win[j] == gord[i]) || (i == j && *gist_self)
            }
            _ if predicting => rj != Role::Context,
            _ => false,
        },
        MaskMethod::GistPool(k) => match ri {
            Role::Bos => false,
            Role::Context => rj == Role::Context || (rj == Role::Gist && k.contexts_attend_gists),
            Role::Gist => {
                let me = gord[i].expect("gist ordinal");
                match rj {
                    Role::Context => {
                        let w = win[j].expect("window");
                        match k.pooling_windows {
                            PoolingWindows::Finite(n) => w <= me && me - w < n,
                            PoolingWindows::Unbounded => true,
                        }
                    }
                    Role::Gist if i == j => k.gists_attend_self,
                    Role::Gist => k.gists_attend_gists,
                    _ => false,
                }
            }
            _ => rj != Role::Context,
        },
    }
}

/// Check `mask` against the layout-wide invariants and the method's rule.
///
/// Each disagreeing entry yields exactly one violation; the kind names the
/// most specific invariant it breaks.
pub fn validate_mask(mask: &AttentionMask, layout: &SequenceLayout, method: &MaskMethod) -> Vec<Violation> {
    let n = layout.len();
    if mask.rows() != n || mask.cols() != n {
        return vec![Violation {
            row: 0,
            col: None,
            kind: ViolationKind::Shape,
        }];
    }
    let win = layout.window_of();
    let gord = layout.gist_ordinal();
    let mut out = Vec::new();
    for i in 0..n {
        if mask.row_count(i) == 0 {
            out.push(Violation {
                row: i,
                col: None,
                kind: ViolationKind::EmptyRow,
            });
        }
        for j in 0..n {
            let want = expected_entry(layout, method, &win, &gord, i, j);
            let got = mask.get(i, j);
            if want == got {
                continue;
            }
            let ri = layout.role(i);
            let rj = layout.role(j);
            let kind = if j > i {
                ViolationKind::Future
            } else if j == 0 {
                ViolationKind::BosBlocked
            } else if got && matches!(ri, Role::Query | Role::Answer) && rj == Role::Context {
                ViolationKind::Bottleneck
            } else if ri == Role::Gist && rj == Role::Context && matches!(method, MaskMethod::Pool { .. } | MaskMethod::GistPool(_)) {
                ViolationKind::Window
            } else {
                ViolationKind::Rule
            };
            out.push(Violation { row: i, col: Some(j), kind });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_small_cases() {
        let m = build_causal(&SequenceLayout::plain(0, 0, 0));
        assert_eq!(m.to_text(), "1\n");
        let m = AttentionMask::causal(3);
        assert_eq!(m.count_allowed(), 6);
        let m = AttentionMask::causal(7);
        for i in 0..7 {
            assert_eq!(m.row_count(i), i + 1);
        }
    }

    #[test]
    fn gist_mask_two_context_one_gist_one_query() {
        // rows: BOS, c1, c2, g1, q1
        let l = SequenceLayout::appended(2, 2, 1, 0).unwrap();
        let m = build_gist_mask(&l).unwrap();
        assert_eq!(m.to_text(), "10000\n11000\n11100\n11110\n10011\n");
        assert_eq!(m.allowed_in_row(4), vec![0, 3, 4]);
    }

    #[test]
    fn gist_mask_rejects_interspersed() {
        let l = SequenceLayout::interspersed(4, 2, 1, 0).unwrap();
        assert!(build_gist_mask(&l).is_err());
    }

    #[test]
    fn gist_rows_are_causal_prefixes() {
        let l = SequenceLayout::appended(9, 4, 2, 2).unwrap();
        let m = build_gist_mask(&l).unwrap();
        let c = build_causal(&l);
        for g in l.indices(Role::Gist) {
            assert_eq!(m.allowed_in_row(g), c.allowed_in_row(g));
        }
        for i in l.indices(Role::Answer) {
            for j in l.indices(Role::Context) {
                assert!(!m.get(i, j));
            }
        }
    }

    #[test]
    fn pool_windows_for_four_context_rate_two() {
        let l = SequenceLayout::appended(4, 2, 0, 0).unwrap();
        assert_eq!(l.gist_windows(), vec![vec![1, 2], vec![3, 4]]);
        let m = build_pool_mask(&l).unwrap();
        assert_eq!(m.allowed_in_row(5), vec![0, 1, 2, 5]);
        assert_eq!(m.allowed_in_row(6), vec![0, 3, 4, 6]);
    }

    #[test]
    fn pool_rate_one_is_copy() {
        let l = SequenceLayout::appended(5, 1, 0, 0).unwrap();
        let m = build_pool_mask_with(&l, PoolMaskOptions { gist_self: false, strict: true }).unwrap();
        for (k, g) in l.indices(Role::Gist).into_iter().enumerate() {
            assert_eq!(m.allowed_in_row(g), vec![0, k + 1]);
        }
    }

    #[test]
    fn strict_pool_mask_rejects_remainder() {
        let l = SequenceLayout::appended(5, 2, 0, 0).unwrap();
        assert!(build_pool_mask_with(&l, PoolMaskOptions { gist_self: true, strict: true }).is_err());
        let m = build_pool_mask(&l).unwrap();
        // last gist owns the single leftover token
        assert_eq!(m.allowed_in_row(8), vec![0, 5, 8]);
    }

    #[test]
    fn gistpool_default_small_example() {
        // BOS c1 c2 g1 c3 c4 g2
        let l = SequenceLayout::interspersed(4, 2, 0, 0).unwrap();
        let m = build_gistpool_mask(&l, &GistPoolKnobs::default()).unwrap();
        assert_eq!(m.allowed_in_row(6), vec![0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(m.allowed_in_row(3), vec![0, 1, 2, 3]);
        // context rows never see gists with the default knobs
        assert_eq!(m.allowed_in_row(4), vec![0, 1, 2, 4]);
    }

    #[test]
    fn gistpool_single_window() {
        let l = SequenceLayout::interspersed(6, 2, 0, 0).unwrap();
        let k = GistPoolKnobs {
            pooling_windows: PoolingWindows::Finite(1),
            gists_attend_gists: false,
            ..GistPoolKnobs::default()
        };
        let m = build_gistpool_mask(&l, &k).unwrap();
        // BOS c c g c c g c c g
        assert_eq!(m.allowed_in_row(9), vec![0, 7, 8, 9]);
    }

    #[test]
    fn unbounded_knobs_need_bos() {
        let k = GistPoolKnobs {
            pooling_windows: PoolingWindows::Unbounded,
            gists_attend_bos: false,
            ..GistPoolKnobs::default()
        };
        assert!(k.validate().is_err());
        assert_eq!(GistPoolKnobs::ablation_grid().len(), 40);
    }

    #[test]
    fn causal_checked_as_gist_reports_bottleneck() {
        let l = SequenceLayout::appended(3, 1, 2, 1).unwrap();
        let v = validate_mask(&build_causal(&l), &l, &MaskMethod::Gist);
        assert!(!v.is_empty());
        assert!(v.iter().any(|x| x.kind == ViolationKind::Bottleneck));
    }

    #[test]
    fn single_flip_in_pool_mask_is_one_violation() {
        let l = SequenceLayout::appended(8, 4, 1, 1).unwrap();
        let method = MaskMethod::Pool { gist_self: true };
        let mut m = build_pool_mask(&l).unwrap();
        assert!(validate_mask(&m, &l, &method).is_empty());
        m.set(10, 2, true);
        let v = validate_mask(&m, &l, &method);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].row, v[0].col, v[0].kind), (10, Some(2), ViolationKind::Window));
    }

    #[test]
    fn text_and_bitset_agree() {
        let l = SequenceLayout::interspersed(7, 3, 2, 1).unwrap();
        let m = build_gistpool_mask(&l, &GistPoolKnobs::default()).unwrap();
        let a = AttentionMask::from_text(&m.to_text()).unwrap();
        let b = AttentionMask::from_bitset(&m.to_bitset()).unwrap();
        assert_eq!(a, m);
        assert_eq!(b, m);
    }

    #[test]
    fn from_roles_infers_arrangement() {
        let l = SequenceLayout::interspersed(5, 2, 1, 1).unwrap();
        let back = SequenceLayout::from_roles(l.roles().to_vec(), 2).unwrap();
        assert_eq!(back.arrangement(), Arrangement::Interspersed);
        let mut bad = l.roles().to_vec();
        bad.swap(1, 3);
        assert!(SequenceLayout::from_roles(bad, 2).is_err());
    }
}
