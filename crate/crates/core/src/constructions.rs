//! Hand-built attention heads that copy or mean-pool one position, and the
//! bounded-norm gap curve showing why such heads stop working as length grows.
//!
//! Tokens live in `R^{2d}`: the first half is a positional code `pi_j` on the unit
//! sphere, the second half a value. Logits are raw dot products (no `1/sqrt(d)`).

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

/// How points are laid out on the sphere.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Placement {
    /// Spread all points apart.
    Regular,
    /// Spread `l / xi` window centres apart, then scatter each window inside a cap of chord radius `eps_same / 2`.
    Clustered { xi: usize, eps_same: f64 },
}

#[derive(Clone, Debug)]
pub struct PlacementOptions {
    pub iterations: usize,
    pub restarts: usize,
    /// Riesz exponent; `None` uses `max(d, 2)`.
    pub riesz_s: Option<f64>,
}

impl Default for PlacementOptions {
    fn default() -> Self {
        PlacementOptions {
            iterations: 1000,
            restarts: 5,
            riesz_s: None,
        }
    }
}

/// Window statistics for clustered placements.
#[derive(Clone, Debug, PartialEq)]
pub struct Windows {
    pub xi: usize,
    /// Largest distance between two points of one window.
    pub eps_same: f64,
    /// Smallest distance between points of different windows.
    pub eps_diff: f64,
}

impl Windows {
    pub fn window_of(&self, i: usize) -> usize {
        i / self.xi
    }
}

#[derive(Clone, Debug)]
pub struct SpherePoints {
    /// `(l, d)`, unit rows.
    pub points: Array2<f64>,
    /// Smallest pairwise distance.
    pub epsilon: f64,
    pub windows: Option<Windows>,
}

impl SpherePoints {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Distance from point `i` to its closest other point.
    pub fn nearest_distance(&self, i: usize) -> f64 {
        (0..self.len())
            .filter(|&j| j != i)
            .map(|j| dist(self.points.row(i), self.points.row(j)))
            .fold(f64::INFINITY, f64::min)
    }
}

fn dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn min_pairwise(p: &Array2<f64>) -> f64 {
    let l = p.nrows();
    let mut m = f64::INFINITY;
    for i in 0..l {
        for j in i + 1..l {
            m = m.min(dist(p.row(i), p.row(j)));
        }
    }
    m
}

fn normalize_rows(p: &mut Array2<f64>) {
    for mut r in p.outer_iter_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
}

fn random_sphere(l: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut p = Array2::from_shape_fn((l, d), |_| rng.sample::<f64, _>(StandardNormal));
    normalize_rows(&mut p);
    p
}

/// Riesz energy `sum_{i<j} |pi_i - pi_j|^-s` and its Euclidean gradient.
fn riesz(p: &Array2<f64>, s: f64) -> (f64, Array2<f64>) {
    let (l, d) = p.dim();
    let mut e = 0.0;
    let mut g = Array2::zeros((l, d));
    let mut diff = vec![0.0; d];
    for i in 0..l {
        for j in i + 1..l {
            let mut r2 = 0.0;
            for k in 0..d {
                diff[k] = p[[i, k]] - p[[j, k]];
                r2 += diff[k] * diff[k];
            }
            let r2 = r2.max(1e-300);
            let inv = r2.powf(-s / 2.0);
            e += inv;
            let c = -s * inv / r2;
            for k in 0..d {
                g[[i, k]] += c * diff[k];
                g[[j, k]] -= c * diff[k];
            }
        }
    }
    (e, g)
}

/// Projected descent on Riesz energy with an adaptive step; returns the best-spaced iterate seen.
fn repel(mut p: Array2<f64>, s: f64, iterations: usize) -> Array2<f64> {
    let (mut e, mut g) = riesz(&p, s);
    let mut best = p.clone();
    let mut best_eps = min_pairwise(&p);
    let mut eta = {
        let gmax = g.outer_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max);
        if gmax > 0.0 { 0.1 / gmax } else { 0.0 }
    };
    for _ in 0..iterations {
        if eta == 0.0 {
            break;
        }
        // remove the radial part so the step slides along the sphere
        let mut cand = p.clone();
        for (mut c, (gr, pr)) in cand.outer_iter_mut().zip(g.outer_iter().zip(p.outer_iter())) {
            let radial = gr.dot(&pr);
            c.zip_mut_with(&(&gr - &(&pr * radial)), |x, &t| *x -= eta * t);
        }
        normalize_rows(&mut cand);
        let (ce, cg) = riesz(&cand, s);
        if ce < e {
            p = cand;
            e = ce;
            g = cg;
            eta *= 1.2;
            let eps = min_pairwise(&p);
            if eps > best_eps {
                best_eps = eps;
                best = p.clone();
            }
        } else {
            eta *= 0.5;
            if eta < 1e-300 {
                break;
            }
        }
    }
    best
}

fn regular(l: usize, d: usize, opts: &PlacementOptions, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let s = opts.riesz_s.unwrap_or((d as f64).max(2.0));
    let mut best: Option<(f64, Array2<f64>)> = None;
    for _ in 0..opts.restarts.max(1) {
        let p = repel(random_sphere(l, d, rng), s, opts.iterations);
        let eps = min_pairwise(&p);
        if best.as_ref().is_none_or(|(b, _)| eps > *b) {
            best = Some((eps, p));
        }
    }
    best.unwrap().1
}

/// Unit vector at chord distance `chord` from unit `c`, in a random tangent direction.
fn in_cap(c: ArrayView1<f64>, chord: f64, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let d = c.len();
    let mut t: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let along = t.dot(&c);
    t.zip_mut_with(&c, |x, &ci| *x -= along * ci);
    let n = t.dot(&t).sqrt();
    t /= n;
    let theta = 2.0 * (chord / 2.0).asin();
    &c * theta.cos() + &t * theta.sin()
}

/// Points on the unit sphere in `R^d`, spread by repulsion.
pub fn spaced_sphere_points(l: usize, d: usize, placement: Placement, seed: u64) -> Result<SpherePoints> {
    spaced_sphere_points_with(l, d, placement, seed, &PlacementOptions::default())
}

pub fn spaced_sphere_points_with(
    l: usize,
    d: usize,
    placement: Placement,
    seed: u64,
    opts: &PlacementOptions,
) -> Result<SpherePoints> {
    if l < 2 || d < 2 {
        return Err(Error::Config(format!("need l >= 2 and d >= 2, got l={l} d={d}")));
    }
    let mut rng = substream(seed, &format!("sphere/l{l}/d{d}"));
    match placement {
        Placement::Regular => {
            let points = regular(l, d, opts, &mut rng);
            let epsilon = min_pairwise(&points);
            Ok(SpherePoints {
                points,
                epsilon,
                windows: None,
            })
        }
        Placement::Clustered { xi, eps_same } => {
            if xi == 0 || l % xi != 0 {
                return Err(Error::Config(format!("window size {xi} must divide l={l}")));
            }
            if !(eps_same > 0.0 && eps_same < 2.0) {
                return Err(Error::Config(format!("eps_same must lie in (0, 2), got {eps_same}")));
            }
            let n_win = l / xi;
            let centres = if n_win == 1 {
                random_sphere(1, d, &mut rng)
            } else {
                regular(n_win, d, opts, &mut rng)
            };
            let spacing = if n_win == 1 { 2.0 } else { min_pairwise(&centres) };
            if eps_same >= spacing {
                return Err(Error::Infeasible(format!(
                    "eps_same {eps_same} is not below the achieved window spacing {spacing:.4}"
                )));
            }
            let mut points = Array2::zeros((l, d));
            for w in 0..n_win {
                for k in 0..xi {
                    let row = if xi == 1 {
                        centres.row(w).to_owned()
                    } else {
                        let chord = eps_same / 2.0 * rng.random_range(0.5..=1.0);
                        in_cap(centres.row(w), chord, &mut rng)
                    };
                    points.row_mut(w * xi + k).assign(&row);
                }
            }
            let mut same: f64 = 0.0;
            let mut diff = f64::INFINITY;
            for i in 0..l {
                for j in i + 1..l {
                    let r = dist(points.row(i), points.row(j));
                    if i / xi == j / xi {
                        same = same.max(r);
                    } else {
                        diff = diff.min(r);
                    }
                }
            }
            if n_win == 1 {
                diff = 2.0;
            }
            if same >= diff {
                return Err(Error::Infeasible(format!("windows overlap: eps_same {same:.4} >= eps_diff {diff:.4}")));
            }
            Ok(SpherePoints {
                epsilon: min_pairwise(&points),
                points,
                windows: Some(Windows {
                    xi,
                    eps_same: same,
                    eps_diff: diff,
                }),
            })
        }
    }
}

/// Key, query and value matrices of the copy and pool heads, each `(2d, 2d)`.
#[derive(Clone, Debug)]
pub struct ConstructionMatrices {
    pub d: usize,
    pub f: f64,
    pub k: Array2<f64>,
    pub q: Array2<f64>,
    pub v: Array2<f64>,
}

impl ConstructionMatrices {
    /// `K = I`, `Q` carries `F * I` in its upper-right block, `V` keeps the value half.
    pub fn copy(d: usize, f: f64) -> Self {
        Self::pool(d, f, 1)
    }

    /// As [`copy`](Self::copy) with the value block scaled by `1/xi`.
    pub fn pool(d: usize, f: f64, xi: usize) -> Self {
        let k = Array2::eye(2 * d);
        let mut q = Array2::zeros((2 * d, 2 * d));
        q.slice_mut(s![..d, d..]).assign(&(Array2::eye(d) * f));
        let mut v = Array2::zeros((2 * d, 2 * d));
        v.slice_mut(s![d.., d..]).assign(&(Array2::eye(d) / xi as f64));
        ConstructionMatrices { d, f, k, q, v }
    }
}

/// Context tokens `z_j = [pi_j, value_j]`.
pub fn context_tokens(points: &SpherePoints, values: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[points.points.view(), values.view()]).expect("matching row counts")
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|x| (x - m).exp());
    let z = e.sum();
    e / z
}

/// Logits `z_j^T K^T Q x` for every context token and the softmax-weighted value output.
fn head(tokens: &Array2<f64>, m: &ConstructionMatrices, x: &Array1<f64>) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let keys = tokens.dot(&m.k.t());
    let logits = keys.dot(&m.q.dot(x));
    let w = softmax(&logits);
    let out = tokens.dot(&m.v.t()).t().dot(&w);
    (logits, w, out)
}

#[derive(Clone, Debug)]
pub struct CopyOutcome {
    pub logits: Array1<f64>,
    pub weights: Array1<f64>,
    /// `|attention output - V z_target|`.
    pub output_error: f64,
    /// Largest deviation from `logit_target = F` and `logit_target - logit_j = F (1 - pi_i . pi_j)`.
    pub identity_residual: f64,
    /// Every off-target logit is at most `F - eps^2 F / 2` (slack `1e-10`).
    pub bound_holds: bool,
}

impl CopyOutcome {
    pub fn target_weight(&self, target: usize) -> f64 {
        self.weights[target]
    }
}

/// Attend from the query `x(i) = [0, pi_i]` over the context and compare with token `i`.
pub fn copy_attention(points: &SpherePoints, values: &Array2<f64>, m: &ConstructionMatrices, target: usize) -> Result<CopyOutcome> {
    let (l, d) = points.points.dim();
    if values.dim() != (l, d) || m.d != d || target >= l {
        return Err(Error::Shape(format!(
            "copy head: points {l}x{d}, values {:?}, matrices d={}, target {target}",
            values.dim(),
            m.d
        )));
    }
    let tokens = context_tokens(points, values);
    let mut x = Array1::zeros(2 * d);
    x.slice_mut(s![d..]).assign(&points.points.row(target));
    let (logits, weights, out) = head(&tokens, m, &x);
    let want = m.v.dot(&tokens.row(target));
    let output_error = (&out - &want).mapv(|a| a * a).sum().sqrt();
    let pi = points.points.row(target);
    let mut residual = (logits[target] - m.f).abs();
    let mut bound_holds = true;
    let cap = m.f - points.epsilon * points.epsilon * m.f / 2.0;
    for j in (0..l).filter(|&j| j != target) {
        let exact = m.f * (1.0 - pi.dot(&points.points.row(j)));
        residual = residual.max(((logits[target] - logits[j]) - exact).abs());
        bound_holds &= logits[j] <= cap + 1e-10;
    }
    Ok(CopyOutcome {
        logits,
        weights,
        output_error,
        identity_residual: residual,
        bound_holds,
    })
}

fn min_target_weight(points: &SpherePoints, f: f64) -> f64 {
    // w_i depends only on the Gram row of i, so skip the token algebra here
    let g = points.points.dot(&points.points.t());
    (0..points.len())
        .map(|i| softmax(&(g.row(i).to_owned() * f))[i])
        .fold(f64::INFINITY, f64::min)
}

/// Smallest `F` (to relative `1e-12`) at which every target keeps at least `weight` of the attention.
pub fn copy_scale_for_weight(points: &SpherePoints, weight: f64) -> Result<f64> {
    if !(weight > 0.0 && weight < 1.0) {
        return Err(Error::Config(format!("target weight {weight} outside (0, 1)")));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while min_target_weight(points, hi) < weight {
        lo = hi;
        hi *= 2.0;
        if hi > 1e15 {
            return Err(Error::Infeasible(format!("no F below 1e15 reaches weight {weight}")));
        }
    }
    for _ in 0..200 {
        if hi - lo <= 1e-12 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if min_target_weight(points, mid) >= weight {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopyCurvePoint {
    pub l: usize,
    pub d: usize,
    pub epsilon: f64,
    pub f_required: f64,
    pub target_weight: f64,
}

/// Required copy scale as the number of positions grows.
pub fn copy_scale_curve(d: usize, ls: &[usize], weight: f64, seed: u64) -> Result<Vec<CopyCurvePoint>> {
    ls.par_iter()
        .map(|&l| {
            let pts = spaced_sphere_points(l, d, Placement::Regular, seed)?;
            let f = copy_scale_for_weight(&pts, weight)?;
            Ok(CopyCurvePoint {
                l,
                d,
                epsilon: pts.epsilon,
                f_required: f,
                target_weight: min_target_weight(&pts, f),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PoolOutcome {
    pub logits: Array1<f64>,
    pub weights: Array1<f64>,
    pub output: Array1<f64>,
    /// `max_j in window |w_j - 1/xi|`.
    pub in_window_deviation: f64,
    pub out_of_window_mass: f64,
    /// Largest minus smallest in-window logit.
    pub in_window_spread: f64,
    /// Smallest in-window logit minus largest out-of-window logit.
    pub in_out_gap: f64,
    /// In-window logits are at least `F - eps_same^2 F/2`, others at most `F - eps_diff^2 F/2` (slack `1e-10`).
    pub bounds_hold: bool,
}

/// Attend from `x(w) = [0, mean of pi over window w]` and measure how well the head pools that window.
pub fn pool_attention(points: &SpherePoints, values: &Array2<f64>, m: &ConstructionMatrices, window: usize) -> Result<PoolOutcome> {
    let (l, d) = points.points.dim();
    let win = points
        .windows
        .as_ref()
        .ok_or_else(|| Error::Config("pool head needs clustered points".into()))?;
    if values.dim() != (l, d) || m.d != d || window >= l / win.xi {
        return Err(Error::Shape(format!("pool head: window {window} of {}, values {:?}", l / win.xi, values.dim())));
    }
    let xi = win.xi;
    let members = window * xi..(window + 1) * xi;
    let tokens = context_tokens(points, values);
    let mut x = Array1::zeros(2 * d);
    x.slice_mut(s![d..]).assign(&points.points.slice(s![members.clone(), ..]).mean_axis(Axis(0)).unwrap());
    let (logits, weights, output) = head(&tokens, m, &x);
    let uniform = 1.0 / xi as f64;
    let (mut dev, mut out_mass) = (0.0f64, 0.0);
    let (mut in_lo, mut in_hi, mut out_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    let lower = m.f - win.eps_same * win.eps_same * m.f / 2.0;
    let upper = m.f - win.eps_diff * win.eps_diff * m.f / 2.0;
    let mut bounds_hold = true;
    for j in 0..l {
        if members.contains(&j) {
            dev = dev.max((weights[j] - uniform).abs());
            in_lo = in_lo.min(logits[j]);
            in_hi = in_hi.max(logits[j]);
            bounds_hold &= logits[j] >= lower - 1e-10;
        } else {
            out_mass += weights[j];
            out_hi = out_hi.max(logits[j]);
            bounds_hold &= logits[j] <= upper + 1e-10;
        }
    }
    Ok(PoolOutcome {
        logits,
        weights,
        output,
        in_window_deviation: dev,
        out_of_window_mass: out_mass,
        in_window_spread: in_hi - in_lo,
        in_out_gap: in_lo - out_hi,
        bounds_hold,
    })
}

/// Middle of `2/eps_diff^2 << F << 2/eps_same^2`, taken geometrically.
pub fn pool_scale(win: &Windows) -> f64 {
    (2.0 / (win.eps_diff * win.eps_diff) * 2.0 / (win.eps_same * win.eps_same)).sqrt()
}

#[derive(Clone, Debug)]
pub struct GapCurveOptions {
    pub d: usize,
    pub k_norm: f64,
    pub q_norm: f64,
    pub x_norm: f64,
    pub ls: Vec<usize>,
    pub ascent_steps: usize,
    pub starts: usize,
    pub seed: u64,
    pub placement: PlacementOptions,
}

impl GapCurveOptions {
    /// Unit norm bounds over `l = 4, 8, ..., 1024`.
    pub fn unit(d: usize, seed: u64) -> Self {
        GapCurveOptions {
            d,
            k_norm: 1.0,
            q_norm: 1.0,
            x_norm: 1.0,
            ls: (2..=10).map(|p| 1usize << p).collect(),
            ascent_steps: 200,
            starts: 8,
            seed,
            placement: PlacementOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub l: usize,
    pub d: usize,
    pub epsilon: f64,
    pub gap_bound: f64,
    pub gap_empirical: f64,
    pub target_weight: f64,
}

/// Best top-minus-runner-up logit margin for copying position `i` with `|K^T Q x| <= b`.
///
/// Any vector `y` with `|y| <= |K| |Q| |x|` is reachable as `K^T Q x` (rank one `K`, `Q`), so the
/// search runs over `y` directly: projected subgradient ascent on `min_j (pi_i - pi_j) . y`.
fn best_gap(points: &Array2<f64>, b: f64, steps: usize, starts: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (l, d) = points.dim();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for _ in 0..starts {
        let i = rng.random_range(0..l);
        let pi = points.row(i);
        let mut y: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = y.dot(&y).sqrt();
        y *= b * rng.random::<f64>() / n;
        for t in 0..=steps {
            let logits = points.dot(&y);
            let (mut jstar, mut second) = (usize::MAX, f64::NEG_INFINITY);
            for j in (0..l).filter(|&j| j != i) {
                if logits[j] > second {
                    second = logits[j];
                    jstar = j;
                }
            }
            let gap = logits[i] - second;
            if gap > best.0 {
                best = (gap, softmax(&logits)[i]);
            }
            if t == steps {
                break;
            }
            let eta = b / (1.0 + t as f64).sqrt();
            y.zip_mut_with(&(&pi - &points.row(jstar)), |a, &g| *a += eta * g);
            let n = y.dot(&y).sqrt();
            if n > b {
                y *= b / n;
            }
        }
    }
    best
}

/// Analytic bound `delta(l) d |K| |Q| |x|` next to the best margin found by search, per `l`.
pub fn attention_gap_curve(opts: &GapCurveOptions) -> Result<Vec<GapPoint>> {
    for v in [opts.k_norm, opts.q_norm, opts.x_norm] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::Config(format!("norm bounds must be positive and finite, got {v}")));
        }
    }
    let b = opts.k_norm * opts.q_norm * opts.x_norm;
    opts.ls
        .par_iter()
        .map(|&l| {
            let pts = spaced_sphere_points_with(l, opts.d, Placement::Regular, opts.seed, &opts.placement)?;
            let mut rng = substream(opts.seed, &format!("gap/l{l}/d{}", opts.d));
            let (gap, w) = best_gap(&pts.points, b, opts.ascent_steps, opts.starts, &mut rng);
            Ok(GapPoint {
                l,
                d: opts.d,
                epsilon: pts.epsilon,
                gap_bound: pts.epsilon * opts.d as f64 * b,
                gap_empirical: gap,
                target_weight: w,
            })
        })
        .collect()
}

/// First `l` whose bound and empirical margin are both below `delta`.
pub fn first_below(curve: &[GapPoint], delta: f64) -> Option<usize> {
    curve
        .iter()
        .find(|p| p.gap_bound < delta && p.gap_empirical < delta)
        .map(|p| p.l)
}

/// Rows as CSV with a header.
pub fn to_csv<S: Serialize>(rows: &[S]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Random unit values, one per position.
pub fn random_values(l: usize, d: usize, seed: u64) -> Array2<f64> {
    random_sphere(l, d, &mut substream(seed, "construction-values"))
}
