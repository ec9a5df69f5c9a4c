//! Critical points, signed connecting orbits and the Morse-Smale-Witten
//! complex of a negative gradient flow on a block.
//!
//! # Orientation convention
//!
//! Each unstable manifold `W^u(x)` is oriented by the ordered unstable
//! eigenvectors of the Hessian at `x`. A connecting orbit from `x` (index `k`)
//! to `y` (index `k − 1`) leaves `x` at a point `p0` of the small unstable
//! sphere. The frame `[X(p0), T_1, …, T_{k−1}]`, with `T_i` a positively
//! oriented tangent frame of the sphere (outward normal first), is
//! transported along the orbit. Near `y` it is compared with
//! `[X̂, W^u(y)]` modulo the stable directions of `y` complementary to `X̂`.
//! The witness sign is the product of the two orientation signs. For
//! `k = 1` this reduces to `∂x = y_+ − y_−`, where `y_±` is the endpoint of
//! the branch leaving in the `±e_1` direction.

use std::cmp::Ordering;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::block::GridBlock;
use crate::expr::{EvalError, Expr, FieldDef, ScalarFunction};
use crate::flow::{
    classify_limit, integrate_with, transport_frame, Control, FlowError, LimitClass, LimitOptions, Step,
    StepObserver, Trajectory,
};
use crate::homalg::{verify_d_squared, ChainComplex, Coefficients, DSquaredFailure, IntMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MorseError {
    #[error("degenerate critical point at {coords:?} (nondegeneracy margin {margin:e}); re-perturb")]
    Degenerate { coords: Vec<f64>, margin: f64 },
    #[error("connection counting from index {0} is not supported (indices 1 and 2 only)")]
    UnsupportedIndex(usize),
    #[error("orientation unresolved for orbit {source_id} -> {target_id} (determinant {det:e}); tighten tolerances")]
    OrientationUnresolved { source_id: usize, target_id: usize, det: f64 },
    #[error("counts requested for {source_id} -> {target_id} with indices {source_index} and {target_index}")]
    IndexGap {
        source_id: usize,
        target_id: usize,
        source_index: usize,
        target_index: usize,
    },
    #[error("∂² ≠ 0: {0}; a connecting orbit was missed or double counted")]
    DSquared(DSquaredFailure),
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("integration failed: {0}")]
    Flow(#[from] FlowError),
}

#[derive(Clone, Debug, Serialize)]
pub struct CriticalPoint {
    pub id: usize,
    pub coords: Vec<f64>,
    pub value: f64,
    /// Hessian eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    pub index: usize,
    /// Smallest absolute eigenvalue.
    pub margin: f64,
    /// Eigenvectors of the negative eigenvalues, ascending, each with its
    /// first nonzero component positive.
    pub unstable_frame: Vec<Vec<f64>>,
    /// Remaining eigenvectors, same normalization.
    pub stable_frame: Vec<Vec<f64>>,
}

impl CriticalPoint {
    pub fn label(&self) -> String {
        format!("x{}", self.id)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CriticalOptions {
    /// Newton seeds per cube edge.
    pub seeds_per_axis: usize,
    /// Newton step tolerance; duplicates are merged within ten times this.
    pub newton_tol: f64,
    pub margin_tol: f64,
    pub max_iterations: usize,
    /// Report degenerate points instead of failing.
    pub allow_degenerate: bool,
}

impl Default for CriticalOptions {
    fn default() -> Self {
        CriticalOptions {
            seeds_per_axis: 2,
            newton_tol: 1e-9,
            margin_tol: 1e-6,
            max_iterations: 60,
            allow_degenerate: false,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sign_normalize(mut v: Vec<f64>) -> Vec<f64> {
    if let Some(first) = v.iter().find(|c| c.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
    }
    v
}

/// Damped Newton iteration on `∇F = 0`; `eval` returns the gradient and the
/// Hessian. Singular Hessians fall back to the SVD pseudo-inverse.
pub(crate) fn newton_with(
    eval: impl Fn(&[f64]) -> Option<(Vec<f64>, DMatrix<f64>)>,
    seed: &[f64],
    step_tol: f64,
    max_iterations: usize,
) -> Option<Vec<f64>> {
    let m = seed.len();
    let mut x = seed.to_vec();
    let (mut g, mut h) = eval(&x)?;
    for _ in 0..max_iterations {
        let rhs = DMatrix::from_column_slice(m, 1, &g.iter().map(|v| -v).collect::<Vec<_>>());
        let step = h.clone().svd(true, true).solve(&rhs, 1e-12).ok()?;
        let step: Vec<f64> = step.iter().copied().collect();
        let g0 = norm(&g);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + t * s).collect();
            if let Some((gc, hc)) = eval(&cand) {
                if norm(&gc) < g0 || g0 == 0.0 || t < 1e-6 {
                    accepted = Some((cand, gc, hc));
                    break;
                }
            }
            t *= 0.5;
        }
        let (cand, gc, hc) = accepted?;
        let moved = t * norm(&step);
        x = cand;
        g = gc;
        h = hc;
        if !x.iter().all(|v| v.is_finite()) {
            return None;
        }
        let scale = 1.0 + x.iter().fold(0.0, |a: f64, v| a.max(v.abs()));
        if moved < step_tol && norm(&g) < 1e-8 * scale {
            return Some(x);
        }
    }
    None
}

fn newton(sf: &ScalarFunction, seed: &[f64], opts: &CriticalOptions) -> Option<Vec<f64>> {
    let m = sf.dim();
    newton_with(
        |x| {
            let g = sf.gradient(x).ok()?;
            let h = DMatrix::from_row_slice(m, m, &sf.hessian(x).ok()?);
            Some((g, h))
        },
        seed,
        opts.newton_tol,
        opts.max_iterations,
    )
}

/// Critical points of `f` in `b`, sorted by (index, value, coordinates) with
/// ids assigned in that order.
pub fn find_critical_points(
    f: &Expr,
    b: &GridBlock,
    opts: &CriticalOptions,
) -> Result<Vec<CriticalPoint>, MorseError> {
    let m = b.dim();
    let sf = ScalarFunction::new(f.clone(), m);
    let seeds = b.interior_samples(opts.seeds_per_axis);
    let roots: Vec<Vec<f64>> = seeds
        .par_iter()
        .filter_map(|s| newton(&sf, s, opts))
        .filter(|x| b.contains(x))
        .collect();
    let merge = 10.0 * opts.newton_tol.max(1e-9);
    let mut unique: Vec<Vec<f64>> = Vec::new();
    for r in roots {
        if !unique.iter().any(|u| dist(u, &r) <= merge) {
            unique.push(r);
        }
    }
    warn_missed_cells(&sf, b, &unique);
    let mut points = Vec::with_capacity(unique.len());
    for x in unique {
        let h = DMatrix::from_row_slice(m, m, &sf.hessian(&x)?);
        let h = (&h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(h);
        let mut pairs: Vec<(f64, Vec<f64>)> = (0..m)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let margin = pairs.iter().map(|p| p.0.abs()).fold(f64::INFINITY, f64::min);
        if margin <= opts.margin_tol && !opts.allow_degenerate {
            return Err(MorseError::Degenerate { coords: x, margin });
        }
        let index = pairs.iter().filter(|p| p.0 < 0.0).count();
        let eigenvalues = pairs.iter().map(|p| p.0).collect();
        let frames: Vec<Vec<f64>> = pairs.into_iter().map(|p| sign_normalize(p.1)).collect();
        points.push(CriticalPoint {
            id: 0,
            value: sf.value(&x)?,
            coords: x,
            eigenvalues,
            index,
            margin,
            unstable_frame: frames[..index].to_vec(),
            stable_frame: frames[index..].to_vec(),
        });
    }
    points.sort_by(|a, b| {
        a.index
            .cmp(&b.index)
            .then(a.value.total_cmp(&b.value))
            .then_with(|| {
                a.coords
                    .iter()
                    .zip(&b.coords)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
    });
    for (i, p) in points.iter_mut().enumerate() {
        p.id = i;
    }
    Ok(points)
}

/// Warns about cubes where every gradient component changes sign over the
/// corners but no critical point was found.
fn warn_missed_cells(sf: &ScalarFunction, b: &GridBlock, found: &[Vec<f64>]) {
    let h = b.grid().spacing;
    let m = b.dim();
    for c in b.cubes() {
        let lo: Vec<f64> = c
            .iter()
            .enumerate()
            .map(|(a, &i)| b.grid().origin(a) + h * i as f64)
            .collect();
        let mut pos = vec![false; m];
        let mut neg = vec![false; m];
        for mask in 0..(1usize << m) {
            let p: Vec<f64> = (0..m)
                .map(|a| lo[a] + if mask >> a & 1 == 1 { h } else { 0.0 })
                .collect();
            let Ok(g) = sf.gradient(&p) else { return };
            for a in 0..m {
                pos[a] |= g[a] > 0.0;
                neg[a] |= g[a] < 0.0;
            }
        }
        let straddles = (0..m).all(|a| pos[a] && neg[a]);
        let inside = found
            .iter()
            .any(|x| (0..m).all(|a| x[a] >= lo[a] - 1e-9 && x[a] <= lo[a] + h + 1e-9));
        if straddles && !inside {
            log::warn!("Newton found no critical point in the sign-change cell at {lo:?}");
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConnectionOptions {
    /// Radius of the unstable sphere around the source.
    pub delta_u: f64,
    /// Initial seeds on the unstable circle for index-2 sources.
    pub circle_seeds: usize,
    /// Arcs whose orbits come closer than this to a target are subdivided.
    pub refine_trigger: f64,
    /// Maximum closest approach for attributing a separatrix to a target.
    pub witness_radius: f64,
    /// Radius of the ball around the target where orientations are compared.
    pub sign_ball: f64,
    pub min_det: f64,
    pub limit: LimitOptions,
    pub coefficients: Coefficients,
}

impl Default for ConnectionOptions {
    fn default() -> Self {
        let limit = LimitOptions::default();
        ConnectionOptions {
            delta_u: 10.0 * limit.capture_radius,
            circle_seeds: 32,
            refine_trigger: 0.1,
            witness_radius: 0.02,
            sign_ball: 0.05,
            min_det: 1e-6,
            limit,
            coefficients: Coefficients::Integer,
        }
    }
}

/// One connecting orbit from `source` to `target`.
#[derive(Clone, Debug, Serialize)]
pub struct Witness {
    pub seed: Vec<f64>,
    /// Branch sign (±1) for index 1, angle on the unstable circle for index 2.
    pub parameter: f64,
    pub sign: i64,
    /// Closest approach of the orbit to the target.
    pub approach: f64,
    pub flight_time: f64,
    pub det: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConnectionCount {
    pub source: usize,
    pub target: usize,
    pub n: i64,
    pub witnesses: Vec<Witness>,
}

struct Probe {
    class: LimitClass,
    closest: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum ClassKey {
    Converged(usize),
    Exited,
    Budget,
}

impl Probe {
    fn key(&self) -> ClassKey {
        match self.class {
            LimitClass::ConvergedTo { id } => ClassKey::Converged(id),
            LimitClass::ExitedBlock { .. } => ClassKey::Exited,
            LimitClass::BudgetExceeded => ClassKey::Budget,
        }
    }
}

struct Context<'a> {
    field: &'a FieldDef,
    block: &'a GridBlock,
    source: &'a CriticalPoint,
    crits: &'a [CriticalPoint],
    crit_coords: Vec<Vec<f64>>,
    targets: Vec<usize>,
    opts: &'a ConnectionOptions,
}

impl Context<'_> {
    fn seed(&self, param: f64) -> Vec<f64> {
        let e = &self.source.unstable_frame;
        let d = self.opts.delta_u;
        let dir: Vec<f64> = if e.len() == 1 {
            e[0].iter().map(|c| param * c).collect()
        } else {
            (0..e[0].len())
                .map(|i| param.cos() * e[0][i] + param.sin() * e[1][i])
                .collect()
        };
        self.source.coords.iter().zip(&dir).map(|(x, v)| x + d * v).collect()
    }

    fn probe(&self, param: f64) -> Result<Probe, FlowError> {
        let out = classify_limit(self.field, &self.seed(param), &self.crit_coords, self.block, &self.opts.limit)?;
        let closest = self.targets.iter().map(|&t| out.closest[t]).collect();
        if out.class == LimitClass::BudgetExceeded {
            log::warn!(
                "orbit from {} at parameter {param} exhausted the time budget; counted as non-connecting",
                self.source.label()
            );
        }
        Ok(Probe {
            class: out.class,
            closest,
        })
    }

    /// Index into `targets` of the closest target and its distance.
    fn nearest_target(&self, p: &Probe) -> Option<(usize, f64)> {
        p.closest
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    fn is_target_capture(&self, p: &Probe) -> Option<usize> {
        match p.class {
            LimitClass::ConvergedTo { id } => self.targets.iter().position(|&t| t == id),
            _ => None,
        }
    }
}

/// Connection counts from `source` to every critical point of index one
/// less, in the order of `crits`.
pub fn connections_from(
    field: &FieldDef,
    block: &GridBlock,
    source: &CriticalPoint,
    crits: &[CriticalPoint],
    opts: &ConnectionOptions,
) -> Result<Vec<ConnectionCount>, MorseError> {
    let k = source.index;
    if k == 0 {
        return Ok(Vec::new());
    }
    if k > 2 {
        return Err(MorseError::UnsupportedIndex(k));
    }
    let targets: Vec<usize> = crits
        .iter()
        .enumerate()
        .filter(|(_, c)| c.index + 1 == k)
        .map(|(i, _)| i)
        .collect();
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let ctx = Context {
        field,
        block,
        source,
        crits,
        crit_coords: crits.iter().map(|c| c.coords.clone()).collect(),
        targets,
        opts,
    };
    // (parameter, index into targets)
    let found: Vec<(f64, usize)> = if k == 1 {
        let mut f = Vec::new();
        for s in [1.0, -1.0] {
            let p = ctx.probe(s)?;
            if let LimitClass::ConvergedTo { id } = p.class {
                match ctx.targets.iter().position(|&t| t == id) {
                    Some(t) => f.push((s, t)),
                    None => log::warn!(
                        "branch of {} converged to {} of index {}; not Morse-Smale",
                        source.label(),
                        crits[id].label(),
                        crits[id].index
                    ),
                }
            }
        }
        f
    } else {
        separatrices(&ctx)?
    };

    let mut counts: Vec<ConnectionCount> = ctx
        .targets
        .iter()
        .map(|&t| ConnectionCount {
            source: source.id,
            target: crits[t].id,
            n: 0,
            witnesses: Vec::new(),
        })
        .collect();
    let witnesses: Vec<(usize, Witness)> = found
        .par_iter()
        .map(|&(param, t)| witness(&ctx, param, ctx.targets[t]).map(|w| (t, w)))
        .collect::<Result<_, _>>()?;
    for (t, w) in witnesses {
        counts[t].n += w.sign;
        counts[t].witnesses.push(w);
    }
    for c in &mut counts {
        c.witnesses.sort_by(|a, b| a.parameter.total_cmp(&b.parameter));
        if opts.coefficients == Coefficients::Mod2 {
            c.n = c.n.rem_euclid(2);
        }
    }
    Ok(counts)
}

/// Connection count between one pair.
pub fn count_connections(
    field: &FieldDef,
    block: &GridBlock,
    x: &CriticalPoint,
    y: &CriticalPoint,
    crits: &[CriticalPoint],
    opts: &ConnectionOptions,
) -> Result<ConnectionCount, MorseError> {
    if x.index != y.index + 1 {
        return Err(MorseError::IndexGap {
            source_id: x.id,
            target_id: y.id,
            source_index: x.index,
            target_index: y.index,
        });
    }
    Ok(connections_from(field, block, x, crits, opts)?
        .into_iter()
        .find(|c| c.target == y.id)
        .unwrap_or(ConnectionCount {
            source: x.id,
            target: y.id,
            n: 0,
            witnesses: Vec::new(),
        }))
}

const TAU: f64 = std::f64::consts::TAU;
/// Fractional part of the golden ratio; keeps the seed circle off symmetry axes.
const PHASE: f64 = 0.618_033_988_749_894_9;

fn separatrices(ctx: &Context<'_>) -> Result<Vec<(f64, usize)>, MorseError> {
    let n = ctx.opts.circle_seeds.max(4);
    let initial: Vec<f64> = (0..n).map(|j| TAU * (j as f64 + PHASE) / n as f64).collect();
    let mut samples: Vec<(f64, Probe)> = initial
        .par_iter()
        .map(|&t| ctx.probe(t).map(|p| (t, p)))
        .collect::<Result<_, _>>()?;

    // subdivide arcs that pass near a target so that classes separate
    for _ in 0..3 {
        let len = samples.len();
        let near = |p: &Probe| ctx.nearest_target(p).is_some_and(|(_, d)| d < ctx.opts.refine_trigger);
        let fresh: Vec<f64> = (0..len)
            .filter(|&j| near(&samples[j].1) || near(&samples[(j + 1) % len].1))
            .flat_map(|j| {
                let a = samples[j].0;
                let b = if j + 1 == len { samples[0].0 + TAU } else { samples[j + 1].0 };
                (1..4).map(move |s| (a + (b - a) * s as f64 / 4.0) % TAU)
            })
            .collect();
        if fresh.is_empty() {
            break;
        }
        let probed: Vec<(f64, Probe)> = fresh
            .par_iter()
            .map(|&t| ctx.probe(t).map(|p| (t, p)))
            .collect::<Result<_, _>>()?;
        samples.extend(probed);
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let (params, probes): (Vec<f64>, Vec<Probe>) = samples.into_iter().unzip();

    let mut found: Vec<(f64, usize)> = Vec::new();
    let push = |param: f64, t: usize, found: &mut Vec<(f64, usize)>| {
        let dup = found.iter().any(|&(q, s)| {
            let d = (q - param).rem_euclid(TAU);
            s == t && d.min(TAU - d) < 1e-6
        });
        if !dup {
            found.push((param, t));
        }
    };
    for (j, p) in probes.iter().enumerate() {
        if let Some(t) = ctx.is_target_capture(p) {
            push(params[j], t, &mut found);
        }
    }
    let len = params.len();
    for j in 0..len {
        let j1 = (j + 1) % len;
        let a = params[j];
        let b = if j1 == 0 { params[0] + TAU } else { params[j1] };
        let (pa, pb) = (&probes[j], &probes[j1]);
        if ctx.is_target_capture(pa).is_some() || ctx.is_target_capture(pb).is_some() {
            continue;
        }
        if pa.key() != pb.key() {
            if let Some((param, t)) = bisect(ctx, a, b, pa.key())? {
                push(param.rem_euclid(TAU), t, &mut found);
            }
        } else if let Some((t, _)) = [pa, pb]
            .iter()
            .filter_map(|p| ctx.nearest_target(p))
            .filter(|(_, d)| *d < ctx.opts.refine_trigger)
            .min_by(|x, y| x.1.total_cmp(&y.1))
        {
            if let Some(param) = golden(ctx, a, b, t)? {
                push(param.rem_euclid(TAU), t, &mut found);
            }
        }
    }
    Ok(found)
}

/// Narrows a class change on `[a, b]` to a separatrix and attributes it.
fn bisect(ctx: &Context<'_>, mut a: f64, mut b: f64, key_a: ClassKey) -> Result<Option<(f64, usize)>, MorseError> {
    let mut best: Option<(f64, usize, f64)> = None;
    for _ in 0..60 {
        if b - a < 1e-14 {
            break;
        }
        let mid = 0.5 * (a + b);
        let p = ctx.probe(mid)?;
        if let Some(t) = ctx.is_target_capture(&p) {
            return Ok(Some((mid, t)));
        }
        if let Some((t, d)) = ctx.nearest_target(&p) {
            if best.is_none_or(|(_, _, bd)| d < bd) {
                best = Some((mid, t, d));
            }
        }
        if p.key() == key_a {
            a = mid;
        } else {
            b = mid;
        }
    }
    match best {
        Some((param, t, d)) if d < ctx.opts.witness_radius => Ok(Some((param, t))),
        _ => {
            log::warn!(
                "class change near parameter {a} on the unstable circle of {} is not explained by a target",
                ctx.source.label()
            );
            Ok(None)
        }
    }
}

/// Golden-section search for an orbit hitting target `t` on `[a, b]`.
fn golden(ctx: &Context<'_>, a: f64, b: f64, t: usize) -> Result<Option<f64>, MorseError> {
    const R: f64 = 0.618_033_988_749_894_9;
    let eval = |x: f64| -> Result<(f64, bool), MorseError> {
        let p = ctx.probe(x)?;
        Ok((p.closest[t], ctx.is_target_capture(&p) == Some(t)))
    };
    let (mut lo, mut hi) = (a, b);
    let mut x1 = hi - R * (hi - lo);
    let mut x2 = lo + R * (hi - lo);
    let (mut f1, c1) = eval(x1)?;
    if c1 {
        return Ok(Some(x1));
    }
    let (mut f2, c2) = eval(x2)?;
    if c2 {
        return Ok(Some(x2));
    }
    for _ in 0..60 {
        if hi - lo < 1e-13 {
            break;
        }
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - R * (hi - lo);
            let (f, c) = eval(x1)?;
            if c {
                return Ok(Some(x1));
            }
            f1 = f;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + R * (hi - lo);
            let (f, c) = eval(x2)?;
            if c {
                return Ok(Some(x2));
            }
            f2 = f;
        }
    }
    let (x, f) = if f1 < f2 { (x1, f1) } else { (x2, f2) };
    Ok((f < ctx.opts.limit.capture_radius).then_some(x))
}

struct BallEntry<'a> {
    center: &'a [f64],
    radius: f64,
    closest: f64,
}

impl StepObserver for BallEntry<'_> {
    fn on_step(&mut self, step: &Step<'_>) -> Control {
        let d = dist(step.x1, self.center);
        self.closest = self.closest.min(d);
        if d > self.radius {
            return Control::Continue;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if dist(&step.interpolate(mid), self.center) > self.radius {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Control::StopAt(step.t0 + hi * (step.t1 - step.t0), step.interpolate(hi))
    }
}

fn solve_square(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().lu().solve(b)
}

/// Sign of the witness orbit from `param` into the ball around `crits[target]`.
fn witness(ctx: &Context<'_>, param: f64, target: usize) -> Result<Witness, MorseError> {
    let y = &ctx.crits[target];
    let x = ctx.source;
    let k = x.index;
    let m = x.coords.len();
    let seed = ctx.seed(param);
    let others = ctx
        .crits
        .iter()
        .filter(|c| c.id != y.id)
        .map(|c| dist(&c.coords, &y.coords))
        .fold(f64::INFINITY, f64::min);
    let rho = ctx.opts.sign_ball.min(0.25 * others);
    let mut obs = BallEntry {
        center: &y.coords,
        radius: rho,
        closest: dist(&seed, &y.coords),
    };
    let field = ctx.field;
    let (traj, entered) = integrate_with(
        |p: &[f64], out: &mut [f64]| field.eval_into(p, out).map_err(FlowError::from),
        &seed,
        ctx.opts.limit.budget,
        &ctx.opts.limit.tolerances,
        &mut obs,
    )?;
    if !entered {
        return Err(MorseError::OrientationUnresolved {
            source_id: x.id,
            target_id: y.id,
            det: 0.0,
        });
    }
    let mut counted = Witness {
        seed: seed.clone(),
        parameter: param,
        sign: 1,
        approach: obs.closest,
        flight_time: traj.duration(),
        det: 1.0,
    };
    if ctx.opts.coefficients == Coefficients::Mod2 {
        return Ok(counted);
    }

    // W0 = [X(p0), sphere tangents]
    let x0 = field.eval(&seed)?;
    let mut w0 = vec![x0];
    if k == 2 {
        let e = &x.unstable_frame;
        w0.push((0..m).map(|i| -param.sin() * e[0][i] + param.cos() * e[1][i]).collect());
    }
    let e = DMatrix::from_fn(k, k, |r, c| dot(&x.unstable_frame[r], &w0[c]));
    let source_sign = e.determinant().signum();

    let transported = transport_frame(field, &Trajectory { ..traj }, &w0)?;
    let xt = field.eval(&transported.endpoint)?;
    let xt_hat: Vec<f64> = {
        let n = norm(&xt);
        xt.iter().map(|c| c / n).collect()
    };
    // basis [X̂, W^u(y), C] with C the stable directions of y orthogonal to X̂
    let mut basis: Vec<Vec<f64>> = vec![xt_hat.clone()];
    basis.extend(y.unstable_frame.iter().cloned());
    let mut ortho: Vec<Vec<f64>> = basis.clone();
    gram_schmidt_in_place(&mut ortho);
    let mut pool = y.stable_frame.clone();
    while basis.len() < m {
        let (best, resid) = pool
            .iter()
            .enumerate()
            .map(|(i, s)| (i, residual(s, &ortho)))
            .max_by(|a, b| norm(&a.1).total_cmp(&norm(&b.1)))
            .expect("stable frame completes the basis");
        pool.remove(best);
        let n = norm(&resid);
        let unit: Vec<f64> = resid.iter().map(|c| c / n).collect();
        basis.push(unit.clone());
        ortho.push(unit);
    }
    let bmat = DMatrix::from_fn(m, m, |r, c| basis[c][r]);
    let vmat = DMatrix::from_fn(m, k, |r, c| transported.vectors[c][r]);
    let coef = solve_square(&bmat, &vmat).ok_or(MorseError::OrientationUnresolved {
        source_id: x.id,
        target_id: y.id,
        det: 0.0,
    })?;
    let det = coef.rows(0, k).into_owned().determinant();
    if det.abs() < ctx.opts.min_det || !det.is_finite() {
        return Err(MorseError::OrientationUnresolved {
            source_id: x.id,
            target_id: y.id,
            det,
        });
    }
    counted.sign = (source_sign * det.signum()) as i64;
    counted.det = det;
    Ok(counted)
}

fn residual(v: &[f64], ortho: &[Vec<f64>]) -> Vec<f64> {
    let mut r = v.to_vec();
    for q in ortho {
        let c = dot(&r, q);
        r.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
    }
    r
}

fn gram_schmidt_in_place(vs: &mut [Vec<f64>]) {
    for i in 0..vs.len() {
        let r = residual(&vs[i], &vs[..i]);
        let n = norm(&r);
        vs[i] = r.iter().map(|c| c / n).collect();
    }
}

/// Assembles `∂_k⟨x⟩ = Σ n(x, y)⟨y⟩` over degrees `0..=top` and checks `∂² = 0`.
pub fn build_complex(
    crits: &[CriticalPoint],
    counts: &[ConnectionCount],
    top: usize,
    coefficients: Coefficients,
) -> Result<ChainComplex, MorseError> {
    let top = top.max(crits.iter().map(|c| c.index).max().unwrap_or(0));
    let mut generators: Vec<Vec<String>> = vec![Vec::new(); top + 1];
    let mut slot = vec![0usize; crits.len()];
    for c in crits {
        slot[c.id] = generators[c.index].len();
        generators[c.index].push(c.label());
    }
    let mut boundaries: Vec<IntMatrix> = (1..=top)
        .map(|k| IntMatrix::zeros(generators[k - 1].len(), generators[k].len()))
        .collect();
    for cnt in counts {
        let (x, y) = (&crits[cnt.source], &crits[cnt.target]);
        if x.index != y.index + 1 {
            return Err(MorseError::IndexGap {
                source_id: x.id,
                target_id: y.id,
                source_index: x.index,
                target_index: y.index,
            });
        }
        let d = &mut boundaries[x.index - 1];
        d.set(slot[y.id], slot[x.id], cnt.n);
    }
    let complex = ChainComplex::with_coefficients(generators, boundaries, coefficients)
        .expect("shapes follow generator counts");
    verify_d_squared(&complex).map_err(MorseError::DSquared)?;
    Ok(complex)
}

/// Critical points, all counts between index-adjacent pairs, and the complex.
#[derive(Clone, Debug, Serialize)]
pub struct MorseComplex {
    pub critical_points: Vec<CriticalPoint>,
    pub counts: Vec<ConnectionCount>,
    pub complex: ChainComplex,
}

pub fn morse_complex(
    f: &Expr,
    block: &GridBlock,
    crit_opts: &CriticalOptions,
    conn_opts: &ConnectionOptions,
) -> Result<MorseComplex, MorseError> {
    let crits = find_critical_points(f, block, crit_opts)?;
    let field = ScalarFunction::new(f.clone(), block.dim()).negative_gradient_field();
    let mut counts = Vec::new();
    for x in crits.iter().filter(|c| c.index > 0) {
        counts.extend(connections_from(&field, block, x, &crits, conn_opts)?);
    }
    let complex = build_complex(&crits, &counts, block.dim(), conn_opts.coefficients)?;
    Ok(MorseComplex {
        critical_points: crits,
        counts,
        complex,
    })
}

/// Largest `|∇f|` over a closed lattice of the block.
pub fn gradient_scale(f: &Expr, block: &GridBlock) -> Result<f64, EvalError> {
    let sf = ScalarFunction::new(f.clone(), block.dim());
    let mut scale: f64 = 0.0;
    for p in block.closed_samples(2) {
        scale = scale.max(norm(&sf.gradient(&p)?));
    }
    Ok(scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{build_block, BlockSpec, Grid};
    use crate::expr::parse;

    fn square(r: f64, h: f64) -> GridBlock {
        build_block(&BlockSpec::Box(vec![(-r, r), (-r, r)]), &Grid::with_spacing(h)).unwrap()
    }

    #[test]
    fn double_well_critical_points() {
        let f = parse("(x1^2-1)^2 + x2^2", 2).unwrap();
        let cps = find_critical_points(&f, &square(2.0, 0.25), &CriticalOptions::default()).unwrap();
        assert_eq!(cps.len(), 3);
        assert_eq!(cps.iter().map(|c| c.index).collect::<Vec<_>>(), vec![0, 0, 1]);
        let saddle = &cps[2];
        assert!(norm(&saddle.coords) < 1e-9);
        assert!((saddle.eigenvalues[0] + 4.0).abs() < 1e-9 && (saddle.eigenvalues[1] - 2.0).abs() < 1e-9);
        assert_eq!(saddle.unstable_frame.len(), 1);
        assert!(saddle.unstable_frame[0][0] > 0.0);
    }

    #[test]
    fn no_critical_points_for_linear_function() {
        let b = build_block(&BlockSpec::Box(vec![(-1.0, 1.0)]), &Grid::with_spacing(0.25)).unwrap();
        let cps = find_critical_points(&parse("-x1", 1).unwrap(), &b, &CriticalOptions::default()).unwrap();
        assert!(cps.is_empty());
    }

    #[test]
    fn degenerate_point_is_an_error() {
        let b = build_block(&BlockSpec::Box(vec![(-1.0, 1.0)]), &Grid::with_spacing(0.25)).unwrap();
        let err = find_critical_points(&parse("x1^3", 1).unwrap(), &b, &CriticalOptions::default());
        assert!(matches!(err, Err(MorseError::Degenerate { .. })), "{err:?}");
    }

    #[test]
    fn double_well_complex() {
        let f = parse("(x1^2-1)^2 + x2^2", 2).unwrap();
        let mc = morse_complex(&f, &square(2.0, 0.25), &CriticalOptions::default(), &ConnectionOptions::default())
            .unwrap();
        let d1 = mc.complex.boundary(1);
        assert_eq!((d1.rows(), d1.cols()), (2, 1));
        // minima sorted by value then coordinates: (-1,0) first
        assert_eq!(d1.column(0), vec![-1, 1]);
        assert!(mc.counts.iter().all(|c| c.witnesses.len() == 1));
    }

    #[test]
    fn mod2_mode_reduces_counts() {
        let f = parse("(x1^2-1)^2 + x2^2", 2).unwrap();
        let opts = ConnectionOptions {
            coefficients: Coefficients::Mod2,
            ..ConnectionOptions::default()
        };
        let mc = morse_complex(&f, &square(2.0, 0.25), &CriticalOptions::default(), &opts).unwrap();
        assert_eq!(mc.complex.boundary(1).column(0), vec![1, 1]);
        let total: usize = mc.counts.iter().map(|c| c.witnesses.len()).sum();
        assert_eq!(total % 2, 0);
    }

    #[test]
    fn index_gap_is_rejected() {
        let f = parse("(x1^2-1)^2 + x2^2", 2).unwrap();
        let b = square(2.0, 0.25);
        let cps = find_critical_points(&f, &b, &CriticalOptions::default()).unwrap();
        let field = ScalarFunction::new(f, 2).negative_gradient_field();
        let err = count_connections(&field, &b, &cps[0], &cps[1], &cps, &ConnectionOptions::default());
        assert!(matches!(err, Err(MorseError::IndexGap { .. })));
    }

    #[test]
    fn product_function_in_three_dimensions() {
        let f = parse("(x1^2-1)^2 + (x2^2-1)^2 + x3^2", 3).unwrap();
        let b = build_block(
            &BlockSpec::Box(vec![(-2.0, 2.0), (-2.0, 2.0), (-1.0, 1.0)]),
            &Grid::with_spacing(0.5),
        )
        .unwrap();
        let mc = morse_complex(&f, &b, &CriticalOptions::default(), &ConnectionOptions::default()).unwrap();
        assert_eq!(
            (0..3).map(|k| mc.complex.rank(k)).collect::<Vec<_>>(),
            vec![4, 4, 1]
        );
        let d2 = mc.complex.boundary(2);
        assert!(d2.column(0).iter().all(|v| v.abs() == 1));
        let h = crate::homalg::homology(&mc.complex).unwrap();
        assert_eq!(h.betti, vec![1, 0, 0, 0]);
    }
}
