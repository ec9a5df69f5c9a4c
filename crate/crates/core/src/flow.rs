//! Orbit integration, frame transport along orbits, and limit classification.
//!
//! All integration goes through one Dormand–Prince 5(4) stepper with PI step
//! control. Callers observe accepted steps through [`StepObserver`], which can
//! stop integration (block exit, capture) or rescale the state (frame
//! renormalization).

use serde::Serialize;
use thiserror::Error;

use crate::block::{Face, GridBlock};
use crate::expr::{EvalError, FieldDef};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("step size underflow at t = {t:e}, x = {x:?} (stiff or singular field)")]
    StepUnderflow { t: f64, x: Vec<f64> },
    #[error("field evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("transported frame degenerated (condition number {condition:e})")]
    DegenerateFrame { condition: f64 },
    #[error("point has {got} coordinates, field has dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("ambiguous capture: critical points {first} and {second} both lie within the capture radius; use a smaller radius")]
    AmbiguousCapture { first: usize, second: usize },
}

/// Integrator tolerances. `max_step` bounds the time step so block exits are
/// not stepped over.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rtol: 1e-9,
            atol: 1e-12,
            max_step: 0.1,
        }
    }
}

impl Tolerances {
    pub fn uniform(tol: f64) -> Self {
        Tolerances {
            rtol: tol,
            atol: tol * 1e-3,
            ..Tolerances::default()
        }
    }

    pub fn halved(self) -> Self {
        Tolerances {
            rtol: self.rtol / 2.0,
            atol: self.atol / 2.0,
            ..self
        }
    }
}

/// Accepted integrator samples `(t_i, x_i)` with `t` strictly monotone in the
/// direction of integration.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub tolerances: Tolerances,
}

impl Trajectory {
    pub fn start(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn end(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn duration(&self) -> f64 {
        self.times.last().unwrap() - self.times[0]
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Prefix ending at sample `last` (inclusive).
    pub fn truncated(&self, last: usize) -> Trajectory {
        Trajectory {
            times: self.times[..=last].to_vec(),
            states: self.states[..=last].to_vec(),
            tolerances: self.tolerances,
        }
    }
}

/// One accepted step with endpoint derivatives, for cubic Hermite dense output.
pub struct Step<'a> {
    pub t0: f64,
    pub t1: f64,
    pub x0: &'a [f64],
    pub x1: &'a [f64],
    pub f0: &'a [f64],
    pub f1: &'a [f64],
}

impl Step<'_> {
    /// State at fraction `theta` in [0, 1] of the step.
    pub fn interpolate(&self, theta: f64) -> Vec<f64> {
        let h = self.t1 - self.t0;
        let t2 = theta * theta;
        let t3 = t2 * theta;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + theta;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        (0..self.x0.len())
            .map(|i| {
                h00 * self.x0[i] + h10 * h * self.f0[i] + h01 * self.x1[i] + h11 * h * self.f1[i]
            })
            .collect()
    }
}

pub enum Control {
    Continue,
    Stop,
    /// Stop and replace the final sample with `(t, x)` inside the last step.
    StopAt(f64, Vec<f64>),
}

pub trait StepObserver {
    fn on_step(&mut self, step: &Step<'_>) -> Control;

    /// May rescale the accepted state; return `true` if it changed.
    fn adjust(&mut self, _x: &mut [f64]) -> bool {
        false
    }
}

struct NoObserver;

impl StepObserver for NoObserver {
    fn on_step(&mut self, _: &Step<'_>) -> Control {
        Control::Continue
    }
}

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const BETA: f64 = 0.04;
const ALPHA: f64 = 0.2 - 0.75 * BETA;
const SAFETY: f64 = 0.9;

/// Integrates `x' = rhs(x)` for signed duration `span`.
///
/// Negative spans integrate backward. Returns the trajectory and whether the
/// observer stopped early.
pub fn integrate_with<R, O>(
    rhs: R,
    x0: &[f64],
    span: f64,
    tol: &Tolerances,
    observer: &mut O,
) -> Result<(Trajectory, bool), FlowError>
where
    R: Fn(&[f64], &mut [f64]) -> Result<(), FlowError>,
    O: StepObserver + ?Sized,
{
    let n = x0.len();
    let dir = if span < 0.0 { -1.0 } else { 1.0 };
    let horizon = span.abs();
    let f = |x: &[f64], out: &mut [f64]| -> Result<(), FlowError> {
        rhs(x, out)?;
        if dir < 0.0 {
            out.iter_mut().for_each(|v| *v = -*v);
        }
        Ok(())
    };

    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![x0.to_vec()],
        tolerances: *tol,
    };
    if horizon == 0.0 {
        return Ok((traj, false));
    }

    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; n];
    f(&x, &mut k1)?;
    let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) = (
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
    );
    let mut stage = vec![0.0; n];
    let mut x_new = vec![0.0; n];

    let scale = |a: f64, b: f64| tol.atol + tol.rtol * a.abs().max(b.abs());
    let mut h = initial_step(&f, &x, &k1, tol, horizon)?;
    let mut s = 0.0;
    let mut err_prev: f64 = 1e-4;
    let mut rejected = false;

    while s < horizon {
        if s + h > horizon {
            h = horizon - s;
        }
        if h <= 1e-14 * (1.0 + s.abs()) && s + h < horizon {
            return Err(FlowError::StepUnderflow {
                t: dir * s,
                x: x.clone(),
            });
        }

        for i in 0..n {
            stage[i] = x[i] + h * A21 * k1[i];
        }
        f(&stage, &mut k2)?;
        for i in 0..n {
            stage[i] = x[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        f(&stage, &mut k3)?;
        for i in 0..n {
            stage[i] = x[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(&stage, &mut k4)?;
        for i in 0..n {
            stage[i] = x[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(&stage, &mut k5)?;
        for i in 0..n {
            stage[i] = x[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(&stage, &mut k6)?;
        for i in 0..n {
            x_new[i] = x[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        f(&x_new, &mut k7)?;

        let mut err = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let r = e / scale(x[i], x_new[i]);
            err += r * r;
        }
        let err = (err / n as f64).sqrt();

        if !err.is_finite() || err > 1.0 {
            let fac = if err.is_finite() {
                (SAFETY * err.powf(-0.2)).max(0.2)
            } else {
                0.1
            };
            h *= fac;
            rejected = true;
            continue;
        }

        let t0 = dir * s;
        let t1 = dir * (s + h);
        // Observers see physical time and physical derivatives.
        let (f0p, f1p): (Vec<f64>, Vec<f64>) = if dir < 0.0 {
            (
                k1.iter().map(|v| -v).collect(),
                k7.iter().map(|v| -v).collect(),
            )
        } else {
            (k1.clone(), k7.clone())
        };
        let control = observer.on_step(&Step {
            t0,
            t1,
            x0: &x,
            x1: &x_new,
            f0: &f0p,
            f1: &f1p,
        });
        match control {
            Control::Continue => {}
            Control::Stop => {
                traj.times.push(t1);
                traj.states.push(x_new.clone());
                return Ok((traj, true));
            }
            Control::StopAt(t, xs) => {
                if (t - t0).abs() > 0.0 {
                    traj.times.push(t);
                    traj.states.push(xs);
                }
                return Ok((traj, true));
            }
        }

        s += h;
        std::mem::swap(&mut x, &mut x_new);
        if observer.adjust(&mut x) {
            f(&x, &mut k1)?;
        } else {
            std::mem::swap(&mut k1, &mut k7);
        }
        traj.times.push(dir * s);
        traj.states.push(x.clone());

        let mut fac = SAFETY * err.max(1e-10).powf(-ALPHA) * err_prev.powf(BETA);
        fac = fac.clamp(0.2, 10.0);
        if rejected {
            fac = fac.min(1.0);
        }
        rejected = false;
        err_prev = err.max(1e-4);
        h = (h * fac).min(tol.max_step);
    }
    Ok((traj, false))
}

fn initial_step<F>(f: &F, x: &[f64], f0: &[f64], tol: &Tolerances, horizon: f64) -> Result<f64, FlowError>
where
    F: Fn(&[f64], &mut [f64]) -> Result<(), FlowError>,
{
    let n = x.len() as f64;
    let sc: Vec<f64> = x.iter().map(|v| tol.atol + tol.rtol * v.abs()).collect();
    let d0 = (x.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n).sqrt();
    let d1 = (f0.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n).sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(horizon).min(tol.max_step);
    let x1: Vec<f64> = x.iter().zip(f0).map(|(v, d)| v + h0 * d).collect();
    let mut f1 = vec![0.0; x.len()];
    f(&x1, &mut f1)?;
    let d2 = (f1
        .iter()
        .zip(f0)
        .zip(&sc)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
        / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1).min(horizon).min(tol.max_step))
}

fn field_rhs(field: &FieldDef) -> impl Fn(&[f64], &mut [f64]) -> Result<(), FlowError> + '_ {
    move |x, out| field.eval_into(x, out).map_err(FlowError::from)
}

fn check_dim(field: &FieldDef, x: &[f64]) -> Result<(), FlowError> {
    if x.len() != field.dim() {
        return Err(FlowError::DimensionMismatch {
            expected: field.dim(),
            got: x.len(),
        });
    }
    Ok(())
}

/// Integrates the flow of `field` from `x0` for signed time `span`.
pub fn integrate(field: &FieldDef, x0: &[f64], span: f64, tol: &Tolerances) -> Result<Trajectory, FlowError> {
    check_dim(field, x0)?;
    integrate_with(field_rhs(field), x0, span, tol, &mut NoObserver).map(|(t, _)| t)
}

/// A tangent frame carried along an orbit.
///
/// Vectors are stored with unit length; `log_scales[i]` records the
/// accumulated log of the length removed from vector `i`, so
/// [`TransportedFrame::unnormalized`] is the true linearized image.
#[derive(Clone, Debug)]
pub struct TransportedFrame {
    pub vectors: Vec<Vec<f64>>,
    pub log_scales: Vec<f64>,
    /// Base point the frame is attached to.
    pub endpoint: Vec<f64>,
    pub condition: f64,
}

impl TransportedFrame {
    pub fn unnormalized(&self) -> Vec<Vec<f64>> {
        self.vectors
            .iter()
            .zip(&self.log_scales)
            .map(|(v, s)| v.iter().map(|c| c * s.exp()).collect())
            .collect()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn frame_condition(vectors: &[Vec<f64>]) -> f64 {
    let k = vectors.len();
    if k <= 1 {
        return 1.0;
    }
    let units: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let n = norm(v);
            v.iter().map(|c| c / n).collect()
        })
        .collect();
    let gram = nalgebra::DMatrix::from_fn(k, k, |i, j| {
        units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum::<f64>()
    });
    let eig = gram.symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min().max(0.0);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        (max / min).sqrt()
    }
}

const MAX_FRAME_CONDITION: f64 = 1e8;

struct Renormalize {
    dim: usize,
    k: usize,
    log_scales: Vec<f64>,
}

impl StepObserver for Renormalize {
    fn on_step(&mut self, _: &Step<'_>) -> Control {
        Control::Continue
    }

    fn adjust(&mut self, x: &mut [f64]) -> bool {
        for i in 0..self.k {
            let v = &mut x[self.dim * (i + 1)..self.dim * (i + 2)];
            let n = norm(v);
            if n > 0.0 && n.is_finite() {
                v.iter_mut().for_each(|c| *c /= n);
                self.log_scales[i] += n.ln();
            }
        }
        true
    }
}

/// Transports `frame` along `traj` by the variational equation
/// `v' = DX(x(t)) v`.
///
/// The base orbit is re-integrated together with the frame from the start of
/// `traj` over its duration. Each accepted step rescales every vector to unit
/// length without mixing vectors, so the orientation of the frame is kept.
pub fn transport_frame(
    field: &FieldDef,
    traj: &Trajectory,
    frame: &[Vec<f64>],
) -> Result<TransportedFrame, FlowError> {
    let m = field.dim();
    check_dim(field, traj.start())?;
    for v in frame {
        check_dim(field, v)?;
    }
    let k = frame.len();
    let initial_condition = frame_condition(frame);
    if initial_condition > MAX_FRAME_CONDITION {
        return Err(FlowError::DegenerateFrame {
            condition: initial_condition,
        });
    }
    let mut log_scales = vec![0.0; k];
    let mut state = traj.start().to_vec();
    for (i, v) in frame.iter().enumerate() {
        let n = norm(v);
        log_scales[i] = n.ln();
        state.extend(v.iter().map(|c| c / n));
    }
    let span = traj.duration();
    if span == 0.0 || k == 0 {
        let vectors = state[m..].chunks(m).map(<[f64]>::to_vec).collect();
        return Ok(TransportedFrame {
            vectors,
            log_scales,
            endpoint: traj.start().to_vec(),
            condition: initial_condition,
        });
    }

    let jac = std::cell::RefCell::new(vec![0.0; m * m]);
    let rhs = |y: &[f64], out: &mut [f64]| -> Result<(), FlowError> {
        let (x, vs) = y.split_at(m);
        field.eval_into(x, &mut out[..m])?;
        let mut j = jac.borrow_mut();
        field.jacobian_into(x, &mut j)?;
        for (i, v) in vs.chunks(m).enumerate() {
            let o = &mut out[m * (i + 1)..m * (i + 2)];
            for r in 0..m {
                o[r] = (0..m).map(|c| j[r * m + c] * v[c]).sum();
            }
        }
        Ok(())
    };
    let mut renorm = Renormalize {
        dim: m,
        k,
        log_scales: vec![0.0; k],
    };
    let (aug, _) = integrate_with(rhs, &state, span, &traj.tolerances, &mut renorm)?;
    let end = aug.end();
    let mut vectors = Vec::with_capacity(k);
    for i in 0..k {
        let v = &end[m * (i + 1)..m * (i + 2)];
        let n = norm(v);
        log_scales[i] += renorm.log_scales[i] + n.ln();
        vectors.push(v.iter().map(|c| c / n).collect::<Vec<f64>>());
    }
    let condition = frame_condition(&vectors);
    if condition > MAX_FRAME_CONDITION {
        return Err(FlowError::DegenerateFrame { condition });
    }
    Ok(TransportedFrame {
        vectors,
        log_scales,
        endpoint: end[..m].to_vec(),
        condition,
    })
}

/// Outcome of following an orbit forward inside a block.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum LimitClass {
    ConvergedTo { id: usize },
    ExitedBlock { time: f64, face: Face },
    BudgetExceeded,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LimitOptions {
    pub capture_radius: f64,
    /// Absolute speed below which a point near a critical point counts as captured.
    pub speed_tol: f64,
    pub budget: f64,
    pub tolerances: Tolerances,
}

impl Default for LimitOptions {
    fn default() -> Self {
        LimitOptions {
            capture_radius: 1e-4,
            speed_tol: 1e-6,
            budget: 200.0,
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LimitOutcome {
    pub class: LimitClass,
    pub trajectory: Trajectory,
    /// Minimum distance from the orbit to each listed critical point.
    pub closest: Vec<f64>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Locates the block exit inside `step` by bisection on the dense output.
/// `step.x0` must be inside and `step.x1` outside.
pub(crate) fn locate_exit(block: &GridBlock, step: &Step<'_>) -> (f64, Vec<f64>, Face) {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if block.contains(&step.interpolate(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let inside = step.interpolate(lo);
    let outside = step.interpolate(hi);
    let face = block.crossing_face(&inside, &outside);
    (step.t0 + hi * (step.t1 - step.t0), outside, face)
}

struct LimitWatcher<'a> {
    field: &'a FieldDef,
    crits: &'a [Vec<f64>],
    block: &'a GridBlock,
    opts: &'a LimitOptions,
    closest: Vec<f64>,
    class: Option<LimitClass>,
    error: Option<FlowError>,
}

impl StepObserver for LimitWatcher<'_> {
    fn on_step(&mut self, step: &Step<'_>) -> Control {
        if !self.block.contains(step.x1) {
            let (t, x, face) = locate_exit(self.block, step);
            self.class = Some(LimitClass::ExitedBlock { time: t, face });
            return Control::StopAt(t, x);
        }
        let mut captured = None;
        for (i, c) in self.crits.iter().enumerate() {
            let d = dist(step.x1, c);
            if d < self.closest[i] {
                self.closest[i] = d;
            }
            if d < self.opts.capture_radius {
                if let Some(first) = captured {
                    self.error = Some(FlowError::AmbiguousCapture { first, second: i });
                    return Control::Stop;
                }
                captured = Some(i);
            }
        }
        if let Some(id) = captured {
            let speed = match self.field.eval(step.x1) {
                Ok(v) => norm(&v),
                Err(e) => {
                    self.error = Some(e.into());
                    return Control::Stop;
                }
            };
            if speed < self.opts.speed_tol {
                self.class = Some(LimitClass::ConvergedTo { id });
                return Control::Stop;
            }
        }
        Control::Continue
    }
}

/// Follows the forward orbit of `x0` until it is captured by one of `crits`,
/// leaves `block`, or exhausts the time budget.
pub fn classify_limit(
    field: &FieldDef,
    x0: &[f64],
    crits: &[Vec<f64>],
    block: &GridBlock,
    opts: &LimitOptions,
) -> Result<LimitOutcome, FlowError> {
    check_dim(field, x0)?;
    let mut watcher = LimitWatcher {
        field,
        crits,
        block,
        opts,
        closest: crits.iter().map(|c| dist(x0, c)).collect(),
        class: None,
        error: None,
    };
    let (trajectory, _) = integrate_with(field_rhs(field), x0, opts.budget, &opts.tolerances, &mut watcher)?;
    if let Some(e) = watcher.error {
        return Err(e);
    }
    Ok(LimitOutcome {
        class: watcher.class.unwrap_or(LimitClass::BudgetExceeded),
        trajectory,
        closest: watcher.closest,
    })
}

struct ExitWatcher<'a> {
    block: &'a GridBlock,
    exit: Option<(f64, Face)>,
}

impl StepObserver for ExitWatcher<'_> {
    fn on_step(&mut self, step: &Step<'_>) -> Control {
        if self.block.contains(step.x1) {
            return Control::Continue;
        }
        let (t, x, face) = locate_exit(self.block, step);
        self.exit = Some((t, face));
        Control::StopAt(t, x)
    }
}

/// Time and face at which the orbit of `x0` first leaves `block` within
/// signed time `span`, if it does.
pub fn exit_time(
    field: &FieldDef,
    x0: &[f64],
    span: f64,
    block: &GridBlock,
    tol: &Tolerances,
) -> Result<Option<(f64, Face)>, FlowError> {
    check_dim(field, x0)?;
    let mut watcher = ExitWatcher { block, exit: None };
    integrate_with(field_rhs(field), x0, span, tol, &mut watcher)?;
    Ok(watcher.exit)
}

/// Checks that `values` never increase along the samples beyond
/// `1e-9 * (1 + |value|)`.
pub fn is_nonincreasing(values: &[f64]) -> bool {
    values
        .windows(2)
        .all(|w| w[1] <= w[0] + 1e-9 * (1.0 + w[0].abs()))
}
