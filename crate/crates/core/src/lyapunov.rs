//! Lyapunov functions: sampled verification, positive combinations, and
//! small Morse perturbations certified along a homotopy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::block::{FaceTag, GridBlock, IsolationOptions};
use crate::expr::{EvalError, Expr, FieldDef, ScalarFunction};
use crate::flow::FlowError;
use crate::Verdict;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LyapunovError {
    #[error("coefficients must be positive, got {0} and {1}")]
    NonpositiveCoefficient(f64, f64),
    #[error("perturbation magnitude must be positive, got {0}")]
    NonpositiveEpsilon(f64),
    #[error("dimension mismatch: function has {function}, field has {field}")]
    Dimension { function: usize, field: usize },
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("integration failed: {0}")]
    Flow(#[from] FlowError),
    #[error("homotopy certification failed at lambda = {lambda}: {reason}; lower epsilon")]
    CertificationFailed { lambda: f64, reason: String },
}

/// User-declared invariant set: sample points and a collar radius around them.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Collar {
    pub samples: Vec<Vec<f64>>,
    pub radius: f64,
}

impl Collar {
    pub fn none() -> Self {
        Collar {
            samples: Vec::new(),
            radius: 0.0,
        }
    }

    pub fn covers(&self, x: &[f64]) -> bool {
        self.samples.iter().any(|s| dist(s, x) < self.radius)
    }

    /// Groups of samples chained by overlapping collars.
    fn components(&self) -> Vec<Vec<usize>> {
        let n = self.samples.len();
        let mut label: Vec<usize> = (0..n).collect();
        fn find(l: &mut [usize], i: usize) -> usize {
            let mut r = i;
            while l[r] != r {
                r = l[r];
            }
            l[i] = r;
            r
        }
        for i in 0..n {
            for j in i + 1..n {
                if dist(&self.samples[i], &self.samples[j]) <= 2.0 * self.radius {
                    let (a, b) = (find(&mut label, i), find(&mut label, j));
                    label[a] = b;
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..n {
            let r = find(&mut label, i);
            groups.entry(r).or_default().push(i);
        }
        groups.into_values().collect()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, Serialize)]
pub struct LyapunovOptions {
    /// Lattice points per cube edge.
    pub samples_per_axis: usize,
    /// Strictness tolerance is `strictness · (1 + max |df·X|)`.
    pub strictness: f64,
    /// Allowed spread of `f` over one component of the declared set,
    /// relative to `1 + max |f|`.
    pub constancy: f64,
}

impl Default for LyapunovOptions {
    fn default() -> Self {
        LyapunovOptions {
            samples_per_axis: 3,
            strictness: 1e-10,
            constancy: 1e-8,
        }
    }
}

/// `min_decrease` is the minimum of `−df·X` over samples outside the collar.
#[derive(Clone, Debug, Serialize)]
pub struct LyapunovReport {
    pub verdict: Verdict,
    pub min_decrease: f64,
    pub location: Option<Vec<f64>>,
    pub strictness_tol: f64,
    pub collar_radius: f64,
    pub samples_checked: usize,
    /// Largest spread of `f` within one collar component.
    pub set_variation: f64,
    pub constancy_tol: f64,
}

pub fn verify_lyapunov(
    f: &Expr,
    field: &FieldDef,
    b: &GridBlock,
    collar: &Collar,
    opts: &LyapunovOptions,
) -> Result<LyapunovReport, LyapunovError> {
    if f.arity() > field.dim() || b.dim() != field.dim() {
        return Err(LyapunovError::Dimension {
            function: f.arity().max(b.dim()),
            field: field.dim(),
        });
    }
    let sf = ScalarFunction::new(f.clone(), field.dim());
    let points: Vec<Vec<f64>> = b
        .closed_samples(opts.samples_per_axis)
        .into_iter()
        .filter(|p| !collar.covers(p))
        .collect();
    let rates: Result<Vec<f64>, EvalError> = points
        .par_iter()
        .map(|p| {
            let g = sf.gradient(p)?;
            let x = field.eval(p)?;
            Ok(-g.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect();
    let rates = rates?;
    let scale = rates.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let strictness_tol = opts.strictness * (1.0 + scale);
    let (min_decrease, location) = rates
        .iter()
        .zip(&points)
        .min_by(|a, b| a.0.total_cmp(b.0))
        .map_or((f64::INFINITY, None), |(r, p)| (*r, Some(p.clone())));

    let values: Vec<f64> = collar
        .samples
        .iter()
        .map(|s| sf.value(s))
        .collect::<Result<_, _>>()?;
    let mut set_variation: f64 = 0.0;
    for group in collar.components() {
        let lo = group.iter().map(|&i| values[i]).fold(f64::INFINITY, f64::min);
        let hi = group.iter().map(|&i| values[i]).fold(f64::NEG_INFINITY, f64::max);
        set_variation = set_variation.max(hi - lo);
    }
    let fmax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let constancy_tol = opts.constancy * (1.0 + fmax);
    let verdict = Verdict::from(min_decrease > strictness_tol && set_variation <= constancy_tol);
    Ok(LyapunovReport {
        verdict,
        min_decrease,
        location,
        strictness_tol,
        collar_radius: collar.radius,
        samples_checked: points.len(),
        set_variation,
        constancy_tol,
    })
}

/// `λ·fa + μ·fb` for `λ, μ > 0`.
pub fn combine(fa: &Expr, fb: &Expr, lam: f64, mu: f64) -> Result<Expr, LyapunovError> {
    if !(lam > 0.0 && mu > 0.0) {
        return Err(LyapunovError::NonpositiveCoefficient(lam, mu));
    }
    Ok(Expr::add(
        Expr::mul(Expr::constant(lam), fa.clone()),
        Expr::mul(Expr::constant(mu), fb.clone()),
    ))
}

/// `c + μ·f` for `μ > 0`.
pub fn affine(c: f64, mu: f64, f: &Expr) -> Result<Expr, LyapunovError> {
    // negated so NaN is rejected
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(mu > 0.0) {
        return Err(LyapunovError::NonpositiveCoefficient(1.0, mu));
    }
    Ok(Expr::add(Expr::constant(c), Expr::mul(Expr::constant(mu), f.clone())))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum PerturbationTerm {
    /// `⟨c, x − centre⟩` with a seeded random unit vector `c`.
    Linear,
    /// `Σ a_i (x_i − centre_i)² / diam` with seeded `a_i ∈ [−1, 1]`.
    Quadratic,
    Custom(Expr),
}

#[derive(Clone, Debug, Serialize)]
pub struct PerturbationSpec {
    pub base: Expr,
    pub term: PerturbationTerm,
    pub epsilon: f64,
    /// Number of homotopy intervals checked on `[0, 1]`.
    pub homotopy_steps: usize,
    pub seed: u64,
    /// Lattice points per face edge for boundary checks.
    pub boundary_samples: usize,
    /// Face classification tolerance.
    pub margin_tol: f64,
    pub isolation: IsolationOptions,
}

impl PerturbationSpec {
    pub fn linear(base: Expr, epsilon: f64, seed: u64) -> Self {
        PerturbationSpec {
            base,
            term: PerturbationTerm::Linear,
            epsilon,
            homotopy_steps: 5,
            seed,
            boundary_samples: 3,
            margin_tol: 1e-9,
            isolation: IsolationOptions::default(),
        }
    }

    /// The perturbation term as an expression on `b`.
    pub fn term_expr(&self, b: &GridBlock) -> Expr {
        let m = b.dim();
        let center = b.center();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let shifted = |i: usize| Expr::sub(Expr::var(i), Expr::constant(center[i]));
        match &self.term {
            PerturbationTerm::Linear => {
                let c = random_unit(&mut rng, m);
                (0..m)
                    .map(|i| Expr::mul(Expr::constant(c[i]), shifted(i)))
                    .reduce(Expr::add)
                    .unwrap_or(Expr::constant(0.0))
            }
            PerturbationTerm::Quadratic => {
                let diam = b.diameter();
                (0..m)
                    .map(|i| {
                        let a: f64 = rng.gen_range(-1.0..=1.0);
                        Expr::mul(Expr::constant(a / diam), Expr::pow(shifted(i), 2))
                    })
                    .reduce(Expr::add)
                    .unwrap_or(Expr::constant(0.0))
            }
            PerturbationTerm::Custom(e) => e.clone(),
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HomotopyStep {
    pub lambda: f64,
    pub unresolved_faces: usize,
    pub tags_stable: bool,
    pub isolation: Verdict,
    pub min_boundary_gradient: f64,
}

/// Per-λ evidence that `base + λ ε term` keeps the block isolating.
#[derive(Clone, Debug, Serialize)]
pub struct HomotopyCertificate {
    pub steps: Vec<HomotopyStep>,
    pub verdict: Verdict,
    pub gradient_tol: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Perturbation {
    pub function: Expr,
    pub term: Expr,
    pub epsilon: f64,
    pub seed: u64,
    pub certificate: HomotopyCertificate,
}

fn interpolant(spec: &PerturbationSpec, term: &Expr, lambda: f64) -> Expr {
    Expr::add(
        spec.base.clone(),
        Expr::mul(Expr::constant(lambda * spec.epsilon), term.clone()),
    )
}

/// `f = base + ε·term`, certified on a λ-grid: at every λ the gradient flow of
/// `base + λ ε term` has no unresolved faces, keeps the λ = 0 tags, passes the
/// isolation check, and has no critical point on the boundary samples.
pub fn morse_perturb(spec: &PerturbationSpec, b: &GridBlock) -> Result<Perturbation, LyapunovError> {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(spec.epsilon > 0.0) {
        return Err(LyapunovError::NonpositiveEpsilon(spec.epsilon));
    }
    let m = b.dim();
    let term = spec.term_expr(b);
    let steps = spec.homotopy_steps.max(1);
    let mut reference: Option<Vec<FaceTag>> = None;
    let mut records = Vec::with_capacity(steps + 1);
    let boundary_points: Vec<Vec<f64>> = b
        .faces()
        .flat_map(|face| b.face_samples(face, spec.boundary_samples))
        .collect();
    let mut gradient_tol = 0.0;
    for k in 0..=steps {
        let lambda = k as f64 / steps as f64;
        let f = interpolant(spec, &term, lambda);
        let sf = ScalarFunction::new(f.clone(), m);
        let field = sf.negative_gradient_field();
        let tagged = b.classify_boundary(&field, spec.boundary_samples, spec.margin_tol);
        let tags: Vec<FaceTag> = tagged.boundary().iter().map(|f| f.tag).collect();
        let unresolved = tags.iter().filter(|t| **t == FaceTag::Unresolved).count();
        let tags_stable = reference.as_ref().is_none_or(|r| *r == tags);
        let grads: Vec<f64> = boundary_points
            .iter()
            .map(|p| sf.gradient(p).map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect::<Result<_, _>>()?;
        let min_grad = grads.iter().copied().fold(f64::INFINITY, f64::min);
        let scale = grads.iter().copied().fold(0.0, f64::max);
        gradient_tol = 1e-8 * (1.0 + scale);

        let fail = |reason: String| LyapunovError::CertificationFailed { lambda, reason };
        if unresolved > 0 {
            return Err(fail(format!("{unresolved} boundary face(s) not transverse")));
        }
        if !tags_stable {
            return Err(fail("boundary classification changed along the homotopy".into()));
        }
        if min_grad <= gradient_tol {
            return Err(fail(format!("gradient {min_grad:e} on the boundary")));
        }
        let iso = tagged.check_isolation(&field, &spec.isolation)?;
        if !iso.verdict.passed() {
            return Err(fail(format!(
                "{} boundary sample(s) never leave the block",
                iso.failures().len()
            )));
        }
        if reference.is_none() {
            reference = Some(tags);
        }
        records.push(HomotopyStep {
            lambda,
            unresolved_faces: unresolved,
            tags_stable,
            isolation: iso.verdict,
            min_boundary_gradient: min_grad,
        });
    }
    Ok(Perturbation {
        function: interpolant(spec, &term, 1.0),
        term,
        epsilon: spec.epsilon,
        seed: spec.seed,
        certificate: HomotopyCertificate {
            steps: records,
            verdict: Verdict::Pass,
            gradient_tol,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{build_block, BlockSpec, Grid};
    use crate::expr::parse;

    fn interval(lo: f64, hi: f64, h: f64) -> GridBlock {
        build_block(&BlockSpec::Box(vec![(lo, hi)]), &Grid::with_spacing(h)).unwrap()
    }

    fn check(f: &str, x: &str, collar: Collar) -> LyapunovReport {
        let b = interval(-1.0, 1.0, 0.25);
        let field = FieldDef::parse(1, &[x], false).unwrap();
        verify_lyapunov(&parse(f, 1).unwrap(), &field, &b, &collar, &LyapunovOptions::default()).unwrap()
    }

    fn origin() -> Collar {
        Collar {
            samples: vec![vec![0.0]],
            radius: 0.1,
        }
    }

    #[test]
    fn remark_examples() {
        assert_eq!(check("-x1", "x1^2/(1+x1^2)", origin()).verdict, Verdict::Pass);
        assert_eq!(check("-x1^4/4", "x1", origin()).verdict, Verdict::Pass);
        let bad = check("x1^2/2", "x1", origin());
        assert_eq!(bad.verdict, Verdict::Fail);
        assert!(bad.location.unwrap()[0].abs() > 0.0);
    }

    #[test]
    fn combinations_stay_lyapunov() {
        let fa = parse("-x1", 1).unwrap();
        let fb = parse("-x1 - x1^3/3", 1).unwrap();
        let field = "x1^2/(1+x1^2)";
        let c = combine(&fa, &fa, 1.0, 1.0).unwrap();
        assert_eq!(check(&c.to_string(), field, origin()).verdict, Verdict::Pass);
        let c = combine(&fa, &fb, 2.0, 3.0).unwrap();
        assert_eq!(check(&c.to_string(), field, origin()).verdict, Verdict::Pass);
        let c = affine(5.0, 1.0, &fa).unwrap();
        assert_eq!(check(&c.to_string(), field, origin()).verdict, Verdict::Pass);
        assert!(combine(&fa, &fb, 0.0, 1.0).is_err());
        assert!(affine(1.0, -1.0, &fa).is_err());
    }

    #[test]
    fn constancy_is_checked_per_component() {
        let b = interval(-2.0, 2.0, 0.25);
        let field = FieldDef::parse(1, &["x1 - x1^3"], false).unwrap();
        let p = parse("-x1^2/2 + x1^4/4", 1).unwrap();
        let collar = Collar {
            samples: vec![vec![-1.0], vec![0.0], vec![1.0]],
            radius: 0.1,
        };
        let r = verify_lyapunov(&p, &field, &b, &collar, &LyapunovOptions::default()).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        let wide = Collar {
            samples: vec![vec![0.0], vec![0.5]],
            radius: 0.3,
        };
        let r = verify_lyapunov(&p, &field, &b, &wide, &LyapunovOptions::default()).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        assert!(r.set_variation > 0.1);
    }

    fn repeller_spec(epsilon: f64) -> PerturbationSpec {
        PerturbationSpec {
            term: PerturbationTerm::Custom(parse("x1", 1).unwrap()),
            ..PerturbationSpec::linear(parse("-x1^4/4", 1).unwrap(), epsilon, 0)
        }
    }

    #[test]
    fn repeller_perturbation_is_certified() {
        let b = interval(-1.0, 1.0, 0.25);
        let p = morse_perturb(&repeller_spec(1e-3), &b).unwrap();
        assert_eq!(p.certificate.steps.len(), 6);
        let sf = ScalarFunction::new(p.function.clone(), 1);
        let root = 1e-3f64.cbrt();
        assert!(sf.gradient(&[root]).unwrap()[0].abs() < 1e-12);
        assert!(sf.hessian(&[root]).unwrap()[0] < 0.0);
    }

    #[test]
    fn oversized_perturbation_is_rejected() {
        let b = interval(-1.0, 1.0, 0.25);
        let err = morse_perturb(&repeller_spec(2.0), &b).unwrap_err();
        match err {
            LyapunovError::CertificationFailed { lambda, .. } => assert!(lambda > 0.0 && lambda <= 0.6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn linear_term_is_seeded_and_bounded() {
        let b = build_block(&BlockSpec::Box(vec![(-1.0, 1.0), (-1.0, 1.0)]), &Grid::with_spacing(0.5)).unwrap();
        let spec = PerturbationSpec::linear(parse("-x1 - 0.5*x2", 2).unwrap(), 0.01, 7);
        let t1 = spec.term_expr(&b);
        assert_eq!(t1, spec.term_expr(&b));
        let other = PerturbationSpec { seed: 8, ..spec.clone() };
        assert_ne!(t1, other.term_expr(&b));
        for p in b.closed_samples(5) {
            assert!(t1.eval(&p, None).unwrap().abs() <= b.diameter());
        }
        let p = morse_perturb(&spec, &b).unwrap();
        assert_eq!(p.certificate.verdict, Verdict::Pass);
    }
}
