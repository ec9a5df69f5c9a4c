//! The full pipeline from a flow and an isolating block to `HI_*`, and the
//! structural checks built on it: exit-set comparison, independence of
//! blocks and perturbations, Morse decompositions, connection matrices, and
//! continuation.

use nalgebra::{DMatrix, SymmetricEigen};
use num_rational::BigRational;
use num_traits::Zero;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::block::{BlockError, FaceTag, GridBlock, IsolationOptions, IsolationReport};
use crate::expr::{EvalError, Expr, FieldDef, ScalarFunction, Var};
use crate::flow::FlowError;
use crate::homalg::rational::{rank, to_q, HomologyBasis, QVector};
use crate::homalg::{
    cubical_relative_homology, homology, poincare, relations_check, ChainComplex, Coefficients, CubicalError,
    HomalgError, HomologyResult, IntMatrix, PoincarePolynomial,
};
use crate::lyapunov::{
    morse_perturb, verify_lyapunov, Collar, HomotopyCertificate, LyapunovError, LyapunovOptions, LyapunovReport,
    PerturbationSpec, PerturbationTerm,
};
use crate::morse::{
    build_complex, connections_from, find_critical_points, gradient_scale, newton_with, ConnectionCount,
    ConnectionOptions, CriticalOptions, CriticalPoint, MorseError,
};
use crate::Verdict;

#[derive(Debug, Error)]
pub enum ConleyError {
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error("block is not isolating: boundary sample {point:?} neither exits forward nor backward")]
    NotIsolating { point: Vec<f64> },
    #[error("Lyapunov check failed: decrease {min_decrease:e} at {location:?}")]
    LyapunovFailed { min_decrease: f64, location: Option<Vec<f64>> },
    #[error("critical point {0:?} of the perturbed function lies on the block boundary")]
    BoundaryCriticalPoint(Vec<f64>),
    #[error("invalid decomposition: {0}")]
    InvalidDecomposition(String),
    #[error("critical point {0} lies in neither the attractor nor the repeller block")]
    Unassigned(String),
    #[error(
        "connection from A to R detected ({source_label} -> {target_label} in degree {degree}, entry {value}); \
         not an attractor-repeller pair at this resolution"
    )]
    AttractorToRepeller {
        degree: usize,
        source_label: String,
        target_label: String,
        value: i64,
    },
    #[error("connection matrices are computed over Z only")]
    Mod2ConnectionMatrix,
    #[error("delta must lie in (0, 1/4), got {0}")]
    BadDelta(f64),
    #[error("amplitude r = {r} does not exceed the bound {bound}")]
    AmplitudeBelowBound { r: f64, bound: f64 },
    #[error("not a continuation: isolation breaks at lambda = {lambda} ({reason})")]
    ContinuationBreak { lambda: f64, reason: String },
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
    #[error(transparent)]
    Morse(#[from] MorseError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Algebra(#[from] HomalgError),
    #[error(transparent)]
    Cubical(#[from] CubicalError),
}

/// A flow, a candidate block, a Lyapunov function and the declared invariant
/// set on which that function may be flat.
#[derive(Clone, Debug)]
pub struct System {
    pub field: FieldDef,
    pub block: GridBlock,
    pub lyapunov: Expr,
    pub collar: Collar,
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineOptions {
    /// Lattice points per tangent axis when tagging faces.
    pub boundary_samples: usize,
    pub margin_tol: f64,
    pub lyapunov: LyapunovOptions,
    pub isolation: IsolationOptions,
    pub epsilon: f64,
    pub seed: u64,
    pub term: PerturbationTerm,
    pub homotopy_steps: usize,
    pub critical: CriticalOptions,
    pub connections: ConnectionOptions,
    /// Capture speed tolerance relative to the largest gradient on the block.
    pub speed_rel: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            boundary_samples: 3,
            margin_tol: 1e-9,
            lyapunov: LyapunovOptions::default(),
            isolation: IsolationOptions::default(),
            epsilon: 0.05,
            seed: 0,
            term: PerturbationTerm::Linear,
            homotopy_steps: 5,
            critical: CriticalOptions::default(),
            connections: ConnectionOptions::default(),
            speed_rel: 1e-6,
        }
    }
}

impl PipelineOptions {
    /// Halved integrator tolerances and doubled unstable-circle density.
    pub fn strict(mut self) -> Self {
        self.isolation.tolerances = self.isolation.tolerances.halved();
        self.connections.limit.tolerances = self.connections.limit.tolerances.halved();
        self.connections.circle_seeds *= 2;
        self
    }

    pub fn coefficients(&self) -> Coefficients {
        self.connections.coefficients
    }

    pub fn with_coefficients(mut self, c: Coefficients) -> Self {
        self.connections.coefficients = c;
        self
    }
}

/// A Morse perturbation of a certified Lyapunov function together with the
/// data its complex depends on. The metric is always Euclidean.
#[derive(Clone, Debug, Serialize)]
pub struct Quadruple {
    pub function: Expr,
    pub metric: &'static str,
    pub block: GridBlock,
    pub critical_points: Vec<CriticalPoint>,
    /// Signed counts with witnesses; carries the orientation data.
    pub counts: Vec<ConnectionCount>,
    pub base: Expr,
    pub term: Expr,
    pub epsilon: f64,
    pub seed: u64,
    pub certificate: HomotopyCertificate,
}

#[derive(Clone, Debug, Serialize)]
pub struct IsolationSummary {
    pub verdict: Verdict,
    pub samples: usize,
    pub worst_margin: f64,
    pub slowest_exit: f64,
    pub budget: f64,
}

impl From<&IsolationReport> for IsolationSummary {
    fn from(r: &IsolationReport) -> Self {
        IsolationSummary {
            verdict: r.verdict,
            samples: r.samples.len(),
            worst_margin: r.worst_margin,
            slowest_exit: r.slowest_exit,
            budget: r.budget,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HiOutcome {
    pub homology: HomologyResult,
    pub complex: ChainComplex,
    pub quadruple: Quadruple,
    pub lyapunov: LyapunovReport,
    pub isolation: IsolationSummary,
}

/// Tags the faces of `sys.block` under `sys.field`; unresolved faces are an error.
pub fn classify(sys: &System, opts: &PipelineOptions) -> Result<GridBlock, ConleyError> {
    let b = sys
        .block
        .classify_boundary(&sys.field, opts.boundary_samples, opts.margin_tol);
    let unresolved = b.unresolved();
    if !unresolved.is_empty() {
        return Err(BlockError::Unresolved(unresolved).into());
    }
    Ok(b)
}

/// Perturbs `base` on `block` and assembles its Morse complex.
pub fn build_quadruple(
    base: &Expr,
    block: &GridBlock,
    opts: &PipelineOptions,
) -> Result<(Quadruple, ChainComplex), ConleyError> {
    let spec = PerturbationSpec {
        base: base.clone(),
        term: opts.term.clone(),
        epsilon: opts.epsilon,
        homotopy_steps: opts.homotopy_steps,
        seed: opts.seed,
        boundary_samples: opts.boundary_samples,
        margin_tol: opts.margin_tol,
        isolation: opts.isolation.clone(),
    };
    let pert = morse_perturb(&spec, block)?;
    let crits = find_critical_points(&pert.function, block, &opts.critical)?;
    let h = block.grid().spacing;
    if let Some(c) = crits.iter().find(|c| block.boundary_distance(&c.coords) < 1e-9 * h) {
        return Err(ConleyError::BoundaryCriticalPoint(c.coords.clone()));
    }
    let mut conn = opts.connections.clone();
    conn.limit.speed_tol = opts.speed_rel * gradient_scale(&pert.function, block)?.max(1e-300);
    let field = ScalarFunction::new(pert.function.clone(), block.dim()).negative_gradient_field();
    let counts: Vec<ConnectionCount> = crits
        .par_iter()
        .filter(|c| c.index > 0)
        .map(|x| connections_from(&field, block, x, &crits, &conn))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    let complex = build_complex(&crits, &counts, block.dim(), conn.coefficients)?;
    Ok((
        Quadruple {
            function: pert.function,
            metric: "euclidean",
            block: block.clone(),
            critical_points: crits,
            counts,
            base: base.clone(),
            term: pert.term,
            epsilon: pert.epsilon,
            seed: pert.seed,
            certificate: pert.certificate,
        },
        complex,
    ))
}

/// Certifies the block and the Lyapunov function, then computes `HI_*` from
/// one Morse perturbation.
pub fn compute_hi(sys: &System, opts: &PipelineOptions) -> Result<HiOutcome, ConleyError> {
    let block = classify(sys, opts)?;
    let iso = block.check_isolation(&sys.field, &opts.isolation)?;
    if let Some(bad) = iso.failures().first() {
        return Err(ConleyError::NotIsolating {
            point: bad.point.clone(),
        });
    }
    let lyap = verify_lyapunov(&sys.lyapunov, &sys.field, &block, &sys.collar, &opts.lyapunov)?;
    if !lyap.verdict.passed() {
        return Err(ConleyError::LyapunovFailed {
            min_decrease: lyap.min_decrease,
            location: lyap.location.clone(),
        });
    }
    let (quadruple, complex) = build_quadruple(&sys.lyapunov, &block, opts)?;
    let homology = homology(&complex)?;
    Ok(HiOutcome {
        homology,
        complex,
        quadruple,
        lyapunov: lyap,
        isolation: IsolationSummary::from(&iso),
    })
}

/// `H_*(B, B_−)` with `B_−` the closure of the egress faces under `sys.field`.
pub fn exit_set_homology(sys: &System, opts: &PipelineOptions) -> Result<HomologyResult, ConleyError> {
    let block = classify(sys, opts)?;
    let exit = block.exit_set()?;
    Ok(cubical_relative_homology(&block.cubical_set(), &exit, opts.coefficients())?)
}

#[derive(Clone, Debug, Serialize)]
pub struct ExitTheoremReport {
    pub verdict: Verdict,
    pub morse: HomologyResult,
    pub cubical: HomologyResult,
}

impl ExitTheoremReport {
    pub fn new(morse: HomologyResult, cubical: HomologyResult) -> Self {
        ExitTheoremReport {
            verdict: Verdict::from(morse == cubical),
            morse,
            cubical,
        }
    }
}

/// Compares `HI_*` with `H_*(B, B_−)` degree by degree, Betti and torsion.
pub fn verify_exit_theorem(
    sys: &System,
    opts: &PipelineOptions,
) -> Result<(ExitTheoremReport, HiOutcome), ConleyError> {
    let outcome = compute_hi(sys, opts)?;
    let cubical = exit_set_homology(sys, opts)?;
    Ok((ExitTheoremReport::new(outcome.homology.clone(), cubical), outcome))
}

#[derive(Clone, Debug, Serialize)]
pub struct IndependenceReport {
    pub verdict: Verdict,
    /// One entry per block or per seed, in input order.
    pub results: Vec<HomologyResult>,
}

impl IndependenceReport {
    fn new(results: Vec<HomologyResult>) -> Self {
        let verdict = Verdict::from(results.windows(2).all(|w| w[0] == w[1]));
        IndependenceReport { verdict, results }
    }
}

/// `HI_*` computed on each block must agree.
pub fn block_independence(
    sys: &System,
    blocks: &[GridBlock],
    opts: &PipelineOptions,
) -> Result<IndependenceReport, ConleyError> {
    let results = blocks
        .par_iter()
        .map(|b| {
            let s = System {
                block: b.clone(),
                ..sys.clone()
            };
            compute_hi(&s, opts).map(|o| o.homology)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(IndependenceReport::new(results))
}

/// `HI_*` computed from perturbations with each seed must agree.
pub fn quadruple_independence(
    sys: &System,
    seeds: &[u64],
    opts: &PipelineOptions,
) -> Result<IndependenceReport, ConleyError> {
    let results = seeds
        .par_iter()
        .map(|&seed| {
            let o = PipelineOptions { seed, ..opts.clone() };
            compute_hi(sys, &o).map(|o| o.homology)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(IndependenceReport::new(results))
}

/// A block for `S` and pairwise disjoint sub-blocks for the Morse sets, with
/// the partial order given as pairs `(i, j)` meaning `S_i ≤ S_j`.
#[derive(Clone, Debug)]
pub struct DecompositionSpec {
    pub whole: System,
    pub parts: Vec<System>,
    pub order: Vec<(usize, usize)>,
}

impl DecompositionSpec {
    pub fn validate(&self) -> Result<(), ConleyError> {
        let n = self.parts.len();
        if n == 0 {
            return Err(ConleyError::InvalidDecomposition("no Morse sets".into()));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if !p.block.is_subblock_of(&self.whole.block) {
                return Err(ConleyError::InvalidDecomposition(format!(
                    "block {i} is not contained in the block of S"
                )));
            }
            for (j, q) in self.parts.iter().enumerate().skip(i + 1) {
                if !p.block.is_disjoint_from(&q.block) {
                    return Err(ConleyError::InvalidDecomposition(format!("blocks {i} and {j} meet")));
                }
            }
        }
        if let Some(&(i, j)) = self.order.iter().find(|&&(i, j)| i >= n || j >= n) {
            return Err(ConleyError::InvalidDecomposition(format!("order pair ({i}, {j}) out of range")));
        }
        // the strict relation must be acyclic
        let mut indeg = vec![0usize; n];
        for &(i, j) in self.order.iter().filter(|(i, j)| i != j) {
            let _ = i;
            indeg[j] += 1;
        }
        let mut queue: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(v) = queue.pop() {
            seen += 1;
            for &(_, j) in self.order.iter().filter(|&&(i, j)| i == v && i != j) {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    queue.push(j);
                }
            }
        }
        if seen != n {
            return Err(ConleyError::InvalidDecomposition("order has a cycle".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RelationsReport {
    pub verdict: Verdict,
    pub whole: HomologyResult,
    pub parts: Vec<HomologyResult>,
    pub whole_poincare: PoincarePolynomial,
    pub part_poincare: Vec<PoincarePolynomial>,
    pub quotient: PoincarePolynomial,
}

/// `Σ P_t(S_i) = P_t(S) + (1 + t) Q_t` with `Q_t ≥ 0`; an inexact division
/// is an error.
pub fn decomposition_analysis(spec: &DecompositionSpec, opts: &PipelineOptions) -> Result<RelationsReport, ConleyError> {
    spec.validate()?;
    let whole = compute_hi(&spec.whole, opts)?.homology;
    let parts = spec
        .parts
        .par_iter()
        .map(|p| compute_hi(p, opts).map(|o| o.homology))
        .collect::<Result<Vec<_>, _>>()?;
    let part_poincare: Vec<PoincarePolynomial> = parts.iter().map(poincare).collect();
    let whole_poincare = poincare(&whole);
    let quotient = relations_check(&part_poincare, &whole_poincare)?;
    Ok(RelationsReport {
        verdict: Verdict::Pass,
        whole,
        parts,
        whole_poincare,
        part_poincare,
        quotient,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ConnectionMatrixReport {
    pub verdict: Verdict,
    pub attractor_generators: Vec<Vec<String>>,
    pub repeller_generators: Vec<Vec<String>>,
    /// `delta[k - 1]` is the block `C_k(R) → C_{k−1}(A)` of `∂^S_k`.
    pub delta: Vec<IntMatrix>,
    /// `Δ` on `H_*(A) ⊕ H_*(R)`, rows and columns ordered
    /// `H_0(A), H_0(R), H_1(A), …`.
    pub connection_matrix: Vec<Vec<String>>,
    pub delta_squared_zero: bool,
    /// `rank δ_* : H_{k+1}(R) → H_k(A)` at index `k`.
    pub rank_delta: Vec<usize>,
    pub poincare_attractor: PoincarePolynomial,
    pub poincare_repeller: PoincarePolynomial,
    pub poincare_whole: PoincarePolynomial,
    /// `Σ rank δ_* t^k`.
    pub q_rank: PoincarePolynomial,
    /// Quotient of the Poincaré deficit by `1 + t`.
    pub q_deficit: PoincarePolynomial,
}

fn matvec(m: &IntMatrix, v: &[BigRational]) -> QVector {
    (0..m.rows())
        .map(|r| {
            m.row(r)
                .iter()
                .zip(v)
                .filter(|(a, _)| **a != 0)
                .fold(BigRational::zero(), |acc, (a, x)| acc + to_q(&[*a])[0].clone() * x)
        })
        .collect()
}

fn sub_complex(c: &ChainComplex, idx: &[Vec<usize>]) -> (ChainComplex, Vec<IntMatrix>) {
    let top = c.top_degree();
    let gens: Vec<Vec<String>> = (0..=top)
        .map(|k| idx[k].iter().map(|&i| c.generators[k][i].clone()).collect())
        .collect();
    let bds: Vec<IntMatrix> = (1..=top).map(|k| c.boundary(k).select(&idx[k - 1], &idx[k])).collect();
    let sub = ChainComplex::new(gens, bds.clone()).expect("restriction preserves shapes");
    (sub, bds)
}

fn homology_bases(c: &ChainComplex) -> Vec<HomologyBasis> {
    let top = c.top_degree();
    (0..=top)
        .map(|k| {
            let dk = if k == 0 {
                IntMatrix::zeros(0, c.rank(0))
            } else {
                c.boundary(k)
            };
            let dk1 = if k == top {
                IntMatrix::zeros(c.rank(top), 0)
            } else {
                c.boundary(k + 1)
            };
            HomologyBasis::new(&dk, &dk1)
        })
        .collect()
}

/// Splits `c` into attractor generators (`in_a[k][i]`) and the rest, checks the
/// block-triangular form and builds the connection matrix.
pub fn connection_matrix(c: &ChainComplex, in_a: &[Vec<bool>]) -> Result<ConnectionMatrixReport, ConleyError> {
    if c.coefficients == Coefficients::Mod2 {
        return Err(ConleyError::Mod2ConnectionMatrix);
    }
    let top = c.top_degree();
    let a_idx: Vec<Vec<usize>> = (0..=top).map(|k| (0..c.rank(k)).filter(|&i| in_a[k][i]).collect()).collect();
    let r_idx: Vec<Vec<usize>> = (0..=top).map(|k| (0..c.rank(k)).filter(|&i| !in_a[k][i]).collect()).collect();
    let mut delta = Vec::with_capacity(top);
    for k in 1..=top {
        let d = c.boundary(k);
        for &col in &a_idx[k] {
            for &row in &r_idx[k - 1] {
                let v = d.get(row, col);
                if v != 0 {
                    return Err(ConleyError::AttractorToRepeller {
                        degree: k,
                        source_label: c.generators[k][col].clone(),
                        target_label: c.generators[k - 1][row].clone(),
                        value: v,
                    });
                }
            }
        }
        delta.push(d.select(&a_idx[k - 1], &r_idx[k]));
    }
    let (ca, da) = sub_complex(c, &a_idx);
    let (cr, _) = sub_complex(c, &r_idx);
    let ha = homology_bases(&ca);
    let hr = homology_bases(&cr);
    let hs = homology_bases(c);

    // columns of δ_* in coordinates of H_{k-1}(A)
    let mut induced: Vec<Vec<QVector>> = vec![Vec::new(); top + 1];
    let mut rank_delta = vec![0usize; top.max(1)];
    for k in 1..=top {
        let images: Vec<QVector> = hr[k].cycles.iter().map(|z| matvec(&delta[k - 1], z)).collect();
        let coords: Vec<QVector> = images.iter().map(|v| ha[k - 1].coordinates(v)).collect();
        let r = rank(&coords);
        // independent route: rank([∂^A_k | δZ]) − rank(∂^A_k)
        let boundaries: Vec<QVector> = (0..da[k - 1].cols()).map(|j| to_q(&da[k - 1].column(j))).collect();
        let joint: Vec<QVector> = boundaries.iter().chain(&images).cloned().collect();
        debug_assert_eq!(r, rank(&joint) - rank(&boundaries));
        rank_delta[k - 1] = r;
        induced[k] = coords;
    }

    // Δ on ⊕_k H_k(A) ⊕ H_k(R)
    let mut offsets_a = Vec::new();
    let mut offsets_r = Vec::new();
    let mut n = 0;
    for k in 0..=top {
        offsets_a.push(n);
        n += ha[k].dim();
        offsets_r.push(n);
        n += hr[k].dim();
    }
    let mut big = vec![vec![BigRational::zero(); n]; n];
    for k in 1..=top {
        for (j, col) in induced[k].iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                big[offsets_a[k - 1] + i][offsets_r[k] + j] = v.clone();
            }
        }
    }
    let delta_squared_zero = (0..n).all(|i| {
        (0..n).all(|j| {
            (0..n)
                .fold(BigRational::zero(), |acc, l| acc + &big[i][l] * &big[l][j])
                .is_zero()
        })
    });
    let betti = |hb: &[HomologyBasis]| PoincarePolynomial::new(hb.iter().map(|h| h.dim() as u64).collect());
    let poincare_attractor = betti(&ha);
    let poincare_repeller = betti(&hr);
    let poincare_whole = betti(&hs);
    let q_rank = PoincarePolynomial::new(rank_delta.iter().map(|&r| r as u64).collect());
    let q_deficit = relations_check(&[poincare_attractor.clone(), poincare_repeller.clone()], &poincare_whole)?;
    let label = |idx: &[Vec<usize>]| -> Vec<Vec<String>> {
        (0..=top)
            .map(|k| idx[k].iter().map(|&i| c.generators[k][i].clone()).collect())
            .collect()
    };
    Ok(ConnectionMatrixReport {
        verdict: Verdict::from(delta_squared_zero && q_rank == q_deficit),
        attractor_generators: label(&a_idx),
        repeller_generators: label(&r_idx),
        delta,
        connection_matrix: big.iter().map(|r| r.iter().map(|v| v.to_string()).collect()).collect(),
        delta_squared_zero,
        rank_delta,
        poincare_attractor,
        poincare_repeller,
        poincare_whole,
        q_rank,
        q_deficit,
    })
}

/// Computes the complex of `whole` and splits its generators by containment
/// in the attractor and repeller blocks.
pub fn attractor_repeller(
    whole: &System,
    attractor: &GridBlock,
    repeller: &GridBlock,
    opts: &PipelineOptions,
) -> Result<(ConnectionMatrixReport, HiOutcome), ConleyError> {
    let outcome = compute_hi(whole, opts)?;
    let top = outcome.complex.top_degree();
    let mut in_a: Vec<Vec<bool>> = (0..=top).map(|k| vec![false; outcome.complex.rank(k)]).collect();
    let mut slot = vec![0usize; top + 1];
    for c in &outcome.quadruple.critical_points {
        let a = attractor.contains(&c.coords);
        if !a && !repeller.contains(&c.coords) {
            return Err(ConleyError::Unassigned(c.label()));
        }
        in_a[c.index][slot[c.index]] = a;
        slot[c.index] += 1;
    }
    Ok((connection_matrix(&outcome.complex, &in_a)?, outcome))
}

/// `F(x, μ) = f_{ω(μ)}(x) + r[1 + cos πμ]` on `B × S¹`, `S¹ = ℝ / 2ℤ`.
///
/// `ω` is even and 2-periodic, zero on `[0, δ]`, one on `[1 − δ, 1]`, and the
/// quintic smoothstep in between.
#[derive(Clone, Debug, Serialize)]
pub struct ContinuationFunction {
    pub family: Expr,
    pub dim: usize,
    pub delta: f64,
    pub r: f64,
    /// Metric scale on the circle factor; the checks use the product metric.
    pub kappa: f64,
    /// Sampled `max |ω' ∂_λ f_λ| / (π sin πδ)`.
    pub bound: f64,
    #[serde(skip)]
    derivs: Derivs,
}

#[derive(Clone, Debug)]
struct Derivs {
    grad: Vec<Expr>,
    hess: Vec<Expr>,
    dl: Expr,
    dl_grad: Vec<Expr>,
    dll: Expr,
}

fn omega(mu: f64, delta: f64) -> (f64, f64, f64) {
    let mut m = mu.rem_euclid(2.0);
    let mut odd = 1.0;
    if m > 1.0 {
        m = 2.0 - m;
        odd = -1.0;
    }
    if m <= delta {
        return (0.0, 0.0, 0.0);
    }
    if m >= 1.0 - delta {
        return (1.0, 0.0, 0.0);
    }
    let w = 1.0 - 2.0 * delta;
    let s = (m - delta) / w;
    let v = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
    let d1 = 30.0 * s * s * (1.0 - s) * (1.0 - s) / w;
    let d2 = 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) / (w * w);
    (v, odd * d1, d2)
}

/// Builds `F` for the homotopy `family` (an expression in `x` and `lam`).
/// Without `r`, uses twice the sampled bound, or 1 when the bound vanishes.
pub fn build_continuation_function(
    family: &Expr,
    block: &GridBlock,
    delta: f64,
    kappa: f64,
    r: Option<f64>,
) -> Result<ContinuationFunction, ConleyError> {
    if !(delta > 0.0 && delta < 0.25) {
        return Err(ConleyError::BadDelta(delta));
    }
    let m = block.dim();
    let grad: Vec<Expr> = (0..m).map(|i| family.derive(Var::X(i))).collect();
    let hess: Vec<Expr> = (0..m * m).map(|ij| grad[ij / m].derive(Var::X(ij % m))).collect();
    let dl = family.derive(Var::Lam);
    let dl_grad = (0..m).map(|i| dl.derive(Var::X(i))).collect();
    let dll = dl.derive(Var::Lam);
    let mut sup: f64 = 0.0;
    let points = block.closed_samples(3);
    for j in 0..=100 {
        let mu = delta + (1.0 - 2.0 * delta) * j as f64 / 100.0;
        let (w, w1, _) = omega(mu, delta);
        for p in &points {
            sup = sup.max((w1 * dl.eval(p, Some(w))?).abs());
        }
    }
    let bound = sup / (std::f64::consts::PI * (std::f64::consts::PI * delta).sin());
    let r = match r {
        Some(r) if r <= bound => return Err(ConleyError::AmplitudeBelowBound { r, bound }),
        Some(r) => r,
        None if bound == 0.0 => 1.0,
        None => 2.0 * bound,
    };
    Ok(ContinuationFunction {
        family: family.clone(),
        dim: m,
        delta,
        r,
        kappa,
        bound,
        derivs: Derivs {
            grad,
            hess,
            dl,
            dl_grad,
            dll,
        },
    })
}

impl ContinuationFunction {
    /// Same function with amplitude `r`, bypassing the bound; for
    /// counterexamples only.
    pub fn with_amplitude(mut self, r: f64) -> Self {
        self.r = r;
        self
    }

    pub fn value(&self, x: &[f64], mu: f64) -> Result<f64, EvalError> {
        let (w, _, _) = omega(mu, self.delta);
        Ok(self.family.eval(x, Some(w))? + self.r * (1.0 + (std::f64::consts::PI * mu).cos()))
    }

    /// Gradient and Hessian in `(x, μ)`.
    pub fn derivatives(&self, z: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>), EvalError> {
        use std::f64::consts::PI;
        let m = self.dim;
        let (x, mu) = (&z[..m], z[m]);
        let (w, w1, w2) = omega(mu, self.delta);
        let d = &self.derivs;
        let mut g = Vec::with_capacity(m + 1);
        for e in &d.grad {
            g.push(e.eval(x, Some(w))?);
        }
        let dl = d.dl.eval(x, Some(w))?;
        g.push(w1 * dl - self.r * PI * (PI * mu).sin());
        let mut h = DMatrix::zeros(m + 1, m + 1);
        for i in 0..m {
            for j in 0..m {
                h[(i, j)] = d.hess[i * m + j].eval(x, Some(w))?;
            }
            let c = w1 * d.dl_grad[i].eval(x, Some(w))?;
            h[(i, m)] = c;
            h[(m, i)] = c;
        }
        h[(m, m)] = w2 * dl + w1 * w1 * d.dll.eval(x, Some(w))? - self.r * PI * PI * (PI * mu).cos();
        Ok((g, h))
    }

    pub fn endpoint(&self, lam: f64) -> Expr {
        self.family.substitute_lam(lam)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SplitPoint {
    pub coords: Vec<f64>,
    /// Representative in `[0, 1]`.
    pub mu: f64,
    pub index: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct IndexSplitReport {
    pub verdict: Verdict,
    pub r: f64,
    pub bound: f64,
    pub delta: f64,
    pub points: Vec<SplitPoint>,
    /// Critical points with `μ` away from `{0, 1}`.
    pub interior: Vec<SplitPoint>,
    /// `|C_k(F)|` at `μ = 0` and `|C_{k−1}(f^α)|`, per `k`.
    pub alpha_counts: Vec<(usize, usize)>,
    /// `|C_k(F)|` at `μ = 1` and `|C_k(f^β)|`, per `k`.
    pub beta_counts: Vec<(usize, usize)>,
    pub mu_tol: f64,
}

/// Newton search for the critical points of `F` on `B × S¹`; they must sit
/// at `μ ∈ {0, 1}` with the index shifted by one at `μ = 0`.
pub fn verify_index_split(
    f: &ContinuationFunction,
    block: &GridBlock,
    opts: &CriticalOptions,
) -> Result<IndexSplitReport, ConleyError> {
    const MU_TOL: f64 = 1e-6;
    let m = f.dim;
    let mut seeds = Vec::new();
    for p in block.interior_samples(opts.seeds_per_axis) {
        for j in 0..=12 {
            let mut z = p.clone();
            z.push(j as f64 / 12.0);
            seeds.push(z);
        }
    }
    let roots: Vec<Vec<f64>> = seeds
        .par_iter()
        .filter_map(|z| newton_with(|z| f.derivatives(z).ok(), z, opts.newton_tol, opts.max_iterations))
        .filter(|z| block.contains(&z[..m]))
        .collect();
    let mut points: Vec<SplitPoint> = Vec::new();
    for z in roots {
        let mut mu = z[m].rem_euclid(2.0);
        if mu > 1.0 {
            mu = 2.0 - mu;
        }
        let coords = z[..m].to_vec();
        let close = |p: &SplitPoint| {
            p.coords.iter().zip(&coords).all(|(a, b)| (a - b).abs() < 1e-6) && (p.mu - mu).abs() < 1e-6
        };
        if points.iter().any(close) {
            continue;
        }
        let (_, h) = f.derivatives(&z)?;
        let eig = SymmetricEigen::new(h);
        let index = eig.eigenvalues.iter().filter(|&&v| v < 0.0).count();
        points.push(SplitPoint { coords, mu, index });
    }
    points.sort_by(|a, b| {
        a.mu.total_cmp(&b.mu)
            .then(a.index.cmp(&b.index))
            .then_with(|| a.coords.partial_cmp(&b.coords).unwrap_or(std::cmp::Ordering::Equal))
    });
    let interior: Vec<SplitPoint> = points
        .iter()
        .filter(|p| p.mu > MU_TOL && p.mu < 1.0 - MU_TOL)
        .cloned()
        .collect();

    let count = |pts: &[CriticalPoint], top: usize| {
        let mut v = vec![0usize; top + 1];
        pts.iter().for_each(|c| v[c.index] += 1);
        v
    };
    let top = m + 1;
    let alpha = count(&find_critical_points(&f.endpoint(0.0), block, opts)?, top);
    let beta = count(&find_critical_points(&f.endpoint(1.0), block, opts)?, top);
    let mut at0 = vec![0usize; top + 1];
    let mut at1 = vec![0usize; top + 1];
    for p in &points {
        if p.mu <= MU_TOL {
            at0[p.index] += 1;
        } else if p.mu >= 1.0 - MU_TOL {
            at1[p.index] += 1;
        }
    }
    let alpha_counts: Vec<(usize, usize)> = (0..=top)
        .map(|k| (at0[k], if k == 0 { 0 } else { alpha[k - 1] }))
        .collect();
    let beta_counts: Vec<(usize, usize)> = (0..=top).map(|k| (at1[k], beta[k])).collect();
    let ok = interior.is_empty()
        && alpha_counts.iter().all(|(a, b)| a == b)
        && beta_counts.iter().all(|(a, b)| a == b);
    Ok(IndexSplitReport {
        verdict: Verdict::from(ok),
        r: f.r,
        bound: f.bound,
        delta: f.delta,
        points,
        interior,
        alpha_counts,
        beta_counts,
        mu_tol: MU_TOL,
    })
}

/// Lyapunov data at one end of a continuation.
#[derive(Clone, Debug)]
pub struct Endpoint {
    pub lyapunov: Expr,
    pub collar: Collar,
}

#[derive(Clone, Debug, Serialize)]
pub struct ContinuationStep {
    pub lambda: f64,
    pub verdict: Verdict,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ContinuationReport {
    pub verdict: Verdict,
    pub steps: Vec<ContinuationStep>,
    pub alpha: HomologyResult,
    pub beta: HomologyResult,
}

/// Checks the block at every grid value of `lam`, then compares `HI_*` at
/// the endpoints `0` and `1`.
pub fn continuation_invariance(
    family: &FieldDef,
    block: &GridBlock,
    grid: &[f64],
    alpha: &Endpoint,
    beta: &Endpoint,
    opts: &PipelineOptions,
) -> Result<ContinuationReport, ConleyError> {
    let mut lambdas: Vec<f64> = grid.to_vec();
    lambdas.extend([0.0, 1.0]);
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let steps = lambdas
        .par_iter()
        .map(|&lambda| {
            let field = family.at_parameter(lambda);
            let tagged = block.classify_boundary(&field, opts.boundary_samples, opts.margin_tol);
            let unresolved = tagged.faces_tagged(FaceTag::Unresolved).len();
            let reason = if unresolved > 0 {
                Some(format!("{unresolved} unresolved faces"))
            } else {
                let iso = tagged.check_isolation(&field, &opts.isolation)?;
                iso.failures()
                    .first()
                    .map(|s| format!("boundary sample {:?} stays in the block", s.point))
            };
            Ok(ContinuationStep {
                lambda,
                verdict: Verdict::from(reason.is_none()),
                reason,
            })
        })
        .collect::<Result<Vec<_>, FlowError>>()?;
    if let Some(bad) = steps.iter().find(|s| !s.verdict.passed()) {
        return Err(ConleyError::ContinuationBreak {
            lambda: bad.lambda,
            reason: bad.reason.clone().unwrap_or_default(),
        });
    }
    let end = |lam: f64, e: &Endpoint| {
        let sys = System {
            field: family.at_parameter(lam),
            block: block.clone(),
            lyapunov: e.lyapunov.clone(),
            collar: e.collar.clone(),
        };
        compute_hi(&sys, opts).map(|o| o.homology)
    };
    let (a, b) = rayon::join(|| end(0.0, alpha), || end(1.0, beta));
    let (alpha, beta) = (a?, b?);
    Ok(ContinuationReport {
        verdict: Verdict::from(alpha == beta),
        steps,
        alpha,
        beta,
    })
}
