//! Command implementations behind the `mcf` binary. Each command reads a
//! system file and produces a deterministic JSON [`Report`].

pub mod schema;

use mcf_core::block::FaceTag;
use mcf_core::conley::{
    attractor_repeller, build_continuation_function, continuation_invariance, decomposition_analysis,
    exit_set_homology, verify_index_split, ExitTheoremReport,
};
use mcf_core::homalg::{homology, poincare};
use mcf_core::lyapunov::verify_lyapunov;
use mcf_core::{compute_hi, Coefficients, ConleyError, IntMatrix, PipelineOptions, Verdict};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use schema::SystemFile;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("input error: {0}")]
    Input(String),
    #[error("could not write report: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Block,
    Lyapunov,
    Hi,
    Relations,
    Continue,
    Cubical,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Block => "block",
            Command::Lyapunov => "lyapunov",
            Command::Hi => "hi",
            Command::Relations => "relations",
            Command::Continue => "continue",
            Command::Cubical => "cubical",
        }
    }
}

/// Command-line overrides of the file options.
#[derive(Clone, Debug, Default)]
pub struct Flags {
    pub seed: Option<u64>,
    pub strict: bool,
    pub coefficients: Option<Coefficients>,
    /// Zeroes every connection count before taking homology. Exists to
    /// exercise the mismatch path of `hi`.
    pub drop_counts: bool,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub tolerance_profile: &'static str,
    pub coefficients: Coefficients,
    /// Every tolerance and budget the run used.
    pub options: PipelineOptions,
    pub verdict: Verdict,
    pub error: Option<String>,
    pub summary: Vec<String>,
    pub result: Value,
}

impl Report {
    pub fn exit_code(&self) -> i32 {
        if self.verdict.passed() {
            0
        } else {
            1
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}: {:?}\n", self.tool, self.command, self.verdict);
        if let Some(e) = &self.error {
            out += &format!("error: {e}\n");
        }
        for line in &self.summary {
            out += line;
            out.push('\n');
        }
        out
    }
}

struct Output {
    verdict: Verdict,
    summary: Vec<String>,
    result: Value,
}

fn value(v: impl Serialize) -> Value {
    serde_json::to_value(v).expect("report data serializes")
}

/// Runs `cmd` on the system file `text`. Mathematical failures produce a
/// `Fail` report; malformed input is an error.
pub fn run(cmd: Command, text: &str, flags: &Flags) -> Result<Report, CliError> {
    let file = SystemFile::from_json(text)?;
    let mut opts = file.pipeline_options()?;
    if let Some(s) = flags.seed {
        opts.seed = s;
    }
    if let Some(c) = flags.coefficients {
        opts.connections.coefficients = c;
    }
    if flags.strict {
        opts = opts.strict();
    }
    let outcome = match cmd {
        Command::Block => cmd_block(&file, &opts),
        Command::Lyapunov => cmd_lyapunov(&file, &opts),
        Command::Hi => cmd_hi(&file, &opts, flags.drop_counts),
        Command::Relations => cmd_relations(&file, &opts),
        Command::Continue => cmd_continue(&file, &opts),
        Command::Cubical => cmd_cubical(&file, &opts),
    };
    let (output, error) = match outcome {
        Ok(o) => (o, None),
        Err(Failure::Input(e)) => return Err(e),
        Err(Failure::Math(e)) => (
            Output {
                verdict: Verdict::Fail,
                summary: Vec::new(),
                result: Value::Null,
            },
            Some(e.to_string()),
        ),
    };
    Ok(Report {
        tool: "mcf",
        version: env!("CARGO_PKG_VERSION"),
        command: cmd.name(),
        seed: opts.seed,
        tolerance_profile: if flags.strict { "strict" } else { "default" },
        coefficients: opts.coefficients(),
        options: opts,
        verdict: output.verdict,
        error,
        summary: output.summary,
        result: output.result,
    })
}

enum Failure {
    Input(CliError),
    Math(ConleyError),
}

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        Failure::Input(e)
    }
}

impl From<ConleyError> for Failure {
    fn from(e: ConleyError) -> Self {
        Failure::Math(e)
    }
}

impl From<mcf_core::flow::FlowError> for Failure {
    fn from(e: mcf_core::flow::FlowError) -> Self {
        Failure::Math(e.into())
    }
}

impl From<mcf_core::lyapunov::LyapunovError> for Failure {
    fn from(e: mcf_core::lyapunov::LyapunovError) -> Self {
        Failure::Math(e.into())
    }
}

fn cmd_block(file: &SystemFile, opts: &PipelineOptions) -> Result<Output, Failure> {
    let field = file.field_at_start()?;
    let block = file
        .block()?
        .classify_boundary(&field, opts.boundary_samples, opts.margin_tol);
    let tally = |t: FaceTag| block.faces_tagged(t).len();
    let unresolved = block.unresolved();
    let mut summary = vec![format!(
        "faces: {} egress, {} ingress, {} unresolved",
        tally(FaceTag::Egress),
        tally(FaceTag::Ingress),
        unresolved.len()
    )];
    for f in &unresolved {
        summary.push(format!("unresolved face: cube {:?}, axis {}, upper {}", f.cube, f.axis, f.upper));
    }
    let mut result = json!({
        "faces": value(block.boundary()),
        "unresolved": value(&unresolved),
    });
    let mut verdict = Verdict::from(unresolved.is_empty());
    if unresolved.is_empty() {
        let iso = block.check_isolation(&field, &opts.isolation)?;
        let exit = block.exit_set().map_err(ConleyError::from)?;
        summary.push(format!(
            "isolation: {:?} ({} samples, worst margin {:e}, slowest exit {:.3})",
            iso.verdict,
            iso.samples.len(),
            iso.worst_margin,
            iso.slowest_exit
        ));
        summary.push(format!("exit set: {} cells", exit.len()));
        for s in iso.failures() {
            summary.push(format!("isolation failure at {:?}", s.point));
        }
        verdict = iso.verdict;
        result["isolation"] = value(mcf_core::conley::IsolationSummary::from(&iso));
        result["isolation_failures"] = value(iso.failures());
        result["exit_set_cells"] = json!(exit.len());
    }
    Ok(Output {
        verdict,
        summary,
        result,
    })
}

fn cmd_lyapunov(file: &SystemFile, opts: &PipelineOptions) -> Result<Output, Failure> {
    let sys = file.system()?;
    let rep = verify_lyapunov(&sys.lyapunov, &sys.field, &sys.block, &sys.collar, &opts.lyapunov)?;
    let mut summary = vec![format!(
        "min decrease {:e} over {} samples (tolerance {:e})",
        rep.min_decrease, rep.samples_checked, rep.strictness_tol
    )];
    if let Some(p) = &rep.location {
        summary.push(format!("worst sample at {p:?}"));
    }
    Ok(Output {
        verdict: rep.verdict,
        summary,
        result: value(&rep),
    })
}

fn cmd_hi(file: &SystemFile, opts: &PipelineOptions, drop_counts: bool) -> Result<Output, Failure> {
    let sys = file.system()?;
    let mut out = compute_hi(&sys, opts)?;
    let mut dropped = false;
    if drop_counts {
        for k in 1..=out.complex.top_degree() {
            let d = out.complex.boundary(k);
            *out.complex.boundary_mut(k) = IntMatrix::zeros(d.rows(), d.cols());
        }
        out.homology = homology(&out.complex).map_err(ConleyError::from)?;
        dropped = true;
    }
    let cubical = exit_set_homology(&sys, opts)?;
    let rep = ExitTheoremReport::new(out.homology.clone(), cubical);
    let crits: Vec<Value> = out
        .quadruple
        .critical_points
        .iter()
        .map(|c| json!({"id": c.id, "coords": c.coords, "index": c.index, "value": c.value, "margin": c.margin}))
        .collect();
    let counts: Vec<Value> = out
        .quadruple
        .counts
        .iter()
        .map(|c| json!({"source": c.source, "target": c.target, "n": c.n, "witnesses": c.witnesses.len()}))
        .collect();
    let mut summary = vec![
        format!("HI: {}", rep.morse),
        format!("H(B, B-): {}", rep.cubical),
        format!("Poincare polynomial: {}", poincare(&rep.morse)),
        format!(
            "{} critical points, {} nonzero counts",
            crits.len(),
            out.quadruple.counts.iter().filter(|c| c.n != 0).count()
        ),
    ];
    if dropped {
        summary.push("connection counts dropped before taking homology".into());
    }
    if !rep.verdict.passed() {
        summary.push(format!("mismatch: HI {} differs from H(B, B-) {}", rep.morse, rep.cubical));
    }
    Ok(Output {
        verdict: rep.verdict,
        summary,
        result: json!({
            "morse": value(&rep.morse),
            "cubical": value(&rep.cubical),
            "poincare": value(poincare(&rep.morse)),
            "critical_points": crits,
            "counts": counts,
            "perturbation": {
                "function": value(&out.quadruple.function),
                "epsilon": out.quadruple.epsilon,
                "seed": out.quadruple.seed,
                "certificate": value(&out.quadruple.certificate),
            },
            "lyapunov": value(&out.lyapunov),
            "isolation": value(&out.isolation),
        }),
    })
}

fn cmd_relations(file: &SystemFile, opts: &PipelineOptions) -> Result<Output, Failure> {
    let spec = file.decomposition()?;
    let rel = decomposition_analysis(&spec, opts)?;
    let mut summary = vec![
        format!("P(S) = {}", rel.whole_poincare),
        format!(
            "parts: {}",
            rel.part_poincare.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(", ")
        ),
        format!("Q = {}", rel.quotient),
    ];
    let mut verdict = rel.verdict;
    let mut result = json!({ "relations": value(&rel) });
    if let Some(ar) = file.decomposition.as_ref().and_then(|d| d.attractor_repeller.as_ref()) {
        let a = file.block_from(&ar.attractor)?;
        let r = file.block_from(&ar.repeller)?;
        let (cm, _) = attractor_repeller(&spec.whole, &a, &r, opts)?;
        summary.push(format!(
            "connection matrix: rank polynomial {}, deficit {}, Δ² = 0: {}",
            cm.q_rank, cm.q_deficit, cm.delta_squared_zero
        ));
        if !cm.verdict.passed() {
            verdict = Verdict::Fail;
        }
        result["connection_matrix"] = value(&cm);
    }
    Ok(Output {
        verdict,
        summary,
        result,
    })
}

fn cmd_continue(file: &SystemFile, opts: &PipelineOptions) -> Result<Output, Failure> {
    if !file.parametric {
        return Err(CliError::Input("continuation needs `parametric: true`".into()).into());
    }
    let family = file.field()?;
    let block = file.block()?;
    let grid = file.lambda_grid()?;
    let (alpha, beta) = file.endpoints()?;
    let rep = continuation_invariance(&family, &block, &grid, &alpha, &beta, opts)?;
    let mut summary = vec![
        format!("isolating at all {} grid values", rep.steps.len()),
        format!("HI at lam = 0: {}", rep.alpha),
        format!("HI at lam = 1: {}", rep.beta),
    ];
    let mut verdict = rep.verdict;
    let mut result = json!({ "continuation": value(&rep) });
    if let Some(s) = &file.continuation()?.index_split {
        let f = file.expr(&s.homotopy, "homotopy")?;
        let cf = build_continuation_function(&f, &block, s.delta, s.kappa, s.r)?;
        let split = verify_index_split(&cf, &block, &opts.critical)?;
        summary.push(format!(
            "index split: {:?} (r = {:e}, bound = {:e}, {} interior points)",
            split.verdict,
            split.r,
            split.bound,
            split.interior.len()
        ));
        if !split.verdict.passed() {
            verdict = Verdict::Fail;
        }
        result["index_split"] = value(&split);
    }
    Ok(Output {
        verdict,
        summary,
        result,
    })
}

fn cmd_cubical(file: &SystemFile, opts: &PipelineOptions) -> Result<Output, Failure> {
    let sys = mcf_core::System {
        lyapunov: mcf_core::Expr::constant(0.0),
        collar: mcf_core::Collar::none(),
        field: file.field_at_start()?,
        block: file.block()?,
    };
    let h = exit_set_homology(&sys, opts)?;
    Ok(Output {
        verdict: Verdict::Pass,
        summary: vec![format!("H(B, B-): {h}")],
        result: json!({ "homology": value(&h), "poincare": value(poincare(&h)) }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SINK: &str = r#"{"dimension": 1, "field": ["-x1"], "block": {"box": [[-1, 1]], "spacing": 0.5},
        "lyapunov": "x1^2/2", "invariant_set": {"samples": [[0]], "collar_radius": 0.1}}"#;

    #[test]
    fn flags_override_file() {
        let flags = Flags {
            seed: Some(5),
            strict: true,
            coefficients: Some(Coefficients::Mod2),
            drop_counts: false,
        };
        let r = run(Command::Hi, SINK, &flags).unwrap();
        assert_eq!(r.seed, 5);
        assert_eq!(r.tolerance_profile, "strict");
        assert_eq!(r.coefficients, Coefficients::Mod2);
        assert_eq!(r.exit_code(), 0);
    }

    #[test]
    fn math_failure_is_a_report() {
        let bad = SINK.replace(r#""x1^2/2""#, r#""-x1^2/2""#);
        let r = run(Command::Hi, &bad, &Flags::default()).unwrap();
        assert_eq!(r.exit_code(), 1);
        assert!(r.error.is_some());
        assert!(r.to_text().contains("error:"));
    }

    #[test]
    fn continue_requires_parametric() {
        let text = SINK.replace(r#""lyapunov""#, r#""continuation": {}, "lyapunov""#);
        let e = run(Command::Continue, &text, &Flags::default()).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
