//! The system file: a JSON description of a flow, a block and the data the
//! pipeline needs. Unknown keys are rejected.

use mcf_core::conley::{DecompositionSpec, Endpoint};
use mcf_core::lyapunov::PerturbationTerm;
use mcf_core::{build_block, parse, BlockSpec, Collar, Coefficients, Expr, FieldDef, Grid, GridBlock, PipelineOptions, System};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    pub dimension: usize,
    /// Vector field components; may mention `lam` when `parametric`.
    pub field: Vec<String>,
    #[serde(default)]
    pub parametric: bool,
    pub block: BlockDef,
    pub lyapunov: Option<String>,
    pub invariant_set: Option<InvariantSetDef>,
    #[serde(default)]
    pub options: OptionsDef,
    pub decomposition: Option<DecompositionDef>,
    pub continuation: Option<ContinuationDef>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockDef {
    #[serde(rename = "box")]
    pub bounds: Option<Vec<[f64; 2]>>,
    pub boxes: Option<Vec<Vec<[f64; 2]>>>,
    pub cubes: Option<Vec<Vec<i64>>>,
    pub spacing: f64,
    pub origin: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantSetDef {
    pub samples: Vec<Vec<f64>>,
    pub collar_radius: f64,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionsDef {
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
    /// `linear` or `quadratic`.
    pub term: Option<String>,
    pub homotopy_steps: Option<usize>,
    pub boundary_samples: Option<usize>,
    pub isolation_budget: Option<f64>,
    pub limit_budget: Option<f64>,
    pub circle_seeds: Option<usize>,
    pub coefficients: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorseSetDef {
    pub block: BlockDef,
    /// Defaults to the Lyapunov function of the whole system.
    pub lyapunov: Option<String>,
    pub invariant_set: Option<InvariantSetDef>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttractorRepellerDef {
    pub attractor: BlockDef,
    pub repeller: BlockDef,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionDef {
    pub sets: Vec<MorseSetDef>,
    #[serde(default)]
    pub order: Vec<[usize; 2]>,
    pub attractor_repeller: Option<AttractorRepellerDef>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuationDef {
    pub lambda_grid: Option<Vec<f64>>,
    pub steps: Option<usize>,
    /// Lyapunov function at `lam = 1`; defaults to the one at `lam = 0`.
    pub lyapunov_end: Option<String>,
    pub invariant_set_end: Option<InvariantSetDef>,
    pub index_split: Option<IndexSplitDef>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexSplitDef {
    /// Homotopy of functions, an expression in the coordinates and `lam`.
    pub homotopy: String,
    pub delta: f64,
    pub r: Option<f64>,
    #[serde(default = "one")]
    pub kappa: f64,
}

fn one() -> f64 {
    1.0
}

fn input(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

impl SystemFile {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let file: SystemFile = serde_json::from_str(text).map_err(|e| input(format!("schema: {e}")))?;
        if file.dimension == 0 {
            return Err(input("dimension must be positive"));
        }
        if file.field.len() != file.dimension {
            return Err(input(format!(
                "field has {} components, dimension is {}",
                file.field.len(),
                file.dimension
            )));
        }
        Ok(file)
    }

    pub fn field(&self) -> Result<FieldDef, CliError> {
        let comps: Vec<&str> = self.field.iter().map(String::as_str).collect();
        FieldDef::parse(self.dimension, &comps, self.parametric).map_err(|e| input(format!("field: {e}")))
    }

    /// The field itself, or its value at `lam = 0` for a parametric family.
    pub fn field_at_start(&self) -> Result<FieldDef, CliError> {
        let f = self.field()?;
        Ok(if self.parametric { f.at_parameter(0.0) } else { f })
    }

    pub fn expr(&self, text: &str, what: &str) -> Result<Expr, CliError> {
        parse(text, self.dimension).map_err(|e| input(format!("{what}: {e}")))
    }

    pub fn lyapunov(&self) -> Result<Expr, CliError> {
        let text = self.lyapunov.as_deref().ok_or_else(|| input("missing key `lyapunov`"))?;
        self.expr(text, "lyapunov")
    }

    pub fn block(&self) -> Result<GridBlock, CliError> {
        self.block_from(&self.block)
    }

    pub fn block_from(&self, def: &BlockDef) -> Result<GridBlock, CliError> {
        let given = [def.bounds.is_some(), def.boxes.is_some(), def.cubes.is_some()]
            .iter()
            .filter(|b| **b)
            .count();
        if given != 1 {
            return Err(input("block needs exactly one of `box`, `boxes`, `cubes`"));
        }
        let pairs = |v: &Vec<[f64; 2]>| v.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>();
        let spec = if let Some(b) = &def.bounds {
            BlockSpec::Box(pairs(b))
        } else if let Some(bs) = &def.boxes {
            BlockSpec::Boxes(bs.iter().map(pairs).collect())
        } else {
            BlockSpec::Cubes(def.cubes.clone().unwrap_or_default())
        };
        let grid = match &def.origin {
            Some(o) => Grid::new(o.clone(), def.spacing),
            None => Grid::with_spacing(def.spacing),
        };
        let b = build_block(&spec, &grid).map_err(|e| input(format!("block: {e}")))?;
        if b.dim() != self.dimension {
            return Err(input(format!("block has dimension {}, expected {}", b.dim(), self.dimension)));
        }
        Ok(b)
    }

    pub fn collar_of(def: Option<&InvariantSetDef>) -> Collar {
        def.map_or_else(Collar::none, |s| Collar {
            samples: s.samples.clone(),
            radius: s.collar_radius,
        })
    }

    pub fn system(&self) -> Result<System, CliError> {
        Ok(System {
            field: self.field_at_start()?,
            block: self.block()?,
            lyapunov: self.lyapunov()?,
            collar: Self::collar_of(self.invariant_set.as_ref()),
        })
    }

    pub fn decomposition(&self) -> Result<DecompositionSpec, CliError> {
        let d = self
            .decomposition
            .as_ref()
            .ok_or_else(|| input("missing key `decomposition`"))?;
        let whole = self.system()?;
        let parts = d
            .sets
            .iter()
            .map(|s| {
                Ok(System {
                    field: whole.field.clone(),
                    block: self.block_from(&s.block)?,
                    lyapunov: match &s.lyapunov {
                        Some(t) => self.expr(t, "decomposition lyapunov")?,
                        None => whole.lyapunov.clone(),
                    },
                    collar: Self::collar_of(s.invariant_set.as_ref()),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(DecompositionSpec {
            whole,
            parts,
            order: d.order.iter().map(|p| (p[0], p[1])).collect(),
        })
    }

    pub fn endpoints(&self) -> Result<(Endpoint, Endpoint), CliError> {
        let c = self.continuation()?;
        let alpha = Endpoint {
            lyapunov: self.lyapunov()?,
            collar: Self::collar_of(self.invariant_set.as_ref()),
        };
        let beta = Endpoint {
            lyapunov: match &c.lyapunov_end {
                Some(t) => self.expr(t, "lyapunov_end")?,
                None => alpha.lyapunov.clone(),
            },
            collar: match &c.invariant_set_end {
                Some(s) => Self::collar_of(Some(s)),
                None => alpha.collar.clone(),
            },
        };
        Ok((alpha, beta))
    }

    pub fn continuation(&self) -> Result<&ContinuationDef, CliError> {
        self.continuation
            .as_ref()
            .ok_or_else(|| input("missing key `continuation`"))
    }

    pub fn lambda_grid(&self) -> Result<Vec<f64>, CliError> {
        let c = self.continuation()?;
        match (&c.lambda_grid, c.steps) {
            (Some(g), None) => Ok(g.clone()),
            (None, Some(n)) if n > 0 => Ok((0..=n).map(|k| k as f64 / n as f64).collect()),
            (None, None) => Ok((0..=10).map(|k| k as f64 / 10.0).collect()),
            _ => Err(input("continuation needs one of `lambda_grid`, a positive `steps`")),
        }
    }

    /// File options over library defaults.
    pub fn pipeline_options(&self) -> Result<PipelineOptions, CliError> {
        let o = &self.options;
        let mut p = PipelineOptions::default();
        if let Some(e) = o.epsilon {
            p.epsilon = e;
        }
        if let Some(s) = o.seed {
            p.seed = s;
        }
        if let Some(t) = &o.term {
            p.term = match t.as_str() {
                "linear" => PerturbationTerm::Linear,
                "quadratic" => PerturbationTerm::Quadratic,
                other => return Err(input(format!("unknown perturbation term `{other}`"))),
            };
        }
        if let Some(n) = o.homotopy_steps {
            p.homotopy_steps = n;
        }
        if let Some(n) = o.boundary_samples {
            p.boundary_samples = n;
        }
        if let Some(b) = o.isolation_budget {
            p.isolation.budget = b;
        }
        if let Some(b) = o.limit_budget {
            p.connections.limit.budget = b;
        }
        if let Some(n) = o.circle_seeds {
            p.connections.circle_seeds = n;
        }
        if let Some(c) = &o.coefficients {
            p.connections.coefficients = parse_coefficients(c)?;
        }
        Ok(p)
    }
}

pub fn parse_coefficients(text: &str) -> Result<Coefficients, CliError> {
    match text {
        "Z" => Ok(Coefficients::Integer),
        "Z2" => Ok(Coefficients::Mod2),
        other => Err(input(format!("unknown coefficients `{other}` (expected Z or Z2)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"dimension": 1, "field": ["-x1"], "block": {"box": [[-1, 1]], "spacing": 0.5}, "lyapunov": "x1^2"}"#;

    #[test]
    fn parses_minimal_file() {
        let f = SystemFile::from_json(LINE).unwrap();
        assert_eq!(f.block().unwrap().dim(), 1);
        assert_eq!(f.lambda_grid().map_err(|e| e.to_string()).unwrap_err(), "input error: missing key `continuation`");
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let wrong_len = LINE.replace(r#"["-x1"]"#, r#"["-x1", "x1"]"#);
        assert!(SystemFile::from_json(&wrong_len).is_err());
        let two_blocks = LINE.replace(r#""box": [[-1, 1]]"#, r#""box": [[-1, 1]], "cubes": [[0]]"#);
        let f = SystemFile::from_json(&two_blocks).unwrap();
        assert!(f.block().is_err());
        let wrong_dim = LINE.replace(r#"[[-1, 1]]"#, r#"[[-1, 1], [0, 1]]"#);
        assert!(SystemFile::from_json(&wrong_dim).unwrap().block().is_err());
    }

    #[test]
    fn options_override_defaults() {
        let text = LINE.replace(
            r#""lyapunov""#,
            r#""options": {"epsilon": 0.2, "term": "quadratic", "coefficients": "Z2"}, "lyapunov""#,
        );
        let p = SystemFile::from_json(&text).unwrap().pipeline_options().unwrap();
        assert_eq!(p.epsilon, 0.2);
        assert_eq!(p.term, PerturbationTerm::Quadratic);
        assert_eq!(p.coefficients(), Coefficients::Mod2);
        let bad = LINE.replace(r#""lyapunov""#, r#""options": {"term": "cubic"}, "lyapunov""#);
        assert!(SystemFile::from_json(&bad).unwrap().pipeline_options().is_err());
    }

    #[test]
    fn grid_from_steps() {
        let text = LINE.replace(r#""lyapunov""#, r#""continuation": {"steps": 4}, "lyapunov""#);
        let g = SystemFile::from_json(&text).unwrap().lambda_grid().unwrap();
        assert_eq!(g, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }
}
