//! Morse-Conley-Floer homology of isolated invariant sets of flows on ℝ^m.
//!
//! Pipeline: a vector field and a cubical isolating block are checked for
//! transversality and isolation, a Lyapunov function is verified and
//! perturbed to a Morse function, its negative gradient flow is used to count
//! connecting orbits, and the homology of the resulting chain complex is
//! compared against the cubical homology of the block relative to its exit
//! set.

pub mod block;
pub mod expr;
pub mod flow;
pub mod homalg;
pub mod lyapunov;
pub mod conley;
pub mod morse;

use serde::Serialize;

pub use block::{build_block, BlockError, BlockSpec, Face, FaceTag, Grid, GridBlock, IsolationReport};
pub use expr::{parse, Expr, FieldDef, ScalarFunction};
pub use flow::{LimitClass, Tolerances, Trajectory};
pub use homalg::{ChainComplex, Coefficients, HomologyResult, IntMatrix, PoincarePolynomial};
pub use conley::{compute_hi, verify_exit_theorem, ConleyError, HiOutcome, PipelineOptions, System};
pub use lyapunov::Collar;
pub use morse::{CriticalPoint, MorseComplex, MorseError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn passed(self) -> bool {
        self == Verdict::Pass
    }
}

impl From<bool> for Verdict {
    fn from(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}
