//! Exact homological algebra over ℤ (and ℤ/2 as a cross-check).

mod cubical;
pub mod rational;
mod snf;

use std::fmt;

use num_bigint::BigInt;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::Serialize;
use thiserror::Error;

pub use cubical::{cubical_relative_homology, relative_chain_complex, CubicalError, CubicalSet, ElementaryCube};
pub use snf::{invariant_factors, smith_normal_form, BigMatrix, SmithForm};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HomalgError {
    #[error("boundary {degree} has shape {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    Shape {
        degree: usize,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("not a chain complex: {0}")]
    NotAComplex(DSquaredFailure),
    #[error("data inconsistent with a Morse decomposition: {0}")]
    Relations(String),
}

/// Dense integer matrix, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct IntMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i64>,
}

impl IntMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        IntMatrix {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = IntMatrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1);
        }
        m
    }

    /// Panics if the rows have unequal length.
    pub fn from_rows(rows: &[Vec<i64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        IntMatrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: i64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn row(&self, r: usize) -> &[i64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<i64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = IntMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// Exact product; entries are accumulated as big integers.
    pub fn mul_exact(&self, other: &IntMatrix) -> BigMatrix {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = BigMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0 {
                    continue;
                }
                for c in 0..other.cols {
                    let b = other.get(k, c);
                    if b != 0 {
                        out[(r, c)] += BigInt::from(a) * b;
                    }
                }
            }
        }
        out
    }

    /// Entrywise reduction to {0, 1}.
    pub fn mod2(&self) -> Self {
        IntMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.rem_euclid(2)).collect(),
        }
    }

    pub fn negate_column(&mut self, c: usize) {
        for r in 0..self.rows {
            let v = self.get(r, c);
            self.set(r, c, -v);
        }
    }

    /// Submatrix on the given row and column index lists, in that order.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut out = IntMatrix::zeros(rows.len(), cols.len());
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                out.set(i, j, self.get(r, c));
            }
        }
        out
    }

    pub fn to_big(&self) -> BigMatrix {
        let mut out = BigMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(r, c)] = BigInt::from(self.get(r, c));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Default)]
pub enum Coefficients {
    #[default]
    #[serde(rename = "Z")]
    Integer,
    #[serde(rename = "Z2")]
    Mod2,
}

/// A bounded chain complex `C_top → … → C_0`.
///
/// `boundaries[k - 1]` is `∂_k : C_k → C_{k-1}`, a `|C_{k-1}| × |C_k|` matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainComplex {
    pub generators: Vec<Vec<String>>,
    boundaries: Vec<IntMatrix>,
    pub coefficients: Coefficients,
}

impl ChainComplex {
    pub fn new(generators: Vec<Vec<String>>, boundaries: Vec<IntMatrix>) -> Result<Self, HomalgError> {
        Self::with_coefficients(generators, boundaries, Coefficients::Integer)
    }

    pub fn with_coefficients(
        generators: Vec<Vec<String>>,
        boundaries: Vec<IntMatrix>,
        coefficients: Coefficients,
    ) -> Result<Self, HomalgError> {
        let top = generators.len().saturating_sub(1);
        let mut bounds = boundaries;
        bounds.resize_with(top, || IntMatrix::zeros(0, 0));
        for k in 1..=top {
            let b = &mut bounds[k - 1];
            let (er, ec) = (generators[k - 1].len(), generators[k].len());
            if b.rows() == 0 && b.cols() == 0 && (er, ec) != (0, 0) {
                *b = IntMatrix::zeros(er, ec);
            }
            if b.rows() != er || b.cols() != ec {
                return Err(HomalgError::Shape {
                    degree: k,
                    rows: b.rows(),
                    cols: b.cols(),
                    expected_rows: er,
                    expected_cols: ec,
                });
            }
        }
        let bounds = if coefficients == Coefficients::Mod2 {
            bounds.iter().map(IntMatrix::mod2).collect()
        } else {
            bounds
        };
        Ok(ChainComplex {
            generators,
            boundaries: bounds,
            coefficients,
        })
    }

    /// Complex on degrees `0..=top` with no generators.
    pub fn zero(top: usize) -> Self {
        ChainComplex::new(vec![Vec::new(); top + 1], Vec::new()).expect("zero complex is well formed")
    }

    pub fn top_degree(&self) -> usize {
        self.generators.len().saturating_sub(1)
    }

    pub fn rank(&self, k: usize) -> usize {
        self.generators.get(k).map_or(0, Vec::len)
    }

    /// `∂_k`; for `k = 0` or beyond the top, the zero map.
    pub fn boundary(&self, k: usize) -> IntMatrix {
        if k == 0 || k > self.top_degree() {
            let rows = if k == 0 { 0 } else { self.rank(k - 1) };
            return IntMatrix::zeros(rows, self.rank(k));
        }
        self.boundaries[k - 1].clone()
    }

    pub fn boundary_mut(&mut self, k: usize) -> &mut IntMatrix {
        &mut self.boundaries[k - 1]
    }

    pub fn to_mod2(&self) -> Self {
        ChainComplex::with_coefficients(self.generators.clone(), self.boundaries.clone(), Coefficients::Mod2)
            .expect("shapes already validated")
    }

    /// Alternating sum of chain ranks.
    pub fn euler_characteristic(&self) -> i64 {
        (0..=self.top_degree())
            .map(|k| if k % 2 == 0 { 1 } else { -1 } * self.rank(k) as i64)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DSquaredFailure {
    /// Degree `k` of the failing composition `∂_{k-1} ∂_k`.
    pub degree: usize,
    /// 1-based matrix position of the first nonzero entry.
    pub row: usize,
    pub col: usize,
    pub value: String,
}

impl fmt::Display for DSquaredFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "∂_{}∘∂_{} has entry {} at ({}, {})",
            self.degree - 1,
            self.degree,
            self.value,
            self.row,
            self.col
        )
    }
}

/// Exact check that consecutive boundaries compose to zero.
pub fn verify_d_squared(c: &ChainComplex) -> Result<(), DSquaredFailure> {
    for k in 2..=c.top_degree() {
        let prod = c.boundary(k - 1).mul_exact(&c.boundary(k));
        for r in 0..prod.rows() {
            for col in 0..prod.cols() {
                let v = &prod[(r, col)];
                let nonzero = match c.coefficients {
                    Coefficients::Integer => !v.is_zero(),
                    Coefficients::Mod2 => !(v % 2u32).is_zero(),
                };
                if nonzero {
                    return Err(DSquaredFailure {
                        degree: k,
                        row: r + 1,
                        col: col + 1,
                        value: v.to_string(),
                    });
                }
            }
        }
    }
    Ok(())
}

/// Homology groups `H_k ≅ ℤ^{betti[k]} ⊕ ⊕_i ℤ/torsion[k][i]`.
///
/// Equality ignores trailing zero degrees.
#[derive(Clone, Debug, Serialize)]
pub struct HomologyResult {
    pub betti: Vec<usize>,
    pub torsion: Vec<Vec<u64>>,
    pub coefficients: Coefficients,
}

impl HomologyResult {
    pub fn zero(top: usize) -> Self {
        HomologyResult {
            betti: vec![0; top + 1],
            torsion: vec![Vec::new(); top + 1],
            coefficients: Coefficients::Integer,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.betti.iter().all(|&b| b == 0) && self.torsion.iter().all(Vec::is_empty)
    }

    pub fn betti(&self, k: usize) -> usize {
        self.betti.get(k).copied().unwrap_or(0)
    }

    pub fn torsion(&self, k: usize) -> &[u64] {
        self.torsion.get(k).map_or(&[], Vec::as_slice)
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.betti
            .iter()
            .enumerate()
            .map(|(k, &b)| if k % 2 == 0 { b as i64 } else { -(b as i64) })
            .sum()
    }

    fn significant_len(&self) -> usize {
        (0..self.betti.len().max(self.torsion.len()))
            .rev()
            .find(|&k| self.betti(k) != 0 || !self.torsion(k).is_empty())
            .map_or(0, |k| k + 1)
    }
}

impl PartialEq for HomologyResult {
    fn eq(&self, other: &Self) -> bool {
        let n = self.significant_len().max(other.significant_len());
        self.coefficients == other.coefficients
            && (0..n).all(|k| self.betti(k) == other.betti(k) && self.torsion(k) == other.torsion(k))
    }
}

impl fmt::Display for HomologyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ring = match self.coefficients {
            Coefficients::Integer => "Z",
            Coefficients::Mod2 => "Z2",
        };
        let mut parts = Vec::new();
        for k in 0..self.significant_len() {
            let mut summands = Vec::new();
            match self.betti(k) {
                0 => {}
                1 => summands.push(ring.to_string()),
                b => summands.push(format!("{ring}^{b}")),
            }
            summands.extend(self.torsion(k).iter().map(|d| format!("Z/{d}")));
            if !summands.is_empty() {
                parts.push(format!("H{k}={}", summands.join("+")));
            }
        }
        if parts.is_empty() {
            write!(f, "0")
        } else {
            write!(f, "{}", parts.join(", "))
        }
    }
}

/// Homology of `c`; fails if `∂² ≠ 0`.
pub fn homology(c: &ChainComplex) -> Result<HomologyResult, HomalgError> {
    verify_d_squared(c).map_err(HomalgError::NotAComplex)?;
    let top = c.top_degree();
    // ranks[k] = rank ∂_k, factors[k] = invariant factors of ∂_k
    let mut ranks = vec![0usize; top + 2];
    let mut factors: Vec<Vec<u64>> = vec![Vec::new(); top + 2];
    for k in 1..=top {
        let b = c.boundary(k);
        match c.coefficients {
            Coefficients::Integer => {
                let d = invariant_factors(&b);
                ranks[k] = d.len();
                factors[k] = d
                    .iter()
                    .filter(|v| !v.is_one_like())
                    .map(|v| v.to_u64().expect("torsion coefficient fits in u64"))
                    .collect();
            }
            Coefficients::Mod2 => ranks[k] = snf::rank_mod2(&b),
        }
    }
    let betti = (0..=top).map(|k| c.rank(k) - ranks[k] - ranks[k + 1]).collect();
    let torsion = (0..=top).map(|k| factors[k + 1].clone()).collect();
    Ok(HomologyResult {
        betti,
        torsion,
        coefficients: c.coefficients,
    })
}

trait OneLike {
    fn is_one_like(&self) -> bool;
}

impl OneLike for BigInt {
    fn is_one_like(&self) -> bool {
        self.abs() == BigInt::from(1)
    }
}

/// `P_t = Σ c_k t^k` with nonnegative coefficients.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PoincarePolynomial {
    pub coefficients: Vec<u64>,
}

impl PoincarePolynomial {
    pub fn new(mut coefficients: Vec<u64>) -> Self {
        while coefficients.last() == Some(&0) {
            coefficients.pop();
        }
        PoincarePolynomial { coefficients }
    }

    pub fn coefficient(&self, k: usize) -> u64 {
        self.coefficients.get(k).copied().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn at(&self, t: i64) -> i64 {
        self.coefficients.iter().rev().fold(0, |acc, &c| acc * t + c as i64)
    }
}

impl fmt::Display for PoincarePolynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let terms: Vec<String> = self
            .coefficients
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .map(|(k, &c)| match (k, c) {
                (0, c) => c.to_string(),
                (1, 1) => "t".into(),
                (1, c) => format!("{c}t"),
                (k, 1) => format!("t^{k}"),
                (k, c) => format!("{c}t^{k}"),
            })
            .collect();
        if terms.is_empty() {
            write!(f, "0")
        } else {
            write!(f, "{}", terms.join(" + "))
        }
    }
}

/// Betti numbers as a polynomial; torsion does not contribute.
pub fn poincare(h: &HomologyResult) -> PoincarePolynomial {
    PoincarePolynomial::new(h.betti.iter().map(|&b| b as u64).collect())
}

/// Solves `Σ parts = whole + (1 + t) Q_t` for `Q_t` with nonnegative coefficients.
pub fn relations_check(
    parts: &[PoincarePolynomial],
    whole: &PoincarePolynomial,
) -> Result<PoincarePolynomial, HomalgError> {
    let len = parts
        .iter()
        .map(|p| p.coefficients.len())
        .chain(std::iter::once(whole.coefficients.len()))
        .max()
        .unwrap_or(0);
    let mut d = vec![0i64; len];
    for p in parts {
        for (k, &c) in p.coefficients.iter().enumerate() {
            d[k] += c as i64;
        }
    }
    for (k, &c) in whole.coefficients.iter().enumerate() {
        d[k] -= c as i64;
    }
    while d.last() == Some(&0) {
        d.pop();
    }
    if d.is_empty() {
        return Ok(PoincarePolynomial::new(Vec::new()));
    }
    let n = d.len() - 1;
    let mut q = vec![0i64; n];
    if n > 0 {
        q[n - 1] = d[n];
        for k in (1..n).rev() {
            q[k - 1] = d[k] - q[k];
        }
    }
    let remainder = d[0] - q.first().copied().unwrap_or(0);
    if remainder != 0 {
        return Err(HomalgError::Relations(format!(
            "division by (1+t) leaves remainder {remainder} (Euler characteristics differ)"
        )));
    }
    if let Some((k, &c)) = q.iter().enumerate().find(|(_, &c)| c < 0) {
        return Err(HomalgError::Relations(format!(
            "quotient coefficient of t^{k} is {c} < 0"
        )));
    }
    Ok(PoincarePolynomial::new(q.into_iter().map(|c| c as u64).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gens(counts: &[usize]) -> Vec<Vec<String>> {
        counts
            .iter()
            .enumerate()
            .map(|(k, &n)| (0..n).map(|i| format!("c{k}_{i}")).collect())
            .collect()
    }

    #[test]
    fn double_well_complex_homology() {
        let c = ChainComplex::new(gens(&[2, 1]), vec![IntMatrix::from_rows(&[vec![1], vec![-1]])]).unwrap();
        let h = homology(&c).unwrap();
        assert_eq!(h.betti, vec![1, 0]);
        assert!(h.torsion.iter().all(Vec::is_empty));
    }

    #[test]
    fn zero_complex_in_degree_one() {
        let c = ChainComplex::new(gens(&[0, 1]), vec![]).unwrap();
        let h = homology(&c).unwrap();
        assert_eq!(h.betti, vec![0, 1]);
    }

    #[test]
    fn multiplication_by_two_gives_torsion() {
        let c = ChainComplex::new(gens(&[1, 1]), vec![IntMatrix::from_rows(&[vec![2]])]).unwrap();
        let h = homology(&c).unwrap();
        assert_eq!(h.betti, vec![0, 0]);
        assert_eq!(h.torsion[0], vec![2]);
        assert_eq!(h.to_string(), "H0=Z/2");
        let h2 = homology(&c.to_mod2()).unwrap();
        assert_eq!(h2.betti, vec![1, 1]);
    }

    #[test]
    fn d_squared_counterexample_is_located() {
        let c = ChainComplex::new(
            gens(&[1, 1, 1]),
            vec![IntMatrix::from_rows(&[vec![1]]), IntMatrix::from_rows(&[vec![1]])],
        )
        .unwrap();
        let fail = verify_d_squared(&c).unwrap_err();
        assert_eq!((fail.degree, fail.row, fail.col), (2, 1, 1));
        assert!(matches!(homology(&c), Err(HomalgError::NotAComplex(_))));
        assert!(verify_d_squared(&ChainComplex::zero(3)).is_ok());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let err = ChainComplex::new(gens(&[2, 1]), vec![IntMatrix::from_rows(&[vec![1, 1]])]).unwrap_err();
        assert!(matches!(err, HomalgError::Shape { degree: 1, .. }));
    }

    #[test]
    fn homology_equality_pads_degrees() {
        let mut a = HomologyResult::zero(1);
        a.betti[0] = 1;
        let mut b = HomologyResult::zero(3);
        b.betti[0] = 1;
        assert_eq!(a, b);
        b.torsion[2].push(2);
        assert_ne!(a, b);
    }

    #[test]
    fn poincare_ignores_torsion() {
        let mut h = HomologyResult::zero(2);
        h.torsion[1].push(2);
        assert!(poincare(&h).is_zero());
        h.betti = vec![1, 1, 0];
        assert_eq!(poincare(&h).to_string(), "1 + t");
    }

    #[test]
    fn relations_examples() {
        let one = PoincarePolynomial::new(vec![1]);
        let t = PoincarePolynomial::new(vec![0, 1]);
        let q = relations_check(&[one.clone(), one.clone(), t.clone()], &one).unwrap();
        assert_eq!(q.coefficients, vec![1]);
        assert!(relations_check(std::slice::from_ref(&one), &one).unwrap().is_zero());
        assert!(relations_check(std::slice::from_ref(&t), &t).unwrap().is_zero());
        assert!(relations_check(&[one.clone(), one.clone()], &one).is_err());
        // Σ parts = 1, whole = 1 + t + t^2 + ... gives a negative quotient
        let big = PoincarePolynomial::new(vec![0, 1, 1]);
        assert!(matches!(relations_check(std::slice::from_ref(&one), &big.clone()), Err(HomalgError::Relations(_))));
    }

    #[test]
    fn relations_quotient_at_one_is_rank_slack() {
        let parts = [
            PoincarePolynomial::new(vec![1]),
            PoincarePolynomial::new(vec![0, 1]),
            PoincarePolynomial::new(vec![0, 0, 1]),
        ];
        let whole = PoincarePolynomial::new(vec![1, 0, 0]);
        let q = relations_check(&parts, &whole).unwrap();
        let slack: i64 = parts.iter().map(|p| p.at(1)).sum::<i64>() - whole.at(1);
        assert_eq!(2 * q.at(1), slack);
    }
}
