//! Linear algebra over ℚ for maps induced on homology.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};

use super::IntMatrix;

pub type QVector = Vec<BigRational>;

pub fn to_q(v: &[i64]) -> QVector {
    v.iter().map(|&x| BigRational::from_integer(BigInt::from(x))).collect()
}

/// Incrementally built row echelon basis of a subspace of ℚ^n.
#[derive(Clone, Debug, Default)]
pub struct Echelon {
    rows: Vec<(usize, QVector)>,
}

impl Echelon {
    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    fn reduce(&self, v: &[BigRational]) -> QVector {
        let mut v = v.to_vec();
        for (p, row) in &self.rows {
            if !v[*p].is_zero() {
                let f = v[*p].clone() / &row[*p];
                for (x, y) in v.iter_mut().zip(row) {
                    if !y.is_zero() {
                        *x -= &f * y;
                    }
                }
            }
        }
        v
    }

    pub fn contains(&self, v: &[BigRational]) -> bool {
        self.reduce(v).iter().all(Zero::is_zero)
    }

    /// Adds `v` if it is independent of the current span.
    pub fn insert(&mut self, v: &[BigRational]) -> bool {
        let r = self.reduce(v);
        match r.iter().position(|x| !x.is_zero()) {
            Some(p) => {
                // keep earlier rows reduced at the new pivot
                for (_, row) in &mut self.rows {
                    if !row[p].is_zero() {
                        let f = row[p].clone() / &r[p];
                        for (x, y) in row.iter_mut().zip(&r) {
                            if !y.is_zero() {
                                *x -= &f * y;
                            }
                        }
                    }
                }
                self.rows.push((p, r));
                true
            }
            None => false,
        }
    }
}

pub fn rank(vectors: &[QVector]) -> usize {
    let mut e = Echelon::default();
    vectors.iter().filter(|v| e.insert(v)).count()
}

/// Basis of the right kernel of `a`.
pub fn kernel_basis(a: &IntMatrix) -> Vec<QVector> {
    let n = a.cols();
    let mut m: Vec<QVector> = (0..a.rows()).map(|r| to_q(a.row(r))).collect();
    let mut pivots = Vec::new();
    let mut row = 0;
    for c in 0..n {
        let Some(p) = (row..m.len()).find(|&r| !m[r][c].is_zero()) else {
            continue;
        };
        m.swap(row, p);
        let inv = BigRational::one() / &m[row][c];
        for x in &mut m[row] {
            *x *= &inv;
        }
        let pivot = m[row].clone();
        for (r, other) in m.iter_mut().enumerate() {
            if r != row && !other[c].is_zero() {
                let f = other[c].clone();
                for (x, y) in other.iter_mut().zip(&pivot) {
                    *x -= &f * y;
                }
            }
        }
        pivots.push(c);
        row += 1;
    }
    let free: Vec<usize> = (0..n).filter(|c| !pivots.contains(c)).collect();
    free.iter()
        .map(|&f| {
            let mut v = vec![BigRational::zero(); n];
            v[f] = BigRational::one();
            for (r, &p) in pivots.iter().enumerate() {
                v[p] = -m[r][f].clone();
            }
            v
        })
        .collect()
}

/// Solves `Σ x_i columns[i] = target`, if solvable.
pub fn solve(columns: &[QVector], target: &[BigRational]) -> Option<QVector> {
    let n = columns.len();
    let rows = target.len();
    let mut m: Vec<QVector> = (0..rows)
        .map(|r| {
            let mut row: QVector = columns.iter().map(|c| c[r].clone()).collect();
            row.push(target[r].clone());
            row
        })
        .collect();
    let mut pivots = Vec::new();
    let mut row = 0;
    for c in 0..n {
        let Some(p) = (row..rows).find(|&r| !m[r][c].is_zero()) else {
            continue;
        };
        m.swap(row, p);
        let inv = BigRational::one() / &m[row][c];
        for x in &mut m[row] {
            *x *= &inv;
        }
        let pivot = m[row].clone();
        for (r, other) in m.iter_mut().enumerate() {
            if r != row && !other[c].is_zero() {
                let f = other[c].clone();
                for (x, y) in other.iter_mut().zip(&pivot) {
                    *x -= &f * y;
                }
            }
        }
        pivots.push(c);
        row += 1;
    }
    if m[row..].iter().any(|r| !r[n].is_zero()) {
        return None;
    }
    let mut x = vec![BigRational::zero(); n];
    for (r, &p) in pivots.iter().enumerate() {
        x[p] = m[r][n].clone();
    }
    Some(x)
}

/// Representative cycles for `H_k = ker ∂_k / im ∂_{k+1}` over ℚ.
#[derive(Clone, Debug)]
pub struct HomologyBasis {
    pub cycles: Vec<QVector>,
    boundaries: Vec<QVector>,
}

impl HomologyBasis {
    /// `d_k : C_k → C_{k-1}` and `d_k1 : C_{k+1} → C_k`.
    pub fn new(d_k: &IntMatrix, d_k1: &IntMatrix) -> Self {
        let mut span = Echelon::default();
        let mut boundaries = Vec::new();
        for c in 0..d_k1.cols() {
            let v = to_q(&d_k1.column(c));
            if span.insert(&v) {
                boundaries.push(v);
            }
        }
        let mut cycles = Vec::new();
        for v in kernel_basis(d_k) {
            if span.insert(&v) {
                cycles.push(v);
            }
        }
        HomologyBasis { cycles, boundaries }
    }

    pub fn dim(&self) -> usize {
        self.cycles.len()
    }

    /// Coordinates of the class of `cycle` in the basis `cycles`.
    ///
    /// Panics if `cycle` is not a cycle.
    pub fn coordinates(&self, cycle: &[BigRational]) -> QVector {
        let cols: Vec<QVector> = self.cycles.iter().chain(&self.boundaries).cloned().collect();
        let x = solve(&cols, cycle).expect("vector is not a cycle");
        x[..self.cycles.len()].to_vec()
    }
}
