use std::collections::{BTreeMap, BTreeSet};
use std::ops::{Index, IndexMut};

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, Zero};
use serde::{Serialize, Serializer};

use super::IntMatrix;

/// Dense big-integer matrix, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BigMatrix {
    rows: usize,
    cols: usize,
    data: Vec<BigInt>,
}

impl BigMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        BigMatrix {
            rows,
            cols,
            data: vec![BigInt::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = BigMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = BigInt::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn mul(&self, other: &BigMatrix) -> BigMatrix {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = BigMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = &self[(r, k)];
                if a.is_zero() {
                    continue;
                }
                for c in 0..other.cols {
                    let b = &other[(k, c)];
                    if !b.is_zero() {
                        out[(r, c)] += a * b;
                    }
                }
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(Zero::is_zero)
    }

    fn from_rows(rows: Vec<Vec<BigInt>>, cols: usize) -> Self {
        BigMatrix {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        }
    }
}

impl Index<(usize, usize)> for BigMatrix {
    type Output = BigInt;

    fn index(&self, (r, c): (usize, usize)) -> &BigInt {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for BigMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut BigInt {
        &mut self.data[r * self.cols + c]
    }
}

impl Serialize for BigMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<String>> = (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self[(r, c)].to_string()).collect())
            .collect();
        rows.serialize(s)
    }
}

/// `u · a · v = diag(diagonal)` padded with zeros, `u` and `v` unimodular,
/// every entry of `diagonal` positive and dividing the next.
#[derive(Clone, Debug)]
pub struct SmithForm {
    pub diagonal: Vec<BigInt>,
    pub u: BigMatrix,
    pub v: BigMatrix,
}

impl SmithForm {
    pub fn rank(&self) -> usize {
        self.diagonal.len()
    }
}

struct Dense {
    d: Vec<Vec<BigInt>>,
    u: Option<Vec<Vec<BigInt>>>,
    v: Option<Vec<Vec<BigInt>>>,
}

impl Dense {
    fn swap_rows(&mut self, i: usize, j: usize) {
        self.d.swap(i, j);
        if let Some(u) = &mut self.u {
            u.swap(i, j);
        }
    }

    fn swap_cols(&mut self, i: usize, j: usize) {
        for row in &mut self.d {
            row.swap(i, j);
        }
        if let Some(v) = &mut self.v {
            for row in v {
                row.swap(i, j);
            }
        }
    }

    /// row_i -= q · row_t
    fn row_sub(&mut self, i: usize, t: usize, q: &BigInt) {
        fn apply(m: &mut [Vec<BigInt>], i: usize, t: usize, q: &BigInt) {
            let src = m[t].clone();
            for (x, s) in m[i].iter_mut().zip(&src) {
                if !s.is_zero() {
                    *x -= q * s;
                }
            }
        }
        apply(&mut self.d, i, t, q);
        if let Some(u) = &mut self.u {
            apply(u, i, t, q);
        }
    }

    /// col_j -= q · col_t
    fn col_sub(&mut self, j: usize, t: usize, q: &BigInt) {
        fn apply(m: &mut [Vec<BigInt>], j: usize, t: usize, q: &BigInt) {
            for row in m {
                if !row[t].is_zero() {
                    let delta = q * &row[t];
                    row[j] -= delta;
                }
            }
        }
        apply(&mut self.d, j, t, q);
        if let Some(v) = &mut self.v {
            apply(v, j, t, q);
        }
    }

    fn negate_row(&mut self, t: usize) {
        for x in &mut self.d[t] {
            *x = -&*x;
        }
        if let Some(u) = &mut self.u {
            for x in &mut u[t] {
                *x = -&*x;
            }
        }
    }

    fn reduce(&mut self) -> Vec<BigInt> {
        let m = self.d.len();
        let n = self.d.first().map_or(0, Vec::len);
        let mut diagonal = Vec::new();
        for t in 0..m.min(n) {
            let Some((pi, pj)) = self.smallest(t, |i, j| i >= t && j >= t) else {
                break;
            };
            self.swap_rows(t, pi);
            self.swap_cols(t, pj);
            loop {
                for i in t + 1..m {
                    if !self.d[i][t].is_zero() {
                        let q = &self.d[i][t] / &self.d[t][t];
                        self.row_sub(i, t, &q);
                    }
                }
                for j in t + 1..n {
                    if !self.d[t][j].is_zero() {
                        let q = &self.d[t][j] / &self.d[t][t];
                        self.col_sub(j, t, &q);
                    }
                }
                // remainders are strictly smaller than the pivot
                if let Some((i, j)) = self.smallest(t, |i, j| (i > t && j == t) || (i == t && j > t)) {
                    if i > t {
                        self.swap_rows(t, i);
                    } else {
                        self.swap_cols(t, j);
                    }
                    continue;
                }
                let p = self.d[t][t].clone();
                let bad = (t + 1..m).find(|&i| (t + 1..n).any(|j| !self.d[i][j].is_multiple_of(&p)));
                match bad {
                    Some(i) => self.row_sub(t, i, &BigInt::from(-1)),
                    None => break,
                }
            }
            if self.d[t][t].is_negative() {
                self.negate_row(t);
            }
            diagonal.push(self.d[t][t].clone());
        }
        diagonal
    }

    fn smallest(&self, t: usize, keep: impl Fn(usize, usize) -> bool) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize)> = None;
        for i in t..self.d.len() {
            for j in t..self.d[i].len() {
                let x = &self.d[i][j];
                if x.is_zero() || !keep(i, j) {
                    continue;
                }
                if best.is_none_or(|(bi, bj)| x.abs() < self.d[bi][bj].abs()) {
                    best = Some((i, j));
                }
            }
        }
        best
    }
}

fn to_rows(a: &IntMatrix) -> Vec<Vec<BigInt>> {
    (0..a.rows())
        .map(|r| a.row(r).iter().map(|&v| BigInt::from(v)).collect())
        .collect()
}

fn identity_rows(n: usize) -> Vec<Vec<BigInt>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { BigInt::one() } else { BigInt::zero() }).collect())
        .collect()
}

/// Smith normal form with its unimodular transforms.
pub fn smith_normal_form(a: &IntMatrix) -> SmithForm {
    let mut dense = Dense {
        d: to_rows(a),
        u: Some(identity_rows(a.rows())),
        v: Some(identity_rows(a.cols())),
    };
    let diagonal = dense.reduce();
    SmithForm {
        diagonal,
        u: BigMatrix::from_rows(dense.u.unwrap(), a.rows()),
        v: BigMatrix::from_rows(dense.v.unwrap(), a.cols()),
    }
}

/// Nonzero invariant factors of `a`, ascending.
///
/// Unit entries are eliminated sparsely first; the remaining core, if any,
/// goes through the dense reduction.
pub fn invariant_factors(a: &IntMatrix) -> Vec<BigInt> {
    match sparse_unit_elimination(a) {
        Some((units, core)) => {
            let mut out = vec![BigInt::one(); units];
            if !core.is_empty() {
                let mut dense = Dense {
                    d: core,
                    u: None,
                    v: None,
                };
                out.extend(dense.reduce());
            }
            out
        }
        None => {
            let mut dense = Dense {
                d: to_rows(a),
                u: None,
                v: None,
            };
            dense.reduce()
        }
    }
}

/// Returns the number of unit pivots and the residual matrix, or `None` on
/// `i64` overflow.
fn sparse_unit_elimination(a: &IntMatrix) -> Option<(usize, Vec<Vec<BigInt>>)> {
    let mut rows: Vec<BTreeMap<usize, i64>> = (0..a.rows())
        .map(|r| {
            a.row(r)
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0)
                .map(|(c, &v)| (c, v))
                .collect()
        })
        .collect();
    let mut col_rows: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); a.cols()];
    for (r, row) in rows.iter().enumerate() {
        for &c in row.keys() {
            col_rows[c].insert(r);
        }
    }
    let mut units = 0;
    loop {
        let mut best: Option<(usize, usize, usize)> = None;
        for (r, row) in rows.iter().enumerate() {
            for (&c, &v) in row {
                if v.abs() != 1 {
                    continue;
                }
                let cost = (row.len() - 1) * (col_rows[c].len() - 1);
                if best.is_none_or(|(_, _, b)| cost < b) {
                    best = Some((r, c, cost));
                }
                if cost == 0 {
                    break;
                }
            }
            if matches!(best, Some((_, _, 0))) {
                break;
            }
        }
        let Some((r, c, _)) = best else { break };
        let pivot_row = std::mem::take(&mut rows[r]);
        let p = pivot_row[&c];
        for &j in pivot_row.keys() {
            col_rows[j].remove(&r);
        }
        let targets: Vec<usize> = col_rows[c].iter().copied().collect();
        for i in targets {
            let f = rows[i][&c].checked_mul(p)?;
            for (&j, &v) in &pivot_row {
                let entry = rows[i].entry(j).or_insert(0);
                *entry = entry.checked_sub(f.checked_mul(v)?)?;
                if *entry == 0 {
                    rows[i].remove(&j);
                    col_rows[j].remove(&i);
                } else {
                    col_rows[j].insert(i);
                }
            }
        }
        units += 1;
    }
    let live_cols: Vec<usize> = (0..a.cols()).filter(|&c| !col_rows[c].is_empty()).collect();
    let core = rows
        .iter()
        .filter(|row| !row.is_empty())
        .map(|row| {
            live_cols
                .iter()
                .map(|c| BigInt::from(row.get(c).copied().unwrap_or(0)))
                .collect()
        })
        .collect();
    Some((units, core))
}

/// Rank over ℤ/2 by bitset elimination.
pub(crate) fn rank_mod2(a: &IntMatrix) -> usize {
    let words = a.cols().div_ceil(64);
    let mut rows: Vec<Vec<u64>> = (0..a.rows())
        .map(|r| {
            let mut bits = vec![0u64; words];
            for (c, &v) in a.row(r).iter().enumerate() {
                if v.rem_euclid(2) == 1 {
                    bits[c / 64] |= 1 << (c % 64);
                }
            }
            bits
        })
        .collect();
    let mut rank = 0;
    for c in 0..a.cols() {
        let (w, b) = (c / 64, 1u64 << (c % 64));
        let Some(p) = (rank..rows.len()).find(|&r| rows[r][w] & b != 0) else {
            continue;
        };
        rows.swap(rank, p);
        let pivot = rows[rank].clone();
        for (r, row) in rows.iter_mut().enumerate() {
            if r != rank && row[w] & b != 0 {
                row.iter_mut().zip(&pivot).for_each(|(x, y)| *x ^= y);
            }
        }
        rank += 1;
    }
    rank
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_of(a: &IntMatrix) -> Vec<i64> {
        smith_normal_form(a)
            .diagonal
            .iter()
            .map(|d| i64::try_from(d).unwrap())
            .collect()
    }

    #[test]
    fn coprime_diagonal() {
        let a = IntMatrix::from_rows(&[vec![2, 0], vec![0, 3]]);
        assert_eq!(diag_of(&a), vec![1, 6]);
        assert_eq!(invariant_factors(&a), vec![BigInt::from(1), BigInt::from(6)]);
    }

    #[test]
    fn zero_matrix_has_empty_diagonal() {
        let a = IntMatrix::zeros(3, 4);
        let s = smith_normal_form(&a);
        assert!(s.diagonal.is_empty());
        assert_eq!(s.u, BigMatrix::identity(3));
        assert!(invariant_factors(&a).is_empty());
    }

    #[test]
    fn transforms_reconstruct() {
        let a = IntMatrix::from_rows(&[vec![2, 4, 4], vec![-6, 6, 12], vec![10, -4, -16]]);
        let s = smith_normal_form(&a);
        assert_eq!(diag_of(&a), vec![2, 6, 12]);
        let d = s.u.mul(&a.to_big()).mul(&s.v);
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { s.diagonal[r].clone() } else { BigInt::zero() };
                assert_eq!(d[(r, c)], expect);
            }
        }
    }

    #[test]
    fn sparse_path_matches_dense() {
        let a = IntMatrix::from_rows(&[
            vec![1, 1, 0, 0],
            vec![-1, 0, 1, 0],
            vec![0, -1, -1, 2],
            vec![0, 0, 0, 4],
        ]);
        let dense = smith_normal_form(&a).diagonal;
        assert_eq!(invariant_factors(&a), dense);
    }

    #[test]
    fn mod2_rank() {
        let a = IntMatrix::from_rows(&[vec![2, 1], vec![1, 1], vec![3, 0]]);
        assert_eq!(rank_mod2(&a), 2);
        assert_eq!(rank_mod2(&IntMatrix::from_rows(&[vec![2, 4]])), 0);
    }
}
