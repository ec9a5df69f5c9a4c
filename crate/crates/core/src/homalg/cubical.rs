use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use super::{homology, ChainComplex, Coefficients, HomalgError, HomologyResult, IntMatrix};

/// Elementary cube in doubled coordinates: an odd coordinate `2a + 1` is the
/// interval `[a, a + 1]`, an even coordinate `2a` the point `a`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ElementaryCube(pub Vec<i64>);

impl ElementaryCube {
    /// The full-dimensional cube `[c_1, c_1 + 1] × … × [c_m, c_m + 1]`.
    pub fn full(corner: &[i64]) -> Self {
        ElementaryCube(corner.iter().map(|c| 2 * c + 1).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.iter().filter(|c| c.rem_euclid(2) == 1).count()
    }

    pub fn ambient_dim(&self) -> usize {
        self.0.len()
    }

    /// `∂Q = Σ_i (-1)^{σ_i} (Q_i^+ − Q_i^-)` over the nondegenerate axes `i`,
    /// `σ_i` the number of nondegenerate axes before `i`.
    pub fn boundary(&self) -> Vec<(ElementaryCube, i64)> {
        let mut out = Vec::with_capacity(2 * self.dim());
        let mut before = 0;
        for (i, &c) in self.0.iter().enumerate() {
            if c.rem_euclid(2) == 0 {
                continue;
            }
            let sign = if before % 2 == 0 { 1 } else { -1 };
            let mut hi = self.0.clone();
            hi[i] = c + 1;
            let mut lo = self.0.clone();
            lo[i] = c - 1;
            out.push((ElementaryCube(hi), sign));
            out.push((ElementaryCube(lo), -sign));
            before += 1;
        }
        out
    }

    /// All faces, including the cube itself.
    pub fn closure(&self) -> Vec<ElementaryCube> {
        let mut out = vec![self.clone()];
        for (i, &c) in self.0.iter().enumerate() {
            if c.rem_euclid(2) == 0 {
                continue;
            }
            let n = out.len();
            for j in 0..n {
                for d in [-1, 1] {
                    let mut f = out[j].clone();
                    f.0[i] = c + d;
                    out.push(f);
                }
            }
        }
        out
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CubicalError {
    #[error("subcomplex is not closed: face {face:?} of {cell:?} is missing")]
    NotClosed { cell: ElementaryCube, face: ElementaryCube },
    #[error("cell {0:?} of the subcomplex is not in the complex")]
    NotContained(ElementaryCube),
    #[error("cells have ambient dimension {found}, expected {expected}")]
    AmbientDimension { expected: usize, found: usize },
    #[error(transparent)]
    Algebra(#[from] HomalgError),
}

/// A finite set of elementary cubes in ℝ^m.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize)]
pub struct CubicalSet {
    pub ambient_dim: usize,
    pub cells: BTreeSet<ElementaryCube>,
}

impl CubicalSet {
    pub fn empty(ambient_dim: usize) -> Self {
        CubicalSet {
            ambient_dim,
            cells: BTreeSet::new(),
        }
    }

    /// Smallest closed set containing `cubes`.
    pub fn closure_of<'a>(ambient_dim: usize, cubes: impl IntoIterator<Item = &'a ElementaryCube>) -> Self {
        let mut cells = BTreeSet::new();
        for q in cubes {
            if !cells.contains(q) {
                cells.extend(q.closure());
            }
        }
        CubicalSet { ambient_dim, cells }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains(&self, q: &ElementaryCube) -> bool {
        self.cells.contains(q)
    }

    /// First cell with a missing boundary face, if any.
    pub fn closedness_defect(&self) -> Option<(ElementaryCube, ElementaryCube)> {
        for q in &self.cells {
            for (f, _) in q.boundary() {
                if !self.cells.contains(&f) {
                    return Some((q.clone(), f));
                }
            }
        }
        None
    }

    pub fn is_closed(&self) -> bool {
        self.closedness_defect().is_none()
    }

    fn check(&self) -> Result<(), CubicalError> {
        if let Some(q) = self.cells.iter().find(|q| q.ambient_dim() != self.ambient_dim) {
            return Err(CubicalError::AmbientDimension {
                expected: self.ambient_dim,
                found: q.ambient_dim(),
            });
        }
        Ok(())
    }
}

/// Relative cellular chain complex of `(x, a)`: generators are the cells of
/// `x` not in `a`.
pub fn relative_chain_complex(x: &CubicalSet, a: &CubicalSet) -> Result<ChainComplex, CubicalError> {
    x.check()?;
    a.check()?;
    if let Some((cell, face)) = a.closedness_defect() {
        return Err(CubicalError::NotClosed { cell, face });
    }
    if let Some((cell, face)) = x.closedness_defect() {
        return Err(CubicalError::NotClosed { cell, face });
    }
    if let Some(q) = a.cells.iter().find(|q| !x.contains(q)) {
        return Err(CubicalError::NotContained(q.clone()));
    }
    let m = x.ambient_dim;
    let mut by_dim: Vec<Vec<&ElementaryCube>> = vec![Vec::new(); m + 1];
    for q in x.cells.iter().filter(|q| !a.contains(q)) {
        by_dim[q.dim()].push(q);
    }
    let index: Vec<BTreeMap<&ElementaryCube, usize>> = by_dim
        .iter()
        .map(|cells| cells.iter().enumerate().map(|(i, &q)| (q, i)).collect())
        .collect();
    let mut boundaries = Vec::with_capacity(m);
    for k in 1..=m {
        let mut d = IntMatrix::zeros(by_dim[k - 1].len(), by_dim[k].len());
        for (col, q) in by_dim[k].iter().enumerate() {
            for (f, s) in q.boundary() {
                if let Some(&row) = index[k - 1].get(&f) {
                    d.set(row, col, d.get(row, col) + s);
                }
            }
        }
        boundaries.push(d);
    }
    let generators = by_dim
        .iter()
        .map(|cells| cells.iter().map(|q| format!("{:?}", q.0)).collect())
        .collect();
    Ok(ChainComplex::new(generators, boundaries)?)
}

/// `H_*(x, a)` for a closed cubical pair `a ⊆ x`.
pub fn cubical_relative_homology(
    x: &CubicalSet,
    a: &CubicalSet,
    coefficients: Coefficients,
) -> Result<HomologyResult, CubicalError> {
    let mut c = relative_chain_complex(x, a)?;
    if coefficients == Coefficients::Mod2 {
        c = c.to_mod2();
    }
    Ok(homology(&c)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(lo: i64, hi: i64) -> CubicalSet {
        let cubes: Vec<ElementaryCube> = (lo..hi)
            .flat_map(|i| (lo..hi).map(move |j| ElementaryCube::full(&[i, j])))
            .collect();
        CubicalSet::closure_of(2, &cubes)
    }

    #[test]
    fn boundary_of_boundary_vanishes() {
        let q = ElementaryCube::full(&[0, 0, 0]);
        let mut acc: BTreeMap<ElementaryCube, i64> = BTreeMap::new();
        for (f, s) in q.boundary() {
            for (g, t) in f.boundary() {
                *acc.entry(g).or_default() += s * t;
            }
        }
        assert!(acc.values().all(|&v| v == 0));
        assert_eq!(q.closure().len(), 27);
    }

    #[test]
    fn saddle_pair() {
        // [-1,1]^2 at unit spacing, exit set = closed edges x1 = ±1
        let x = square(-1, 1);
        let edges: Vec<ElementaryCube> = [-1, 0]
            .iter()
            .flat_map(|&j| [ElementaryCube(vec![-2, 2 * j + 1]), ElementaryCube(vec![2, 2 * j + 1])])
            .collect();
        let a = CubicalSet::closure_of(2, &edges);
        let h = cubical_relative_homology(&x, &a, Coefficients::Integer).unwrap();
        assert_eq!(h.betti, vec![0, 1, 0]);
    }

    #[test]
    fn contractible_square_and_annulus() {
        let x = square(-2, 2);
        let h = cubical_relative_homology(&x, &CubicalSet::empty(2), Coefficients::Integer).unwrap();
        assert_eq!(h.betti, vec![1, 0, 0]);
        let ring: Vec<ElementaryCube> = (-2..2)
            .flat_map(|i| (-2..2).map(move |j| (i, j)))
            .filter(|&(i, j)| !(i == -1 || i == 0) || !(j == -1 || j == 0))
            .map(|(i, j)| ElementaryCube::full(&[i, j]))
            .collect();
        let annulus = CubicalSet::closure_of(2, &ring);
        let h = cubical_relative_homology(&annulus, &CubicalSet::empty(2), Coefficients::Integer).unwrap();
        assert_eq!(h.betti, vec![1, 1, 0]);
    }

    #[test]
    fn open_subcomplex_is_rejected() {
        let x = square(0, 1);
        let mut a = CubicalSet::empty(2);
        a.cells.insert(ElementaryCube(vec![1, 0]));
        assert!(matches!(
            cubical_relative_homology(&x, &a, Coefficients::Integer),
            Err(CubicalError::NotClosed { .. })
        ));
    }
}
