//! Cubical isolating blocks: construction, boundary classification, exit
//! sets and sampled isolation checks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expr::FieldDef;
use crate::flow::{exit_time, FlowError, Tolerances};
use crate::homalg::{CubicalSet, ElementaryCube};
use crate::Verdict;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlockError {
    #[error("block has no cubes")]
    Empty,
    #[error("inconsistent grid: {0}")]
    InconsistentGrid(String),
    #[error("block boundary has not been classified")]
    Unclassified,
    #[error("{} unresolved boundary face(s), first {:?}; refine the grid or lower the margin tolerance", .0.len(), .0[0])]
    Unresolved(Vec<Face>),
}

/// Uniform grid `origin + spacing · ℤ^m`. An empty origin means the zero vector.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Grid {
    pub origin: Vec<f64>,
    pub spacing: f64,
}

impl Grid {
    pub fn with_spacing(spacing: f64) -> Self {
        Grid {
            origin: Vec::new(),
            spacing,
        }
    }

    pub fn new(origin: Vec<f64>, spacing: f64) -> Self {
        Grid { origin, spacing }
    }

    pub fn origin(&self, axis: usize) -> f64 {
        self.origin.get(axis).copied().unwrap_or(0.0)
    }

    fn index_of(&self, axis: usize, coord: f64) -> Result<i64, BlockError> {
        let u = (coord - self.origin(axis)) / self.spacing;
        let k = u.round();
        if (u - k).abs() > 1e-9 {
            return Err(BlockError::InconsistentGrid(format!(
                "bound {coord} on axis {} is not a grid line of spacing {}",
                axis + 1,
                self.spacing
            )));
        }
        Ok(k as i64)
    }
}

/// Block description before rasterization.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockSpec {
    Box(Vec<(f64, f64)>),
    Boxes(Vec<Vec<(f64, f64)>>),
    /// Lower corner indices of full cubes.
    Cubes(Vec<Vec<i64>>),
}

/// Codimension-one face of the full cube `cube` on side `upper` of `axis`,
/// with the neighbouring cube outside the block.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Face {
    pub cube: Vec<i64>,
    pub axis: usize,
    pub upper: bool,
}

impl Face {
    pub fn normal_sign(&self) -> f64 {
        if self.upper {
            1.0
        } else {
            -1.0
        }
    }

    pub fn elementary(&self) -> ElementaryCube {
        let mut q = ElementaryCube::full(&self.cube);
        q.0[self.axis] = 2 * (self.cube[self.axis] + i64::from(self.upper));
        q
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum FaceTag {
    Egress,
    Ingress,
    Unresolved,
}

/// Boundary face with its classification and the range of `X·ν` seen on it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundaryFace {
    pub face: Face,
    pub tag: FaceTag,
    pub min_flux: f64,
    pub max_flux: f64,
}

/// Finite union of closed grid cubes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridBlock {
    dim: usize,
    grid: Grid,
    cubes: BTreeSet<Vec<i64>>,
    boundary: Vec<BoundaryFace>,
    classified: bool,
}

fn box_cubes(bounds: &[(f64, f64)], grid: &Grid) -> Result<Vec<Vec<i64>>, BlockError> {
    let mut ranges = Vec::with_capacity(bounds.len());
    for (axis, &(lo, hi)) in bounds.iter().enumerate() {
        let (a, b) = (grid.index_of(axis, lo)?, grid.index_of(axis, hi)?);
        if b <= a {
            return Err(BlockError::Empty);
        }
        ranges.push(a..b);
    }
    let mut out: Vec<Vec<i64>> = vec![Vec::new()];
    for r in ranges {
        out = out
            .into_iter()
            .flat_map(|p| {
                r.clone().map(move |i| {
                    let mut q = p.clone();
                    q.push(i);
                    q
                })
            })
            .collect();
    }
    Ok(out)
}

/// Rasterizes `spec` on `grid` and enumerates the boundary faces, all
/// tagged `Unresolved`.
pub fn build_block(spec: &BlockSpec, grid: &Grid) -> Result<GridBlock, BlockError> {
    if !(grid.spacing > 0.0 && grid.spacing.is_finite()) {
        return Err(BlockError::InconsistentGrid(format!("spacing {}", grid.spacing)));
    }
    let cubes: BTreeSet<Vec<i64>> = match spec {
        BlockSpec::Box(b) => box_cubes(b, grid)?.into_iter().collect(),
        BlockSpec::Boxes(bs) => {
            let mut all = BTreeSet::new();
            for b in bs {
                all.extend(box_cubes(b, grid)?);
            }
            all
        }
        BlockSpec::Cubes(cs) => cs.iter().cloned().collect(),
    };
    let dim = cubes.first().ok_or(BlockError::Empty)?.len();
    if dim == 0 || cubes.iter().any(|c| c.len() != dim) {
        return Err(BlockError::InconsistentGrid("cubes of mixed dimension".into()));
    }
    if !grid.origin.is_empty() && grid.origin.len() != dim {
        return Err(BlockError::InconsistentGrid(format!(
            "origin has {} coordinates, block dimension is {dim}",
            grid.origin.len()
        )));
    }
    let mut boundary = Vec::new();
    for c in &cubes {
        for axis in 0..dim {
            for upper in [false, true] {
                let mut n = c.clone();
                n[axis] += if upper { 1 } else { -1 };
                if !cubes.contains(&n) {
                    boundary.push(BoundaryFace {
                        face: Face {
                            cube: c.clone(),
                            axis,
                            upper,
                        },
                        tag: FaceTag::Unresolved,
                        min_flux: f64::NAN,
                        max_flux: f64::NAN,
                    });
                }
            }
        }
    }
    Ok(GridBlock {
        dim,
        grid: grid.clone(),
        cubes,
        boundary,
        classified: false,
    })
}

impl GridBlock {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn cubes(&self) -> &BTreeSet<Vec<i64>> {
        &self.cubes
    }

    pub fn boundary(&self) -> &[BoundaryFace] {
        &self.boundary
    }

    pub fn faces(&self) -> impl Iterator<Item = &Face> {
        self.boundary.iter().map(|b| &b.face)
    }

    pub fn is_classified(&self) -> bool {
        self.classified
    }

    pub fn faces_tagged(&self, tag: FaceTag) -> Vec<&Face> {
        self.boundary.iter().filter(|b| b.tag == tag).map(|b| &b.face).collect()
    }

    /// Axis-aligned bounding box `(lo, hi)` per axis.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        let h = self.grid.spacing;
        (0..self.dim)
            .map(|a| {
                let lo = self.cubes.iter().map(|c| c[a]).min().unwrap();
                let hi = self.cubes.iter().map(|c| c[a]).max().unwrap() + 1;
                (self.grid.origin(a) + h * lo as f64, self.grid.origin(a) + h * hi as f64)
            })
            .collect()
    }

    pub fn diameter(&self) -> f64 {
        self.bounds().iter().map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt()
    }

    pub fn center(&self) -> Vec<f64> {
        self.bounds().iter().map(|(a, b)| 0.5 * (a + b)).collect()
    }

    fn lower_corner(&self, cube: &[i64]) -> Vec<f64> {
        cube.iter()
            .enumerate()
            .map(|(a, &i)| self.grid.origin(a) + self.grid.spacing * i as f64)
            .collect()
    }

    /// Cubes whose closure contains `x`, up to `1e-9` of the spacing.
    fn cubes_at(&self, x: &[f64]) -> Vec<Vec<i64>> {
        const EPS: f64 = 1e-9;
        let mut cands: Vec<Vec<i64>> = vec![Vec::new()];
        for (a, &xa) in x.iter().enumerate() {
            let u = (xa - self.grid.origin(a)) / self.grid.spacing;
            if !u.is_finite() {
                return Vec::new();
            }
            let k = u.floor();
            let mut ks = vec![k as i64];
            if u - k < EPS {
                ks.push(k as i64 - 1);
            }
            if k + 1.0 - u < EPS {
                ks.push(k as i64 + 1);
            }
            cands = cands
                .into_iter()
                .flat_map(|p| {
                    ks.iter().map(move |&i| {
                        let mut q = p.clone();
                        q.push(i);
                        q
                    })
                })
                .collect();
        }
        cands.into_iter().filter(|c| self.cubes.contains(c)).collect()
    }

    /// Closed membership with a tolerance of `1e-9` grid spacings.
    pub fn contains(&self, x: &[f64]) -> bool {
        !self.cubes_at(x).is_empty()
    }

    /// Face crossed by a segment from `inside` (in the block) to `outside`.
    pub fn crossing_face(&self, inside: &[f64], outside: &[f64]) -> Face {
        let h = self.grid.spacing;
        let mut best: Option<(f64, Face)> = None;
        for c in self.cubes_at(inside) {
            let lo = self.lower_corner(&c);
            for axis in 0..self.dim {
                for upper in [false, true] {
                    let excess = if upper {
                        outside[axis] - (lo[axis] + h)
                    } else {
                        lo[axis] - outside[axis]
                    };
                    if excess <= 0.0 {
                        continue;
                    }
                    let mut n = c.clone();
                    n[axis] += if upper { 1 } else { -1 };
                    if self.cubes.contains(&n) {
                        continue;
                    }
                    if best.as_ref().is_none_or(|(e, _)| excess > *e) {
                        best = Some((
                            excess,
                            Face {
                                cube: c.clone(),
                                axis,
                                upper,
                            },
                        ));
                    }
                }
            }
        }
        match best {
            Some((_, f)) => f,
            None => self.nearest_face(inside).clone(),
        }
    }

    fn nearest_face(&self, x: &[f64]) -> &Face {
        self.boundary
            .iter()
            .map(|b| (self.face_distance(&b.face, x), &b.face))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, f)| f)
            .expect("nonempty block has boundary faces")
    }

    fn face_distance(&self, face: &Face, x: &[f64]) -> f64 {
        let h = self.grid.spacing;
        let lo = self.lower_corner(&face.cube);
        (0..self.dim)
            .map(|a| {
                let (l, u) = if a == face.axis {
                    let v = lo[a] + if face.upper { h } else { 0.0 };
                    (v, v)
                } else {
                    (lo[a], lo[a] + h)
                };
                let d = if x[a] < l {
                    l - x[a]
                } else if x[a] > u {
                    x[a] - u
                } else {
                    0.0
                };
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean distance from `x` to the topological boundary.
    pub fn boundary_distance(&self, x: &[f64]) -> f64 {
        self.boundary
            .iter()
            .map(|b| self.face_distance(&b.face, x))
            .fold(f64::INFINITY, f64::min)
    }

    /// Closed lattice on `face` with `per_axis` points along each tangent axis.
    pub fn face_samples(&self, face: &Face, per_axis: usize) -> Vec<Vec<f64>> {
        let h = self.grid.spacing;
        let lo = self.lower_corner(&face.cube);
        let n = per_axis.max(1);
        let ticks: Vec<f64> = if n == 1 {
            vec![0.5]
        } else {
            (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
        };
        let mut pts = vec![Vec::new()];
        for (a, &l) in lo.iter().enumerate() {
            let vals: Vec<f64> = if a == face.axis {
                vec![l + if face.upper { h } else { 0.0 }]
            } else {
                ticks.iter().map(|t| l + t * h).collect()
            };
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    vals.iter().map(move |&v| {
                        let mut q: Vec<f64> = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        pts
    }

    /// Interior lattice of `per_axis^m` points per cube (cell centres when 1).
    pub fn interior_samples(&self, per_axis: usize) -> Vec<Vec<f64>> {
        let h = self.grid.spacing;
        let n = per_axis.max(1);
        let ticks: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let mut out = Vec::new();
        for c in &self.cubes {
            let lo = self.lower_corner(c);
            let mut pts = vec![Vec::new()];
            for &l in &lo {
                pts = pts
                    .into_iter()
                    .flat_map(|p: Vec<f64>| {
                        ticks.iter().map(move |t| {
                            let mut q = p.clone();
                            q.push(l + t * h);
                            q
                        })
                    })
                    .collect();
            }
            out.extend(pts);
        }
        out
    }

    /// Closed lattice over every cube with `per_axis` points per edge,
    /// shared points listed once.
    pub fn closed_samples(&self, per_axis: usize) -> Vec<Vec<f64>> {
        let n = per_axis.max(2) as i64 - 1;
        let h = self.grid.spacing / n as f64;
        let mut keys = BTreeSet::new();
        for c in &self.cubes {
            let mut pts: Vec<Vec<i64>> = vec![Vec::new()];
            for &i in c {
                pts = pts
                    .into_iter()
                    .flat_map(|p| {
                        (0..=n).map(move |k| {
                            let mut q = p.clone();
                            q.push(i * n + k);
                            q
                        })
                    })
                    .collect();
            }
            keys.extend(pts);
        }
        keys.into_iter()
            .map(|k| {
                k.iter()
                    .enumerate()
                    .map(|(a, &i)| self.grid.origin(a) + h * i as f64)
                    .collect()
            })
            .collect()
    }

    /// Tags every boundary face by the sign of `X·ν` on a closed lattice of
    /// `samples` points per tangent axis.
    pub fn classify_boundary(&self, field: &FieldDef, samples: usize, margin_tol: f64) -> GridBlock {
        let boundary = self
            .boundary
            .par_iter()
            .map(|b| {
                let s = b.face.normal_sign();
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for p in self.face_samples(&b.face, samples) {
                    match field.eval(&p) {
                        Ok(v) => {
                            let flux = s * v[b.face.axis];
                            lo = lo.min(flux);
                            hi = hi.max(flux);
                        }
                        Err(_) => {
                            lo = f64::NAN;
                            hi = f64::NAN;
                            break;
                        }
                    }
                }
                let tag = if lo >= margin_tol {
                    FaceTag::Egress
                } else if hi <= -margin_tol {
                    FaceTag::Ingress
                } else {
                    FaceTag::Unresolved
                };
                BoundaryFace {
                    face: b.face.clone(),
                    tag,
                    min_flux: lo,
                    max_flux: hi,
                }
            })
            .collect();
        GridBlock {
            boundary,
            classified: true,
            ..self.clone()
        }
    }

    pub fn unresolved(&self) -> Vec<Face> {
        self.faces_tagged(FaceTag::Unresolved).into_iter().cloned().collect()
    }

    /// The block as a closed cubical set.
    pub fn cubical_set(&self) -> CubicalSet {
        let full: Vec<ElementaryCube> = self.cubes.iter().map(|c| ElementaryCube::full(c)).collect();
        CubicalSet::closure_of(self.dim, &full)
    }

    /// Closure of the union of egress faces; shared corners are included.
    pub fn exit_set(&self) -> Result<CubicalSet, BlockError> {
        if !self.classified {
            return Err(BlockError::Unclassified);
        }
        let unresolved = self.unresolved();
        if !unresolved.is_empty() {
            return Err(BlockError::Unresolved(unresolved));
        }
        let egress: Vec<ElementaryCube> = self
            .faces_tagged(FaceTag::Egress)
            .into_iter()
            .map(Face::elementary)
            .collect();
        Ok(CubicalSet::closure_of(self.dim, &egress))
    }

    /// Connected components of the boundary (faces sharing any vertex are
    /// adjacent).
    pub fn boundary_components(&self) -> usize {
        let mut by_vertex: BTreeMap<ElementaryCube, Vec<usize>> = BTreeMap::new();
        for (i, b) in self.boundary.iter().enumerate() {
            for q in b.face.elementary().closure() {
                if q.dim() == 0 {
                    by_vertex.entry(q).or_default().push(i);
                }
            }
        }
        let mut adj = vec![BTreeSet::new(); self.boundary.len()];
        for faces in by_vertex.values() {
            for &a in faces {
                adj[a].extend(faces.iter().copied());
            }
        }
        let mut seen = vec![false; self.boundary.len()];
        let mut components = 0;
        for start in 0..self.boundary.len() {
            if seen[start] {
                continue;
            }
            components += 1;
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(f) = queue.pop_front() {
                for &g in &adj[f] {
                    if !seen[g] {
                        seen[g] = true;
                        queue.push_back(g);
                    }
                }
            }
        }
        components
    }

    /// Same grid, every cube of `self` in `other`.
    pub fn is_subblock_of(&self, other: &GridBlock) -> bool {
        self.same_grid(other) && self.cubes.is_subset(&other.cubes)
    }

    /// Same grid and the closed sets do not meet.
    pub fn is_disjoint_from(&self, other: &GridBlock) -> bool {
        if !self.same_grid(other) {
            return false;
        }
        let a = self.cubical_set();
        let b = other.cubical_set();
        a.cells.is_disjoint(&b.cells)
    }

    fn same_grid(&self, other: &GridBlock) -> bool {
        self.dim == other.dim
            && self.grid.spacing == other.grid.spacing
            && (0..self.dim).all(|a| self.grid.origin(a) == other.grid.origin(a))
    }

    /// Samples each boundary face and integrates forward and backward; see
    /// [`IsolationReport`].
    pub fn check_isolation(
        &self,
        field: &FieldDef,
        opts: &IsolationOptions,
    ) -> Result<IsolationReport, FlowError> {
        let mut seen = BTreeSet::new();
        let mut samples = Vec::new();
        for b in &self.boundary {
            for p in self.face_samples(&b.face, opts.samples) {
                let key: Vec<i64> = p.iter().map(|v| (v * 1e9).round() as i64).collect();
                if seen.insert(key) {
                    samples.push((p, b.face.clone()));
                }
            }
        }
        let results: Result<Vec<IsolationSample>, FlowError> = samples
            .into_par_iter()
            .map(|(point, face)| {
                let v = field.eval(&point)?;
                let flux = face.normal_sign() * v[face.axis];
                let order = if flux >= 0.0 { [1.0, -1.0] } else { [-1.0, 1.0] };
                let mut outcome = SampleOutcome::Neither;
                for dir in order {
                    if let Some((t, _)) = exit_time(field, &point, dir * opts.budget, self, &opts.tolerances)? {
                        outcome = if dir > 0.0 {
                            SampleOutcome::ExitsForward { time: t }
                        } else {
                            SampleOutcome::ExitsBackward { time: -t }
                        };
                        break;
                    }
                }
                Ok(IsolationSample {
                    point,
                    face,
                    flux,
                    outcome,
                })
            })
            .collect();
        let samples = results?;
        let verdict = Verdict::from(samples.iter().all(|s| s.outcome != SampleOutcome::Neither));
        let worst_margin = samples.iter().map(|s| s.flux.abs()).fold(f64::INFINITY, f64::min);
        let slowest_exit = samples
            .iter()
            .filter_map(|s| match s.outcome {
                SampleOutcome::ExitsForward { time } | SampleOutcome::ExitsBackward { time } => Some(time),
                SampleOutcome::Neither => None,
            })
            .fold(0.0, f64::max);
        Ok(IsolationReport {
            samples,
            verdict,
            worst_margin,
            slowest_exit,
            budget: opts.budget,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IsolationOptions {
    pub budget: f64,
    /// Sample points per tangent axis of each boundary face.
    pub samples: usize,
    pub tolerances: Tolerances,
}

impl Default for IsolationOptions {
    fn default() -> Self {
        IsolationOptions {
            budget: 200.0,
            samples: 3,
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum SampleOutcome {
    ExitsForward { time: f64 },
    /// `time` is the (positive) backward duration.
    ExitsBackward { time: f64 },
    Neither,
}

#[derive(Clone, Debug, Serialize)]
pub struct IsolationSample {
    pub point: Vec<f64>,
    pub face: Face,
    pub flux: f64,
    pub outcome: SampleOutcome,
}

/// Pass iff every boundary sample leaves the block forward or backward
/// within the budget. `worst_margin` is the smallest `|X·ν|` over samples.
#[derive(Clone, Debug, Serialize)]
pub struct IsolationReport {
    pub samples: Vec<IsolationSample>,
    pub verdict: Verdict,
    pub worst_margin: f64,
    pub slowest_exit: f64,
    pub budget: f64,
}

impl IsolationReport {
    pub fn failures(&self) -> Vec<&IsolationSample> {
        self.samples
            .iter()
            .filter(|s| s.outcome == SampleOutcome::Neither)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(bounds: &[(f64, f64)], h: f64) -> GridBlock {
        build_block(&BlockSpec::Box(bounds.to_vec()), &Grid::with_spacing(h)).unwrap()
    }

    fn field(dim: usize, comps: &[&str]) -> FieldDef {
        FieldDef::parse(dim, comps, false).unwrap()
    }

    #[test]
    fn counting_cubes_and_faces() {
        let b = boxed(&[(-1.0, 1.0), (-1.0, 1.0)], 0.25);
        assert_eq!(b.cubes().len(), 64);
        assert_eq!(b.boundary().len(), 32);
        assert!(b.boundary().iter().all(|f| f.tag == FaceTag::Unresolved));
        let b = boxed(&[(-1.0, 1.0)], 0.5);
        assert_eq!(b.cubes().len(), 4);
        assert_eq!(b.boundary().len(), 2);
    }

    #[test]
    fn annulus_has_two_boundary_components() {
        let cubes: Vec<Vec<i64>> = (-4..4)
            .flat_map(|i| (-4..4).map(move |j| vec![i, j]))
            .filter(|c| !(c[0] >= -1 && c[0] < 1 && c[1] >= -1 && c[1] < 1))
            .collect();
        let b = build_block(&BlockSpec::Cubes(cubes), &Grid::with_spacing(0.5)).unwrap();
        assert_eq!(b.boundary_components(), 2);
        assert_eq!(boxed(&[(-1.0, 1.0), (-1.0, 1.0)], 0.25).boundary_components(), 1);
    }

    #[test]
    fn build_errors() {
        assert_eq!(
            build_block(&BlockSpec::Cubes(vec![]), &Grid::with_spacing(1.0)).unwrap_err(),
            BlockError::Empty
        );
        assert!(matches!(
            build_block(&BlockSpec::Box(vec![(0.0, 0.3)]), &Grid::with_spacing(0.25)),
            Err(BlockError::InconsistentGrid(_))
        ));
    }

    #[test]
    fn saddle_classification_and_exit_set() {
        let b = boxed(&[(-1.0, 1.0), (-1.0, 1.0)], 0.25).classify_boundary(&field(2, &["x1", "-x2"]), 3, 1e-9);
        for f in b.boundary() {
            let expected = if f.face.axis == 0 { FaceTag::Egress } else { FaceTag::Ingress };
            assert_eq!(f.tag, expected);
        }
        let exit = b.exit_set().unwrap();
        assert!(exit.is_closed());
        // two segments of 8 edges and 9 vertices each
        assert_eq!(exit.len(), 34);
        for (a, b) in [(-8, -8), (-8, 8), (8, -8), (8, 8)] {
            assert!(exit.contains(&ElementaryCube(vec![a, b])));
        }
    }

    #[test]
    fn one_dimensional_signs() {
        let b = boxed(&[(-2.0, 2.0)], 0.5).classify_boundary(&field(1, &["x1 - x1^3"]), 3, 1e-9);
        assert!(b.boundary().iter().all(|f| f.tag == FaceTag::Ingress));
        assert!(b.exit_set().unwrap().is_empty());

        let b = boxed(&[(-1.0, 1.0)], 0.5).classify_boundary(&field(1, &["x1^2/(1+x1^2)"]), 3, 1e-9);
        for f in b.boundary() {
            let expected = if f.face.upper { FaceTag::Egress } else { FaceTag::Ingress };
            assert_eq!(f.tag, expected);
        }

        let b = boxed(&[(-1.0, 1.0)], 0.5).classify_boundary(&field(1, &["x1"]), 3, 1e-9);
        let exit = b.exit_set().unwrap();
        assert_eq!(exit.len(), 2);
        assert!(exit.contains(&ElementaryCube(vec![-4])) && exit.contains(&ElementaryCube(vec![4])));
    }

    #[test]
    fn tangency_is_unresolved_and_blocks_exit_set() {
        let b = boxed(&[(-1.0, 1.0), (-1.0, 1.0)], 0.5).classify_boundary(&field(2, &["x2", "0"]), 3, 1e-9);
        assert!(!b.unresolved().is_empty());
        assert!(matches!(b.exit_set(), Err(BlockError::Unresolved(_))));
    }

    #[test]
    fn raising_tolerance_never_flips_tags() {
        let base = boxed(&[(-1.0, 1.0), (-1.0, 1.0)], 0.25);
        let f = field(2, &["x1 + 0.3*x2", "-x2 + 0.2*x1^2"]);
        let lo = base.classify_boundary(&f, 3, 1e-9);
        let hi = base.classify_boundary(&f, 3, 0.5);
        for (a, b) in lo.boundary().iter().zip(hi.boundary()) {
            assert!(b.tag == a.tag || b.tag == FaceTag::Unresolved);
        }
    }

    #[test]
    fn isolation_verdicts() {
        let opts = IsolationOptions::default();
        let saddle = boxed(&[(-1.0, 1.0), (-1.0, 1.0)], 0.25);
        let r = saddle.check_isolation(&field(2, &["x1", "-x2"]), &opts).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert!((r.worst_margin - 1.0).abs() < 1e-12);

        let drift = boxed(&[(0.0, 1.0)], 0.5);
        let r = drift.check_isolation(&field(1, &["1"]), &opts).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert!(r
            .samples
            .iter()
            .all(|s| matches!(s.outcome, SampleOutcome::ExitsForward { .. } | SampleOutcome::ExitsBackward { .. })));

        // the boundary equilibrium at 0 never leaves
        let half = boxed(&[(0.0, 2.0)], 0.5);
        let r = half.check_isolation(&field(1, &["x1 - x1^3"]), &opts).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        assert_eq!(r.failures().len(), 1);
        assert_eq!(r.failures()[0].point, vec![0.0]);
    }

    #[test]
    fn geometry_helpers() {
        let b = boxed(&[(-1.0, 1.0), (-1.0, 1.0)], 0.25);
        assert!(b.contains(&[1.0, 1.0]));
        assert!(!b.contains(&[1.0 + 1e-6, 0.0]));
        assert!((b.boundary_distance(&[0.5, 0.0]) - 0.5).abs() < 1e-12);
        let f = b.crossing_face(&[0.99, 0.1], &[1.01, 0.1]);
        assert_eq!((f.axis, f.upper, f.cube.clone()), (0, true, vec![3, 0]));
        let inner = boxed(&[(-0.5, 0.5), (-0.5, 0.5)], 0.25);
        assert!(inner.is_subblock_of(&b));
        assert!(!inner.is_disjoint_from(&b));
        assert_eq!(b.closed_samples(2).len(), 81);
    }
}
