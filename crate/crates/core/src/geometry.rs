//! Interval boxes, uniform grid partitions and the projection algebra over
//! component index sets.
//!
//! Every state component is scalar. Grid cells are half-open `[a, a + w)`
//! along each axis except the last cell, which is closed, so the cells of an
//! axis tile the closed safe interval exactly and every point of the safe set
//! lies in exactly one cell.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("bound vectors differ in length ({lower} lower, {upper} upper)")]
    LengthMismatch { lower: usize, upper: usize },
    #[error("axis {axis}: lower bound {lower} exceeds upper bound {upper}")]
    Inverted { axis: usize, lower: f64, upper: f64 },
    #[error("axis {axis}: bound is not a finite number")]
    NotFinite { axis: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("component {0} is not part of the index set")]
    UnknownComponent(usize),
    #[error("cell index {index} on component {component} is out of range (cells: {cells})")]
    InvalidCell {
        component: usize,
        index: u32,
        cells: u32,
    },
    #[error("component {component} must have at least one cell")]
    NoCells { component: usize },
    #[error("component {component}: grid interval has zero width")]
    DegenerateAxis { component: usize },
}

/// Axis-aligned closed box `[lower, upper]` in R^k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl IntervalBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, GeometryError> {
        if lower.len() != upper.len() {
            return Err(GeometryError::LengthMismatch {
                lower: lower.len(),
                upper: upper.len(),
            });
        }
        for (axis, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(GeometryError::NotFinite { axis });
            }
            if lo > hi {
                return Err(GeometryError::Inverted {
                    axis,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn from_intervals(intervals: &[(f64, f64)]) -> Result<Self, GeometryError> {
        let (lower, upper) = intervals.iter().copied().unzip();
        Self::new(lower, upper)
    }

    /// Degenerate box holding a single point.
    pub fn point(x: &[f64]) -> Self {
        Self {
            lower: x.to_vec(),
            upper: x.to_vec(),
        }
    }

    /// Box of the given dimension with all bounds at zero, used as scratch space.
    pub fn zeros(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn interval(&self, axis: usize) -> (f64, f64) {
        (self.lower[axis], self.upper[axis])
    }

    /// Overwrites one axis. Callers keep `lower <= upper`.
    pub fn set_interval(&mut self, axis: usize, lower: f64, upper: f64) {
        debug_assert!(lower <= upper, "axis {axis}: {lower} > {upper}");
        self.lower[axis] = lower;
        self.upper[axis] = upper;
    }

    pub fn bounds_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.lower, &mut self.upper)
    }

    pub fn contains_point(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&v, (&lo, &hi))| lo <= v && v <= hi)
    }

    pub fn contains_box(&self, other: &IntervalBox) -> bool {
        other.dim() == self.dim()
            && (0..self.dim())
                .all(|k| self.lower[k] <= other.lower[k] && other.upper[k] <= self.upper[k])
    }

    pub fn intersects(&self, other: &IntervalBox) -> bool {
        other.dim() == self.dim()
            && (0..self.dim())
                .all(|k| self.lower[k] <= other.upper[k] && other.lower[k] <= self.upper[k])
    }

    /// Selects the axes listed in `axes`, in that order.
    pub fn select(&self, axes: &[usize]) -> Result<IntervalBox, GeometryError> {
        let mut lower = Vec::with_capacity(axes.len());
        let mut upper = Vec::with_capacity(axes.len());
        for &a in axes {
            if a >= self.dim() {
                return Err(GeometryError::UnknownComponent(a));
            }
            lower.push(self.lower[a]);
            upper.push(self.upper[a]);
        }
        Ok(IntervalBox { lower, upper })
    }

    /// Projects a box living over `over` onto the sub-index set `onto`.
    pub fn project(
        &self,
        over: &ComponentSet,
        onto: &ComponentSet,
    ) -> Result<IntervalBox, GeometryError> {
        if over.len() != self.dim() {
            return Err(GeometryError::Dimension {
                expected: over.len(),
                actual: self.dim(),
            });
        }
        let axes = onto
            .iter()
            .map(|c| over.position(c).ok_or(GeometryError::UnknownComponent(c)))
            .collect::<Result<Vec<_>, _>>()?;
        self.select(&axes)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    }
}

impl fmt::Display for IntervalBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in 0..self.dim() {
            if k > 0 {
                write!(f, "x")?;
            }
            write!(f, "[{}, {}]", self.lower[k], self.upper[k])?;
        }
        Ok(())
    }
}

/// Sorted, duplicate-free set of component indices (0-based).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<usize>", into = "Vec<usize>")]
pub struct ComponentSet(Vec<usize>);

impl ComponentSet {
    pub fn new(components: impl IntoIterator<Item = usize>) -> Self {
        let mut v: Vec<usize> = components.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Self(v)
    }

    pub fn range(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, c: usize) -> bool {
        self.0.binary_search(&c).is_ok()
    }

    /// Position of component `c` inside the set.
    pub fn position(&self, c: usize) -> Option<usize> {
        self.0.binary_search(&c).ok()
    }

    pub fn is_subset(&self, other: &ComponentSet) -> bool {
        self.iter().all(|c| other.contains(c))
    }

    pub fn difference(&self, other: &ComponentSet) -> ComponentSet {
        Self(self.iter().filter(|&c| !other.contains(c)).collect())
    }

    pub fn intersects(&self, other: &ComponentSet) -> bool {
        self.iter().any(|c| other.contains(c))
    }
}

impl From<Vec<usize>> for ComponentSet {
    fn from(v: Vec<usize>) -> Self {
        Self::new(v)
    }
}

impl From<ComponentSet> for Vec<usize> {
    fn from(s: ComponentSet) -> Self {
        s.0
    }
}

impl fmt::Display for ComponentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, c) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "}}")
    }
}

/// Multi-index of a grid cell, one entry per component of the index set it
/// lives over.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex(pub Vec<u32>);

impl CellIndex {
    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn project(
        &self,
        over: &ComponentSet,
        onto: &ComponentSet,
    ) -> Result<CellIndex, GeometryError> {
        project_values(&self.0, over, onto).map(CellIndex)
    }
}

impl fmt::Display for CellIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, c) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// Coordinate selection: `values` is indexed by position in `over`.
pub fn project_values<T: Copy>(
    values: &[T],
    over: &ComponentSet,
    onto: &ComponentSet,
) -> Result<Vec<T>, GeometryError> {
    if values.len() != over.len() {
        return Err(GeometryError::Dimension {
            expected: over.len(),
            actual: values.len(),
        });
    }
    onto.iter()
        .map(|c| {
            over.position(c)
                .map(|p| values[p])
                .ok_or(GeometryError::UnknownComponent(c))
        })
        .collect()
}

/// Abstract state: a grid cell or the absorbing `Out` symbol.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AbstractState {
    Cell(CellIndex),
    Out,
}

impl AbstractState {
    pub fn cell(&self) -> Option<&CellIndex> {
        match self {
            AbstractState::Cell(c) => Some(c),
            AbstractState::Out => None,
        }
    }
}

/// Mixed-radix shape used to flatten multi-indices row-major (first axis most
/// significant).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    extents: Vec<u32>,
    strides: Vec<u64>,
    size: u64,
}

impl Shape {
    /// Panics if the product of extents overflows `u64`.
    pub fn new(extents: Vec<u32>) -> Self {
        let mut strides = vec![0u64; extents.len()];
        let mut size: u64 = 1;
        for k in (0..extents.len()).rev() {
            strides[k] = size;
            size = size
                .checked_mul(extents[k] as u64)
                .expect("shape size overflows u64");
        }
        Self {
            extents,
            strides,
            size,
        }
    }

    /// Like [`Shape::new`] but reports overflow instead of panicking.
    pub fn try_new(extents: Vec<u32>) -> Option<Self> {
        extents
            .iter()
            .try_fold(1u64, |acc, &e| acc.checked_mul(e as u64))?;
        Some(Self::new(extents))
    }

    pub fn extents(&self) -> &[u32] {
        &self.extents
    }

    pub fn strides(&self) -> &[u64] {
        &self.strides
    }

    pub fn rank(&self) -> usize {
        self.extents.len()
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn flat(&self, index: &[u32]) -> u64 {
        debug_assert_eq!(index.len(), self.rank());
        index
            .iter()
            .zip(&self.strides)
            .map(|(&i, &s)| i as u64 * s)
            .sum()
    }

    pub fn unflat(&self, mut id: u64) -> Vec<u32> {
        let mut out = vec![0u32; self.rank()];
        self.unflat_into(&mut id, &mut out);
        out
    }

    pub fn unflat_into(&self, id: &mut u64, out: &mut [u32]) {
        for k in 0..self.rank() {
            out[k] = (*id / self.strides[k]) as u32;
            *id %= self.strides[k];
        }
    }

    pub fn contains(&self, index: &[u32]) -> bool {
        index.len() == self.rank() && index.iter().zip(&self.extents).all(|(&i, &e)| i < e)
    }
}

/// Advances a row-major odometer over `extents`; returns false after the last
/// index.
pub fn next_index(index: &mut [u32], extents: &[u32]) -> bool {
    for k in (0..index.len()).rev() {
        index[k] += 1;
        if index[k] < extents[k] {
            return true;
        }
        index[k] = 0;
    }
    false
}

/// Inclusive axis-aligned range of cells over some index set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellRange {
    pub lower: Vec<u32>,
    pub upper: Vec<u32>,
}

impl CellRange {
    pub fn rank(&self) -> usize {
        self.lower.len()
    }

    pub fn len(&self) -> u64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| (u - l + 1) as u64)
            .product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, index: &[u32]) -> bool {
        index.len() == self.rank()
            && index
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&i, (&l, &u))| l <= i && i <= u)
    }

    /// Intersection, or `None` if disjoint.
    pub fn intersect(&self, other: &CellRange) -> Option<CellRange> {
        let mut lower = Vec::with_capacity(self.rank());
        let mut upper = Vec::with_capacity(self.rank());
        for k in 0..self.rank() {
            let l = self.lower[k].max(other.lower[k]);
            let u = self.upper[k].min(other.upper[k]);
            if l > u {
                return None;
            }
            lower.push(l);
            upper.push(u);
        }
        Some(CellRange { lower, upper })
    }

    pub fn cells(&self) -> CellRangeIter<'_> {
        CellRangeIter {
            range: self,
            current: Some(self.lower.clone()),
        }
    }
}

pub struct CellRangeIter<'a> {
    range: &'a CellRange,
    current: Option<Vec<u32>>,
}

impl Iterator for CellRangeIter<'_> {
    type Item = CellIndex;

    fn next(&mut self) -> Option<CellIndex> {
        let cur = self.current.take()?;
        let mut next = cur.clone();
        let mut advanced = false;
        for k in (0..next.len()).rev() {
            if next[k] < self.range.upper[k] {
                next[k] += 1;
                advanced = true;
                break;
            }
            next[k] = self.range.lower[k];
        }
        if advanced {
            self.current = Some(next);
        }
        Some(CellIndex(cur))
    }
}

/// Uniform partition of a box: `cells[i]` equal-width cells along component `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid {
    domain: IntervalBox,
    cells: Vec<u32>,
}

impl UniformGrid {
    pub fn new(domain: IntervalBox, cells: Vec<u32>) -> Result<Self, GeometryError> {
        if cells.len() != domain.dim() {
            return Err(GeometryError::Dimension {
                expected: domain.dim(),
                actual: cells.len(),
            });
        }
        for (component, &c) in cells.iter().enumerate() {
            if c == 0 {
                return Err(GeometryError::NoCells { component });
            }
            let (lo, hi) = domain.interval(component);
            if lo >= hi {
                return Err(GeometryError::DegenerateAxis { component });
            }
        }
        Ok(Self { domain, cells })
    }

    /// Grid with the same cell count on every component.
    pub fn uniform(domain: IntervalBox, cells_per_component: u32) -> Result<Self, GeometryError> {
        let n = domain.dim();
        Self::new(domain, vec![cells_per_component; n])
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn domain(&self) -> &IntervalBox {
        &self.domain
    }

    pub fn cells_per_component(&self) -> &[u32] {
        &self.cells
    }

    /// `|P|`, exact even when it exceeds `u64`.
    pub fn total_cells(&self) -> u128 {
        self.cells.iter().map(|&c| c as u128).product()
    }

    /// Cell counts restricted to `components`.
    pub fn extents(&self, components: &ComponentSet) -> Vec<u32> {
        components.iter().map(|c| self.cells[c]).collect()
    }

    pub fn width(&self, component: usize) -> f64 {
        let (lo, hi) = self.domain.interval(component);
        (hi - lo) / self.cells[component] as f64
    }

    /// Coordinate of boundary `k` (0..=cells) on a component; the last
    /// boundary is exactly the domain's upper bound.
    pub fn boundary(&self, component: usize, k: u32) -> f64 {
        let (lo, hi) = self.domain.interval(component);
        if k >= self.cells[component] {
            hi
        } else {
            lo + k as f64 * self.width(component)
        }
    }

    /// Index of the cell containing `x` along one component, `None` outside
    /// the closed interval.
    pub fn axis_index(&self, component: usize, x: f64) -> Option<u32> {
        let (lo, hi) = self.domain.interval(component);
        if !(lo..=hi).contains(&x) {
            return None;
        }
        let n = self.cells[component];
        let mut c = (((x - lo) / self.width(component)).floor().max(0.0) as u64)
            .min(n as u64 - 1) as u32;
        // Align with `boundary` so locate and cell_box never disagree.
        while c > 0 && x < self.boundary(component, c) {
            c -= 1;
        }
        while c + 1 < n && x >= self.boundary(component, c + 1) {
            c += 1;
        }
        Some(c)
    }

    /// Inclusive cell interval meeting `[lo, hi]` along one component.
    pub fn axis_range(&self, component: usize, lo: f64, hi: f64) -> Option<(u32, u32)> {
        let (dlo, dhi) = self.domain.interval(component);
        if hi < dlo || lo > dhi {
            return None;
        }
        let first = self.axis_index(component, lo.max(dlo))?;
        let last = self.axis_index(component, hi.min(dhi))?;
        Some((first, last))
    }

    fn check_cell(&self, cell: &[u32], components: &ComponentSet) -> Result<(), GeometryError> {
        if cell.len() != components.len() {
            return Err(GeometryError::Dimension {
                expected: components.len(),
                actual: cell.len(),
            });
        }
        for (&index, component) in cell.iter().zip(components.iter()) {
            if component >= self.dim() {
                return Err(GeometryError::UnknownComponent(component));
            }
            if index >= self.cells[component] {
                return Err(GeometryError::InvalidCell {
                    component,
                    index,
                    cells: self.cells[component],
                });
            }
        }
        Ok(())
    }

    /// Closed hull of a cell over `components`.
    pub fn cell_box(
        &self,
        cell: &CellIndex,
        components: &ComponentSet,
    ) -> Result<IntervalBox, GeometryError> {
        self.check_cell(&cell.0, components)?;
        let mut b = IntervalBox::zeros(components.len());
        for (k, component) in components.iter().enumerate() {
            let i = cell.0[k];
            b.set_interval(
                k,
                self.boundary(component, i),
                self.boundary(component, i + 1),
            );
        }
        Ok(b)
    }

    /// The quantizer: the unique cell containing `x`, or `Out`.
    pub fn locate(&self, x: &[f64]) -> AbstractState {
        self.locate_on(x, &ComponentSet::range(self.dim()))
    }

    /// Quantizer over a sub-index set; `x` is indexed by position in `components`.
    pub fn locate_on(&self, x: &[f64], components: &ComponentSet) -> AbstractState {
        if x.len() != components.len() {
            return AbstractState::Out;
        }
        let mut index = Vec::with_capacity(x.len());
        for (&v, c) in x.iter().zip(components.iter()) {
            match self.axis_index(c, v) {
                Some(i) => index.push(i),
                None => return AbstractState::Out,
            }
        }
        AbstractState::Cell(CellIndex(index))
    }

    /// Range of cells whose half-open boxes meet `b`, `None` if `b` misses
    /// the safe set over `components`.
    pub fn cell_range_meeting(
        &self,
        b: &IntervalBox,
        components: &ComponentSet,
    ) -> Result<Option<CellRange>, GeometryError> {
        if b.dim() != components.len() {
            return Err(GeometryError::Dimension {
                expected: components.len(),
                actual: b.dim(),
            });
        }
        let mut lower = Vec::with_capacity(b.dim());
        let mut upper = Vec::with_capacity(b.dim());
        for (k, c) in components.iter().enumerate() {
            if c >= self.dim() {
                return Err(GeometryError::UnknownComponent(c));
            }
            let (lo, hi) = b.interval(k);
            match self.axis_range(c, lo, hi) {
                Some((l, u)) => {
                    lower.push(l);
                    upper.push(u);
                }
                None => return Ok(None),
            }
        }
        Ok(Some(CellRange { lower, upper }))
    }

    pub fn cells_meeting_box(
        &self,
        b: &IntervalBox,
        components: &ComponentSet,
    ) -> Result<Vec<CellIndex>, GeometryError> {
        Ok(self
            .cell_range_meeting(b, components)?
            .map(|r| r.cells().collect())
            .unwrap_or_default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_1d() -> UniformGrid {
        UniformGrid::uniform(IntervalBox::from_intervals(&[(17.0, 22.0)]).unwrap(), 5).unwrap()
    }

    fn set(v: &[usize]) -> ComponentSet {
        ComponentSet::new(v.iter().copied())
    }

    #[test]
    fn cell_box_examples() {
        let g = grid_1d();
        let c0 = g.cell_box(&CellIndex(vec![0]), &set(&[0])).unwrap();
        assert_eq!(c0.interval(0), (17.0, 18.0));
        let c4 = g.cell_box(&CellIndex(vec![4]), &set(&[0])).unwrap();
        assert_eq!(c4.interval(0), (21.0, 22.0));

        let d = IntervalBox::from_intervals(&[(19.0, 21.0); 20]).unwrap();
        let g20 = UniformGrid::uniform(d, 10).unwrap();
        let b = g20
            .cell_box(&CellIndex(vec![0; 20]), &ComponentSet::range(20))
            .unwrap();
        for k in 0..20 {
            let (lo, hi) = b.interval(k);
            assert_eq!(lo, 19.0);
            assert!((hi - 19.2).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_box_rejects_out_of_range() {
        let g = grid_1d();
        let err = g.cell_box(&CellIndex(vec![5]), &set(&[0])).unwrap_err();
        assert!(matches!(err, GeometryError::InvalidCell { index: 5, .. }));
    }

    #[test]
    fn locate_examples() {
        let g = grid_1d();
        assert_eq!(g.locate(&[17.5]), AbstractState::Cell(CellIndex(vec![0])));
        assert_eq!(g.locate(&[18.0]), AbstractState::Cell(CellIndex(vec![1])));
        assert_eq!(g.locate(&[16.9]), AbstractState::Out);
        assert_eq!(g.locate(&[22.0]), AbstractState::Cell(CellIndex(vec![4])));
        assert_eq!(g.locate(&[22.000001]), AbstractState::Out);
    }

    #[test]
    fn project_examples() {
        let over = set(&[0, 1, 2, 3]);
        let cell = CellIndex(vec![3, 1, 4, 2]);
        assert_eq!(cell.project(&over, &set(&[0, 1])).unwrap().0, vec![3, 1]);
        assert_eq!(cell.project(&over, &set(&[3])).unwrap().0, vec![2]);
        let b = IntervalBox::from_intervals(&[(17.0, 18.0), (19.0, 20.0)]).unwrap();
        let p = b.project(&set(&[0, 1]), &set(&[1])).unwrap();
        assert_eq!(p.interval(0), (19.0, 20.0));
        assert!(matches!(
            cell.project(&set(&[0, 1]), &set(&[0])),
            Err(GeometryError::Dimension { .. })
        ));
        assert!(matches!(
            cell.project(&over, &set(&[7])),
            Err(GeometryError::UnknownComponent(7))
        ));
    }

    #[test]
    fn cells_meeting_box_examples() {
        let g = grid_1d();
        let b = IntervalBox::from_intervals(&[(18.5, 19.5)]).unwrap();
        let cells = g.cells_meeting_box(&b, &set(&[0])).unwrap();
        assert_eq!(cells, vec![CellIndex(vec![1]), CellIndex(vec![2])]);
        let outside = IntervalBox::from_intervals(&[(23.0, 24.0)]).unwrap();
        assert!(g.cells_meeting_box(&outside, &set(&[0])).unwrap().is_empty());
        // A closed box ending on a boundary contains that boundary point,
        // which lies in the next cell.
        let touching = IntervalBox::from_intervals(&[(17.5, 18.0)]).unwrap();
        assert_eq!(
            g.cells_meeting_box(&touching, &set(&[0])).unwrap(),
            vec![CellIndex(vec![0]), CellIndex(vec![1])]
        );
        let below = IntervalBox::from_intervals(&[(17.2, 17.99)]).unwrap();
        assert_eq!(
            g.cells_meeting_box(&below, &set(&[0])).unwrap(),
            vec![CellIndex(vec![0])]
        );
    }

    /// Oracle: test every cell's half-open box for intersection directly.
    fn brute_force_meeting(g: &UniformGrid, b: &IntervalBox, comps: &ComponentSet) -> Vec<CellIndex> {
        let extents = g.extents(comps);
        let mut idx = vec![0u32; comps.len()];
        let mut out = Vec::new();
        loop {
            let meets = comps.iter().enumerate().all(|(k, c)| {
                let a = g.boundary(c, idx[k]);
                let z = g.boundary(c, idx[k] + 1);
                let last = idx[k] + 1 == g.cells_per_component()[c];
                let (lo, hi) = b.interval(k);
                // half-open [a, z), or closed [a, z] on the last cell
                a <= hi && (lo < z || (last && lo <= z))
            });
            if meets {
                out.push(CellIndex(idx.clone()));
            }
            if !next_index(&mut idx, &extents) {
                break;
            }
        }
        out
    }

    #[test]
    fn cells_meeting_box_two_components() {
        let comps = set(&[0, 1]);
        let b = IntervalBox::from_intervals(&[(17.1, 17.9), (19.1, 19.9)]).unwrap();

        let d = IntervalBox::from_intervals(&[(17.0, 22.0), (19.0, 24.0)]).unwrap();
        let g = UniformGrid::uniform(d, 5).unwrap();
        let expected = brute_force_meeting(&g, &b, &comps);
        assert_eq!(expected, vec![CellIndex(vec![0, 0])]);
        assert_eq!(g.cells_meeting_box(&b, &comps).unwrap(), expected);

        // width 0.6 on the second axis: 19.9 lies in [19.6, 20.2)
        let d = IntervalBox::from_intervals(&[(17.0, 22.0), (19.0, 22.0)]).unwrap();
        let g = UniformGrid::uniform(d, 5).unwrap();
        let expected = brute_force_meeting(&g, &b, &comps);
        assert_eq!(expected, vec![CellIndex(vec![0, 0]), CellIndex(vec![0, 1])]);
        assert_eq!(g.cells_meeting_box(&b, &comps).unwrap(), expected);
    }

    #[test]
    fn partition_property_sampled() {
        let d = IntervalBox::from_intervals(&[(17.0, 22.0), (19.0, 22.0), (20.0, 23.0)]).unwrap();
        let g = UniformGrid::new(d, vec![20, 7, 3]).unwrap();
        let comps = ComponentSet::range(3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let x: Vec<f64> = (0..3)
                .map(|i| {
                    let (lo, hi) = g.domain().interval(i);
                    rng.gen_range(lo..=hi)
                })
                .collect();
            let cell = match g.locate(&x) {
                AbstractState::Cell(c) => c,
                AbstractState::Out => panic!("{x:?} located outside"),
            };
            let hull = g.cell_box(&cell, &comps).unwrap();
            assert!(hull.contains_point(&x));
            // x is in no other cell under the half-open convention
            for k in 0..3 {
                let i = cell.0[k];
                let last = i + 1 == g.cells_per_component()[k];
                assert!(x[k] >= g.boundary(k, i));
                assert!(x[k] < g.boundary(k, i + 1) || (last && x[k] == g.boundary(k, i + 1)));
            }
        }
    }

    proptest! {
        #[test]
        fn projection_commutes_with_quantization(
            x in proptest::collection::vec(16.0f64..24.0, 4),
            mask in 1u8..16,
            cells in proptest::collection::vec(1u32..12, 4),
        ) {
            let d = IntervalBox::from_intervals(&[(17.0, 22.0), (19.0, 22.0), (20.0, 23.0), (20.0, 22.0)]).unwrap();
            let g = UniformGrid::new(d, cells).unwrap();
            let full = ComponentSet::range(4);
            let sub = ComponentSet::new((0..4).filter(|k| mask & (1 << k) != 0));
            let xs = project_values(&x, &full, &sub).unwrap();
            let lhs = g.locate_on(&xs, &sub);
            match g.locate(&x) {
                AbstractState::Cell(c) => {
                    prop_assert_eq!(lhs, AbstractState::Cell(c.project(&full, &sub).unwrap()));
                }
                AbstractState::Out => {
                    // projection can only land inside if the violating axis was dropped
                    if let AbstractState::Cell(_) = lhs {
                        prop_assert!(full.difference(&sub).iter().any(|k| g.axis_index(k, x[k]).is_none()));
                    }
                }
            }
        }

        #[test]
        fn cells_meeting_box_matches_brute_force(
            a in proptest::collection::vec(15.0f64..24.0, 2),
            w in proptest::collection::vec(0.0f64..4.0, 2),
            cells in proptest::collection::vec(1u32..40, 2),
        ) {
            let d = IntervalBox::from_intervals(&[(17.0, 22.0), (19.0, 22.0)]).unwrap();
            let g = UniformGrid::new(d, cells).unwrap();
            let comps = ComponentSet::range(2);
            let b = IntervalBox::new(a.clone(), vec![a[0] + w[0], a[1] + w[1]]).unwrap();
            prop_assert_eq!(g.cells_meeting_box(&b, &comps).unwrap(), brute_force_meeting(&g, &b, &comps));
        }

        #[test]
        fn cells_meeting_box_on_boundaries(
            l in 0u32..10, span in 0u32..4, cells in 1u32..10,
        ) {
            // Boxes whose ends sit exactly on grid boundaries.
            let d = IntervalBox::from_intervals(&[(20.0, 22.0)]).unwrap();
            let g = UniformGrid::uniform(d, cells).unwrap();
            let lo = g.boundary(0, l.min(cells));
            let hi = g.boundary(0, (l + span).min(cells));
            let b = IntervalBox::from_intervals(&[(lo, hi)]).unwrap();
            let comps = ComponentSet::range(1);
            prop_assert_eq!(g.cells_meeting_box(&b, &comps).unwrap(), brute_force_meeting(&g, &b, &comps));
        }
    }

    #[test]
    fn shape_round_trip() {
        let s = Shape::new(vec![3, 4, 5]);
        assert_eq!(s.size(), 60);
        for id in 0..60 {
            assert_eq!(s.flat(&s.unflat(id)), id);
        }
        assert_eq!(s.flat(&[1, 0, 0]), 20);
    }

    #[test]
    fn cell_range_iteration_is_row_major() {
        let r = CellRange {
            lower: vec![1, 0],
            upper: vec![2, 1],
        };
        let cells: Vec<_> = r.cells().map(|c| c.0).collect();
        assert_eq!(cells, vec![vec![1, 0], vec![1, 1], vec![2, 0], vec![2, 1]]);
        assert_eq!(r.len(), 4);
    }
}
