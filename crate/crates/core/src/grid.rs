//! Uniform box partitions, grid measures and box sets, Ulam matrices, and
//! the measure functionals built on them.
//!
//! Conventions:
//!
//! - Boxes are half-open. On the circle box `i` is `[i/N, (i+1)/N)`; on the
//!   torus box `ix * N + iy` is `[ix/N, (ix+1)/N) x [iy/N, (iy+1)/N)`.
//! - `P[i][j]` is the fraction of box `i` sent into box `j`, so every row
//!   sums to one and a measure is pushed forward as the row vector `mu * P`.

use std::fmt::Write as _;
use std::io;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phase::{wrap, IFSystem, PhaseSpace, Point, SmoothMap};
use crate::seeds;

/// Tolerance on row sums and total masses.
pub const STOCHASTIC_TOL: f64 = 1e-9;
/// Lifted endpoints this close to a box boundary (in box units) are snapped.
const SNAP: f64 = 1e-9;
/// Default majority threshold for discretized preimages.
pub const DEFAULT_THETA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub space: PhaseSpace,
    pub n: usize,
}

impl Grid {
    pub fn new(space: PhaseSpace, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("grid resolution must be >= 2, got {n}")));
        }
        Ok(Grid { space, n })
    }

    pub fn circle(n: usize) -> Result<Self> {
        Grid::new(PhaseSpace::Circle, n)
    }

    pub fn torus(n: usize) -> Result<Self> {
        Grid::new(PhaseSpace::Torus2, n)
    }

    pub fn num_boxes(&self) -> usize {
        match self.space {
            PhaseSpace::Circle => self.n,
            PhaseSpace::Torus2 => self.n * self.n,
        }
    }

    #[inline]
    fn cell(&self, x: f64) -> usize {
        ((x * self.n as f64) as usize).min(self.n - 1)
    }

    /// Index of the box containing `p`. The point must be on this grid's
    /// phase space.
    #[inline]
    pub fn box_of(&self, p: &Point) -> usize {
        match *p {
            Point::Circle(x) => self.cell(x),
            Point::Torus([x, y]) => self.cell(x) * self.n + self.cell(y),
        }
    }

    /// `(ix, iy)` for torus boxes, `(i, 0)` on the circle.
    pub fn box_coords(&self, i: usize) -> (usize, usize) {
        match self.space {
            PhaseSpace::Circle => (i, 0),
            PhaseSpace::Torus2 => (i / self.n, i % self.n),
        }
    }

    pub fn box_index(&self, ix: usize, iy: usize) -> usize {
        match self.space {
            PhaseSpace::Circle => ix % self.n,
            PhaseSpace::Torus2 => (ix % self.n) * self.n + iy % self.n,
        }
    }

    pub fn width(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Point at relative offset `(u, v)` in `[0,1)^2` inside box `i`.
    pub fn point_in_box(&self, i: usize, u: f64, v: f64) -> Point {
        let h = self.width();
        let (ix, iy) = self.box_coords(i);
        match self.space {
            PhaseSpace::Circle => Point::Circle(wrap((ix as f64 + u) * h)),
            PhaseSpace::Torus2 => {
                Point::Torus([wrap((ix as f64 + u) * h), wrap((iy as f64 + v) * h)])
            }
        }
    }

    pub fn box_center(&self, i: usize) -> Point {
        self.point_in_box(i, 0.5, 0.5)
    }

    /// All boxes sharing an edge or a corner with box `i` (2 on the circle,
    /// 8 on the torus).
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let n = self.n;
        match self.space {
            PhaseSpace::Circle => vec![(i + n - 1) % n, (i + 1) % n],
            PhaseSpace::Torus2 => {
                let (ix, iy) = self.box_coords(i);
                let mut out = Vec::with_capacity(8);
                for dx in [n - 1, 0, 1] {
                    for dy in [n - 1, 0, 1] {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        out.push(self.box_index(ix + dx, iy + dy));
                    }
                }
                out
            }
        }
    }

    fn check_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(Error::usage(format!(
                "grid mismatch: {}x{} vs {}x{}",
                self.space, self.n, other.space, other.n
            )));
        }
        Ok(())
    }
}

/// Snap `x` to the nearest integer when within [`SNAP`].
#[inline]
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < SNAP {
        r
    } else {
        x
    }
}

/// Index range `[first, last)` of boxes meeting the lifted interval
/// `[lo, hi)` in box units, with positive overlap.
fn covered_range(lo: f64, hi: f64) -> (i64, i64) {
    (lo.floor() as i64, hi.ceil() as i64)
}

/// A probability measure with constant density on each box.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridMeasure {
    grid: Grid,
    weights: Vec<f64>,
}

impl GridMeasure {
    pub fn new(grid: Grid, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.num_boxes() {
            return Err(Error::invalid(format!(
                "measure has {} weights for {} boxes",
                weights.len(),
                grid.num_boxes()
            )));
        }
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !w.is_finite() || **w < 0.0)
        {
            return Err(Error::invalid(format!("negative or non-finite weight {w} on box {i}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::invalid(format!("measure has total mass {total}")));
        }
        Ok(GridMeasure { grid, weights })
    }

    /// Rescale nonnegative weights to unit mass.
    pub fn normalized(grid: Grid, mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::invalid("cannot normalize a measure with zero total mass"));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        GridMeasure::new(grid, weights)
    }

    pub fn uniform(grid: Grid) -> Self {
        let m = grid.num_boxes();
        GridMeasure {
            grid,
            weights: vec![1.0 / m as f64; m],
        }
    }

    pub fn point_mass(grid: Grid, i: usize) -> Result<Self> {
        if i >= grid.num_boxes() {
            return Err(Error::usage(format!("box {i} out of range")));
        }
        let mut weights = vec![0.0; grid.num_boxes()];
        weights[i] = 1.0;
        Ok(GridMeasure { grid, weights })
    }

    /// Normalized histogram of box visits.
    pub fn from_counts(grid: Grid, counts: &[u64]) -> Result<Self> {
        GridMeasure::normalized(grid, counts.iter().map(|&c| c as f64).collect())
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn mass(&self, set: &BoxSet) -> Result<f64> {
        self.grid.check_same(&set.grid)?;
        Ok(set.indices.iter().map(|&i| self.weights[i]).sum())
    }

    /// Boxes with mass strictly above `tol`.
    pub fn support(&self, tol: f64) -> BoxSet {
        BoxSet {
            grid: self.grid,
            indices: (0..self.weights.len())
                .filter(|&i| self.weights[i] > tol)
                .collect(),
        }
    }

    /// Draw a point: a box by weight, then uniformly inside it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let u: f64 = rng.random::<f64>() * self.total();
        let mut acc = 0.0;
        let mut chosen = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                chosen = i;
                break;
            }
        }
        self.grid
            .point_in_box(chosen, rng.random::<f64>(), rng.random::<f64>())
    }

    /// `box,weight` lines with a header.
    pub fn write_csv<W: io::Write>(&self, mut out: W) -> io::Result<()> {
        let mut s = String::from("box,weight\n");
        for (i, w) in self.weights.iter().enumerate() {
            let _ = writeln!(s, "{i},{w}");
        }
        out.write_all(s.as_bytes())
    }
}

/// A set of boxes, stored sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct BoxSet {
    #[serde(skip)]
    grid: Grid,
    indices: Vec<usize>,
}

impl BoxSet {
    pub fn from_indices(grid: Grid, mut indices: Vec<usize>) -> Result<Self> {
        let m = grid.num_boxes();
        if let Some(bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::usage(format!("box index {bad} out of range 0..{m}")));
        }
        indices.sort_unstable();
        indices.dedup();
        Ok(BoxSet { grid, indices })
    }

    pub(crate) fn from_mask(grid: Grid, mask: &[bool]) -> Self {
        BoxSet {
            grid,
            indices: (0..mask.len()).filter(|&i| mask[i]).collect(),
        }
    }

    pub fn all(grid: Grid) -> Self {
        BoxSet {
            grid,
            indices: (0..grid.num_boxes()).collect(),
        }
    }

    pub fn empty(grid: Grid) -> Self {
        BoxSet {
            grid,
            indices: Vec::new(),
        }
    }

    /// Circle boxes meeting the arc `[lo, hi)` with positive length; `hi` may
    /// exceed `lo + ...` by wrapping but the arc length must be at most one.
    pub fn arc(grid: Grid, lo: f64, hi: f64) -> Result<Self> {
        if grid.space != PhaseSpace::Circle {
            return Err(Error::usage("arcs are circle box sets"));
        }
        let len = hi - lo;
        if !(0.0..=1.0).contains(&len) {
            return Err(Error::usage(format!("arc [{lo}, {hi}) must have length in [0, 1]")));
        }
        let n = grid.n as f64;
        let (first, last) = covered_range(snap(lo * n), snap(hi * n));
        let idx = (first..last)
            .map(|j| j.rem_euclid(grid.n as i64) as usize)
            .collect();
        BoxSet::from_indices(grid, idx)
    }

    /// Torus boxes meeting the rectangle `[x0, x1) x [y0, y1)`.
    pub fn rect(grid: Grid, x: [f64; 2], y: [f64; 2]) -> Result<Self> {
        if grid.space != PhaseSpace::Torus2 {
            return Err(Error::usage("rectangles are torus box sets"));
        }
        let n = grid.n as f64;
        let (fx, lx) = covered_range(snap(x[0] * n), snap(x[1] * n));
        let (fy, ly) = covered_range(snap(y[0] * n), snap(y[1] * n));
        let mut idx = Vec::new();
        for ix in fx..lx {
            for iy in fy..ly {
                idx.push(grid.box_index(
                    ix.rem_euclid(grid.n as i64) as usize,
                    iy.rem_euclid(grid.n as i64) as usize,
                ));
            }
        }
        BoxSet::from_indices(grid, idx)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.grid.num_boxes()];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }

    pub fn complement(&self) -> BoxSet {
        let mask = self.mask();
        BoxSet {
            grid: self.grid,
            indices: (0..mask.len()).filter(|&i| !mask[i]).collect(),
        }
    }

    fn combine(&self, other: &BoxSet, keep: impl Fn(bool, bool) -> bool) -> Result<BoxSet> {
        self.grid.check_same(&other.grid)?;
        let (a, b) = (self.mask(), other.mask());
        Ok(BoxSet {
            grid: self.grid,
            indices: (0..a.len()).filter(|&i| keep(a[i], b[i])).collect(),
        })
    }

    pub fn union(&self, other: &BoxSet) -> Result<BoxSet> {
        self.combine(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BoxSet) -> Result<BoxSet> {
        self.combine(other, |a, b| a && b)
    }

    pub fn symmetric_difference(&self, other: &BoxSet) -> Result<BoxSet> {
        self.combine(other, |a, b| a != b)
    }

    pub fn is_subset(&self, other: &BoxSet) -> bool {
        self.indices.iter().all(|&i| other.contains(i))
    }

    /// Add every neighbor of every member.
    pub fn dilate(&self) -> BoxSet {
        let mut mask = self.mask();
        for &i in &self.indices {
            for j in self.grid.neighbors(i) {
                mask[j] = true;
            }
        }
        BoxSet::from_mask(self.grid, &mask)
    }
}

/// How a map's pushforward is discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum UlamMethod {
    /// Image arcs of each box via the lift; circle maps only.
    ExactInterval,
    /// Stratified jittered samples per box. On the torus `per_box` must be a
    /// perfect square.
    Sampling { per_box: usize, seed: u64 },
}

impl UlamMethod {
    pub const DEFAULT_TORUS_SAMPLES: usize = 64;

    pub fn default_for(space: PhaseSpace) -> Self {
        match space {
            PhaseSpace::Circle => UlamMethod::ExactInterval,
            PhaseSpace::Torus2 => UlamMethod::Sampling {
                per_box: Self::DEFAULT_TORUS_SAMPLES,
                seed: 0,
            },
        }
    }
}

/// Sparse row-stochastic matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct UlamMatrix {
    grid: Grid,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    provenance: String,
}

impl UlamMatrix {
    /// Build from per-row `(col, value)` lists; duplicate columns are summed
    /// and exact zeros dropped.
    pub fn from_rows(
        grid: Grid,
        rows: Vec<Vec<(usize, f64)>>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let m = grid.num_boxes();
        if rows.len() != m {
            return Err(Error::invalid(format!("{} rows for {m} boxes", rows.len())));
        }
        let mut row_ptr = Vec::with_capacity(m + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_unstable_by_key(|e| e.0);
            let start = cols.len();
            let mut sum = 0.0;
            for (j, v) in row {
                if j >= m {
                    return Err(Error::invalid(format!("column {j} out of range in row {i}")));
                }
                if !(0.0..=1.0 + STOCHASTIC_TOL).contains(&v) {
                    return Err(Error::invalid(format!("entry ({i},{j}) = {v} outside [0,1]")));
                }
                sum += v;
                if v == 0.0 {
                    continue;
                }
                if cols.len() > start && *cols.last().unwrap() == j {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(j);
                    vals.push(v);
                }
            }
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::invalid(format!("row {i} sums to {sum}")));
            }
            row_ptr.push(cols.len());
        }
        Ok(UlamMatrix {
            grid,
            row_ptr,
            cols,
            vals,
            provenance: provenance.into(),
        })
    }

    pub fn identity(grid: Grid) -> Self {
        let m = grid.num_boxes();
        UlamMatrix {
            grid,
            row_ptr: (0..=m).collect(),
            cols: (0..m).collect(),
            vals: vec![1.0; m],
            provenance: "identity".into(),
        }
    }

    /// Permutation matrix sending box `i` to box `perm[i]`.
    pub fn permutation(grid: Grid, perm: &[usize]) -> Result<Self> {
        let rows = perm.iter().map(|&j| vec![(j, 1.0)]).collect();
        UlamMatrix::from_rows(grid, rows, "permutation")
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn num_boxes(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).map(|(_, v)| v).sum()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(k) => self.vals[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let m = self.num_boxes();
        (0..m)
            .map(|i| {
                let mut row = vec![0.0; m];
                for (j, v) in self.row(i) {
                    row[j] = v;
                }
                row
            })
            .collect()
    }

    /// Row vector times matrix.
    pub fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_boxes()];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (j, v) in self.row(i) {
                out[j] += xi * v;
            }
        }
        out
    }

    /// `self * other`; in the row-vector convention this discretizes
    /// "apply `self`'s map, then `other`'s".
    pub fn then(&self, other: &UlamMatrix) -> Result<UlamMatrix> {
        self.grid.check_same(&other.grid)?;
        let rows = (0..self.num_boxes())
            .map(|i| {
                let mut acc: Vec<(usize, f64)> = Vec::new();
                for (k, a) in self.row(i) {
                    for (j, b) in other.row(k) {
                        acc.push((j, a * b));
                    }
                }
                acc
            })
            .collect();
        UlamMatrix::from_rows(
            self.grid,
            rows,
            format!("({}) then ({})", self.provenance, other.provenance),
        )
    }

    /// Convex combination `sum_i w_i P_i`.
    pub fn mixture(parts: &[(f64, &UlamMatrix)], provenance: impl Into<String>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("mixture of zero matrices"))?
            .1;
        for (_, p) in parts {
            first.grid.check_same(&p.grid)?;
        }
        let rows = (0..first.num_boxes())
            .map(|i| {
                parts
                    .iter()
                    .flat_map(|(w, p)| p.row(i).map(move |(j, v)| (j, w * v)))
                    .collect()
            })
            .collect();
        UlamMatrix::from_rows(first.grid, rows, provenance)
    }

    /// `(I + P) / 2`.
    pub fn lazy(&self) -> UlamMatrix {
        let id = UlamMatrix::identity(self.grid);
        UlamMatrix::mixture(&[(0.5, &id), (0.5, self)], format!("lazy({})", self.provenance))
            .expect("lazy of a stochastic matrix is stochastic")
    }

    /// `row,col,value` coordinate list with a header.
    pub fn write_csv<W: io::Write>(&self, mut out: W) -> io::Result<()> {
        let mut s = String::from("row,col,value\n");
        for i in 0..self.num_boxes() {
            for (j, v) in self.row(i) {
                let _ = writeln!(s, "{i},{j},{v}");
            }
        }
        out.write_all(s.as_bytes())
    }
}

/// Relative offsets of the stratified jittered sample pattern shared by all
/// boxes. Sharing the pattern makes the matrices of affine maps exactly
/// doubly stochastic.
fn sample_offsets(space: PhaseSpace, per_box: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    if per_box < 16 {
        return Err(Error::usage(format!("sampling needs at least 16 points per box, got {per_box}")));
    }
    let mut rng = seeds::rng(seed, 0x5A3F);
    let mut jitter = |k: usize, s: usize| {
        let xi: f64 = rng.random();
        (k as f64 + 0.5 + 0.5 * (xi - 0.5)) / s as f64
    };
    match space {
        PhaseSpace::Circle => Ok((0..per_box).map(|k| (jitter(k, per_box), 0.5)).collect()),
        PhaseSpace::Torus2 => {
            let side = (per_box as f64).sqrt().round() as usize;
            if side * side != per_box {
                return Err(Error::usage(format!(
                    "torus sampling needs a square sample count, got {per_box}"
                )));
            }
            let mut out = Vec::with_capacity(per_box);
            for a in 0..side {
                for b in 0..side {
                    let u = jitter(a, side);
                    let v = jitter(b, side);
                    out.push((u, v));
                }
            }
            Ok(out)
        }
    }
}

fn exact_interval_row(map: &SmoothMap, grid: &Grid, i: usize) -> Result<Vec<(usize, f64)>> {
    let n = grid.n as f64;
    let lo = snap(map.lift(i as f64 / n)? * n);
    let hi = snap(map.lift((i + 1) as f64 / n)? * n);
    let len = hi - lo;
    if !(len > 0.0) {
        return Err(Error::NumericalFailure {
            what: format!("degenerate image of box {i}"),
            residual: len,
        });
    }
    let (first, last) = covered_range(lo, hi);
    Ok((first..last)
        .filter_map(|j| {
            let overlap = hi.min((j + 1) as f64) - lo.max(j as f64);
            (overlap > 0.0).then(|| (j.rem_euclid(grid.n as i64) as usize, overlap / len))
        })
        .collect())
}

fn sampling_row(
    map: &SmoothMap,
    grid: &Grid,
    offsets: &[(f64, f64)],
    i: usize,
) -> Result<Vec<(usize, f64)>> {
    let w = 1.0 / offsets.len() as f64;
    offsets
        .iter()
        .map(|&(u, v)| {
            let y = map.apply(grid.point_in_box(i, u, v))?;
            Ok((grid.box_of(&y), w))
        })
        .collect()
}

/// Ulam discretization of `map`'s pushforward on `grid`.
pub fn ulam_matrix(map: &SmoothMap, grid: &Grid, method: UlamMethod) -> Result<UlamMatrix> {
    if map.space() != grid.space {
        return Err(Error::usage(format!(
            "map on {} discretized on a {} grid",
            map.space(),
            grid.space
        )));
    }
    let m = grid.num_boxes();
    let label = format!("{:?}/{:?}", map.family, map.direction);
    let rows = match method {
        UlamMethod::ExactInterval => {
            if grid.space != PhaseSpace::Circle {
                return Err(Error::usage("exact-interval Ulam matrices need a circle map"));
            }
            (0..m)
                .into_par_iter()
                .map(|i| exact_interval_row(map, grid, i))
                .collect::<Result<Vec<_>>>()?
        }
        UlamMethod::Sampling { per_box, seed } => {
            let offsets = sample_offsets(grid.space, per_box, seed)?;
            (0..m)
                .into_par_iter()
                .map(|i| sampling_row(map, grid, &offsets, i))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let method_label = match method {
        UlamMethod::ExactInterval => "exact-interval".to_string(),
        UlamMethod::Sampling { per_box, .. } => format!("sampling({per_box})"),
    };
    UlamMatrix::from_rows(*grid, rows, format!("{label} {method_label}"))
}

/// One Ulam matrix per map of the system, in order.
pub fn ulam_family(ifs: &IFSystem, grid: &Grid, method: UlamMethod) -> Result<Vec<UlamMatrix>> {
    ifs.maps()
        .iter()
        .map(|m| ulam_matrix(m, grid, method))
        .collect()
}

/// `sum_i p_i Ulam(f_i)`: the discretized averaged Markov operator.
pub fn annealed_matrix(ifs: &IFSystem, grid: &Grid, method: UlamMethod) -> Result<UlamMatrix> {
    let mats = ulam_family(ifs, grid, method)?;
    annealed_from(ifs, &mats)
}

pub fn annealed_from(ifs: &IFSystem, mats: &[UlamMatrix]) -> Result<UlamMatrix> {
    let parts: Vec<(f64, &UlamMatrix)> = ifs.probs().iter().copied().zip(mats.iter()).collect();
    UlamMatrix::mixture(&parts, format!("annealed(k={})", ifs.k()))
}

/// `mu * P`.
pub fn pushforward(mu: &GridMeasure, p: &UlamMatrix) -> Result<GridMeasure> {
    mu.grid.check_same(&p.grid)?;
    GridMeasure::new(mu.grid, p.left_mul(&mu.weights))
}

/// Total variation distance `1/2 sum |mu_j - nu_j|`.
pub fn tv_distance(mu: &GridMeasure, nu: &GridMeasure) -> Result<f64> {
    mu.grid.check_same(&nu.grid)?;
    Ok(tv_raw(&mu.weights, &nu.weights))
}

pub(crate) fn tv_raw(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Boxes whose row mass into `set` is at least `theta`.
pub fn preimage_from_matrix(p: &UlamMatrix, set: &BoxSet, theta: f64) -> Result<BoxSet> {
    p.grid.check_same(&set.grid)?;
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::usage(format!("theta must lie in (0, 1], got {theta}")));
    }
    let mask = set.mask();
    let inside: Vec<bool> = (0..p.num_boxes())
        .map(|i| {
            let mass: f64 = p.row(i).filter(|(j, _)| mask[*j]).map(|(_, v)| v).sum();
            mass >= theta - 1e-12
        })
        .collect();
    Ok(BoxSet::from_mask(p.grid, &inside))
}

/// Discretized `f^{-1}(A)` with the grid's default Ulam method.
pub fn preimage_boxset(map: &SmoothMap, set: &BoxSet, grid: &Grid, theta: f64) -> Result<BoxSet> {
    let p = ulam_matrix(map, grid, UlamMethod::default_for(grid.space))?;
    preimage_from_matrix(&p, set, theta)
}

/// `sum_f mu(f^{-1}(A) delta A)` with precomputed matrices.
pub fn symmetric_difference_score_with(
    mats: &[UlamMatrix],
    mu: &GridMeasure,
    set: &BoxSet,
    theta: f64,
) -> Result<f64> {
    mu.grid.check_same(&set.grid)?;
    let mut score = 0.0;
    for p in mats {
        let pre = preimage_from_matrix(p, set, theta)?;
        score += mu.mass(&pre.symmetric_difference(set)?)?;
    }
    Ok(score)
}

/// `sum_f mu(f^{-1}(A) delta A)` over the maps of `ifs`, majority preimages.
pub fn symmetric_difference_score(ifs: &IFSystem, mu: &GridMeasure, set: &BoxSet) -> Result<f64> {
    let grid = mu.grid;
    let mats = ulam_family(ifs, &grid, UlamMethod::default_for(grid.space))?;
    symmetric_difference_score_with(&mats, mu, set, DEFAULT_THETA)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuasiInvarianceReport {
    pub holds: bool,
    /// Boxes receiving more than `eps` pushed mass while carrying none.
    pub violating_boxes: Vec<usize>,
    pub eps: f64,
}

pub fn quasi_invariance_with(mu: &GridMeasure, p: &UlamMatrix, eps: f64) -> Result<QuasiInvarianceReport> {
    if !(eps >= 0.0) {
        return Err(Error::usage("eps must be nonnegative"));
    }
    let pushed = pushforward(mu, p)?;
    let violating_boxes: Vec<usize> = (0..pushed.weights.len())
        .filter(|&j| pushed.weights[j] > eps && mu.weights[j] <= 0.0)
        .collect();
    Ok(QuasiInvarianceReport {
        holds: violating_boxes.is_empty(),
        violating_boxes,
        eps,
    })
}

/// Discrete absolute continuity of `map * mu` with respect to `mu`.
pub fn quasi_invariance_check(mu: &GridMeasure, map: &SmoothMap, eps: f64) -> Result<QuasiInvarianceReport> {
    let grid = mu.grid;
    let p = ulam_matrix(map, &grid, UlamMethod::default_for(grid.space))?;
    quasi_invariance_with(mu, &p, eps)
}
