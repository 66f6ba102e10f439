//! Stationary measures of the averaged operator, grid-level ergodic
//! components and positivity on open sets.

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{annealed_matrix, tv_raw, BoxSet, Grid, GridMeasure, UlamMatrix, UlamMethod};
use crate::phase::{IFSystem, PhaseSpace};
use crate::DEFAULT_SUPPORT_TOL;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryResult {
    pub measure: GridMeasure,
    /// `tv(mu, mu P)` of the returned measure.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Whether the returned measure is a raw iterate or a Cesàro window
    /// average.
    pub averaged: bool,
}

/// Stationary measure of the annealed Ulam operator of `ifs` on `grid`.
pub fn stationary_measure(
    ifs: &IFSystem,
    grid: &Grid,
    tol: f64,
    max_iter: usize,
) -> Result<StationaryResult> {
    let p = annealed_matrix(ifs, grid, UlamMethod::default_for(grid.space))?;
    stationary_from_matrix(&p, tol, max_iter)
}

/// Power iteration from the uniform measure.
pub fn stationary_from_matrix(p: &UlamMatrix, tol: f64, max_iter: usize) -> Result<StationaryResult> {
    stationary_from(p, &GridMeasure::uniform(p.grid()), tol, max_iter)
}

/// Power iteration from `start` with Cesàro acceleration.
///
/// Raw iterates are checked every step. In parallel the iterates are averaged
/// over doubling windows `[T, 2T)`; the window average is checked when each
/// window closes, which settles the periodic cases where raw iterates
/// oscillate. Whichever candidate first meets `tol` is returned; otherwise
/// the best candidate seen is returned flagged non-converged.
pub fn stationary_from(
    p: &UlamMatrix,
    start: &GridMeasure,
    tol: f64,
    max_iter: usize,
) -> Result<StationaryResult> {
    if !(tol > 0.0) {
        return Err(Error::usage(format!("tol must be positive, got {tol}")));
    }
    if start.grid() != p.grid() {
        return Err(Error::usage("start measure and operator live on different grids"));
    }
    let m = p.num_boxes();
    let mut x = start.weights().to_vec();
    let mut best: (Vec<f64>, f64, bool) = (x.clone(), f64::INFINITY, false);
    let mut window = vec![0.0; m];
    let mut window_len = 1usize;
    let mut window_count = 0usize;

    let finish = |w: Vec<f64>, residual: f64, iterations: usize, converged: bool, averaged: bool| {
        Ok(StationaryResult {
            measure: GridMeasure::normalized(p.grid(), w)?,
            residual,
            iterations,
            converged,
            averaged,
        })
    };

    for it in 0..max_iter {
        let y = p.left_mul(&x);
        let r = tv_raw(&x, &y);
        if r <= tol {
            return finish(x, r, it, true, false);
        }
        if r < best.1 {
            best = (x.clone(), r, false);
        }
        for (w, v) in window.iter_mut().zip(&y) {
            *w += v;
        }
        window_count += 1;
        if window_count == window_len {
            let avg: Vec<f64> = window.iter().map(|w| w / window_count as f64).collect();
            let ra = tv_raw(&avg, &p.left_mul(&avg));
            if ra <= tol {
                return finish(avg, ra, it + 1, true, true);
            }
            if ra < best.1 {
                best = (avg, ra, true);
            }
            window.iter_mut().for_each(|w| *w = 0.0);
            window_count = 0;
            window_len *= 2;
        }
        x = y;
    }
    let (w, r, averaged) = best;
    finish(w, r, max_iter, false, averaged)
}

/// Closed communicating classes of the thresholded support graph, plus the
/// support boxes that belong to none of them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentDecomposition {
    pub components: Vec<BoxSet>,
    /// Support boxes in non-closed classes (numerically transient mass).
    pub transient: BoxSet,
}

/// Candidate ergodic components: restrict `p` to boxes where `mu > tol`,
/// keep edges with `P[i][j] > tol`, and return the strongly connected classes
/// with no edge leaving them. Components are sorted by smallest box index.
pub fn ergodic_components(p: &UlamMatrix, mu: &GridMeasure, tol: f64) -> Result<ComponentDecomposition> {
    let grid = p.grid();
    if mu.grid() != grid {
        return Err(Error::usage("measure and operator live on different grids"));
    }
    let support = mu.support(tol);
    if support.is_empty() {
        return Err(Error::EmptySupport(format!("no box carries mass above {tol:e}")));
    }
    let m = grid.num_boxes();
    let mut node_of = vec![usize::MAX; m];
    let mut graph = DiGraph::<usize, ()>::with_capacity(support.len(), 0);
    for &i in support.indices() {
        node_of[i] = graph.add_node(i).index();
    }
    for &i in support.indices() {
        for (j, v) in p.row(i) {
            if v > tol && node_of[j] != usize::MAX {
                graph.add_edge(NodeIndex::new(node_of[i]), NodeIndex::new(node_of[j]), ());
            }
        }
    }
    let sccs = tarjan_scc(&graph);
    let mut class_of = vec![usize::MAX; m];
    for (c, scc) in sccs.iter().enumerate() {
        for &n in scc {
            class_of[graph[n]] = c;
        }
    }
    let mut closed = vec![true; sccs.len()];
    for &i in support.indices() {
        for (j, v) in p.row(i) {
            if v > tol && class_of[j] != usize::MAX && class_of[j] != class_of[i] {
                closed[class_of[i]] = false;
            }
        }
    }
    let mut components: Vec<BoxSet> = sccs
        .iter()
        .enumerate()
        .filter(|(c, _)| closed[*c])
        .map(|(_, scc)| BoxSet::from_indices(grid, scc.iter().map(|&n| graph[n]).collect()))
        .collect::<Result<_>>()?;
    components.sort_by_key(|c| c.indices()[0]);
    let transient: Vec<usize> = support
        .indices()
        .iter()
        .copied()
        .filter(|&i| !closed[class_of[i]])
        .collect();
    Ok(ComponentDecomposition {
        components,
        transient: BoxSet::from_indices(grid, transient)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NullRegion {
    /// First box of the run (circle) or lower-left box of the block (torus).
    pub start_box: usize,
    /// Run length (circle) or block side (torus), in boxes.
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositivityReport {
    pub holds: bool,
    pub min_ball_boxes: usize,
    /// Boxes with mass at or below this floor count as null.
    pub floor: f64,
    pub largest_null: Option<NullRegion>,
}

/// Every run (circle) or `s x s` block (torus, `s = min_ball_boxes`) of boxes
/// carries mass above the support floor.
pub fn open_positivity_check(mu: &GridMeasure, min_ball_boxes: usize) -> Result<PositivityReport> {
    open_positivity_check_with_floor(mu, min_ball_boxes, DEFAULT_SUPPORT_TOL)
}

pub fn open_positivity_check_with_floor(
    mu: &GridMeasure,
    min_ball_boxes: usize,
    floor: f64,
) -> Result<PositivityReport> {
    if min_ball_boxes == 0 {
        return Err(Error::usage("min_ball_boxes must be at least 1"));
    }
    let grid = mu.grid();
    let null: Vec<bool> = mu.weights().iter().map(|&w| w <= floor).collect();
    let largest_null = match grid.space {
        PhaseSpace::Circle => longest_circular_run(&null),
        PhaseSpace::Torus2 => largest_null_square(&null, grid.n),
    };
    let holds = largest_null.map_or(true, |r| r.size < min_ball_boxes);
    Ok(PositivityReport {
        holds,
        min_ball_boxes,
        floor,
        largest_null,
    })
}

fn longest_circular_run(null: &[bool]) -> Option<NullRegion> {
    let n = null.len();
    if null.iter().all(|&b| b) {
        return Some(NullRegion { start_box: 0, size: n });
    }
    let mut best: Option<NullRegion> = None;
    let mut run = 0usize;
    // two passes so runs crossing box 0 are measured in full
    for k in 0..2 * n {
        if null[k % n] {
            run += 1;
            if best.map_or(true, |b| run > b.size) {
                best = Some(NullRegion {
                    start_box: (k + 1 + n - run.min(n)) % n,
                    size: run.min(n),
                });
            }
        } else {
            run = 0;
        }
    }
    best
}

fn largest_null_square(null: &[bool], n: usize) -> Option<NullRegion> {
    // classic largest-square DP on the doubled (unwrapped) grid
    let m = 2 * n;
    let mut dp = vec![0usize; m * m];
    let mut best: Option<NullRegion> = None;
    for ix in 0..m {
        for iy in 0..m {
            if !null[(ix % n) * n + iy % n] {
                continue;
            }
            let v = if ix == 0 || iy == 0 {
                1
            } else {
                1 + dp[(ix - 1) * m + iy]
                    .min(dp[ix * m + iy - 1])
                    .min(dp[(ix - 1) * m + iy - 1])
            };
            let v = v.min(n);
            dp[ix * m + iy] = v;
            if best.map_or(true, |b| v > b.size) {
                let sx = (ix + 1 + n - v) % n;
                let sy = (iy + 1 + n - v) % n;
                best = Some(NullRegion {
                    start_box: sx * n + sy,
                    size: v,
                });
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpennessReport {
    pub size: usize,
    /// Members all of whose grid neighbors are members.
    pub interior: usize,
    pub boundary: usize,
    pub boundary_fraction: f64,
    /// Boundary size of one well-shaped region, in units of `N` boxes
    /// (2 endpoints of an arc on the circle, 4 sides on the torus).
    pub perimeter_bound: f64,
    /// `2 * perimeter_bound / N`.
    pub threshold: f64,
    pub grid_open: bool,
}

/// Interior versus boundary count of a component at grid resolution.
pub fn component_is_open_mod0(component: &BoxSet) -> Result<OpennessReport> {
    if component.is_empty() {
        return Err(Error::usage("openness of an empty component"));
    }
    let grid = component.grid();
    let mask = component.mask();
    let interior = component
        .indices()
        .iter()
        .filter(|&&i| grid.neighbors(i).iter().all(|&j| mask[j]))
        .count();
    let size = component.len();
    let boundary = size - interior;
    let perimeter_bound = match grid.space {
        PhaseSpace::Circle => 2.0,
        PhaseSpace::Torus2 => 4.0,
    };
    let threshold = 2.0 * perimeter_bound / grid.n as f64;
    let boundary_fraction = boundary as f64 / size as f64;
    Ok(OpennessReport {
        size,
        interior,
        boundary,
        boundary_fraction,
        perimeter_bound,
        threshold,
        grid_open: boundary_fraction <= threshold + 1e-12,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentSummary {
    pub boxes: Vec<usize>,
    pub measure: f64,
    pub openness: OpennessReport,
}

/// Per-component box lists, masses and openness reports.
pub fn summarize_components(
    decomposition: &ComponentDecomposition,
    mu: &GridMeasure,
) -> Result<Vec<ComponentSummary>> {
    decomposition
        .components
        .iter()
        .map(|c| {
            Ok(ComponentSummary {
                boxes: c.indices().to_vec(),
                measure: mu.mass(c)?,
                openness: component_is_open_mod0(c)?,
            })
        })
        .collect()
}
