//! Step skew product `(omega, x) -> (shift(omega), f_{omega_0}(x))` over the
//! one-sided Bernoulli shift, Birkhoff-average diagnostics, the equivalence
//! check between semigroup and skew-product ergodicity, and the parameter
//! robustness sweep.

use std::f64::consts::TAU;
use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::grid::{
    annealed_from, pushforward, quasi_invariance_with, symmetric_difference_score_with, tv_distance,
    ulam_family, BoxSet, Grid, GridMeasure, UlamMethod, DEFAULT_THETA,
};
use crate::phase::{IFSystem, PhaseSpace, Point};
use crate::seeds;
use crate::semigroup::{minimality_check, MinimalityParams, MinimalityVerdict};
use crate::stationary::{ergodic_components, stationary_from_matrix};
use crate::{DEFAULT_FIXED_POINT_TOL, DEFAULT_SUPPORT_TOL};

pub(crate) fn serialize_symbols<S: Serializer>(symbols: &[usize], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(symbols.iter().map(|&i| i + 1))
}

/// Cylinder set of one-sided sequences with a fixed prefix. Symbols are
/// 0-based internally and 1-based when serialized.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Cylinder {
    #[serde(serialize_with = "serialize_symbols")]
    symbols: Vec<usize>,
}

impl Cylinder {
    pub fn new(symbols: Vec<usize>) -> Self {
        Cylinder { symbols }
    }

    /// From 1-based symbols as written in configs.
    pub fn from_one_based(symbols: &[i64]) -> Result<Self> {
        symbols
            .iter()
            .map(|&s| {
                if s >= 1 {
                    Ok(s as usize - 1)
                } else {
                    Err(Error::usage(format!("cylinder symbol {s} is not in 1..k")))
                }
            })
            .collect::<Result<_>>()
            .map(Cylinder::new)
    }

    pub fn symbols(&self) -> &[usize] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    /// The empty cylinder is the whole sequence space.
    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn check(&self, k: usize) -> Result<()> {
        match self.symbols.iter().find(|&&s| s >= k) {
            Some(s) => Err(Error::usage(format!("cylinder symbol {} exceeds k={k}", s + 1))),
            None => Ok(()),
        }
    }

    /// Whether a sequence (given by a long enough prefix) lies in the cylinder.
    pub fn contains(&self, prefix: &[usize]) -> bool {
        prefix.len() >= self.symbols.len() && prefix[..self.symbols.len()] == self.symbols[..]
    }
}

/// I.i.d. symbols with a fixed probability vector (the Bernoulli measure).
#[derive(Debug, Clone)]
pub struct SymbolStream {
    rng: ChaCha8Rng,
    cumulative: Vec<f64>,
}

impl SymbolStream {
    pub fn new(probs: &[f64], seed: u64) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::usage("symbol probabilities must be nonnegative and nonempty"));
        }
        let total: f64 = probs.iter().sum();
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p / total;
                acc
            })
            .collect();
        Ok(SymbolStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            cumulative,
        })
    }

    pub fn for_system(ifs: &IFSystem, seed: u64) -> Result<Self> {
        SymbolStream::new(ifs.probs(), seed)
    }

    pub fn k(&self) -> usize {
        self.cumulative.len()
    }

    #[inline]
    pub fn next_symbol(&mut self) -> usize {
        let k = self.cumulative.len();
        if k == 1 {
            return 0;
        }
        let u: f64 = self.rng.random();
        self.cumulative[..k - 1]
            .iter()
            .position(|&c| u < c)
            .unwrap_or(k - 1)
    }
}

/// Bounded test functions for Birkhoff averages.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Observable {
    /// cos(2 pi x) of the first coordinate.
    Cos,
    /// sin(2 pi x) of the first coordinate.
    Sin,
    /// cos(2 pi x) cos(2 pi y); torus only.
    CosCos,
    Indicator { label: String, set: BoxSet },
}

impl Observable {
    pub fn indicator(label: impl Into<String>, set: BoxSet) -> Self {
        Observable::Indicator {
            label: label.into(),
            set,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Observable::Cos => "cos(2pi x)".into(),
            Observable::Sin => "sin(2pi x)".into(),
            Observable::CosCos => "cos(2pi x)cos(2pi y)".into(),
            Observable::Indicator { label, .. } => format!("1[{label}]"),
        }
    }

    fn check(&self, space: PhaseSpace) -> Result<()> {
        match self {
            Observable::CosCos if space != PhaseSpace::Torus2 => {
                Err(Error::usage("cos(2pi x)cos(2pi y) needs the torus"))
            }
            Observable::Indicator { set, .. } if set.grid().space != space => {
                Err(Error::usage("indicator set lives on another phase space"))
            }
            _ => Ok(()),
        }
    }

    /// Average against a grid measure, whose density is constant on boxes;
    /// exact for every observable in the menu.
    pub fn space_average(&self, mu: &GridMeasure) -> Result<f64> {
        let grid = mu.grid();
        let h = grid.width();
        let cos_avg = |i: usize| ((TAU * (i + 1) as f64 * h).sin() - (TAU * i as f64 * h).sin()) / (TAU * h);
        let sin_avg = |i: usize| ((TAU * i as f64 * h).cos() - (TAU * (i + 1) as f64 * h).cos()) / (TAU * h);
        let weights = mu.weights();
        let first = |i: usize| match grid.space {
            PhaseSpace::Circle => i,
            PhaseSpace::Torus2 => grid.box_coords(i).0,
        };
        let avg = match self {
            Observable::Cos => (0..weights.len()).map(|i| weights[i] * cos_avg(first(i))).sum(),
            Observable::Sin => (0..weights.len()).map(|i| weights[i] * sin_avg(first(i))).sum(),
            Observable::CosCos => {
                self.check(grid.space)?;
                (0..weights.len())
                    .map(|i| {
                        let (ix, iy) = grid.box_coords(i);
                        weights[i] * cos_avg(ix) * cos_avg(iy)
                    })
                    .sum()
            }
            Observable::Indicator { set, .. } => mu.mass(set)?,
        };
        Ok(avg)
    }

    fn evaluator(&self) -> Evaluator {
        match self {
            Observable::Cos => Evaluator::Cos,
            Observable::Sin => Evaluator::Sin,
            Observable::CosCos => Evaluator::CosCos,
            Observable::Indicator { set, .. } => Evaluator::Mask(set.grid(), set.mask()),
        }
    }
}

enum Evaluator {
    Cos,
    Sin,
    CosCos,
    Mask(Grid, Vec<bool>),
}

impl Evaluator {
    #[inline]
    fn eval(&self, p: &Point) -> f64 {
        let [x, y] = p.coords();
        match self {
            Evaluator::Cos => (TAU * x).cos(),
            Evaluator::Sin => (TAU * x).sin(),
            Evaluator::CosCos => (TAU * x).cos() * (TAU * y).cos(),
            Evaluator::Mask(g, m) => f64::from(u8::from(m[g.box_of(p)])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrbitSummary {
    pub final_point: Point,
    pub steps: usize,
    /// Visits of `x_0 .. x_{n-1}` per box, when a grid was given.
    pub histogram: Option<Vec<u64>>,
}

fn check_point(ifs: &IFSystem, x: &Point) -> Result<()> {
    if x.space() != ifs.space() {
        return Err(Error::usage(format!("point on {} but system on {}", x.space(), ifs.space())));
    }
    Ok(())
}

/// Iterate `x_{t+1} = f_{omega_t}(x_t)` for `n` steps.
pub fn skew_orbit(
    ifs: &IFSystem,
    stream: &mut SymbolStream,
    x: Point,
    n: usize,
    grid: Option<Grid>,
) -> Result<OrbitSummary> {
    check_point(ifs, &x)?;
    if n == 0 {
        return Err(Error::usage("orbit length must be at least 1"));
    }
    if stream.k() != ifs.k() {
        return Err(Error::usage("symbol stream and system disagree on k"));
    }
    if let Some(g) = grid {
        if g.space != ifs.space() {
            return Err(Error::usage("histogram grid lives on another phase space"));
        }
    }
    let mut histogram = grid.map(|g| vec![0u64; g.num_boxes()]);
    let mut x = x;
    for _ in 0..n {
        if let (Some(h), Some(g)) = (histogram.as_mut(), grid.as_ref()) {
            h[g.box_of(&x)] += 1;
        }
        x = ifs.step(stream.next_symbol(), x);
    }
    Ok(OrbitSummary {
        final_point: x,
        steps: n,
        histogram,
    })
}

/// `(1/n) sum_{t<n} obs(x_t)` along a skew-product orbit.
pub fn birkhoff_average(
    ifs: &IFSystem,
    obs: &Observable,
    x: Point,
    stream: &mut SymbolStream,
    n: usize,
) -> Result<f64> {
    Ok(birkhoff_averages(ifs, std::slice::from_ref(obs), x, stream, n, 0)?[0])
}

/// Several Birkhoff averages along one orbit, after `burn_in` discarded steps.
pub fn birkhoff_averages(
    ifs: &IFSystem,
    observables: &[Observable],
    x: Point,
    stream: &mut SymbolStream,
    n: usize,
    burn_in: usize,
) -> Result<Vec<f64>> {
    check_point(ifs, &x)?;
    if n == 0 {
        return Err(Error::usage("orbit length must be at least 1"));
    }
    if stream.k() != ifs.k() {
        return Err(Error::usage("symbol stream and system disagree on k"));
    }
    for o in observables {
        o.check(ifs.space())?;
    }
    let evals: Vec<Evaluator> = observables.iter().map(Observable::evaluator).collect();
    let mut x = x;
    for _ in 0..burn_in {
        x = ifs.step(stream.next_symbol(), x);
    }
    let mut sums = vec![0.0; evals.len()];
    for _ in 0..n {
        for (s, e) in sums.iter_mut().zip(&evals) {
            *s += e.eval(&x);
        }
        x = ifs.step(stream.next_symbol(), x);
    }
    Ok(sums.into_iter().map(|s| s / n as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErgodicityParams {
    pub n: usize,
    pub trials: usize,
    pub tol: f64,
    pub seed: u64,
    pub burn_in: usize,
}

impl Default for ErgodicityParams {
    fn default() -> Self {
        ErgodicityParams {
            n: 1_000_000,
            trials: 32,
            tol: 0.02,
            seed: 0,
            burn_in: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    #[serde(rename = "consistent with ergodic")]
    ConsistentWithErgodic,
    #[serde(rename = "ergodicity rejected")]
    Rejected,
}

impl Verdict {
    pub fn is_ergodic(self) -> bool {
        self == Verdict::ConsistentWithErgodic
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservableRow {
    pub observable: String,
    /// Space average against the starting measure.
    pub target: f64,
    pub mean: f64,
    /// Sample standard deviation across trials.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial: usize,
    pub start: Point,
    pub averages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErgodicityReport {
    pub verdict: Verdict,
    pub params: ErgodicityParams,
    pub rows: Vec<ObservableRow>,
    /// First observable that failed, when rejected.
    pub separating_observable: Option<String>,
    pub trials: Vec<TrialRow>,
}

impl ErgodicityReport {
    /// Dispersion table as `trial,observable,average`.
    pub fn write_csv<W: io::Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "trial,observable,average")?;
        for t in &self.trials {
            for (row, a) in self.rows.iter().zip(&t.averages) {
                writeln!(out, "{},{},{a:e}", t.trial, row.observable)?;
            }
        }
        Ok(())
    }
}

fn sample_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Dispersion test of Birkhoff averages across independent `(omega, x)`
/// draws with `x ~ start`. Statistical evidence only.
pub fn ergodicity_verdict(
    ifs: &IFSystem,
    observables: &[Observable],
    start: &GridMeasure,
    params: &ErgodicityParams,
) -> Result<ErgodicityReport> {
    if params.trials < 8 {
        return Err(Error::usage("ergodicity verdict needs at least 8 trials"));
    }
    if params.n == 0 || !(params.tol > 0.0) {
        return Err(Error::usage("n must be positive and tol positive"));
    }
    if observables.is_empty() {
        return Err(Error::usage("no observables given"));
    }
    if start.grid().space != ifs.space() {
        return Err(Error::usage("starting measure lives on another phase space"));
    }
    for o in observables {
        o.check(ifs.space())?;
    }
    let trials: Vec<TrialRow> = (0..params.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeds::rng(params.seed, 2 * t as u64);
            let x = start.sample(&mut rng);
            let mut stream = SymbolStream::for_system(ifs, seeds::derive(params.seed, 2 * t as u64 + 1))?;
            let averages = birkhoff_averages(ifs, observables, x, &mut stream, params.n, params.burn_in)?;
            Ok(TrialRow {
                trial: t,
                start: x,
                averages,
            })
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(observables.len());
    for (j, o) in observables.iter().enumerate() {
        let xs: Vec<f64> = trials.iter().map(|t| t.averages[j]).collect();
        let (mean, std) = sample_std(&xs);
        let target = o.space_average(start)?;
        rows.push(ObservableRow {
            observable: o.name(),
            target,
            mean,
            std,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            passes: std <= params.tol && (mean - target).abs() <= params.tol,
        });
    }
    let separating_observable = rows.iter().find(|r| !r.passes).map(|r| r.observable.clone());
    Ok(ErgodicityReport {
        verdict: if separating_observable.is_none() {
            Verdict::ConsistentWithErgodic
        } else {
            Verdict::Rejected
        },
        params: *params,
        rows,
        separating_observable,
        trials,
    })
}

/// Default observable battery for a phase space.
pub fn default_observables(grid: Grid) -> Result<Vec<Observable>> {
    Ok(match grid.space {
        PhaseSpace::Circle => vec![
            Observable::Cos,
            Observable::Sin,
            Observable::indicator("[0,1/8)", BoxSet::arc(grid, 0.0, 0.125)?),
            Observable::indicator("[0,1/2)", BoxSet::arc(grid, 0.0, 0.5)?),
        ],
        PhaseSpace::Torus2 => vec![
            Observable::CosCos,
            Observable::Cos,
            Observable::indicator("[0,1/2)^2", BoxSet::rect(grid, [0.0, 0.5], [0.0, 0.5])?),
        ],
    })
}

/// Settings shared by the equivalence check and the sweep pipeline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineParams {
    pub method: UlamMethod,
    pub stationary_tol: f64,
    pub max_iter: usize,
    pub support_tol: f64,
    /// Candidate invariant sets must have measure in `[m, 1-m]`.
    pub candidate_margin: f64,
    pub ergodicity: ErgodicityParams,
    /// `None` selects [`default_observables`].
    pub observables: Option<Vec<Observable>>,
    /// Start Birkhoff trials from vol instead of the stationary measure when
    /// every map preserves volume.
    pub volume_start: bool,
    pub minimality: Option<MinimalityParams>,
}

impl PipelineParams {
    pub fn new(grid: Grid) -> Self {
        PipelineParams {
            method: UlamMethod::default_for(grid.space),
            stationary_tol: DEFAULT_FIXED_POINT_TOL,
            max_iter: 100_000,
            support_tol: DEFAULT_SUPPORT_TOL,
            candidate_margin: 0.05,
            ergodicity: ErgodicityParams::default(),
            observables: None,
            volume_start: true,
            minimality: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateScore {
    pub boxes: usize,
    pub measure: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemigroupSide {
    pub ergodic: bool,
    pub stationary_residual: f64,
    pub stationary_converged: bool,
    pub components: usize,
    pub candidates_scored: usize,
    /// Scores at or below this count as invariant (2/N per axis).
    pub threshold: f64,
    /// Lowest-scoring candidate with measure inside the margin.
    pub best: Option<CandidateScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Agreement {
    Agree,
    Disagree,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OkkReport {
    pub outcome: Agreement,
    pub semigroup: SemigroupSide,
    pub skew: Option<ErgodicityReport>,
    pub note: Option<String>,
}

struct Discretized {
    mu: GridMeasure,
    residual: f64,
    converged: bool,
    components: Vec<BoxSet>,
    side: SemigroupSide,
    mats: Vec<crate::grid::UlamMatrix>,
}

fn semigroup_side(ifs: &IFSystem, grid: Grid, p: &PipelineParams) -> Result<Discretized> {
    let mats = ulam_family(ifs, &grid, p.method)?;
    let annealed = annealed_from(ifs, &mats)?;
    let st = stationary_from_matrix(&annealed, p.stationary_tol, p.max_iter)?;
    let dec = ergodic_components(&annealed, &st.measure, p.support_tol)?;
    let threshold = 2.0 / grid.n as f64;

    let mut candidates: Vec<BoxSet> = Vec::new();
    let mut prefix = BoxSet::empty(grid);
    for c in &dec.components {
        candidates.push(c.clone());
        candidates.push(c.complement());
        prefix = prefix.union(c)?;
        candidates.push(prefix.clone());
    }
    let mut best: Option<CandidateScore> = None;
    let mut scored = 0;
    for a in &candidates {
        let m = st.measure.mass(a)?;
        if m < p.candidate_margin || m > 1.0 - p.candidate_margin {
            continue;
        }
        scored += 1;
        let score = symmetric_difference_score_with(&mats, &st.measure, a, DEFAULT_THETA)?;
        if best.as_ref().map_or(true, |b| score < b.score) {
            best = Some(CandidateScore {
                boxes: a.len(),
                measure: m,
                score,
            });
        }
    }
    let ergodic = best.as_ref().map_or(true, |b| b.score > threshold);
    Ok(Discretized {
        side: SemigroupSide {
            ergodic,
            stationary_residual: st.residual,
            stationary_converged: st.converged,
            components: dec.components.len(),
            candidates_scored: scored,
            threshold,
            best,
        },
        mu: st.measure,
        residual: st.residual,
        converged: st.converged,
        components: dec.components,
        mats,
    })
}

fn start_measure(ifs: &IFSystem, d: &Discretized, p: &PipelineParams) -> GridMeasure {
    if p.volume_start && ifs.volume_preserving() {
        GridMeasure::uniform(d.mu.grid())
    } else {
        d.mu.clone()
    }
}

/// Compare ergodicity of the semigroup (invariant-set scores against the
/// stationary measure) with the Birkhoff verdict on the skew product.
pub fn okk_equivalence_check(ifs: &IFSystem, grid: Grid, p: &PipelineParams) -> Result<OkkReport> {
    if grid.space != ifs.space() {
        return Err(Error::usage("grid lives on another phase space"));
    }
    let d = semigroup_side(ifs, grid, p)?;
    if !d.converged {
        return Ok(OkkReport {
            outcome: Agreement::Inconclusive,
            semigroup: d.side,
            skew: None,
            note: Some(format!("stationary iteration stopped at residual {:e}", d.residual)),
        });
    }
    let observables = match &p.observables {
        Some(o) => o.clone(),
        None => default_observables(grid)?,
    };
    let skew = ergodicity_verdict(ifs, &observables, &start_measure(ifs, &d, p), &p.ergodicity)?;
    let outcome = if skew.verdict.is_ergodic() == d.side.ergodic {
        Agreement::Agree
    } else {
        Agreement::Disagree
    };
    Ok(OkkReport {
        outcome,
        semigroup: d.side,
        skew: Some(skew),
        note: None,
    })
}

/// One run of the full pipeline on a (possibly perturbed) system.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineOutcome {
    pub stationary_converged: bool,
    pub stationary_residual: f64,
    pub components: usize,
    pub single_full_component: bool,
    pub minimality: Option<MinimalityVerdict>,
    pub ergodicity: Verdict,
    pub separating_observable: Option<String>,
    /// TV distance between vol and its image under the annealed operator.
    pub vol_residual: f64,
    /// Discrete quasi-invariance of the stationary measure under every map.
    pub quasi_invariant: bool,
}

pub fn run_pipeline(ifs: &IFSystem, grid: Grid, p: &PipelineParams) -> Result<PipelineOutcome> {
    let d = semigroup_side(ifs, grid, p)?;
    let observables = match &p.observables {
        Some(o) => o.clone(),
        None => default_observables(grid)?,
    };
    let skew = ergodicity_verdict(ifs, &observables, &start_measure(ifs, &d, p), &p.ergodicity)?;
    let minimality = match &p.minimality {
        Some(mp) => Some(minimality_check(ifs, mp)?.verdict),
        None => None,
    };
    let annealed = annealed_from(ifs, &d.mats)?;
    let vol = GridMeasure::uniform(grid);
    let vol_residual = tv_distance(&pushforward(&vol, &annealed)?, &vol)?;
    let mut quasi_invariant = true;
    for m in &d.mats {
        quasi_invariant &= quasi_invariance_with(&d.mu, m, p.support_tol)?.holds;
    }
    Ok(PipelineOutcome {
        stationary_converged: d.converged,
        stationary_residual: d.residual,
        components: d.components.len(),
        single_full_component: d.components.len() == 1 && d.components[0].len() == grid.num_boxes(),
        minimality,
        ergodicity: skew.verdict,
        separating_observable: skew.separating_observable,
        vol_residual,
        quasi_invariant,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSample {
    pub index: usize,
    /// Continuous parameters of each map after perturbation.
    pub params: Vec<Vec<f64>>,
    pub outcome: Option<PipelineOutcome>,
    pub error: Option<String>,
}

/// Fraction of samples agreeing with the unperturbed system, per property.
/// Failed samples count as not surviving.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Survival {
    pub ergodicity: f64,
    pub components: f64,
    pub stationarity: f64,
    pub minimality: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub delta: f64,
    pub samples: usize,
    pub seed: u64,
    pub baseline: PipelineOutcome,
    pub survival: Survival,
    pub failures: usize,
    pub runs: Vec<SweepSample>,
}

impl SweepReport {
    pub fn write_csv<W: io::Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(
            out,
            "sample,status,ergodicity,components,minimality,stationary_residual,vol_residual,quasi_invariant"
        )?;
        for r in &self.runs {
            match &r.outcome {
                Some(o) => writeln!(
                    out,
                    "{},ok,{},{},{},{:e},{:e},{}",
                    r.index,
                    if o.ergodicity.is_ergodic() { "consistent" } else { "rejected" },
                    o.components,
                    o.minimality.map_or("-".to_string(), |m| format!("{m:?}")),
                    o.stationary_residual,
                    o.vol_residual,
                    o.quasi_invariant
                )?,
                None => writeln!(out, "{},failed,,,,,,", r.index)?,
            }
        }
        Ok(())
    }
}

/// Perturb every continuous parameter by `U[-delta, delta]` and rerun the
/// pipeline; the pipeline seeds are shared by all samples.
pub fn robustness_sweep(
    ifs: &IFSystem,
    grid: Grid,
    delta: f64,
    samples: usize,
    seed: u64,
    p: &PipelineParams,
) -> Result<SweepReport> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::usage("delta must be a nonnegative number"));
    }
    if samples == 0 {
        return Err(Error::usage("sweep needs at least one sample"));
    }
    let baseline = run_pipeline(ifs, grid, p)?;
    let families = ifs.families();
    let runs: Vec<SweepSample> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = seeds::rng(seed, 0x5357_0000 + s as u64);
            let params: Vec<Vec<f64>> = families
                .iter()
                .map(|f| {
                    f.continuous_params()
                        .iter()
                        .map(|&v| v + delta * (2.0 * rng.random::<f64>() - 1.0))
                        .collect()
                })
                .collect();
            let attempt = families
                .iter()
                .zip(&params)
                .map(|(f, v)| f.with_continuous_params(v))
                .collect::<Result<Vec<_>>>()
                .and_then(|fams| ifs.with_families(fams))
                .and_then(|sys| run_pipeline(&sys, grid, p));
            let (outcome, error) = match attempt {
                Ok(o) => (Some(o), None),
                Err(e) => (None, Some(e.to_string())),
            };
            SweepSample {
                index: s,
                params,
                outcome,
                error,
            }
        })
        .collect();

    let frac = |pred: &dyn Fn(&PipelineOutcome) -> bool| {
        runs.iter().filter(|r| r.outcome.as_ref().is_some_and(pred)).count() as f64 / samples as f64
    };
    let survival = Survival {
        ergodicity: frac(&|o| o.ergodicity == baseline.ergodicity),
        components: frac(&|o| o.components == baseline.components),
        stationarity: frac(&|o| o.stationary_converged == baseline.stationary_converged),
        minimality: baseline.minimality.map(|b| frac(&|o| o.minimality == Some(b))),
    };
    Ok(SweepReport {
        delta,
        samples,
        seed,
        failures: runs.iter().filter(|r| r.error.is_some()).count(),
        baseline,
        survival,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::{MapFamily, Direction};
    use crate::semigroup::MinimalityMode;

    const PHI: f64 = 0.618_033_988_749_894_9;
    const SQRT2M1: f64 = std::f64::consts::SQRT_2 - 1.0;

    fn circle(fams: Vec<MapFamily>) -> IFSystem {
        IFSystem::uniform(PhaseSpace::Circle, fams).unwrap()
    }

    fn two_sink() -> MapFamily {
        MapFamily::CircleDiffeo {
            a: 0.0,
            b: 0.2 * std::f64::consts::PI,
            freq: 2,
        }
    }

    fn cat_plus_translation() -> IFSystem {
        IFSystem::uniform(
            PhaseSpace::Torus2,
            vec![
                MapFamily::ToralAutomorphism { matrix: [[2, 1], [1, 1]] },
                MapFamily::ToralTranslation { v: [PHI, SQRT2M1] },
            ],
        )
        .unwrap()
    }

    fn quick(n: usize, trials: usize) -> ErgodicityParams {
        ErgodicityParams {
            n,
            trials,
            tol: 0.02,
            seed: 7,
            burn_in: 0,
        }
    }

    #[test]
    fn symbol_frequencies_match_probabilities() {
        let probs = [0.2, 0.5, 0.3];
        let mut s = SymbolStream::new(&probs, 11).unwrap();
        let n = 1_000_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[s.next_symbol()] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            let bound = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() <= bound, "{c} vs {p}");
        }
    }

    #[test]
    fn cylinder_membership_and_serialization() {
        let c = Cylinder::from_one_based(&[1, 2]).unwrap();
        assert!(c.contains(&[0, 1, 0]));
        assert!(!c.contains(&[0]));
        assert!(Cylinder::new(vec![]).contains(&[]));
        assert!(c.check(2).is_ok() && c.check(1).is_err());
        assert!(Cylinder::from_one_based(&[0]).is_err());
        assert_eq!(serde_json::to_string(&c).unwrap(), r#"{"symbols":[1,2]}"#);
    }

    #[test]
    fn orbit_examples() {
        let quarter = circle(vec![MapFamily::Rotation { alpha: 0.25 }]);
        let mut s = SymbolStream::for_system(&quarter, 0).unwrap();
        let o = skew_orbit(&quarter, &mut s, Point::circle(0.0), 4, None).unwrap();
        assert!(o.final_point.distance(&Point::circle(0.0)).unwrap() < 1e-15);

        let id = circle(vec![MapFamily::Rotation { alpha: 0.0 }]);
        let g = Grid::circle(10).unwrap();
        let o = skew_orbit(&id, &mut s, Point::circle(0.37), 50, Some(g)).unwrap();
        assert_eq!(o.final_point, Point::circle(0.37));
        assert_eq!(o.histogram.unwrap()[3], 50);
        assert!(skew_orbit(&id, &mut s, Point::torus(0.1, 0.1), 5, None).is_err());
    }

    #[test]
    fn two_rotation_histogram_is_nearly_uniform() {
        let ifs = circle(vec![MapFamily::Rotation { alpha: PHI }, MapFamily::Rotation { alpha: SQRT2M1 }]);
        let g = Grid::circle(128).unwrap();
        let mut s = SymbolStream::for_system(&ifs, 3).unwrap();
        let o = skew_orbit(&ifs, &mut s, Point::circle(0.1), 1_000_000, Some(g)).unwrap();
        let hist = GridMeasure::from_counts(g, &o.histogram.unwrap()).unwrap();
        let oracle = crate::stationary::stationary_measure(&ifs, &g, 1e-10, 10_000).unwrap();
        assert!(tv_distance(&hist, &oracle.measure).unwrap() <= 0.02);
        assert!(tv_distance(&hist, &GridMeasure::uniform(g)).unwrap() <= 0.02);
    }

    #[test]
    fn birkhoff_examples() {
        let g = Grid::circle(64).unwrap();
        let rot = circle(vec![MapFamily::Rotation { alpha: PHI }]);
        let mut s = SymbolStream::for_system(&rot, 0).unwrap();
        let all = Observable::indicator("all", BoxSet::all(g));
        assert_eq!(birkhoff_average(&rot, &all, Point::circle(0.3), &mut s, 1000).unwrap(), 1.0);
        let c = birkhoff_average(&rot, &Observable::Cos, Point::circle(0.3), &mut s, 1_000_000).unwrap();
        assert!(c.abs() <= 0.01);

        let sink = circle(vec![two_sink()]);
        let left = Observable::indicator("[0,1/2)", BoxSet::arc(g, 0.0, 0.5).unwrap());
        let mut last = 0.0;
        for n in [10, 100, 10_000] {
            let a = birkhoff_average(&sink, &left, Point::circle(0.2), &mut s, n).unwrap();
            assert!(a >= last);
            last = a;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn space_averages_are_exact() {
        let g = Grid::torus(16).unwrap();
        let vol = GridMeasure::uniform(g);
        for o in [Observable::Cos, Observable::Sin, Observable::CosCos] {
            assert!(o.space_average(&vol).unwrap().abs() < 1e-14);
        }
        // point mass on one circle box: average of cos over [0, 1/4)
        let c = Grid::circle(4).unwrap();
        let m = GridMeasure::point_mass(c, 0).unwrap();
        let exact = 1.0 / (TAU * 0.25);
        assert!((Observable::Cos.space_average(&m).unwrap() - exact).abs() < 1e-14);
        assert!(Observable::CosCos.space_average(&GridMeasure::uniform(c)).is_err());
    }

    #[test]
    fn verdict_examples() {
        let g = Grid::circle(128).unwrap();
        let vol = GridMeasure::uniform(g);
        let rot = circle(vec![MapFamily::Rotation { alpha: PHI }]);
        let r = ergodicity_verdict(&rot, &[Observable::Cos], &vol, &quick(1_000_000, 32)).unwrap();
        assert_eq!(r.verdict, Verdict::ConsistentWithErgodic);
        assert!(r.trials.iter().all(|t| t.averages[0].abs() <= 0.01));

        let quarter = circle(vec![MapFamily::Rotation { alpha: 0.25 }]);
        let eighth = Observable::indicator("[0,1/8)", BoxSet::arc(g, 0.0, 0.125).unwrap());
        let r = ergodicity_verdict(&quarter, &[eighth], &vol, &quick(10_000, 32)).unwrap();
        assert_eq!(r.verdict, Verdict::Rejected);
        // 4-periodic orbits: each average is 0 or 1/4
        assert!(r.trials.iter().all(|t| t.averages[0] == 0.0 || t.averages[0] == 0.25));
        assert_eq!(r.separating_observable.as_deref(), Some("1[[0,1/8)]"));

        let sink = circle(vec![two_sink()]);
        let mu = crate::stationary::stationary_measure(&sink, &g, 1e-10, 100_000).unwrap().measure;
        let left = Observable::indicator("[0,1/2)", BoxSet::arc(g, 0.0, 0.5).unwrap());
        let r = ergodicity_verdict(&sink, &[left], &mu, &quick(10_000, 32)).unwrap();
        assert_eq!(r.verdict, Verdict::Rejected);
        assert!(r.trials.iter().all(|t| t.averages[0] < 0.05 || t.averages[0] > 0.95));
        assert!(ergodicity_verdict(&sink, &[Observable::Cos], &mu, &quick(100, 4)).is_err());
    }

    #[test]
    fn verdicts_are_deterministic_and_csv_is_stable() {
        let g = Grid::circle(32).unwrap();
        let ifs = circle(vec![MapFamily::Rotation { alpha: PHI }, MapFamily::circle_diffeo(0.1, 0.3)]);
        let mu = crate::stationary::stationary_measure(&ifs, &g, 1e-10, 100_000).unwrap().measure;
        let obs = default_observables(g).unwrap();
        let a = ergodicity_verdict(&ifs, &obs, &mu, &quick(5_000, 8)).unwrap();
        let b = ergodicity_verdict(&ifs, &obs, &mu, &quick(5_000, 8)).unwrap();
        assert_eq!(a, b);
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(ca.split(|&c| c == b'\n').count(), 1 + 8 * 4 + 1);
    }

    #[test]
    fn single_map_skew_matches_plain_birkhoff() {
        let g = Grid::circle(64).unwrap();
        let rot = circle(vec![MapFamily::Rotation { alpha: PHI }]);
        let f = rot.maps()[0];
        let vol = GridMeasure::uniform(g);
        let p = quick(20_000, 8);
        let r = ergodicity_verdict(&rot, &[Observable::Cos], &vol, &p).unwrap();
        for t in &r.trials {
            let mut x = t.start;
            let mut sum = 0.0;
            for _ in 0..p.n {
                sum += (TAU * x.coords()[0]).cos();
                x = f.apply(x).unwrap();
            }
            assert!((sum / p.n as f64 - t.averages[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn burn_in_does_not_shift_statistics_from_vol() {
        let g = Grid::torus(32).unwrap();
        let ifs = cat_plus_translation();
        let vol = GridMeasure::uniform(g);
        let obs = [Observable::CosCos];
        let mut p = quick(20_000, 16);
        let a = ergodicity_verdict(&ifs, &obs, &vol, &p).unwrap();
        p.burn_in = 5_000;
        let b = ergodicity_verdict(&ifs, &obs, &vol, &p).unwrap();
        let se = (a.rows[0].std.powi(2) / 16.0 + b.rows[0].std.powi(2) / 16.0).sqrt();
        assert!((a.rows[0].mean - b.rows[0].mean).abs() <= 3.0 * se.max(1e-4));
    }

    #[test]
    fn indicator_averages_stay_in_unit_interval() {
        let g = Grid::circle(64).unwrap();
        let ifs = circle(vec![MapFamily::circle_diffeo(0.2, 0.6), MapFamily::Rotation { alpha: SQRT2M1 }]);
        let obs = default_observables(g).unwrap();
        let mu = crate::stationary::stationary_measure(&ifs, &g, 1e-10, 100_000).unwrap();
        let r = ergodicity_verdict(&ifs, &obs, &mu.measure, &quick(50_000, 8)).unwrap();
        for t in &r.trials {
            assert!(t.averages[2..].iter().all(|a| (0.0..=1.0).contains(a)));
        }
        if r.verdict.is_ergodic() {
            for row in &r.rows[2..] {
                assert!((row.mean - row.target).abs() <= 0.02);
            }
        }
    }

    fn pipeline(grid: Grid, n: usize, trials: usize) -> PipelineParams {
        let mut p = PipelineParams::new(grid);
        p.ergodicity = quick(n, trials);
        p
    }

    #[test]
    fn okk_examples_agree() {
        let g = Grid::circle(128).unwrap();
        let rot = circle(vec![MapFamily::Rotation { alpha: PHI }]);
        let r = okk_equivalence_check(&rot, g, &pipeline(g, 100_000, 16)).unwrap();
        assert_eq!(r.outcome, Agreement::Agree);
        assert!(r.semigroup.ergodic);

        let sink = circle(vec![two_sink()]);
        let r = okk_equivalence_check(&sink, g, &pipeline(g, 10_000, 16)).unwrap();
        assert_eq!(r.outcome, Agreement::Agree);
        assert!(!r.semigroup.ergodic);
        assert!(r.semigroup.best.unwrap().score <= 2.0 / 128.0);
        let mu = crate::stationary::stationary_measure(&sink, &g, 1e-8, 100_000).unwrap().measure;
        let half = BoxSet::arc(g, 0.0, 0.5).unwrap();
        assert!((0.4..=0.6).contains(&mu.mass(&half).unwrap()));
        assert!(crate::grid::symmetric_difference_score(&sink, &mu, &half).unwrap() <= 2.0 / 128.0);

        let quarter = circle(vec![MapFamily::Rotation { alpha: 0.25 }]);
        let r = okk_equivalence_check(&quarter, g, &pipeline(g, 10_000, 16)).unwrap();
        assert_eq!(r.outcome, Agreement::Agree);
        assert!(!r.semigroup.ergodic);
        assert_eq!(r.semigroup.components, 32);
    }

    #[test]
    fn sweep_with_zero_delta_repeats_baseline() {
        let g = Grid::circle(64).unwrap();
        let sink = circle(vec![two_sink()]);
        let r = robustness_sweep(&sink, g, 0.0, 3, 5, &pipeline(g, 5_000, 8)).unwrap();
        assert_eq!(r.survival.ergodicity, 1.0);
        assert_eq!(r.survival.components, 1.0);
        assert!(r.runs.iter().all(|s| s.outcome.as_ref() == Some(&r.baseline)));
        assert_eq!(r.baseline.ergodicity, Verdict::Rejected);
    }

    #[test]
    fn sweep_records_failures_without_aborting() {
        let g = Grid::circle(32).unwrap();
        // b = 0.9995 leaves the diffeomorphism range for some perturbations
        let ifs = circle(vec![MapFamily::circle_diffeo(0.1, 0.9995)]);
        let r = robustness_sweep(&ifs, g, 1e-2, 8, 1, &pipeline(g, 2_000, 8)).unwrap();
        assert!(r.failures > 0);
        assert_eq!(r.runs.len(), 8);
        assert!(r.survival.ergodicity < 1.0);
    }

    #[test]
    fn torus_sweep_keeps_ergodicity_and_vol() {
        let g = Grid::torus(32).unwrap();
        let mut p = pipeline(g, 20_000, 16);
        p.minimality = Some(MinimalityParams {
            direction: Direction::Inverse,
            eps: 0.05,
            max_len: 40,
            sample: 4,
            seed: 0,
            mode: MinimalityMode::Greedy,
            centers: None,
        });
        let r = robustness_sweep(&cat_plus_translation(), g, 1e-3, 4, 9, &p).unwrap();
        assert_eq!(r.baseline.ergodicity, Verdict::ConsistentWithErgodic);
        assert!(r.baseline.single_full_component);
        assert_eq!(r.survival.ergodicity, 1.0);
        assert_eq!(r.survival.minimality, Some(1.0));
        for s in &r.runs {
            let o = s.outcome.as_ref().unwrap();
            assert!(o.vol_residual < 1e-12);
            assert!(o.quasi_invariant);
        }
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("sample,status"));
    }
}
