//! Scenario files: a versioned TOML schema with every default spelled out
//! here, so the resolved form echoed into reports is complete.

use serde::{Deserialize, Serialize};

use ergolab_core::grid::BoxSet;
use ergolab_core::semigroup::MinimalityMode;
use ergolab_core::{Direction, Grid, IFSystem, MapFamily, Observable, PhaseSpace, UlamMethod};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub phase_space: PhaseSpace,
    /// Boxes per axis.
    pub grid: usize,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the uniform vector.
    #[serde(default)]
    pub probs: Option<Vec<f64>>,
    /// Defaults to exact intervals on the circle, 64 samples per box on the
    /// torus.
    #[serde(default)]
    pub ulam: Option<UlamMethod>,
    pub maps: Vec<MapFamily>,
    pub tasks: Vec<Task>,
}

/// Axis-aligned region: an arc `[x0, x1)` on the circle, a rectangle on
/// the torus (`y` defaults to the full axis).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub x: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<[f64; 2]>,
}

impl Region {
    pub fn boxes(&self, grid: Grid) -> Result<BoxSet, CliError> {
        let set = match (grid.space, self.y) {
            (PhaseSpace::Circle, None) => BoxSet::arc(grid, self.x[0], self.x[1]),
            (PhaseSpace::Circle, Some(_)) => {
                return Err(CliError::Invalid("circle regions take no y range".into()))
            }
            (PhaseSpace::Torus2, y) => BoxSet::rect(grid, self.x, y.unwrap_or([0.0, 1.0])),
        };
        set.map_err(|e| CliError::Invalid(e.to_string()))
    }

    fn label(&self) -> String {
        match self.y {
            None => format!("[{},{})", self.x[0], self.x[1]),
            Some(y) => format!("[{},{})x[{},{})", self.x[0], self.x[1], y[0], y[1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObservableSpec {
    Cos,
    Sin,
    CosCos,
    Indicator {
        x: [f64; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        y: Option<[f64; 2]>,
    },
}

impl ObservableSpec {
    pub fn defaults(space: PhaseSpace) -> Vec<ObservableSpec> {
        match space {
            PhaseSpace::Circle => vec![
                ObservableSpec::Cos,
                ObservableSpec::Sin,
                ObservableSpec::Indicator { x: [0.0, 0.125], y: None },
                ObservableSpec::Indicator { x: [0.0, 0.5], y: None },
            ],
            PhaseSpace::Torus2 => vec![
                ObservableSpec::CosCos,
                ObservableSpec::Cos,
                ObservableSpec::Indicator {
                    x: [0.0, 0.5],
                    y: Some([0.0, 0.5]),
                },
            ],
        }
    }

    pub fn build(&self, grid: Grid) -> Result<Observable, CliError> {
        Ok(match self {
            ObservableSpec::Cos => Observable::Cos,
            ObservableSpec::Sin => Observable::Sin,
            ObservableSpec::CosCos if grid.space == PhaseSpace::Torus2 => Observable::CosCos,
            ObservableSpec::CosCos => return Err(CliError::Invalid("cos-cos needs the torus".into())),
            ObservableSpec::Indicator { x, y } => {
                let r = Region { x: *x, y: *y };
                Observable::indicator(r.label(), r.boxes(grid)?)
            }
        })
    }
}

/// Starting distribution of Birkhoff trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartMode {
    /// vol when every map preserves volume, else the stationary measure.
    Auto,
    Stationary,
    Volume,
}

fn d_tol() -> f64 {
    ergolab_core::DEFAULT_FIXED_POINT_TOL
}
fn d_support() -> f64 {
    ergolab_core::DEFAULT_SUPPORT_TOL
}
fn d_max_iter() -> usize {
    100_000
}
fn d_one() -> usize {
    1
}
fn d_direction() -> Direction {
    Direction::Inverse
}
fn d_eps() -> f64 {
    0.05
}
fn d_min_len() -> usize {
    40
}
fn d_sample() -> usize {
    16
}
fn d_mode() -> MinimalityMode {
    MinimalityMode::Greedy
}
fn d_true() -> bool {
    true
}
fn d_cover_len() -> usize {
    10
}
fn d_words() -> usize {
    1024
}
fn d_witness_len() -> usize {
    64
}
fn d_n() -> usize {
    1_000_000
}
fn d_trials() -> usize {
    32
}
fn d_stat_tol() -> f64 {
    0.02
}
fn d_start() -> StartMode {
    StartMode::Auto
}
fn d_margin() -> f64 {
    0.05
}
fn d_samples() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Task {
    Stationary {
        #[serde(default = "d_tol")]
        tol: f64,
        #[serde(default = "d_max_iter")]
        max_iter: usize,
        /// Side (in boxes) of the smallest open ball that must carry mass.
        #[serde(default = "d_one")]
        positivity_ball: usize,
    },
    Components {
        #[serde(default = "d_tol")]
        tol: f64,
        #[serde(default = "d_max_iter")]
        max_iter: usize,
        #[serde(default = "d_support")]
        support_tol: f64,
        /// Sets whose invariance score is reported.
        #[serde(default)]
        score_sets: Vec<Region>,
    },
    Minimality {
        #[serde(default = "d_direction")]
        direction: Direction,
        #[serde(default = "d_eps")]
        eps: f64,
        #[serde(default = "d_min_len")]
        max_len: usize,
        #[serde(default = "d_sample")]
        sample: usize,
        #[serde(default = "d_mode")]
        mode: MinimalityMode,
        /// Also start from box centers when the grid is small.
        #[serde(default = "d_true")]
        centers: bool,
    },
    Cover {
        u: Region,
        #[serde(default = "d_cover_len")]
        max_len: usize,
        #[serde(default = "d_words")]
        max_words: usize,
    },
    Witness {
        u: Region,
        w: Region,
        #[serde(default = "d_witness_len")]
        max_len: usize,
        /// Cylinder prefix (1-based symbols) for the skew-product word.
        #[serde(default)]
        cylinder: Vec<i64>,
        #[serde(default)]
        target_cylinder: Vec<i64>,
    },
    SkewSim {
        #[serde(default = "d_n")]
        n: usize,
        #[serde(default = "d_trials")]
        trials: usize,
        #[serde(default = "d_stat_tol")]
        tol: f64,
        #[serde(default)]
        burn_in: usize,
        #[serde(default = "d_start")]
        start: StartMode,
        #[serde(default)]
        observables: Option<Vec<ObservableSpec>>,
        /// Also write the visit histogram of one orbit of length `n`.
        #[serde(default = "d_true")]
        histogram: bool,
        #[serde(default = "d_tol")]
        stationary_tol: f64,
        #[serde(default = "d_max_iter")]
        max_iter: usize,
    },
    Okk {
        #[serde(default = "d_n")]
        n: usize,
        #[serde(default = "d_trials")]
        trials: usize,
        #[serde(default = "d_stat_tol")]
        tol: f64,
        #[serde(default)]
        burn_in: usize,
        #[serde(default = "d_margin")]
        candidate_margin: f64,
        #[serde(default)]
        observables: Option<Vec<ObservableSpec>>,
        #[serde(default = "d_tol")]
        stationary_tol: f64,
        #[serde(default = "d_max_iter")]
        max_iter: usize,
    },
    Sweep {
        delta: f64,
        #[serde(default = "d_samples")]
        samples: usize,
        #[serde(default = "d_n")]
        n: usize,
        #[serde(default = "d_trials")]
        trials: usize,
        #[serde(default = "d_stat_tol")]
        tol: f64,
        #[serde(default)]
        observables: Option<Vec<ObservableSpec>>,
        /// Include the minimality check (task defaults) in every run.
        #[serde(default)]
        minimality: bool,
        #[serde(default = "d_tol")]
        stationary_tol: f64,
        #[serde(default = "d_max_iter")]
        max_iter: usize,
    },
}

impl Task {
    pub fn kind(&self) -> &'static str {
        match self {
            Task::Stationary { .. } => "stationary",
            Task::Components { .. } => "components",
            Task::Minimality { .. } => "minimality",
            Task::Cover { .. } => "cover",
            Task::Witness { .. } => "witness",
            Task::SkewSim { .. } => "skew-sim",
            Task::Okk { .. } => "okk",
            Task::Sweep { .. } => "sweep",
        }
    }

    pub(crate) fn default_minimality() -> Task {
        Task::Minimality {
            direction: d_direction(),
            eps: d_eps(),
            max_len: d_min_len(),
            sample: d_sample(),
            mode: d_mode(),
            centers: true,
        }
    }
}

/// Parse without validating invariants; syntax, type and unknown-key errors
/// are parse errors.
pub fn parse_scenario(text: &str) -> Result<Scenario, CliError> {
    toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("{name} must be positive, got {v}")))
    }
}

fn at_least(name: &str, v: usize, min: usize) -> Result<(), CliError> {
    if v >= min {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("{name} must be at least {min}, got {v}")))
    }
}

impl Scenario {
    /// Fill defaults and check every invariant before anything runs.
    pub fn resolve(mut self) -> Result<Resolved, CliError> {
        if self.schema != SCHEMA_VERSION {
            return Err(CliError::Parse(format!(
                "unsupported schema {} (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        let invalid = |e: ergolab_core::Error| CliError::Invalid(e.to_string());
        let grid = Grid::new(self.phase_space, self.grid).map_err(invalid)?;
        if self.maps.is_empty() {
            return Err(CliError::Invalid("at least one map is required".into()));
        }
        let k = self.maps.len();
        let probs = self.probs.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
        self.probs = Some(probs.clone());
        let ulam = self.ulam.unwrap_or_else(|| UlamMethod::default_for(self.phase_space));
        if ulam == UlamMethod::ExactInterval && self.phase_space != PhaseSpace::Circle {
            return Err(CliError::Invalid("exact-interval Ulam matrices need the circle".into()));
        }
        self.ulam = Some(ulam);
        let ifs = IFSystem::new(self.phase_space, self.maps.clone(), probs).map_err(invalid)?;

        for task in &mut self.tasks {
            match task {
                Task::Stationary { tol, max_iter, positivity_ball } => {
                    positive("tol", *tol)?;
                    at_least("max_iter", *max_iter, 1)?;
                    at_least("positivity_ball", *positivity_ball, 1)?;
                }
                Task::Components { tol, max_iter, support_tol, score_sets } => {
                    positive("tol", *tol)?;
                    positive("support_tol", *support_tol)?;
                    at_least("max_iter", *max_iter, 1)?;
                    for r in score_sets.iter() {
                        r.boxes(grid)?;
                    }
                }
                Task::Minimality { eps, max_len, sample, centers, .. } => {
                    positive("eps", *eps)?;
                    at_least("max_len", *max_len, 1)?;
                    if *sample == 0 && !*centers {
                        return Err(CliError::Invalid("minimality needs sample > 0 or centers".into()));
                    }
                }
                Task::Cover { u, max_len, max_words } => {
                    nonempty(u, grid, "u")?;
                    at_least("max_len", *max_len, 1)?;
                    at_least("max_words", *max_words, 1)?;
                }
                Task::Witness { u, w, max_len, cylinder, target_cylinder } => {
                    nonempty(u, grid, "u")?;
                    nonempty(w, grid, "w")?;
                    at_least("max_len", *max_len, 1)?;
                    for c in [&*cylinder, &*target_cylinder] {
                        ergolab_core::Cylinder::from_one_based(c)
                            .and_then(|c| c.check(k))
                            .map_err(invalid)?;
                    }
                }
                Task::SkewSim { n, trials, tol, observables, stationary_tol, max_iter, .. } => {
                    at_least("n", *n, 1)?;
                    at_least("trials", *trials, 8)?;
                    positive("tol", *tol)?;
                    positive("stationary_tol", *stationary_tol)?;
                    at_least("max_iter", *max_iter, 1)?;
                    resolve_observables(observables, grid)?;
                }
                Task::Okk { n, trials, tol, candidate_margin, observables, stationary_tol, max_iter, .. } => {
                    at_least("n", *n, 1)?;
                    at_least("trials", *trials, 8)?;
                    positive("tol", *tol)?;
                    if !(0.0..0.5).contains(candidate_margin) {
                        return Err(CliError::Invalid("candidate_margin must lie in [0, 0.5)".into()));
                    }
                    positive("stationary_tol", *stationary_tol)?;
                    at_least("max_iter", *max_iter, 1)?;
                    resolve_observables(observables, grid)?;
                }
                Task::Sweep { delta, samples, n, trials, tol, observables, stationary_tol, max_iter, .. } => {
                    if !(*delta >= 0.0 && delta.is_finite()) {
                        return Err(CliError::Invalid(format!("delta must be nonnegative, got {delta}")));
                    }
                    at_least("samples", *samples, 1)?;
                    at_least("n", *n, 1)?;
                    at_least("trials", *trials, 8)?;
                    positive("tol", *tol)?;
                    positive("stationary_tol", *stationary_tol)?;
                    at_least("max_iter", *max_iter, 1)?;
                    resolve_observables(observables, grid)?;
                }
            }
        }
        Ok(Resolved {
            scenario: self,
            grid,
            ifs,
            ulam,
        })
    }
}

fn nonempty(r: &Region, grid: Grid, name: &str) -> Result<(), CliError> {
    if r.boxes(grid)?.is_empty() {
        return Err(CliError::Invalid(format!("region {name} covers no boxes")));
    }
    Ok(())
}

fn resolve_observables(obs: &mut Option<Vec<ObservableSpec>>, grid: Grid) -> Result<(), CliError> {
    let list = obs.get_or_insert_with(|| ObservableSpec::defaults(grid.space));
    if list.is_empty() {
        return Err(CliError::Invalid("observable list is empty".into()));
    }
    for o in list.iter() {
        o.build(grid)?;
    }
    Ok(())
}

/// A validated scenario with defaults expanded.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub scenario: Scenario,
    pub grid: Grid,
    pub ifs: IFSystem,
    pub ulam: UlamMethod,
}

impl Resolved {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scenario.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema = 1
name = "t"
phase_space = "circle"
grid = 16
[[maps]]
family = "rotation"
alpha = 0.3
[[tasks]]
kind = "stationary"
"#;

    #[test]
    fn defaults_are_expanded() {
        let r = parse_scenario(MINIMAL).unwrap().resolve().unwrap();
        assert_eq!(r.scenario.probs, Some(vec![1.0]));
        assert_eq!(r.scenario.ulam, Some(UlamMethod::ExactInterval));
        assert_eq!(
            r.scenario.tasks[0],
            Task::Stationary {
                tol: 1e-8,
                max_iter: 100_000,
                positivity_ball: 1
            }
        );
        // the resolved form parses back to itself
        let text = toml::to_string(&r.scenario).unwrap();
        assert_eq!(parse_scenario(&text).unwrap(), r.scenario);
    }

    #[test]
    fn unknown_keys_are_parse_errors() {
        let bad = MINIMAL.replace("grid = 16", "grid = 16\ncolour = 3");
        assert!(matches!(parse_scenario(&bad), Err(CliError::Parse(_))));
        let bad = MINIMAL.replace("alpha = 0.3", "alpha = 0.3\nbeta = 1");
        assert!(matches!(parse_scenario(&bad), Err(CliError::Parse(_))));
        let bad = MINIMAL.replace("kind = \"stationary\"", "kind = \"stationary\"\nfoo = 1");
        assert!(matches!(parse_scenario(&bad), Err(CliError::Parse(_))));
    }

    #[test]
    fn invariant_violations_are_invalid() {
        let two = MINIMAL.replace(
            "[[tasks]]",
            "[[maps]]\nfamily = \"rotation\"\nalpha = 0.1\n[[tasks]]",
        );
        let bad = two.replace("grid = 16", "grid = 16\nprobs = [0.6, 0.6]");
        assert!(matches!(parse_scenario(&bad).unwrap().resolve(), Err(CliError::Invalid(_))));
        let bad = MINIMAL.replace("family = \"rotation\"\nalpha = 0.3", "family = \"circle-diffeo\"\na = 0\nb = 1.5");
        assert!(matches!(parse_scenario(&bad).unwrap().resolve(), Err(CliError::Invalid(_))));
        let bad = MINIMAL.replace("kind = \"stationary\"", "kind = \"skew-sim\"\ntrials = 4");
        assert!(matches!(parse_scenario(&bad).unwrap().resolve(), Err(CliError::Invalid(_))));
        let bad = MINIMAL.replace("kind = \"stationary\"", "kind = \"skew-sim\"\nobservables = [{kind = \"cos-cos\"}]");
        assert!(matches!(parse_scenario(&bad).unwrap().resolve(), Err(CliError::Invalid(_))));
    }
}
