//! Task execution and report writing.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use ergolab_core::grid::{annealed_from, symmetric_difference_score_with, tv_distance, ulam_family, DEFAULT_THETA};
use ergolab_core::semigroup::{finite_cover, skew_transitivity_word, strong_transitivity_witness};
use ergolab_core::skew::{
    ergodicity_verdict, okk_equivalence_check, robustness_sweep, skew_orbit, Agreement,
};
use ergolab_core::stationary::{ergodic_components, open_positivity_check, stationary_from_matrix, summarize_components};
use ergolab_core::{
    Cylinder, ErgodicityParams, Error, GridMeasure, MinimalityParams, Observable, PipelineParams, Point,
    SymbolStream, UlamMatrix,
};

use crate::scenario::{ObservableSpec, Resolved, Scenario, StartMode, Task};
use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskStatus {
    Ok,
    BudgetExhausted,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskSummary {
    pub task: String,
    pub kind: String,
    pub status: TaskStatus,
    pub verdict: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub scenario: String,
    pub seed: u64,
    pub exit_code: i32,
    pub tasks: Vec<TaskSummary>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub summary: Option<Summary>,
    pub error: Option<String>,
    pub out_dir: PathBuf,
}

struct TaskOutput {
    result: Value,
    verdict: Value,
    side_files: Vec<(String, Vec<u8>)>,
}

fn observables(specs: &Option<Vec<ObservableSpec>>, r: &Resolved) -> Vec<Observable> {
    specs
        .as_ref()
        .expect("resolved")
        .iter()
        .map(|o| o.build(r.grid).expect("validated"))
        .collect()
}

fn csv<F>(write: F) -> Result<Vec<u8>, Error>
where
    F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    write(&mut buf).map_err(|e| Error::NumericalFailure {
        what: format!("csv: {e}"),
        residual: 0.0,
    })?;
    Ok(buf)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("reports serialize")
}

/// Annealed operator and its stationary measure, cached per tolerance.
struct Cache {
    mats: Option<Vec<UlamMatrix>>,
    annealed: Option<UlamMatrix>,
    stationary: HashMap<(u64, usize), ergolab_core::StationaryResult>,
}

impl Cache {
    fn annealed(&mut self, r: &Resolved) -> Result<(&[UlamMatrix], &UlamMatrix), Error> {
        if self.mats.is_none() {
            let mats = ulam_family(&r.ifs, &r.grid, r.ulam)?;
            self.annealed = Some(annealed_from(&r.ifs, &mats)?);
            self.mats = Some(mats);
        }
        Ok((self.mats.as_ref().unwrap(), self.annealed.as_ref().unwrap()))
    }

    fn stationary(&mut self, r: &Resolved, tol: f64, max_iter: usize) -> Result<ergolab_core::StationaryResult, Error> {
        let key = (tol.to_bits(), max_iter);
        if !self.stationary.contains_key(&key) {
            let (_, p) = self.annealed(r)?;
            let st = stationary_from_matrix(p, tol, max_iter)?;
            self.stationary.insert(key, st);
        }
        Ok(self.stationary[&key].clone())
    }
}

fn start_measure(r: &Resolved, mode: StartMode, cache: &mut Cache, tol: f64, max_iter: usize) -> Result<GridMeasure, Error> {
    let volume = match mode {
        StartMode::Volume => true,
        StartMode::Stationary => false,
        StartMode::Auto => r.ifs.volume_preserving(),
    };
    if volume {
        Ok(GridMeasure::uniform(r.grid))
    } else {
        Ok(cache.stationary(r, tol, max_iter)?.measure)
    }
}

fn minimality_params(task: &Task, r: &Resolved) -> MinimalityParams {
    let Task::Minimality { direction, eps, max_len, sample, mode, centers } = task else {
        unreachable!()
    };
    MinimalityParams {
        direction: *direction,
        eps: *eps,
        max_len: *max_len,
        sample: *sample,
        seed: r.scenario.seed,
        mode: *mode,
        centers: centers.then_some(r.grid),
    }
}

fn run_task(task: &Task, stem: &str, r: &Resolved, cache: &mut Cache) -> Result<TaskOutput, Error> {
    let seed = r.scenario.seed;
    let grid = r.grid;
    match task {
        Task::Stationary { tol, max_iter, positivity_ball } => {
            let st = cache.stationary(r, *tol, *max_iter)?;
            let tv_uniform = tv_distance(&st.measure, &GridMeasure::uniform(grid))?;
            let positivity = open_positivity_check(&st.measure, *positivity_ball)?;
            let file = format!("{stem}-measure.csv");
            let data = csv(|b| st.measure.write_csv(b))?;
            Ok(TaskOutput {
                verdict: json!({
                    "converged": st.converged,
                    "residual": st.residual,
                    "tv_to_uniform": tv_uniform,
                    "positive_on_open_sets": positivity.holds,
                }),
                result: json!({
                    "residual": st.residual,
                    "iterations": st.iterations,
                    "converged": st.converged,
                    "averaged": st.averaged,
                    "tv_to_uniform": tv_uniform,
                    "positivity": positivity,
                    "measure_csv": file,
                }),
                side_files: vec![(file, data)],
            })
        }
        Task::Components { tol, max_iter, support_tol, score_sets } => {
            let st = cache.stationary(r, *tol, *max_iter)?;
            let (mats, p) = cache.annealed(r)?;
            let dec = ergodic_components(p, &st.measure, *support_tol)?;
            let summaries = summarize_components(&dec, &st.measure)?;
            let mut scores = Vec::new();
            for region in score_sets {
                let set = region.boxes(grid).expect("validated");
                scores.push(json!({
                    "region": region,
                    "measure": st.measure.mass(&set)?,
                    "score": symmetric_difference_score_with(mats, &st.measure, &set, DEFAULT_THETA)?,
                    "threshold": 2.0 / grid.n as f64,
                }));
            }
            let file = format!("{stem}.csv");
            let data = csv(|b| {
                use std::io::Write;
                writeln!(b, "box,component")?;
                for (c, s) in summaries.iter().enumerate() {
                    for i in &s.boxes {
                        writeln!(b, "{i},{c}")?;
                    }
                }
                Ok(())
            })?;
            Ok(TaskOutput {
                verdict: json!({
                    "components": summaries.len(),
                    "single_full_component": summaries.len() == 1 && summaries[0].boxes.len() == grid.num_boxes(),
                    "scores": scores.iter().map(|s| &s["score"]).collect::<Vec<_>>(),
                }),
                result: json!({
                    "stationary_residual": st.residual,
                    "stationary_converged": st.converged,
                    "components": summaries,
                    "transient": dec.transient.indices(),
                    "scores": scores,
                    "components_csv": file,
                }),
                side_files: vec![(file, data)],
            })
        }
        Task::Minimality { .. } => {
            let params = minimality_params(task, r);
            let report = ergolab_core::semigroup::minimality_check(&r.ifs, &params)?;
            Ok(TaskOutput {
                verdict: json!({ "verdict": report.verdict, "worst_radius": report.worst_radius }),
                result: to_value(&report),
                side_files: vec![],
            })
        }
        Task::Cover { u, max_len, max_words } => {
            let set = u.boxes(grid).expect("validated");
            let cover = finite_cover(&r.ifs, &set, *max_len, *max_words)?;
            let file = format!("{stem}.csv");
            let data = csv(|b| {
                use std::io::Write;
                writeln!(b, "box,word")?;
                let mut first = vec![None; grid.num_boxes()];
                for (w, img) in cover.images.iter().enumerate() {
                    for &i in img.indices() {
                        first[i].get_or_insert(w);
                    }
                }
                for (i, w) in first.iter().enumerate() {
                    writeln!(b, "{i},{}", w.map_or(-1, |w| w as i64))?;
                }
                Ok(())
            })?;
            Ok(TaskOutput {
                verdict: json!({ "words": cover.words.len(), "covers_all": true }),
                result: json!({
                    "u": set.indices(),
                    "words": cover.words,
                    "images": cover.images.iter().map(|s| s.indices()).collect::<Vec<_>>(),
                    "candidates_examined": cover.candidates_examined,
                    "coverage_csv": file,
                }),
                side_files: vec![(file, data)],
            })
        }
        Task::Witness { u, w, max_len, cylinder, target_cylinder } => {
            let (u, w) = (u.boxes(grid).expect("validated"), w.boxes(grid).expect("validated"));
            let word = strong_transitivity_witness(&r.ifs, &u, &w, *max_len)?;
            let c = Cylinder::from_one_based(cylinder)?;
            let c2 = Cylinder::from_one_based(target_cylinder)?;
            let skew = skew_transitivity_word(&r.ifs, &c, &u, &c2, &w, *max_len)?;
            Ok(TaskOutput {
                verdict: json!({ "witness_length": word.len(), "rho_steps": skew.steps }),
                result: json!({ "witness": word, "skew": skew }),
                side_files: vec![],
            })
        }
        Task::SkewSim { n, trials, tol, burn_in, start, observables: specs, histogram, stationary_tol, max_iter } => {
            let params = ErgodicityParams {
                n: *n,
                trials: *trials,
                tol: *tol,
                seed,
                burn_in: *burn_in,
            };
            let mu = start_measure(r, *start, cache, *stationary_tol, *max_iter)?;
            let report = ergodicity_verdict(&r.ifs, &observables(specs, r), &mu, &params)?;
            let mut side_files = vec![(format!("{stem}-dispersion.csv"), csv(|b| report.write_csv(b))?)];
            let mut hist = Value::Null;
            if *histogram {
                let mut stream = SymbolStream::for_system(&r.ifs, seed)?;
                let x0 = match grid.space {
                    ergolab_core::PhaseSpace::Circle => Point::circle(0.0),
                    ergolab_core::PhaseSpace::Torus2 => Point::torus(0.0, 0.0),
                };
                let orbit = skew_orbit(&r.ifs, &mut stream, x0, *n, Some(grid))?;
                let visits = GridMeasure::from_counts(grid, orbit.histogram.as_ref().unwrap())?;
                let tv = tv_distance(&visits, &mu)?;
                let file = format!("{stem}-histogram.csv");
                side_files.push((file.clone(), csv(|b| visits.write_csv(b))?));
                hist = json!({ "start": x0, "steps": n, "tv_to_start_measure": tv, "csv": file });
            }
            Ok(TaskOutput {
                verdict: json!({
                    "verdict": report.verdict,
                    "max_std": report.rows.iter().map(|r| r.std).fold(0.0, f64::max),
                    "separating_observable": report.separating_observable,
                }),
                result: json!({ "ergodicity": report, "histogram": hist }),
                side_files,
            })
        }
        Task::Okk { n, trials, tol, burn_in, candidate_margin, observables: specs, stationary_tol, max_iter } => {
            let mut p = PipelineParams::new(grid);
            p.method = r.ulam;
            p.stationary_tol = *stationary_tol;
            p.max_iter = *max_iter;
            p.candidate_margin = *candidate_margin;
            p.observables = Some(observables(specs, r));
            p.ergodicity = ErgodicityParams {
                n: *n,
                trials: *trials,
                tol: *tol,
                seed,
                burn_in: *burn_in,
            };
            let report = okk_equivalence_check(&r.ifs, grid, &p)?;
            let mut side_files = vec![];
            if let Some(s) = &report.skew {
                side_files.push((format!("{stem}-dispersion.csv"), csv(|b| s.write_csv(b))?));
            }
            Ok(TaskOutput {
                verdict: json!({
                    "outcome": report.outcome,
                    "agree": report.outcome == Agreement::Agree,
                    "semigroup_ergodic": report.semigroup.ergodic,
                    "skew_verdict": report.skew.as_ref().map(|s| s.verdict),
                }),
                result: to_value(&report),
                side_files,
            })
        }
        Task::Sweep { delta, samples, n, trials, tol, observables: specs, minimality, stationary_tol, max_iter } => {
            let mut p = PipelineParams::new(grid);
            p.method = r.ulam;
            p.stationary_tol = *stationary_tol;
            p.max_iter = *max_iter;
            p.observables = Some(observables(specs, r));
            p.ergodicity = ErgodicityParams {
                n: *n,
                trials: *trials,
                tol: *tol,
                seed,
                burn_in: 0,
            };
            if *minimality {
                p.minimality = Some(minimality_params(&Task::default_minimality(), r));
            }
            let report = robustness_sweep(&r.ifs, grid, *delta, *samples, seed, &p)?;
            let file = format!("{stem}.csv");
            let data = csv(|b| report.write_csv(b))?;
            Ok(TaskOutput {
                verdict: json!({
                    "baseline_verdict": report.baseline.ergodicity,
                    "survival": report.survival,
                    "failures": report.failures,
                }),
                result: json!({ "sweep": report, "csv": file }),
                side_files: vec![(file, data)],
            })
        }
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).expect("reports serialize");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Validate and run a parsed scenario, writing reports into `out`.
pub fn run_scenario(scenario: Scenario, out: &Path, opts: &RunOptions) -> Result<(Summary, i32), CliError> {
    let mut resolved = scenario.resolve()?;
    if let Some(seed) = opts.seed {
        resolved = resolved.with_seed(seed);
    }
    fs::create_dir_all(out)?;
    let started = unix_now();
    let clock = Instant::now();
    let config = to_value(&resolved.scenario);

    let mut cache = Cache {
        mats: None,
        annealed: None,
        stationary: HashMap::new(),
    };
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut tasks = Vec::new();
    let mut exit_code = 0;
    let mut timings = Vec::new();
    for task in &resolved.scenario.tasks {
        let kind = task.kind();
        let count = seen.entry(kind).or_insert(0);
        *count += 1;
        let stem = if *count == 1 {
            kind.to_string()
        } else {
            format!("{kind}-{count}")
        };
        let t0 = Instant::now();
        let outcome = run_task(task, &stem, &resolved, &mut cache);
        timings.push(json!({ "task": stem, "seconds": t0.elapsed().as_secs_f64() }));
        let (status, result, verdict, error) = match outcome {
            Ok(o) => {
                for (name, data) in o.side_files {
                    fs::write(out.join(name), data)?;
                }
                (TaskStatus::Ok, o.result, o.verdict, None)
            }
            Err(e @ (Error::Budget(_) | Error::Exhausted { .. })) => {
                exit_code = exit_code.max(4);
                let coverage = match &e {
                    Error::Exhausted { coverage, .. } => json!({ "coverage": coverage }),
                    _ => Value::Null,
                };
                (TaskStatus::BudgetExhausted, coverage, Value::Null, Some(e.to_string()))
            }
            Err(e) => {
                if exit_code == 0 {
                    exit_code = 1;
                }
                (TaskStatus::Failed, Value::Null, Value::Null, Some(e.to_string()))
            }
        };
        write_json(
            &out.join(format!("{stem}.json")),
            &json!({
                "scenario": resolved.scenario.name,
                "task": stem,
                "kind": kind,
                "status": status,
                "error": error,
                "config": config,
                "task_config": task,
                "result": result,
            }),
        )?;
        tasks.push(TaskSummary {
            task: stem,
            kind: kind.to_string(),
            status,
            verdict,
            error,
        });
    }
    let summary = Summary {
        scenario: resolved.scenario.name.clone(),
        seed: resolved.scenario.seed,
        exit_code,
        tasks,
    };
    write_json(&out.join("summary.json"), &json!({ "summary": summary, "config": config }))?;
    write_json(
        &out.join("metadata.json"),
        &json!({
            "started_unix": started,
            "finished_unix": unix_now(),
            "elapsed_seconds": clock.elapsed().as_secs_f64(),
            "threads": opts.threads.unwrap_or_else(rayon::current_num_threads),
            "version": env!("CARGO_PKG_VERSION"),
            "task_seconds": timings,
        }),
    )?;
    Ok((summary, exit_code))
}

/// Load, validate and run a config given as a path or a bundled scenario
/// name. Never panics on bad input; errors map to exit codes.
pub fn run_config(source: &str, out: &Path, opts: &RunOptions) -> RunOutcome {
    let result = crate::load_source(source)
        .and_then(|text| crate::scenario::parse_scenario(&text))
        .and_then(|s| run_scenario(s, out, opts));
    match result {
        Ok((summary, exit_code)) => RunOutcome {
            exit_code,
            summary: Some(summary),
            error: None,
            out_dir: out.to_path_buf(),
        },
        Err(e) => RunOutcome {
            exit_code: e.exit_code(),
            summary: None,
            error: Some(e.to_string()),
            out_dir: out.to_path_buf(),
        },
    }
}
