//! Acceptance criteria, one test per criterion. Each test writes a single
//! `criterion N: PASS|FAIL ...` line straight to stderr so it shows up even
//! when test output is captured.

use std::fs;
use std::io::Write;
use std::panic;
use std::path::Path;
use std::time::{Duration, Instant};

use serde_json::Value;

use ergolab::{bundled, parse_scenario, run_scenario, RunOptions, Scenario};
use ergolab_core::grid::{pushforward, ulam_matrix, BoxSet, GridMeasure};
use ergolab_core::semigroup::ulam_word_image;
use ergolab_core::{Grid, IFSystem, MapFamily, PhaseSpace, Point, SmoothMap, UlamMethod, Word};

const PHI: f64 = 0.618_033_988_749_894_9;
const SQRT2M1: f64 = std::f64::consts::SQRT_2 - 1.0;

fn report(n: u32, title: &str, body: impl FnOnce() -> String + panic::UnwindSafe) {
    let outcome = panic::catch_unwind(body);
    let line = match &outcome {
        Ok(detail) => format!("criterion {n}: PASS  {title} ({detail})"),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            format!("criterion {n}: FAIL  {title}: {msg}")
        }
    };
    let _ = writeln!(std::io::stderr(), "{line}");
    if let Err(e) = outcome {
        panic::resume_unwind(e);
    }
}

fn scenario(name: &str, keep: &[&str]) -> Scenario {
    let mut s = parse_scenario(bundled(name).expect("bundled scenario")).unwrap();
    s.tasks.retain(|t| keep.contains(&t.kind()));
    s
}

fn run(s: Scenario, out: &Path) -> i32 {
    run_scenario(s, out, &RunOptions::default()).expect("scenario runs").1
}

fn load(out: &Path, stem: &str) -> Value {
    let v: Value = serde_json::from_str(&fs::read_to_string(out.join(format!("{stem}.json"))).unwrap()).unwrap();
    assert_eq!(v["status"], "ok", "{stem}: {}", v["error"]);
    v["result"].clone()
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or_else(|| panic!("not a number: {v}"))
}

#[test]
fn criterion_1_rotation_baseline() {
    report(1, "rotation baseline", || {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let s = scenario("rotation-baseline", &["stationary", "skew-sim"]);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let t0 = Instant::now();
        assert_eq!(pool.install(|| run(s, out)), 0);
        let elapsed = t0.elapsed();
        assert!(elapsed <= Duration::from_secs(30), "took {elapsed:?} single-threaded");

        let st = load(out, "stationary");
        let tv = f(&st["tv_to_uniform"]);
        assert!(tv <= 1e-6, "TV to uniform {tv:e}");

        let sim = load(out, "skew-sim");
        let erg = &sim["ergodicity"];
        assert_eq!(erg["params"]["n"], 1_000_000);
        let trials = erg["trials"].as_array().unwrap();
        assert_eq!(trials.len(), 32);
        let worst = trials.iter().map(|t| f(&t["averages"][0]).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.01, "max |cos average| {worst}");
        assert_eq!(erg["verdict"], "consistent with ergodic");
        format!("TV {tv:.1e}, max |avg| {worst:.1e}, {:.1}s on 1 thread", elapsed.as_secs_f64())
    });
}

#[test]
fn criterion_2_torus_end_to_end() {
    report(2, "torus end to end", || {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let s = scenario("theorem-b-torus", &["minimality", "components", "skew-sim", "okk"]);
        let t0 = Instant::now();
        assert_eq!(run(s, out), 0);
        let elapsed = t0.elapsed();
        assert!(elapsed <= Duration::from_secs(300), "took {elapsed:?}");

        let m = load(out, "minimality");
        assert_eq!(m["params"]["direction"], "inverse");
        assert_eq!(f(&m["params"]["eps"]), 0.05);
        assert_eq!(m["params"]["max_len"], 40);
        assert_eq!(m["verdict"], "minimal-up-to-budget");

        let c = load(out, "components");
        let comps = c["components"].as_array().unwrap();
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0]["boxes"].as_array().unwrap().len(), 64 * 64);

        let sim = load(out, "skew-sim");
        let erg = &sim["ergodicity"];
        assert_eq!(erg["params"]["n"], 100_000);
        assert_eq!(erg["params"]["trials"], 64);
        assert_eq!(erg["rows"][0]["observable"], "cos(2pi x)cos(2pi y)");
        let std = f(&erg["rows"][0]["std"]);
        assert!(std <= 0.02, "dispersion {std}");
        assert_eq!(erg["verdict"], "consistent with ergodic");

        let okk = load(out, "okk");
        assert_eq!(okk["outcome"], "agree");
        format!("1 component, dispersion {std:.4}, okk agree, {:.1}s", elapsed.as_secs_f64())
    });
}

#[test]
fn criterion_3_two_sink_negative_control() {
    report(3, "two-sink negative control", || {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let s = scenario("two-sink-control", &["components", "skew-sim", "okk"]);
        assert_eq!(run(s, out), 0);

        let c = load(out, "components");
        let n = c["components"].as_array().unwrap().len();
        assert!(n >= 2, "{n} components");
        let half = &c["scores"][0];
        assert_eq!(half["region"]["x"], serde_json::json!([0.0, 0.5]));
        let (score, mass) = (f(&half["score"]), f(&half["measure"]));
        assert!(score <= 2.0 / 128.0, "score {score}");
        assert!((0.4..=0.6).contains(&mass), "mu(A) = {mass}");

        let sim = load(out, "skew-sim");
        assert_eq!(sim["ergodicity"]["verdict"], "ergodicity rejected");

        let okk = load(out, "okk");
        assert_eq!(okk["outcome"], "agree");
        assert_eq!(okk["semigroup"]["ergodic"], false);
        assert_eq!(okk["skew"]["verdict"], "ergodicity rejected");
        format!("{n} components, score {score:.1e}, mu(A) {mass:.3}")
    });
}

#[test]
fn criterion_4_strong_transitivity_demo() {
    report(4, "finite cover and skew connecting word", || {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let s = scenario("two-rotations-cover", &["cover", "witness"]);
        assert_eq!(run(s, out), 0);

        let ifs = IFSystem::uniform(
            PhaseSpace::Circle,
            vec![MapFamily::Rotation { alpha: PHI }, MapFamily::Rotation { alpha: SQRT2M1 }],
        )
        .unwrap();
        let g = Grid::circle(128).unwrap();
        let u = BoxSet::arc(g, 0.0, 0.1).unwrap();

        let cover = load(out, "cover");
        let words: Vec<Word> = cover["words"]
            .as_array()
            .unwrap()
            .iter()
            .map(|w| serde_json::from_value(w.clone()).unwrap())
            .collect();
        assert!(!words.is_empty() && words.len() <= 15, "m = {}", words.len());
        // independent check through exact-interval Ulam matrices
        let mut union = BoxSet::empty(g);
        for w in &words {
            union = union.union(&ulam_word_image(&ifs, w, &u).unwrap()).unwrap();
        }
        assert_eq!(union.len(), 128);

        let wit = load(out, "witness");
        let skew = &wit["skew"];
        let rho: Vec<usize> = skew["rho"].as_array().unwrap().iter().map(|s| s.as_u64().unwrap() as usize).collect();
        let steps = skew["steps"].as_u64().unwrap() as usize;
        assert_eq!(rho[0], 1);
        assert_eq!(&rho[steps..], &[2, 2]);
        let start: Point = serde_json::from_value(skew["start"].clone()).unwrap();
        assert!(u.contains(g.box_of(&start)));
        let end = rho[..steps].iter().fold(start, |x, &s| ifs.maps()[s - 1].apply(x).unwrap());
        let v = BoxSet::arc(g, 0.5, 0.6).unwrap();
        assert!(v.contains(g.box_of(&end)), "endpoint {end:?} outside V");
        format!("m = {}, rho = {rho:?}, {steps} steps", words.len())
    });
}

#[test]
fn criterion_5_invariant_suite() {
    report(5, "invariant suite", || {
        let mut checks = 0usize;
        let circle_maps = [
            MapFamily::Rotation { alpha: PHI },
            MapFamily::Rotation { alpha: 0.25 },
            MapFamily::circle_diffeo(0.1, 0.3),
            MapFamily::circle_diffeo(0.37, -0.9),
            MapFamily::CircleDiffeo { a: 0.0, b: 0.2 * std::f64::consts::PI, freq: 2 },
        ];
        let torus_maps = [
            MapFamily::ToralAutomorphism { matrix: [[2, 1], [1, 1]] },
            MapFamily::ToralAutomorphism { matrix: [[1, 1], [0, 1]] },
            MapFamily::ToralTranslation { v: [PHI, SQRT2M1] },
        ];
        let mut cases: Vec<(MapFamily, Grid)> = Vec::new();
        for m in circle_maps {
            for n in [64, 100, 256] {
                cases.push((m, Grid::circle(n).unwrap()));
            }
        }
        for m in torus_maps {
            for n in [16, 32] {
                cases.push((m, Grid::torus(n).unwrap()));
            }
        }
        for (fam, g) in &cases {
            for dir in [false, true] {
                let mut map = SmoothMap::new(*fam).unwrap();
                if dir {
                    map = map.inverse();
                }
                let p = ulam_matrix(&map, g, UlamMethod::default_for(g.space)).unwrap();
                for i in 0..g.num_boxes() {
                    assert!((p.row_sum(i) - 1.0).abs() <= 1e-9, "row {i} of {fam:?}");
                    checks += 1;
                }
                let mut w: Vec<f64> = (0..g.num_boxes()).map(|i| ((i * 7919) % 13) as f64 + 0.5).collect();
                let t: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= t);
                let mu = GridMeasure::new(*g, w).unwrap();
                let pushed = pushforward(&mu, &p).unwrap();
                assert!((pushed.total() - 1.0).abs() <= 1e-9, "mass under {fam:?}");
                checks += 1;
            }
        }
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for fam in circle_maps.iter().chain(&torus_maps) {
            let m = SmoothMap::new(*fam).unwrap();
            for _ in 0..1000 {
                let x = match fam.space() {
                    PhaseSpace::Circle => Point::circle(rng.random()),
                    PhaseSpace::Torus2 => Point::torus(rng.random(), rng.random()),
                };
                let back = m.apply_inverse(m.apply(x).unwrap()).unwrap();
                assert!(back.distance(&x).unwrap() <= 1e-10, "{fam:?} at {x:?}");
                checks += 1;
            }
        }
        // grid-aligned rotations and translations are exact permutations
        for (fam, g) in [
            (MapFamily::Rotation { alpha: 5.0 / 64.0 }, Grid::circle(64).unwrap()),
            (MapFamily::Rotation { alpha: -0.25 }, Grid::circle(100).unwrap()),
            (MapFamily::ToralTranslation { v: [3.0 / 16.0, 0.5] }, Grid::torus(16).unwrap()),
        ] {
            let p = ulam_matrix(&SmoothMap::new(fam).unwrap(), &g, UlamMethod::default_for(g.space)).unwrap();
            let mut hit = vec![false; g.num_boxes()];
            for i in 0..g.num_boxes() {
                let row: Vec<(usize, f64)> = p.row(i).collect();
                assert_eq!(row.len(), 1, "row {i} of {fam:?}");
                assert_eq!(row[0].1, 1.0);
                assert!(!hit[row[0].0]);
                hit[row[0].0] = true;
                checks += 1;
            }
        }
        // byte-identical reports on re-run
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for name in ["two-rotations-cover", "two-sink-control"] {
            let s = scenario(name, &["stationary", "components", "cover", "witness", "minimality", "skew-sim", "okk"]);
            let (da, db) = (a.path().join(name), b.path().join(name));
            run(s.clone(), &da);
            run(s, &db);
            let mut files: Vec<_> = fs::read_dir(&da).unwrap().map(|e| e.unwrap().file_name()).collect();
            files.sort();
            for file in files {
                if file == "metadata.json" {
                    continue;
                }
                assert_eq!(fs::read(da.join(&file)).unwrap(), fs::read(db.join(&file)).unwrap(), "{file:?} differs");
                checks += 1;
            }
        }
        format!("{checks} checks")
    });
}

#[test]
fn criterion_6_robustness_sweep() {
    report(6, "robustness sweep", || {
        let dir = tempfile::tempdir().unwrap();
        let t0 = Instant::now();
        let torus = dir.path().join("torus");
        assert_eq!(run(scenario("theorem-b-torus", &["sweep"]), &torus), 0);
        let sink = dir.path().join("sink");
        assert_eq!(run(scenario("two-sink-control", &["sweep"]), &sink), 0);
        let elapsed = t0.elapsed();
        assert!(elapsed <= Duration::from_secs(1800), "took {elapsed:?}");

        let t = &load(&torus, "sweep")["sweep"];
        assert_eq!(f(&t["delta"]), 1e-3);
        assert_eq!(t["samples"], 20);
        assert_eq!(t["baseline"]["ergodicity"], "consistent with ergodic");
        assert_eq!(f(&t["survival"]["ergodicity"]), 1.0);

        let s = &load(&sink, "sweep")["sweep"];
        assert_eq!(f(&s["delta"]), 1e-3);
        assert_eq!(s["samples"], 20);
        assert_eq!(s["baseline"]["ergodicity"], "ergodicity rejected");
        assert_eq!(f(&s["survival"]["ergodicity"]), 1.0);
        format!("both survival fractions 1.0, {:.1}s", elapsed.as_secs_f64())
    });
}
