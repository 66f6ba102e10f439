use ergolab_core::grid::{annealed_matrix, symmetric_difference_score, BoxSet};
use ergolab_core::semigroup::{minimality_check, strong_transitivity_witness, MinimalityVerdict};
use ergolab_core::skew::{okk_equivalence_check, robustness_sweep, Agreement};
use ergolab_core::stationary::{ergodic_components, open_positivity_check, stationary_measure};
use ergolab_core::{
    Direction, ErgodicityParams, Grid, IFSystem, MapFamily, MinimalityMode, MinimalityParams, PhaseSpace,
    PipelineParams, UlamMethod,
};

const PHI: f64 = 0.618_033_988_749_894_9;

/// Rotation mixed with a contracting circle map: minimal forward semigroup,
/// non-uniform stationary measure, still ergodic.
fn mixed() -> IFSystem {
    IFSystem::new(
        PhaseSpace::Circle,
        vec![MapFamily::Rotation { alpha: PHI }, MapFamily::circle_diffeo(0.1, 0.6)],
        vec![0.4, 0.6],
    )
    .unwrap()
}

#[test]
fn ergodic_mixed_system_end_to_end() {
    let ifs = mixed();
    let g = Grid::circle(128).unwrap();
    let st = stationary_measure(&ifs, &g, 1e-10, 100_000).unwrap();
    assert!(st.converged);
    assert!(open_positivity_check(&st.measure, 2).unwrap().holds);

    let p = annealed_matrix(&ifs, &g, UlamMethod::ExactInterval).unwrap();
    let dec = ergodic_components(&p, &st.measure, 1e-10).unwrap();
    assert_eq!(dec.components.len(), 1);

    let half = BoxSet::arc(g, 0.0, 0.5).unwrap();
    assert!(symmetric_difference_score(&ifs, &st.measure, &half).unwrap() > 2.0 / 128.0);

    let m = minimality_check(
        &ifs,
        &MinimalityParams {
            direction: Direction::Forward,
            eps: 0.02,
            max_len: 20,
            sample: 8,
            seed: 3,
            mode: MinimalityMode::Greedy,
            centers: Some(Grid::circle(32).unwrap()),
        },
    )
    .unwrap();
    assert_eq!(m.verdict, MinimalityVerdict::MinimalUpToBudget);

    let mut pp = PipelineParams::new(g);
    pp.ergodicity = ErgodicityParams { n: 100_000, trials: 16, tol: 0.02, seed: 1, burn_in: 0 };
    let okk = okk_equivalence_check(&ifs, g, &pp).unwrap();
    assert_eq!(okk.outcome, Agreement::Agree);
    assert!(okk.semigroup.ergodic);
}

#[test]
fn witnesses_exist_between_small_arcs() {
    let ifs = mixed();
    let g = Grid::circle(64).unwrap();
    for (a, b) in [(0.0, 0.3), (0.5, 0.9), (0.7, 0.1)] {
        let u = BoxSet::arc(g, a, a + 0.05).unwrap();
        let w = BoxSet::arc(g, b, b + 0.05).unwrap();
        let word = strong_transitivity_witness(&ifs, &u, &w, 20).unwrap();
        assert!(word.is_forward());
    }
}

#[test]
fn sweep_is_seed_deterministic() {
    let ifs = mixed();
    let g = Grid::circle(48).unwrap();
    let mut pp = PipelineParams::new(g);
    pp.ergodicity = ErgodicityParams { n: 5_000, trials: 8, tol: 0.05, seed: 2, burn_in: 0 };
    let a = robustness_sweep(&ifs, g, 1e-3, 4, 11, &pp).unwrap();
    let b = robustness_sweep(&ifs, g, 1e-3, 4, 11, &pp).unwrap();
    assert_eq!(a, b);
    let c = robustness_sweep(&ifs, g, 1e-3, 4, 12, &pp).unwrap();
    assert_ne!(a.runs[0].params, c.runs[0].params);
}
