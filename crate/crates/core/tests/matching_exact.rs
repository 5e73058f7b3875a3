#[path = "support/oracles.rs"]
mod oracles;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topicgrowth::matching::{build_pools, solve_dom, MatchConfig, TreatedUnit};
use topicgrowth::Error;

#[test]
fn exact_solver_matches_enumeration() {
    let mut feasible = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..80u64 {
        let n_treated = rng.random_range(1..=3);
        let pool_size = rng.random_range(5..=8);
        let replacement = rng.random_bool(0.7);
        let panel = oracles::small_panel(1000 + case, n_treated, 9);
        let config = MatchConfig {
            pool_size,
            replacement,
            seed: case,
            ..MatchConfig::default()
        };
        let units: Vec<TreatedUnit> = panel.events().iter().map(TreatedUnit::from_event).collect();
        let pools = build_pools(&panel, &units, &config, &HashSet::new()).unwrap().pools;
        let oracle = oracles::exhaustive_match(&panel, &pools, &config);
        match (solve_dom(&panel, &pools, &config), oracle) {
            (Ok(result), Some(best)) => {
                assert!(result.exact, "case {case} took the heuristic path");
                assert_eq!(result.objective, best, "case {case}");
                assert!(result.balance.all_pass());
                feasible += 1;
            }
            (Err(Error::Infeasible(_)), None) => {}
            (got, want) => panic!("case {case}: solver {got:?}, oracle {want:?}"),
        }
    }
    assert!(feasible >= 30, "only {feasible} feasible cases exercised");
}

#[test]
fn heuristic_path_is_balanced_and_deterministic() {
    let panel = oracles::small_panel(7, 6, 30);
    let config = MatchConfig {
        pool_size: 20,
        seed: 3,
        ..MatchConfig::default()
    };
    let units: Vec<TreatedUnit> = panel.events().iter().map(TreatedUnit::from_event).collect();
    let pools = build_pools(&panel, &units, &config, &HashSet::new()).unwrap().pools;
    let a = solve_dom(&panel, &pools, &config).unwrap();
    let b = solve_dom(&panel, &pools, &config).unwrap();
    assert!(!a.exact);
    assert!(a.balance.all_pass());
    assert_eq!(a, b);
}
