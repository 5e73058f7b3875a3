//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Seeds 0..20 are fixed here and were never
//! used to tune the generator.

#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topicgrowth::diagnostics::{binomial_at, binomial_fraction_test, ks_test, placebo, shannon_entropy, DisciplineDistribution};
use topicgrowth::effects::{delta_series, pct_growth, topic_gaps, GapKind};
use topicgrowth::inference::{
    delta_bic, did, ols, signal_design, signal_regression, DesignBuilder, DesignMatrix, DidOptions, Signal,
};
use topicgrowth::matching::{build_pools, match_panel, solve_dom, verify_pretrends, MatchConfig, TreatedUnit};
use topicgrowth::synth::{generate, GenSpec, Ramp, SignalCoefficients};
use topicgrowth::Error;

const SEEDS: std::ops::Range<u64> = 0..20;
const DELTA: f64 = 0.30;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: u32, name: &str, elapsed: Duration, budget: Option<Duration>, outcome: Outcome) -> bool {
    let in_budget = budget.is_none_or(|b| elapsed <= b);
    let pass = outcome.pass && in_budget;
    let budget_note = budget.map_or(String::new(), |b| format!(" (budget {:.0?})", b));
    println!(
        "[{}] criterion {id} {name}: {}; {:.2?}{budget_note}",
        if pass { "PASS" } else { "FAIL" },
        outcome.detail,
        elapsed
    );
    pass
}

fn transform_fidelity() -> Outcome {
    let pairs = [
        (0.3232, 0.3815),
        (0.2742, 0.3155),
        (0.4279, 0.5340),
        (0.3001, 0.35),
        (0.3811, 0.4639),
        (0.2046, 0.2270),
    ];
    let worst = pairs.iter().map(|&(d, p)| (pct_growth(d) - p).abs()).fold(0.0, f64::max);
    Outcome {
        pass: worst <= 1e-3,
        detail: format!("{} pairs, max |error| {worst:.2e} (tolerance 1e-3)", pairs.len()),
    }
}

fn matching_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut compared, mut feasible, mut mismatches) = (0, 0, Vec::new());
    for case in 0..120u64 {
        let n_treated = rng.random_range(1..=3);
        let config = MatchConfig {
            pool_size: rng.random_range(5..=8),
            replacement: rng.random_bool(0.7),
            seed: case,
            ..MatchConfig::default()
        };
        let panel = oracles::small_panel(5000 + case, n_treated, 9);
        let units: Vec<TreatedUnit> = panel.events().iter().map(TreatedUnit::from_event).collect();
        let pools = build_pools(&panel, &units, &config, &HashSet::new()).unwrap().pools;
        let oracle = oracles::exhaustive_match(&panel, &pools, &config);
        compared += 1;
        match (solve_dom(&panel, &pools, &config), oracle) {
            (Ok(r), Some(best)) if r.objective == best => feasible += 1,
            (Err(Error::Infeasible(_)), None) => {}
            (got, want) => mismatches.push(format!("case {case}: {:?} vs {want:?}", got.map(|r| r.objective))),
        }
    }
    Outcome {
        pass: mismatches.is_empty() && compared >= 50 && feasible >= 30,
        detail: format!(
            "{compared} instances ({feasible} feasible), {} mismatches{}",
            mismatches.len(),
            mismatches.first().map_or(String::new(), |m| format!("; first {m}"))
        ),
    }
}

fn effect_spec(seed: u64) -> GenSpec {
    GenSpec {
        seed,
        ramp: Ramp::Step,
        effect: BTreeMap::from([("publications".to_string(), DELTA)]),
        ..GenSpec::default()
    }
}

fn balance_contract() -> Outcome {
    let (panel, _) = generate(&effect_spec(0)).unwrap();
    let config = MatchConfig::default();
    let result = match_panel(&panel, &config).unwrap();
    let pre = verify_pretrends(&panel, &result, 0.05).unwrap();
    let failing = result.balance.cells.iter().filter(|c| !(c.pass && c.sign_pass)).count();
    let low_p = pre.p_values.iter().filter(|c| c.p_value <= 0.05).count();
    Outcome {
        pass: result.assignments.len() >= 200 && failing == 0 && low_p == 0 && pre.p_values.len() == 55,
        detail: format!(
            "{} treated, pools of {}; {failing} of 55 cells fail balance, {low_p} of 55 pre-trend p <= 0.05 (min p {:.3})",
            result.assignments.len(),
            config.pool_size,
            pre.min_p()
        ),
    }
}

struct SeedRun {
    delta_10: f64,
    beta_3: f64,
    agree: bool,
    delta_covers: bool,
    beta_covers: bool,
    placebo_clean: bool,
}

fn effect_seed(seed: u64) -> SeedRun {
    let (panel, truth) = generate(&effect_spec(seed)).unwrap();
    let config = MatchConfig {
        seed,
        ..MatchConfig::default()
    };
    let result = match_panel(&panel, &config).unwrap();
    let ids: Vec<&str> = result.assignments.keys().map(String::as_str).collect();
    let p10 = delta_series(&panel, &result, "publications").unwrap().at(10).clone();
    let b3 = did(&panel, &result, "publications", DidOptions::default()).unwrap().treat_period().clone();
    let (d, se_d) = (p10.delta.unwrap(), p10.se.unwrap());
    let truth_10 = truth.mean_lift("publications", 10, ids.iter().copied());
    let truth_post = truth.mean_post_lift("publications", ids.iter().copied());
    let run = placebo(&panel, &result, &config, seed).unwrap();
    let fake = run.series("publications").unwrap();
    SeedRun {
        delta_10: d,
        beta_3: b3.estimate,
        agree: (d - b3.estimate).abs() <= 2.0 * se_d.hypot(b3.se),
        delta_covers: p10.ci_contains(truth_10),
        beta_covers: (b3.estimate - 1.96 * b3.se..=b3.estimate + 1.96 * b3.se).contains(&truth_post),
        placebo_clean: (1..=10).all(|t| fake.at(t).ci_contains(0.0)),
    }
}

fn effect_recovery(runs: &[SeedRun]) -> Outcome {
    let n = runs.len();
    let within = |v: f64| (v - DELTA).abs() <= 0.03;
    let recovered = runs.iter().filter(|r| within(r.delta_10) && within(r.beta_3)).count();
    let agree = runs.iter().filter(|r| r.agree).count();
    let cov_d = runs.iter().filter(|r| r.delta_covers).count();
    let cov_b = runs.iter().filter(|r| r.beta_covers).count();
    let worst = runs
        .iter()
        .flat_map(|r| [r.delta_10, r.beta_3])
        .map(|v| (v - DELTA).abs())
        .fold(0.0, f64::max);
    let min_cov = (0.9 * n as f64).ceil() as usize;
    Outcome {
        pass: recovered == n && agree == n && cov_d >= min_cov && cov_b >= min_cov,
        detail: format!(
            "within 0.30 +- 0.03 on {recovered}/{n} seeds (max |error| {worst:.4}); agree within 2 SE on {agree}/{n}; \
             95% CI coverage delta_10 {cov_d}/{n}, beta_3 {cov_b}/{n} (need {min_cov})"
        ),
    }
}

fn placebo_contract(runs: &[SeedRun]) -> Outcome {
    let clean = runs.iter().filter(|r| r.placebo_clean).count();
    Outcome {
        pass: clean >= 18,
        detail: format!("{clean}/{} runs with zero inside every band for t = 1..10 (need 18)", runs.len()),
    }
}

fn null_contract() -> Outcome {
    let mut ok = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let spec = GenSpec {
            seed,
            topics_per_discipline: 1250,
            ..GenSpec::default()
        };
        let (panel, _) = generate(&spec).unwrap();
        let result = match_panel(&panel, &MatchConfig { seed, ..MatchConfig::default() }).unwrap();
        let gaps = topic_gaps(&panel, &result, "publications", GapKind::Log).unwrap();
        let test = binomial_at(&gaps, 10).unwrap();
        let n = test.positive + test.negative + test.ties;
        let good = n == 500 && test.p_value > 0.05 && (0.45..=0.55).contains(&test.fraction);
        ok += usize::from(good);
        lines.push(format!("{:.3}/{:.3}", test.fraction, test.p_value));
    }
    Outcome {
        pass: ok >= 18,
        detail: format!(
            "n = 500 treated; p > 0.05 and fraction positive in [0.45, 0.55] on {ok}/20 seeds (need 18); fraction/p: {}",
            lines.join(" ")
        ),
    }
}

fn kernels_vs_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ols_worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(15..60);
        let k = rng.random_range(1..5);
        let cols: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut b = DesignBuilder::new(y.clone()).intercept();
        for (j, c) in cols.iter().enumerate() {
            b = b.continuous(&format!("x{j}"), c.clone()).unwrap();
        }
        let fit = ols(&b.build().unwrap()).unwrap();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| std::iter::once(1.0).chain(cols.iter().map(|c| c[i])).collect()).collect();
        for (c, o) in fit.coefficients.iter().zip(oracles::normal_equations(&rows, &y)) {
            ols_worst = ols_worst.max((c.estimate - o).abs() / (1.0 + o.abs()));
        }
    }
    let mut binom_worst: f64 = 0.0;
    for n in 1..=20u64 {
        for k in 0..=n {
            let gaps: Vec<f64> = (0..n).map(|i| if i < k { 1.0 } else { -1.0 }).collect();
            let p = binomial_fraction_test(&gaps).unwrap().p_value;
            binom_worst = binom_worst.max((p - oracles::sign_test_p(n, k)).abs());
        }
    }
    let entropy_exact = (1..=64usize).all(|k| {
        let d = DisciplineDistribution::from_counts((0..k).map(|i| (format!("d{i}"), 1.0))).unwrap();
        shannon_entropy(&d) == (k as f64).log2()
    });
    let sample: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
    let ks_d = ks_test(&sample, &sample).unwrap().statistic;
    Outcome {
        pass: ols_worst <= 1e-10 && binom_worst <= 1e-12 && entropy_exact && ks_d == 0.0,
        detail: format!(
            "OLS max rel diff {ols_worst:.1e} over 100 fits (tol 1e-10); binomial n <= 20 max diff {binom_worst:.1e}; \
             entropy(uniform k) == log2 k for k <= 64: {entropy_exact}; KS D on identical samples {ks_d}"
        ),
    }
}

/// Rebuilds `design` with one continuous column multiplied by `scale`.
fn rescaled(design: &DesignMatrix, column: &str, scale: f64) -> DesignMatrix {
    let x = design.x();
    let mut b = DesignBuilder::new(design.y().iter().copied().collect());
    for (j, name) in design.names().iter().enumerate() {
        let mut values: Vec<f64> = x.column(j).iter().copied().collect();
        if name == column {
            values.iter_mut().for_each(|v| *v *= scale);
        }
        let continuous = matches!(name.as_str(), "recency" | "prize_age" | "conferrals") || name.starts_with("lag_");
        b = if name == "intercept" {
            b.intercept()
        } else if continuous {
            b.continuous(name, values).unwrap()
        } else {
            b.indicator(name, values).unwrap()
        };
    }
    b.build().unwrap()
}

fn signal_recovery() -> Outcome {
    let true_coef = -0.005;
    let spec = GenSpec {
        signal: SignalCoefficients {
            recency: true_coef,
            ..SignalCoefficients::default()
        },
        ..effect_spec(0)
    };
    let (panel, _) = generate(&spec).unwrap();
    let result = match_panel(&panel, &MatchConfig::default()).unwrap();
    let with = signal_regression(&panel, &result, "publications", &[Signal::Recency]).unwrap().fit;
    let base = signal_regression(&panel, &result, "publications", &[]).unwrap().fit;
    let c = with.coef("recency").unwrap();
    let recovered = (c.estimate - true_coef).abs() <= 2.0 * c.se;
    let dbic = delta_bic(&base, &with).unwrap();

    let gaps = topic_gaps(&panel, &result, "publications", GapKind::Log).unwrap();
    let design = signal_design(&panel, &gaps, &[Signal::Recency]).unwrap();
    let original = ols(&design).unwrap().coef("recency").unwrap().standardized.unwrap();
    let scaled = ols(&rescaled(&design, "recency", 37.5)).unwrap().coef("recency").unwrap().standardized.unwrap();
    let beta_diff = (original - scaled).abs();
    Outcome {
        pass: recovered && beta_diff <= 1e-10 && dbic < 0.0,
        detail: format!(
            "recency {:.5} +- {:.5} vs true {true_coef} (within 2 SE: {recovered}); standardized beta diff under rescale {beta_diff:.1e} (tol 1e-10); delta BIC {dbic:.2}",
            c.estimate, c.se
        ),
    }
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name != "manifest.json" {
            files.insert(name, fs::read(&path).unwrap());
        }
    }
    files
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "seed = 11\n[synth]\nramp = \"step\"\n[synth.effect]\npublications = 0.3\n",
    )
    .unwrap();
    let run = |out: &str, threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_topicgrowth"))
            .current_dir(dir.path())
            .args(["--config", "run.toml", "--out", out, "--threads", threads, "pipeline", "--extras"])
            .status()
            .unwrap()
            .success()
    };
    if !(run("a", "1") && run("b", "4")) {
        return Outcome {
            pass: false,
            detail: "pipeline run failed".into(),
        };
    }
    let (a, b) = (read_tree(&dir.path().join("a")), read_tree(&dir.path().join("b")));
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    Outcome {
        pass: a.len() == b.len() && differing.is_empty() && a.len() >= 10,
        detail: format!(
            "{} payload files compared across 1 and 4 threads, {} differ",
            a.len(),
            differing.len()
        ),
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

fn main() {
    let mut all = true;
    let (o, t) = timed(transform_fidelity);
    all &= report(1, "transform fidelity", t, Some(Duration::from_secs(1)), o);
    let (o, t) = timed(matching_oracle);
    all &= report(2, "matching oracle equivalence", t, Some(Duration::from_secs(60)), o);
    let (o, t) = timed(balance_contract);
    all &= report(3, "balance contract", t, Some(Duration::from_secs(300)), o);
    let (runs, t) = timed(|| SEEDS.map(effect_seed).collect::<Vec<_>>());
    all &= report(4, "effect recovery", t, None, effect_recovery(&runs));
    all &= report(5, "placebo contract", t, None, placebo_contract(&runs));
    let (o, t) = timed(null_contract);
    all &= report(6, "null contract", t, None, o);
    let (o, t) = timed(kernels_vs_oracles);
    all &= report(7, "statistical kernels vs oracles", t, None, o);
    let (o, t) = timed(signal_recovery);
    all &= report(8, "signal-regression recovery", t, None, o);
    let (o, t) = timed(determinism);
    all &= report(9, "determinism", t, None, o);
    if !all {
        std::process::exit(1);
    }
}
