//! Reference implementations used by the integration and acceptance tests.
//! They recompute quantities from first principles (exact integer binomial
//! sums, normal equations, brute-force enumeration) without calling the
//! library's own kernels.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topicgrowth::matching::{CandidatePool, MatchConfig};
use topicgrowth::panel::{Panel, PrizeEvent, TopicTrajectory, CANONICAL_MEASURES};

pub fn choose(n: u64, k: u64) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * u128::from(n - i) / u128::from(i + 1))
}

/// Two-sided exact binomial p at 1/2 by direct pmf summation: twice the
/// smaller tail, capped at 1.
pub fn sign_test_p(n: u64, k: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let total = 2f64.powi(n as i32);
    let lower: u128 = (0..=k).map(|j| choose(n, j)).sum();
    let upper: u128 = (k..=n).map(|j| choose(n, j)).sum();
    (2.0 * lower.min(upper) as f64 / total).min(1.0)
}

/// General-p two-sided exact binomial p by pmf summation in f64.
pub fn binomial_two_sided(n: u64, k: u64, p: f64) -> f64 {
    let pmf = |j: u64| choose(n, j) as f64 * p.powi(j as i32) * (1.0 - p).powi((n - j) as i32);
    let lower: f64 = (0..=k).map(pmf).sum();
    let upper: f64 = (k..=n).map(pmf).sum();
    (2.0 * lower.min(upper)).min(1.0)
}

/// Least squares through the normal equations `X'X b = X'y`, solved by
/// Gaussian elimination with partial pivoting.
pub fn normal_equations(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let k = x[0].len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for (row, &yi) in x.iter().zip(y) {
        for i in 0..k {
            for j in 0..k {
                a[i][j] += row[i] * row[j];
            }
            a[i][k] += row[i] * yi;
        }
    }
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        for r in 0..k {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..k).map(|i| a[i][k] / a[i][i]).collect()
}

fn ln1p_count(v: f64) -> f64 {
    (v + 1.0).ln()
}

/// Gap of one treated unit against a control set over the 55 pre cells,
/// measure-major, t ascending.
fn unit_gaps(panel: &Panel, pool: &CandidatePool, subset: &[usize]) -> Vec<f64> {
    let year = pool.unit.reference_year;
    let treated = panel.trajectory(&pool.unit.topic_id).unwrap();
    let mut out = Vec::with_capacity(55);
    for m in 0..CANONICAL_MEASURES.len() {
        for t in -10..=0 {
            let controls: Vec<f64> = subset
                .iter()
                .map(|&i| {
                    panel
                        .trajectory(&pool.candidates[i].candidate_id)
                        .unwrap()
                        .value(m, year + t)
                        .unwrap()
                })
                .collect();
            let expected = controls.iter().sum::<f64>() / controls.len() as f64;
            out.push(ln1p_count(treated.value(m, year + t).unwrap()) - ln1p_count(expected));
        }
    }
    out
}

fn balanced(per_unit: &[&Vec<f64>], alpha: f64) -> bool {
    let n = per_unit.len();
    for c in 0..55 {
        let v: Vec<f64> = per_unit.iter().map(|g| g[c]).collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        if n > 1 {
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            let ok = if se == 0.0 { mean == 0.0 } else { mean.abs() < 1.96 * se };
            if !ok {
                return false;
            }
        }
        let pos = v.iter().filter(|x| **x > 0.0).count() as u64;
        let neg = v.iter().filter(|x| **x < 0.0).count() as u64;
        if sign_test_p(pos + neg, pos) < alpha {
            return false;
        }
    }
    true
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Brute-force optimum: every combination of k-subsets, one per pool, that
/// satisfies fine balance (and disjointness without replacement). Returns
/// the minimum objective, summed per unit in ascending pool index and then
/// across units in pool order.
pub fn exhaustive_match(panel: &Panel, pools: &[CandidatePool], config: &MatchConfig) -> Option<f64> {
    let per_pool: Vec<Vec<(Vec<usize>, Vec<f64>, f64)>> = pools
        .iter()
        .map(|pool| {
            subsets(pool.candidates.len(), config.peers_per_treated)
                .into_iter()
                .map(|s| {
                    let gaps = unit_gaps(panel, pool, &s);
                    let cost = s.iter().map(|&i| pool.candidates[i].theta).fold(0.0, |a, b| a + b);
                    (s, gaps, cost)
                })
                .collect()
        })
        .collect();
    let mut best: Option<f64> = None;
    let mut idx = vec![0usize; pools.len()];
    loop {
        let chosen: Vec<&(Vec<usize>, Vec<f64>, f64)> =
            idx.iter().enumerate().map(|(u, &i)| &per_pool[u][i]).collect();
        let disjoint = config.replacement || {
            let mut ids: Vec<&str> = chosen
                .iter()
                .enumerate()
                .flat_map(|(u, c)| c.0.iter().map(move |&i| pools[u].candidates[i].candidate_id.as_str()))
                .collect();
            let n = ids.len();
            ids.sort_unstable();
            ids.dedup();
            ids.len() == n
        };
        if disjoint {
            let gaps: Vec<&Vec<f64>> = chosen.iter().map(|c| &c.1).collect();
            if balanced(&gaps, config.alpha) {
                let obj = chosen.iter().map(|c| c.2).fold(0.0, |a, b| a + b);
                if best.is_none_or(|b| obj < b) {
                    best = Some(obj);
                }
            }
        }
        let mut u = 0;
        loop {
            if u == idx.len() {
                return best;
            }
            idx[u] += 1;
            if idx[u] < per_pool[u].len() {
                break;
            }
            idx[u] = 0;
            u += 1;
        }
    }
}

/// A small single-discipline panel: `n_treated` treated topics with events
/// in 2000 and `n_controls` untreated topics, years 1990..=2010.
pub fn small_panel(seed: u64, n_treated: usize, n_controls: usize) -> Panel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::new();
    let mut events = Vec::new();
    for i in 0..n_treated + n_controls {
        let id = format!("t{i:02}");
        let level: f64 = rng.random_range(1.5..3.0);
        let trend: f64 = rng.random_range(-0.02..0.05);
        let values = (0..5)
            .map(|m| {
                (0..21)
                    .map(|y| {
                        let noise: f64 = rng.random_range(-0.3..0.3);
                        (level + 0.3 * m as f64 + trend * y as f64 + noise).exp().round()
                    })
                    .collect()
            })
            .collect();
        trajectories.push(TopicTrajectory {
            topic_id: id.clone(),
            discipline: "d".into(),
            first_year: 1990,
            values,
        });
        if i < n_treated {
            events.push(PrizeEvent::new(id, 2000));
        }
    }
    let measures = CANONICAL_MEASURES.iter().map(|m| m.to_string()).collect();
    Panel::new(measures, trajectories, events).unwrap()
}
