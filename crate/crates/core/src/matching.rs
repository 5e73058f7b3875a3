//! Dynamic optimal matching of treated topics to control topics.
//!
//! Each treated topic gets a candidate pool: the closest same-discipline,
//! never-treated topics by `theta`, the mean squared gap of transformed
//! counts over the 5 measures x 11 pre-event years. The solver then picks
//! `peers_per_treated` controls per treated topic, minimizing the total
//! distance subject to group-level fine balance on all 55 pre-period cells:
//!
//! * `|mean_i gap_i(n, t)| < 1.96 * SE(gap(n, t))`, and
//! * the signs of `gap_i(n, t)` are not significantly unbalanced (exact
//!   two-sided binomial test at `alpha`).
//!
//! Small instances (`treated * pool <= exactness_budget`) are solved exactly by
//! branch and bound. Larger ones use greedy nearest peers followed by a
//! local search that swaps controls to repair violated cells, then to lower
//! the objective while staying feasible.

use std::collections::{BTreeMap, HashSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{
    growth_transform, Panel, PrizeEvent, TopicTrajectory, CANONICAL_MEASURES, N_MEASURES,
    PRE_LEN, PRE_YEARS,
};
use crate::stats::{self, binomial_two_sided_p, mean_se, sign_threshold, Z_95};

/// Number of balance cells: 5 measures x 11 pre-event years.
pub const N_CELLS: usize = N_MEASURES * PRE_LEN;

type Cells = [f64; N_CELLS];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub pool_size: usize,
    pub peers_per_treated: usize,
    /// Significance level of the sign-balance test and of pre-trend checks.
    pub alpha: f64,
    /// Whether one control may serve several treated topics.
    pub replacement: bool,
    /// Largest `treated * pool` product solved by exact branch and bound.
    pub exactness_budget: usize,
    /// Seeds the perturbation moves of the local search.
    pub seed: u64,
    /// Perturbation rounds the local search may spend repairing balance.
    pub max_restarts: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            pool_size: 40,
            peers_per_treated: 5,
            alpha: 0.05,
            replacement: true,
            exactness_budget: 24,
            seed: 0,
            max_restarts: 50,
        }
    }
}

impl MatchConfig {
    fn validate(&self) -> Result<()> {
        if self.peers_per_treated == 0 {
            return Err(Error::invalid("peers_per_treated must be positive"));
        }
        if self.pool_size < self.peers_per_treated {
            return Err(Error::invalid("pool_size must be at least peers_per_treated"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// A unit to be matched: a treated topic (or a placebo stand-in) and the
/// calendar year its event time is measured from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreatedUnit {
    /// Key of the unit in the match result; the topic id for real events.
    pub key: String,
    pub topic_id: String,
    pub reference_year: i32,
}

impl TreatedUnit {
    pub fn from_event(event: &PrizeEvent) -> Self {
        TreatedUnit {
            key: event.topic_id.clone(),
            topic_id: event.topic_id.clone(),
            reference_year: event.prize_year,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub treated_id: String,
    pub candidate_id: String,
    pub theta: f64,
}

/// Candidates for one treated unit in ascending `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub unit: TreatedUnit,
    pub candidates: Vec<DistanceRecord>,
}

/// Cell index of measure `n` at event time `t` (t in -10..=0).
pub fn cell_index(n: usize, t: i32) -> usize {
    n * PRE_LEN + (t + PRE_YEARS) as usize
}

fn cell_label(cell: usize) -> (&'static str, i32) {
    (
        CANONICAL_MEASURES[cell / PRE_LEN],
        (cell % PRE_LEN) as i32 - PRE_YEARS,
    )
}

fn pre_cells(tr: &TopicTrajectory, year: i32, f: impl Fn(f64) -> f64) -> Result<Cells> {
    let mut out = [0.0; N_CELLS];
    for n in 0..N_MEASURES {
        let slice = tr.pre_slice(n, year)?;
        for (k, v) in slice.iter().enumerate() {
            out[n * PRE_LEN + k] = f(*v);
        }
    }
    Ok(out)
}

fn theta_cells(a: &Cells, b: &Cells) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / N_CELLS as f64
}

/// Mean squared gap of transformed counts between two topics over the five
/// measures and the eleven years ending at `prize_year`.
pub fn theta(treated: &TopicTrajectory, candidate: &TopicTrajectory, prize_year: i32) -> Result<f64> {
    let a = pre_cells(treated, prize_year, growth_transform)?;
    let b = pre_cells(candidate, prize_year, growth_transform)?;
    Ok(theta_cells(&a, &b))
}

/// Builds the candidate pool of a real treated topic.
pub fn build_pool(panel: &Panel, event: &PrizeEvent, config: &MatchConfig) -> Result<CandidatePool> {
    build_pool_for(panel, &TreatedUnit::from_event(event), config, &HashSet::new())
}

/// Builds the candidate pool of any unit. Candidates share the unit's
/// discipline, are never treated in the panel, are not in `excluded`, and
/// have a complete pre-window at the unit's reference year.
pub fn build_pool_for(
    panel: &Panel,
    unit: &TreatedUnit,
    config: &MatchConfig,
    excluded: &HashSet<String>,
) -> Result<CandidatePool> {
    config.validate()?;
    let treated = panel.require(&unit.topic_id)?;
    let year = unit.reference_year;
    let target = pre_cells(treated, year, growth_transform)?;
    let mut candidates: Vec<DistanceRecord> = panel
        .trajectories()
        .iter()
        .filter(|c| {
            c.discipline == treated.discipline
                && c.topic_id != unit.topic_id
                && !panel.is_treated(&c.topic_id)
                && !excluded.contains(&c.topic_id)
                && c.has_pre_window(year)
        })
        .map(|c| {
            let cells = pre_cells(c, year, growth_transform).expect("pre-window checked");
            DistanceRecord {
                treated_id: unit.key.clone(),
                candidate_id: c.topic_id.clone(),
                theta: theta_cells(&target, &cells),
            }
        })
        .collect();
    if candidates.len() < config.peers_per_treated {
        return Err(Error::Unmatchable {
            topic: unit.key.clone(),
            eligible: candidates.len(),
            required: config.peers_per_treated,
        });
    }
    candidates.sort_by(|a, b| {
        a.theta
            .total_cmp(&b.theta)
            .then_with(|| a.candidate_id.cmp(&b.candidate_id))
    });
    candidates.truncate(config.pool_size);
    Ok(CandidatePool {
        unit: unit.clone(),
        candidates,
    })
}

/// A unit dropped before solving, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unmatched {
    pub key: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct PoolSet {
    pub pools: Vec<CandidatePool>,
    pub unmatchable: Vec<Unmatched>,
}

/// Builds pools for every unit in parallel. Units with too few candidates
/// are reported in `unmatchable` rather than failing the whole set.
pub fn build_pools(
    panel: &Panel,
    units: &[TreatedUnit],
    config: &MatchConfig,
    excluded: &HashSet<String>,
) -> Result<PoolSet> {
    let built: Vec<Result<CandidatePool>> = units
        .par_iter()
        .map(|u| build_pool_for(panel, u, config, excluded))
        .collect();
    let mut set = PoolSet::default();
    for (unit, res) in units.iter().zip(built) {
        match res {
            Ok(pool) => set.pools.push(pool),
            Err(e @ Error::Unmatchable { .. }) => set.unmatchable.push(Unmatched {
                key: unit.key.clone(),
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(set)
}

/// One balance cell: the treated-minus-expected gap of one measure at one
/// pre-event time, summarized across treated units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceCell {
    pub measure: String,
    pub t: i32,
    pub mean: f64,
    /// Standard error across treated units; `None` with a single unit.
    pub se: Option<f64>,
    /// `|mean| < 1.96 * se`.
    pub pass: bool,
    pub positive: usize,
    pub negative: usize,
    pub sign_p: f64,
    pub sign_pass: bool,
}

impl BalanceCell {
    /// `|mean| / (1.96 * se)`; above 1 means the mean-gap bound is violated.
    pub fn violation_ratio(&self) -> f64 {
        match self.se {
            None => 0.0,
            Some(0.0) => {
                if self.mean == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Some(se) => self.mean.abs() / (Z_95 * se),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub n_treated: usize,
    /// Measure-major, t ascending within a measure; always 55 cells.
    pub cells: Vec<BalanceCell>,
}

fn cell_summary(values: &[f64], alpha: f64) -> (stats::MeanSe, bool, usize, usize, f64, bool) {
    let ms = mean_se(values);
    let pass = match ms.se {
        // A single unit leaves the standard error undefined; the bound is vacuous.
        None => true,
        Some(0.0) => ms.mean == 0.0,
        Some(se) => ms.mean.abs() < Z_95 * se,
    };
    let positive = values.iter().filter(|v| **v > 0.0).count();
    let negative = values.iter().filter(|v| **v < 0.0).count();
    let sign_p = binomial_two_sided_p((positive + negative) as u64, positive as u64, 0.5);
    (ms, pass, positive, negative, sign_p, sign_p >= alpha)
}

impl BalanceReport {
    /// Summarizes per-unit gap vectors (one 55-cell vector per treated unit).
    pub fn from_gaps(gaps: &[[f64; N_CELLS]], alpha: f64) -> Self {
        let mut column = vec![0.0; gaps.len()];
        let cells = (0..N_CELLS)
            .map(|c| {
                for (slot, g) in column.iter_mut().zip(gaps) {
                    *slot = g[c];
                }
                let (ms, pass, positive, negative, sign_p, sign_pass) = cell_summary(&column, alpha);
                let (measure, t) = cell_label(c);
                BalanceCell {
                    measure: measure.to_string(),
                    t,
                    mean: ms.mean,
                    se: ms.se,
                    pass,
                    positive,
                    negative,
                    sign_p,
                    sign_pass,
                }
            })
            .collect();
        BalanceReport {
            n_treated: gaps.len(),
            cells,
        }
    }

    pub fn all_pass(&self) -> bool {
        self.cells.iter().all(|c| c.pass && c.sign_pass)
    }

    /// Describes the worst-violated cell, or `None` when everything passes.
    pub fn worst_violation(&self) -> Option<String> {
        let worst_mean = self
            .cells
            .iter()
            .filter(|c| !c.pass)
            .max_by(|a, b| a.violation_ratio().total_cmp(&b.violation_ratio()));
        if let Some(c) = worst_mean {
            return Some(format!(
                "{} t={}: |mean gap| {:.4} >= 1.96 * SE {:.4}",
                c.measure,
                c.t,
                c.mean.abs(),
                Z_95 * c.se.unwrap_or(0.0)
            ));
        }
        self.cells
            .iter()
            .filter(|c| !c.sign_pass)
            .min_by(|a, b| a.sign_p.total_cmp(&b.sign_p))
            .map(|c| {
                format!(
                    "{} t={}: sign imbalance {} positive vs {} negative (p = {:.4})",
                    c.measure, c.t, c.positive, c.negative, c.sign_p
                )
            })
    }
}

/// Controls chosen for one treated unit, in ascending distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub topic_id: String,
    pub reference_year: i32,
    pub controls: Vec<String>,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub assignments: BTreeMap<String, Assignment>,
    /// Total distance of the chosen pairs, summed unit by unit in pool order.
    pub objective: f64,
    pub balance: BalanceReport,
    /// Whether the exact branch-and-bound path produced this result.
    pub exact: bool,
    /// Units excluded before solving (too few candidates).
    #[serde(default)]
    pub unmatched: Vec<Unmatched>,
}

impl MatchResult {
    /// Ids of every control used at least once.
    pub fn control_ids(&self) -> HashSet<&str> {
        self.assignments
            .values()
            .flat_map(|a| a.controls.iter().map(String::as_str))
            .collect()
    }
}

/// Matches every event in the panel: builds pools, reports unmatchable
/// topics, and solves.
pub fn match_panel(panel: &Panel, config: &MatchConfig) -> Result<MatchResult> {
    let units: Vec<TreatedUnit> = panel.events().iter().map(TreatedUnit::from_event).collect();
    let set = build_pools(panel, &units, config, &HashSet::new())?;
    let mut result = solve_dom(panel, &set.pools, config)?;
    result.unmatched = set.unmatchable;
    Ok(result)
}

struct UnitData {
    target: Cells,
    raw: Vec<Cells>,
    theta: Vec<f64>,
    topic: Vec<usize>,
}

struct Problem<'a> {
    pools: &'a [CandidatePool],
    units: Vec<UnitData>,
    k: usize,
    alpha: f64,
    sign_min: Vec<u64>,
}

impl<'a> Problem<'a> {
    fn new(panel: &Panel, pools: &'a [CandidatePool], config: &MatchConfig) -> Result<Self> {
        let units = pools
            .iter()
            .map(|pool| {
                let year = pool.unit.reference_year;
                let target = pre_cells(panel.require(&pool.unit.topic_id)?, year, growth_transform)?;
                let mut raw = Vec::with_capacity(pool.candidates.len());
                let mut topic = Vec::with_capacity(pool.candidates.len());
                for c in &pool.candidates {
                    raw.push(pre_cells(panel.require(&c.candidate_id)?, year, |v| v)?);
                    topic.push(panel.topic_index(&c.candidate_id).expect("required above"));
                }
                Ok(UnitData {
                    target,
                    raw,
                    theta: pool.candidates.iter().map(|c| c.theta).collect(),
                    topic,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = pools.len() as u64;
        Ok(Problem {
            pools,
            units,
            k: config.peers_per_treated,
            alpha: config.alpha,
            sign_min: (0..=m).map(|n| sign_threshold(n, config.alpha)).collect(),
        })
    }

    fn sums(&self, u: usize, chosen: &[usize]) -> Cells {
        let mut s = [0.0; N_CELLS];
        for &c in chosen {
            for (acc, v) in s.iter_mut().zip(&self.units[u].raw[c]) {
                *acc += v;
            }
        }
        s
    }

    fn gaps_from_sums(&self, u: usize, sums: &Cells) -> Cells {
        let k = self.k as f64;
        let mut g = [0.0; N_CELLS];
        for c in 0..N_CELLS {
            g[c] = self.units[u].target[c] - growth_transform(sums[c] / k);
        }
        g
    }

    /// Canonical cost of one unit's choice: distances summed in pool order.
    fn unit_cost(&self, u: usize, chosen: &[usize]) -> f64 {
        let mut sorted = chosen.to_vec();
        sorted.sort_unstable();
        sorted.iter().map(|&c| self.units[u].theta[c]).sum()
    }

    fn objective(&self, chosen: &[Vec<usize>]) -> f64 {
        chosen
            .iter()
            .enumerate()
            .map(|(u, c)| self.unit_cost(u, c))
            .fold(0.0, |acc, x| acc + x)
    }

    fn report(&self, chosen: &[Vec<usize>]) -> BalanceReport {
        let gaps: Vec<Cells> = chosen
            .iter()
            .enumerate()
            .map(|(u, c)| self.gaps_from_sums(u, &self.sums(u, c)))
            .collect();
        BalanceReport::from_gaps(&gaps, self.alpha)
    }

    fn assemble_result(&self, mut chosen: Vec<Vec<usize>>, exact: bool) -> MatchResult {
        for c in &mut chosen {
            c.sort_unstable();
        }
        let balance = self.report(&chosen);
        let objective = self.objective(&chosen);
        let assignments = self
            .pools
            .iter()
            .zip(&chosen)
            .map(|(pool, c)| {
                (
                    pool.unit.key.clone(),
                    Assignment {
                        topic_id: pool.unit.topic_id.clone(),
                        reference_year: pool.unit.reference_year,
                        controls: c.iter().map(|&i| pool.candidates[i].candidate_id.clone()).collect(),
                        distances: c.iter().map(|&i| pool.candidates[i].theta).collect(),
                    },
                )
            })
            .collect();
        MatchResult {
            assignments,
            objective,
            balance,
            exact,
            unmatched: Vec::new(),
        }
    }

    /// Nearest `k` per unit; without replacement, a global greedy pass by
    /// distance followed by augmenting paths for units left short.
    fn greedy(&self, replacement: bool) -> Result<Vec<Vec<usize>>> {
        if replacement {
            return Ok((0..self.units.len()).map(|_| (0..self.k).collect()).collect());
        }
        let mut order: Vec<(usize, usize)> = self
            .units
            .iter()
            .enumerate()
            .flat_map(|(u, d)| (0..d.theta.len()).map(move |c| (u, c)))
            .collect();
        order.sort_by(|a, b| {
            self.units[a.0].theta[a.1]
                .total_cmp(&self.units[b.0].theta[b.1])
                .then(a.cmp(b))
        });
        let mut chosen = vec![Vec::with_capacity(self.k); self.units.len()];
        let mut owner: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (u, c) in order {
            let topic = self.units[u].topic[c];
            if chosen[u].len() < self.k && !owner.contains_key(&topic) {
                chosen[u].push(c);
                owner.insert(topic, (u, c));
            }
        }
        for u in 0..self.units.len() {
            while chosen[u].len() < self.k {
                let mut visited = vec![false; self.units.len()];
                if !self.augment(u, &mut chosen, &mut owner, &mut visited) {
                    return Err(Error::Infeasible(format!(
                        "treated topic `{}` cannot receive {} distinct controls without replacement",
                        self.pools[u].unit.key, self.k
                    )));
                }
            }
        }
        Ok(chosen)
    }

    fn augment(
        &self,
        u: usize,
        chosen: &mut [Vec<usize>],
        owner: &mut BTreeMap<usize, (usize, usize)>,
        visited: &mut [bool],
    ) -> bool {
        visited[u] = true;
        let data = &self.units[u];
        for c in 0..data.theta.len() {
            if chosen[u].contains(&c) {
                continue;
            }
            let topic = data.topic[c];
            match owner.get(&topic).copied() {
                None => {
                    chosen[u].push(c);
                    owner.insert(topic, (u, c));
                    return true;
                }
                Some((v, vc)) if v != u && !visited[v] => {
                    // try to move v off this topic
                    owner.remove(&topic);
                    chosen[v].retain(|&x| x != vc);
                    if self.augment(v, chosen, owner, visited) {
                        chosen[u].push(c);
                        owner.insert(topic, (u, c));
                        return true;
                    }
                    chosen[v].push(vc);
                    owner.insert(topic, (v, vc));
                }
                _ => {}
            }
        }
        false
    }

    fn infeasible(&self, chosen: &[Vec<usize>]) -> Error {
        let report = self.report(chosen);
        Error::Infeasible(
            report
                .worst_violation()
                .unwrap_or_else(|| "no balance-feasible assignment exists".to_string()),
        )
    }

    fn branch_and_bound(&self, replacement: bool) -> Result<Vec<Vec<usize>>> {
        struct Choice {
            cost: f64,
            members: Vec<usize>,
            gaps: Cells,
        }
        let per_unit: Vec<Vec<Choice>> = (0..self.units.len())
            .map(|u| {
                let mut list: Vec<Choice> = combinations(self.units[u].theta.len(), self.k)
                    .into_iter()
                    .map(|members| Choice {
                        cost: self.unit_cost(u, &members),
                        gaps: self.gaps_from_sums(u, &self.sums(u, &members)),
                        members,
                    })
                    .collect();
                list.sort_by(|a, b| a.cost.total_cmp(&b.cost).then_with(|| a.members.cmp(&b.members)));
                list
            })
            .collect();
        let m = per_unit.len();
        let mut rest_min = vec![0.0; m + 1];
        for u in (0..m).rev() {
            rest_min[u] = rest_min[u + 1] + per_unit[u][0].cost;
        }

        struct Search<'s> {
            per_unit: &'s [Vec<Choice>],
            rest_min: &'s [f64],
            problem: &'s Problem<'s>,
            replacement: bool,
            pick: Vec<usize>,
            used: HashSet<usize>,
            best: Option<(f64, Vec<usize>)>,
        }

        impl Search<'_> {
            fn bound_exceeded(&self, bound: f64) -> bool {
                self.best
                    .as_ref()
                    .is_some_and(|(b, _)| bound > *b + 1e-12 * b.abs().max(1.0))
            }

            fn run(&mut self, depth: usize, partial: f64) {
                if depth == self.per_unit.len() {
                    if self.best.as_ref().is_some_and(|(b, _)| partial >= *b) {
                        return;
                    }
                    let gaps: Vec<Cells> = self
                        .pick
                        .iter()
                        .enumerate()
                        .map(|(u, &i)| self.per_unit[u][i].gaps)
                        .collect();
                    if BalanceReport::from_gaps(&gaps, self.problem.alpha).all_pass() {
                        self.best = Some((partial, self.pick.clone()));
                    }
                    return;
                }
                for (i, choice) in self.per_unit[depth].iter().enumerate() {
                    if self.bound_exceeded(partial + choice.cost + self.rest_min[depth + 1]) {
                        break;
                    }
                    let topics: Vec<usize> = choice
                        .members
                        .iter()
                        .map(|&c| self.problem.units[depth].topic[c])
                        .collect();
                    if !self.replacement && topics.iter().any(|t| self.used.contains(t)) {
                        continue;
                    }
                    if !self.replacement {
                        self.used.extend(&topics);
                    }
                    self.pick.push(i);
                    self.run(depth + 1, partial + choice.cost);
                    self.pick.pop();
                    if !self.replacement {
                        for t in &topics {
                            self.used.remove(t);
                        }
                    }
                }
            }
        }

        let mut search = Search {
            per_unit: &per_unit,
            rest_min: &rest_min,
            problem: self,
            replacement,
            pick: Vec::with_capacity(m),
            used: HashSet::new(),
            best: None,
        };
        search.run(0, 0.0);
        match search.best {
            Some((_, pick)) => Ok(pick
                .iter()
                .enumerate()
                .map(|(u, &i)| per_unit[u][i].members.clone())
                .collect()),
            None => {
                let fallback = self
                    .greedy(replacement)
                    .unwrap_or_else(|_| (0..m).map(|_| (0..self.k).collect()).collect());
                Err(self.infeasible(&fallback))
            }
        }
    }
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..=n - (k - cur.len()) {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

/// Incremental search state for the local search.
#[derive(Clone)]
struct State {
    chosen: Vec<Vec<usize>>,
    sums: Vec<Cells>,
    gaps: Vec<Cells>,
    sum: Cells,
    sumsq: Cells,
    pos: [u32; N_CELLS],
    neg: [u32; N_CELLS],
    /// How many units use each panel topic (without replacement: 0 or 1).
    usage: Vec<u32>,
    penalty: f64,
}

struct Swap {
    unit: usize,
    slot: usize,
    cand: usize,
    penalty: f64,
    delta_obj: f64,
}

impl State {
    fn new(p: &Problem, chosen: Vec<Vec<usize>>, n_topics: usize) -> Self {
        let sums: Vec<Cells> = chosen.iter().enumerate().map(|(u, c)| p.sums(u, c)).collect();
        let gaps = sums.iter().enumerate().map(|(u, s)| p.gaps_from_sums(u, s)).collect();
        let mut usage = vec![0; n_topics];
        for (u, c) in chosen.iter().enumerate() {
            for &i in c {
                usage[p.units[u].topic[i]] += 1;
            }
        }
        let mut st = State {
            chosen,
            sums,
            gaps,
            sum: [0.0; N_CELLS],
            sumsq: [0.0; N_CELLS],
            pos: [0; N_CELLS],
            neg: [0; N_CELLS],
            usage,
            penalty: 0.0,
        };
        st.refresh(p);
        st
    }

    fn refresh(&mut self, p: &Problem) {
        self.sum = [0.0; N_CELLS];
        self.sumsq = [0.0; N_CELLS];
        self.pos = [0; N_CELLS];
        self.neg = [0; N_CELLS];
        for g in &self.gaps {
            for c in 0..N_CELLS {
                self.sum[c] += g[c];
                self.sumsq[c] += g[c] * g[c];
                self.pos[c] += u32::from(g[c] > 0.0);
                self.neg[c] += u32::from(g[c] < 0.0);
            }
        }
        self.penalty = (0..N_CELLS)
            .map(|c| cell_penalty(p, self.sum[c], self.sumsq[c], self.pos[c], self.neg[c]))
            .sum();
    }

    fn candidate_ok(&self, p: &Problem, u: usize, c: usize, replacement: bool) -> bool {
        !self.chosen[u].contains(&c) && (replacement || self.usage[p.units[u].topic[c]] == 0)
    }

    fn evaluate(&self, p: &Problem, u: usize, slot: usize, cand: usize) -> Swap {
        let data = &p.units[u];
        let old = self.chosen[u][slot];
        let mut penalty = 0.0;
        let k = p.k as f64;
        for c in 0..N_CELLS {
            let s = self.sums[u][c] - data.raw[old][c] + data.raw[cand][c];
            let g_new = data.target[c] - growth_transform(s / k);
            let g_old = self.gaps[u][c];
            let sum = self.sum[c] - g_old + g_new;
            let sumsq = self.sumsq[c] - g_old * g_old + g_new * g_new;
            let pos = self.pos[c] - u32::from(g_old > 0.0) + u32::from(g_new > 0.0);
            let neg = self.neg[c] - u32::from(g_old < 0.0) + u32::from(g_new < 0.0);
            penalty += cell_penalty(p, sum, sumsq, pos, neg);
        }
        Swap {
            unit: u,
            slot,
            cand,
            penalty,
            delta_obj: data.theta[cand] - data.theta[old],
        }
    }

    fn apply(&mut self, p: &Problem, u: usize, slot: usize, cand: usize) {
        let old = self.chosen[u][slot];
        self.usage[p.units[u].topic[old]] -= 1;
        self.usage[p.units[u].topic[cand]] += 1;
        self.chosen[u][slot] = cand;
        self.sums[u] = p.sums(u, &self.chosen[u]);
        self.gaps[u] = p.gaps_from_sums(u, &self.sums[u]);
        self.refresh(p);
    }

    fn swaps<'s>(
        &'s self,
        p: &'s Problem,
        replacement: bool,
    ) -> impl ParallelIterator<Item = Swap> + 's {
        (0..self.chosen.len()).into_par_iter().flat_map_iter(move |u| {
            (0..self.chosen[u].len()).flat_map(move |slot| {
                (0..p.units[u].theta.len())
                    .filter(move |&c| self.candidate_ok(p, u, c, replacement))
                    .map(move |c| self.evaluate(p, u, slot, c))
            })
        })
    }
}

/// Guidance penalty of one cell: how far the mean gap exceeds its bound in
/// units of the bound, plus the shortfall of the sign minority.
fn cell_penalty(p: &Problem, sum: f64, sumsq: f64, pos: u32, neg: u32) -> f64 {
    let m = p.units.len();
    let mut pen = 0.0;
    if m >= 2 {
        let mf = m as f64;
        let mean = sum / mf;
        let var = ((sumsq - sum * mean) / (mf - 1.0)).max(0.0);
        let bound = Z_95 * (var / mf).sqrt();
        if !(mean.abs() < bound) {
            pen += if bound == 0.0 {
                if mean == 0.0 {
                    0.0
                } else {
                    1.0
                }
            } else {
                mean.abs() / bound - 1.0 + 1e-9
            };
        }
    }
    let n = pos + neg;
    let minority = u64::from(pos.min(neg));
    let need = p.sign_min[n as usize];
    if minority < need {
        pen += (need - minority) as f64 / f64::from(n);
    }
    pen
}

fn better(a: &Swap, b: &Swap) -> bool {
    (a.penalty, a.delta_obj, a.unit, a.slot, a.cand) < (b.penalty, b.delta_obj, b.unit, b.slot, b.cand)
}

impl Problem<'_> {
    fn local_search(&self, config: &MatchConfig, n_topics: usize) -> Result<Vec<Vec<usize>>> {
        let replacement = config.replacement;
        let start = self.greedy(replacement)?;
        let mut state = State::new(self, start, n_topics);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut best = state.clone();

        let mut feasible = false;
        for round in 0..=config.max_restarts {
            self.descend(&mut state, replacement);
            if state.penalty < best.penalty {
                best = state.clone();
            }
            if state.penalty == 0.0 && self.report(&state.chosen).all_pass() {
                feasible = true;
                break;
            }
            if round < config.max_restarts {
                self.kick(&mut state, &mut rng, replacement);
            }
        }
        if !feasible {
            return Err(self.infeasible(&best.chosen));
        }
        self.improve(&mut state, replacement);
        Ok(state.chosen)
    }

    /// Best-improvement descent on the balance penalty; ties broken by the
    /// smaller objective increase.
    fn descend(&self, state: &mut State, replacement: bool) {
        while state.penalty > 0.0 {
            let best = state
                .swaps(self, replacement)
                .filter(|s| s.penalty < state.penalty - 1e-12)
                .reduce_with(|a, b| if better(&a, &b) { a } else { b });
            match best {
                Some(s) => state.apply(self, s.unit, s.slot, s.cand),
                None => break,
            }
        }
    }

    fn kick<R: Rng>(&self, state: &mut State, rng: &mut R, replacement: bool) {
        let m = state.chosen.len();
        for _ in 0..(m / 10).max(1) {
            let u = rng.random_range(0..m);
            let slot = rng.random_range(0..self.k);
            let options: Vec<usize> = (0..self.units[u].theta.len())
                .filter(|&c| state.candidate_ok(self, u, c, replacement))
                .collect();
            if let Some(&c) = options.choose(rng) {
                state.apply(self, u, slot, c);
            }
        }
    }

    /// Lowers the objective with swaps that keep every cell feasible.
    fn improve(&self, state: &mut State, replacement: bool) {
        let mut tabu: HashSet<(usize, usize, usize)> = HashSet::new();
        loop {
            let best = state
                .swaps(self, replacement)
                .filter(|s| s.penalty == 0.0 && s.delta_obj < 0.0)
                .filter(|s| !tabu.contains(&(s.unit, state.chosen[s.unit][s.slot], s.cand)))
                .reduce_with(|a, b| if better(&a, &b) { a } else { b });
            let Some(s) = best else { break };
            let old = state.chosen[s.unit][s.slot];
            state.apply(self, s.unit, s.slot, s.cand);
            if !(state.penalty == 0.0 && self.report(&state.chosen).all_pass()) {
                let back = state.chosen[s.unit].iter().position(|&c| c == s.cand).expect("just placed");
                state.apply(self, s.unit, back, old);
                tabu.insert((s.unit, old, s.cand));
            }
        }
    }
}

/// Selects `peers_per_treated` controls per pool, minimizing total distance
/// subject to fine balance on all 55 cells.
pub fn solve_dom(panel: &Panel, pools: &[CandidatePool], config: &MatchConfig) -> Result<MatchResult> {
    config.validate()?;
    if pools.is_empty() {
        return Err(Error::invalid("no treated topics to match"));
    }
    for pool in pools {
        if pool.candidates.len() < config.peers_per_treated {
            return Err(Error::Unmatchable {
                topic: pool.unit.key.clone(),
                eligible: pool.candidates.len(),
                required: config.peers_per_treated,
            });
        }
    }
    let mut keys = HashSet::new();
    if let Some(dup) = pools.iter().find(|p| !keys.insert(p.unit.key.as_str())) {
        return Err(Error::invalid(format!("duplicate treated unit `{}`", dup.unit.key)));
    }
    let problem = Problem::new(panel, pools, config)?;
    let widest = pools.iter().map(|p| p.candidates.len()).max().unwrap_or(0);
    if pools.len() * widest <= config.exactness_budget {
        let chosen = problem.branch_and_bound(config.replacement)?;
        Ok(problem.assemble_result(chosen, true))
    } else {
        let chosen = problem.local_search(config, panel.trajectories().len())?;
        Ok(problem.assemble_result(chosen, false))
    }
}

/// Per-unit gaps over the 55 pre-period cells, computed from the panel.
pub fn pre_period_gaps(panel: &Panel, assignment: &Assignment) -> Result<[f64; N_CELLS]> {
    let year = assignment.reference_year;
    let target = pre_cells(panel.require(&assignment.topic_id)?, year, growth_transform)?;
    let mut sums = [0.0; N_CELLS];
    for id in &assignment.controls {
        let raw = pre_cells(panel.require(id)?, year, |v| v)?;
        for (s, v) in sums.iter_mut().zip(raw) {
            *s += v;
        }
    }
    let k = assignment.controls.len() as f64;
    let mut out = [0.0; N_CELLS];
    for c in 0..N_CELLS {
        out[c] = target[c] - growth_transform(sums[c] / k);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPValue {
    pub measure: String,
    pub t: i32,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrendReport {
    pub balance: BalanceReport,
    pub p_values: Vec<CellPValue>,
}

impl PretrendReport {
    pub fn min_p(&self) -> f64 {
        self.p_values.iter().map(|c| c.p_value).fold(1.0, f64::min)
    }
}

/// Recomputes the 55 pre-period gaps from the panel and runs a two-sided
/// one-sample t-test against zero in each cell.
pub fn verify_pretrends(panel: &Panel, result: &MatchResult, alpha: f64) -> Result<PretrendReport> {
    if result.assignments.len() < 2 {
        return Err(Error::invalid(
            "pre-trend verification needs at least two treated topics",
        ));
    }
    let gaps = result
        .assignments
        .values()
        .map(|a| pre_period_gaps(panel, a))
        .collect::<Result<Vec<_>>>()?;
    let balance = BalanceReport::from_gaps(&gaps, alpha);
    let mut column = vec![0.0; gaps.len()];
    let p_values = (0..N_CELLS)
        .map(|c| {
            for (slot, g) in column.iter_mut().zip(&gaps) {
                *slot = g[c];
            }
            let (measure, t) = cell_label(c);
            Ok(CellPValue {
                measure: measure.to_string(),
                t,
                p_value: stats::one_sample_t_p(&column)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PretrendReport { balance, p_values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{PrizeEvent, TopicTrajectory};

    fn measures() -> Vec<String> {
        CANONICAL_MEASURES.iter().map(|s| s.to_string()).collect()
    }

    fn topic(id: &str, discipline: &str, f: impl Fn(usize, usize) -> f64) -> TopicTrajectory {
        TopicTrajectory {
            topic_id: id.into(),
            discipline: discipline.into(),
            first_year: 1990,
            values: (0..N_MEASURES).map(|n| (0..25).map(|k| f(n, k)).collect()).collect(),
        }
    }

    #[test]
    fn theta_identical_is_zero() {
        let a = topic("a", "x", |n, k| (n * 7 + k * 3) as f64);
        assert_eq!(theta(&a, &a.clone(), 2005).unwrap(), 0.0);
    }

    #[test]
    fn theta_constant_log_gap() {
        // counts chosen so ln(y + 1) differ by exactly c in every cell
        let c: f64 = 0.5;
        let a = topic("a", "x", |_, _| 0.0);
        let b = topic("b", "x", move |_, _| c.exp() - 1.0);
        let th = theta(&a, &b, 2005).unwrap();
        assert!((th - c * c).abs() < 1e-12, "{th}");
    }

    #[test]
    fn theta_matches_brute_force_sum() {
        let a = topic("a", "x", |n, k| ((n + 1) * (k % 7)) as f64);
        let b = topic("b", "x", |n, k| ((n * 3 + k) % 11) as f64);
        let year = 2004;
        let mut total = 0.0;
        for n in 0..5 {
            for y in (year - 10)..=year {
                let ya = a.value(n, y).unwrap();
                let yb = b.value(n, y).unwrap();
                total += ((ya + 1.0).ln() - (yb + 1.0).ln()).powi(2);
            }
        }
        let expected = total / 55.0;
        assert!((theta(&a, &b, year).unwrap() - expected).abs() < 1e-14);
        assert!((theta(&b, &a, year).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn theta_requires_pre_window() {
        let a = topic("a", "x", |_, _| 1.0);
        assert!(matches!(theta(&a, &a, 1995), Err(Error::InsufficientPreWindow { .. })));
    }

    #[test]
    fn pool_with_three_candidates_is_unmatchable() {
        let mut trs = vec![topic("t", "x", |_, _| 5.0)];
        for i in 0..3 {
            trs.push(topic(&format!("c{i}"), "x", move |_, _| i as f64));
        }
        trs.push(topic("other", "y", |_, _| 5.0));
        let panel = Panel::new(measures(), trs, vec![PrizeEvent::new("t", 2005)]).unwrap();
        let err = build_pool(&panel, &panel.events()[0], &MatchConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Unmatchable { eligible: 3, .. }), "{err}");
    }

    #[test]
    fn pool_keeps_the_closest_candidates() {
        let mut trs = vec![topic("t", "x", |_, _| 50.0)];
        for i in 0..100 {
            trs.push(topic(&format!("c{i:03}"), "x", move |n, k| {
                ((i * 37 + n * 11 + k * 5) % 97) as f64
            }));
        }
        let panel = Panel::new(measures(), trs, vec![PrizeEvent::new("t", 2005)]).unwrap();
        let pool = build_pool(&panel, &panel.events()[0], &MatchConfig::default()).unwrap();
        assert_eq!(pool.candidates.len(), 40);

        let t = panel.trajectory("t").unwrap();
        let mut all: Vec<(f64, String)> = panel
            .trajectories()
            .iter()
            .filter(|c| c.topic_id != "t")
            .map(|c| (theta(t, c, 2005).unwrap(), c.topic_id.clone()))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expected: Vec<&str> = all[..40].iter().map(|(_, id)| id.as_str()).collect();
        let got: Vec<&str> = pool.candidates.iter().map(|c| c.candidate_id.as_str()).collect();
        assert_eq!(got, expected);
        assert!(pool.candidates.windows(2).all(|w| w[0].theta <= w[1].theta));
    }

    #[test]
    fn pool_excludes_treated_and_short_topics() {
        let mut trs = vec![topic("t", "x", |_, _| 5.0), topic("t2", "x", |_, _| 5.0)];
        for i in 0..6 {
            trs.push(topic(&format!("c{i}"), "x", move |_, _| i as f64));
        }
        let mut late = topic("late", "x", |_, _| 5.0);
        late.first_year = 2000;
        trs.push(late);
        let events = vec![PrizeEvent::new("t", 2005), PrizeEvent::new("t2", 2006)];
        let panel = Panel::new(measures(), trs, events).unwrap();
        let pool = build_pool(&panel, &panel.events()[0], &MatchConfig::default()).unwrap();
        let ids: Vec<&str> = pool.candidates.iter().map(|c| c.candidate_id.as_str()).collect();
        assert_eq!(ids.len(), 6);
        assert!(!ids.contains(&"t") && !ids.contains(&"t2") && !ids.contains(&"late"));
    }

    #[test]
    fn single_treated_with_five_candidates_takes_all() {
        let mut trs = vec![topic("t", "x", |n, k| (n + k) as f64)];
        for i in 0..5 {
            trs.push(topic(&format!("c{i}"), "x", move |n, k| (n + k + i) as f64));
        }
        let panel = Panel::new(measures(), trs, vec![PrizeEvent::new("t", 2005)]).unwrap();
        let result = match_panel(&panel, &MatchConfig::default()).unwrap();
        let a = &result.assignments["t"];
        assert_eq!(a.controls, vec!["c0", "c1", "c2", "c3", "c4"]);
        assert_eq!(result.balance.cells.len(), 55);
        assert!(result.exact);
    }

    #[test]
    fn combinations_count() {
        assert_eq!(combinations(8, 5).len(), 56);
        assert_eq!(combinations(5, 5), vec![vec![0, 1, 2, 3, 4]]);
        assert!(combinations(3, 5).is_empty());
    }

    #[test]
    fn balance_cell_degenerate_se() {
        let zero = BalanceReport::from_gaps(&[[0.0; N_CELLS], [0.0; N_CELLS]], 0.05);
        assert!(zero.all_pass());
        let shifted = BalanceReport::from_gaps(&[[0.5; N_CELLS], [0.5; N_CELLS]], 0.05);
        assert!(shifted.cells.iter().all(|c| !c.pass));
        assert!(shifted.worst_violation().is_some());
    }

    #[test]
    fn no_replacement_infeasible_when_controls_run_out() {
        let mut trs = vec![
            topic("t1", "x", |n, k| (n + k) as f64),
            topic("t2", "x", |n, k| (n + k + 1) as f64),
        ];
        for i in 0..6 {
            trs.push(topic(&format!("c{i}"), "x", move |n, k| (n * k + i) as f64));
        }
        let events = vec![PrizeEvent::new("t1", 2005), PrizeEvent::new("t2", 2005)];
        let panel = Panel::new(measures(), trs, events).unwrap();
        let config = MatchConfig {
            replacement: false,
            exactness_budget: 0,
            ..MatchConfig::default()
        };
        assert!(matches!(match_panel(&panel, &config), Err(Error::Infeasible(_))));
        let exact = MatchConfig {
            replacement: false,
            ..MatchConfig::default()
        };
        assert!(matches!(match_panel(&panel, &exact), Err(Error::Infeasible(_))));
    }

    #[test]
    fn verify_pretrends_needs_two_units() {
        let mut trs = vec![topic("t", "x", |n, k| (n + k) as f64)];
        for i in 0..5 {
            trs.push(topic(&format!("c{i}"), "x", move |n, k| (n + k + i) as f64));
        }
        let panel = Panel::new(measures(), trs, vec![PrizeEvent::new("t", 2005)]).unwrap();
        let result = match_panel(&panel, &MatchConfig::default()).unwrap();
        assert!(verify_pretrends(&panel, &result, 0.05).is_err());
    }
}
