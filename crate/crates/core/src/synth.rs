//! Synthetic panels with known ground truth.
//!
//! Each topic follows a log-linear trend with AR(1) noise per measure:
//! `ln y = level + offset_n + trend * (year - first_year) + u_n(year)`, and
//! counts are the rounded exponent. Treated topics get an extra log-lift of
//! `ramp(t) * delta` at post-event year `t`, where `delta` is the measure's
//! planted effect plus a linear function of the prize covariates. Treatment
//! is assigned at random, independent of the trajectories.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{Edge, EntrantGroup, EntrantRow, FundingRow};
use crate::error::{Error, Result};
use crate::panel::{
    growth_transform, Panel, PrizeEvent, TopicTrajectory, CANONICAL_MEASURES, N_MEASURES,
    POST_YEARS, PRE_YEARS,
};

/// How the lift grows over post-event years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ramp {
    /// `t / 10 * delta`, capped at `delta` after year 10.
    #[default]
    Linear,
    /// `delta` from the first post-event year on.
    Step,
}

impl Ramp {
    /// Fraction of `delta` applied at event time `t`.
    pub fn weight(self, t: i32) -> f64 {
        if t < 1 {
            return 0.0;
        }
        match self {
            Ramp::Linear => f64::from(t.min(POST_YEARS)) / f64::from(POST_YEARS),
            Ramp::Step => 1.0,
        }
    }
}

/// Coefficients mapping prize covariates to the per-topic lift. Covariates
/// enter centered on their population means, so the average lift stays at
/// the planted `effect`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalCoefficients {
    /// Per year of recency (drawn uniform on 0..30).
    pub recency: f64,
    pub money: f64,
    pub specialty: f64,
    pub winner_top: f64,
}

const RECENCY_MAX: f64 = 30.0;

impl SignalCoefficients {
    fn shift(&self, ev: &PrizeEvent) -> f64 {
        let flag = |f: Option<bool>| f64::from(u8::from(f.unwrap_or(false))) - 0.5;
        self.recency * (ev.recency.unwrap_or(RECENCY_MAX / 2.0) - RECENCY_MAX / 2.0)
            + self.money * flag(ev.money)
            + self.specialty * flag(ev.specialty)
            + self.winner_top * flag(ev.winner_top)
    }
}

/// Full description of a synthetic panel; generation is a pure function of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub seed: u64,
    pub n_disciplines: usize,
    pub topics_per_discipline: usize,
    pub first_year: i32,
    pub last_year: i32,
    /// Range of event years, inclusive.
    pub prize_year_min: i32,
    pub prize_year_max: i32,
    pub treated_fraction: f64,
    /// Mean and spread of the per-topic log level.
    pub level_mean: f64,
    pub level_sd: f64,
    /// Mean and spread of the per-topic yearly log growth.
    pub trend_mean: f64,
    pub trend_sd: f64,
    /// Stationary sd and lag-one autocorrelation of the log noise.
    pub noise_sd: f64,
    pub noise_ar: f64,
    /// Log offset of each canonical measure relative to the topic level.
    pub measure_offsets: [f64; N_MEASURES],
    /// Per-topic jitter of the measure offsets.
    pub offset_sd: f64,
    /// Planted log-lift per measure; absent measures get zero.
    pub effect: BTreeMap<String, f64>,
    pub ramp: Ramp,
    pub signal: SignalCoefficients,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 0,
            n_disciplines: 4,
            topics_per_discipline: 500,
            first_year: 1960,
            last_year: 2017,
            prize_year_min: 1975,
            prize_year_max: 2007,
            treated_fraction: 0.1,
            level_mean: 6.0,
            level_sd: 0.15,
            trend_mean: 0.02,
            trend_sd: 0.015,
            noise_sd: 0.005,
            noise_ar: 0.5,
            measure_offsets: [0.0, 2.0, 0.7, 0.5, -0.3],
            offset_sd: 0.01,
            effect: BTreeMap::new(),
            ramp: Ramp::Linear,
            signal: SignalCoefficients::default(),
        }
    }
}

impl GenSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: GenSpec = toml::from_str(text).map_err(|e| Error::schema("generator spec", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(format!("generator spec: {msg}")));
        if self.n_disciplines == 0 || self.topics_per_discipline == 0 {
            return bad("needs at least one discipline and one topic per discipline");
        }
        if self.prize_year_min > self.prize_year_max {
            return bad("prize_year_min exceeds prize_year_max");
        }
        if self.prize_year_min - PRE_YEARS < self.first_year {
            return bad("earliest event year leaves less than a full pre-window");
        }
        if self.prize_year_max >= self.last_year {
            return bad("latest event year leaves no post-event year");
        }
        if !(self.treated_fraction > 0.0 && self.treated_fraction < 1.0) {
            return bad("treated_fraction must lie in (0, 1)");
        }
        let spreads = [self.level_sd, self.trend_sd, self.noise_sd, self.offset_sd];
        if spreads.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("spreads must be finite and nonnegative");
        }
        if !(self.noise_ar.abs() < 1.0) {
            return bad("noise_ar must lie in (-1, 1)");
        }
        let params = [self.level_mean, self.trend_mean]
            .into_iter()
            .chain(self.measure_offsets)
            .chain(self.effect.values().copied());
        if params.into_iter().any(|v| !v.is_finite()) {
            return bad("parameters must be finite");
        }
        if let Some(m) = self.effect.keys().find(|m| !CANONICAL_MEASURES.contains(&m.as_str())) {
            return Err(Error::UnknownMeasure(m.clone()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(bytes))
    }

    fn n_treated(&self) -> usize {
        let total = self.n_disciplines * self.topics_per_discipline;
        ((self.treated_fraction * total as f64).round() as usize).clamp(1, total - 1)
    }

    fn effect_of(&self, measure: &str) -> f64 {
        self.effect.get(measure).copied().unwrap_or(0.0)
    }
}

/// The planted lift of one treated topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicTruth {
    pub prize_year: i32,
    /// Full lift per measure; the lift at event time `t` is `ramp(t) * delta`.
    pub delta: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec_hash: String,
    pub ramp: Ramp,
    pub effect: BTreeMap<String, f64>,
    pub signal: SignalCoefficients,
    pub topics: BTreeMap<String, TopicTruth>,
}

impl GroundTruth {
    /// True log-lift of one topic at event time `t`; zero for untreated topics.
    pub fn lift(&self, topic: &str, measure: &str, t: i32) -> f64 {
        self.topics
            .get(topic)
            .and_then(|tt| tt.delta.get(measure))
            .map_or(0.0, |d| self.ramp.weight(t) * d)
    }

    /// Mean true lift at `t` over the given treated topics.
    pub fn mean_lift<'a>(&self, measure: &str, t: i32, topics: impl IntoIterator<Item = &'a str>) -> f64 {
        let v: Vec<f64> = topics.into_iter().map(|id| self.lift(id, measure, t)).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Mean true lift over post-event years 1..=10 of the given topics.
    pub fn mean_post_lift<'a>(&self, measure: &str, topics: impl IntoIterator<Item = &'a str>) -> f64 {
        let ids: Vec<&str> = topics.into_iter().collect();
        (1..=POST_YEARS)
            .map(|t| self.mean_lift(measure, t, ids.iter().copied()))
            .sum::<f64>()
            / f64::from(POST_YEARS)
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn read_json<R: Read>(reader: R, source: &str) -> Result<Self> {
        serde_json::from_reader(reader).map_err(|e| Error::schema(source, e.to_string()))
    }
}

fn topic_id(discipline: usize, i: usize) -> String {
    format!("d{discipline:02}-t{i:05}")
}

fn discipline_name(discipline: usize) -> String {
    format!("disc{discipline:02}")
}

fn draw_events(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, PrizeEvent)> {
    let total = spec.n_disciplines * spec.topics_per_discipline;
    let mut chosen = index::sample(rng, total, spec.n_treated()).into_vec();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|k| {
            let id = topic_id(k / spec.topics_per_discipline, k % spec.topics_per_discipline);
            let year = rng.random_range(spec.prize_year_min..=spec.prize_year_max);
            let mut ev = PrizeEvent::new(id, year);
            ev.recency = Some((rng.random_range(0.0..RECENCY_MAX) * 10.0).round() / 10.0);
            ev.money = Some(rng.random_bool(0.5));
            ev.specialty = Some(rng.random_bool(0.5));
            ev.winner_top = Some(rng.random_bool(0.5));
            ev.prize_age = Some(f64::from(rng.random_range(1..=100u32)));
            ev.conferrals = Some(rng.random_range(1..=50));
            (k, ev)
        })
        .collect()
}

fn draw_topic(spec: &GenSpec, k: usize, lift: Option<(&PrizeEvent, [f64; N_MEASURES])>) -> TopicTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(k as u64 + 1);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut z = || -> f64 { std_normal.sample(&mut rng) };
    let level = spec.level_mean + spec.level_sd * z();
    let trend = spec.trend_mean + spec.trend_sd * z();
    let n_years = (spec.last_year - spec.first_year + 1) as usize;
    let innovation = spec.noise_sd * (1.0 - spec.noise_ar * spec.noise_ar).sqrt();
    let values = (0..N_MEASURES)
        .map(|n| {
            let offset = spec.measure_offsets[n] + spec.offset_sd * z();
            let mut u = spec.noise_sd * z();
            (0..n_years)
                .map(|i| {
                    if i > 0 {
                        u = spec.noise_ar * u + innovation * z();
                    }
                    let year = spec.first_year + i as i32;
                    let bump = lift.map_or(0.0, |(ev, delta)| spec.ramp.weight(year - ev.prize_year) * delta[n]);
                    (level + offset + trend * i as f64 + u + bump).exp().round()
                })
                .collect()
        })
        .collect();
    TopicTrajectory {
        topic_id: topic_id(k / spec.topics_per_discipline, k % spec.topics_per_discipline),
        discipline: discipline_name(k / spec.topics_per_discipline),
        first_year: spec.first_year,
        values,
    }
}

/// Draws a panel and its ground truth from `spec`. Topic `k` uses its own
/// substream of the seed, so topics are generated in parallel and the result
/// does not depend on the thread count.
pub fn generate(spec: &GenSpec) -> Result<(Panel, GroundTruth)> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let events = draw_events(spec, &mut master);

    let mut lifts: BTreeMap<usize, (&PrizeEvent, [f64; N_MEASURES])> = BTreeMap::new();
    let mut topics = BTreeMap::new();
    for (k, ev) in &events {
        let shift = spec.signal.shift(ev);
        let delta: [f64; N_MEASURES] = std::array::from_fn(|n| spec.effect_of(CANONICAL_MEASURES[n]) + shift);
        lifts.insert(*k, (ev, delta));
        topics.insert(
            ev.topic_id.clone(),
            TopicTruth {
                prize_year: ev.prize_year,
                delta: CANONICAL_MEASURES
                    .iter()
                    .zip(delta)
                    .map(|(m, d)| (m.to_string(), d))
                    .collect(),
            },
        );
    }

    let total = spec.n_disciplines * spec.topics_per_discipline;
    let trajectories: Vec<TopicTrajectory> = (0..total)
        .into_par_iter()
        .map(|k| draw_topic(spec, k, lifts.get(&k).copied()))
        .collect();
    let measures = CANONICAL_MEASURES.iter().map(|m| m.to_string()).collect();
    let panel = Panel::new(measures, trajectories, events.into_iter().map(|(_, ev)| ev).collect())?;
    let truth = GroundTruth {
        spec_hash: spec.hash(),
        ramp: spec.ramp,
        effect: spec.effect.clone(),
        signal: spec.signal,
        topics,
    };
    Ok((panel, truth))
}

/// Which quantity an estimate targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "t")]
pub enum Estimand {
    /// Mean gap at one event time.
    GapAt(i32),
    /// Mean post-period lift, the target of the interaction coefficient.
    PostMean,
}

/// One pipeline estimate to be checked against the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimator: String,
    pub measure: String,
    pub estimand: Estimand,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Treated topics the estimate averages over.
    pub topics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub estimator: String,
    pub measure: String,
    pub estimate: f64,
    pub truth: f64,
    pub bias: f64,
    pub covers: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthReport {
    pub spec_hash: String,
    pub rows: Vec<TruthRow>,
}

/// Compares estimates with the planted effects. `outputs_hash` is the spec
/// hash recorded alongside the outputs and must match the truth.
pub fn ground_truth_check(truth: &GroundTruth, outputs_hash: &str, estimates: &[Estimate]) -> Result<TruthReport> {
    if outputs_hash != truth.spec_hash {
        return Err(Error::HashMismatch {
            expected: truth.spec_hash.clone(),
            found: outputs_hash.to_string(),
        });
    }
    let rows = estimates
        .iter()
        .map(|e| {
            let ids = e.topics.iter().map(String::as_str);
            let value = match e.estimand {
                Estimand::GapAt(t) => truth.mean_lift(&e.measure, t, ids),
                Estimand::PostMean => truth.mean_post_lift(&e.measure, ids),
            };
            TruthRow {
                estimator: e.estimator.clone(),
                measure: e.measure.clone(),
                estimate: e.estimate,
                truth: value,
                bias: e.estimate - value,
                covers: e.ci_low <= value && value <= e.ci_high,
            }
        })
        .collect();
    Ok(TruthReport {
        spec_hash: truth.spec_hash.clone(),
        rows,
    })
}

fn aux_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Shannon entropy in bits of a probability vector.
fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.log2()).sum::<f64>()
}

fn temper(p: &[f64], tau: f64) -> Vec<f64> {
    let w: Vec<f64> = p.iter().map(|x| if *x > 0.0 { x.powf(tau) } else { 0.0 }).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

/// Entrant-history rows in which each treated topic's relative entrant
/// diversity is `slope * gap` (plus rounding noise). `gaps` maps treated
/// topic ids to the gap the diversity should track; peer distributions are
/// random over `n_labels` disciplines and the treated distribution is a
/// tempered copy of it with the target entropy ratio.
pub fn generate_entrant_history(
    gaps: &BTreeMap<String, f64>,
    slope: f64,
    n_labels: usize,
    seed: u64,
) -> Result<Vec<EntrantRow>> {
    if n_labels < 2 {
        return Err(Error::invalid("entrant history needs at least two disciplines"));
    }
    const SCALE: f64 = 100_000.0;
    let mut rng = aux_rng(seed, u64::MAX);
    let unit: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows = Vec::new();
    for (topic, gap) in gaps {
        let raw: Vec<f64> = (0..n_labels).map(|_| (1.5 * unit.sample(&mut rng)).exp()).collect();
        let s: f64 = raw.iter().sum();
        let peer: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let s_peer = entropy_bits(&peer);
        let target = (s_peer * (1.0 + slope * gap)).clamp(0.0, (n_labels as f64).log2());
        // Entropy falls as tau rises; bisect in log tau.
        let (mut lo, mut hi) = (-6.0_f64, 6.0_f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if entropy_bits(&temper(&peer, mid.exp())) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let win = temper(&peer, (0.5 * (lo + hi)).exp());
        for (group, dist) in [(EntrantGroup::Win, &win), (EntrantGroup::Peer, &peer)] {
            for (j, p) in dist.iter().enumerate() {
                rows.push(EntrantRow {
                    topic_id: topic.clone(),
                    group,
                    discipline: discipline_name(j),
                    count: (p * SCALE).round(),
                });
            }
        }
    }
    Ok(rows)
}

/// Funding mentions for every topic: a system total growing 5% a year and
/// per-topic mentions drawn Poisson in proportion to it, so the adjusted
/// series is flat in expectation however the topic itself grows.
pub fn generate_funding(panel: &Panel, seed: u64) -> Result<Vec<FundingRow>> {
    let mut rows = Vec::new();
    for (k, tr) in panel.trajectories().iter().enumerate() {
        let mut rng = aux_rng(seed, k as u64 + 1);
        let base = rng.random_range(2.0..20.0);
        for i in 0..tr.n_years() {
            let system_total = (1000.0 * (0.05 * i as f64).exp()).round();
            let rate = base * (0.05 * i as f64).exp();
            let mentions = Poisson::new(rate).map_err(|e| Error::invalid(e.to_string()))?.sample(&mut rng);
            rows.push(FundingRow {
                topic_id: tr.topic_id.clone(),
                year: tr.first_year + i as i32,
                mentions,
                system_total,
            });
        }
    }
    Ok(rows)
}

/// Scientist-topic links clustered by discipline and pre-event size: each
/// topic draws `per_topic` scientists from a community pool of `pool`
/// scientists shared with topics of similar mean transformed publications.
pub fn generate_edges(panel: &Panel, per_topic: usize, pool: usize, seed: u64) -> Result<Vec<Edge>> {
    if per_topic == 0 || pool < per_topic {
        return Err(Error::invalid("edge generator needs 0 < per_topic <= pool"));
    }
    const BINS: usize = 10;
    let mut by_discipline: BTreeMap<&str, Vec<(f64, usize)>> = BTreeMap::new();
    for (k, tr) in panel.trajectories().iter().enumerate() {
        let size = tr.values[0].iter().map(|&v| growth_transform(v)).sum::<f64>() / tr.n_years() as f64;
        by_discipline.entry(&tr.discipline).or_default().push((size, k));
    }
    let mut community = vec![String::new(); panel.trajectories().len()];
    for (d, mut topics) in by_discipline {
        topics.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n = topics.len();
        for (rank, (_, k)) in topics.into_iter().enumerate() {
            community[k] = format!("{d}-c{}", rank * BINS / n);
        }
    }
    let mut edges = Vec::new();
    for (k, tr) in panel.trajectories().iter().enumerate() {
        let mut rng = aux_rng(seed, k as u64 + 1);
        let members: BTreeSet<usize> = index::sample(&mut rng, pool, per_topic).into_iter().collect();
        edges.extend(members.into_iter().map(|m| Edge {
            scientist_id: format!("{}-s{m:04}", community[k]),
            topic_id: tr.topic_id.clone(),
        }));
    }
    Ok(edges)
}
