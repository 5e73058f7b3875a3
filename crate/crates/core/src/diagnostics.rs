//! Robustness checks: placebo re-matching, per-topic sign tests, entropy
//! diversity of new entrants, Jaccard validation of matched pairs, and
//! funding-series normalization.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::hash::Hash;
use std::io::Read;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::effects::{EffectSeries, GapKind, TopicGap, topic_gaps};
use crate::error::{Error, Result};
use crate::inference::{ols, DesignBuilder, RegressionFit};
use crate::matching::{build_pools, solve_dom, MatchConfig, MatchResult, TreatedUnit};
use crate::panel::Panel;
use crate::stats::{binomial_two_sided_p, ks_two_sample, KsResult};

/// A matched peer relabeled as treated at its original topic's event year.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretendEvent {
    pub original_id: String,
    pub pretend_id: String,
    pub reference_year: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboRun {
    pub seed: u64,
    pub pretend: Vec<PretendEvent>,
    /// Matching of the pretend topics; keyed by the original topic id.
    pub result: MatchResult,
    pub series: Vec<EffectSeries>,
}

impl PlaceboRun {
    pub fn series(&self, measure: &str) -> Option<&EffectSeries> {
        self.series.iter().find(|s| s.measure == measure)
    }
}

/// Draws one peer per treated topic (seeded), matches the pretend topics
/// afresh with the same solver, and estimates their gap series. Original
/// treated topics and all pretend topics are kept out of the pretend pools.
pub fn placebo(panel: &Panel, result: &MatchResult, config: &MatchConfig, seed: u64) -> Result<PlaceboRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pretend = Vec::with_capacity(result.assignments.len());
    for (key, a) in &result.assignments {
        let chosen = a
            .controls
            .choose(&mut rng)
            .ok_or_else(|| Error::invalid(format!("`{key}` has no matched peers")))?;
        pretend.push(PretendEvent {
            original_id: key.clone(),
            pretend_id: chosen.clone(),
            reference_year: a.reference_year,
        });
    }
    let units: Vec<TreatedUnit> = pretend
        .iter()
        .map(|p| TreatedUnit {
            key: p.original_id.clone(),
            topic_id: p.pretend_id.clone(),
            reference_year: p.reference_year,
        })
        .collect();
    let excluded: HashSet<String> = pretend.iter().map(|p| p.pretend_id.clone()).collect();
    let set = build_pools(panel, &units, config, &excluded)?;
    let mut nested = solve_dom(panel, &set.pools, config)?;
    nested.unmatched = set.unmatchable;
    let series = panel
        .measures()
        .iter()
        .map(|m| {
            let gaps = topic_gaps(panel, &nested, m, GapKind::Log)?;
            Ok(EffectSeries::from_gaps(m, GapKind::Log, &gaps))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PlaceboRun {
        seed,
        pretend,
        result: nested,
        series,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinomialTest {
    pub positive: u64,
    pub negative: u64,
    /// Gaps exactly zero, left out of the trial count.
    pub ties: u64,
    /// `positive / (positive + negative)`.
    pub fraction: f64,
    pub p_value: f64,
}

/// Exact two-sided sign test of the share of positive gaps against 1/2.
pub fn binomial_fraction_test(gaps: &[f64]) -> Result<BinomialTest> {
    if gaps.is_empty() {
        return Err(Error::invalid("binomial test needs at least one gap"));
    }
    if gaps.iter().any(|g| g.is_nan()) {
        return Err(Error::invalid("binomial test gaps contain NaN"));
    }
    let positive = gaps.iter().filter(|&&g| g > 0.0).count() as u64;
    let negative = gaps.iter().filter(|&&g| g < 0.0).count() as u64;
    let ties = gaps.len() as u64 - positive - negative;
    let n = positive + negative;
    if n == 0 {
        return Err(Error::invalid("every gap is exactly zero"));
    }
    Ok(BinomialTest {
        positive,
        negative,
        ties,
        fraction: positive as f64 / n as f64,
        p_value: binomial_two_sided_p(n, positive, 0.5),
    })
}

/// Sign test on the per-topic gaps observed at event time `t`.
pub fn binomial_at(gaps: &[TopicGap], t: i32) -> Result<BinomialTest> {
    let values: Vec<f64> = gaps.iter().filter_map(|g| g.at(t)).collect();
    binomial_fraction_test(&values)
}

/// Distribution over discipline labels, held as nonnegative weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisciplineDistribution {
    weights: BTreeMap<String, f64>,
    total: f64,
}

impl DisciplineDistribution {
    /// From raw counts per discipline; the counts are normalized.
    pub fn from_counts<I, S>(counts: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut weights = BTreeMap::new();
        for (label, w) in counts {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid("discipline counts must be finite and nonnegative"));
            }
            *weights.entry(label.into()).or_insert(0.0) += w;
        }
        let total: f64 = weights.values().sum();
        if total <= 0.0 {
            return Err(Error::invalid("discipline counts sum to zero"));
        }
        Ok(DisciplineDistribution { weights, total })
    }

    /// From probabilities, which must sum to 1 within 1e-9.
    pub fn from_probabilities<I, S>(probabilities: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let d = Self::from_counts(probabilities)?;
        if (d.total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {}, not 1", d.total)));
        }
        Ok(d)
    }

    pub fn probability(&self, label: &str) -> f64 {
        self.weights.get(label).map_or(0.0, |w| w / self.total)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.weights.keys().map(String::as_str)
    }
}

/// Shannon entropy in bits. Evaluated as `log2 W - sum(w log2 w) / W` on the
/// unnormalized weights so that equal integer counts give `log2 k` exactly.
pub fn shannon_entropy(d: &DisciplineDistribution) -> f64 {
    let w_total = d.total;
    let s: f64 = d
        .weights
        .values()
        .filter(|&&w| w > 0.0)
        .map(|&w| w * w.log2())
        .sum();
    (w_total.log2() - s / w_total).max(0.0)
}

/// Two-sample K-S test.
pub fn ks_test(a: &[f64], b: &[f64]) -> Result<KsResult> {
    ks_two_sample(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrantGroup {
    Win,
    Peer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntrantRow {
    pub topic_id: String,
    pub group: EntrantGroup,
    pub discipline: String,
    pub count: f64,
}

fn csv_error(source: &str, e: csv::Error) -> Error {
    let location = match e.position() {
        Some(p) => format!("{source} line {}", p.line()),
        None => source.to_string(),
    };
    Error::schema(location, e.to_string())
}

fn read_rows<R: Read, T: serde::de::DeserializeOwned>(
    reader: R,
    source: &str,
    columns: &[&str],
) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_error(source, e))?;
    if headers.iter().ne(columns.iter().copied()) {
        return Err(Error::schema(
            format!("{source} header"),
            format!("expected columns {columns:?}"),
        ));
    }
    rdr.deserialize().map(|r| r.map_err(|e| csv_error(source, e))).collect()
}

/// Parses `entrant_history.csv`: `topic_id,group,discipline,count`, where
/// `group` is `win` for the treated topic and `peer` for its matched peers.
pub fn read_entrant_history<R: Read>(reader: R, source: &str) -> Result<Vec<EntrantRow>> {
    let rows: Vec<EntrantRow> = read_rows(reader, source, &["topic_id", "group", "discipline", "count"])?;
    if let Some(r) = rows.iter().find(|r| !(r.count.is_finite() && r.count >= 0.0)) {
        return Err(Error::schema(source, format!("negative count for `{}`", r.topic_id)));
    }
    Ok(rows)
}

/// Entropy of new entrants' prior disciplines in a treated topic and in its
/// peers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityGap {
    pub topic_id: String,
    pub entropy_win: f64,
    pub entropy_peer: f64,
    /// `S_win / S_peer - 1`; `None` when the peer entropy is zero.
    pub ratio: Option<f64>,
    /// `S_win - S_peer`.
    pub difference: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityForm {
    #[default]
    Ratio,
    Difference,
}

impl DiversityGap {
    pub fn value(&self, form: DiversityForm) -> Option<f64> {
        match form {
            DiversityForm::Ratio => self.ratio,
            DiversityForm::Difference => Some(self.difference),
        }
    }
}

/// Per-topic entropy gaps; topics lacking either group are skipped.
pub fn diversity_gaps(rows: &[EntrantRow]) -> Result<Vec<DiversityGap>> {
    let mut grouped: BTreeMap<&str, BTreeMap<EntrantGroup, Vec<(&str, f64)>>> = BTreeMap::new();
    for r in rows {
        grouped
            .entry(&r.topic_id)
            .or_default()
            .entry(r.group)
            .or_default()
            .push((&r.discipline, r.count));
    }
    let mut out = Vec::new();
    for (topic, groups) in grouped {
        let (Some(win), Some(peer)) = (groups.get(&EntrantGroup::Win), groups.get(&EntrantGroup::Peer)) else {
            continue;
        };
        let entropy_win = shannon_entropy(&DisciplineDistribution::from_counts(win.iter().copied())?);
        let entropy_peer = shannon_entropy(&DisciplineDistribution::from_counts(peer.iter().copied())?);
        out.push(DiversityGap {
            topic_id: topic.to_string(),
            entropy_win,
            entropy_peer,
            ratio: (entropy_peer > 0.0).then(|| entropy_win / entropy_peer - 1.0),
            difference: entropy_win - entropy_peer,
        });
    }
    Ok(out)
}

/// Regression of the relative diversity gap on `delta_10`, over topics
/// present in both inputs.
pub fn diversity_gap_regression(
    gaps: &[DiversityGap],
    delta_10: &BTreeMap<String, f64>,
    form: DiversityForm,
) -> Result<RegressionFit> {
    let (y, x): (Vec<f64>, Vec<f64>) = gaps
        .iter()
        .filter_map(|g| Some((g.value(form)?, *delta_10.get(&g.topic_id)?)))
        .unzip();
    let design = DesignBuilder::new(y).intercept().continuous("delta_10", x)?.build()?;
    ols(&design)
}

/// K-S comparison of treated versus peer entrant entropy, restricted to
/// topics with `delta_10 >= 0` (or `< 0` when `nonnegative` is false).
pub fn diversity_ks(
    gaps: &[DiversityGap],
    delta_10: &BTreeMap<String, f64>,
    nonnegative: bool,
) -> Result<KsResult> {
    let chosen: Vec<&DiversityGap> = gaps
        .iter()
        .filter(|g| delta_10.get(&g.topic_id).is_some_and(|&d| (d >= 0.0) == nonnegative))
        .collect();
    let win: Vec<f64> = chosen.iter().map(|g| g.entropy_win).collect();
    let peer: Vec<f64> = chosen.iter().map(|g| g.entropy_peer).collect();
    ks_test(&win, &peer)
}

/// `|a ∩ b| / |a ∪ b|`, or 0 when both sets are empty.
pub fn jaccard<T: Eq + Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// A scientist-topic link.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub scientist_id: String,
    pub topic_id: String,
}

/// Parses an edge list with header `scientist_id,topic_id`.
pub fn read_edges<R: Read>(reader: R, source: &str) -> Result<Vec<Edge>> {
    read_rows(reader, source, &["scientist_id", "topic_id"])
}

fn members(edges: &[Edge], scientists: impl Iterator<Item = usize>) -> BTreeMap<String, HashSet<usize>> {
    let mut out: BTreeMap<String, HashSet<usize>> = BTreeMap::new();
    for (e, s) in edges.iter().zip(scientists) {
        out.entry(e.topic_id.clone()).or_default().insert(s);
    }
    out
}

fn pair_values(sets: &BTreeMap<String, HashSet<usize>>, pairs: &[(String, String)]) -> Vec<f64> {
    let empty = HashSet::new();
    pairs
        .iter()
        .map(|(a, b)| jaccard(sets.get(a).unwrap_or(&empty), sets.get(b).unwrap_or(&empty)))
        .collect()
}

fn scientist_codes(edges: &[Edge]) -> Vec<usize> {
    let ids: BTreeSet<&str> = edges.iter().map(|e| e.scientist_id.as_str()).collect();
    let ids: Vec<&str> = ids.into_iter().collect();
    edges
        .iter()
        .map(|e| ids.binary_search(&e.scientist_id.as_str()).expect("collected above"))
        .collect()
}

/// Every unordered pair of distinct topics in the edge list.
pub fn all_topic_pairs(edges: &[Edge]) -> Vec<(String, String)> {
    let topics: BTreeSet<&str> = edges.iter().map(|e| e.topic_id.as_str()).collect();
    let topics: Vec<&str> = topics.into_iter().collect();
    let mut pairs = Vec::new();
    for (i, a) in topics.iter().enumerate() {
        for b in &topics[i + 1..] {
            pairs.push((a.to_string(), b.to_string()));
        }
    }
    pairs
}

/// Treated-peer pairs of a match result.
pub fn matched_pairs(result: &MatchResult) -> Vec<(String, String)> {
    result
        .assignments
        .values()
        .flat_map(|a| a.controls.iter().map(move |c| (a.topic_id.clone(), c.clone())))
        .collect()
}

/// Observed Jaccard similarity of the scientist sets of each pair.
pub fn pair_jaccards(edges: &[Edge], pairs: &[(String, String)]) -> Vec<f64> {
    pair_values(&members(edges, scientist_codes(edges).into_iter()), pairs)
}

/// Null distribution of pair Jaccards: each draw permutes the scientist
/// endpoints across edges (keeping every topic's edge count) and recomputes
/// the Jaccard of each pair. `pairs` defaults to all distinct topic pairs.
pub fn jaccard_null(
    edges: &[Edge],
    pairs: Option<&[(String, String)]>,
    seed: u64,
    draws: usize,
) -> Result<Vec<f64>> {
    if edges.is_empty() {
        return Err(Error::invalid("Jaccard null needs a nonempty edge list"));
    }
    let default_pairs;
    let pairs = match pairs {
        Some(p) => p,
        None => {
            default_pairs = all_topic_pairs(edges);
            &default_pairs
        }
    };
    let mut codes = scientist_codes(edges);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(draws * pairs.len());
    for _ in 0..draws {
        codes.shuffle(&mut rng);
        out.extend(pair_values(&members(edges, codes.iter().copied()), pairs));
    }
    Ok(out)
}

/// Linear-interpolated sample quantile, `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundingRow {
    pub topic_id: String,
    pub year: i32,
    pub mentions: f64,
    pub system_total: f64,
}

/// Parses `funding.csv`: `topic_id,year,mentions,system_total`.
pub fn read_funding<R: Read>(reader: R, source: &str) -> Result<Vec<FundingRow>> {
    read_rows(reader, source, &["topic_id", "year", "mentions", "system_total"])
}

/// One topic's yearly funding mentions and the system-wide totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundingSeries {
    pub topic_id: String,
    pub years: Vec<i32>,
    pub mentions: Vec<f64>,
    pub system_total: Vec<f64>,
}

/// Groups funding rows by topic, ordered by year.
pub fn funding_series(rows: &[FundingRow]) -> Result<Vec<FundingSeries>> {
    let mut by_topic: BTreeMap<&str, BTreeMap<i32, &FundingRow>> = BTreeMap::new();
    for r in rows {
        if by_topic.entry(&r.topic_id).or_default().insert(r.year, r).is_some() {
            return Err(Error::invalid(format!(
                "duplicate funding row for `{}` in {}",
                r.topic_id, r.year
            )));
        }
    }
    Ok(by_topic
        .into_iter()
        .map(|(topic, years)| FundingSeries {
            topic_id: topic.to_string(),
            years: years.keys().copied().collect(),
            mentions: years.values().map(|r| r.mentions).collect(),
            system_total: years.values().map(|r| r.system_total).collect(),
        })
        .collect())
}

/// `m(t) / G(t) * mean(G)` for each year of the series.
pub fn adjust_funding(f: &FundingSeries) -> Result<Vec<f64>> {
    if f.system_total.is_empty() || f.system_total.len() != f.mentions.len() {
        return Err(Error::invalid(format!("funding series `{}` is empty or ragged", f.topic_id)));
    }
    if let Some(i) = f.system_total.iter().position(|&g| !(g > 0.0 && g.is_finite())) {
        return Err(Error::invalid(format!(
            "system total for `{}` in {} must be positive",
            f.topic_id, f.years[i]
        )));
    }
    let mean_g = f.system_total.iter().sum::<f64>() / f.system_total.len() as f64;
    Ok(f.mentions
        .iter()
        .zip(&f.system_total)
        .map(|(m, g)| m / g * mean_g)
        .collect())
}

/// Linear trend of the adjusted series against calendar year.
pub fn adjusted_trend(f: &FundingSeries) -> Result<RegressionFit> {
    let adjusted = adjust_funding(f)?;
    let years = f.years.iter().map(|&y| f64::from(y)).collect();
    let design = DesignBuilder::new(adjusted).intercept().continuous("year", years)?.build()?;
    ols(&design)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&str]) -> HashSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn binomial_examples() {
        let gaps: Vec<f64> = (0..10).map(|i| if i < 5 { 1.0 } else { -1.0 }).collect();
        assert_eq!(binomial_fraction_test(&gaps).unwrap().p_value, 1.0);
        let r = binomial_fraction_test(&[1.0, 0.0, -2.0, 3.0]).unwrap();
        assert_eq!((r.positive, r.negative, r.ties), (2, 1, 1));
        assert!(binomial_fraction_test(&[]).is_err());
    }

    #[test]
    fn large_sample_sign_imbalance_is_significant() {
        let n = 11_539;
        let pos = (0.6118 * n as f64).round() as usize;
        let gaps: Vec<f64> = (0..n).map(|i| if i < pos { 1.0 } else { -1.0 }).collect();
        let r = binomial_fraction_test(&gaps).unwrap();
        assert!((r.fraction - 0.6118).abs() < 1e-4);
        assert!(r.p_value < 0.001);
    }

    #[test]
    fn entropy_examples() {
        let uniform = DisciplineDistribution::from_counts([("a", 1.0), ("b", 1.0), ("c", 1.0), ("d", 1.0)]).unwrap();
        assert_eq!(shannon_entropy(&uniform), 2.0);
        let point = DisciplineDistribution::from_probabilities([("a", 1.0), ("b", 0.0)]).unwrap();
        assert_eq!(shannon_entropy(&point), 0.0);
        let mixed = DisciplineDistribution::from_probabilities([("a", 0.5), ("b", 0.25), ("c", 0.25)]).unwrap();
        assert!((shannon_entropy(&mixed) - 1.5).abs() < 1e-15);
        assert!(DisciplineDistribution::from_probabilities([("a", 0.5), ("b", 0.4)]).is_err());
    }

    #[test]
    fn entropy_uniform_counts_are_exact() {
        for k in 1..=64 {
            let d = DisciplineDistribution::from_counts((0..k).map(|j| (format!("d{j}"), 1.0))).unwrap();
            assert_eq!(shannon_entropy(&d), (k as f64).log2(), "k = {k}");
        }
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&set(&["a", "b"]), &set(&["a", "b"])), 1.0);
        assert_eq!(jaccard(&set(&["a"]), &set(&["b"])), 0.0);
        assert_eq!(jaccard(&set(&["a", "b", "c"]), &set(&["b", "c", "d"])), 0.5);
        assert_eq!(jaccard(&set(&[]), &set(&[])), 0.0);
    }

    fn edge(s: &str, t: &str) -> Edge {
        Edge {
            scientist_id: s.into(),
            topic_id: t.into(),
        }
    }

    #[test]
    fn jaccard_null_single_topic_is_empty() {
        let edges = vec![edge("s1", "t"), edge("s2", "t")];
        assert!(jaccard_null(&edges, None, 1, 5).unwrap().is_empty());
        assert!(jaccard_null(&[], None, 1, 5).is_err());
    }

    #[test]
    fn jaccard_null_is_seeded() {
        let edges: Vec<Edge> = (0..40)
            .map(|i| edge(&format!("s{}", i % 13), &format!("t{}", i % 5)))
            .collect();
        let a = jaccard_null(&edges, None, 7, 20).unwrap();
        assert_eq!(a, jaccard_null(&edges, None, 7, 20).unwrap());
        assert_eq!(a.len(), 20 * 10);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn funding_examples() {
        let f = FundingSeries {
            topic_id: "x".into(),
            years: vec![2000, 2001],
            mentions: vec![1.0, 2.0],
            system_total: vec![10.0, 20.0],
        };
        assert_eq!(adjust_funding(&f).unwrap(), vec![1.5, 1.5]);
        let constant = FundingSeries {
            system_total: vec![7.0, 7.0],
            ..f.clone()
        };
        assert_eq!(adjust_funding(&constant).unwrap(), vec![1.0, 2.0]);
        let zero = FundingSeries {
            system_total: vec![7.0, 0.0],
            ..f
        };
        assert!(adjust_funding(&zero).is_err());
    }

    #[test]
    fn reads_entrant_history() {
        let text = "topic_id,group,discipline,count\na,win,bio,3\na,win,chem,1\na,peer,bio,4\nb,win,bio,2\n";
        let rows = read_entrant_history(text.as_bytes(), "h.csv").unwrap();
        let gaps = diversity_gaps(&rows).unwrap();
        assert_eq!(gaps.len(), 1);
        assert_eq!(gaps[0].entropy_peer, 0.0);
        assert_eq!(gaps[0].ratio, None);
        assert!(read_entrant_history("topic_id,group,discipline,count\na,both,bio,3\n".as_bytes(), "h").is_err());
    }

    #[test]
    fn diversity_regression_zero_gaps() {
        let gaps: Vec<DiversityGap> = (0..10)
            .map(|i| DiversityGap {
                topic_id: format!("t{i}"),
                entropy_win: 1.0,
                entropy_peer: 1.0,
                ratio: Some(0.0),
                difference: 0.0,
            })
            .collect();
        let delta: BTreeMap<String, f64> = (0..10).map(|i| (format!("t{i}"), i as f64 * 0.1)).collect();
        let fit = diversity_gap_regression(&gaps, &delta, DiversityForm::Ratio).unwrap();
        assert_eq!(fit.coef("delta_10").unwrap().estimate.abs(), 0.0);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), Some(2.0));
        assert_eq!(quantile(&[0.0, 1.0], 0.95), Some(0.95));
        assert_eq!(quantile(&[], 0.5), None);
    }
}
