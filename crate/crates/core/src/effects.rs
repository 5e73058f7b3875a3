//! Counterfactual growth gaps.
//!
//! For a treated topic with matched peers, the expected trajectory at event
//! time `t` is the arithmetic mean of the peers' raw counts. The log gap is
//! `ln(Y + 1) - ln(Y_expected + 1)`; the ratio gap is
//! `(Y - Y_expected) / max(Y_expected, 1)`. Series average the per-topic gaps
//! over the topics observed at each `t`, with normal 95% bands.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{Assignment, MatchResult};
use crate::panel::{event_times, growth_transform, EventWindow, Panel, POST_YEARS, WINDOW_LEN};
use crate::stats::{mean_se, MeanSe, Z_95};

/// Which gap definition a series uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapKind {
    Log,
    Ratio,
}

impl GapKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GapKind::Log => "log",
            GapKind::Ratio => "ratio",
        }
    }
}

/// Converts a log gap into relative growth, `e^delta - 1`.
pub fn pct_growth(delta: f64) -> f64 {
    delta.exp_m1()
}

/// Mean of the peers' raw counts at event time `t`, over the peers observed
/// there.
pub fn expected_growth(peers: &[EventWindow], t: i32) -> Result<f64> {
    let present: Vec<f64> = peers.iter().filter_map(|w| w.get(t)).collect();
    if present.is_empty() {
        return Err(Error::invalid(format!("no peer observed at t={t}")));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// One treated topic's gap at every event time it is observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicGap {
    pub treated_id: String,
    pub measure: String,
    pub values: [Option<f64>; WINDOW_LEN],
    /// Event times where the ratio denominator was floored at one count.
    pub floored: usize,
}

impl TopicGap {
    pub fn at(&self, t: i32) -> Option<f64> {
        crate::panel::event_index(t).and_then(|k| self.values[k])
    }
}

fn gap_for(
    panel: &Panel,
    key: &str,
    assignment: &Assignment,
    measure: usize,
    kind: GapKind,
) -> Result<TopicGap> {
    let year = assignment.reference_year;
    let treated = panel.align_index(&assignment.topic_id, year, measure)?;
    let peers = assignment
        .controls
        .iter()
        .map(|id| panel.align_index(id, year, measure))
        .collect::<Result<Vec<_>>>()?;
    let mut values = [None; WINDOW_LEN];
    let mut floored = 0;
    for (k, t) in event_times().enumerate() {
        let (Some(y), Ok(expected)) = (treated.get(t), expected_growth(&peers, t)) else {
            continue;
        };
        values[k] = Some(match kind {
            GapKind::Log => growth_transform(y) - growth_transform(expected),
            GapKind::Ratio => {
                if expected < 1.0 {
                    floored += 1;
                }
                (y - expected) / expected.max(1.0)
            }
        });
    }
    Ok(TopicGap {
        treated_id: key.to_string(),
        measure: treated.measure,
        values,
        floored,
    })
}

/// Per-topic gaps for every assignment in `result`, in key order.
pub fn topic_gaps(panel: &Panel, result: &MatchResult, measure: &str, kind: GapKind) -> Result<Vec<TopicGap>> {
    let m = panel.measure_index(measure)?;
    let entries: Vec<(&String, &Assignment)> = result.assignments.iter().collect();
    entries
        .par_iter()
        .map(|(key, a)| gap_for(panel, key, a, m, kind))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectPoint {
    pub t: i32,
    /// Mean gap over topics observed at `t`; `None` when none are.
    pub delta: Option<f64>,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n: usize,
}

impl EffectPoint {
    pub fn ci_contains(&self, value: f64) -> bool {
        match (self.ci_low, self.ci_high) {
            (Some(lo), Some(hi)) => lo <= value && value <= hi,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSeries {
    pub measure: String,
    pub kind: GapKind,
    /// One point per event time, -10..=10.
    pub points: Vec<EffectPoint>,
    /// Topic-years where the ratio denominator was floored.
    pub floored: usize,
}

impl EffectSeries {
    pub fn at(&self, t: i32) -> &EffectPoint {
        &self.points[crate::panel::event_index(t).expect("t within window")]
    }

    /// Builds a series from per-topic gaps.
    pub fn from_gaps(measure: &str, kind: GapKind, gaps: &[TopicGap]) -> Self {
        let points = event_times()
            .enumerate()
            .map(|(k, t)| {
                let present: Vec<f64> = gaps.iter().filter_map(|g| g.values[k]).collect();
                point(t, mean_se(&present))
            })
            .collect();
        EffectSeries {
            measure: measure.to_string(),
            kind,
            points,
            floored: gaps.iter().map(|g| g.floored).sum(),
        }
    }

    /// Writes `measure,t,delta,ci_low,ci_high,n`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::invalid(format!("csv write failed: {e}"));
        w.write_record(CSV_HEADER).map_err(err)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for p in &self.points {
            w.write_record([
                self.measure.clone(),
                p.t.to_string(),
                opt(p.delta),
                opt(p.ci_low),
                opt(p.ci_high),
                p.n.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::invalid(e.to_string()))
    }
}

const CSV_HEADER: [&str; 6] = ["measure", "t", "delta", "ci_low", "ci_high", "n"];

fn point(t: i32, ms: MeanSe) -> EffectPoint {
    if ms.n == 0 {
        return EffectPoint {
            t,
            delta: None,
            se: None,
            ci_low: None,
            ci_high: None,
            n: 0,
        };
    }
    EffectPoint {
        t,
        delta: Some(ms.mean),
        se: ms.se,
        ci_low: ms.se.map(|se| ms.mean - Z_95 * se),
        ci_high: ms.se.map(|se| ms.mean + Z_95 * se),
        n: ms.n,
    }
}

/// Plot-ready rows read back from an effect CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectRow {
    pub measure: String,
    pub t: i32,
    pub delta: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n: usize,
}

/// Parses and validates an effect CSV: 21 rows, t ascending from -10, bands
/// ordered around the estimate.
pub fn read_effect_csv<R: Read>(reader: R, source: &str) -> Result<Vec<EffectRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::schema(source, e.to_string()))?;
    if headers.iter().ne(CSV_HEADER) {
        return Err(Error::schema(source, format!("expected header {CSV_HEADER:?}")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::schema(source, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let loc = |col: &str| format!("{source} line {line} column `{col}`");
        let opt = |col: &str, raw: &str| -> Result<Option<f64>> {
            if raw.is_empty() {
                Ok(None)
            } else {
                raw.parse()
                    .map(Some)
                    .map_err(|_| Error::schema(loc(col), format!("`{raw}` is not a number")))
            }
        };
        let row = EffectRow {
            measure: rec[0].to_string(),
            t: rec[1].parse().map_err(|_| Error::schema(loc("t"), "not an integer"))?,
            delta: opt("delta", &rec[2])?,
            ci_low: opt("ci_low", &rec[3])?,
            ci_high: opt("ci_high", &rec[4])?,
            n: rec[5].parse().map_err(|_| Error::schema(loc("n"), "not a count"))?,
        };
        if let (Some(lo), Some(d), Some(hi)) = (row.ci_low, row.delta, row.ci_high) {
            if !(lo <= d && d <= hi) {
                return Err(Error::schema(loc("ci_low"), "band does not bracket delta"));
            }
        }
        rows.push(row);
    }
    if rows.len() != WINDOW_LEN || rows.iter().zip(event_times()).any(|(r, t)| r.t != t) {
        return Err(Error::schema(source, "expected one row per t in -10..=10"));
    }
    Ok(rows)
}

/// Mean log-gap series with 95% bands.
pub fn delta_series(panel: &Panel, result: &MatchResult, measure: &str) -> Result<EffectSeries> {
    let gaps = topic_gaps(panel, result, measure, GapKind::Log)?;
    Ok(EffectSeries::from_gaps(measure, GapKind::Log, &gaps))
}

/// Mean ratio-gap series with 95% bands.
pub fn ratio_series(panel: &Panel, result: &MatchResult, measure: &str) -> Result<EffectSeries> {
    let gaps = topic_gaps(panel, result, measure, GapKind::Ratio)?;
    Ok(EffectSeries::from_gaps(measure, GapKind::Ratio, &gaps))
}

/// Mean over topics of each topic's average post-event gap (t = 1..=10).
pub fn post_period_mean(gaps: &[TopicGap]) -> MeanSe {
    let per_topic: Vec<f64> = gaps
        .iter()
        .filter_map(|g| {
            let post: Vec<f64> = (1..=POST_YEARS).filter_map(|t| g.at(t)).collect();
            (!post.is_empty()).then(|| post.iter().sum::<f64>() / post.len() as f64)
        })
        .collect();
    mean_se(&per_topic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{BalanceReport, MatchResult};
    use crate::panel::{PrizeEvent, TopicTrajectory, CANONICAL_MEASURES, N_MEASURES};
    use std::collections::BTreeMap;

    fn window(values: [Option<f64>; WINDOW_LEN]) -> EventWindow {
        EventWindow {
            topic_id: "p".into(),
            measure: "publications".into(),
            reference_year: 2000,
            values,
        }
    }

    #[test]
    fn expected_growth_means_present_peers() {
        let w = |v: Option<f64>| window([v; WINDOW_LEN]);
        let peers: Vec<_> = [2.0; 5].iter().map(|&v| w(Some(v))).collect();
        assert_eq!(expected_growth(&peers, 3).unwrap(), 2.0);
        let peers: Vec<_> = [0.0, 0.0, 0.0, 0.0, 10.0].iter().map(|&v| w(Some(v))).collect();
        assert_eq!(expected_growth(&peers, 3).unwrap(), 2.0);
        let peers = vec![w(Some(4.0)), w(None), w(Some(6.0)), w(None), w(Some(8.0))];
        assert_eq!(expected_growth(&peers, 3).unwrap(), 6.0);
        assert!(expected_growth(&[w(None), w(None)], 3).is_err());
    }

    #[test]
    fn pct_growth_reference_values() {
        assert!((pct_growth(0.3232) - 0.3815).abs() < 1e-4);
        assert!((pct_growth(0.4279) - 0.5340).abs() < 1e-4);
        assert_eq!(pct_growth(0.0), 0.0);
    }

    fn flat_panel(treated_scale: f64) -> (Panel, MatchResult) {
        let measures: Vec<String> = CANONICAL_MEASURES.iter().map(|s| s.to_string()).collect();
        let mk = |id: &str, v: f64| TopicTrajectory {
            topic_id: id.into(),
            discipline: "x".into(),
            first_year: 1980,
            values: vec![vec![v; 35]; N_MEASURES],
        };
        let mut trs = vec![mk("t1", 3.0 * treated_scale), mk("t2", 2.0 * treated_scale)];
        for i in 0..5 {
            trs.push(mk(&format!("c{i}"), 3.0));
            trs.push(mk(&format!("d{i}"), 2.0));
        }
        let events = vec![PrizeEvent::new("t1", 2000), PrizeEvent::new("t2", 2005)];
        let panel = Panel::new(measures, trs, events).unwrap();
        let mut assignments = BTreeMap::new();
        for (key, prefix, year) in [("t1", "c", 2000), ("t2", "d", 2005)] {
            assignments.insert(
                key.to_string(),
                Assignment {
                    topic_id: key.into(),
                    reference_year: year,
                    controls: (0..5).map(|i| format!("{prefix}{i}")).collect(),
                    distances: vec![0.0; 5],
                },
            );
        }
        let result = MatchResult {
            assignments,
            objective: 0.0,
            balance: BalanceReport::from_gaps(&[], 0.05),
            exact: true,
            unmatched: vec![],
        };
        (panel, result)
    }

    #[test]
    fn identical_peers_give_zero_series() {
        let (panel, result) = flat_panel(1.0);
        for kind in [GapKind::Log, GapKind::Ratio] {
            let gaps = topic_gaps(&panel, &result, "citations", kind).unwrap();
            let s = EffectSeries::from_gaps("citations", kind, &gaps);
            for p in &s.points {
                if p.n > 0 {
                    assert_eq!(p.delta, Some(0.0), "t={}", p.t);
                }
            }
        }
    }

    #[test]
    fn ragged_horizon_counts() {
        // data ends 2014: t1 (2000) sees all of t <= 10, t2 (2005) only t <= 9
        let (panel, result) = flat_panel(1.0);
        let s = delta_series(&panel, &result, "publications").unwrap();
        assert_eq!(s.at(-10).n, 2);
        assert_eq!(s.at(9).n, 2);
        assert_eq!(s.at(10).n, 1);
        let gaps = topic_gaps(&panel, &result, "publications", GapKind::Log).unwrap();
        for t in event_times() {
            let observed = gaps.iter().filter(|g| g.at(t).is_some()).count();
            assert_eq!(observed, s.at(t).n);
        }
    }

    #[test]
    fn ratio_gap_value() {
        // treated 1.5 x peers of 2 => Y = 3, expected 2 => 0.5
        let (panel, result) = flat_panel(1.5);
        let gaps = topic_gaps(&panel, &result, "publications", GapKind::Ratio).unwrap();
        let t2 = gaps.iter().find(|g| g.treated_id == "t2").unwrap();
        assert_eq!(t2.at(0), Some(0.5));
        assert_eq!(t2.floored, 0);
    }

    #[test]
    fn unknown_measure_is_rejected() {
        let (panel, result) = flat_panel(1.0);
        assert!(matches!(
            delta_series(&panel, &result, "patents"),
            Err(Error::UnknownMeasure(_))
        ));
    }

    #[test]
    fn csv_round_trip_validates() {
        let (panel, result) = flat_panel(1.2);
        let s = delta_series(&panel, &result, "publications").unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let rows = read_effect_csv(buf.as_slice(), "e.csv").unwrap();
        assert_eq!(rows.len(), 21);
        assert_eq!(rows[20].n, 1);
        assert_eq!(rows[0].delta, s.points[0].delta);
    }
}
