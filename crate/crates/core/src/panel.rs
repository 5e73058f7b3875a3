//! Panel data model: yearly topic trajectories, treatment events, and the
//! event-time alignment used by every downstream estimator.
//!
//! A [`Panel`] is immutable once built. Construction validates every
//! invariant the estimators rely on (contiguous years, nonnegative counts,
//! events pointing at known topics with a complete pre-window), so the rest
//! of the crate can index without re-checking.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five growth measures every trajectory must carry, in canonical order.
pub const CANONICAL_MEASURES: [&str; 5] = [
    "publications",
    "citations",
    "top_scientist_citations",
    "incumbents",
    "new_entrants",
];

/// Number of matched measures.
pub const N_MEASURES: usize = CANONICAL_MEASURES.len();
/// Years before the event that form the matching window.
pub const PRE_YEARS: i32 = 10;
/// Years after the event reported by the effect estimators.
pub const POST_YEARS: i32 = 10;
/// Length of an event window, t in -10..=10.
pub const WINDOW_LEN: usize = (PRE_YEARS + POST_YEARS + 1) as usize;
/// Pre-window length, t in -10..=0.
pub const PRE_LEN: usize = (PRE_YEARS + 1) as usize;

const TRAJECTORY_KEY_COLUMNS: [&str; 3] = ["topic_id", "discipline", "year"];
const EVENT_COLUMNS: [&str; 8] = [
    "topic_id",
    "prize_year",
    "recency",
    "money",
    "specialty",
    "winner_top",
    "prize_age",
    "conferrals",
];

/// The transform applied to every count before taking differences:
/// `ln(y + 1)`, so that zero counts map to zero.
pub fn growth_transform(y: f64) -> f64 {
    y.ln_1p()
}

/// One topic's yearly series, one per panel measure.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicTrajectory {
    pub topic_id: String,
    pub discipline: String,
    pub first_year: i32,
    /// `values[m][k]` is measure `m` in year `first_year + k`.
    pub values: Vec<Vec<f64>>,
}

impl TopicTrajectory {
    pub fn n_years(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.n_years() as i32 - 1
    }

    /// Value of measure index `measure` in calendar `year`, if observed.
    pub fn value(&self, measure: usize, year: i32) -> Option<f64> {
        let offset = year.checked_sub(self.first_year)?;
        if offset < 0 {
            return None;
        }
        self.values.get(measure)?.get(offset as usize).copied()
    }

    /// True when the eleven years ending at `reference_year` are all observed.
    pub fn has_pre_window(&self, reference_year: i32) -> bool {
        reference_year - PRE_YEARS >= self.first_year && reference_year <= self.last_year()
    }

    fn pre_window_error(&self, reference_year: i32) -> Error {
        Error::InsufficientPreWindow {
            topic: self.topic_id.clone(),
            reference_year,
            needed_from: reference_year - PRE_YEARS,
            first_year: self.first_year,
            last_year: self.last_year(),
        }
    }

    /// Slice of the eleven pre-window values of one measure.
    pub(crate) fn pre_slice(&self, measure: usize, reference_year: i32) -> Result<&[f64]> {
        if !self.has_pre_window(reference_year) {
            return Err(self.pre_window_error(reference_year));
        }
        let start = (reference_year - PRE_YEARS - self.first_year) as usize;
        Ok(&self.values[measure][start..start + PRE_LEN])
    }
}

/// A treated topic's event year and the signal covariates attached to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrizeEvent {
    pub topic_id: String,
    pub prize_year: i32,
    pub recency: Option<f64>,
    pub money: Option<bool>,
    pub specialty: Option<bool>,
    pub winner_top: Option<bool>,
    pub prize_age: Option<f64>,
    pub conferrals: Option<u32>,
}

impl PrizeEvent {
    pub fn new(topic_id: impl Into<String>, prize_year: i32) -> Self {
        PrizeEvent {
            topic_id: topic_id.into(),
            prize_year,
            recency: None,
            money: None,
            specialty: None,
            winner_top: None,
            prize_age: None,
            conferrals: None,
        }
    }
}

/// One measure of one topic indexed by event time `t = year - reference_year`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventWindow {
    pub topic_id: String,
    pub measure: String,
    pub reference_year: i32,
    /// Index `k` holds event time `t = k - 10`; `None` past the data horizon.
    pub values: [Option<f64>; WINDOW_LEN],
}

impl EventWindow {
    pub fn get(&self, t: i32) -> Option<f64> {
        event_index(t).and_then(|k| self.values[k])
    }

    /// Last event time with an observed value.
    pub fn last_observed(&self) -> i32 {
        let k = self
            .values
            .iter()
            .rposition(Option::is_some)
            .expect("pre-window is always observed");
        k as i32 - PRE_YEARS
    }
}

/// Maps event time to a window index.
pub fn event_index(t: i32) -> Option<usize> {
    (-PRE_YEARS..=POST_YEARS)
        .contains(&t)
        .then(|| (t + PRE_YEARS) as usize)
}

/// Event times covered by a window, `-10..=10`.
pub fn event_times() -> impl Iterator<Item = i32> + Clone {
    -PRE_YEARS..=POST_YEARS
}

#[derive(Debug, Clone)]
pub struct Panel {
    measures: Vec<String>,
    trajectories: Vec<TopicTrajectory>,
    index: HashMap<String, usize>,
    events: Vec<PrizeEvent>,
    event_index: HashMap<String, usize>,
    disciplines: BTreeSet<String>,
}

impl Panel {
    /// Builds and validates a panel. `measures` must start with the five
    /// canonical measures; trajectories and events may come in any order.
    pub fn new(
        measures: Vec<String>,
        mut trajectories: Vec<TopicTrajectory>,
        mut events: Vec<PrizeEvent>,
    ) -> Result<Self> {
        if measures.len() < N_MEASURES
            || measures[..N_MEASURES]
                .iter()
                .zip(CANONICAL_MEASURES)
                .any(|(a, b)| a != b)
        {
            return Err(Error::invalid(format!(
                "measures must begin with {CANONICAL_MEASURES:?}, got {measures:?}"
            )));
        }
        let mut seen = HashSet::new();
        for m in &measures {
            if !seen.insert(m.as_str()) {
                return Err(Error::invalid(format!("duplicate measure `{m}`")));
            }
        }

        trajectories.sort_by(|a, b| a.topic_id.cmp(&b.topic_id));
        let mut index = HashMap::with_capacity(trajectories.len());
        for (i, tr) in trajectories.iter().enumerate() {
            if index.insert(tr.topic_id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate topic `{}`", tr.topic_id)));
            }
            if tr.values.len() != measures.len() {
                return Err(Error::invalid(format!(
                    "topic `{}` has {} measures, expected {}",
                    tr.topic_id,
                    tr.values.len(),
                    measures.len()
                )));
            }
            let n = tr.n_years();
            if n == 0 {
                return Err(Error::invalid(format!("topic `{}` has no years", tr.topic_id)));
            }
            for (m, series) in tr.values.iter().enumerate() {
                if series.len() != n {
                    return Err(Error::invalid(format!(
                        "topic `{}` measure `{}` has {} years, expected {n}",
                        tr.topic_id,
                        measures[m],
                        series.len()
                    )));
                }
                if let Some(bad) = series.iter().find(|v| !v.is_finite() || **v < 0.0) {
                    return Err(Error::invalid(format!(
                        "topic `{}` measure `{}` has invalid count {bad}",
                        tr.topic_id, measures[m]
                    )));
                }
            }
        }
        let disciplines = trajectories.iter().map(|t| t.discipline.clone()).collect();

        events.sort_by(|a, b| a.topic_id.cmp(&b.topic_id));
        let mut event_index = HashMap::with_capacity(events.len());
        for (i, ev) in events.iter().enumerate() {
            let Some(&ti) = index.get(&ev.topic_id) else {
                return Err(Error::UnknownTopic(ev.topic_id.clone()));
            };
            if event_index.insert(ev.topic_id.clone(), i).is_some() {
                return Err(Error::invalid(format!(
                    "more than one event for topic `{}`",
                    ev.topic_id
                )));
            }
            validate_event(ev, &trajectories[ti])?;
        }

        Ok(Panel {
            measures,
            trajectories,
            index,
            events,
            event_index,
            disciplines,
        })
    }

    pub fn measures(&self) -> &[String] {
        &self.measures
    }

    pub fn measure_index(&self, name: &str) -> Result<usize> {
        self.measures
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| Error::UnknownMeasure(name.to_string()))
    }

    /// Trajectories sorted by topic id.
    pub fn trajectories(&self) -> &[TopicTrajectory] {
        &self.trajectories
    }

    pub fn trajectory(&self, topic_id: &str) -> Option<&TopicTrajectory> {
        self.index.get(topic_id).map(|&i| &self.trajectories[i])
    }

    pub(crate) fn topic_index(&self, topic_id: &str) -> Option<usize> {
        self.index.get(topic_id).copied()
    }

    pub(crate) fn require(&self, topic_id: &str) -> Result<&TopicTrajectory> {
        self.trajectory(topic_id)
            .ok_or_else(|| Error::UnknownTopic(topic_id.to_string()))
    }

    /// Events sorted by topic id.
    pub fn events(&self) -> &[PrizeEvent] {
        &self.events
    }

    pub fn event(&self, topic_id: &str) -> Option<&PrizeEvent> {
        self.event_index.get(topic_id).map(|&i| &self.events[i])
    }

    pub fn is_treated(&self, topic_id: &str) -> bool {
        self.event_index.contains_key(topic_id)
    }

    pub fn disciplines(&self) -> &BTreeSet<String> {
        &self.disciplines
    }

    /// Aligns one measure of a topic to event time around `reference_year`.
    /// The pre-window must be complete; years past the trajectory's end are
    /// left absent.
    pub fn align(&self, topic_id: &str, reference_year: i32, measure: &str) -> Result<EventWindow> {
        let m = self.measure_index(measure)?;
        self.align_index(topic_id, reference_year, m)
    }

    pub(crate) fn align_index(
        &self,
        topic_id: &str,
        reference_year: i32,
        measure: usize,
    ) -> Result<EventWindow> {
        let tr = self.require(topic_id)?;
        if !tr.has_pre_window(reference_year) {
            return Err(tr.pre_window_error(reference_year));
        }
        let mut values = [None; WINDOW_LEN];
        for (k, t) in event_times().enumerate() {
            values[k] = tr.value(measure, reference_year + t);
        }
        Ok(EventWindow {
            topic_id: topic_id.to_string(),
            measure: self.measures[measure].clone(),
            reference_year,
            values,
        })
    }

    /// Writes the trajectories in the `trajectories.csv` layout, sorted by
    /// topic and year.
    pub fn write_trajectories<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = TRAJECTORY_KEY_COLUMNS.to_vec();
        header.extend(self.measures.iter().map(String::as_str));
        w.write_record(&header).map_err(csv_write_err)?;
        let mut row = Vec::with_capacity(header.len());
        for tr in &self.trajectories {
            for k in 0..tr.n_years() {
                row.clear();
                row.push(tr.topic_id.clone());
                row.push(tr.discipline.clone());
                row.push((tr.first_year + k as i32).to_string());
                row.extend(tr.values.iter().map(|s| s[k].to_string()));
                w.write_record(&row).map_err(csv_write_err)?;
            }
        }
        w.flush().map_err(|e| Error::invalid(e.to_string()))
    }

    /// Writes the events in the `events.csv` layout.
    pub fn write_events<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(EVENT_COLUMNS).map_err(csv_write_err)?;
        let flag = |f: Option<bool>| f.map_or(String::new(), |b| u8::from(b).to_string());
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for ev in &self.events {
            w.write_record([
                ev.topic_id.clone(),
                ev.prize_year.to_string(),
                opt(ev.recency),
                flag(ev.money),
                flag(ev.specialty),
                flag(ev.winner_top),
                opt(ev.prize_age),
                ev.conferrals.map_or(String::new(), |c| c.to_string()),
            ])
            .map_err(csv_write_err)?;
        }
        w.flush().map_err(|e| Error::invalid(e.to_string()))
    }
}

fn csv_write_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv write failed: {e}"))
}

fn validate_event(ev: &PrizeEvent, tr: &TopicTrajectory) -> Result<()> {
    if ev.prize_year - PRE_YEARS < tr.first_year {
        return Err(tr.pre_window_error(ev.prize_year));
    }
    if ev.prize_year + 1 > tr.last_year() {
        return Err(Error::invalid(format!(
            "event for topic `{}` in {} leaves no post-event year (data ends {})",
            ev.topic_id,
            ev.prize_year,
            tr.last_year()
        )));
    }
    if ev.prize_age.is_some_and(|a| !(a >= 0.0 && a.is_finite())) {
        return Err(Error::invalid(format!(
            "event for topic `{}` has negative prize_age",
            ev.topic_id
        )));
    }
    if ev.recency.is_some_and(|r| !r.is_finite()) {
        return Err(Error::invalid(format!(
            "event for topic `{}` has non-finite recency",
            ev.topic_id
        )));
    }
    Ok(())
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads and validates a panel from the two CSV inputs.
pub fn load_panel(trajectory_file: &Path, event_file: &Path) -> Result<Panel> {
    let (measures, trajectories) = read_trajectories(
        open(trajectory_file)?,
        &trajectory_file.display().to_string(),
    )?;
    let events = read_events(open(event_file)?, &event_file.display().to_string())?;
    Panel::new(measures, trajectories, events)
}

struct RowCtx<'a> {
    source: &'a str,
    line: u64,
}

impl RowCtx<'_> {
    fn err(&self, column: &str, message: impl Into<String>) -> Error {
        Error::schema(
            format!("{} line {} column `{column}`", self.source, self.line),
            message,
        )
    }

    fn count(&self, column: &str, raw: &str) -> Result<f64> {
        let v: f64 = raw
            .trim()
            .parse()
            .map_err(|_| self.err(column, format!("`{raw}` is not a number")))?;
        if !v.is_finite() || v < 0.0 {
            return Err(self.err(column, format!("count {raw} must be finite and nonnegative")));
        }
        Ok(v)
    }

    fn opt_real(&self, column: &str, raw: &str) -> Result<Option<f64>> {
        let raw = raw.trim();
        if raw.is_empty() {
            return Ok(None);
        }
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Some)
            .ok_or_else(|| self.err(column, format!("`{raw}` is not a finite number")))
    }

    fn opt_flag(&self, column: &str, raw: &str) -> Result<Option<bool>> {
        match raw.trim() {
            "" => Ok(None),
            "0" => Ok(Some(false)),
            "1" => Ok(Some(true)),
            other => Err(self.err(column, format!("flag must be 0 or 1, got `{other}`"))),
        }
    }
}

/// Parses `trajectories.csv` content. Returns the measure names (canonical
/// five followed by any extra outcome columns) and one trajectory per topic.
pub fn read_trajectories<R: Read>(
    reader: R,
    source: &str,
) -> Result<(Vec<String>, Vec<TopicTrajectory>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::Headers).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::schema(source, e.to_string()))?
        .clone();
    let expected: Vec<&str> = TRAJECTORY_KEY_COLUMNS
        .iter()
        .copied()
        .chain(CANONICAL_MEASURES)
        .collect();
    if headers.len() < expected.len() {
        return Err(Error::schema(
            format!("{source} header"),
            format!("expected columns {expected:?}, found {} columns", headers.len()),
        ));
    }
    for (i, want) in expected.iter().enumerate() {
        if &headers[i] != *want {
            return Err(Error::schema(
                format!("{source} header column {}", i + 1),
                format!("expected `{want}`, found `{}`", &headers[i]),
            ));
        }
    }
    let measures: Vec<String> = headers.iter().skip(3).map(str::to_string).collect();
    for (i, m) in measures.iter().enumerate() {
        if m.is_empty() || measures[..i].contains(m) {
            return Err(Error::schema(
                format!("{source} header"),
                format!("invalid or duplicate measure column `{m}`"),
            ));
        }
    }

    // topic -> (discipline, year -> values)
    let mut rows: HashMap<String, (String, Vec<(i32, Vec<f64>, u64)>)> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::schema(source, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let ctx = RowCtx { source, line };
        if record.len() != headers.len() {
            return Err(ctx.err(
                "*",
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        let topic = record[0].trim();
        if topic.is_empty() {
            return Err(ctx.err("topic_id", "empty topic id"));
        }
        let discipline = record[1].trim();
        if discipline.is_empty() {
            return Err(ctx.err("discipline", "empty discipline"));
        }
        let year: i32 = record[2]
            .trim()
            .parse()
            .map_err(|_| ctx.err("year", format!("`{}` is not a year", &record[2])))?;
        let values = measures
            .iter()
            .enumerate()
            .map(|(m, name)| ctx.count(name, &record[m + 3]))
            .collect::<Result<Vec<_>>>()?;
        let entry = rows
            .entry(topic.to_string())
            .or_insert_with(|| (discipline.to_string(), Vec::new()));
        if entry.0 != discipline {
            return Err(ctx.err(
                "discipline",
                format!("topic `{topic}` listed under `{}` and `{discipline}`", entry.0),
            ));
        }
        entry.1.push((year, values, line));
    }

    let mut trajectories = Vec::with_capacity(rows.len());
    for (topic_id, (discipline, mut years)) in rows {
        years.sort_by_key(|(y, _, _)| *y);
        for pair in years.windows(2) {
            let (prev, next) = (&pair[0], &pair[1]);
            let ctx = RowCtx { source, line: next.2 };
            if next.0 == prev.0 {
                return Err(ctx.err("year", format!("duplicate row for ({topic_id}, {})", next.0)));
            }
            if next.0 != prev.0 + 1 {
                return Err(ctx.err(
                    "year",
                    format!("topic `{topic_id}` has a gap between {} and {}", prev.0, next.0),
                ));
            }
        }
        let first_year = years[0].0;
        let mut values = vec![Vec::with_capacity(years.len()); measures.len()];
        for (_, v, _) in years {
            for (m, x) in v.into_iter().enumerate() {
                values[m].push(x);
            }
        }
        trajectories.push(TopicTrajectory {
            topic_id,
            discipline,
            first_year,
            values,
        });
    }
    trajectories.sort_by(|a, b| a.topic_id.cmp(&b.topic_id));
    Ok((measures, trajectories))
}

/// Parses `events.csv` content.
pub fn read_events<R: Read>(reader: R, source: &str) -> Result<Vec<PrizeEvent>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::Headers).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::schema(source, e.to_string()))?
        .clone();
    if headers.len() != EVENT_COLUMNS.len()
        || headers.iter().zip(EVENT_COLUMNS).any(|(a, b)| a != b)
    {
        return Err(Error::schema(
            format!("{source} header"),
            format!("expected columns {EVENT_COLUMNS:?}"),
        ));
    }
    let mut events = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::schema(source, e.to_string()))?;
        let ctx = RowCtx {
            source,
            line: record.position().map_or(0, |p| p.line()),
        };
        if record.len() != EVENT_COLUMNS.len() {
            return Err(ctx.err("*", format!("expected 8 fields, found {}", record.len())));
        }
        let topic_id = record[0].trim().to_string();
        if topic_id.is_empty() {
            return Err(ctx.err("topic_id", "empty topic id"));
        }
        let prize_year = record[1]
            .trim()
            .parse()
            .map_err(|_| ctx.err("prize_year", format!("`{}` is not a year", &record[1])))?;
        let prize_age = ctx.opt_real("prize_age", &record[6])?;
        if prize_age.is_some_and(|a| a < 0.0) {
            return Err(ctx.err("prize_age", "must be nonnegative"));
        }
        let conferrals = match record[7].trim() {
            "" => None,
            raw => Some(raw.parse::<u32>().map_err(|_| {
                ctx.err("conferrals", format!("`{raw}` is not a nonnegative count"))
            })?),
        };
        events.push(PrizeEvent {
            topic_id,
            prize_year,
            recency: ctx.opt_real("recency", &record[2])?,
            money: ctx.opt_flag("money", &record[3])?,
            specialty: ctx.opt_flag("specialty", &record[4])?,
            winner_top: ctx.opt_flag("winner_top", &record[5])?,
            prize_age,
            conferrals,
        });
    }
    Ok(events)
}
