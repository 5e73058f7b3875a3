use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use topicgrowth::diagnostics::{
    adjusted_trend, binomial_at, diversity_gap_regression, diversity_gaps, diversity_ks, funding_series,
    jaccard_null, matched_pairs, pair_jaccards, placebo, quantile, read_edges, read_entrant_history, read_funding,
    BinomialTest, DiversityGap, PlaceboRun,
};
use topicgrowth::effects::{
    delta_series, pct_growth, post_period_mean, ratio_series, read_effect_csv, topic_gaps, EffectPoint,
    EffectSeries, GapKind,
};
use topicgrowth::inference::{
    delta_bic, did, kfold_cv, signal_design, signal_regression, Coefficient, CvReport, DidFit, DidOptions,
    RegressionFit, Signal,
};
use topicgrowth::matching::{match_panel, verify_pretrends, BalanceCell, MatchConfig, MatchResult, PretrendReport};
use topicgrowth::panel::{read_events, read_trajectories, Panel};
use topicgrowth::stats::{KsResult, MeanSe};
use topicgrowth::synth::{
    generate, generate_edges, generate_entrant_history, generate_funding, ground_truth_check, Estimand, Estimate,
    GenSpec, GroundTruth, TruthReport,
};
use topicgrowth::Error;

use crate::artifacts::{read, read_json, read_prerequisite, sha256_hex, Run};
use crate::config::RunConfig;
use crate::error::CliError;

pub const MATCH_FILE: &str = "match_result.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
const ENTRANT_FILE: &str = "entrant_history.csv";
const FUNDING_FILE: &str = "funding.csv";
const EDGES_FILE: &str = "edges.csv";
/// Scientists linked to each synthetic topic, and the community pool they
/// are drawn from.
const EDGES_PER_TOPIC: usize = 15;
const EDGE_POOL: usize = 60;
const ENTRANT_LABELS: usize = 8;

/// Resolved configuration shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: RunConfig,
    /// Whether `--seed` was given; it then also overrides the generator seed.
    pub seed_flag: bool,
}

impl Ctx {
    fn out(&self) -> &Path {
        &self.cfg.out
    }

    fn finish(&self, run: Run, command: &str) -> Result<(), CliError> {
        run.finish(command, &self.cfg.hash(), self.cfg.seed)
    }

    fn measures(&self, panel: &Panel) -> Result<Vec<String>, CliError> {
        if self.cfg.analysis.measures.is_empty() {
            return Ok(panel.measures().to_vec());
        }
        for m in &self.cfg.analysis.measures {
            panel.measure_index(m)?;
        }
        Ok(self.cfg.analysis.measures.clone())
    }

    /// An optional auxiliary input: the configured path, else the file of
    /// that name in the output directory if `synth --extras` wrote one.
    fn aux_input(&self, configured: &Option<PathBuf>, default_name: &str) -> Option<PathBuf> {
        match configured {
            Some(p) => Some(p.clone()),
            None => Some(self.out().join(default_name)).filter(|p| p.exists()),
        }
    }
}

fn write_csv_rows<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
}

/// Digest identifying the panel inputs a match was computed from.
fn panel_digest(trajectories: &[u8], events: &[u8]) -> String {
    sha256_hex(format!("{}{}", sha256_hex(trajectories), sha256_hex(events)).as_bytes())
}

fn load_panel(ctx: &Ctx, run: &mut Run) -> Result<(Panel, String), CliError> {
    let (tp, ep) = (ctx.cfg.trajectories_path(), ctx.cfg.events_path());
    let (tb, eb) = (read(&tp)?, read(&ep)?);
    run.input(&tp)?;
    run.input(&ep)?;
    let (measures, trajectories) = read_trajectories(tb.as_slice(), &tp.display().to_string())?;
    let events = read_events(eb.as_slice(), &ep.display().to_string())?;
    let panel = Panel::new(measures, trajectories, events)?;
    log::info!(
        "loaded {} topics, {} events",
        panel.trajectories().len(),
        panel.events().len()
    );
    Ok((panel, panel_digest(&tb, &eb)))
}

/// Output of `match`, consumed by every later analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchArtifact {
    pub panel_digest: String,
    pub config: MatchConfig,
    pub result: MatchResult,
    /// Absent when fewer than two topics were matched.
    pub pretrends: Option<PretrendReport>,
}

fn load_matched(ctx: &Ctx, run: &mut Run) -> Result<(Panel, MatchArtifact), CliError> {
    let path = ctx.out().join(MATCH_FILE);
    let artifact: MatchArtifact = read_prerequisite(&path, "match")?;
    run.input(&path)?;
    let (panel, digest) = load_panel(ctx, run)?;
    if digest != artifact.panel_digest {
        return Err(CliError::Input(format!(
            "{} was computed from a different panel; rerun `match`",
            path.display()
        )));
    }
    Ok((panel, artifact))
}

pub fn synth(ctx: &Ctx, spec_path: Option<&Path>, extras: bool) -> Result<GenSpec, CliError> {
    let mut run = Run::new(ctx.out());
    let mut spec = match spec_path {
        Some(p) => {
            run.input(p)?;
            let text = String::from_utf8(read(p)?).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            GenSpec::from_toml(&text)?
        }
        None => ctx.cfg.synth.clone().ok_or_else(|| {
            CliError::Input("no generator spec: pass --spec or add a [synth] table to the config".into())
        })?,
    };
    if ctx.seed_flag {
        spec.seed = ctx.cfg.seed;
    }
    spec.validate()?;
    let (panel, truth) = generate(&spec)?;

    let mut traj = Vec::new();
    panel.write_trajectories(&mut traj)?;
    let mut events = Vec::new();
    panel.write_events(&mut events)?;
    // Round-trip through the loaders before publishing.
    let (measures, trajectories) = read_trajectories(traj.as_slice(), "generated trajectories")?;
    let reread = Panel::new(measures, trajectories, read_events(events.as_slice(), "generated events")?)?;
    if reread.trajectories() != panel.trajectories() || reread.events() != panel.events() {
        return Err(CliError::Internal("generated panel does not round-trip through CSV".into()));
    }
    run.write("trajectories.csv", &traj)?;
    run.write("events.csv", &events)?;
    let mut truth_bytes = Vec::new();
    truth.write_json(&mut truth_bytes)?;
    truth_bytes.push(b'\n');
    run.write(GROUND_TRUTH_FILE, &truth_bytes)?;

    if extras {
        let funding = write_csv_rows(&generate_funding(&panel, spec.seed)?)?;
        read_funding(funding.as_slice(), FUNDING_FILE)?;
        run.write(FUNDING_FILE, &funding)?;
        let edges = write_csv_rows(&generate_edges(&panel, EDGES_PER_TOPIC, EDGE_POOL, spec.seed)?)?;
        read_edges(edges.as_slice(), EDGES_FILE)?;
        run.write(EDGES_FILE, &edges)?;
    }
    ctx.finish(run, "synth")?;
    Ok(spec)
}

/// Row of `balance.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BalanceRow {
    measure: String,
    t: i32,
    mean: f64,
    se: Option<f64>,
    pass: bool,
    positive: usize,
    negative: usize,
    sign_p: f64,
    sign_pass: bool,
}

impl From<&BalanceCell> for BalanceRow {
    fn from(c: &BalanceCell) -> Self {
        BalanceRow {
            measure: c.measure.clone(),
            t: c.t,
            mean: c.mean,
            se: c.se,
            pass: c.pass,
            positive: c.positive,
            negative: c.negative,
            sign_p: c.sign_p,
            sign_pass: c.sign_pass,
        }
    }
}

pub fn match_cmd(ctx: &Ctx, no_replacement: bool) -> Result<(), CliError> {
    let mut run = Run::new(ctx.out());
    let (panel, digest) = load_panel(ctx, &mut run)?;
    let mut config = ctx.cfg.matching.clone();
    if no_replacement {
        config.replacement = false;
    }
    let result = match_panel(&panel, &config)?;
    for u in &result.unmatched {
        log::warn!("unmatched {}: {}", u.key, u.reason);
    }
    log::info!(
        "matched {} topics ({} path), objective {:.6}",
        result.assignments.len(),
        if result.exact { "exact" } else { "heuristic" },
        result.objective
    );
    let pretrends = if result.assignments.len() >= 2 {
        Some(verify_pretrends(&panel, &result, config.alpha)?)
    } else {
        None
    };
    let rows: Vec<BalanceRow> = result.balance.cells.iter().map(BalanceRow::from).collect();
    let csv_bytes = write_csv_rows(&rows)?;
    let reread: Vec<BalanceRow> = csv::Reader::from_reader(csv_bytes.as_slice())
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Internal(format!("balance table does not round-trip: {e}")))?;
    if reread.len() != rows.len() {
        return Err(CliError::Internal("balance table does not round-trip".into()));
    }
    run.write_json(
        MATCH_FILE,
        &MatchArtifact {
            panel_digest: digest,
            config,
            result,
            pretrends,
        },
    )?;
    run.write("balance.csv", &csv_bytes)?;
    ctx.finish(run, "match")
}

#[derive(Debug, Serialize)]
struct MeasureEffects {
    measure: String,
    horizon: i32,
    delta: EffectPoint,
    /// `exp(delta) - 1` at the horizon.
    pct_growth: Option<f64>,
    ratio: EffectPoint,
    /// Mean over topics of the average post-event log gap.
    post_mean: MeanSe,
    ratio_floored: usize,
}

fn write_series(run: &mut Run, name: &str, series: &EffectSeries) -> Result<(), CliError> {
    let mut bytes = Vec::new();
    series.write_csv(&mut bytes)?;
    read_effect_csv(bytes.as_slice(), name)?;
    run.write(name, &bytes)?;
    Ok(())
}

pub fn effects(ctx: &Ctx) -> Result<(), CliError> {
    let mut run = Run::new(ctx.out());
    let (panel, artifact) = load_matched(ctx, &mut run)?;
    let horizon = ctx.cfg.analysis.horizon;
    if topicgrowth::panel::event_index(horizon).is_none() {
        return Err(CliError::Input(format!("horizon {horizon} is outside the event window")));
    }
    let mut report = Vec::new();
    for m in ctx.measures(&panel)? {
        let delta = delta_series(&panel, &artifact.result, &m)?;
        let ratio = ratio_series(&panel, &artifact.result, &m)?;
        write_series(&mut run, &format!("effects_{m}_delta.csv"), &delta)?;
        write_series(&mut run, &format!("effects_{m}_ratio.csv"), &ratio)?;
        let gaps = topic_gaps(&panel, &artifact.result, &m, GapKind::Log)?;
        let at = delta.at(horizon).clone();
        report.push(MeasureEffects {
            measure: m,
            horizon,
            pct_growth: at.delta.map(pct_growth),
            delta: at,
            ratio: ratio.at(horizon).clone(),
            post_mean: post_period_mean(&gaps),
            ratio_floored: ratio.floored,
        });
    }
    run.write_json("effects.json", &report)?;
    ctx.finish(run, "effects")
}

pub fn did_cmd(ctx: &Ctx) -> Result<(), CliError> {
    let mut run = Run::new(ctx.out());
    let (panel, artifact) = load_matched(ctx, &mut run)?;
    let options = DidOptions {
        se_kind: ctx.cfg.analysis.did_se,
    };
    let fits = ctx
        .measures(&panel)?
        .iter()
        .map(|m| did(&panel, &artifact.result, m, options))
        .collect::<Result<Vec<DidFit>, Error>>()?;
    run.write_json("did.json", &fits)?;
    ctx.finish(run, "did")
}

#[derive(Debug, Serialize)]
struct PlaceboReport<'a> {
    /// Per measure, post-event years whose band contains zero.
    post_years_covering_zero: BTreeMap<String, usize>,
    run: &'a PlaceboRun,
}

pub fn placebo_cmd(ctx: &Ctx) -> Result<(), CliError> {
    let mut run = Run::new(ctx.out());
    let (panel, artifact) = load_matched(ctx, &mut run)?;
    let placebo_run = placebo(&panel, &artifact.result, &artifact.config, ctx.cfg.seed)?;
    let mut covering = BTreeMap::new();
    for m in ctx.measures(&panel)? {
        let series = placebo_run
            .series(&m)
            .ok_or_else(|| CliError::Internal(format!("placebo run lacks measure {m}")))?;
        write_series(&mut run, &format!("placebo_{m}.csv"), series)?;
        covering.insert(m, (1..=10).filter(|&t| series.at(t).ci_contains(0.0)).count());
    }
    run.write_json(
        "placebo.json",
        &PlaceboReport {
            post_years_covering_zero: covering,
            run: &placebo_run,
        },
    )?;
    ctx.finish(run, "placebo")
}

#[derive(Debug, Serialize)]
struct SignalModel {
    signals: Vec<Signal>,
    fit: RegressionFit,
    /// Against the baseline; negative favours this model.
    delta_bic: Option<f64>,
}

#[derive(Debug, Serialize)]
struct SignalReport {
    measure: String,
    baseline: RegressionFit,
    models: Vec<SignalModel>,
    /// Cross-validation of the model with every signal.
    cv: CvReport,
    cv_mean_r_squared: f64,
}

fn signal_report(ctx: &Ctx, panel: &Panel, result: &MatchResult, measure: &str) -> Result<SignalReport, Error> {
    let baseline = signal_regression(panel, result, measure, &[])?.fit;
    let mut sets: Vec<Vec<Signal>> = Signal::ALL.iter().map(|s| vec![*s]).collect();
    sets.push(Signal::ALL.to_vec());
    let models = sets
        .into_iter()
        .map(|signals| {
            let fit = signal_regression(panel, result, measure, &signals)?.fit;
            Ok(SignalModel {
                delta_bic: Some(delta_bic(&baseline, &fit)?),
                signals,
                fit,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let gaps = topic_gaps(panel, result, measure, GapKind::Log)?;
    let design = signal_design(panel, &gaps, &Signal::ALL)?;
    let cv = kfold_cv(&design, ctx.cfg.analysis.cv_folds, ctx.cfg.seed)?;
    Ok(SignalReport {
        measure: measure.to_string(),
        baseline,
        models,
        cv_mean_r_squared: cv.mean_r_squared(),
        cv,
    })
}

pub fn signal_cmd(ctx: &Ctx) -> Result<(), CliError> {
    let mut run = Run::new(ctx.out());
    let (panel, artifact) = load_matched(ctx, &mut run)?;
    let reports = ctx
        .measures(&panel)?
        .iter()
        .map(|m| signal_report(ctx, &panel, &artifact.result, m))
        .collect::<Result<Vec<_>, Error>>()?;
    run.write_json("signal.json", &reports)?;
    ctx.finish(run, "signal")
}

#[derive(Debug, Serialize)]
struct DiversityReport {
    measure: String,
    topics: usize,
    regression: RegressionFit,
    slope: Coefficient,
    ks_nonnegative: Option<KsResult>,
    ks_negative: Option<KsResult>,
}

#[derive(Debug, Serialize)]
struct JaccardReport {
    pairs: usize,
    observed_mean: f64,
    null_draws: usize,
    null_mean: f64,
    null_q95: f64,
}

#[derive(Debug, Serialize)]
struct FundingReport {
    treated_series: usize,
    mean_slope: f64,
    positive_significant: usize,
    negative_significant: usize,
    skipped: usize,
}

#[derive(Debug, Serialize)]
struct DiagnosticsReport {
    horizon: i32,
    /// Sign test of per-topic gaps at the horizon; absent when every gap is zero.
    binomial: BTreeMap<String, Option<BinomialTest>>,
    diversity: Option<DiversityReport>,
    jaccard: Option<JaccardReport>,
    funding: Option<FundingReport>,
}

fn gaps_at(panel: &Panel, result: &MatchResult, measure: &str, t: i32) -> Result<BTreeMap<String, f64>, Error> {
    Ok(topic_gaps(panel, result, measure, GapKind::Log)?
        .into_iter()
        .filter_map(|g| Some((g.treated_id.clone(), g.at(t)?)))
        .collect())
}

fn optional<T>(what: &str, r: Result<T, Error>) -> Option<T> {
    r.map_err(|e| log::warn!("{what}: {e}")).ok()
}

pub fn diagnostics(ctx: &Ctx) -> Result<(), CliError> {
    let mut run = Run::new(ctx.out());
    let (panel, artifact) = load_matched(ctx, &mut run)?;
    let result = &artifact.result;
    let horizon = ctx.cfg.analysis.horizon;
    let measures = ctx.measures(&panel)?;
    let mut binomial = BTreeMap::new();
    for m in &measures {
        let gaps = topic_gaps(&panel, result, m, GapKind::Log)?;
        binomial.insert(m.clone(), optional(&format!("sign test for {m}"), binomial_at(&gaps, horizon)));
    }

    let primary = &measures[0];
    let diversity = match ctx.aux_input(&ctx.cfg.input.entrant_history, ENTRANT_FILE) {
        None => None,
        Some(path) => {
            run.input(&path)?;
            let rows = read_entrant_history(read(&path)?.as_slice(), &path.display().to_string())?;
            let gaps: Vec<DiversityGap> = diversity_gaps(&rows)?;
            let delta = gaps_at(&panel, result, primary, horizon)?;
            let regression = diversity_gap_regression(&gaps, &delta, ctx.cfg.analysis.diversity_form)?;
            Some(DiversityReport {
                measure: primary.clone(),
                topics: regression.n,
                slope: regression.coef("delta_10").expect("diversity design").clone(),
                regression,
                ks_nonnegative: optional("diversity K-S (gap >= 0)", diversity_ks(&gaps, &delta, true)),
                ks_negative: optional("diversity K-S (gap < 0)", diversity_ks(&gaps, &delta, false)),
            })
        }
    };

    let jaccard = match ctx.aux_input(&ctx.cfg.input.edges, EDGES_FILE) {
        None => None,
        Some(path) => {
            run.input(&path)?;
            let edges = read_edges(read(&path)?.as_slice(), &path.display().to_string())?;
            let pairs = matched_pairs(result);
            let observed = pair_jaccards(&edges, &pairs);
            let draws = ctx.cfg.analysis.jaccard_draws;
            let null = jaccard_null(&edges, Some(&pairs), ctx.cfg.seed, draws)?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            Some(JaccardReport {
                pairs: pairs.len(),
                observed_mean: mean(&observed),
                null_draws: draws,
                null_mean: mean(&null),
                null_q95: quantile(&null, 0.95).unwrap_or(f64::NAN),
            })
        }
    };

    let funding = match ctx.aux_input(&ctx.cfg.input.funding, FUNDING_FILE) {
        None => None,
        Some(path) => {
            run.input(&path)?;
            let rows = read_funding(read(&path)?.as_slice(), &path.display().to_string())?;
            let mut report = FundingReport {
                treated_series: 0,
                mean_slope: 0.0,
                positive_significant: 0,
                negative_significant: 0,
                skipped: 0,
            };
            let mut slopes = Vec::new();
            for s in funding_series(&rows)?.iter().filter(|s| panel.is_treated(&s.topic_id)) {
                let Some(c) = adjusted_trend(s).ok().and_then(|f| f.coef("year").cloned()) else {
                    report.skipped += 1;
                    continue;
                };
                if c.p < 0.05 {
                    if c.estimate > 0.0 {
                        report.positive_significant += 1;
                    } else {
                        report.negative_significant += 1;
                    }
                }
                slopes.push(c.estimate);
            }
            report.treated_series = slopes.len();
            report.mean_slope = slopes.iter().sum::<f64>() / slopes.len().max(1) as f64;
            Some(report)
        }
    };

    run.write_json(
        "diagnostics.json",
        &DiagnosticsReport {
            horizon,
            binomial,
            diversity,
            jaccard,
            funding,
        },
    )?;
    ctx.finish(run, "diagnostics")
}

/// Writes a synthetic entrant history whose relative diversity tracks each
/// treated topic's estimated gap at the horizon.
fn synth_entrant_history(ctx: &Ctx, slope: f64, seed: u64) -> Result<(), CliError> {
    let mut run = Run::new(ctx.out());
    let (panel, artifact) = load_matched(ctx, &mut run)?;
    let measures = ctx.measures(&panel)?;
    let delta = gaps_at(&panel, &artifact.result, &measures[0], ctx.cfg.analysis.horizon)?;
    let bytes = write_csv_rows(&generate_entrant_history(&delta, slope, ENTRANT_LABELS, seed)?)?;
    read_entrant_history(bytes.as_slice(), ENTRANT_FILE)?;
    run.write(ENTRANT_FILE, &bytes)?;
    ctx.finish(run, "synth-entrants")
}

fn truth_check(ctx: &Ctx, spec: &GenSpec) -> Result<(), CliError> {
    let mut run = Run::new(ctx.out());
    let (panel, artifact) = load_matched(ctx, &mut run)?;
    let truth_path = ctx.out().join(GROUND_TRUTH_FILE);
    let truth: GroundTruth = read_json(&truth_path)?;
    run.input(&truth_path)?;
    let topics: Vec<String> = artifact.result.assignments.keys().cloned().collect();
    let options = DidOptions {
        se_kind: ctx.cfg.analysis.did_se,
    };
    let mut estimates = Vec::new();
    for m in ctx.measures(&panel)? {
        let point = delta_series(&panel, &artifact.result, &m)?.at(10).clone();
        if let (Some(d), Some(lo), Some(hi)) = (point.delta, point.ci_low, point.ci_high) {
            estimates.push(Estimate {
                estimator: "delta_10".into(),
                measure: m.clone(),
                estimand: Estimand::GapAt(10),
                estimate: d,
                ci_low: lo,
                ci_high: hi,
                topics: topics.clone(),
            });
        }
        let b3 = did(&panel, &artifact.result, &m, options)?.treat_period().clone();
        estimates.push(Estimate {
            estimator: "did_beta3".into(),
            measure: m,
            estimand: Estimand::PostMean,
            estimate: b3.estimate,
            ci_low: b3.estimate - 1.96 * b3.se,
            ci_high: b3.estimate + 1.96 * b3.se,
            topics: topics.clone(),
        });
    }
    let report: TruthReport = ground_truth_check(&truth, &spec.hash(), &estimates)?;
    run.write_json("truth_check.json", &report)?;
    ctx.finish(run, "truth-check")
}

pub struct PipelineOptions<'a> {
    pub spec: Option<&'a Path>,
    pub extras: bool,
    pub diversity_slope: f64,
    pub no_replacement: bool,
}

/// Runs every stage in order, each reading the previous stage's artifacts.
pub fn pipeline(ctx: &Ctx, opts: &PipelineOptions) -> Result<(), CliError> {
    let spec = if opts.spec.is_some() || ctx.cfg.synth.is_some() {
        Some(synth(ctx, opts.spec, opts.extras)?)
    } else {
        None
    };
    match_cmd(ctx, opts.no_replacement)?;
    effects(ctx)?;
    did_cmd(ctx)?;
    placebo_cmd(ctx)?;
    match signal_cmd(ctx) {
        Err(CliError::Input(msg)) if msg.starts_with("missing covariate") => {
            log::warn!("skipping signal regression: {msg}");
        }
        other => other?,
    }
    if let (Some(spec), true) = (&spec, opts.extras) {
        synth_entrant_history(ctx, opts.diversity_slope, spec.seed)?;
    }
    diagnostics(ctx)?;
    if let Some(spec) = &spec {
        truth_check(ctx, spec)?;
    }
    let mut run = Run::new(ctx.out());
    let (tp, ep) = (ctx.cfg.trajectories_path(), ctx.cfg.events_path());
    run.input(&tp)?;
    run.input(&ep)?;
    ctx.finish(run, "pipeline")
}
