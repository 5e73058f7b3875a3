//! Linear models: ordinary least squares via QR, the matched
//! difference-in-differences regression, signal-strength regressions with
//! standardized coefficients, BIC comparison and k-fold cross-validation.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::effects::{topic_gaps, GapKind, TopicGap};
use crate::error::{Error, Result};
use crate::matching::MatchResult;
use crate::panel::{event_times, growth_transform, Panel};
use crate::stats::{sample_sd, t_two_sided_p};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Intercept,
    Continuous,
    Dummy,
}

/// Regressors (with names and kinds) and the response.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    names: Vec<String>,
    kinds: Vec<ColumnKind>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    clusters: Option<Vec<String>>,
}

impl DesignMatrix {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    fn subset(&self, rows: &[usize], keep_cols: &[usize]) -> DesignMatrix {
        let x = DMatrix::from_fn(rows.len(), keep_cols.len(), |i, j| self.x[(rows[i], keep_cols[j])]);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        DesignMatrix {
            names: keep_cols.iter().map(|&j| self.names[j].clone()).collect(),
            kinds: keep_cols.iter().map(|&j| self.kinds[j]).collect(),
            x,
            y,
            clusters: self
                .clusters
                .as_ref()
                .map(|c| rows.iter().map(|&i| c[i].clone()).collect()),
        }
    }
}

/// Column-by-column construction of a [`DesignMatrix`].
#[derive(Debug, Clone)]
pub struct DesignBuilder {
    y: Vec<f64>,
    names: Vec<String>,
    kinds: Vec<ColumnKind>,
    columns: Vec<Vec<f64>>,
    clusters: Option<Vec<String>>,
}

impl DesignBuilder {
    pub fn new(y: Vec<f64>) -> Self {
        DesignBuilder {
            y,
            names: Vec::new(),
            kinds: Vec::new(),
            columns: Vec::new(),
            clusters: None,
        }
    }

    fn push(&mut self, name: String, kind: ColumnKind, values: Vec<f64>) -> Result<()> {
        if values.len() != self.y.len() {
            return Err(Error::invalid(format!(
                "column `{name}` has {} rows, response has {}",
                values.len(),
                self.y.len()
            )));
        }
        if self.names.contains(&name) {
            return Err(Error::invalid(format!("duplicate column `{name}`")));
        }
        self.names.push(name);
        self.kinds.push(kind);
        self.columns.push(values);
        Ok(())
    }

    pub fn intercept(mut self) -> Self {
        let n = self.y.len();
        self.push("intercept".into(), ColumnKind::Intercept, vec![1.0; n])
            .expect("intercept is unique");
        self
    }

    pub fn continuous(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        self.push(name.to_string(), ColumnKind::Continuous, values)?;
        Ok(self)
    }

    /// 0/1 indicator entered as a single regressor (not standardized).
    pub fn indicator(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        self.push(name.to_string(), ColumnKind::Dummy, values)?;
        Ok(self)
    }

    /// Expands a categorical into dummies, dropping the lexicographically
    /// smallest level as the reference.
    pub fn categorical<S: AsRef<str>>(mut self, name: &str, labels: &[S]) -> Result<Self> {
        let levels: BTreeSet<&str> = labels.iter().map(AsRef::as_ref).collect();
        for level in levels.iter().skip(1) {
            let values = labels
                .iter()
                .map(|l| f64::from(u8::from(l.as_ref() == *level)))
                .collect();
            self.push(format!("{name}[{level}]"), ColumnKind::Dummy, values)?;
        }
        Ok(self)
    }

    /// Cluster labels for the optional cluster-robust standard errors.
    pub fn clusters(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.y.len() {
            return Err(Error::invalid("cluster labels must match the response length"));
        }
        self.clusters = Some(ids);
        Ok(self)
    }

    pub fn build(self) -> Result<DesignMatrix> {
        let n = self.y.len();
        let k = self.columns.len();
        if k == 0 {
            return Err(Error::invalid("design has no columns"));
        }
        if n <= k {
            return Err(Error::invalid(format!(
                "design needs more rows than columns ({n} rows, {k} columns)"
            )));
        }
        if self.y.iter().chain(self.columns.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("design contains non-finite values"));
        }
        let x = DMatrix::from_fn(n, k, |i, j| self.columns[j][i]);
        Ok(DesignMatrix {
            names: self.names,
            kinds: self.kinds,
            x,
            y: DVector::from_vec(self.y),
            clusters: self.clusters,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeKind {
    #[default]
    Classical,
    /// Sandwich estimator clustered on the design's cluster labels.
    ClusterRobust,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub p: f64,
    pub stars: String,
    /// `estimate * sd(x) / sd(y)` for continuous regressors.
    pub standardized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub coefficients: Vec<Coefficient>,
    pub r_squared: f64,
    pub rss: f64,
    pub bic: f64,
    pub n: usize,
    pub k: usize,
    pub se_kind: SeKind,
    /// Fingerprint of the response vector; fits are comparable only when equal.
    pub response_digest: String,
}

impl RegressionFit {
    pub fn coef(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

fn response_digest(y: &DVector<f64>) -> String {
    let mut h = Sha256::new();
    for v in y.iter() {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

struct Solved {
    beta: DVector<f64>,
    /// `(X'X)^-1`
    xtx_inv: DMatrix<f64>,
    residuals: DVector<f64>,
}

fn solve_qr(design: &DesignMatrix) -> Result<Solved> {
    let x = &design.x;
    let qr = x.clone().qr();
    let r = qr.r();
    let collinear: Vec<String> = (0..x.ncols())
        .filter(|&j| {
            let norm = x.column(j).norm();
            norm == 0.0 || r[(j, j)].abs() <= 1e-9 * norm
        })
        .map(|j| design.names[j].clone())
        .collect();
    if !collinear.is_empty() {
        return Err(Error::RankDeficient(collinear));
    }
    let qty = qr.q().transpose() * &design.y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient(design.names.clone()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(x.ncols(), x.ncols()))
        .ok_or_else(|| Error::RankDeficient(design.names.clone()))?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let residuals = &design.y - x * &beta;
    Ok(Solved {
        beta,
        xtx_inv,
        residuals,
    })
}

/// Least-squares fit with classical standard errors.
pub fn ols(design: &DesignMatrix) -> Result<RegressionFit> {
    ols_with(design, SeKind::Classical)
}

pub fn ols_with(design: &DesignMatrix, se_kind: SeKind) -> Result<RegressionFit> {
    let n = design.n_rows();
    let k = design.n_cols();
    let solved = solve_qr(design)?;
    let rss = solved.residuals.norm_squared();
    let df = (n - k) as f64;

    let cov = match se_kind {
        SeKind::Classical => &solved.xtx_inv * (rss / df),
        SeKind::ClusterRobust => {
            let labels = design
                .clusters
                .as_ref()
                .ok_or_else(|| Error::invalid("cluster-robust errors need cluster labels"))?;
            let mut scores: BTreeMap<&str, DVector<f64>> = BTreeMap::new();
            for (i, label) in labels.iter().enumerate() {
                let s = scores
                    .entry(label.as_str())
                    .or_insert_with(|| DVector::zeros(k));
                *s += design.x.row(i).transpose() * solved.residuals[i];
            }
            let g = scores.len() as f64;
            if g < 2.0 {
                return Err(Error::invalid("cluster-robust errors need at least two clusters"));
            }
            let mut meat = DMatrix::zeros(k, k);
            for s in scores.values() {
                meat += s * s.transpose();
            }
            let scale = g / (g - 1.0) * (n as f64 - 1.0) / df;
            &solved.xtx_inv * meat * &solved.xtx_inv * scale
        }
    };

    let y_mean = design.y.mean();
    let tss: f64 = design.y.iter().map(|v| (v - y_mean).powi(2)).sum();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { f64::NAN };
    let nf = n as f64;
    let bic = nf * (rss / nf).ln() + k as f64 * nf.ln();
    let y_sd = sample_sd(design.y.as_slice());

    let coefficients = (0..k)
        .map(|j| {
            let estimate = solved.beta[j];
            let se = cov[(j, j)].max(0.0).sqrt();
            let t = if se > 0.0 {
                estimate / se
            } else if estimate == 0.0 {
                0.0
            } else {
                f64::INFINITY.copysign(estimate)
            };
            let p = t_two_sided_p(t, df);
            let standardized = (design.kinds[j] == ColumnKind::Continuous).then(|| {
                let x_sd = sample_sd(design.x.column(j).as_slice());
                estimate * x_sd / y_sd
            });
            Coefficient {
                name: design.names[j].clone(),
                estimate,
                se,
                t,
                p,
                stars: stars(p).to_string(),
                standardized,
            }
        })
        .collect();

    Ok(RegressionFit {
        coefficients,
        r_squared,
        rss,
        bic,
        n,
        k,
        se_kind,
        response_digest: response_digest(&design.y),
    })
}

/// `BIC(augmented) - BIC(baseline)`; negative favors the augmented model.
pub fn delta_bic(baseline: &RegressionFit, augmented: &RegressionFit) -> Result<f64> {
    if baseline.n != augmented.n || baseline.response_digest != augmented.response_digest {
        return Err(Error::invalid(
            "BIC comparison needs fits on the same response and rows",
        ));
    }
    Ok(augmented.bic - baseline.bic)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_test: usize,
    /// Out-of-fold R^2 against the test fold's own mean.
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    pub full_r_squared: f64,
}

impl CvReport {
    pub fn mean_r_squared(&self) -> f64 {
        self.folds.iter().map(|f| f.r_squared).sum::<f64>() / self.folds.len() as f64
    }
}

/// k-fold cross-validation with a seeded shuffle. Dummy columns that are all
/// zero or collinear in a training split are dropped for that fold.
pub fn kfold_cv(design: &DesignMatrix, k: usize, seed: u64) -> Result<CvReport> {
    let n = design.n_rows();
    if k < 2 {
        return Err(Error::invalid("k-fold cross-validation needs k >= 2"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds the {n} observations")));
    }
    let full = ols(design)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let test: Vec<usize> = order.iter().copied().skip(fold).step_by(k).collect();
        let in_test: BTreeSet<usize> = test.iter().copied().collect();
        let train: Vec<usize> = order.iter().copied().filter(|i| !in_test.contains(i)).collect();
        let mut keep: Vec<usize> = (0..design.n_cols())
            .filter(|&j| train.iter().any(|&i| design.x[(i, j)] != 0.0))
            .collect();
        let beta = loop {
            let train_design = design.subset(&train, &keep);
            if train_design.n_rows() <= train_design.n_cols() {
                return Err(Error::invalid(format!(
                    "fold {fold} leaves too few training rows for {} columns",
                    train_design.n_cols()
                )));
            }
            match solve_qr(&train_design) {
                Ok(solved) => break solved.beta,
                // A fold holding every row of a baseline level makes the
                // remaining dummies of that factor sum to the intercept.
                Err(Error::RankDeficient(names))
                    if keep
                        .iter()
                        .filter(|&&j| names.contains(&design.names[j]))
                        .all(|&j| design.kinds[j] == ColumnKind::Dummy) =>
                {
                    keep.retain(|&j| !names.contains(&design.names[j]));
                }
                Err(e) => return Err(e),
            }
        };
        let test_y: Vec<f64> = test.iter().map(|&i| design.y[i]).collect();
        let test_mean = test_y.iter().sum::<f64>() / test_y.len() as f64;
        let mut sse = 0.0;
        let mut sst = 0.0;
        for (&i, &y) in test.iter().zip(&test_y) {
            let pred: f64 = keep.iter().zip(beta.iter()).map(|(&j, b)| design.x[(i, j)] * b).sum();
            sse += (y - pred).powi(2);
            sst += (y - test_mean).powi(2);
        }
        let r_squared = if sst > 0.0 {
            1.0 - sse / sst
        } else if sse == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        };
        folds.push(FoldResult {
            fold,
            n_test: test.len(),
            r_squared,
        });
    }
    Ok(CvReport {
        k,
        seed,
        folds,
        full_r_squared: full.r_squared,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DidOptions {
    pub se_kind: SeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidFit {
    pub measure: String,
    pub n_treated: usize,
    pub fit: RegressionFit,
}

impl DidFit {
    pub fn treat(&self) -> &Coefficient {
        self.fit.coef("treat").expect("did design has treat")
    }

    pub fn period(&self) -> &Coefficient {
        self.fit.coef("period").expect("did design has period")
    }

    pub fn treat_period(&self) -> &Coefficient {
        self.fit.coef("treat_period").expect("did design has treat_period")
    }
}

/// Matched difference-in-differences on transformed outcomes:
/// `z = b0 + b1 treat + b2 period + b3 treat*period + discipline FE + prize-year FE`.
/// Control rows use their treated topic's event year as the reference.
pub fn did(panel: &Panel, result: &MatchResult, measure: &str, options: DidOptions) -> Result<DidFit> {
    let m = panel.measure_index(measure)?;
    let mut y = Vec::new();
    let mut treat = Vec::new();
    let mut period = Vec::new();
    let mut discipline = Vec::new();
    let mut prize_year = Vec::new();
    let mut cluster = Vec::new();

    for a in result.assignments.values() {
        let year = a.reference_year;
        let topics = std::iter::once((&a.topic_id, 1.0)).chain(a.controls.iter().map(|c| (c, 0.0)));
        for (topic, is_treated) in topics {
            let tr = panel.require(topic)?;
            for t in event_times() {
                let Some(v) = tr.value(m, year + t) else { continue };
                y.push(growth_transform(v));
                treat.push(is_treated);
                period.push(f64::from(u8::from(t >= 1)));
                discipline.push(tr.discipline.clone());
                prize_year.push(year.to_string());
                cluster.push(topic.clone());
            }
        }
    }
    let has = |v: &[f64], x: f64| v.contains(&x);
    if !(has(&treat, 0.0) && has(&treat, 1.0)) {
        return Err(Error::invalid("difference-in-differences needs both groups"));
    }
    if !(has(&period, 0.0) && has(&period, 1.0)) {
        return Err(Error::invalid("difference-in-differences needs both periods"));
    }
    let interaction: Vec<f64> = treat.iter().zip(&period).map(|(a, b)| a * b).collect();
    let design = DesignBuilder::new(y)
        .intercept()
        .indicator("treat", treat)?
        .indicator("period", period)?
        .indicator("treat_period", interaction)?
        .categorical("discipline", &discipline)?
        .categorical("prize_year", &prize_year)?
        .clusters(cluster)?
        .build()?;
    Ok(DidFit {
        measure: measure.to_string(),
        n_treated: result.assignments.len(),
        fit: ols_with(&design, options.se_kind)?,
    })
}

/// Prize covariates that can enter a signal regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Recency,
    Money,
    Specialty,
}

impl Signal {
    pub const ALL: [Signal; 3] = [Signal::Recency, Signal::Money, Signal::Specialty];

    pub fn name(self) -> &'static str {
        match self {
            Signal::Recency => "recency",
            Signal::Money => "money",
            Signal::Specialty => "specialty",
        }
    }
}

/// Lags of the gap entered as controls.
pub const SIGNAL_LAGS: [i32; 4] = [-1, -2, -3, -10];
/// Event time of the regressed gap.
pub const SIGNAL_HORIZON: i32 = 10;

/// Builds the signal-strength design for one measure: the per-topic gap at
/// t = 10 on the chosen signals, winner-is-top flag, prize age, conferral
/// count, lagged gaps, and discipline and prize-year fixed effects.
pub fn signal_design(panel: &Panel, gaps: &[TopicGap], signals: &[Signal]) -> Result<DesignMatrix> {
    let rows: Vec<&TopicGap> = gaps.iter().filter(|g| g.at(SIGNAL_HORIZON).is_some()).collect();
    let mut cols: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut discipline = Vec::with_capacity(rows.len());
    let mut prize_year = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len());
    let flag = |v: Option<bool>| v.map(|b| f64::from(u8::from(b)));

    for g in &rows {
        let event = panel.event(&g.treated_id).ok_or_else(|| {
            Error::invalid(format!("signal regression row `{}` is not a treated topic", g.treated_id))
        })?;
        let missing = |column: &str| Error::MissingCovariate {
            topic: g.treated_id.clone(),
            column: column.to_string(),
        };
        for s in signals {
            let v = match s {
                Signal::Recency => event.recency,
                Signal::Money => flag(event.money),
                Signal::Specialty => flag(event.specialty),
            };
            cols.entry(s.name()).or_default().push(v.ok_or_else(|| missing(s.name()))?);
        }
        let controls = [
            ("winner_top", flag(event.winner_top)),
            ("prize_age", event.prize_age),
            ("conferrals", event.conferrals.map(f64::from)),
        ];
        for (name, v) in controls {
            cols.entry(name).or_default().push(v.ok_or_else(|| missing(name))?);
        }
        y.push(g.at(SIGNAL_HORIZON).expect("filtered"));
        discipline.push(panel.require(&g.treated_id)?.discipline.clone());
        prize_year.push(event.prize_year.to_string());
    }

    let mut b = DesignBuilder::new(y).intercept();
    for s in signals {
        let values = cols.remove(s.name()).unwrap_or_default();
        b = match s {
            Signal::Recency => b.continuous(s.name(), values)?,
            _ => b.indicator(s.name(), values)?,
        };
    }
    b = b
        .indicator("winner_top", cols.remove("winner_top").unwrap_or_default())?
        .continuous("prize_age", cols.remove("prize_age").unwrap_or_default())?
        .continuous("conferrals", cols.remove("conferrals").unwrap_or_default())?;
    for lag in SIGNAL_LAGS {
        let values = rows.iter().map(|g| g.at(lag).expect("pre-window is complete")).collect();
        b = b.continuous(&format!("lag_{}", -lag), values)?;
    }
    b.categorical("discipline", &discipline)?
        .categorical("prize_year", &prize_year)?
        .build()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalFit {
    pub measure: String,
    pub signals: Vec<Signal>,
    pub fit: RegressionFit,
}

/// Regresses each treated topic's gap at t = 10 on the prize signals and
/// controls for one measure.
pub fn signal_regression(
    panel: &Panel,
    result: &MatchResult,
    measure: &str,
    signals: &[Signal],
) -> Result<SignalFit> {
    let gaps = topic_gaps(panel, result, measure, GapKind::Log)?;
    let design = signal_design(panel, &gaps, signals)?;
    Ok(SignalFit {
        measure: measure.to_string(),
        signals: signals.to_vec(),
        fit: ols(&design)?,
    })
}
