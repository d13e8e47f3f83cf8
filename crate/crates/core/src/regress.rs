//! Logit-logit regression of ILI proportions on query fractions.
//!
//! The model is `logit(P) = beta1 * logit(Q) + beta2`, fitted by closed-form
//! ordinary least squares on the transformed training pairs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressError {
    #[error("logit undefined for {0} (must lie strictly inside (0, 1))")]
    Domain(f64),
    #[error("clamp requires a positive total, got 0")]
    ZeroTotal,
    #[error("fraction {0} outside [0, 1]")]
    FractionRange(f64),
    #[error("series are misaligned: {0}")]
    Alignment(String),
    #[error("degenerate fit: {0}")]
    Degenerate(String),
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("correlation undefined: {0} series is constant")]
    ConstantSeries(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid week range {0:?} (expected A:B with 1 <= A <= B)")]
    WeekRange(String),
}

pub type Result<T, E = RegressError> = std::result::Result<T, E>;

pub fn logit(x: f64) -> Result<f64> {
    if x > 0.0 && x < 1.0 {
        Ok((x / (1.0 - x)).ln())
    } else {
        Err(RegressError::Domain(x))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Continuity correction keeping a fraction of `total` documents at least
/// half a document away from 0 and 1.
pub fn clamp_fraction(x: f64, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(RegressError::ZeroTotal);
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(RegressError::FractionRange(x));
    }
    let eps = 0.5 / total as f64;
    Ok(x.max(eps).min(1.0 - eps))
}

/// Inclusive range of 1-based week indices, written `A:B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct WeekRange {
    pub first: u32,
    pub last: u32,
}

impl WeekRange {
    pub fn new(first: u32, last: u32) -> Result<Self> {
        if first >= 1 && first <= last {
            Ok(WeekRange { first, last })
        } else {
            Err(RegressError::WeekRange(format!("{first}:{last}")))
        }
    }

    pub fn contains(&self, week: u32) -> bool {
        self.first <= week && week <= self.last
    }

    pub fn len(&self) -> usize {
        (self.last - self.first + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn weeks(&self) -> impl Iterator<Item = u32> {
        self.first..=self.last
    }

    pub fn overlaps(&self, other: &WeekRange) -> bool {
        self.first <= other.last && other.first <= self.last
    }
}

impl fmt::Display for WeekRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.first, self.last)
    }
}

impl FromStr for WeekRange {
    type Err = RegressError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || RegressError::WeekRange(s.to_string());
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let first = a.trim().parse().map_err(|_| bad())?;
        let last = b.trim().parse().map_err(|_| bad())?;
        WeekRange::new(first, last).map_err(|_| bad())
    }
}

impl TryFrom<String> for WeekRange {
    type Error = RegressError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<WeekRange> for String {
    fn from(r: WeekRange) -> String {
        r.to_string()
    }
}

/// Values keyed by week index.
#[derive(Debug, Clone, PartialEq)]
pub struct WeeklySeries {
    week_indices: Vec<u32>,
    values: Vec<f64>,
}

impl WeeklySeries {
    pub fn new(week_indices: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if week_indices.len() != values.len() {
            return Err(RegressError::LengthMismatch(
                week_indices.len(),
                values.len(),
            ));
        }
        if week_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RegressError::Alignment(
                "week indices must strictly increase".into(),
            ));
        }
        Ok(WeeklySeries {
            week_indices,
            values,
        })
    }

    /// Series for weeks `1..=values.len()`.
    pub fn from_values(values: Vec<f64>) -> Self {
        let week_indices = (1..=values.len() as u32).collect();
        WeeklySeries {
            week_indices,
            values,
        }
    }

    pub fn week_indices(&self) -> &[u32] {
        &self.week_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, week: u32) -> Option<f64> {
        self.week_indices
            .binary_search(&week)
            .ok()
            .map(|i| self.values[i])
    }

    /// Values for the weeks of `range`, failing if any week is missing.
    pub fn window(&self, range: WeekRange) -> Result<Vec<f64>> {
        range
            .weeks()
            .map(|w| {
                self.get(w)
                    .ok_or_else(|| RegressError::Alignment(format!("week {w} missing from series")))
            })
            .collect()
    }
}

/// Fraction floor used when no totals are known.
pub const DEFAULT_EPS_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub beta1: f64,
    pub beta2: f64,
    pub train_weeks: WeekRange,
    /// Smallest fraction admitted by `predict`; inputs are clamped into
    /// `[eps_clamp, 1 - eps_clamp]`.
    pub eps_clamp: f64,
}

impl RegressionModel {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        RegressionModel {
            beta1,
            beta2,
            train_weeks: WeekRange { first: 1, last: 1 },
            eps_clamp: DEFAULT_EPS_CLAMP,
        }
    }

    pub fn with_eps_clamp(mut self, eps: f64) -> Self {
        assert!(eps > 0.0 && eps < 0.5, "eps_clamp must lie in (0, 0.5)");
        self.eps_clamp = eps;
        self
    }

    /// `sigmoid(beta1 * logit(q) + beta2)`.
    pub fn predict(&self, q: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&q) {
            return Err(RegressError::FractionRange(q));
        }
        let q = q.max(self.eps_clamp).min(1.0 - self.eps_clamp);
        Ok(sigmoid(self.linear(logit(q)?)))
    }

    pub fn linear(&self, logit_q: f64) -> f64 {
        self.beta1 * logit_q + self.beta2
    }

    /// Training squared error on the logit scale.
    pub fn sse(&self, q: &WeeklySeries, p: &WeeklySeries) -> Result<f64> {
        let (x, y) = transformed_pairs(q, p, self.train_weeks)?;
        Ok(x.iter()
            .zip(&y)
            .map(|(xi, yi)| (yi - self.linear(*xi)).powi(2))
            .sum())
    }
}

fn transformed_pairs(
    q: &WeeklySeries,
    p: &WeeklySeries,
    train: WeekRange,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if q.week_indices != p.week_indices {
        return Err(RegressError::Alignment(
            "query fraction and ILI series cover different weeks".into(),
        ));
    }
    let x = q
        .window(train)?
        .into_iter()
        .map(logit)
        .collect::<Result<Vec<_>>>()?;
    let y = p
        .window(train)?
        .into_iter()
        .map(logit)
        .collect::<Result<Vec<_>>>()?;
    Ok((x, y))
}

/// Ordinary least squares of `logit(p)` on `logit(q)` over `train` weeks.
pub fn fit(q: &WeeklySeries, p: &WeeklySeries, train: WeekRange) -> Result<RegressionModel> {
    let (x, y) = transformed_pairs(q, p, train)?;
    if x.len() < 3 {
        return Err(RegressError::TooFewPoints {
            need: 3,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (xi, yi) in x.iter().zip(&y) {
        let dx = xi - mean_x;
        sxx += dx * dx;
        sxy += dx * (yi - mean_y);
    }
    let scale = 1e-12 * (1.0 + mean_x.abs());
    if sxx <= n * scale * scale {
        return Err(RegressError::Degenerate(format!(
            "logit(Q) is constant over training weeks {train}"
        )));
    }
    let beta1 = sxy / sxx;
    let beta2 = mean_y - beta1 * mean_x;
    if !beta1.is_finite() || !beta2.is_finite() {
        return Err(RegressError::Degenerate("non-finite coefficients".into()));
    }
    Ok(RegressionModel {
        beta1,
        beta2,
        train_weeks: train,
        eps_clamp: DEFAULT_EPS_CLAMP,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson product-moment correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(RegressError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(RegressError::TooFewPoints {
            need: 2,
            got: a.len(),
        });
    }
    let (ma, mb) = (mean(a), mean(b));
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        saa += dx * dx;
        sbb += dy * dy;
        sab += dx * dy;
    }
    if saa == 0.0 {
        return Err(RegressError::ConstantSeries("first"));
    }
    if sbb == 0.0 {
        return Err(RegressError::ConstantSeries("second"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(RegressError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(RegressError::TooFewPoints { need: 1, got: 0 });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRow {
    pub week: u32,
    pub true_ili: f64,
    pub estimate: f64,
}

/// Fit quality over one window. Pearson is reported on both the logit and
/// the raw proportion scale; MSE is in squared percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub weeks: WeekRange,
    pub pearson_logit: Option<f64>,
    pub pearson_raw: Option<f64>,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<EstimateRow>,
    pub train: WindowScore,
    pub eval: WindowScore,
}

impl Evaluation {
    /// Writes `week,true_ili,estimate` with both columns in percent.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["week", "true_ili", "estimate"])?;
        for r in &self.rows {
            wtr.write_record([
                r.week.to_string(),
                (r.true_ili * 100.0).to_string(),
                (r.estimate * 100.0).to_string(),
            ])?;
        }
        wtr.flush()
    }
}

/// Predicts every week of `q` and scores the train and eval windows.
pub fn evaluate(
    model: &RegressionModel,
    q: &WeeklySeries,
    p: &WeeklySeries,
    eval: WeekRange,
) -> Result<Evaluation> {
    if q.week_indices != p.week_indices {
        return Err(RegressError::Alignment(
            "query fraction and ILI series cover different weeks".into(),
        ));
    }
    let mut rows = Vec::with_capacity(q.len());
    for (i, &week) in q.week_indices.iter().enumerate() {
        rows.push(EstimateRow {
            week,
            true_ili: p.values[i],
            estimate: model.predict(q.values[i])?,
        });
    }
    let score = |range: WeekRange| -> Result<WindowScore> {
        let picked: Vec<&EstimateRow> = rows.iter().filter(|r| range.contains(r.week)).collect();
        if picked.len() != range.len() {
            return Err(RegressError::Alignment(format!(
                "weeks {range} not fully covered"
            )));
        }
        let truth: Vec<f64> = picked.iter().map(|r| r.true_ili).collect();
        let est: Vec<f64> = picked.iter().map(|r| r.estimate).collect();
        let lt = truth
            .iter()
            .map(|v| logit(*v))
            .collect::<Result<Vec<_>>>()?;
        let le = est.iter().map(|v| logit(*v)).collect::<Result<Vec<_>>>()?;
        let pct = |v: &[f64]| v.iter().map(|x| x * 100.0).collect::<Vec<_>>();
        Ok(WindowScore {
            weeks: range,
            pearson_logit: pearson(&le, &lt).ok(),
            pearson_raw: pearson(&est, &truth).ok(),
            mse: mse(&pct(&est), &pct(&truth))?,
        })
    };
    Ok(Evaluation {
        train: score(model.train_weeks)?,
        eval: score(eval)?,
        rows,
    })
}
