//! Glue between weekly fractions, the reference ILI series and regression.

use thiserror::Error;

use crate::corpus::IliWeek;
use crate::query::QueryFractionSeries;
use crate::regress::{
    self, clamp_fraction, fit, Evaluation, RegressError, RegressionModel, WeekRange, WeeklySeries,
};

#[derive(Debug, Error)]
pub enum NowcastError {
    #[error("train weeks {train} and eval weeks {eval} overlap")]
    Overlap { train: WeekRange, eval: WeekRange },
    #[error("weeks {range} extend past the {available} available weeks")]
    Coverage { range: WeekRange, available: usize },
    #[error(transparent)]
    Regress(#[from] RegressError),
}

/// Per-week fraction with the document count it was computed over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeeklyFraction {
    pub week: u32,
    pub fraction: f64,
    pub total: usize,
}

impl From<&QueryFractionSeries> for Vec<WeeklyFraction> {
    fn from(s: &QueryFractionSeries) -> Self {
        s.weeks
            .iter()
            .map(|w| WeeklyFraction {
                week: w.week_index,
                fraction: w.fraction,
                total: w.total,
            })
            .collect()
    }
}

/// Reference proportions for weeks `1..=n`.
pub fn ili_series(weeks: &[IliWeek]) -> WeeklySeries {
    WeeklySeries::from_values(weeks.iter().map(IliWeek::proportion).collect())
}

/// Fractions clamped half a document away from 0 and 1.
pub fn clamped_series(fractions: &[WeeklyFraction]) -> Result<WeeklySeries, RegressError> {
    let values = fractions
        .iter()
        .map(|f| clamp_fraction(f.fraction, f.total))
        .collect::<Result<Vec<_>, _>>()?;
    WeeklySeries::new(fractions.iter().map(|f| f.week).collect(), values)
}

/// Fits on clamped fractions. `eps_clamp` is the smallest clamp floor seen in
/// training, i.e. half a document of the largest training week.
pub fn fit_fractions(
    fractions: &[WeeklyFraction],
    ili: &WeeklySeries,
    train: WeekRange,
) -> Result<RegressionModel, RegressError> {
    let q = clamped_series(fractions)?;
    let model = fit(&q, ili, train)?;
    let max_total = fractions
        .iter()
        .filter(|f| train.contains(f.week))
        .map(|f| f.total)
        .max()
        .unwrap_or(1)
        .max(2);
    Ok(model.with_eps_clamp(0.5 / max_total as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Nowcast {
    Fitted {
        model: RegressionModel,
        evaluation: Evaluation,
    },
    /// The predictor carries no information over the training weeks.
    Degenerate { reason: String },
}

fn check_split(train: WeekRange, eval: WeekRange, available: usize) -> Result<(), NowcastError> {
    if train.overlaps(&eval) {
        return Err(NowcastError::Overlap { train, eval });
    }
    for range in [train, eval] {
        if range.last as usize > available {
            return Err(NowcastError::Coverage { range, available });
        }
    }
    Ok(())
}

/// Fits on `train`, predicts every week and scores both windows.
pub fn nowcast(
    series: &QueryFractionSeries,
    ili: &[IliWeek],
    train: WeekRange,
    eval: WeekRange,
) -> Result<Nowcast, NowcastError> {
    let available = series.weeks.len().min(ili.len());
    check_split(train, eval, available)?;
    let training: Vec<_> = series
        .weeks
        .iter()
        .filter(|w| train.contains(w.week_index))
        .collect();
    if training.iter().all(|w| w.matches == 0) {
        return Ok(Nowcast::Degenerate {
            reason: format!("query matches no messages in training weeks {train}"),
        });
    }
    if training.iter().all(|w| w.matches == w.total) {
        return Ok(Nowcast::Degenerate {
            reason: format!("query matches every message in training weeks {train}"),
        });
    }
    let fractions: Vec<WeeklyFraction> = series.into();
    let fractions = &fractions[..available];
    let p = ili_series(&ili[..available]);
    let model = match fit_fractions(fractions, &p, train) {
        Ok(m) => m,
        Err(RegressError::Degenerate(reason)) => return Ok(Nowcast::Degenerate { reason }),
        Err(e) => return Err(e.into()),
    };
    let q = clamped_series(fractions)?;
    let evaluation = regress::evaluate(&model, &q, &p, eval)?;
    Ok(Nowcast::Fitted { model, evaluation })
}
