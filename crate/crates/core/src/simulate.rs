//! False-alarm simulation: inject resampled spurious messages into chosen
//! weeks and measure how far each method's ILI estimate moves.
//!
//! Damage is scored against the method's own un-injected estimate for the
//! same week, on the percentage-point scale, so a week that receives nothing
//! contributes exactly zero.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::Duration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{hard_query_fraction, soft_query_fraction, ClassifierModel, ClassifyError};
use crate::corpus::{Message, TokenizedMessage, WeekBucket};
use crate::nowcast::{fit_fractions, WeeklyFraction};
use crate::query::{query_fraction, Query, QueryError, Term};
use crate::regress::{clamp_fraction, mse, RegressError, RegressionModel, WeekRange, WeeklySeries};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{0} marker list is empty")]
    EmptyMarkers(&'static str),
    #[error("text marker {0:?} has no tokens")]
    BadMarker(String),
    #[error("spurious pool is empty: no gate-matching message has an author containing any of {authors:?} or text containing any of {texts:?}; widen the markers")]
    EmptyPool {
        authors: Vec<String>,
        texts: Vec<String>,
    },
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("no regression model for method {0}")]
    MissingModel(Method),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Regress(#[from] RegressError),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "keywords")]
    Keywords,
    #[serde(rename = "classify-soft")]
    ClassifySoft,
    #[serde(rename = "classify-hard")]
    ClassifyHard,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Keywords, Method::ClassifySoft, Method::ClassifyHard];

    pub fn id(&self) -> &'static str {
        match self {
            Method::Keywords => "keywords",
            Method::ClassifySoft => "classify-soft",
            Method::ClassifyHard => "classify-hard",
        }
    }

    /// The method's (unclamped) fraction for one week.
    pub fn fraction(&self, q: &Query, bucket: &WeekBucket, clf: &ClassifierModel) -> Result<f64> {
        Ok(match self {
            Method::Keywords => query_fraction(q, bucket)?,
            Method::ClassifySoft => soft_query_fraction(q, bucket, clf)?,
            Method::ClassifyHard => hard_query_fraction(q, bucket, clf)?,
        })
    }

    pub fn weekly_fractions(
        &self,
        q: &Query,
        buckets: &[WeekBucket],
        clf: &ClassifierModel,
    ) -> Result<Vec<WeeklyFraction>> {
        buckets
            .iter()
            .map(|b| {
                Ok(WeeklyFraction {
                    week: b.week_index,
                    fraction: self.fraction(q, b, clf)?,
                    total: b.len(),
                })
            })
            .collect()
    }

    /// Estimated ILI for one week, in percent.
    pub fn estimate_pct(
        &self,
        q: &Query,
        bucket: &WeekBucket,
        clf: &ClassifierModel,
        model: &RegressionModel,
    ) -> Result<f64> {
        let f = clamp_fraction(self.fraction(q, bucket, clf)?, bucket.len())?;
        Ok(100.0 * model.predict(f)?)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Fits one regression per method on un-injected data.
pub fn fit_method_models(
    buckets: &[WeekBucket],
    q: &Query,
    clf: &ClassifierModel,
    ili: &WeeklySeries,
    train: WeekRange,
    methods: &[Method],
) -> Result<BTreeMap<Method, RegressionModel>> {
    methods
        .iter()
        .map(|m| {
            let fractions = m.weekly_fractions(q, buckets, clf)?;
            Ok((*m, fit_fractions(&fractions, ili, train)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolRules {
    pub author_markers: Vec<String>,
    pub text_markers: Vec<String>,
}

impl Default for PoolRules {
    fn default() -> Self {
        PoolRules {
            author_markers: vec!["news".into(), "reuters".into()],
            text_markers: vec![
                "associated press".into(),
                "ap".into(),
                "health officials".into(),
            ],
        }
    }
}

impl fmt::Display for PoolRules {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gate match and (author contains any of [{}] or text contains any of [{}])",
            self.author_markers.join(", "),
            self.text_markers.join(", ")
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpuriousPool {
    pub messages: Vec<TokenizedMessage>,
    pub source_rule: String,
}

impl SpuriousPool {
    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

/// Gate-matching messages whose author contains an author marker
/// (case-insensitive substring) or whose text contains a text marker (as a
/// token phrase, so `ap` does not fire inside `happy`).
pub fn build_spurious_pool(messages: &[Message], rules: &PoolRules) -> Result<SpuriousPool> {
    if rules.author_markers.is_empty() {
        return Err(SimError::EmptyMarkers("author"));
    }
    if rules.text_markers.is_empty() {
        return Err(SimError::EmptyMarkers("text"));
    }
    let authors: Vec<String> = rules
        .author_markers
        .iter()
        .map(|a| a.to_lowercase())
        .collect();
    let phrases = rules
        .text_markers
        .iter()
        .map(|t| Term::new(t).ok_or_else(|| SimError::BadMarker(t.clone())))
        .collect::<Result<Vec<_>>>()?;
    let gate = Query::gate();
    let pool: Vec<TokenizedMessage> = messages
        .iter()
        .map(|m| TokenizedMessage::new(m.clone()))
        .filter(|m| gate.matches(m))
        .filter(|m| {
            let author = m.message.author.to_lowercase();
            authors.iter().any(|a| author.contains(a.as_str()))
                || phrases.iter().any(|p| p.occurs_in(&m.tokens))
        })
        .collect();
    if pool.is_empty() {
        return Err(SimError::EmptyPool {
            authors: rules.author_markers.clone(),
            texts: rules.text_markers.clone(),
        });
    }
    Ok(SpuriousPool {
        messages: pool,
        source_rule: rules.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Injection {
    pub week: u32,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InjectionSchedule(pub Vec<Injection>);

impl InjectionSchedule {
    pub fn new(pairs: &[(u32, usize)]) -> Self {
        InjectionSchedule(
            pairs
                .iter()
                .map(|&(week, count)| Injection { week, count })
                .collect(),
        )
    }

    pub fn weeks(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().map(|i| i.week)
    }

    pub fn validate(&self, buckets: &[WeekBucket]) -> Result<()> {
        if self.0.is_empty() {
            return Err(SimError::Schedule("no weeks".into()));
        }
        let known: BTreeSet<u32> = buckets.iter().map(|b| b.week_index).collect();
        let mut seen = BTreeSet::new();
        for inj in &self.0 {
            if !known.contains(&inj.week) {
                return Err(SimError::Schedule(format!(
                    "week {} not in corpus",
                    inj.week
                )));
            }
            if !seen.insert(inj.week) {
                return Err(SimError::Schedule(format!(
                    "week {} listed twice",
                    inj.week
                )));
            }
        }
        if self.0.windows(2).any(|w| w[1].week != w[0].week + 1) {
            return Err(SimError::Schedule(
                "weeks must form one contiguous ascending window".into(),
            ));
        }
        Ok(())
    }
}

impl Default for InjectionSchedule {
    /// Weeks 32-36 receiving 0, 1k, 5k, 10k and 100k messages.
    fn default() -> Self {
        InjectionSchedule::new(&[
            (32, 0),
            (33, 1_000),
            (34, 5_000),
            (35, 10_000),
            (36, 100_000),
        ])
    }
}

/// Returns new buckets with `count` pool messages, drawn uniformly with
/// replacement, appended to each scheduled week. Copies get ids suffixed
/// `~inj<ordinal>` and a timestamp inside their target week.
pub fn inject(
    buckets: &[WeekBucket],
    pool: &SpuriousPool,
    schedule: &InjectionSchedule,
    seed: u64,
) -> Result<Vec<WeekBucket>> {
    schedule.validate(buckets)?;
    if pool.is_empty() && schedule.0.iter().any(|i| i.count > 0) {
        return Err(SimError::Schedule(
            "cannot inject from an empty pool".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = buckets.to_vec();
    let mut ordinal = 0usize;
    for inj in &schedule.0 {
        let bucket = out
            .iter_mut()
            .find(|b| b.week_index == inj.week)
            .expect("validated week");
        let start = bucket
            .start_date()
            .and_hms_opt(0, 0, 0)
            .expect("midnight")
            .and_utc();
        bucket.messages.reserve(inj.count);
        for _ in 0..inj.count {
            let source = &pool.messages[rng.random_range(0..pool.len())];
            let mut copy = source.clone();
            copy.message.id = format!("{}~inj{ordinal}", source.message.id);
            copy.message.timestamp = start + Duration::seconds(rng.random_range(0..7 * 86_400));
            bucket.messages.push(copy);
            ordinal += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRow {
    pub week: u32,
    pub injected: usize,
    /// Estimated ILI after injection, percent.
    pub estimate: f64,
    /// Estimated ILI without injection, percent.
    pub baseline: f64,
}

impl SimRow {
    pub fn abs_error(&self) -> f64 {
        (self.estimate - self.baseline).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodRun {
    pub method: Method,
    pub rows: Vec<SimRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub seed: u64,
    pub schedule: InjectionSchedule,
    pub runs: Vec<MethodRun>,
}

impl SimulationReport {
    pub fn run(&self, method: Method) -> Option<&MethodRun> {
        self.runs.iter().find(|r| r.method == method)
    }

    /// `week,method,estimate,baseline,abs_error`, grouped by method.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["week", "method", "estimate", "baseline", "abs_error"])?;
        for run in &self.runs {
            for row in &run.rows {
                wtr.write_record([
                    row.week.to_string(),
                    run.method.id().to_string(),
                    row.estimate.to_string(),
                    row.baseline.to_string(),
                    row.abs_error().to_string(),
                ])?;
            }
        }
        wtr.flush()
    }
}

/// Injects per `schedule`, then re-estimates every scheduled week with each
/// method's pre-trained regression.
pub fn run_simulation(
    buckets: &[WeekBucket],
    q: &Query,
    pool: &SpuriousPool,
    schedule: &InjectionSchedule,
    models: &BTreeMap<Method, RegressionModel>,
    clf: &ClassifierModel,
    seed: u64,
) -> Result<SimulationReport> {
    let injected = inject(buckets, pool, schedule, seed)?;
    let find = |set: &[WeekBucket], week: u32| -> usize {
        set.iter()
            .position(|b| b.week_index == week)
            .expect("validated week")
    };
    let mut runs = Vec::with_capacity(models.len());
    for (&method, model) in models {
        let mut rows = Vec::with_capacity(schedule.0.len());
        for inj in &schedule.0 {
            let i = find(buckets, inj.week);
            rows.push(SimRow {
                week: inj.week,
                injected: inj.count,
                estimate: method.estimate_pct(q, &injected[i], clf, model)?,
                baseline: method.estimate_pct(q, &buckets[i], clf, model)?,
            });
        }
        runs.push(MethodRun { method, rows });
    }
    Ok(SimulationReport {
        seed,
        schedule: schedule.clone(),
        runs,
    })
}

/// Mean squared percentage-point gap between injected and baseline
/// estimates, per method.
pub fn mse_vs_baseline(report: &SimulationReport) -> BTreeMap<Method, f64> {
    report
        .runs
        .iter()
        .map(|run| {
            let est: Vec<f64> = run.rows.iter().map(|r| r.estimate).collect();
            let base: Vec<f64> = run.rows.iter().map(|r| r.baseline).collect();
            (run.method, mse(&est, &base).unwrap_or(0.0))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub pool_rules: PoolRules,
    pub schedule: InjectionSchedule,
    pub seed: Option<u64>,
    pub methods: Vec<Method>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            pool_rules: PoolRules::default(),
            schedule: InjectionSchedule::default(),
            seed: None,
            methods: Method::ALL.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::Vocabulary;
    use crate::corpus::parse_timestamp;
    use chrono::NaiveDate;

    fn msg(id: &str, author: &str, text: &str) -> Message {
        Message::new(
            id,
            parse_timestamp("2009-09-01T00:00:00Z").unwrap(),
            author,
            text,
        )
    }

    fn bucket(week: u32, texts: &[&str]) -> WeekBucket {
        let mut b = WeekBucket::new(
            week,
            NaiveDate::from_ymd_opt(2009, 9, 5).unwrap() + Duration::days(7 * (week as i64 - 1)),
        );
        b.messages = texts
            .iter()
            .enumerate()
            .map(|(i, t)| TokenizedMessage::new(msg(&format!("w{week}-{i}"), "u", t)))
            .collect();
        b
    }

    fn pool() -> SpuriousPool {
        let msgs = vec![
            msg("n1", "ReutersHealth", "flu vaccine recall http://x"),
            msg("n2", "CityNewsDesk", "health officials warn of flu"),
        ];
        build_spurious_pool(&msgs, &PoolRules::default()).unwrap()
    }

    #[test]
    fn pool_rules() {
        let msgs = vec![
            msg("a", "ReutersHealth", "flu shots now available"),
            msg("b", "jane", "i have a headache"),
            msg("c", "jane", "AP: flu cases rise"),
            msg("d", "bob", "happy flu season to me"),
            msg("e", "DailyNews", "sports scores"),
        ];
        let p = build_spurious_pool(&msgs, &PoolRules::default()).unwrap();
        let ids: Vec<_> = p.messages.iter().map(|m| m.message.id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);

        let narrow = PoolRules {
            author_markers: vec!["nobody".into()],
            text_markers: vec!["nothing".into()],
        };
        assert!(matches!(
            build_spurious_pool(&msgs, &narrow),
            Err(SimError::EmptyPool { .. })
        ));
        let empty = PoolRules {
            author_markers: vec![],
            ..PoolRules::default()
        };
        assert!(matches!(
            build_spurious_pool(&msgs, &empty),
            Err(SimError::EmptyMarkers("author"))
        ));
    }

    #[test]
    fn zero_schedule_is_identity() {
        let buckets = vec![bucket(1, &["flu", "x"]), bucket(2, &["y"])];
        let schedule = InjectionSchedule::new(&[(1, 0), (2, 0)]);
        assert_eq!(inject(&buckets, &pool(), &schedule, 1).unwrap(), buckets);
    }

    #[test]
    fn injection_arithmetic() {
        let mut texts = vec!["flu here"; 10];
        texts.extend(vec!["nothing"; 90]);
        let buckets = vec![bucket(1, &texts)];
        let out = inject(&buckets, &pool(), &InjectionSchedule::new(&[(1, 50)]), 7).unwrap();
        assert_eq!(out[0].len(), 150);
        assert!((query_fraction(&Query::gate(), &out[0]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(buckets[0].len(), 100);
        let ids: BTreeSet<_> = out[0]
            .messages
            .iter()
            .map(|m| m.message.id.clone())
            .collect();
        assert_eq!(ids.len(), 150);
        for m in &out[0].messages {
            let day = m.message.timestamp.date_naive();
            assert!(day >= out[0].start_date() && day <= out[0].end_date);
        }
        assert_eq!(
            out,
            inject(&buckets, &pool(), &InjectionSchedule::new(&[(1, 50)]), 7).unwrap()
        );
        assert_ne!(
            out,
            inject(&buckets, &pool(), &InjectionSchedule::new(&[(1, 50)]), 8).unwrap()
        );
    }

    #[test]
    fn schedule_validation() {
        let buckets = vec![bucket(1, &["x"])];
        let p = pool();
        assert!(inject(&buckets, &p, &InjectionSchedule::new(&[(2, 1)]), 0).is_err());
        assert!(inject(&buckets, &p, &InjectionSchedule::new(&[(1, 1), (1, 2)]), 0).is_err());
        assert!(inject(&buckets, &p, &InjectionSchedule::new(&[]), 0).is_err());
        let three: Vec<_> = (1..=3).map(|w| bucket(w, &["x"])).collect();
        assert!(inject(&three, &p, &InjectionSchedule::new(&[(1, 1), (3, 1)]), 0).is_err());
        assert!(inject(&three, &p, &InjectionSchedule::new(&[(2, 1), (1, 1)]), 0).is_err());
        assert!(inject(&three, &p, &InjectionSchedule::new(&[(2, 1), (3, 1)]), 0).is_ok());
    }

    #[test]
    fn mse_vs_baseline_arithmetic() {
        let report = SimulationReport {
            seed: 0,
            schedule: InjectionSchedule::new(&[(1, 0), (2, 5)]),
            runs: vec![MethodRun {
                method: Method::Keywords,
                rows: vec![
                    SimRow {
                        week: 1,
                        injected: 0,
                        estimate: 2.0,
                        baseline: 1.0,
                    },
                    SimRow {
                        week: 2,
                        injected: 5,
                        estimate: 2.0,
                        baseline: 3.0,
                    },
                ],
            }],
        };
        assert_eq!(mse_vs_baseline(&report)[&Method::Keywords], 1.0);
        let mut out = Vec::new();
        report.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "week,method,estimate,baseline,abs_error\n1,keywords,2,1,1\n2,keywords,2,3,1\n"
        );
    }

    #[test]
    fn zero_injection_run_has_zero_mse() {
        let buckets: Vec<_> = (1..=3)
            .map(|w| bucket(w, &["flu a", "b", "c", "cough"]))
            .collect();
        let clf = ClassifierModel::constant(Vocabulary::default(), 0.4);
        let models: BTreeMap<_, _> = Method::ALL
            .iter()
            .map(|m| (*m, RegressionModel::new(0.8, -0.5)))
            .collect();
        let schedule = InjectionSchedule::new(&[(2, 0), (3, 0)]);
        let report = run_simulation(
            &buckets,
            &Query::gate(),
            &pool(),
            &schedule,
            &models,
            &clf,
            3,
        )
        .unwrap();
        for (_, v) in mse_vs_baseline(&report) {
            assert_eq!(v, 0.0);
        }
        assert_eq!(report.runs.len(), 3);
    }

    #[test]
    fn config_json() {
        let cfg: SimulationConfig = serde_json::from_str(
            r#"{"schedule": [{"week": 3, "count": 10}], "methods": ["keywords", "classify-hard"]}"#,
        )
        .unwrap();
        assert_eq!(cfg.schedule, InjectionSchedule::new(&[(3, 10)]));
        assert_eq!(cfg.methods, vec![Method::Keywords, Method::ClassifyHard]);
        assert_eq!(cfg.pool_rules, PoolRules::default());
        let default = InjectionSchedule::default();
        assert_eq!(
            default.weeks().collect::<Vec<_>>(),
            vec![32, 33, 34, 35, 36]
        );
    }
}
