//! Synthetic corpora with a planted logit-linear relationship.
//!
//! For week `w` the generator targets
//! `logit(Q_w) = (logit(P_w) - beta2) / beta1 + noise_w` and emits
//! `round(Q_w * messages_per_week)` gate-matching messages (a fixed number of
//! them news-style spurious reports, the rest symptom self-reports) plus
//! non-matching background chatter.
//!
//! Integer counts move the realised fraction slightly off target. The emitted
//! reference series absorbs that rounding: it is
//! `sigmoid(beta1 * (logit(realised_w) - noise_w) + beta2)`, so the planted
//! relationship holds exactly against the corpus and the only deviation is
//! the Gaussian noise term. `target_ili` in the truth sidecar keeps the
//! requested curve.
//!
//! Randomness is drawn from ChaCha8 seeded with `seed`: stream 0 for the
//! corpus, stream 1 for the noise and stream 2 for labeled examples.

use std::collections::BTreeMap;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::LabeledMessage;
use crate::corpus::{sort_messages, IliWeek, Message, TokenizedMessage};
use crate::query::Query;
use crate::regress::{logit, sigmoid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("config field {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("week {week}: {reason}")]
    Week { week: u32, reason: String },
    #[error("{kind} template {index} produced {text:?}, which {problem}")]
    Template {
        kind: MessageKind,
        index: usize,
        text: String,
        problem: &'static str,
    },
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageKind {
    Positive,
    Negative,
    Spurious,
    Background,
}

impl std::fmt::Display for MessageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MessageKind::Positive => "positive",
            MessageKind::Negative => "negative",
            MessageKind::Spurious => "spurious",
            MessageKind::Background => "background",
        })
    }
}

const SLOTS: &[(&str, &[&str])] = &[
    ("gate", &["flu", "cough", "headache", "sore throat"]),
    (
        "symptom",
        &[
            "fever",
            "chills",
            "body aches",
            "a runny nose",
            "a stuffy nose",
            "sneezing fits",
        ],
    ),
    (
        "time",
        &[
            "today",
            "tonight",
            "this morning",
            "all week",
            "again",
            "since yesterday",
        ],
    ),
    (
        "feeling",
        &[
            ":(",
            "so miserable",
            "ugh",
            "feeling awful",
            "worst week ever",
            "someone bring soup",
        ],
    ),
    (
        "org",
        &[
            "reuters",
            "cdc",
            "county health dept",
            "state officials",
            "local clinic",
        ],
    ),
    (
        "topic",
        &[
            "vaccine",
            "shot",
            "clinic",
            "nasal spray",
            "vaccination drive",
            "h1n1 vaccine",
        ],
    ),
    (
        "celeb",
        &["bieber", "gaga", "beyonce", "the jonas brothers"],
    ),
    ("place", &["mall", "gym", "office", "library", "beach"]),
    (
        "snack",
        &["pizza", "tacos", "fruit gummies", "ice cream", "nachos"],
    ),
    ("trend", &["rise", "fall", "surge", "level off"]),
    (
        "region",
        &["the midwest", "texas", "new england", "california", "ohio"],
    ),
];

const NEWS_AUTHORS: &[&str] = &[
    "ReutersHealth",
    "APHealthNews",
    "CityNewsDesk",
    "HealthNewsWire",
];

fn default_positive() -> Vec<String> {
    [
        "ugh i have the flu {feeling}",
        "woke up with a {gate} and {symptom} {feeling}",
        "{symptom}, {gate}, {symptom} {time}... i feel terrible",
        "staying home {time} with a {gate} {feeling}",
        "my {gate} is killing me {time}",
        "i think i caught the flu, {feeling}",
        "this cough of mine will not go away {time}",
        "home sick with {symptom} and a {gate}, {feeling}",
        "called in sick {time}, my head hurts and i have a bad cough",
        "me and my sore throat are in bed {time} {feeling}",
    ]
    .map(String::from)
    .to_vec()
}

fn default_negative() -> Vec<String> {
    [
        "{org}: {topic} update for flu season {link}",
        "swine flu fact of the day {link} #health",
        "researchers still puzzled by headache triggers {link}",
        "these {snack} taste like cough drops haha",
        "new study on flu {topic} results {link}",
        "when {celeb} sings the whole school gets a headache lol",
        "cough syrup sales {trend} in {region}, says {org}",
        "free flu {topic} at the {place} {time}",
    ]
    .map(String::from)
    .to_vec()
}

fn default_spurious() -> Vec<String> {
    [
        "{org}: health officials urge flu {topic} before winter {link}",
        "associated press: {topic} recall announced amid flu worries {link}",
        "ap - flu cases {trend} in {region}, health officials say {link}",
        "{org} reports new flu deaths in {region} {link}",
        "health officials track cough and fever cases in {region} {link}",
    ]
    .map(String::from)
    .to_vec()
}

fn default_background() -> Vec<String> {
    [
        "i've got {celeb} fever {time}",
        "going to the {place} {time}",
        "just had {snack} for lunch",
        "can't wait for the weekend",
        "watching {celeb} on tv {time}",
        "traffic on the way to the {place} is terrible",
        "new blog post up {link}",
        "happy birthday to my best friend",
        "anyone want to get {snack} {time}?",
        "so tired of this weather in {region}",
    ]
    .map(String::from)
    .to_vec()
}

/// An ILI season shape: an autumn peak near week 9 and a smaller spring
/// wave near week 29, as proportions.
pub fn default_ili_curve(weeks: u32) -> Vec<f64> {
    (1..=weeks)
        .map(|w| {
            let w = f64::from(w);
            0.011
                + 0.060 * (-(w - 9.0).powi(2) / (2.0 * 3.5f64.powi(2))).exp()
                + 0.012 * (-(w - 29.0).powi(2) / (2.0 * 4.0f64.powi(2))).exp()
        })
        .collect()
}

fn default_first_week_end() -> NaiveDate {
    NaiveDate::from_ymd_opt(2009, 9, 5).expect("valid date")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub weeks: u32,
    pub messages_per_week: usize,
    pub first_week_end: NaiveDate,
    pub true_beta1: f64,
    pub true_beta2: f64,
    pub ili_curve: Vec<f64>,
    pub noise_sd: f64,
    /// News-style gate-matching messages in every week.
    pub spurious_per_week: usize,
    pub positive_templates: Vec<String>,
    pub negative_templates: Vec<String>,
    pub spurious_templates: Vec<String>,
    pub background_templates: Vec<String>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            weeks: 36,
            messages_per_week: 10_000,
            first_week_end: default_first_week_end(),
            true_beta1: 0.7,
            true_beta2: -1.0,
            ili_curve: default_ili_curve(36),
            noise_sd: 0.0,
            spurious_per_week: 20,
            positive_templates: default_positive(),
            negative_templates: default_negative(),
            spurious_templates: default_spurious(),
            background_templates: default_background(),
            seed: 0,
        }
    }
}

fn config_err<T>(field: &'static str, reason: impl Into<String>) -> Result<T> {
    Err(SynthError::Config {
        field,
        reason: reason.into(),
    })
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weeks == 0 {
            return config_err("weeks", "must be positive");
        }
        if self.messages_per_week == 0 {
            return config_err("messages_per_week", "must be positive");
        }
        if self.first_week_end.weekday() != Weekday::Sat {
            return config_err(
                "first_week_end",
                format!("{} is not a Saturday", self.first_week_end),
            );
        }
        if !self.true_beta1.is_finite() || self.true_beta1 == 0.0 {
            return config_err("true_beta1", "must be finite and non-zero");
        }
        if !self.true_beta2.is_finite() {
            return config_err("true_beta2", "must be finite");
        }
        if self.ili_curve.len() != self.weeks as usize {
            return config_err(
                "ili_curve",
                format!(
                    "has {} values for {} weeks",
                    self.ili_curve.len(),
                    self.weeks
                ),
            );
        }
        if let Some((i, v)) = self
            .ili_curve
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && **v < 1.0))
        {
            return config_err(
                "ili_curve",
                format!("value {v} at week {} outside (0, 1)", i + 1),
            );
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return config_err("noise_sd", "must be finite and >= 0");
        }
        for (field, list) in [
            ("positive_templates", &self.positive_templates),
            ("negative_templates", &self.negative_templates),
            ("spurious_templates", &self.spurious_templates),
            ("background_templates", &self.background_templates),
        ] {
            if list.is_empty() {
                return config_err(field, "must not be empty");
            }
            for t in list {
                check_slots(field, t)?;
            }
        }
        Ok(())
    }
}

fn check_slots(field: &'static str, template: &str) -> Result<()> {
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}') else {
            return config_err(field, format!("unclosed slot in {template:?}"));
        };
        let name = &rest[open + 1..open + close];
        if name != "link" && !SLOTS.iter().any(|(n, _)| *n == name) {
            return config_err(field, format!("unknown slot {{{name}}} in {template:?}"));
        }
        rest = &rest[open + close + 1..];
    }
    Ok(())
}

fn instantiate(template: &str, rng: &mut ChaCha8Rng) -> String {
    let mut out = String::with_capacity(template.len() + 16);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = open + rest[open..].find('}').expect("validated template");
        let name = &rest[open + 1..close];
        if name == "link" {
            const ALNUM: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
            out.push_str("http://bit.ly/");
            for _ in 0..6 {
                out.push(ALNUM[rng.random_range(0..ALNUM.len())] as char);
            }
        } else {
            let values = SLOTS
                .iter()
                .find(|(n, _)| *n == name)
                .expect("validated slot")
                .1;
            out.push_str(values[rng.random_range(0..values.len())]);
        }
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeekTruth {
    pub week_index: u32,
    pub end_date: NaiveDate,
    /// Requested ILI proportion.
    pub target_ili: f64,
    /// ILI proportion written to the reference series.
    pub ili: f64,
    pub noise: f64,
    pub planted_q: f64,
    pub matches: usize,
    pub positives: usize,
    pub spurious: usize,
    pub total: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub id: String,
    pub kind: MessageKind,
    pub template: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub beta1: f64,
    pub beta2: f64,
    pub weeks: Vec<WeekTruth>,
    pub provenance: Vec<Provenance>,
}

impl SynthTruth {
    pub fn ili_weeks(&self) -> Vec<IliWeek> {
        self.weeks
            .iter()
            .map(|w| IliWeek {
                week_ending: w.end_date,
                ili_pct: w.ili * 100.0,
            })
            .collect()
    }

    pub fn provenance_by_id(&self) -> BTreeMap<&str, &Provenance> {
        self.provenance.iter().map(|p| (p.id.as_str(), p)).collect()
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const WEEK_SECONDS: i64 = 7 * 86_400;

fn templates_for(config: &SynthConfig, kind: MessageKind) -> &[String] {
    match kind {
        MessageKind::Positive => &config.positive_templates,
        MessageKind::Negative => &config.negative_templates,
        MessageKind::Spurious => &config.spurious_templates,
        MessageKind::Background => &config.background_templates,
    }
}

/// Instantiates a template of `kind`, checking it against the gate query.
fn draw_text(
    config: &SynthConfig,
    kind: MessageKind,
    gate: &Query,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, String)> {
    let list = templates_for(config, kind);
    let index = rng.random_range(0..list.len());
    let text = instantiate(&list[index], rng);
    let matched = gate.matches_tokens(&crate::corpus::tokenize(&text));
    let expect_match = kind != MessageKind::Background;
    if matched != expect_match {
        return Err(SynthError::Template {
            kind,
            index,
            text,
            problem: if expect_match {
                "does not match the gate query"
            } else {
                "matches the gate query"
            },
        });
    }
    Ok((index, text))
}

pub fn generate(config: &SynthConfig) -> Result<(Vec<Message>, SynthTruth)> {
    config.validate()?;
    let gate = Query::gate();
    let mut rng = rng_stream(config.seed, 0);
    let mut noise_rng = rng_stream(config.seed, 1);
    let normal = Normal::new(0.0, config.noise_sd).map_err(|e| SynthError::Config {
        field: "noise_sd",
        reason: e.to_string(),
    })?;
    let n = config.messages_per_week;
    let (b1, b2) = (config.true_beta1, config.true_beta2);

    let mut messages = Vec::with_capacity(n * config.weeks as usize);
    let mut weeks = Vec::with_capacity(config.weeks as usize);
    let mut provenance = Vec::with_capacity(n * config.weeks as usize);
    for (i, &target_ili) in config.ili_curve.iter().enumerate() {
        let week = i as u32 + 1;
        let noise = if config.noise_sd > 0.0 {
            normal.sample(&mut noise_rng)
        } else {
            0.0
        };
        let target_logit = (logit(target_ili).expect("validated curve") - b2) / b1 + noise;
        let planted_q = sigmoid(target_logit);
        let matches = (planted_q * n as f64).round() as usize;
        if matches < config.spurious_per_week.max(1) || matches >= n {
            return Err(SynthError::Week {
                week,
                reason: format!(
                    "planted fraction {planted_q:.3e} gives {matches} matches of {n}, need between {} and {}",
                    config.spurious_per_week.max(1),
                    n - 1
                ),
            });
        }
        let fraction = matches as f64 / n as f64;
        let ili = sigmoid(b1 * (logit(fraction).expect("interior fraction") - noise) + b2);

        let spurious = config.spurious_per_week;
        let positives = matches - spurious;
        let mut kinds: Vec<MessageKind> = std::iter::repeat_n(MessageKind::Positive, positives)
            .chain(std::iter::repeat_n(MessageKind::Spurious, spurious))
            .chain(std::iter::repeat_n(MessageKind::Background, n - matches))
            .collect();
        kinds.shuffle(&mut rng);

        let end_date = crate::corpus::week_end_date(config.first_week_end, week);
        let start = (end_date - Duration::days(6))
            .and_hms_opt(0, 0, 0)
            .expect("midnight")
            .and_utc();
        for (j, kind) in kinds.into_iter().enumerate() {
            let (template, text) = draw_text(config, kind, &gate, &mut rng)?;
            let author = if kind == MessageKind::Spurious {
                NEWS_AUTHORS[rng.random_range(0..NEWS_AUTHORS.len())].to_string()
            } else {
                format!("user{}", rng.random_range(0..50_000))
            };
            let id = format!("w{week:02}-{j:06}");
            let timestamp = start + Duration::seconds(rng.random_range(0..WEEK_SECONDS));
            provenance.push(Provenance {
                id: id.clone(),
                kind,
                template,
            });
            messages.push(Message::new(id, timestamp, author, text));
        }
        weeks.push(WeekTruth {
            week_index: week,
            end_date,
            target_ili,
            ili,
            noise,
            planted_q,
            matches,
            positives,
            spurious,
            total: n,
            fraction,
        });
    }
    sort_messages(&mut messages);
    provenance.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((
        messages,
        SynthTruth {
            beta1: b1,
            beta2: b2,
            weeks,
            provenance,
        },
    ))
}

/// Labeled training examples dated in the four weeks after the corpus ends.
pub fn generate_labeled(
    config: &SynthConfig,
    n_pos: usize,
    n_neg: usize,
) -> Result<Vec<LabeledMessage>> {
    config.validate()?;
    let gate = Query::gate();
    let mut rng = rng_stream(config.seed, 2);
    let mut kinds: Vec<MessageKind> = std::iter::repeat_n(MessageKind::Positive, n_pos)
        .chain(std::iter::repeat_n(MessageKind::Negative, n_neg))
        .collect();
    kinds.shuffle(&mut rng);
    let last_end = crate::corpus::week_end_date(config.first_week_end, config.weeks);
    let start = (last_end + Duration::days(1))
        .and_hms_opt(0, 0, 0)
        .expect("midnight")
        .and_utc();
    let mut out = Vec::with_capacity(kinds.len());
    for (i, kind) in kinds.into_iter().enumerate() {
        let (_, text) = draw_text(config, kind, &gate, &mut rng)?;
        let timestamp = start + Duration::seconds(rng.random_range(0..4 * WEEK_SECONDS));
        let author = format!("user{}", rng.random_range(0..50_000));
        let message =
            TokenizedMessage::new(Message::new(format!("lab-{i:04}"), timestamp, author, text));
        let label = u8::from(kind == MessageKind::Positive);
        out.push(LabeledMessage { message, label });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            weeks: 4,
            messages_per_week: 500,
            ili_curve: vec![0.02, 0.03, 0.05, 0.04],
            spurious_per_week: 2,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn identity_model_counts() {
        let cfg = SynthConfig {
            weeks: 3,
            ili_curve: vec![0.02; 3],
            true_beta1: 1.0,
            true_beta2: 0.0,
            seed: 5,
            ..SynthConfig::default()
        };
        let (msgs, truth) = generate(&cfg).unwrap();
        assert_eq!(msgs.len(), 30_000);
        for w in &truth.weeks {
            assert_eq!(w.matches, 200);
            assert!((w.ili - 0.02).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate(&small(3)).unwrap();
        let b = generate(&small(3)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(4)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn messages_stay_inside_their_week() {
        let cfg = small(8);
        let (msgs, truth) = generate(&cfg).unwrap();
        let prov = truth.provenance_by_id();
        for m in &msgs {
            let week: u32 = m.id[1..3].parse().unwrap();
            assert_eq!(
                crate::corpus::week_of(&m.timestamp, cfg.first_week_end),
                Some(week)
            );
            let author_is_news = NEWS_AUTHORS.contains(&m.author.as_str());
            assert_eq!(
                author_is_news,
                prov[m.id.as_str()].kind == MessageKind::Spurious
            );
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(1);
        cfg.ili_curve[2] = 1.5;
        match generate(&cfg) {
            Err(SynthError::Config { field, .. }) => assert_eq!(field, "ili_curve"),
            other => panic!("{other:?}"),
        }
        let mut cfg = small(1);
        cfg.positive_templates = vec!["{nope} flu".into()];
        assert!(matches!(
            cfg.validate(),
            Err(SynthError::Config {
                field: "positive_templates",
                ..
            })
        ));
        let mut cfg = small(1);
        cfg.background_templates = vec![];
        assert!(cfg.validate().is_err());
        let mut cfg = small(1);
        cfg.first_week_end = NaiveDate::from_ymd_opt(2009, 9, 6).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn impossible_week_is_named() {
        let mut cfg = small(1);
        cfg.ili_curve[1] = 1e-6;
        match generate(&cfg) {
            Err(SynthError::Week { week, .. }) => assert_eq!(week, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn template_gate_contract_is_enforced() {
        let mut cfg = small(1);
        cfg.background_templates = vec!["my flu is bad".into()];
        assert!(matches!(
            generate(&cfg),
            Err(SynthError::Template {
                kind: MessageKind::Background,
                ..
            })
        ));
        let mut cfg = small(1);
        cfg.positive_templates = vec!["nothing relevant".into()];
        assert!(matches!(
            generate(&cfg),
            Err(SynthError::Template {
                kind: MessageKind::Positive,
                ..
            })
        ));
    }

    #[test]
    fn labeled_class_balance() {
        let cfg = small(2);
        let data = generate_labeled(&cfg, 160, 46).unwrap();
        assert_eq!(data.len(), 206);
        assert_eq!(data.iter().filter(|d| d.label == 1).count(), 160);
        let other = generate_labeled(&small(3), 160, 46).unwrap();
        assert_eq!(other.iter().filter(|d| d.label == 1).count(), 160);
        assert_ne!(data, other);
        let gate = Query::gate();
        assert!(data.iter().all(|d| gate.matches(&d.message)));
        let single = generate_labeled(&cfg, 0, 10).unwrap();
        assert!(crate::classify::train(&single, &Default::default()).is_err());
    }

    #[test]
    fn config_json_defaults_fill_in() {
        let cfg: SynthConfig = serde_json::from_str(r#"{"weeks": 36, "noise_sd": 0.05}"#).unwrap();
        assert_eq!(cfg.messages_per_week, 10_000);
        assert_eq!(cfg.ili_curve.len(), 36);
        assert!(serde_json::from_str::<SynthConfig>(r#"{"wekes": 3}"#).is_err());
    }
}
