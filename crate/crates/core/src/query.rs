//! Keyword query language and query fractions.
//!
//! Grammar (whitespace separated):
//!
//! ```text
//! query := item+
//! item  := term | '+' group | '-' group
//! group := term | '(' term+ ')'
//! term  := word | '"' phrase '"'
//! ```
//!
//! Bare terms are OR-ed together. Each `+` group must match (OR within the
//! group), no `-` group may match. A phrase of up to three tokens matches
//! only as a contiguous, ordered token run. The bare word pair `sore throat`
//! is recognised as a phrase without quotes.
//!
//! `flu +(swine h1n1)` therefore reads as `flu AND (swine OR h1n1)`.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::corpus::{tokenize, TokenizedMessage, WeekBucket};

pub const MAX_PHRASE_TOKENS: usize = 3;

/// Multi-word phrases recognised without quotes.
pub const KNOWN_PHRASES: &[&[&str]] = &[&["sore", "throat"]];

/// The pre-filter applied before classification.
pub const GATE_QUERY: &str = "flu cough headache \"sore throat\"";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueryError {
    #[error("query parse error at {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("week {week}: empty bucket, query fraction undefined")]
    EmptyBucket { week: u32 },
}

fn parse_err<T>(pos: usize, msg: impl Into<String>) -> Result<T, QueryError> {
    Err(QueryError::Parse {
        pos,
        msg: msg.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Term {
    tokens: Vec<String>,
}

impl Term {
    /// Builds a term from raw text using the message tokenizer.
    pub fn new(text: &str) -> Option<Term> {
        let tokens = tokenize(text);
        if tokens.is_empty() || tokens.len() > MAX_PHRASE_TOKENS {
            None
        } else {
            Some(Term { tokens })
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn occurs_in(&self, tokens: &[String]) -> bool {
        let n = self.tokens.len();
        tokens.len() >= n && tokens.windows(n).any(|w| w == self.tokens.as_slice())
    }

    fn render(&self, out: &mut String) {
        let first = &self.tokens[0];
        let needs_quotes =
            self.tokens.len() > 1 || KNOWN_PHRASES.iter().any(|p| p[0] == first.as_str());
        if needs_quotes {
            out.push('"');
            out.push_str(&self.tokens.join(" "));
            out.push('"');
        } else {
            out.push_str(first);
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

/// OR of terms.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TermGroup(BTreeSet<Term>);

impl TermGroup {
    pub fn terms(&self) -> impl Iterator<Item = &Term> {
        self.0.iter()
    }

    pub fn any_occurs(&self, tokens: &[String]) -> bool {
        self.0.iter().any(|t| t.occurs_in(tokens))
    }

    fn render(&self, prefix: char, out: &mut String) {
        out.push(prefix);
        if self.0.len() == 1 {
            self.0.iter().next().unwrap().render(out);
        } else {
            out.push('(');
            for (i, t) in self.0.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                t.render(out);
            }
            out.push(')');
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    base: BTreeSet<Term>,
    required: BTreeSet<TermGroup>,
    excluded: BTreeSet<TermGroup>,
}

impl Query {
    pub fn parse(text: &str) -> Result<Query, QueryError> {
        Parser::new(text).parse()
    }

    pub fn gate() -> Query {
        Query::parse(GATE_QUERY).expect("gate query parses")
    }

    pub fn base(&self) -> &BTreeSet<Term> {
        &self.base
    }

    pub fn required(&self) -> &BTreeSet<TermGroup> {
        &self.required
    }

    pub fn excluded(&self) -> &BTreeSet<TermGroup> {
        &self.excluded
    }

    pub fn matches_tokens(&self, tokens: &[String]) -> bool {
        self.base.iter().any(|t| t.occurs_in(tokens))
            && self.required.iter().all(|g| g.any_occurs(tokens))
            && !self.excluded.iter().any(|g| g.any_occurs(tokens))
    }

    pub fn matches(&self, m: &TokenizedMessage) -> bool {
        self.matches_tokens(&m.tokens)
    }

    /// Canonical text form; `Query::parse(&q.render()) == q`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.base.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            t.render(&mut out);
        }
        for g in &self.required {
            out.push(' ');
            g.render('+', &mut out);
        }
        for g in &self.excluded {
            out.push(' ');
            g.render('-', &mut out);
        }
        out
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl std::str::FromStr for Query {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Query::parse(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Lexeme {
    Word(String),
    Quoted(String),
    Plus,
    Minus,
    Open,
    Close,
}

struct Parser<'a> {
    text: &'a str,
    lexemes: Vec<(usize, Lexeme, bool)>,
    at: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser {
            text,
            lexemes: Vec::new(),
            at: 0,
        }
    }

    /// Splits into lexemes; the flag records whether whitespace preceded it.
    fn lex(&mut self) -> Result<(), QueryError> {
        let mut chars = self.text.char_indices().peekable();
        let mut spaced = true;
        while let Some(&(pos, c)) = chars.peek() {
            match c {
                c if c.is_whitespace() => {
                    chars.next();
                    spaced = true;
                    continue;
                }
                '+' | '-' | '(' | ')' => {
                    chars.next();
                    let lx = match c {
                        '+' => Lexeme::Plus,
                        '-' => Lexeme::Minus,
                        '(' => Lexeme::Open,
                        _ => Lexeme::Close,
                    };
                    self.lexemes.push((pos, lx, spaced));
                }
                '"' => {
                    chars.next();
                    let start = pos + 1;
                    let mut end = None;
                    for (p, ch) in chars.by_ref() {
                        if ch == '"' {
                            end = Some(p);
                            break;
                        }
                    }
                    let Some(end) = end else {
                        return parse_err(pos, "unterminated quote");
                    };
                    self.lexemes.push((
                        pos,
                        Lexeme::Quoted(self.text[start..end].to_string()),
                        spaced,
                    ));
                }
                _ => {
                    let start = pos;
                    let mut end = self.text.len();
                    while let Some(&(p, ch)) = chars.peek() {
                        if ch.is_whitespace() || matches!(ch, '(' | ')' | '"') {
                            end = p;
                            break;
                        }
                        chars.next();
                    }
                    self.lexemes.push((
                        start,
                        Lexeme::Word(self.text[start..end].to_string()),
                        spaced,
                    ));
                }
            }
            spaced = false;
        }
        Ok(())
    }

    fn peek(&self) -> Option<&(usize, Lexeme, bool)> {
        self.lexemes.get(self.at)
    }

    fn parse(mut self) -> Result<Query, QueryError> {
        self.lex()?;
        if self.lexemes.is_empty() {
            return parse_err(0, "empty query");
        }
        let mut base = BTreeSet::new();
        let mut required: Vec<(usize, TermGroup)> = Vec::new();
        let mut excluded: Vec<(usize, TermGroup)> = Vec::new();
        while let Some((pos, lx, _)) = self.peek().cloned() {
            match lx {
                Lexeme::Plus | Lexeme::Minus => {
                    self.at += 1;
                    let group = self.parse_group(pos)?;
                    if lx == Lexeme::Plus {
                        required.push((pos, group));
                    } else {
                        excluded.push((pos, group));
                    }
                }
                Lexeme::Word(_) | Lexeme::Quoted(_) => {
                    for t in self.parse_terms_until(None)? {
                        base.insert(t);
                    }
                }
                Lexeme::Open => return parse_err(pos, "group without '+' or '-' prefix"),
                Lexeme::Close => return parse_err(pos, "unbalanced ')'"),
            }
        }
        if base.is_empty() {
            return parse_err(0, "query has no base terms");
        }
        for (pos, group) in &excluded {
            for t in group.terms() {
                if required.iter().any(|(_, g)| g.0.contains(t)) {
                    return parse_err(*pos, format!("term {t:?} both required and excluded"));
                }
            }
        }
        Ok(Query {
            base,
            required: required.into_iter().map(|(_, g)| g).collect(),
            excluded: excluded.into_iter().map(|(_, g)| g).collect(),
        })
    }

    fn parse_group(&mut self, prefix_pos: usize) -> Result<TermGroup, QueryError> {
        match self.peek().cloned() {
            Some((_, _, true)) | None => {
                parse_err(prefix_pos, "operator must be followed by a term or group")
            }
            Some((pos, Lexeme::Open, false)) => {
                self.at += 1;
                let terms = self.parse_terms_until(Some(pos))?;
                match self.peek() {
                    Some((_, Lexeme::Close, _)) => self.at += 1,
                    _ => return parse_err(pos, "unbalanced '('"),
                }
                if terms.is_empty() {
                    return parse_err(pos, "empty group");
                }
                Ok(TermGroup(terms.into_iter().collect()))
            }
            Some((pos, Lexeme::Word(w), false)) => {
                self.at += 1;
                Ok(TermGroup(BTreeSet::from([word_term(pos, &w)?])))
            }
            Some((pos, Lexeme::Quoted(q), false)) => {
                self.at += 1;
                Ok(TermGroup(BTreeSet::from([word_term(pos, &q)?])))
            }
            Some((pos, _, false)) => parse_err(pos, "operator must be followed by a term or group"),
        }
    }

    /// Reads a run of terms. Inside a group (`open` is set) the run ends at
    /// ')'; at top level it ends at the next operator.
    fn parse_terms_until(&mut self, open: Option<usize>) -> Result<Vec<Term>, QueryError> {
        let mut terms = Vec::new();
        let mut bare: Vec<(usize, String)> = Vec::new();
        loop {
            match self.peek().cloned() {
                Some((pos, Lexeme::Word(w), _)) => {
                    self.at += 1;
                    bare.push((pos, w));
                }
                Some((pos, Lexeme::Quoted(q), _)) => {
                    self.at += 1;
                    flush_bare(&mut bare, &mut terms)?;
                    terms.push(word_term(pos, &q)?);
                }
                Some((pos, Lexeme::Open, _)) if open.is_some() => {
                    return parse_err(pos, "nested group")
                }
                Some((pos, Lexeme::Open, _)) => {
                    return parse_err(pos, "group without '+' or '-' prefix")
                }
                Some((pos, Lexeme::Plus | Lexeme::Minus, _)) if open.is_some() => {
                    return parse_err(pos, "operator inside group")
                }
                Some((_, Lexeme::Close, _)) if open.is_some() => break,
                Some((pos, Lexeme::Close, _)) => return parse_err(pos, "unbalanced ')'"),
                None if open.is_some() => return parse_err(open.unwrap(), "unbalanced '('"),
                _ => break,
            }
        }
        flush_bare(&mut bare, &mut terms)?;
        Ok(terms)
    }
}

fn word_term(pos: usize, text: &str) -> Result<Term, QueryError> {
    match Term::new(text) {
        Some(t) => Ok(t),
        None if tokenize(text).is_empty() => parse_err(pos, format!("{text:?} contains no tokens")),
        None => parse_err(pos, format!("{text:?} exceeds {MAX_PHRASE_TOKENS} tokens")),
    }
}

/// Converts consecutive bare words into terms, merging known phrases.
fn flush_bare(bare: &mut Vec<(usize, String)>, terms: &mut Vec<Term>) -> Result<(), QueryError> {
    let mut i = 0;
    while i < bare.len() {
        let merged = KNOWN_PHRASES.iter().find(|phrase| {
            i + phrase.len() <= bare.len()
                && phrase
                    .iter()
                    .zip(&bare[i..])
                    .all(|(p, (_, w))| w.eq_ignore_ascii_case(p))
        });
        if let Some(phrase) = merged {
            terms.push(Term {
                tokens: phrase.iter().map(|s| s.to_string()).collect(),
            });
            i += phrase.len();
        } else {
            let (pos, w) = &bare[i];
            terms.push(word_term(*pos, w)?);
            i += 1;
        }
    }
    bare.clear();
    Ok(())
}

pub fn count_matches(q: &Query, bucket: &WeekBucket) -> usize {
    bucket.messages.iter().filter(|m| q.matches(m)).count()
}

/// `|{m in bucket : q matches m}| / |bucket|`.
pub fn query_fraction(q: &Query, bucket: &WeekBucket) -> Result<f64, QueryError> {
    if bucket.is_empty() {
        return Err(QueryError::EmptyBucket {
            week: bucket.week_index,
        });
    }
    Ok(count_matches(q, bucket) as f64 / bucket.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeekFraction {
    pub week_index: u32,
    pub end_date: chrono::NaiveDate,
    pub matches: usize,
    pub total: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryFractionSeries {
    pub query: Query,
    pub weeks: Vec<WeekFraction>,
}

impl QueryFractionSeries {
    pub fn values(&self) -> Vec<f64> {
        self.weeks.iter().map(|w| w.fraction).collect()
    }

    pub fn match_counts(&self) -> Vec<usize> {
        self.weeks.iter().map(|w| w.matches).collect()
    }

    pub fn totals(&self) -> Vec<usize> {
        self.weeks.iter().map(|w| w.total).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["week_index", "end_date", "matches", "total", "fraction"])?;
        for wk in &self.weeks {
            wtr.write_record([
                wk.week_index.to_string(),
                wk.end_date.to_string(),
                wk.matches.to_string(),
                wk.total.to_string(),
                wk.fraction.to_string(),
            ])?;
        }
        wtr.flush()
    }
}

pub fn query_fraction_series(
    q: &Query,
    buckets: &[WeekBucket],
) -> Result<QueryFractionSeries, QueryError> {
    let weeks = buckets
        .iter()
        .map(|b| {
            let fraction = query_fraction(q, b)?;
            Ok(WeekFraction {
                week_index: b.week_index,
                end_date: b.end_date,
                matches: count_matches(q, b),
                total: b.len(),
                fraction,
            })
        })
        .collect::<Result<Vec<_>, QueryError>>()?;
    Ok(QueryFractionSeries {
        query: q.clone(),
        weeks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_timestamp, Message};
    use chrono::NaiveDate;

    fn msg(text: &str) -> TokenizedMessage {
        TokenizedMessage::new(Message::new(
            "x",
            parse_timestamp("2009-09-01T00:00:00Z").unwrap(),
            "",
            text,
        ))
    }

    fn bucket(week: u32, texts: &[&str]) -> WeekBucket {
        let mut b = WeekBucket::new(week, NaiveDate::from_ymd_opt(2009, 9, 5).unwrap());
        b.messages = texts.iter().map(|t| msg(t)).collect();
        b
    }

    fn terms(ts: &[&str]) -> BTreeSet<Term> {
        ts.iter().map(|t| Term::new(t).unwrap()).collect()
    }

    #[test]
    fn parse_required_single() {
        let q = Query::parse("flu +shot").unwrap();
        assert_eq!(q.base, terms(&["flu"]));
        assert_eq!(q.required, BTreeSet::from([TermGroup(terms(&["shot"]))]));
        assert!(q.excluded.is_empty());
    }

    #[test]
    fn parse_excluded_group() {
        let q = Query::parse("flu -(swine h1n1 shot vaccine season http)").unwrap();
        assert_eq!(q.base, terms(&["flu"]));
        assert_eq!(
            q.excluded,
            BTreeSet::from([TermGroup(terms(&[
                "swine", "h1n1", "shot", "vaccine", "season", "http"
            ]))])
        );
        assert!(q.required.is_empty());
    }

    #[test]
    fn parse_phrases() {
        let q = Query::parse("flu cough headache sore throat").unwrap();
        assert_eq!(q, Query::gate());
        assert!(q.base.contains(&Term::new("sore throat").unwrap()));
        assert_eq!(q.base.len(), 4);
        let q = Query::parse("\"runny nose\" +(\"sore throat\" ache)").unwrap();
        assert_eq!(q.base, terms(&["runny nose"]));
    }

    #[test]
    fn parse_errors() {
        for bad in [
            "flu +()",
            "",
            "   ",
            "+shot",
            "-(swine)",
            "flu +(shot",
            "flu shot)",
            "flu +shot -shot",
            "flu +(a b) -(c b)",
            "flu + shot",
            "flu (shot)",
            "flu +((a))",
            "flu \"a b c d\"",
            "flu \"open",
            "flu !!!",
        ] {
            assert!(
                matches!(Query::parse(bad), Err(QueryError::Parse { .. })),
                "{bad:?} should fail"
            );
        }
        match Query::parse("flu +shot -shot") {
            Err(QueryError::Parse { pos, .. }) => assert_eq!(pos, 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn render_round_trips() {
        for text in [
            "flu",
            "flu +(swine h1n1)",
            "flu -(swine h1n1 shot vaccine season http)",
            "cough flu \"sore\" throat",
            "flu cough headache sore throat +\"sore throat\" -x",
        ] {
            let q = Query::parse(text).unwrap();
            assert_eq!(Query::parse(&q.render()).unwrap(), q, "{text}");
        }
    }

    #[test]
    fn match_examples() {
        let shot = Query::parse("flu +shot").unwrap();
        assert!(shot.matches(&msg("getting my flu shot today")));
        let no_swine = Query::parse("flu -(swine h1n1)").unwrap();
        assert!(!no_swine.matches(&msg("swine flu actually has nothing to do with swine")));
        let sore = Query::parse("sore throat").unwrap();
        assert!(!sore.matches(&msg("my throat is sore")));
        assert!(sore.matches(&msg("ugh, sore throat again")));
        assert!(Query::parse("flu +http")
            .unwrap()
            .matches(&msg("flu news http://x.co/a")));
    }

    #[test]
    fn fractions() {
        let q = Query::parse("flu +shot").unwrap();
        let b = bucket(1, &["flu shot", "nothing", "more nothing", "flu only"]);
        assert_eq!(query_fraction(&q, &b).unwrap(), 0.25);
        let none = bucket(1, &["a", "b"]);
        assert_eq!(query_fraction(&q, &none).unwrap(), 0.0);
        assert_eq!(
            query_fraction(&q, &bucket(4, &[])),
            Err(QueryError::EmptyBucket { week: 4 })
        );
        // Crafted corpus: messages 1 and 4 match by hand.
        let desk = bucket(
            1,
            &[
                "got my flu shot",
                "flu is awful",
                "shot a film today",
                "Flu SHOT clinic open",
                "shot flu", // both words, reversed order still matches
                "flushot typo",
            ],
        );
        assert_eq!(count_matches(&q, &desk), 3);
        let exact = bucket(
            1,
            &[
                "got my flu shot",
                "flu is awful",
                "shot a film",
                "flu shot clinic",
                "nope",
                "flushot",
            ],
        );
        assert_eq!(query_fraction(&q, &exact).unwrap(), 2.0 / 6.0);
    }

    #[test]
    fn series_locality_and_saturation() {
        let q = Query::parse("flu").unwrap();
        let buckets = vec![
            bucket(1, &["a"]),
            bucket(2, &["b", "c"]),
            bucket(3, &["flu", "d"]),
            bucket(4, &["e"]),
        ];
        let s = query_fraction_series(&q, &buckets).unwrap();
        assert_eq!(s.values(), vec![0.0, 0.0, 0.5, 0.0]);
        assert_eq!(s.match_counts(), vec![0, 0, 1, 0]);
        assert_eq!(s.totals(), vec![1, 2, 2, 1]);

        let full = vec![bucket(1, &["flu"]), bucket(2, &["flu a", "b flu"])];
        assert_eq!(
            query_fraction_series(&q, &full).unwrap().values(),
            vec![1.0, 1.0]
        );

        let with_empty = vec![bucket(1, &["flu"]), bucket(2, &[])];
        assert_eq!(
            query_fraction_series(&q, &with_empty),
            Err(QueryError::EmptyBucket { week: 2 })
        );

        let mut out = Vec::new();
        s.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(
            text.starts_with("week_index,end_date,matches,total,fraction\n1,2009-09-05,0,1,0\n")
        );
    }
}
