//! Deterministic reference implementations of the built-in tasks.
//!
//! These power the rule backend and double as ground truth when checking
//! any other backend.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("unparseable date {0:?}")]
    UnparseableDate(String),
    #[error("invalid calendar date {0:?}")]
    InvalidDate(String),
    #[error("not a number: {0:?}")]
    NotANumber(String),
    #[error("degenerate range: hi {hi} <= lo {lo}")]
    DegenerateRange { lo: f64, hi: f64 },
    #[error("{x} outside [{lo}, {hi}]")]
    OutOfRange { x: f64, lo: f64, hi: f64 },
    #[error("unknown type {0:?}")]
    UnknownType(String),
    #[error("empty text")]
    EmptyText,
    #[error("degenerate embedding")]
    DegenerateEmbedding,
    #[error("embedding dimension must be at least 2, got {0}")]
    BadDimension(usize),
    #[error("parameter {name:?}: {message}")]
    BadParam { name: String, message: String },
    #[error("invalid taxonomy: {0}")]
    BadTaxonomy(String),
}

/// The built-in tasks an oracle can perform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleTag {
    DateNormalize,
    ToUnixEpoch,
    NormalizeRating,
    ClassifyItemType,
    EmbedText,
}

impl OracleTag {
    pub const ALL: [OracleTag; 5] = [
        OracleTag::DateNormalize,
        OracleTag::ToUnixEpoch,
        OracleTag::NormalizeRating,
        OracleTag::ClassifyItemType,
        OracleTag::EmbedText,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OracleTag::DateNormalize => "date_normalize",
            OracleTag::ToUnixEpoch => "to_unix_epoch",
            OracleTag::NormalizeRating => "normalize_rating",
            OracleTag::ClassifyItemType => "classify_item_type",
            OracleTag::EmbedText => "embed_text",
        }
    }

    /// Number of leading manifest inputs the oracle reads.
    pub fn arity(self) -> usize {
        match self {
            OracleTag::ClassifyItemType => 2,
            _ => 1,
        }
    }

    pub fn required_params(self) -> &'static [&'static str] {
        match self {
            OracleTag::NormalizeRating => &["lo", "hi"],
            OracleTag::ClassifyItemType => &["taxonomy"],
            OracleTag::EmbedText => &["dim"],
            OracleTag::DateNormalize | OracleTag::ToUnixEpoch => &[],
        }
    }
}

impl fmt::Display for OracleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OracleTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OracleTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown oracle tag {s:?}"))
    }
}

// ---------------------------------------------------------------------------
// Calendar

pub fn is_leap_year(year: i64) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

pub fn days_in_month(year: i64, month: u32) -> u32 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if is_leap_year(year) => 29,
        2 => 28,
        _ => 0,
    }
}

/// A proleptic Gregorian calendar date with a four-digit year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CivilDate {
    pub year: i64,
    pub month: u32,
    pub day: u32,
}

impl CivilDate {
    pub fn new(year: i64, month: u32, day: u32) -> Option<Self> {
        let valid = (0..=9999).contains(&year)
            && (1..=12).contains(&month)
            && day >= 1
            && day <= days_in_month(year, month);
        valid.then_some(Self { year, month, day })
    }

    /// Parses exactly eight ASCII digits as YYYYMMDD.
    pub fn from_compact(s: &str) -> Result<Self, OracleError> {
        if s.len() != 8 || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(OracleError::UnparseableDate(s.to_string()));
        }
        let year = s[0..4].parse().expect("digits");
        let month = s[4..6].parse().expect("digits");
        let day = s[6..8].parse().expect("digits");
        CivilDate::new(year, month, day).ok_or_else(|| OracleError::InvalidDate(s.to_string()))
    }

    pub fn compact(&self) -> String {
        format!("{:04}{:02}{:02}", self.year, self.month, self.day)
    }

    /// Days since 1970-01-01 (negative before).
    pub fn days_from_epoch(&self) -> i64 {
        // Era-based civil-to-days conversion; eras are 400-year cycles
        // starting on March 1 so the leap day falls at the end of a year.
        let y = if self.month <= 2 { self.year - 1 } else { self.year };
        let era = y.div_euclid(400);
        let yoe = y - era * 400;
        let m = i64::from(self.month);
        let mp = (m + 9) % 12;
        let doy = (153 * mp + 2) / 5 + i64::from(self.day) - 1;
        let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
        era * 146_097 + doe - 719_468
    }
}

const MONTHS: [&str; 12] = [
    "january",
    "february",
    "march",
    "april",
    "may",
    "june",
    "july",
    "august",
    "september",
    "october",
    "november",
    "december",
];

/// Full English month name or its three-letter abbreviation, any case.
fn month_from_name(name: &str) -> Option<u32> {
    let lower = name.to_ascii_lowercase();
    MONTHS
        .iter()
        .position(|full| *full == lower || (lower.len() == 3 && full.starts_with(&lower)))
        .map(|i| i as u32 + 1)
}

fn digits(s: &str, min: usize, max: usize) -> Option<u32> {
    (s.len() >= min && s.len() <= max && s.bytes().all(|b| b.is_ascii_digit()))
        .then(|| s.parse().ok())
        .flatten()
}

fn year4(s: &str) -> Option<i64> {
    digits(s, 4, 4).map(i64::from)
}

/// Recognizes one of the accepted date forms and returns (y, m, d) without
/// range checks.
fn parse_date_fields(s: &str) -> Option<(i64, u32, u32)> {
    if s.len() == 8 && s.bytes().all(|b| b.is_ascii_digit()) {
        return Some((year4(&s[0..4])?, digits(&s[4..6], 2, 2)?, digits(&s[6..8], 2, 2)?));
    }
    for sep in ['-', '/'] {
        let parts: Vec<&str> = s.split(sep).collect();
        if parts.len() != 3 {
            continue;
        }
        if let Some(year) = year4(parts[0]) {
            // YYYY-MM-DD or YYYY/MM/DD
            return Some((year, digits(parts[1], 1, 2)?, digits(parts[2], 1, 2)?));
        }
        if sep == '/' {
            // MM/DD/YYYY: always month-first
            return Some((year4(parts[2])?, digits(parts[0], 1, 2)?, digits(parts[1], 1, 2)?));
        }
        return None;
    }
    let words: Vec<&str> = s.split_whitespace().collect();
    match words.as_slice() {
        // DD Mon YYYY
        [day, month, year] if day.bytes().all(|b| b.is_ascii_digit()) => {
            Some((year4(year)?, month_from_name(month)?, digits(day, 1, 2)?))
        }
        // Mon DD, YYYY (comma optional)
        [month, day, year] => {
            let day = day.strip_suffix(',').unwrap_or(day);
            Some((year4(year)?, month_from_name(month)?, digits(day, 1, 2)?))
        }
        [month, day_year] => {
            let (day, year) = day_year.split_once(',')?;
            Some((year4(year)?, month_from_name(month)?, digits(day, 1, 2)?))
        }
        _ => None,
    }
}

/// Normalizes any accepted date form to `YYYYMMDD`.
///
/// Accepted: `YYYYMMDD`, `YYYY-MM-DD`, `YYYY/MM/DD`, `MM/DD/YYYY`,
/// `DD Mon YYYY`, `Mon DD, YYYY`, with `Mon` either a three-letter
/// abbreviation or a full English month name in any case. Two-slash forms
/// are always read month-first.
pub fn date_normalize(raw: &str) -> Result<String, OracleError> {
    let trimmed = raw.trim();
    let (year, month, day) =
        parse_date_fields(trimmed).ok_or_else(|| OracleError::UnparseableDate(raw.to_string()))?;
    CivilDate::new(year, month, day)
        .map(|d| d.compact())
        .ok_or_else(|| OracleError::InvalidDate(raw.to_string()))
}

/// Seconds from the Unix epoch to midnight UTC of a `YYYYMMDD` date.
pub fn to_unix_epoch(normalized: &str) -> Result<i64, OracleError> {
    Ok(CivilDate::from_compact(normalized.trim())?.days_from_epoch() * 86_400)
}

/// Min-max scaling of `x` from `[lo, hi]` onto `[0, 1]`.
pub fn normalize_rating(x: f64, lo: f64, hi: f64) -> Result<f64, OracleError> {
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Err(OracleError::DegenerateRange { lo, hi });
    }
    if !(lo..=hi).contains(&x) {
        return Err(OracleError::OutOfRange { x, lo, hi });
    }
    Ok((x - lo) / (hi - lo))
}

// ---------------------------------------------------------------------------
// Classification

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordRule {
    pub keyword: String,
    #[serde(rename = "type")]
    pub item_type: String,
}

/// Item types plus an ordered keyword table; the first matching keyword wins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    types: BTreeSet<String>,
    rules: Vec<(Vec<String>, String)>,
}

impl Taxonomy {
    pub fn new(rules: Vec<KeywordRule>) -> Result<Self, OracleError> {
        if rules.is_empty() {
            return Err(OracleError::BadTaxonomy("no entries".into()));
        }
        let mut types = BTreeSet::new();
        let mut compiled: Vec<(Vec<String>, String)> = Vec::with_capacity(rules.len());
        for rule in rules {
            let tokens = tokenize(&rule.keyword);
            if tokens.is_empty() {
                return Err(OracleError::BadTaxonomy(format!(
                    "keyword {:?} has no tokens",
                    rule.keyword
                )));
            }
            if rule.item_type.is_empty() {
                return Err(OracleError::BadTaxonomy("empty type name".into()));
            }
            if compiled.iter().any(|(k, _)| *k == tokens) {
                return Err(OracleError::BadTaxonomy(format!(
                    "duplicate keyword {:?}",
                    rule.keyword
                )));
            }
            types.insert(rule.item_type.clone());
            compiled.push((tokens, rule.item_type));
        }
        Ok(Self {
            types,
            rules: compiled,
        })
    }

    /// Reads a JSON list of `{"keyword": .., "type": ..}` entries.
    pub fn from_json(text: &str) -> Result<Self, OracleError> {
        let rules: Vec<KeywordRule> =
            serde_json::from_str(text).map_err(|e| OracleError::BadTaxonomy(e.to_string()))?;
        Self::new(rules)
    }

    pub fn types(&self) -> &BTreeSet<String> {
        &self.types
    }

    /// First rule whose keyword occurs as whole words in `name`.
    pub fn predict(&self, name: &str) -> Option<&str> {
        let tokens = tokenize(name);
        self.rules
            .iter()
            .find(|(kw, _)| tokens.windows(kw.len()).any(|w| w == kw.as_slice()))
            .map(|(_, t)| t.as_str())
    }
}

/// Built-in retail taxonomy matching the shipped `item_information` data.
pub fn builtin_taxonomy() -> Taxonomy {
    Taxonomy::from_json(include_str!("../data/taxonomy.json")).expect("shipped taxonomy is valid")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classification {
    pub item_type: String,
    pub corrected: bool,
    /// No keyword matched, so the current type was kept without evidence.
    pub unverified: bool,
}

pub fn classify_item_type(
    item_name: &str,
    current_type: &str,
    taxonomy: &Taxonomy,
) -> Result<Classification, OracleError> {
    if !taxonomy.types.contains(current_type) {
        return Err(OracleError::UnknownType(current_type.to_string()));
    }
    Ok(match taxonomy.predict(item_name) {
        Some(pred) if pred != current_type => Classification {
            item_type: pred.to_string(),
            corrected: true,
            unverified: false,
        },
        Some(_) => Classification {
            item_type: current_type.to_string(),
            corrected: false,
            unverified: false,
        },
        None => Classification {
            item_type: current_type.to_string(),
            corrected: false,
            unverified: true,
        },
    })
}

// ---------------------------------------------------------------------------
// Embedding

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |hash, b| {
        (hash ^ u64::from(*b)).wrapping_mul(FNV_PRIME)
    })
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Signed feature-hashing embedding with unit L2 norm.
pub fn embed_text(text: &str, dim: usize) -> Result<Vec<f64>, OracleError> {
    if dim < 2 {
        return Err(OracleError::BadDimension(dim));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(OracleError::EmptyText);
    }
    let mut acc = vec![0.0f64; dim];
    for token in &tokens {
        let h = fnv1a_64(token.as_bytes());
        let bucket = (h % dim as u64) as usize;
        acc[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(OracleError::DegenerateEmbedding);
    }
    acc.iter_mut().for_each(|x| *x /= norm);
    Ok(acc)
}
