//! Output contracts: machine-checkable shapes that backend text must have
//! before it becomes a cell, plus the repair prompts used when it doesn't.

use std::collections::BTreeSet;
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::CivilDate;
use crate::table::{format_real, parse_vector, Value, ValueKind};

pub const DEFAULT_NORM_TOL: f64 = 1e-9;

/// Separator written between the original prompt and the repair request.
pub const REPAIR_MARKER: &str = "\n\nYour previous answer was invalid: ";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContractError {
    #[error("real range needs lo < hi (got {lo}..{hi})")]
    EmptyRange { lo: f64, hi: f64 },
    #[error("integer bounds need min <= max (got {min}..{max})")]
    EmptyIntegerRange { min: i64, max: i64 },
    #[error("enumeration must be non-empty")]
    EmptyEnumeration,
    #[error("duplicate enumeration value {0:?}")]
    DuplicateEnumValue(String),
    #[error("pattern does not compile: {0}")]
    BadPattern(String),
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("field count must be positive")]
    ZeroFields,
    #[error("norm tolerance must be finite and non-negative")]
    BadTolerance,
}

/// Serialized form of a contract (as it appears in manifests).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContractSpec {
    DateYyyymmdd,
    Integer {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<i64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<i64>,
    },
    RealRange {
        lo: f64,
        hi: f64,
    },
    Enumeration {
        allowed: Vec<String>,
    },
    Pattern {
        regex: String,
    },
    Vector {
        dim: usize,
        #[serde(default)]
        unit_norm: bool,
        #[serde(default = "default_norm_tol")]
        norm_tol: f64,
    },
    TabSeparated {
        n_fields: usize,
    },
}

fn default_norm_tol() -> f64 {
    DEFAULT_NORM_TOL
}

/// A validated output contract.
#[derive(Debug, Clone)]
pub enum OutputContract {
    DateYyyymmdd,
    Integer { min: Option<i64>, max: Option<i64> },
    RealRange { lo: f64, hi: f64 },
    Enumeration(Vec<String>),
    /// Source text and its fully anchored compilation.
    Pattern { source: String, anchored: Regex },
    Vector { dim: usize, unit_norm: bool, norm_tol: f64 },
    TabSeparated(usize),
}

impl PartialEq for OutputContract {
    fn eq(&self, other: &Self) -> bool {
        self.to_spec() == other.to_spec()
    }
}

impl TryFrom<ContractSpec> for OutputContract {
    type Error = ContractError;

    fn try_from(spec: ContractSpec) -> Result<Self, Self::Error> {
        Ok(match spec {
            ContractSpec::DateYyyymmdd => OutputContract::DateYyyymmdd,
            ContractSpec::Integer { min, max } => {
                if let (Some(min), Some(max)) = (min, max) {
                    if min > max {
                        return Err(ContractError::EmptyIntegerRange { min, max });
                    }
                }
                OutputContract::Integer { min, max }
            }
            ContractSpec::RealRange { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(ContractError::EmptyRange { lo, hi });
                }
                OutputContract::RealRange { lo, hi }
            }
            ContractSpec::Enumeration { allowed } => {
                if allowed.is_empty() {
                    return Err(ContractError::EmptyEnumeration);
                }
                let mut seen = BTreeSet::new();
                for v in &allowed {
                    if !seen.insert(v) {
                        return Err(ContractError::DuplicateEnumValue(v.clone()));
                    }
                }
                OutputContract::Enumeration(allowed)
            }
            ContractSpec::Pattern { regex } => {
                let anchored = Regex::new(&format!("^(?:{regex})$"))
                    .map_err(|e| ContractError::BadPattern(e.to_string()))?;
                OutputContract::Pattern {
                    source: regex,
                    anchored,
                }
            }
            ContractSpec::Vector {
                dim,
                unit_norm,
                norm_tol,
            } => {
                if dim == 0 {
                    return Err(ContractError::ZeroDimension);
                }
                if !(norm_tol.is_finite() && norm_tol >= 0.0) {
                    return Err(ContractError::BadTolerance);
                }
                OutputContract::Vector {
                    dim,
                    unit_norm,
                    norm_tol,
                }
            }
            ContractSpec::TabSeparated { n_fields } => {
                if n_fields == 0 {
                    return Err(ContractError::ZeroFields);
                }
                OutputContract::TabSeparated(n_fields)
            }
        })
    }
}

impl OutputContract {
    pub fn to_spec(&self) -> ContractSpec {
        match self {
            OutputContract::DateYyyymmdd => ContractSpec::DateYyyymmdd,
            OutputContract::Integer { min, max } => ContractSpec::Integer {
                min: *min,
                max: *max,
            },
            OutputContract::RealRange { lo, hi } => ContractSpec::RealRange { lo: *lo, hi: *hi },
            OutputContract::Enumeration(allowed) => ContractSpec::Enumeration {
                allowed: allowed.clone(),
            },
            OutputContract::Pattern { source, .. } => ContractSpec::Pattern {
                regex: source.clone(),
            },
            OutputContract::Vector {
                dim,
                unit_norm,
                norm_tol,
            } => ContractSpec::Vector {
                dim: *dim,
                unit_norm: *unit_norm,
                norm_tol: *norm_tol,
            },
            OutputContract::TabSeparated(n) => ContractSpec::TabSeparated { n_fields: *n },
        }
    }

    /// Column kind of values that pass this contract.
    pub fn value_kind(&self) -> ValueKind {
        match self {
            OutputContract::Integer { .. } => ValueKind::Integer,
            OutputContract::RealRange { .. } => ValueKind::Real,
            OutputContract::Vector { .. } => ValueKind::Vector,
            OutputContract::DateYyyymmdd
            | OutputContract::Enumeration(_)
            | OutputContract::Pattern { .. }
            | OutputContract::TabSeparated(_) => ValueKind::Text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    BadFormat,
    OutOfRange,
    NotInEnum,
    BadLength,
    BadSeparator,
    NotANumber,
    InvalidDate,
    BackendError,
}

impl ReasonCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReasonCode::BadFormat => "bad_format",
            ReasonCode::OutOfRange => "out_of_range",
            ReasonCode::NotInEnum => "not_in_enum",
            ReasonCode::BadLength => "bad_length",
            ReasonCode::BadSeparator => "bad_separator",
            ReasonCode::NotANumber => "not_a_number",
            ReasonCode::InvalidDate => "invalid_date",
            ReasonCode::BackendError => "backend_error",
        }
    }
}

impl fmt::Display for ReasonCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub contract: OutputContract,
    pub raw_text: String,
    pub code: ReasonCode,
    pub message: String,
}

impl Violation {
    fn new(contract: &OutputContract, raw: &str, code: ReasonCode, message: impl Into<String>) -> Self {
        Self {
            contract: contract.clone(),
            raw_text: raw.to_string(),
            code,
            message: message.into(),
        }
    }

    /// `code: message`
    pub fn reason(&self) -> String {
        format!("{}: {}", self.code, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CheckOutcome {
    Pass(Value),
    Violation(Violation),
}

impl CheckOutcome {
    pub fn is_pass(&self) -> bool {
        matches!(self, CheckOutcome::Pass(_))
    }
}

fn strip_ascii_ws(s: &str) -> &str {
    s.trim_matches(|c: char| c.is_ascii_whitespace())
}

fn parse_number(s: &str) -> Option<f64> {
    crate::table::coerce_value(s, ValueKind::Real)
        .ok()
        .and_then(|v| match v {
            Value::Real(r) => Some(r),
            _ => None,
        })
}

/// Checks backend text against a contract. Only leading and trailing ASCII
/// whitespace is stripped; anything else that doesn't fit is a violation.
pub fn check(contract: &OutputContract, text: &str) -> CheckOutcome {
    let s = strip_ascii_ws(text);
    let fail = |code, msg: String| CheckOutcome::Violation(Violation::new(contract, text, code, msg));
    if let Some(rest) = s.strip_prefix("ERROR:") {
        return fail(ReasonCode::BackendError, format!("backend reported: {}", rest.trim()));
    }
    match contract {
        OutputContract::DateYyyymmdd => {
            if s.len() != 8 || !s.bytes().all(|b| b.is_ascii_digit()) {
                return fail(ReasonCode::BadFormat, format!("{s:?} is not 8 digits"));
            }
            match CivilDate::from_compact(s) {
                Ok(_) => CheckOutcome::Pass(Value::Text(s.to_string())),
                Err(_) => fail(ReasonCode::InvalidDate, format!("{s:?} is not a calendar date")),
            }
        }
        OutputContract::Integer { min, max } => {
            let Ok(Value::Integer(i)) = crate::table::coerce_value(s, ValueKind::Integer) else {
                return fail(ReasonCode::NotANumber, format!("{s:?} is not an integer"));
            };
            if min.is_some_and(|m| i < m) || max.is_some_and(|m| i > m) {
                return fail(ReasonCode::OutOfRange, format!("{i} outside bounds"));
            }
            CheckOutcome::Pass(Value::Integer(i))
        }
        OutputContract::RealRange { lo, hi } => {
            let Some(x) = parse_number(s) else {
                return fail(ReasonCode::NotANumber, format!("{s:?} is not a number"));
            };
            if x < *lo || x > *hi {
                return fail(ReasonCode::OutOfRange, format!("{x} outside [{lo}, {hi}]"));
            }
            CheckOutcome::Pass(Value::Real(x))
        }
        OutputContract::Enumeration(allowed) => {
            if allowed.iter().any(|a| a == s) {
                CheckOutcome::Pass(Value::Text(s.to_string()))
            } else {
                fail(ReasonCode::NotInEnum, format!("{s:?} is not an allowed value"))
            }
        }
        OutputContract::Pattern { anchored, .. } => {
            if anchored.is_match(s) {
                CheckOutcome::Pass(Value::Text(s.to_string()))
            } else {
                fail(ReasonCode::BadFormat, format!("{s:?} does not match the pattern"))
            }
        }
        OutputContract::Vector {
            dim,
            unit_norm,
            norm_tol,
        } => {
            let looks_like_array = s.starts_with('[') && s.ends_with(']');
            if !looks_like_array {
                return fail(ReasonCode::BadFormat, "not a bracketed number list".into());
            }
            let Some(v) = parse_vector(s) else {
                return fail(ReasonCode::NotANumber, "vector has a non-numeric element".into());
            };
            if v.len() != *dim {
                return fail(ReasonCode::BadLength, format!("{} components, expected {dim}", v.len()));
            }
            if *unit_norm {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > *norm_tol {
                    return fail(ReasonCode::OutOfRange, format!("L2 norm {norm} is not 1"));
                }
            }
            CheckOutcome::Pass(Value::Vector(v))
        }
        OutputContract::TabSeparated(n) => {
            if s.contains(['\n', '\r']) {
                return fail(ReasonCode::BadFormat, "more than one line".into());
            }
            let fields: Vec<&str> = s.split('\t').collect();
            if fields.len() == *n && fields.iter().all(|f| !f.is_empty()) {
                return CheckOutcome::Pass(Value::Text(s.to_string()));
            }
            let alt = [',', ';', '|'].into_iter().find(|c| s.contains(*c));
            if s.contains("\t\t") {
                fail(ReasonCode::BadSeparator, "consecutive tab characters".into())
            } else if let (1, Some(c)) = (fields.len(), alt) {
                fail(ReasonCode::BadSeparator, format!("fields separated by {c:?} instead of tabs"))
            } else {
                fail(ReasonCode::BadLength, format!("{} fields, expected {n}", fields.len()))
            }
        }
    }
}

/// One-line description used in repair prompts and reports.
pub fn describe(contract: &OutputContract) -> String {
    match contract {
        OutputContract::DateYyyymmdd => "an 8-digit date in YYYYMMDD form".to_string(),
        OutputContract::Integer { min, max } => match (min, max) {
            (None, None) => "an integer".to_string(),
            (Some(lo), None) => format!("an integer greater than or equal to {lo}"),
            (None, Some(hi)) => format!("an integer less than or equal to {hi}"),
            (Some(lo), Some(hi)) => format!("an integer between {lo} and {hi} inclusive"),
        },
        OutputContract::RealRange { lo, hi } => format!(
            "a decimal number between {} and {} inclusive",
            format_real(*lo),
            format_real(*hi)
        ),
        OutputContract::Enumeration(allowed) => format!("exactly one of: {}", allowed.join(", ")),
        OutputContract::Pattern { source, .. } => {
            format!("a string fully matching the regular expression {source}")
        }
        OutputContract::Vector {
            dim,
            unit_norm,
            norm_tol,
        } => {
            let mut d = format!("a bracketed list of {dim} comma-separated numbers");
            if *unit_norm {
                d.push_str(&format!(" with L2 norm 1 (tolerance {})", format_real(*norm_tol)));
            }
            d
        }
        OutputContract::TabSeparated(n) => {
            format!("exactly {n} fields separated by single tab characters")
        }
    }
}

/// Re-asks with the violation spelled out. Depends only on the original
/// prompt, the violation's reason code and its contract.
pub fn repair_prompt(original: &str, violation: &Violation, _attempt: u32) -> String {
    let suffix = format!(
        "{REPAIR_MARKER}{}. Answer again with ONLY a value matching: {}.",
        violation.code,
        describe(&violation.contract)
    );
    if original.is_empty() {
        suffix.trim_start().to_string()
    } else {
        format!("{original}{suffix}")
    }
}

/// The original prompt behind a repair prompt, if `prompt` is one.
pub fn original_of_repair(prompt: &str) -> Option<&str> {
    prompt
        .rfind(REPAIR_MARKER)
        .map(|i| &prompt[..i])
        .or_else(|| prompt.starts_with(REPAIR_MARKER.trim_start()).then_some(""))
}
