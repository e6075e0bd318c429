//! User-defined prompts: a template plus the contract its answers must meet.
//!
//! Manifests are TOML documents whose top-level keys mirror [`UdpManifest`]:
//!
//! ```toml
//! name = "date_normalize"
//! version = "1.0.0"
//! inputs = ["date"]
//! template = "Rewrite the date {{date}} as YYYYMMDD."
//! oracle = "date_normalize"
//!
//! [output]
//! column = "date_norm"
//! contract = { kind = "date_yyyymmdd" }
//!
//! [repair]
//! max_repairs = 2
//!
//! [[examples]]
//! row = { date = "2021/01/02" }
//! expected = "20210102"
//! ```
//!
//! Placeholders are `{{column}}`; `{{{{` and `}}}}` render as literal `{{`
//! and `}}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::OracleTag;
use crate::table::{Row, Schema, Value};
use crate::validator::{ContractSpec, OutputContract};

pub const DEFAULT_MAX_REPAIRS: u32 = 2;
pub const DEFAULT_MODEL: &str = "gdo-default";
pub const DEFAULT_MAX_TOKENS: u32 = 256;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("missing required field `{0}`")]
    Missing(String),
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("unknown contract kind in `output.contract`: {0}")]
    UnknownContract(String),
    #[error("unknown oracle tag in `oracle`: {0:?}")]
    UnknownOracle(String),
    #[error("unknown placeholder {0} in `template`")]
    UnknownPlaceholder(String),
    #[error("malformed manifest: {0}")]
    Syntax(String),
}

impl ManifestError {
    fn invalid(key: &str, message: impl Into<String>) -> Self {
        ManifestError::Invalid {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("row has no input column {0:?}")]
    MissingColumn(String),
    #[error("column {0:?} holds a vector, which cannot be rendered into a prompt")]
    VectorCell(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

/// Parsed `{{name}}` template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    source: String,
    segments: Vec<Segment>,
}

impl Template {
    pub fn parse(source: &str) -> Result<Self, ManifestError> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut rest = source;
        while !rest.is_empty() {
            if let Some(r) = rest.strip_prefix("{{{{") {
                literal.push_str("{{");
                rest = r;
            } else if let Some(r) = rest.strip_prefix("}}}}") {
                literal.push_str("}}");
                rest = r;
            } else if let Some(r) = rest.strip_prefix("{{") {
                let end = r
                    .find("}}")
                    .ok_or_else(|| ManifestError::invalid("template", "unclosed `{{`"))?;
                let name = &r[..end];
                if name.is_empty() || name.contains(['{', '}']) {
                    return Err(ManifestError::invalid(
                        "template",
                        format!("bad placeholder name {name:?}"),
                    ));
                }
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Placeholder(name.to_string()));
                rest = &r[end + 2..];
            } else {
                let c = rest.chars().next().expect("non-empty");
                literal.push(c);
                rest = &rest[c.len_utf8()..];
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Self {
            source: source.to_string(),
            segments,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Placeholder(p) => Some(p.as_str()),
            Segment::Literal(_) => None,
        })
    }

    fn has_literal_text(&self) -> bool {
        self.segments.iter().any(|s| match s {
            Segment::Literal(l) => !l.trim().is_empty(),
            Segment::Placeholder(_) => false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenExample {
    pub row: BTreeMap<String, String>,
    pub expected: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub column: String,
    pub contract: OutputContract,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<i64>,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: None,
        }
    }
}

/// A validated user-defined prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct UdpManifest {
    pub name: String,
    pub version: String,
    pub model: String,
    pub inputs: Vec<String>,
    pub template: Template,
    pub output: OutputSpec,
    pub oracle: Option<OracleTag>,
    pub params: BTreeMap<String, String>,
    pub decoding: Decoding,
    pub examples: Vec<GoldenExample>,
    pub max_repairs: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    name: Option<String>,
    version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    inputs: Option<Vec<String>>,
    template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    oracle: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_tokens: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<i64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    params: BTreeMap<String, String>,
    output: Option<RawOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    repair: Option<RawRepair>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    examples: Vec<GoldenExample>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    column: Option<String>,
    contract: Option<toml::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRepair {
    max_repairs: Option<i64>,
}

fn required<T>(value: Option<T>, key: &str) -> Result<T, ManifestError> {
    value.ok_or_else(|| ManifestError::Missing(key.to_string()))
}

fn parse_contract(value: toml::Value) -> Result<OutputContract, ManifestError> {
    const KINDS: [&str; 7] = [
        "date_yyyymmdd",
        "integer",
        "real_range",
        "enumeration",
        "pattern",
        "vector",
        "tab_separated",
    ];
    let kind = value
        .get("kind")
        .ok_or_else(|| ManifestError::Missing("output.contract.kind".into()))?
        .as_str()
        .ok_or_else(|| ManifestError::invalid("output.contract.kind", "must be a string"))?;
    if !KINDS.contains(&kind) {
        return Err(ManifestError::UnknownContract(kind.to_string()));
    }
    let spec: ContractSpec = value
        .try_into()
        .map_err(|e: toml::de::Error| ManifestError::invalid("output.contract", e.message()))?;
    OutputContract::try_from(spec).map_err(|e| ManifestError::invalid("output.contract", e.to_string()))
}

impl UdpManifest {
    pub fn parse(document: &str) -> Result<Self, ManifestError> {
        let raw: RawManifest =
            toml::from_str(document).map_err(|e| ManifestError::Syntax(e.to_string()))?;
        Self::from_raw(raw)
    }

    fn from_raw(raw: RawManifest) -> Result<Self, ManifestError> {
        let name = required(raw.name, "name")?;
        if name.is_empty() {
            return Err(ManifestError::invalid("name", "must be non-empty"));
        }
        let version = required(raw.version, "version")?;
        let inputs = required(raw.inputs, "inputs")?;
        for (i, input) in inputs.iter().enumerate() {
            if input.is_empty() {
                return Err(ManifestError::invalid("inputs", "empty column name"));
            }
            if inputs[..i].contains(input) {
                return Err(ManifestError::invalid("inputs", format!("duplicate column {input:?}")));
            }
        }
        let template = Template::parse(&required(raw.template, "template")?)?;
        if !template.has_literal_text() {
            return Err(ManifestError::invalid("template", "needs instruction text besides placeholders"));
        }
        if let Some(unknown) = template.placeholders().find(|p| !inputs.iter().any(|i| i == p)) {
            return Err(ManifestError::UnknownPlaceholder(unknown.to_string()));
        }

        let oracle = raw
            .oracle
            .map(|o| o.parse::<OracleTag>().map_err(|_| ManifestError::UnknownOracle(o)))
            .transpose()?;
        let consumed = oracle.map_or(0, OracleTag::arity);
        if let Some(tag) = oracle {
            if inputs.len() < tag.arity() {
                return Err(ManifestError::invalid(
                    "inputs",
                    format!("oracle {tag} reads {} input column(s)", tag.arity()),
                ));
            }
            for p in tag.required_params() {
                if !raw.params.contains_key(*p) {
                    return Err(ManifestError::Missing(format!("params.{p}")));
                }
            }
        }
        for (i, input) in inputs.iter().enumerate() {
            if i >= consumed && !template.placeholders().any(|p| p == input) {
                return Err(ManifestError::invalid(
                    "inputs",
                    format!("column {input:?} is neither in the template nor read by the oracle"),
                ));
            }
        }

        let raw_output = required(raw.output, "output")?;
        let column = required(raw_output.column, "output.column")?;
        if column.is_empty() {
            return Err(ManifestError::invalid("output.column", "must be non-empty"));
        }
        if inputs.contains(&column) {
            return Err(ManifestError::invalid("output.column", "must not be one of the inputs"));
        }
        let contract = parse_contract(required(raw_output.contract, "output.contract")?)?;

        let temperature = raw.temperature.unwrap_or(0.0);
        if !(temperature.is_finite() && temperature >= 0.0) {
            return Err(ManifestError::invalid("temperature", "must be >= 0"));
        }
        let max_tokens = match raw.max_tokens {
            None => DEFAULT_MAX_TOKENS,
            Some(n) if n > 0 && n <= i64::from(u32::MAX) => n as u32,
            Some(n) => return Err(ManifestError::invalid("max_tokens", format!("{n} is not positive"))),
        };
        let max_repairs = match raw.repair.and_then(|r| r.max_repairs) {
            None => DEFAULT_MAX_REPAIRS,
            Some(n) if (0..=i64::from(u32::MAX)).contains(&n) => n as u32,
            Some(n) => {
                return Err(ManifestError::invalid(
                    "repair.max_repairs",
                    format!("{n} is negative"),
                ))
            }
        };

        for (i, ex) in raw.examples.iter().enumerate() {
            if let Some(missing) = inputs.iter().find(|c| !ex.row.contains_key(*c)) {
                return Err(ManifestError::invalid(
                    &format!("examples[{i}].row"),
                    format!("missing input column {missing:?}"),
                ));
            }
        }

        Ok(Self {
            name,
            version,
            model: raw.model.unwrap_or_else(|| DEFAULT_MODEL.to_string()),
            inputs,
            template,
            output: OutputSpec { column, contract },
            oracle,
            params: raw.params,
            decoding: Decoding {
                temperature,
                max_tokens,
                seed: raw.seed,
            },
            examples: raw.examples,
            max_repairs,
        })
    }

    /// TOML form; `parse(serialize(m)) == m`.
    pub fn serialize(&self) -> String {
        let contract = toml::Value::try_from(self.output.contract.to_spec())
            .expect("contract specs serialize");
        let raw = RawManifest {
            name: Some(self.name.clone()),
            version: Some(self.version.clone()),
            model: Some(self.model.clone()),
            inputs: Some(self.inputs.clone()),
            template: Some(self.template.source().to_string()),
            oracle: self.oracle.map(|o| o.as_str().to_string()),
            temperature: Some(self.decoding.temperature),
            max_tokens: Some(i64::from(self.decoding.max_tokens)),
            seed: self.decoding.seed,
            params: self.params.clone(),
            output: Some(RawOutput {
                column: Some(self.output.column.clone()),
                contract: Some(contract),
            }),
            repair: Some(RawRepair {
                max_repairs: Some(i64::from(self.max_repairs)),
            }),
            examples: self.examples.clone(),
        };
        toml::to_string(&raw).expect("manifest serializes")
    }

    /// Substitutes the row's input cells into the template.
    pub fn render_prompt(&self, schema: &Schema, row: &Row) -> Result<String, RenderError> {
        let mut out = String::with_capacity(self.template.source.len() + 32);
        for seg in &self.template.segments {
            match seg {
                Segment::Literal(l) => out.push_str(l),
                Segment::Placeholder(col) => out.push_str(&cell_text(schema, row, col)?),
            }
        }
        Ok(out)
    }

    /// Canonical text of every input column, in declaration order.
    pub fn structured_inputs(
        &self,
        schema: &Schema,
        row: &Row,
    ) -> Result<Vec<(String, String)>, RenderError> {
        self.inputs
            .iter()
            .map(|c| Ok((c.clone(), cell_text(schema, row, c)?)))
            .collect()
    }
}

fn cell_text(schema: &Schema, row: &Row, column: &str) -> Result<String, RenderError> {
    match row.get(schema, column) {
        None => Err(RenderError::MissingColumn(column.to_string())),
        Some(Value::Vector(_)) => Err(RenderError::VectorCell(column.to_string())),
        Some(v) => Ok(v.canonical_text()),
    }
}

/// The five manifests that ship with the engine, as `(file name, source)`.
pub const BUILTIN_SOURCES: [(&str, &str); 5] = [
    ("date_normalize.udp", include_str!("../udps/date_normalize.udp")),
    ("to_unix_epoch.udp", include_str!("../udps/to_unix_epoch.udp")),
    ("normalize_rating.udp", include_str!("../udps/normalize_rating.udp")),
    ("classify_item_type.udp", include_str!("../udps/classify_item_type.udp")),
    ("embed_text.udp", include_str!("../udps/embed_text.udp")),
];

pub fn builtin(name: &str) -> Option<UdpManifest> {
    BUILTIN_SOURCES
        .iter()
        .find(|(file, _)| file.trim_end_matches(".udp") == name)
        .map(|(_, src)| UdpManifest::parse(src).expect("built-in manifests are valid"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::ValueKind;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"
name = "dates"
version = "1"
inputs = ["date"]
template = "Normalize date {{date}} to YYYYMMDD"
oracle = "date_normalize"

[output]
column = "date_norm"
contract = { kind = "date_yyyymmdd" }
"#;

    fn with(replace: &str, by: &str) -> String {
        assert!(MINIMAL.contains(replace));
        MINIMAL.replace(replace, by)
    }

    fn date_row(v: Value) -> (Schema, Row) {
        (Schema::of([("date", ValueKind::Text)]).unwrap(), Row(vec![v]))
    }

    #[test]
    fn parses_minimal_manifest() {
        let m = UdpManifest::parse(MINIMAL).unwrap();
        assert_eq!(m.oracle, Some(OracleTag::DateNormalize));
        assert_eq!(m.max_repairs, DEFAULT_MAX_REPAIRS);
        assert_eq!(m.decoding, Decoding::default());
        assert_eq!(m.output.contract, OutputContract::DateYyyymmdd);
        assert_eq!(UdpManifest::parse(&m.serialize()).unwrap(), m);
    }

    #[test]
    fn unknown_placeholder() {
        let err = UdpManifest::parse(&with("{{date}}", "{{datex}}")).unwrap_err();
        assert_eq!(err.to_string(), "unknown placeholder datex in `template`");
    }

    #[test]
    fn negative_repairs_rejected() {
        let doc = format!("{MINIMAL}\n[repair]\nmax_repairs = -1\n");
        let err = UdpManifest::parse(&doc).unwrap_err();
        assert!(err.to_string().contains("repair.max_repairs"), "{err}");
    }

    #[test]
    fn error_names_offending_key() {
        let err = UdpManifest::parse(&with("version = \"1\"\n", "")).unwrap_err();
        assert!(matches!(&err, ManifestError::Missing(k) if k == "version"), "{err}");
        let err = UdpManifest::parse(&with("date_yyyymmdd", "date_ddmmyyyy")).unwrap_err();
        assert!(matches!(err, ManifestError::UnknownContract(_)));
        let err = UdpManifest::parse(&with("oracle = \"date_normalize\"", "oracle = \"dates\"")).unwrap_err();
        assert!(matches!(err, ManifestError::UnknownOracle(_)));
        let err = UdpManifest::parse(&with("column = \"date_norm\"", "column = \"date\"")).unwrap_err();
        assert!(err.to_string().contains("output.column"), "{err}");
        let err = UdpManifest::parse(&with("\"date_normalize\"", "\"normalize_rating\"")).unwrap_err();
        assert!(matches!(&err, ManifestError::Missing(k) if k == "params.lo"), "{err}");
        let err = UdpManifest::parse(&with("{ kind = \"date_yyyymmdd\" }", "{ kind = \"real_range\", lo = 1.0, hi = 0.0 }")).unwrap_err();
        assert!(err.to_string().contains("output.contract"), "{err}");
    }

    #[test]
    fn inputs_must_be_used() {
        let doc = with("inputs = [\"date\"]", "inputs = [\"date\", \"other\"]");
        let err = UdpManifest::parse(&doc).unwrap_err();
        assert!(err.to_string().contains("other"), "{err}");
        // an oracle-consumed input need not appear in the template
        let doc = with("template = \"Normalize date {{date}} to YYYYMMDD\"", "template = \"Normalize the date.\"");
        assert!(UdpManifest::parse(&doc).is_ok());
        let doc = doc.replace("oracle = \"date_normalize\"\n", "");
        assert!(UdpManifest::parse(&doc).is_err());
    }

    #[test]
    fn example_rows_cover_inputs() {
        let doc = format!("{MINIMAL}\n[[examples]]\nrow = {{ other = \"x\" }}\nexpected = \"y\"\n");
        let err = UdpManifest::parse(&doc).unwrap_err();
        assert!(err.to_string().contains("examples[0].row"), "{err}");
    }

    #[test]
    fn rendering() {
        let m = UdpManifest::parse(MINIMAL).unwrap();
        let (schema, row) = date_row(Value::Text("2021/01/02".into()));
        assert_eq!(m.render_prompt(&schema, &row).unwrap(), "Normalize date 2021/01/02 to YYYYMMDD");
        let (schema, row) = date_row(Value::Null);
        assert_eq!(m.render_prompt(&schema, &row).unwrap(), "Normalize date  to YYYYMMDD");
        let (schema, row) = date_row(Value::Vector(vec![1.0]));
        assert_eq!(m.render_prompt(&schema, &row), Err(RenderError::VectorCell("date".into())));
        let other = Schema::of([("x", ValueKind::Text)]).unwrap();
        assert_eq!(
            m.render_prompt(&other, &Row(vec![Value::Null])),
            Err(RenderError::MissingColumn("date".into()))
        );
    }

    #[test]
    fn template_without_placeholders_is_verbatim() {
        let t = Template::parse("Just {this} text }").unwrap();
        assert_eq!(t.segments, vec![Segment::Literal("Just {this} text }".into())]);
    }

    #[test]
    fn brace_escapes() {
        let t = Template::parse("{{{{x}}}} {{date}}").unwrap();
        assert_eq!(
            t.segments,
            vec![Segment::Literal("{{x}} ".into()), Segment::Placeholder("date".into())]
        );
        assert!(Template::parse("open {{date").is_err());
        assert!(Template::parse("{{}}").is_err());
    }

    #[test]
    fn builtins_parse() {
        for (file, _) in BUILTIN_SOURCES {
            let name = file.trim_end_matches(".udp");
            let m = builtin(name).unwrap();
            assert_eq!(m.name, name);
            assert!(!m.examples.is_empty());
            assert_eq!(UdpManifest::parse(&m.serialize()).unwrap(), m);
        }
    }

    proptest! {
        #[test]
        fn render_reads_only_inputs(date in ".{0,12}", a in ".{0,8}", b in ".{0,8}") {
            let m = UdpManifest::parse(MINIMAL).unwrap();
            let schema = Schema::all_text(["x", "date"]).unwrap();
            let r1 = Row(vec![Value::Text(a), Value::Text(date.clone())]);
            let r2 = Row(vec![Value::Text(b), Value::Text(date)]);
            prop_assert_eq!(m.render_prompt(&schema, &r1).unwrap(), m.render_prompt(&schema, &r2).unwrap());
        }

        #[test]
        fn serialize_round_trip(repairs in 0u32..5, temp in 0.0f64..2.0, seed in proptest::option::of(any::<i64>()), lo in -10.0f64..0.0) {
            let doc = format!(
                "name = \"r\"\nversion = \"2\"\ninputs = [\"x\"]\ntemplate = \"Scale {{{{x}}}} {{{{{{{{lit}}}}}}}}\"\ntemperature = {temp:?}\n{}\n[params]\nlo = \"{lo}\"\nhi = \"1\"\n[output]\ncolumn = \"y\"\ncontract = {{ kind = \"real_range\", lo = {lo:?}, hi = 1.0 }}\n[repair]\nmax_repairs = {repairs}\n",
                seed.map(|s| format!("seed = {s}")).unwrap_or_default()
            );
            let m = UdpManifest::parse(&doc).unwrap();
            prop_assert_eq!(UdpManifest::parse(&m.serialize()).unwrap(), m);
        }
    }
}
