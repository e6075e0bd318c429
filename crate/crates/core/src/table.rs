//! Typed in-memory tables with CSV and JSONL ingestion and emission.
//!
//! Cells are one of five kinds (null, text, integer, real, real vector).
//! Empty CSV fields read as null; a quoted empty field in a text column
//! reads as the empty string so text round-trips exactly.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Map;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("row {row}, column {column:?}: cannot read {raw:?} as {kind}")]
    Coerce {
        row: usize,
        column: String,
        raw: String,
        kind: ValueKind,
    },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("invalid row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("input is not valid UTF-8")]
    Utf8,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Text,
    Integer,
    Real,
    Vector,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueKind::Text => "text",
            ValueKind::Integer => "integer",
            ValueKind::Real => "real",
            ValueKind::Vector => "vector",
        })
    }
}

impl std::str::FromStr for ValueKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(ValueKind::Text),
            "integer" => Ok(ValueKind::Integer),
            "real" => Ok(ValueKind::Real),
            "vector" => Ok(ValueKind::Vector),
            other => Err(format!("unknown value kind {other:?}")),
        }
    }
}

/// A single cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Null,
    Text(String),
    Integer(i64),
    Real(f64),
    Vector(Vec<f64>),
}

impl Value {
    /// Kind of a non-null value.
    pub fn kind(&self) -> Option<ValueKind> {
        match self {
            Value::Null => None,
            Value::Text(_) => Some(ValueKind::Text),
            Value::Integer(_) => Some(ValueKind::Integer),
            Value::Real(_) => Some(ValueKind::Real),
            Value::Vector(_) => Some(ValueKind::Vector),
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    /// Canonical text form: integers in decimal, reals as the shortest
    /// decimal that round-trips, vectors as `[v1,v2,...]`, null as "".
    pub fn canonical_text(&self) -> String {
        match self {
            Value::Null => String::new(),
            Value::Text(s) => s.clone(),
            Value::Integer(i) => i.to_string(),
            Value::Real(r) => format_real(*r),
            Value::Vector(v) => format_vector(v),
        }
    }

    fn check_invariants(&self) -> Result<(), String> {
        match self {
            Value::Real(r) if !r.is_finite() => Err(format!("non-finite real {r}")),
            Value::Vector(v) if v.is_empty() => Err("empty vector".to_string()),
            Value::Vector(v) if v.iter().any(|x| !x.is_finite()) => {
                Err("vector has a non-finite component".to_string())
            }
            _ => Ok(()),
        }
    }

    fn to_json(&self) -> serde_json::Value {
        use serde_json::Value as J;
        match self {
            Value::Null => J::Null,
            Value::Text(s) => J::String(s.clone()),
            Value::Integer(i) => J::from(*i),
            Value::Real(r) => J::from(*r),
            Value::Vector(v) => J::Array(v.iter().map(|x| J::from(*x)).collect()),
        }
    }
}

pub fn format_real(r: f64) -> String {
    // Display for f64 is the shortest representation that parses back exactly.
    format!("{r}")
}

pub fn format_vector(v: &[f64]) -> String {
    let mut out = String::with_capacity(v.len() * 8 + 2);
    out.push('[');
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format_real(*x));
    }
    out.push(']');
    out
}

/// Parses `[v1,v2,...]` (whitespace around elements allowed).
pub fn parse_vector(raw: &str) -> Option<Vec<f64>> {
    let inner = raw.trim().strip_prefix('[')?.strip_suffix(']')?;
    if inner.trim().is_empty() {
        return None;
    }
    inner
        .split(',')
        .map(|part| parse_real(part.trim()))
        .collect()
}

fn parse_real(raw: &str) -> Option<f64> {
    // Rust's float parser also accepts "inf"/"nan"; only finite numerals count.
    let looks_numeric = !raw.is_empty()
        && raw
            .bytes()
            .all(|b| b.is_ascii_digit() || matches!(b, b'+' | b'-' | b'.' | b'e' | b'E'));
    if !looks_numeric {
        return None;
    }
    raw.parse::<f64>().ok().filter(|r| r.is_finite())
}

fn parse_integer(raw: &str) -> Option<i64> {
    let digits = raw.strip_prefix(['+', '-']).unwrap_or(raw);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    raw.parse::<i64>().ok()
}

/// Error from [`coerce_value`], without row/column context.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot read {raw:?} as {kind}")]
pub struct CoerceError {
    pub raw: String,
    pub kind: ValueKind,
}

/// Parses raw cell text as the given kind. The empty string is always null.
pub fn coerce_value(raw: &str, kind: ValueKind) -> Result<Value, CoerceError> {
    if raw.is_empty() {
        return Ok(Value::Null);
    }
    let parsed = match kind {
        ValueKind::Text => Some(Value::Text(raw.to_string())),
        ValueKind::Integer => parse_integer(raw).map(Value::Integer),
        ValueKind::Real => parse_real(raw).map(Value::Real),
        ValueKind::Vector => parse_vector(raw).map(Value::Vector),
    };
    parsed.ok_or_else(|| CoerceError {
        raw: raw.to_string(),
        kind,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ValueKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Schema {
    columns: Vec<Column>,
}

impl Schema {
    pub fn new(columns: Vec<Column>) -> Result<Self, TableError> {
        for (i, col) in columns.iter().enumerate() {
            if col.name.is_empty() {
                return Err(TableError::Schema(format!("column {i} has an empty name")));
            }
            if columns[..i].iter().any(|c| c.name == col.name) {
                return Err(TableError::Schema(format!(
                    "duplicate column {:?}",
                    col.name
                )));
            }
        }
        Ok(Self { columns })
    }

    /// Builds a schema from `(name, kind)` pairs.
    pub fn of<S: Into<String>>(
        cols: impl IntoIterator<Item = (S, ValueKind)>,
    ) -> Result<Self, TableError> {
        Self::new(
            cols.into_iter()
                .map(|(name, kind)| Column {
                    name: name.into(),
                    kind,
                })
                .collect(),
        )
    }

    pub fn all_text<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, TableError> {
        Self::of(names.into_iter().map(|n| (n, ValueKind::Text)))
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    /// Returns a new schema with `column` appended.
    pub fn with_column(&self, column: Column) -> Result<Self, TableError> {
        let mut columns = self.columns.clone();
        columns.push(column);
        Self::new(columns)
    }
}

/// Cells of one row, in schema column order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Row(pub Vec<Value>);

impl Row {
    pub fn cells(&self) -> &[Value] {
        &self.0
    }

    /// Looks up a cell by column name.
    pub fn get<'a>(&'a self, schema: &Schema, column: &str) -> Option<&'a Value> {
        schema.index_of(column).and_then(|i| self.0.get(i))
    }

    /// JSON object keyed by column name.
    pub fn to_json(&self, schema: &Schema) -> serde_json::Value {
        let mut obj = Map::new();
        for (col, cell) in schema.columns().iter().zip(&self.0) {
            obj.insert(col.name.clone(), cell.to_json());
        }
        serde_json::Value::Object(obj)
    }
}

/// Immutable table: a schema plus rows that conform to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    schema: Schema,
    rows: Vec<Row>,
}

impl Table {
    pub fn new(schema: Schema, rows: Vec<Row>) -> Result<Self, TableError> {
        for (r, row) in rows.iter().enumerate() {
            if row.0.len() != schema.len() {
                return Err(TableError::Row {
                    row: r,
                    message: format!("{} cells for {} columns", row.0.len(), schema.len()),
                });
            }
            for (col, cell) in schema.columns().iter().zip(&row.0) {
                if let Some(kind) = cell.kind() {
                    if kind != col.kind {
                        return Err(TableError::Row {
                            row: r,
                            message: format!(
                                "column {:?} is {} but cell is {kind}",
                                col.name, col.kind
                            ),
                        });
                    }
                }
                cell.check_invariants().map_err(|message| TableError::Row {
                    row: r,
                    message: format!("column {:?}: {message}", col.name),
                })?;
            }
        }
        Ok(Self { schema, rows })
    }

    pub fn empty(schema: Schema) -> Self {
        Self {
            schema,
            rows: Vec::new(),
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Column values by name.
    pub fn column(&self, name: &str) -> Option<impl Iterator<Item = &Value>> {
        let idx = self.schema.index_of(name)?;
        Some(self.rows.iter().map(move |r| &r.0[idx]))
    }

    /// Reorders rows so that output row `i` is input row `permutation[i]`.
    pub fn permuted(&self, permutation: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            rows: permutation.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// Guesses the format from a file extension (`.jsonl`/`.ndjson`, else csv).
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => Format::Jsonl,
            _ => Format::Csv,
        }
    }
}

pub fn read_table(
    mut source: impl Read,
    format: Format,
    schema: Option<&Schema>,
) -> Result<Table, TableError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let text = String::from_utf8(bytes).map_err(|_| TableError::Utf8)?;
    match format {
        Format::Csv => read_csv(&text, schema),
        Format::Jsonl => read_jsonl(&text, schema),
    }
}

pub fn write_table(table: &Table, mut sink: impl Write, format: Format) -> Result<(), TableError> {
    match format {
        Format::Csv => write_csv(table, &mut sink)?,
        Format::Jsonl => write_jsonl(table, &mut sink)?,
    }
    sink.flush()?;
    Ok(())
}

struct CsvField {
    text: String,
    quoted: bool,
}

struct CsvRecord {
    line: usize,
    fields: Vec<CsvField>,
}

/// RFC 4180 record splitter. Accepts LF or CRLF terminators; a blank line
/// is a record with one empty field; the final terminator is optional.
fn split_csv(text: &str) -> Result<Vec<CsvRecord>, TableError> {
    let mut records = Vec::new();
    let mut chars = text.chars().peekable();
    let mut line = 1;
    while chars.peek().is_some() {
        let start_line = line;
        let mut fields = Vec::new();
        loop {
            let mut field = CsvField {
                text: String::new(),
                quoted: false,
            };
            if chars.peek() == Some(&'"') {
                chars.next();
                field.quoted = true;
                loop {
                    match chars.next() {
                        None => {
                            return Err(TableError::Malformed {
                                line: start_line,
                                message: "unterminated quoted field".into(),
                            })
                        }
                        Some('"') if chars.peek() == Some(&'"') => {
                            chars.next();
                            field.text.push('"');
                        }
                        Some('"') => break,
                        Some(c) => {
                            if c == '\n' {
                                line += 1;
                            }
                            field.text.push(c);
                        }
                    }
                }
                match chars.peek() {
                    None | Some(',') | Some('\n') | Some('\r') => {}
                    Some(c) => {
                        return Err(TableError::Malformed {
                            line,
                            message: format!("unexpected {c:?} after closing quote"),
                        })
                    }
                }
            } else {
                while let Some(&c) = chars.peek() {
                    if matches!(c, ',' | '\n' | '\r') {
                        break;
                    }
                    if c == '"' {
                        return Err(TableError::Malformed {
                            line,
                            message: "quote inside unquoted field".into(),
                        });
                    }
                    field.text.push(c);
                    chars.next();
                }
            }
            fields.push(field);
            match chars.next() {
                Some(',') => continue,
                Some('\r') => {
                    if chars.next_if_eq(&'\n').is_none() {
                        return Err(TableError::Malformed {
                            line,
                            message: "bare carriage return".into(),
                        });
                    }
                    line += 1;
                    break;
                }
                Some('\n') => {
                    line += 1;
                    break;
                }
                None => break,
                Some(_) => unreachable!("field scanner stops only at separators"),
            }
        }
        records.push(CsvRecord {
            line: start_line,
            fields,
        });
    }
    Ok(records)
}

fn read_csv(text: &str, schema: Option<&Schema>) -> Result<Table, TableError> {
    let mut records = split_csv(text)?.into_iter();
    let header = records.next().ok_or(TableError::Malformed {
        line: 1,
        message: "missing header row".into(),
    })?;
    let names: Vec<String> = header.fields.into_iter().map(|f| f.text).collect();
    let schema = resolve_schema(&names, schema, header.line)?;

    let mut rows = Vec::new();
    for (r, record) in records.enumerate() {
        if record.fields.len() != names.len() {
            return Err(TableError::Malformed {
                line: record.line,
                message: format!(
                    "expected {} fields, found {}",
                    names.len(),
                    record.fields.len()
                ),
            });
        }
        let mut cells = vec![Value::Null; schema.len()];
        for (name, field) in names.iter().zip(record.fields) {
            let idx = schema.index_of(name).expect("resolved schema covers header");
            let kind = schema.columns()[idx].kind;
            cells[idx] = if field.quoted && field.text.is_empty() && kind == ValueKind::Text {
                Value::Text(String::new())
            } else {
                coerce_value(&field.text, kind).map_err(|e| TableError::Coerce {
                    row: r,
                    column: name.clone(),
                    raw: e.raw,
                    kind,
                })?
            };
        }
        rows.push(Row(cells));
    }
    Table::new(schema, rows)
}

/// With no schema every header column is text; a provided schema must name
/// exactly the header's columns (in any order).
fn resolve_schema(names: &[String], schema: Option<&Schema>, line: usize) -> Result<Schema, TableError> {
    match schema {
        None => Schema::all_text(names.iter().cloned()).map_err(|e| TableError::Malformed {
            line,
            message: e.to_string(),
        }),
        Some(s) => {
            let mut seen: Vec<&str> = Vec::with_capacity(names.len());
            for name in names {
                if s.index_of(name).is_none() {
                    return Err(TableError::Schema(format!("column {name:?} not in schema")));
                }
                if seen.contains(&name.as_str()) {
                    return Err(TableError::Schema(format!("duplicate column {name:?}")));
                }
                seen.push(name);
            }
            if let Some(missing) = s.names().find(|n| !seen.contains(n)) {
                return Err(TableError::Schema(format!("column {missing:?} missing from input")));
            }
            Ok(s.clone())
        }
    }
}

fn read_jsonl(text: &str, schema: Option<&Schema>) -> Result<Table, TableError> {
    let mut resolved: Option<Schema> = schema.cloned();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| TableError::Malformed {
            line: line_no,
            message,
        };
        let obj: Map<String, serde_json::Value> =
            serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let schema = match &resolved {
            Some(s) => s,
            None => resolved.insert(
                Schema::all_text(obj.keys().cloned()).map_err(|e| malformed(e.to_string()))?,
            ),
        };
        if obj.len() != schema.len() {
            return Err(malformed(format!(
                "expected {} keys, found {}",
                schema.len(),
                obj.len()
            )));
        }
        let r = rows.len();
        let mut cells = vec![Value::Null; schema.len()];
        for (key, json) in obj {
            let idx = schema
                .index_of(&key)
                .ok_or_else(|| malformed(format!("unexpected key {key:?}")))?;
            let kind = schema.columns()[idx].kind;
            cells[idx] = json_cell(&json, kind).ok_or_else(|| TableError::Coerce {
                row: r,
                column: key.clone(),
                raw: json.to_string(),
                kind,
            })?;
        }
        rows.push(Row(cells));
    }
    let schema = resolved.unwrap_or_default();
    Table::new(schema, rows)
}

fn json_cell(json: &serde_json::Value, kind: ValueKind) -> Option<Value> {
    use serde_json::Value as J;
    match (json, kind) {
        (J::Null, _) => Some(Value::Null),
        (J::String(s), ValueKind::Text) => Some(Value::Text(s.clone())),
        (J::String(s), k) => coerce_value(s, k).ok(),
        (J::Number(n), ValueKind::Integer) => n.as_i64().map(Value::Integer),
        (J::Number(n), ValueKind::Real) => n.as_f64().filter(|r| r.is_finite()).map(Value::Real),
        (J::Number(_) | J::Bool(_), ValueKind::Text) => Some(Value::Text(json.to_string())),
        (J::Array(items), ValueKind::Vector) if !items.is_empty() => items
            .iter()
            .map(|x| x.as_f64().filter(|r| r.is_finite()))
            .collect::<Option<Vec<_>>>()
            .map(Value::Vector),
        _ => None,
    }
}

fn csv_escape(field: &str, out: &mut String) {
    if field.contains([',', '"', '\n', '\r']) {
        out.push('"');
        out.push_str(&field.replace('"', "\"\""));
        out.push('"');
    } else {
        out.push_str(field);
    }
}

fn write_csv(table: &Table, sink: &mut impl Write) -> Result<(), TableError> {
    let mut line = String::new();
    for (i, name) in table.schema.names().enumerate() {
        if i > 0 {
            line.push(',');
        }
        csv_escape(name, &mut line);
    }
    line.push('\n');
    sink.write_all(line.as_bytes())?;
    for row in &table.rows {
        line.clear();
        for (i, cell) in row.0.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            match cell {
                Value::Text(s) if s.is_empty() => line.push_str("\"\""),
                other => csv_escape(&other.canonical_text(), &mut line),
            }
        }
        line.push('\n');
        sink.write_all(line.as_bytes())?;
    }
    Ok(())
}

fn write_jsonl(table: &Table, sink: &mut impl Write) -> Result<(), TableError> {
    for row in &table.rows {
        let mut line = serde_json::to_string(&row.to_json(&table.schema))
            .map_err(|e| TableError::Io(e.into()))?;
        line.push('\n');
        sink.write_all(line.as_bytes())?;
    }
    Ok(())
}
