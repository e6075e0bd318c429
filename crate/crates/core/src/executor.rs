//! Applies one UDP to every row of a table through a backend.
//!
//! Each row runs `render -> complete -> check`, then up to `max_repairs`
//! rounds of `repair_prompt -> complete -> check`. A row that never passes
//! is handled by the configured [`ErrorPolicy`]. Rows are independent: the
//! output for row `i` is a function of row `i`'s input cells alone, and
//! results are merged by input index so parallelism never changes output.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, BackendRequest, BackendResponse};
use crate::backend::UNVERIFIED_NOTE;
use crate::manifest::UdpManifest;
use crate::table::{Column, Row, Schema, Table, TableError, Value, ValueKind};
use crate::validator::{check, describe, repair_prompt, CheckOutcome, ReasonCode, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorPolicy {
    /// Abort the run at the first row that never satisfies the contract.
    Fail,
    /// Emit a null cell and count the violation.
    Null,
    /// Drop the row from the output and keep a quarantine record.
    #[default]
    Quarantine,
}

impl FromStr for ErrorPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fail" => Ok(ErrorPolicy::Fail),
            "null" => Ok(ErrorPolicy::Null),
            "quarantine" => Ok(ErrorPolicy::Quarantine),
            other => Err(format!("unknown error policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecutionConfig {
    pub parallelism: usize,
    pub error_policy: ErrorPolicy,
    /// When false, first attempts bypass any cache layer in the backend.
    pub cache_enabled: bool,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self {
            parallelism: 1,
            error_policy: ErrorPolicy::Quarantine,
            cache_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionReport {
    pub rows_in: u64,
    pub rows_out: u64,
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub repairs_attempted: u64,
    pub violations_final: u64,
    pub quarantined: u64,
    pub unverified_notes: u64,
    pub wall_ms: u64,
    /// Final violations by reason code.
    pub violation_histogram: BTreeMap<ReasonCode, u64>,
}

impl ExecutionReport {
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// `hits / (hits + calls)`, or 0 when nothing was requested.
    pub fn cache_hit_ratio(&self) -> f64 {
        let total = self.cache_hits + self.backend_calls;
        if total == 0 {
            0.0
        } else {
            self.cache_hits as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttemptRecord {
    pub prompt: String,
    pub response_text: String,
    pub violation: ViolationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViolationRecord {
    pub code: ReasonCode,
    pub message: String,
    pub contract: String,
}

impl From<&Violation> for ViolationRecord {
    fn from(v: &Violation) -> Self {
        Self {
            code: v.code,
            message: v.message.clone(),
            contract: describe(&v.contract),
        }
    }
}

/// A row whose outputs never satisfied the contract, with every attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct QuarantineRecord {
    pub row_index: usize,
    pub input_row: Row,
    pub attempts: Vec<AttemptRecord>,
    pub final_reason: ReasonCode,
}

impl QuarantineRecord {
    pub fn to_json(&self, schema: &Schema) -> serde_json::Value {
        serde_json::json!({
            "row_index": self.row_index,
            "input_row": self.input_row.to_json(schema),
            "attempts": self.attempts,
            "final_reason": self.final_reason,
        })
    }
}

/// One QuarantineRecord per line.
pub fn write_quarantine(
    records: &[QuarantineRecord],
    schema: &Schema,
    mut sink: impl Write,
) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut sink, &r.to_json(schema))?;
        sink.write_all(b"\n")?;
    }
    sink.flush()
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("input column {0:?} not in table")]
    MissingInput(String),
    #[error("input column {0:?} holds vectors, which cannot be rendered")]
    VectorInput(String),
    #[error("output column {0:?} already exists in table")]
    OutputExists(String),
    #[error("manifest {0:?} has no golden examples")]
    NoExamples(String),
    #[error("row {row}: {source}")]
    Backend {
        row: usize,
        #[source]
        source: BackendError,
    },
    #[error("row {} failed: {} after {} attempt(s)", .0.row_index, .0.final_reason, .0.attempts.len())]
    RowFailed(Box<QuarantineRecord>),
    #[error(transparent)]
    Table(#[from] TableError),
}

#[derive(Debug)]
pub struct ExecutionOutput {
    pub table: Table,
    pub quarantine: Vec<QuarantineRecord>,
    pub report: ExecutionReport,
}

#[derive(Debug, Clone, PartialEq)]
enum RowFinal {
    Pass { value: Value, unverified: bool },
    Violated { attempts: Vec<AttemptRecord>, reason: ReasonCode },
}

#[derive(Debug, Clone)]
struct RowResult {
    outcome: RowFinal,
    calls: u64,
    hits: u64,
    repairs: u64,
}

struct RowRunner<'a, B: ?Sized> {
    manifest: &'a UdpManifest,
    schema: &'a Schema,
    backend: &'a B,
    cache_enabled: bool,
    max_repairs: u32,
}

impl<B: Backend + ?Sized> RowRunner<'_, B> {
    fn run(&self, row_index: usize, row: &Row) -> Result<RowResult, ExecError> {
        let backend_err = |source| ExecError::Backend {
            row: row_index,
            source,
        };
        let m = self.manifest;
        let prompt = m
            .render_prompt(self.schema, row)
            .expect("inputs validated before dispatch");
        let structured_inputs = m
            .structured_inputs(self.schema, row)
            .expect("inputs validated before dispatch");
        let mut request = BackendRequest {
            model_id: m.model.clone(),
            prompt: prompt.clone(),
            structured_inputs,
            oracle: m.oracle,
            params: m.params.clone(),
            decode: m.decoding,
        };
        let mut result = RowResult {
            outcome: RowFinal::Violated {
                attempts: Vec::new(),
                reason: ReasonCode::BackendError,
            },
            calls: 0,
            hits: 0,
            repairs: 0,
        };

        let first = if self.cache_enabled {
            self.backend.complete(&request)
        } else {
            self.backend.complete_uncached(&request)
        }
        .map_err(backend_err)?;
        if first.cached {
            result.hits += 1;
        } else {
            result.calls += 1;
        }

        let mut attempts = Vec::new();
        let mut response: BackendResponse = first;
        let mut current_prompt = prompt.clone();
        let mut repair = 0;
        loop {
            match check(&m.output.contract, &response.text) {
                CheckOutcome::Pass(value) => {
                    result.outcome = RowFinal::Pass {
                        value,
                        unverified: response.notes.iter().any(|n| n == UNVERIFIED_NOTE),
                    };
                    return Ok(result);
                }
                CheckOutcome::Violation(v) => {
                    attempts.push(AttemptRecord {
                        prompt: std::mem::take(&mut current_prompt),
                        response_text: response.text.clone(),
                        violation: ViolationRecord::from(&v),
                    });
                    if repair >= self.max_repairs {
                        result.outcome = RowFinal::Violated {
                            attempts,
                            reason: v.code,
                        };
                        return Ok(result);
                    }
                    repair += 1;
                    request.prompt = repair_prompt(&prompt, &v, repair);
                    current_prompt = request.prompt.clone();
                    // repairs always go to the backend; a cached bad answer would repeat
                    response = self.backend.complete_uncached(&request).map_err(backend_err)?;
                    result.calls += 1;
                    result.repairs += 1;
                }
            }
        }
    }
}

fn check_preconditions(table: &Table, manifest: &UdpManifest) -> Result<Schema, ExecError> {
    let schema = table.schema();
    for input in &manifest.inputs {
        let idx = schema
            .index_of(input)
            .ok_or_else(|| ExecError::MissingInput(input.clone()))?;
        if schema.columns()[idx].kind == ValueKind::Vector {
            return Err(ExecError::VectorInput(input.clone()));
        }
    }
    if schema.index_of(&manifest.output.column).is_some() {
        return Err(ExecError::OutputExists(manifest.output.column.clone()));
    }
    Ok(schema.with_column(Column {
        name: manifest.output.column.clone(),
        kind: manifest.output.contract.value_kind(),
    })?)
}

/// Runs every row, returning per-row results in input order.
fn run_rows<B: Backend + ?Sized>(
    table: &Table,
    manifest: &UdpManifest,
    backend: &B,
    config: &ExecutionConfig,
) -> Result<Vec<RowResult>, ExecError> {
    let runner = RowRunner {
        manifest,
        schema: table.schema(),
        backend,
        cache_enabled: config.cache_enabled,
        max_repairs: manifest.max_repairs,
    };
    let rows = table.rows();
    let fail_fast = config.error_policy == ErrorPolicy::Fail;
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = config.parallelism.max(1).min(rows.len().max(1));

    let work = || {
        let mut local = Vec::new();
        while !stop.load(Ordering::SeqCst) {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(row) = rows.get(i) else { break };
            let result = runner.run(i, row);
            let abort = match &result {
                Err(_) => true,
                Ok(r) => fail_fast && matches!(r.outcome, RowFinal::Violated { .. }),
            };
            local.push((i, result));
            if abort {
                stop.store(true, Ordering::SeqCst);
            }
        }
        local
    };

    let mut results: Vec<(usize, Result<RowResult, ExecError>)> = if workers == 1 {
        work()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers).map(|_| s.spawn(work)).collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("row worker panicked"))
                .collect()
        })
    };
    // Indices are claimed in increasing order, so every index below the
    // first abort was processed: the lowest failing index is deterministic.
    results.sort_by_key(|(i, _)| *i);
    let mut out = Vec::with_capacity(results.len());
    for (i, r) in results {
        let r = r?;
        if fail_fast {
            if let RowFinal::Violated { attempts, reason } = &r.outcome {
                return Err(ExecError::RowFailed(Box::new(QuarantineRecord {
                    row_index: i,
                    input_row: rows[i].clone(),
                    attempts: attempts.clone(),
                    final_reason: *reason,
                })));
            }
        }
        out.push(r);
    }
    Ok(out)
}

/// Applies `manifest` to every row of `table` (see module docs).
pub fn apply_udp<B: Backend + ?Sized>(
    table: &Table,
    manifest: &UdpManifest,
    backend: &B,
    config: &ExecutionConfig,
) -> Result<ExecutionOutput, ExecError> {
    let started = Instant::now();
    let out_schema = check_preconditions(table, manifest)?;
    let results = run_rows(table, manifest, backend, config)?;

    let mut report = ExecutionReport {
        rows_in: table.len() as u64,
        ..ExecutionReport::default()
    };
    let mut rows = Vec::with_capacity(table.len());
    let mut quarantine = Vec::new();
    for (i, (input, r)) in table.rows().iter().zip(results).enumerate() {
        report.backend_calls += r.calls;
        report.cache_hits += r.hits;
        report.repairs_attempted += r.repairs;
        let cell = match r.outcome {
            RowFinal::Pass { value, unverified } => {
                report.unverified_notes += u64::from(unverified);
                value
            }
            RowFinal::Violated { attempts, reason } => {
                report.violations_final += 1;
                *report.violation_histogram.entry(reason).or_default() += 1;
                if config.error_policy == ErrorPolicy::Quarantine {
                    report.quarantined += 1;
                    quarantine.push(QuarantineRecord {
                        row_index: i,
                        input_row: input.clone(),
                        attempts,
                        final_reason: reason,
                    });
                    continue;
                }
                Value::Null
            }
        };
        let mut cells = input.cells().to_vec();
        cells.push(cell);
        rows.push(Row(cells));
    }
    report.rows_out = rows.len() as u64;
    report.wall_ms = started.elapsed().as_millis() as u64;
    Ok(ExecutionOutput {
        table: Table::new(out_schema, rows)?,
        quarantine,
        report,
    })
}

/// Whether applying the UDP commutes with reordering rows:
/// `apply(permute(T))[i]` matches `apply(T)[permutation[i]]` for every `i`.
pub fn permute_check<B: Backend + ?Sized>(
    table: &Table,
    manifest: &UdpManifest,
    backend: &B,
    config: &ExecutionConfig,
    permutation: &[usize],
) -> bool {
    let n = table.len();
    let mut seen = vec![false; n];
    if permutation.len() != n {
        return false;
    }
    for &p in permutation {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return false;
        }
    }
    if check_preconditions(table, manifest).is_err() {
        return false;
    }
    let (Ok(original), Ok(permuted)) = (
        run_rows(table, manifest, backend, config),
        run_rows(&table.permuted(permutation), manifest, backend, config),
    ) else {
        return false;
    };
    permuted
        .iter()
        .zip(permutation)
        .all(|(r, &src)| r.outcome == original[src].outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenCase {
    pub index: usize,
    pub expected: String,
    pub actual: String,
    /// Reason the actual text fails the output contract, if it does.
    pub violation: Option<ReasonCode>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenReport {
    pub manifest: String,
    pub cases: Vec<GoldenCase>,
}

impl GoldenReport {
    pub fn all_passed(&self) -> bool {
        self.cases.iter().all(|c| c.pass)
    }
}

fn strip_ascii_ws(s: &str) -> &str {
    s.trim_matches(|c: char| c.is_ascii_whitespace())
}

/// Runs each golden example once (no repairs, no cache) and compares the
/// answer with the expected text. Failures are reported, not raised.
pub fn run_golden_tests<B: Backend + ?Sized>(
    manifest: &UdpManifest,
    backend: &B,
) -> Result<GoldenReport, ExecError> {
    if manifest.examples.is_empty() {
        return Err(ExecError::NoExamples(manifest.name.clone()));
    }
    let mut cases = Vec::with_capacity(manifest.examples.len());
    for (index, example) in manifest.examples.iter().enumerate() {
        let schema = Schema::all_text(example.row.keys().cloned())?;
        let row = Row(example
            .row
            .values()
            .map(|v| Value::Text(v.clone()))
            .collect());
        let runner = RowRunner {
            manifest,
            schema: &schema,
            backend,
            cache_enabled: false,
            max_repairs: 0,
        };
        let expected = example.expected.clone();
        let (actual, violation) = match runner.run(index, &row) {
            Ok(r) => match r.outcome {
                RowFinal::Pass { value, .. } => (value.canonical_text(), None),
                RowFinal::Violated { attempts, reason } => {
                    let text = attempts.last().map(|a| a.response_text.clone()).unwrap_or_default();
                    (strip_ascii_ws(&text).to_string(), Some(reason))
                }
            },
            Err(e) => (format!("<{e}>"), Some(ReasonCode::BackendError)),
        };
        let pass = violation.is_none() && actual == strip_ascii_ws(&expected);
        cases.push(GoldenCase {
            index,
            expected,
            actual,
            violation,
            pass,
        });
    }
    Ok(GoldenReport {
        manifest: manifest.name.clone(),
        cases,
    })
}
