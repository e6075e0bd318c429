//! `gdo` command line: `apply`, `test` and `report`.
//!
//! Exit codes: 0 clean, 2 when rows were quarantined or nulled, 1 for any
//! operational failure (bad flags, unreadable files, aborted runs).

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backend::{
    Backend, CachedBackend, FileStore, MemoryStore, MockBackend, RemoteBackend, RetryPolicy,
    RuleBackend, BUILTIN_TAXONOMY_ID,
};
use crate::executor::{
    apply_udp, run_golden_tests, write_quarantine, ErrorPolicy, ExecutionConfig, ExecutionReport,
};
use crate::manifest::{builtin, UdpManifest};
use crate::oracle::Taxonomy;
use crate::table::{read_table, write_table, Format};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_DATA_QUALITY: i32 = 2;

const REMOTE_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Parser)]
#[command(name = "gdo", version, about = "Row-wise prompt operators over tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Apply one UDP to every row of a table.
    Apply(ApplyArgs),
    /// Run the golden examples of one or more UDPs.
    Test(TestArgs),
    /// Summarize a run report.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Mock,
    Rule,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Fail,
    Null,
    Quarantine,
}

impl From<PolicyArg> for ErrorPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Fail => ErrorPolicy::Fail,
            PolicyArg::Null => ErrorPolicy::Null,
            PolicyArg::Quarantine => ErrorPolicy::Quarantine,
        }
    }
}

#[derive(Debug, Args)]
struct BackendArgs {
    #[arg(long, value_enum)]
    backend: BackendKind,
    /// Fixture file for the mock backend.
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// Taxonomy JSON for the rule backend's classifier.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ApplyArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Manifest file, or the name of a built-in UDP.
    #[arg(long)]
    udp: String,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    parallelism: u32,
    #[arg(long, value_enum, default_value_t = PolicyArg::Quarantine)]
    error_policy: PolicyArg,
    /// Persistent response cache file (default: in-memory for this run).
    #[arg(long, conflicts_with = "no_cache")]
    cache: Option<PathBuf>,
    #[arg(long)]
    no_cache: bool,
    /// Default: `<output>.quarantine.jsonl`.
    #[arg(long)]
    quarantine: Option<PathBuf>,
    /// Default: `<output>.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TestArgs {
    /// Manifest files or built-in names; repeatable.
    #[arg(long, required = true)]
    udp: Vec<String>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_FAILURE } else { EXIT_OK };
            let rendered = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{rendered}");
            } else {
                let _ = write!(out, "{rendered}");
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::Apply(a) => cmd_apply(&a, out),
        Command::Test(a) => cmd_test(&a, out),
        Command::Report(a) => cmd_report(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "gdo: {}", format!("{e:#}").replace('\n', " "));
            EXIT_FAILURE
        }
    }
}

fn load_manifest(spec: &str) -> Result<UdpManifest> {
    let path = Path::new(spec);
    if path.exists() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return UdpManifest::parse(&text).with_context(|| format!("manifest {}", path.display()));
    }
    builtin(spec).ok_or_else(|| anyhow!("no manifest file or built-in UDP named {spec:?}"))
}

fn build_backend(args: &BackendArgs, manifest: &UdpManifest) -> Result<Box<dyn Backend>> {
    match args.backend {
        BackendKind::Mock => {
            let path = args
                .fixture
                .as_ref()
                .ok_or_else(|| anyhow!("--backend mock needs --fixture <file>"))?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(Box::new(MockBackend::from_fixture(&text)?))
        }
        BackendKind::Rule => {
            let mut rule = RuleBackend::new();
            if let Some(path) = &args.taxonomy {
                let text =
                    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let taxonomy = Taxonomy::from_json(&text).with_context(|| format!("taxonomy {}", path.display()))?;
                let id = manifest
                    .params
                    .get("taxonomy")
                    .map(String::as_str)
                    .unwrap_or(BUILTIN_TAXONOMY_ID);
                rule = rule.with_taxonomy(id, taxonomy);
            }
            Ok(Box::new(rule))
        }
        BackendKind::Remote => Ok(Box::new(
            RemoteBackend::from_env(REMOTE_TIMEOUT_MS, RetryPolicy::default()).map_err(|e| anyhow!(e))?,
        )),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes via a temp file in the destination directory, then renames.
fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temp file in {}", dir.display()))?;
    {
        let mut buf = io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf)?;
        buf.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_apply(args: &ApplyArgs, out: &mut dyn Write) -> Result<i32> {
    let manifest = load_manifest(&args.udp)?;
    let input = fs::File::open(&args.input).with_context(|| format!("opening {}", args.input.display()))?;
    let table = read_table(io::BufReader::new(input), Format::from_path(&args.input), None)
        .with_context(|| format!("reading {}", args.input.display()))?;

    let inner = build_backend(&args.backend, &manifest)?;
    let backend: Box<dyn Backend> = match (&args.cache, args.no_cache) {
        (_, true) => inner,
        (Some(path), false) => Box::new(CachedBackend::new(
            inner,
            FileStore::open(path).with_context(|| format!("opening cache {}", path.display()))?,
        )),
        (None, false) => Box::new(CachedBackend::new(inner, MemoryStore::new())),
    };
    let policy = ErrorPolicy::from(args.error_policy);
    let config = ExecutionConfig {
        parallelism: args.parallelism as usize,
        error_policy: policy,
        cache_enabled: !args.no_cache,
    };
    let result = apply_udp(&table, &manifest, &backend, &config)?;

    let format = Format::from_path(&args.output);
    write_atomic(&args.output, |w| Ok(write_table(&result.table, w, format)?))?;
    if policy == ErrorPolicy::Quarantine {
        let path = args
            .quarantine
            .clone()
            .unwrap_or_else(|| sibling(&args.output, ".quarantine.jsonl"));
        write_atomic(&path, |w| Ok(write_quarantine(&result.quarantine, table.schema(), w)?))?;
    }
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| sibling(&args.output, ".report.json"));
    let report = &result.report;
    write_atomic(&report_path, |w| Ok(w.write_all(report.to_json_string().as_bytes())?))?;

    writeln!(
        out,
        "{}: {} rows in, {} rows out, {} quarantined, {} nulled",
        manifest.name,
        report.rows_in,
        report.rows_out,
        report.quarantined,
        report.violations_final - report.quarantined
    )?;
    Ok(if report.violations_final == 0 {
        EXIT_OK
    } else {
        EXIT_DATA_QUALITY
    })
}

fn cmd_test(args: &TestArgs, out: &mut dyn Write) -> Result<i32> {
    let mut all_passed = true;
    for spec in &args.udp {
        let manifest = load_manifest(spec)?;
        let backend = build_backend(&args.backend, &manifest)?;
        let report = run_golden_tests(&manifest, &backend)?;
        let passed = report.cases.iter().filter(|c| c.pass).count();
        writeln!(out, "{} ({} examples)", report.manifest, report.cases.len())?;
        for case in &report.cases {
            if case.pass {
                writeln!(out, "  PASS  #{}  {}", case.index, case.actual)?;
            } else {
                let reason = case.violation.map(|r| format!(" [{r}]")).unwrap_or_default();
                writeln!(out, "  FAIL  #{}{}", case.index, reason)?;
                writeln!(out, "    - expected: {}", case.expected)?;
                writeln!(out, "    + actual:   {}", case.actual)?;
            }
        }
        writeln!(out, "  {passed}/{} passed", report.cases.len())?;
        all_passed &= report.all_passed();
    }
    Ok(if all_passed { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_report(args: &ReportArgs, out: &mut dyn Write) -> Result<i32> {
    let text = fs::read_to_string(&args.report)
        .with_context(|| format!("reading {}", args.report.display()))?;
    if text.trim().is_empty() {
        bail!("{} is empty", args.report.display());
    }
    let r = ExecutionReport::from_json_str(&text)
        .with_context(|| format!("parsing {}", args.report.display()))?;
    writeln!(out, "rows in:            {}", r.rows_in)?;
    writeln!(out, "rows out:           {}", r.rows_out)?;
    writeln!(out, "backend calls:      {}", r.backend_calls)?;
    writeln!(out, "cache hits:         {}", r.cache_hits)?;
    writeln!(out, "repairs attempted:  {}", r.repairs_attempted)?;
    writeln!(out, "final violations:   {}", r.violations_final)?;
    writeln!(out, "quarantined:        {}", r.quarantined)?;
    writeln!(out, "unverified notes:   {}", r.unverified_notes)?;
    writeln!(out, "wall ms:            {}", r.wall_ms)?;
    writeln!(out, "cache hit ratio: {:.3}", r.cache_hit_ratio())?;
    writeln!(out, "violation histogram:")?;
    if r.violation_histogram.is_empty() {
        writeln!(out, "  (none)")?;
    }
    for (code, n) in &r.violation_histogram {
        writeln!(out, "  {:<16}{n}", code.as_str())?;
    }
    Ok(EXIT_OK)
}
