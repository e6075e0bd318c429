use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gdo::oracle::{date_normalize, to_unix_epoch};

fn gdo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdo"))
        .args(args)
        .env_remove("GDO_ENDPOINT")
        .env_remove("GDO_API_KEY")
        .output()
        .expect("spawn gdo")
}

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("data")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn udp(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("udps")
        .join(format!("{name}.udp"))
        .to_string_lossy()
        .into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_column(path: &Path, column: &str) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == column).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn chained_rule_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let step1 = dir.path().join("dates.csv");
    let step2 = dir.path().join("epochs.csv");
    let step3 = dir.path().join("ratings.jsonl");

    let o = gdo(&["apply", "--input", &data("item_rating.csv"), "--udp", &udp("date_normalize"), "--backend", "rule", "--output", s(&step1)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = gdo(&["apply", "--input", s(&step1), "--udp", "to_unix_epoch", "--backend", "rule", "--output", s(&step2), "--parallelism", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = gdo(&["apply", "--input", s(&step2), "--udp", "normalize_rating", "--backend", "rule", "--output", s(&step3), "--no-cache"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let raw = csv_column(&step2, "date");
    let epochs = csv_column(&step2, "date_epoch");
    for (r, e) in raw.iter().zip(&epochs) {
        let expected = to_unix_epoch(&date_normalize(r).unwrap()).unwrap();
        assert_eq!(e, &expected.to_string());
    }
    let lines: Vec<serde_json::Value> = fs::read_to_string(&step3)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), raw.len());
    assert_eq!(lines[0]["rating_norm"], serde_json::json!(1.0));
    // quarantine file exists and is empty on a clean run
    assert_eq!(fs::read_to_string(format!("{}.quarantine.jsonl", s(&step1))).unwrap(), "");
}

#[test]
fn mock_unrepairable_row_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.csv");
    let q = dir.path().join("q.jsonl");
    let report = dir.path().join("r.json");
    let o = gdo(&[
        "apply", "--input", &data("item_rating.csv"), "--udp", "date_normalize", "--backend", "mock",
        "--fixture", &data("date_normalize.mock.json"), "--output", s(&out), "--quarantine", s(&q),
        "--report", s(&report),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(fs::read_to_string(&q).unwrap().lines().count(), 1);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["quarantined"], 1);
    assert_eq!(r["repairs_attempted"], 3);
    assert_eq!(r["violation_histogram"]["bad_format"], 1);

    let o = gdo(&[
        "apply", "--input", &data("item_rating.csv"), "--udp", "date_normalize", "--backend", "mock",
        "--fixture", &data("date_normalize.mock.json"), "--output", s(&out), "--error-policy", "null",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(csv_column(&out, "date_norm").last().unwrap(), "");
}

#[test]
fn fail_policy_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.csv");
    let o = gdo(&[
        "apply", "--input", &data("item_rating.csv"), "--udp", "date_normalize", "--backend", "mock",
        "--fixture", &data("date_normalize.mock.json"), "--output", s(&out), "--error-policy", "fail",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("row 7"), "{err}");
}

#[test]
fn operational_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.csv");
    let missing_udp = gdo(&["apply", "--input", &data("item_rating.csv"), "--backend", "rule", "--output", s(&out)]);
    assert_eq!(missing_udp.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing_udp.stderr).contains("Usage"));

    // fixture miss aborts even under the quarantine policy
    let empty = dir.path().join("empty.json");
    fs::write(&empty, "{}").unwrap();
    let o = gdo(&["apply", "--input", &data("item_rating.csv"), "--udp", "date_normalize", "--backend", "mock", "--fixture", s(&empty), "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());

    let o = gdo(&["apply", "--input", &data("item_rating.csv"), "--udp", "date_normalize", "--backend", "remote", "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("GDO_ENDPOINT"));

    let o = gdo(&["apply", "--input", "/nonexistent.csv", "--udp", "date_normalize", "--backend", "rule", "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(1));

    // output column already present
    let o = gdo(&["apply", "--input", &data("item_rating.csv"), "--udp", "date_normalize", "--backend", "rule", "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let again = dir.path().join("again.csv");
    let o = gdo(&["apply", "--input", s(&out), "--udp", "date_normalize", "--backend", "rule", "--output", s(&again)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn classify_with_custom_taxonomy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.csv");
    let o = gdo(&["apply", "--input", &data("item_information.csv"), "--udp", "classify_item_type", "--backend", "rule", "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        csv_column(&out, "item_type_checked"),
        ["Electronics", "Grocery", "Clothing", "Electronics", "Home", "Home"]
    );
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(format!("{}.report.json", s(&out))).unwrap()).unwrap();
    assert_eq!(r["unverified_notes"], 1);

    let tax = dir.path().join("tax.json");
    let mut rules: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(data("taxonomy.json")).unwrap()).unwrap();
    let lamp = rules.iter_mut().find(|r| r["keyword"] == "lamp").unwrap();
    lamp["type"] = "Toys".into();
    fs::write(&tax, serde_json::to_string(&rules).unwrap()).unwrap();
    let o = gdo(&["apply", "--input", &data("item_information.csv"), "--udp", "classify_item_type", "--backend", "rule", "--taxonomy", s(&tax), "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(csv_column(&out, "item_type_checked")[4], "Toys");
}

#[test]
fn persistent_cache_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.bin");
    let run = |out: &PathBuf| {
        let o = gdo(&["apply", "--input", &data("item_information.csv"), "--udp", "embed_text", "--backend", "rule", "--cache", s(&cache), "--output", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let r: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(format!("{}.report.json", s(out))).unwrap()).unwrap();
        (r["backend_calls"].as_u64().unwrap(), r["cache_hits"].as_u64().unwrap())
    };
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert_eq!(run(&a), (6, 0));
    assert_eq!(run(&b), (0, 6));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn golden_mutation_fails() {
    let dir = tempfile::tempdir().unwrap();
    let src = fs::read_to_string(udp("to_unix_epoch")).unwrap();
    let mutated = src.replacen("expected = \"0\"", "expected = \"1\"", 1);
    assert_ne!(src, mutated);
    let path = dir.path().join("m.udp");
    fs::write(&path, mutated).unwrap();
    let o = gdo(&["test", "--udp", s(&path), "--backend", "rule"]);
    assert_eq!(o.status.code(), Some(1));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("- expected: 1") && out.contains("+ actual:   0"), "{out}");
}

#[test]
fn report_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let o = gdo(&["report", "--report", s(&path)]);
    assert_eq!(o.status.code(), Some(1));
    fs::write(&path, "{\"rows_in\": 3,").unwrap();
    let o = gdo(&["report", "--report", s(&path)]);
    assert_eq!(o.status.code(), Some(1));
}
