mod common;

use std::fs;
use std::process::{Command, Output};

use common::fixture;

fn clickgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clickgate")).args(args).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn usage_errors_exit_64() {
    let out = clickgate(&["replay", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(64));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
    let out = clickgate(&["compare", "x.json", "--policies", "accept-all,sometimes"]);
    assert_eq!(out.status.code(), Some(64));
    assert!(stderr(&out).contains("sometimes"));
    assert_eq!(clickgate(&["--help"]).status.code(), Some(0));
}

#[test]
fn unreadable_traces_exit_2_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = clickgate(&["replay", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing.json"), "{}", stderr(&out));

    let broken = dir.path().join("broken.json");
    fs::write(&broken, r#"{"pages": [{"seq": 1}]}"#).unwrap();
    let out = clickgate(&["compare", broken.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("broken.json"));
}

#[test]
fn replay_writes_json_to_stdout() {
    let trace = fixture("osn-widget.json");
    let out = clickgate(&["replay", trace.to_str().unwrap(), "--policy", "visited"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["policy"], "visited");
    assert_eq!(report["non_consented_pairs"][0], serde_json::json!({ "third_party": "osn.com", "site": "pub.com" }));
    assert!(report["decision_latency"].is_null());
}

#[test]
fn compare_writes_files_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let trace = fixture("osn-widget.json");
    let json_out = dir.path().join("report.json");
    let out =
        clickgate(&["compare", trace.to_str().unwrap(), "--policies", "all", "--out", json_out.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
    let cmp: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json_out).unwrap()).unwrap();
    assert_eq!(cmp["reports"].as_array().unwrap().len(), 4);

    let csv_out = dir.path().join("report.csv");
    let out = clickgate(&[
        "compare",
        trace.to_str().unwrap(),
        "--policies",
        "interaction,block-third",
        "--format",
        "csv",
        "--out",
        csv_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&csv_out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("policy,requests,"));
    assert!(lines[1].starts_with("interaction,"));
    assert!(lines[2].starts_with("block-third,"));
}

#[test]
fn timed_compare_reports_latency() {
    let trace = fixture("invisible-tracker.json");
    let out = clickgate(&["compare", trace.to_str().unwrap(), "--policies", "interaction", "--timing"]);
    assert!(out.status.success());
    let cmp: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(cmp["reports"][0]["decision_latency"]["samples"].as_u64().unwrap() > 0);
}

#[test]
fn whitelist_file_editing() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("wl.json");
    let f = file.to_str().unwrap();
    let list = |f: &str| String::from_utf8(clickgate(&["whitelist", "list", "--file", f]).stdout).unwrap();
    assert_eq!(list(f), "");

    for (site, tp) in [("www.pub.com", "cdn.osn.com"), ("news.co.uk", "osn.com"), ("pub.com", "osn.com")] {
        let out = clickgate(&["whitelist", "add", "--site", site, "--third-party", tp, "--file", f]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(list(f), "osn.com@news.co.uk\nosn.com@pub.com\n");
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(&file).unwrap()).unwrap();
    assert_eq!(saved[0], serde_json::json!({ "thirdParty": "osn.com", "site": "news.co.uk" }));

    let out = clickgate(&["whitelist", "add", "--site", "pub.com", "--third-party", "static.pub.com", "--file", f]);
    assert_eq!(out.status.code(), Some(1));

    let out = clickgate(&["whitelist", "remove", "--site", "news.co.uk", "--third-party", "osn.com", "--file", f]);
    assert!(out.status.success());
    assert_eq!(list(f), "osn.com@pub.com\n");
}
