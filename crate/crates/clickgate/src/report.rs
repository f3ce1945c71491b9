//! JSON and CSV rendering of exposure reports and policy comparisons.

use std::fmt;
use std::str::FromStr;

use clickgate_core::policy::{CookieAction, SetCookieAction};
use clickgate_core::replay::{Comparison, ExposureReport};
use clickgate_core::{PartyClass, SitePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Json => "json",
            Self::Csv => "csv",
        })
    }
}

fn json_string<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

fn pairs(set: &std::collections::BTreeSet<SitePair>) -> String {
    set.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

fn cookie_action(a: CookieAction) -> &'static str {
    match a {
        CookieAction::Attach => "attach",
        CookieAction::Strip => "strip",
        CookieAction::PassUnchanged => "pass_unchanged",
    }
}

fn set_cookie_action(a: SetCookieAction) -> &'static str {
    match a {
        SetCookieAction::Accept => "accept",
        SetCookieAction::Quarantine => "quarantine",
        SetCookieAction::Drop => "drop",
    }
}

const SUMMARY_HEADER: [&str; 11] = [
    "policy",
    "requests",
    "third_party_requests",
    "cookie_bearing_requests",
    "cookie_bearing_pair_count",
    "non_consented_pair_count",
    "cookie_bearing_pairs",
    "non_consented_pairs",
    "single_iframe_ad_risk_count",
    "latency_median_ns",
    "latency_p99_ns",
];

fn summary_row(r: &ExposureReport) -> Vec<String> {
    let third = r.per_request_log.iter().filter(|e| e.party == PartyClass::ThirdParty).count();
    let (median, p99) = r.decision_latency.map(|l| (l.median_ns.to_string(), l.p99_ns.to_string())).unwrap_or_default();
    vec![
        r.policy.to_string(),
        r.per_request_log.len().to_string(),
        third.to_string(),
        r.cookie_bearing_requests().to_string(),
        r.cookie_bearing_pairs.len().to_string(),
        r.non_consented_pairs.len().to_string(),
        pairs(&r.cookie_bearing_pairs),
        pairs(&r.non_consented_pairs),
        r.single_iframe_ad_risk_count.to_string(),
        median,
        p99,
    ]
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv output is utf-8")
}

/// One row per policy.
pub fn render_comparison(cmp: &Comparison, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => json_string(cmp),
        ReportFormat::Csv => csv_string(&SUMMARY_HEADER, cmp.reports.iter().map(summary_row)),
    }
}

const LOG_HEADER: [&str; 11] = [
    "policy",
    "seq",
    "url",
    "site",
    "frame_id",
    "destination",
    "party",
    "interaction_initiated",
    "cookie_action",
    "set_cookie_action",
    "cookie_header",
];

/// JSON: the full report. CSV: the per-request log.
pub fn render_report(report: &ExposureReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => json_string(report),
        ReportFormat::Csv => csv_string(
            &LOG_HEADER,
            report.per_request_log.iter().map(|e| {
                vec![
                    report.policy.to_string(),
                    e.seq.to_string(),
                    e.url.to_string(),
                    e.site.to_string(),
                    e.frame_id.to_string(),
                    serde_json::to_value(e.destination)
                        .ok()
                        .and_then(|v| v.as_str().map(str::to_string))
                        .unwrap_or_default(),
                    match e.party {
                        PartyClass::FirstParty => "first".into(),
                        PartyClass::ThirdParty => "third".into(),
                    },
                    e.interaction_initiated.to_string(),
                    cookie_action(e.decision.cookie_action).into(),
                    set_cookie_action(e.decision.set_cookie_action).into(),
                    e.cookie_header.clone().unwrap_or_default(),
                ]
            }),
        ),
    }
}
