//! Report records and their JSON / table renderings. Field names here are
//! the contract documented in `docs/report-schema.md`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use udsaudit_binary::extract::classify_check_strength;
use udsaudit_binary::{Callee, CheckStrength, PeerCredCheck, UsageKind};

use crate::access::{AccessVerdict, DosRisk, Namespace, Permission, Provenance, SocketEndpoint};

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Table,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Stats {
    pub rules_parsed: usize,
    pub services: usize,
    pub binaries_analyzed: usize,
    pub binaries_skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRecord {
    pub creds: Vec<String>,
    pub usage: &'static str,
    /// Number, `"UNDEFINED"` for an unresolved comparison, null otherwise.
    pub comparand: serde_json::Value,
    /// Symbol, hex address, or null.
    pub callee: Option<String>,
    pub strength: CheckStrength,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerdictRecord {
    pub mac_ipc: bool,
    pub mac_file: Option<bool>,
    pub dac: Option<bool>,
    pub required_permissions: Vec<Permission>,
    pub accessible: bool,
    pub dos_risk: DosRisk,
    pub dac_indeterminate: bool,
    pub auth_summary: CheckStrength,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EndpointRecord {
    pub address: String,
    pub namespace: Namespace,
    pub daemon_binary: String,
    pub daemon_domain: String,
    pub provenance: Provenance,
    pub checks: Vec<CheckRecord>,
    pub verdict: VerdictRecord,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct SkippedRecord {
    pub binary: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub report_version: u32,
    pub image: String,
    pub stats: Stats,
    pub endpoints: Vec<EndpointRecord>,
    pub skipped: Vec<SkippedRecord>,
    /// Wall time per stage in milliseconds; empty in canonical mode.
    pub timing: BTreeMap<String, f64>,
}

pub fn check_records(checks: &[PeerCredCheck]) -> Vec<CheckRecord> {
    let mut out = Vec::new();
    for c in checks {
        let strength = classify_check_strength(c);
        for u in &c.usages {
            let comparand = match (u.kind, u.comparand) {
                (UsageKind::Comparison, Some(v)) => serde_json::Value::from(v),
                (UsageKind::Comparison, None) => serde_json::Value::from("UNDEFINED"),
                _ => serde_json::Value::Null,
            };
            let callee = match &u.callee {
                Some(Callee::Symbol(s)) => Some(s.clone()),
                Some(Callee::Addr(a)) => Some(format!("{a:#x}")),
                _ => None,
            };
            let rec = CheckRecord {
                creds: vec![serde_json::to_value(u.cred)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default()],
                usage: match u.kind {
                    UsageKind::Comparison => "comparison",
                    UsageKind::FunctionArg => "function_arg",
                },
                comparand,
                callee,
                strength,
            };
            if !out.contains(&rec) {
                out.push(rec);
            }
        }
    }
    out
}

pub fn endpoint_record(ep: &SocketEndpoint, v: &AccessVerdict) -> EndpointRecord {
    EndpointRecord {
        address: ep.address.clone(),
        namespace: ep.namespace,
        daemon_binary: ep.owner_binary.clone(),
        daemon_domain: ep.owner_domain.clone(),
        provenance: ep.provenance,
        checks: check_records(&ep.checks),
        verdict: VerdictRecord {
            mac_ipc: v.mac_ipc,
            mac_file: v.mac_file,
            dac: v.dac,
            required_permissions: v.required_permissions.clone(),
            accessible: v.accessible,
            dos_risk: v.dos_risk,
            dac_indeterminate: v.dac_indeterminate,
            auth_summary: v.auth_summary,
        },
    }
}

pub fn emit_report(report: &Report, format: Format) -> String {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        Format::Table => table(report),
    }
}

const HEADERS: [&str; 7] =
    ["Address", "Namespace", "Daemon", "Auth Checks", "Accessible", "Required Perms", "DoS Risk"];

fn table(report: &Report) -> String {
    let rows: Vec<[String; 7]> = report
        .endpoints
        .iter()
        .map(|e| {
            let v = &e.verdict;
            let daemon = e.daemon_binary.rsplit('/').next().unwrap_or(&e.daemon_binary).to_string();
            let perms = if v.required_permissions.is_empty() {
                "-".to_string()
            } else {
                v.required_permissions.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(",")
            };
            let dos = match v.dos_risk {
                DosRisk::None => "-",
                DosRisk::CloseRebind => "close_rebind",
                DosRisk::PropertyRestart => "property_restart",
                DosRisk::Both => "both",
            };
            [
                e.address.clone(),
                e.namespace.as_str().to_string(),
                daemon,
                if v.accessible { v.auth_summary.as_str().to_string() } else { "n/a".to_string() },
                if v.accessible { "yes" } else { "no" }.to_string(),
                perms,
                dos.to_string(),
            ]
        })
        .collect();
    let mut widths = HEADERS.map(str::len);
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: &[&str], out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join(" | ").trim_end());
    };
    line(&HEADERS, &mut out);
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    for r in &rows {
        line(&r.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
    }
    for s in &report.skipped {
        let _ = writeln!(out, "skipped: {} ({})", s.binary, s.reason);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty() -> Report {
        Report {
            report_version: REPORT_VERSION,
            image: "x".into(),
            stats: Stats::default(),
            endpoints: vec![],
            skipped: vec![],
            timing: BTreeMap::new(),
        }
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = emit_report(&empty(), Format::Table);
        assert_eq!(t.lines().count(), 2);
        assert!(t.starts_with("Address | Namespace | Daemon | Auth Checks"));
    }

    #[test]
    fn abstract_row() {
        let mut r = empty();
        r.endpoints.push(EndpointRecord {
            address: "@cand.socket.ctrl".into(),
            namespace: Namespace::Abstract,
            daemon_binary: "/system/bin/cand".into(),
            daemon_domain: "cand".into(),
            provenance: Provenance::BinaryBind,
            checks: vec![],
            verdict: VerdictRecord {
                mac_ipc: true,
                mac_file: None,
                dac: None,
                required_permissions: vec![],
                accessible: true,
                dos_risk: DosRisk::None,
                dac_indeterminate: false,
                auth_summary: CheckStrength::None,
            },
        });
        let t = emit_report(&r, Format::Table);
        let row = t.lines().nth(2).unwrap();
        let cells: Vec<&str> = row.split('|').map(str::trim).collect();
        assert_eq!(cells[..5], ["@cand.socket.ctrl", "ABSTRACT", "cand", "none", "yes"]);

        let j: serde_json::Value = serde_json::from_str(&emit_report(&r, Format::Json)).unwrap();
        assert_eq!(j["endpoints"][0]["verdict"]["mac_file"], serde_json::Value::Null);
        assert_eq!(j["endpoints"][0]["namespace"], "ABSTRACT");
        assert_eq!(j["report_version"], 1);
    }
}
