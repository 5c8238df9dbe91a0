//! End-to-end run over one extracted image directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use thiserror::Error;
use udsaudit_binary::{
    analyze_binary, BinaryAnalysis, BindApiConfig, Confidence, CredModKind, NamespaceHint, Position,
};

use crate::access::{
    classify_namespace, display_address, evaluate, Namespace, Permission, Provenance, SocketEndpoint, UNTRUSTED_APP,
};
use crate::boot::{extract_reserved_sockets, resolve_id, restart_risk, simulate_boot, socket_path, RestartRisk};
use crate::dataflow::{build_dataflow_graph, filter_socket_ipc, query_writable, IpcOwner, PermissionTable};
use crate::firmware::{load_image, FileKind, FirmwareError, FirmwareImage, FsEntry};
use crate::initrc::{parse_initrc, InitRc, ServiceDefinition};
use crate::report::{endpoint_record, Report, SkippedRecord, Stats, REPORT_VERSION};
use crate::sepolicy::{correlate_subject_binaries, parse_policy, ParseMode, PolicyError};

/// Manifest file expected at the top of every image directory.
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const DEFAULT_UMASK: u16 = 0o077;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Firmware(#[from] FirmwareError),
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Clone, Debug)]
pub struct Options {
    pub strict: bool,
    pub grants: BTreeSet<Permission>,
    pub hops: u32,
    /// Worker threads for binary analysis; 0 picks the rayon default.
    pub jobs: usize,
    pub bind_apis: BindApiConfig,
    pub canonical: bool,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            strict: false,
            grants: Permission::ALL.into_iter().collect(),
            hops: 1,
            jobs: 0,
            bind_apis: BindApiConfig::default(),
            canonical: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub report: Report,
    pub warnings: Vec<String>,
}

impl Outcome {
    /// 0 on a clean run, 2 when some binaries were skipped.
    pub fn exit_code(&self) -> i32 {
        if self.report.skipped.is_empty() {
            0
        } else {
            2
        }
    }
}

struct Timer {
    last: Instant,
    laps: BTreeMap<String, f64>,
}

impl Timer {
    fn new() -> Self {
        Timer { last: Instant::now(), laps: BTreeMap::new() }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        let ms = (now - self.last).as_secs_f64() * 1000.0;
        self.laps.insert(stage.to_string(), (ms * 1000.0).round() / 1000.0);
        self.last = now;
    }
}

pub fn run_pipeline(image_dir: &Path, opts: &Options) -> Result<Outcome, PipelineError> {
    let mut t = Timer::new();
    let mut warnings = Vec::new();

    let image = load_image(image_dir, &image_dir.join(MANIFEST_FILE))?;
    warnings.extend(image.warnings.iter().map(|w| w.to_string()));
    let rc = InitRc::merge(image.initrc_sources.iter().map(|(path, text)| parse_initrc(text, path)));
    warnings.extend(rc.warnings.iter().cloned());
    t.lap("load");

    let mode = if opts.strict { ParseMode::Strict } else { ParseMode::Lenient };
    let db = parse_policy(&image.policy_source, mode)?;
    warnings.extend(db.warnings.iter().cloned());
    t.lap("policy");

    let graph = build_dataflow_graph(&db, &PermissionTable::default());
    let writable = query_writable(&graph, UNTRUSTED_APP, opts.hops);
    let mut owners = BTreeSet::new();
    for (obj, owner) in filter_socket_ipc(&graph, &writable) {
        match owner {
            IpcOwner::Known(d) => {
                owners.insert(d);
            }
            IpcOwner::Unknown => warnings.push(format!("socket object {} has no owning domain", obj.type_name)),
        }
    }
    t.lap("dataflow");

    let correlation = correlate_subject_binaries(&db, &image, &rc.services);
    let mut targets: Vec<(String, String)> = Vec::new();
    for d in &owners {
        match correlation.binaries.get(d) {
            Some(bins) => targets.extend(bins.iter().map(|b| (d.clone(), b.clone()))),
            None => warnings.push(format!("domain {d} is reachable but has no backing binary")),
        }
    }
    t.lap("correlate");

    let unique: BTreeSet<&str> = targets.iter().map(|(_, b)| b.as_str()).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    let analyses: BTreeMap<String, Result<BinaryAnalysis, String>> = pool.install(|| {
        unique
            .par_iter()
            .map(|path| {
                let res = match image.binaries.get(*path) {
                    None => Err("MISSING_BINARY".to_string()),
                    Some(bytes) => analyze_binary(bytes, &opts.bind_apis).map_err(|s| {
                        info!("{path}: {}", s.detail);
                        serde_json::to_value(s.reason)
                            .ok()
                            .and_then(|v| v.as_str().map(str::to_string))
                            .unwrap_or_default()
                    }),
                };
                (path.to_string(), res)
            })
            .collect()
    });
    t.lap("binaries");

    let booted = simulate_boot(&image, &rc);
    warnings.extend(booted.conflicts.iter().cloned());
    warnings.extend(booted.warnings.iter().cloned());
    let mut fs = booted.image;
    t.lap("boot");

    let mut skipped: BTreeMap<String, String> =
        analyses.iter().filter_map(|(p, r)| r.as_ref().err().map(|e| (p.clone(), e.clone()))).collect();
    let mut endpoints = Vec::new();
    for (domain, binary) in &targets {
        let analysis = analyses.get(binary).and_then(|r| r.as_ref().ok());
        let found = binary_endpoints(domain, binary, analysis, &rc, &mut fs, &mut warnings);
        if found.is_empty() && !skipped.contains_key(binary) {
            skipped.insert(binary.clone(), "NO_ENDPOINTS".to_string());
        }
        endpoints.extend(found);
    }
    endpoints.sort_by(|a, b| {
        (&a.owner_binary, &a.address, a.namespace, &a.owner_domain).cmp(&(
            &b.owner_binary,
            &b.address,
            b.namespace,
            &b.owner_domain,
        ))
    });
    let records = endpoints.iter().map(|ep| endpoint_record(ep, &evaluate(ep, &writable, &fs, &opts.grants))).collect();
    t.lap("evaluate");

    for w in &warnings {
        warn!("{w}");
    }
    let analyzed = analyses.values().filter(|r| r.is_ok()).count();
    let report = Report {
        report_version: REPORT_VERSION,
        image: image_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| image_dir.display().to_string()),
        stats: Stats {
            rules_parsed: db.stats.rules,
            services: rc.services.len(),
            binaries_analyzed: analyzed,
            binaries_skipped: skipped.len(),
        },
        endpoints: records,
        skipped: skipped.into_iter().map(|(binary, reason)| SkippedRecord { binary, reason }).collect(),
        timing: if opts.canonical { BTreeMap::new() } else { t.laps },
    };
    Ok(Outcome { report, warnings })
}

fn id_of(name: Option<&str>, fs: &FirmwareImage, warnings: &mut Vec<String>) -> u32 {
    let Some(name) = name else { return 0 };
    resolve_id(name, &fs.id_overrides).unwrap_or_else(|v| {
        warnings.push(format!("unknown user/group `{name}`, using {v}"));
        v
    })
}

/// Endpoints owned by one binary running in `domain`: init-declared sockets
/// of the services that execute it, then whatever the binary binds itself.
fn binary_endpoints(
    domain: &str,
    binary: &str,
    analysis: Option<&BinaryAnalysis>,
    rc: &InitRc,
    fs: &mut FirmwareImage,
    warnings: &mut Vec<String>,
) -> Vec<SocketEndpoint> {
    let services: Vec<&ServiceDefinition> = rc.services.iter().filter(|s| s.exec_path == binary).collect();
    let property_restart = services.iter().any(|s| restart_risk(s, &rc.triggers) == RestartRisk::PropertyRestart);
    let checks = analysis.map(|a| a.peer_checks.clone()).unwrap_or_default();
    let auth = analysis.map(BinaryAnalysis::auth_strength).unwrap_or(udsaudit_binary::CheckStrength::None);
    let new = |address: String, raw: Vec<u8>, namespace, provenance, file_entry| SocketEndpoint {
        address,
        raw,
        namespace,
        owner_binary: binary.to_string(),
        owner_domain: domain.to_string(),
        file_entry,
        checks: checks.clone(),
        provenance,
        auth,
        close_rebind: false,
        property_restart,
        dac_indeterminate: false,
    };

    let mut out: Vec<SocketEndpoint> = Vec::new();
    for svc in &services {
        for s in extract_reserved_sockets(svc) {
            if out.iter().any(|e| e.namespace == Namespace::Reserved && e.address == s.name) {
                continue;
            }
            let file = fs.entry(&s.path).cloned();
            out.push(new(s.name.clone(), s.name.into_bytes(), Namespace::Reserved, Provenance::Initrc, file));
        }
    }

    let Some(analysis) = analysis else { return out };
    let user = services.first().and_then(|s| s.user.as_deref());
    let group = services.first().and_then(|s| s.group.as_deref());
    for finding in &analysis.binds {
        let b = &finding.bind;
        if b.confidence != Confidence::Exact {
            warnings.push(format!(
                "{binary}: bind at {:#x} via {} has a {:?} address; not reported",
                b.callsite, b.api, b.confidence
            ));
            continue;
        }
        let provenance = if b.api == "getenv" { Provenance::BinaryGetenv } else { Provenance::BinaryBind };
        let ns = match classify_namespace(&b.address_bytes, provenance, b.namespace_hint == NamespaceHint::ReservedEnv)
        {
            Ok(ns) => ns,
            Err(e) => {
                warnings.push(format!("{binary}: {e}"));
                continue;
            }
        };
        let address = display_address(&b.address_bytes, ns);
        if let Some(existing) = out.iter_mut().find(|e| e.namespace == ns && e.address == address) {
            existing.close_rebind |= finding.close_rebind;
            continue;
        }
        let mut ep = new(address, b.address_bytes.clone(), ns, provenance, None);
        ep.close_rebind = finding.close_rebind;
        match ns {
            Namespace::Abstract => {}
            Namespace::Reserved => ep.file_entry = fs.entry(&socket_path(&ep.address)).cloned(),
            Namespace::Filesystem => {
                let uid = id_of(user, fs, warnings);
                let gid = id_of(group, fs, warnings);
                let (entry, indeterminate) = socket_file(&ep.address, finding, fs, uid, gid);
                ep.dac_indeterminate = indeterminate;
                match fs.insert_entry(entry, true) {
                    Ok(next) => {
                        *fs = next;
                        ep.file_entry = fs.entry(&ep.address).cloned();
                    }
                    Err(e) => warnings.push(format!("{binary}: {e}")),
                }
            }
        }
        out.push(ep);
    }
    out
}

/// Socket file a filesystem bind leaves behind. An existing socket entry is
/// the starting point, otherwise `0777 & ~umask` owned by the service
/// credentials. Constant post-bind chmod/chown calls then apply in order.
/// The flag is set when any relevant call had a non-constant argument.
fn socket_file(
    path: &str,
    finding: &udsaudit_binary::BindFinding,
    fs: &FirmwareImage,
    uid: u32,
    gid: u32,
) -> (FsEntry, bool) {
    let mut indeterminate = false;
    let mut entry = match fs.entry(path) {
        Some(e) if e.kind == FileKind::SocketFile => e.clone(),
        _ => {
            let mut umask = DEFAULT_UMASK;
            let (mut uid, mut gid) = (uid, gid);
            for m in finding.cred_mods.iter().filter(|m| m.position == Position::BeforeBind) {
                let Some(v) = m.args.first().and_then(|a| a.value()) else {
                    indeterminate = true;
                    continue;
                };
                match m.kind {
                    CredModKind::Umask => umask = (v & 0o777) as u16,
                    CredModKind::Seteuid => uid = v as u32,
                    CredModKind::Setegid => gid = v as u32,
                    _ => {}
                }
            }
            FsEntry::new(path, 0o777 & !umask, uid, gid, FileKind::SocketFile)
        }
    };
    for m in finding.cred_mods.iter().filter(|m| m.position == Position::AfterBind) {
        match m.kind {
            CredModKind::Chmod | CredModKind::Fchmod => match m.args.first().and_then(|a| a.value()) {
                Some(v) => entry.mode = (v & 0o7777) as u16,
                None => indeterminate = true,
            },
            CredModKind::Chown | CredModKind::Fchown => {
                for (i, slot) in [&mut entry.uid, &mut entry.gid].into_iter().enumerate() {
                    match m.args.get(i).and_then(|a| a.value()) {
                        // -1 leaves the id unchanged
                        Some(v) if v as u32 == u32::MAX => {}
                        Some(v) => *slot = v as u32,
                        None => indeterminate = true,
                    }
                }
            }
            _ => {}
        }
    }
    entry.selabel = None;
    if let Some(existing) = fs.entry(path).filter(|e| e.kind == FileKind::SocketFile) {
        entry.selabel = existing.selabel.clone();
    }
    (entry, indeterminate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use udsaudit_binary::{BindFinding, CredArg, CredModCall, ExtractedBind};

    use crate::firmware::FileContexts;

    fn finding(mods: Vec<(CredModKind, Vec<CredArg>, Position)>) -> BindFinding {
        BindFinding {
            bind: ExtractedBind {
                callsite: 0,
                function: 0,
                address_bytes: b"/data/s".to_vec(),
                namespace_hint: NamespaceHint::Filesystem,
                api: "bind".into(),
                confidence: Confidence::Exact,
            },
            cred_mods: mods
                .into_iter()
                .map(|(kind, args, position)| CredModCall { kind, args, position, callsite: 0 })
                .collect(),
            close_rebind: false,
            replayed: true,
        }
    }

    fn image() -> FirmwareImage {
        FirmwareImage::from_parts(FileContexts::default(), "")
    }

    #[test]
    fn default_umask_applies() {
        let (e, ind) = socket_file("/data/s", &finding(vec![]), &image(), 1000, 1000);
        assert_eq!((e.mode, e.uid, e.gid, ind), (0o700, 1000, 1000, false));
    }

    #[test]
    fn post_bind_calls_override() {
        let f = finding(vec![
            (CredModKind::Umask, vec![CredArg::Const(0)], Position::BeforeBind),
            (CredModKind::Chmod, vec![CredArg::Const(0o660)], Position::AfterBind),
            (CredModKind::Fchown, vec![CredArg::Const(u32::MAX as u64), CredArg::Const(3003)], Position::AfterBind),
        ]);
        let (e, ind) = socket_file("/data/s", &f, &image(), 1000, 1000);
        assert_eq!((e.mode, e.uid, e.gid, ind), (0o660, 1000, 3003, false));
    }

    #[test]
    fn symbolic_mode_is_indeterminate() {
        let f = finding(vec![(CredModKind::Chmod, vec![CredArg::Symbolic], Position::AfterBind)]);
        assert!(socket_file("/data/s", &f, &image(), 0, 0).1);
    }

    #[test]
    fn existing_socket_entry_is_reused() {
        let img = image()
            .insert_entry(
                FsEntry::new("/data/s", 0o666, 1013, 1005, FileKind::SocketFile).with_label("u:object_r:x:s0"),
                false,
            )
            .unwrap();
        let (e, _) = socket_file("/data/s", &finding(vec![]), &img, 0, 0);
        assert_eq!((e.mode, e.uid, e.gid), (0o666, 1013, 1005));
        assert_eq!(e.selabel.as_deref(), Some("u:object_r:x:s0"));
    }
}
