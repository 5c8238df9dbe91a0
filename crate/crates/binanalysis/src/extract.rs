//! Turns engine snapshots into bind addresses, credential mutations,
//! peer-credential checks and close/rebind evidence.

use std::collections::{BTreeMap, BTreeSet};

use crate::apis::{display_name, shape_of, ApiShape, BindApiConfig, ENV_PREFIX};
use crate::cfg::{build_cfg, find_callsites, Callee, Callsite, Cfg};
use crate::elf::{load_elf, BinError, BinaryImage};
use crate::engine::{binop, is_api_name, is_proc_name_path, Def, Engine, State, UseKind, Val, MAX_DEPTH};
use crate::ir::BinOp;
use crate::{
    BinaryAnalysis, BindFinding, CheckStrength, Confidence, Cred, CredArg, CredModCall, CredModKind, ExtractedBind,
    NamespaceHint, PeerCredCheck, Position, Skip, SkipReason, Usage, UsageKind,
};

const SUN_PATH_MAX: usize = 108;
const CRED_MODS: &[&str] = &["umask", "seteuid", "setegid", "chmod", "fchmod", "chown", "fchown"];

pub fn analyze_binary(bytes: &[u8], config: &BindApiConfig) -> Result<BinaryAnalysis, Skip> {
    let bin = load_elf(bytes).map_err(|e| match e {
        BinError::UnsupportedArch(m) => Skip { reason: SkipReason::UnsupportedArch, detail: format!("e_machine {m}") },
        BinError::MalformedElf(m) => Skip { reason: SkipReason::MalformedElf, detail: m },
    })?;
    if bin.is_static_stripped() {
        return Err(Skip { reason: SkipReason::SkippedStatic, detail: "statically linked without symbols".into() });
    }
    let cfg = build_cfg(&bin);
    Ok(analyze_image(&bin, &cfg, config))
}

/// Callsites of `symbols`, excluding calls made from inside library
/// routines linked into static binaries.
fn sites(cfg: &Cfg, symbols: &BTreeSet<String>) -> Vec<Callsite> {
    find_callsites(cfg, symbols)
        .into_iter()
        .filter(|c| !cfg.functions.get(&c.function).and_then(|f| f.name.as_deref()).is_some_and(is_api_name))
        .collect()
}

/// Functions that read a process name from `/proc`, directly or via callees.
pub fn name_lookup_functions(bin: &BinaryImage, cfg: &Cfg) -> BTreeSet<u64> {
    let mut set: BTreeSet<u64> = cfg
        .functions
        .values()
        .filter(|f| f.data_refs.iter().any(|r| bin.cstring(*r, 256).is_some_and(|s| is_proc_name_path(&s))))
        .map(|f| f.entry)
        .collect();
    loop {
        let mut grew = false;
        for (site, callee) in &cfg.call_edges {
            let target = match callee {
                Callee::Addr(a) => Some(*a),
                Callee::Symbol(s) => cfg.functions.values().find(|f| f.name.as_deref() == Some(s)).map(|f| f.entry),
                Callee::Unresolved => None,
            };
            if target.is_some_and(|t| set.contains(&t)) {
                if let Some(f) = cfg.function_of(*site) {
                    grew |= set.insert(f.entry);
                }
            }
        }
        if !grew {
            return set;
        }
    }
}

struct Resolved {
    bytes: Vec<u8>,
    defs: Vec<Def>,
    hint: NamespaceHint,
    confidence: Confidence,
    /// Descriptor the address is bound to, when known.
    fd: Val,
}

fn arg(st: &State, eng: &Engine, i: usize) -> Val {
    st.reg(eng.abi().args[i])
}

fn hint_from_bytes(b: &[u8]) -> NamespaceHint {
    match b.first() {
        Some(0) => NamespaceHint::Abstract,
        Some(b'/') => NamespaceHint::Filesystem,
        _ => NamespaceHint::Unknown,
    }
}

/// Known prefix of a C string plus whether it terminated.
fn cstr(eng: &Engine, st: &State, p: Val) -> (Vec<u8>, Vec<Def>, bool) {
    let (s, term) = eng.read_cstr(st, p, 4096);
    (s.iter().map(|x| x.0).collect(), s.iter().map(|x| x.1).collect(), term)
}

fn resolve(eng: &Engine, st: &State, symbol: &str, site: u64) -> Option<Resolved> {
    match shape_of(symbol) {
        ApiShape::Sockaddr => {
            let sa = arg(st, eng, 1);
            let len = arg(st, eng, 2).as_const();
            let fam = eng.read_bytes(st, sa, 2);
            if let [Some((lo, _)), Some((hi, _))] = fam[..] {
                if u16::from_le_bytes([lo, hi]) != 1 {
                    return None;
                }
            }
            let path = eng.read_bytes(st, binop(BinOp::Add, sa, Val::Const(2)), SUN_PATH_MAX);
            let fd = arg(st, eng, 0);
            let Some(Some((first, _))) = path.first().copied() else {
                return Some(Resolved {
                    bytes: vec![],
                    defs: vec![],
                    hint: NamespaceHint::Unknown,
                    confidence: Confidence::Symbolic,
                    fd,
                });
            };
            let mut bytes = Vec::new();
            let mut defs = Vec::new();
            let mut complete = false;
            if first == 0 {
                let n = len.map(|l| (l as usize).saturating_sub(2).min(SUN_PATH_MAX));
                let want = n.unwrap_or(SUN_PATH_MAX);
                for b in path.iter().take(want) {
                    match b {
                        Some((v, d)) => {
                            if n.is_none() && *v == 0 && !bytes.is_empty() {
                                break;
                            }
                            bytes.push(*v);
                            defs.push(*d);
                        }
                        None => break,
                    }
                }
                complete = n.is_some() && bytes.len() == want;
                if n == Some(SUN_PATH_MAX) {
                    while bytes.len() > 1 && bytes.last() == Some(&0) {
                        bytes.pop();
                        defs.pop();
                    }
                }
            } else {
                for b in &path {
                    match b {
                        Some((0, _)) => {
                            complete = true;
                            break;
                        }
                        Some((v, d)) => {
                            bytes.push(*v);
                            defs.push(*d);
                        }
                        None => break,
                    }
                }
            }
            let hint = hint_from_bytes(&bytes);
            Some(Resolved {
                confidence: if complete { Confidence::Exact } else { Confidence::Partial },
                bytes,
                defs,
                hint,
                fd,
            })
        }
        ApiShape::NamedNs { name, ns } => {
            let (mut bytes, mut defs, term) = cstr(eng, st, arg(st, eng, name));
            let ns = arg(st, eng, ns).as_const();
            let hint = match ns {
                Some(0) => {
                    bytes.insert(0, 0);
                    defs.insert(0, Def::Fill { insn: site });
                    NamespaceHint::Abstract
                }
                Some(1) => NamespaceHint::ReservedEnv,
                Some(2) => hint_from_bytes(&bytes),
                _ => NamespaceHint::Unknown,
            };
            let fd = if symbol == "socket_local_server_bind" { arg(st, eng, 0) } else { Val::Ret(site) };
            Some(named(bytes, defs, term, hint, fd))
        }
        ApiShape::Reserved { name } => {
            let (bytes, defs, term) = cstr(eng, st, arg(st, eng, name));
            Some(named(bytes, defs, term, NamespaceHint::ReservedEnv, Val::Top))
        }
        ApiShape::Env => {
            let (bytes, defs, term) = cstr(eng, st, arg(st, eng, 0));
            let p = ENV_PREFIX.as_bytes();
            if !term || !bytes.starts_with(p) || bytes.len() == p.len() {
                return None;
            }
            Some(named(bytes[p.len()..].to_vec(), defs[p.len()..].to_vec(), true, NamespaceHint::ReservedEnv, Val::Top))
        }
        ApiShape::Generic => {
            let (bytes, defs, term) = cstr(eng, st, arg(st, eng, 0));
            let hint = hint_from_bytes(&bytes);
            Some(named(bytes, defs, term, hint, Val::Ret(site)))
        }
    }
}

fn named(bytes: Vec<u8>, defs: Vec<Def>, term: bool, hint: NamespaceHint, fd: Val) -> Resolved {
    let confidence = if term && !bytes.is_empty() {
        Confidence::Exact
    } else if bytes.is_empty() {
        Confidence::Symbolic
    } else {
        Confidence::Partial
    };
    let hint = if confidence == Confidence::Symbolic && hint != NamespaceHint::ReservedEnv {
        NamespaceHint::Unknown
    } else {
        hint
    };
    Resolved { bytes, defs, hint, confidence, fd }
}

pub fn analyze_image(bin: &BinaryImage, cfg: &Cfg, config: &BindApiConfig) -> BinaryAnalysis {
    let mut bind_syms = config.symbols.clone();
    bind_syms.insert("getenv".into());
    let bind_sites = sites(cfg, &bind_syms);
    let mod_sites = sites(cfg, &CRED_MODS.iter().map(|s| s.to_string()).collect());
    let peer_sites = sites(cfg, &BTreeSet::from(["getsockopt".to_string()]));
    let close_sites = sites(cfg, &BTreeSet::from(["close".to_string()]));

    let targets: BTreeSet<u64> =
        bind_sites.iter().chain(&mod_sites).chain(&peer_sites).chain(&close_sites).map(|c| c.addr).collect();
    let mut eng = Engine::new(bin, cfg, targets, name_lookup_functions(bin, cfg));

    // Roots: every function holding a bind or getsockopt site, plus callers
    // of getsockopt holders so credentials written through a pointer
    // parameter are still tracked.
    let mut analyzed: BTreeSet<u64> = BTreeSet::new();
    let mut roots: BTreeSet<u64> = bind_sites.iter().chain(&mod_sites).map(|c| c.function).collect();
    let mut frontier: BTreeSet<u64> = peer_sites.iter().map(|c| c.function).collect();
    for _ in 0..MAX_DEPTH {
        roots.extend(frontier.iter().copied());
        frontier = frontier.iter().flat_map(|f| cfg.callers_of(*f)).map(|(_, caller)| caller).collect();
    }
    roots.extend(frontier);
    for r in &roots {
        eng.analyze(*r);
        analyzed.insert(*r);
    }

    // Binds whose address still depends on the caller get re-analysed from
    // callers, up to the depth limit.
    let mut pending: BTreeSet<u64> = BTreeSet::new();
    for c in &bind_sites {
        let resolved = contexts(&eng, c.addr)
            .into_iter()
            .filter_map(|(_, st)| resolve(&eng, &st, &c.symbol, c.addr))
            .collect::<Vec<_>>();
        if resolved.iter().any(|r| r.confidence != Confidence::Exact) {
            pending.insert(c.function);
        }
    }
    for _ in 0..MAX_DEPTH {
        let callers: BTreeSet<u64> = pending
            .iter()
            .flat_map(|f| cfg.callers_of(*f))
            .map(|(_, caller)| caller)
            .filter(|c| !analyzed.contains(c))
            .collect();
        for c in &callers {
            eng.analyze(*c);
            analyzed.insert(*c);
        }
        pending = callers;
    }

    let mut binds = Vec::new();
    for c in &bind_sites {
        binds.extend(bind_findings(&eng, bin, cfg, c, &mod_sites, &close_sites));
    }
    binds.sort_by(|a, b| (a.bind.callsite, &a.bind.address_bytes).cmp(&(b.bind.callsite, &b.bind.address_bytes)));

    BinaryAnalysis {
        arch: bin.arch,
        binds,
        peer_checks: peer_checks(&eng),
        functions: cfg.functions.len(),
        unresolved_calls: cfg.unresolved_calls.len(),
        undecodable: cfg.undecodable,
        nonconst_optname: eng.nonconst_optname.len(),
        incomplete: eng.incomplete,
    }
}

/// Snapshots of `site` keyed by calling context (shortest first).
fn contexts(eng: &Engine, site: u64) -> Vec<(Vec<u64>, State)> {
    let mut v: Vec<(Vec<u64>, State)> = eng
        .snapshots
        .iter()
        .filter(|((a, _), _)| *a == site)
        .map(|((_, stack), st)| (stack.clone(), st.clone()))
        .collect();
    v.sort_by_key(|(s, _)| (s.len(), s.clone()));
    v
}

fn bind_findings(
    eng: &Engine,
    bin: &BinaryImage,
    cfg: &Cfg,
    c: &Callsite,
    mod_sites: &[Callsite],
    close_sites: &[Callsite],
) -> Vec<BindFinding> {
    let ctxs = contexts(eng, c.addr);
    let mut resolved: Vec<(Vec<u64>, Resolved)> =
        ctxs.iter().filter_map(|(stack, st)| Some((stack.clone(), resolve(eng, st, &c.symbol, c.addr)?))).collect();
    // A caller-supplied context supersedes the function's own view when the
    // latter could not resolve the address.
    if resolved.iter().any(|(s, _)| !s.is_empty()) {
        resolved.retain(|(s, r)| !s.is_empty() || r.confidence == Confidence::Exact);
    }
    if resolved.iter().any(|(_, r)| r.confidence != Confidence::Symbolic) {
        resolved.retain(|(_, r)| r.confidence != Confidence::Symbolic);
    }
    let mut seen: BTreeSet<(Vec<u8>, NamespaceHint)> = BTreeSet::new();
    let mut out = Vec::new();
    for (stack, r) in resolved {
        if !seen.insert((r.bytes.clone(), r.hint)) {
            continue;
        }
        let pairs: Vec<(u8, Def)> = r.bytes.iter().copied().zip(r.defs.iter().copied()).collect();
        let replayed = eng.replay(&pairs);
        let confidence = if r.confidence == Confidence::Exact && !replayed {
            log::warn!("bind at {:#x}: def replay failed, downgrading", c.addr);
            Confidence::Partial
        } else {
            r.confidence
        };
        let bind_state = ctxs.iter().find(|(s, _)| *s == stack).map(|(_, st)| st);
        let cred_mods = bind_state.map(|st| cred_mods(eng, cfg, c, st, &stack, &r, mod_sites)).unwrap_or_default();
        let close_rebind = close_rebind(eng, cfg, c, &stack, &r, close_sites);
        out.push(BindFinding {
            bind: ExtractedBind {
                callsite: c.addr,
                function: c.function,
                address_bytes: r.bytes,
                namespace_hint: r.hint,
                api: display_name(&c.symbol).to_string(),
                confidence,
            },
            cred_mods,
            close_rebind,
            replayed,
        });
    }
    let _ = bin;
    out
}

fn snapshot<'e>(eng: &'e Engine, site: u64, stack: &[u64]) -> Option<&'e State> {
    eng.snapshots.get(&(site, stack.to_vec()))
}

fn cred_arg(v: Val) -> CredArg {
    match v {
        Val::Const(c) => CredArg::Const(c & 0xffff_ffff),
        _ => CredArg::Symbolic,
    }
}

fn cred_mods(
    eng: &Engine,
    cfg: &Cfg,
    bind: &Callsite,
    _bind_state: &State,
    stack: &[u64],
    r: &Resolved,
    mod_sites: &[Callsite],
) -> Vec<CredModCall> {
    let Some(func) = cfg.functions.get(&bind.function) else { return vec![] };
    let dom = func.dominators();
    let mut out = Vec::new();
    for m in mod_sites.iter().filter(|m| m.function == bind.function) {
        let Some(kind) = CredModKind::from_symbol(&m.symbol) else { continue };
        let Some(st) = snapshot(eng, m.addr, stack) else { continue };
        let position = if kind.before_bind() {
            if !func.dominates(&dom, m.addr, bind.addr) {
                continue;
            }
            Position::BeforeBind
        } else {
            if !func.dominates(&dom, bind.addr, m.addr) {
                continue;
            }
            Position::AfterBind
        };
        let a = |i| arg(st, eng, i);
        let targets_bind = match kind {
            CredModKind::Chmod | CredModKind::Chown => {
                let (p, _, term) = cstr(eng, st, a(0));
                !term || r.confidence != Confidence::Exact || p == r.bytes
            }
            CredModKind::Fchmod | CredModKind::Fchown => {
                let fd = a(0);
                fd == Val::Top || r.fd == Val::Top || fd == r.fd
            }
            _ => true,
        };
        if !targets_bind {
            continue;
        }
        let args = match kind {
            CredModKind::Umask | CredModKind::Seteuid | CredModKind::Setegid => vec![cred_arg(a(0))],
            CredModKind::Chmod | CredModKind::Fchmod => vec![cred_arg(a(1))],
            CredModKind::Chown | CredModKind::Fchown => vec![cred_arg(a(1)), cred_arg(a(2))],
        };
        out.push(CredModCall { kind, args, position, callsite: m.addr });
    }
    out.sort();
    out
}

/// A natural loop of the bind's function containing both the bind and a
/// close of the bound descriptor.
fn close_rebind(
    eng: &Engine,
    cfg: &Cfg,
    bind: &Callsite,
    stack: &[u64],
    r: &Resolved,
    close_sites: &[Callsite],
) -> bool {
    if r.fd == Val::Top {
        return false;
    }
    let Some(func) = cfg.functions.get(&bind.function) else { return false };
    let dom = func.dominators();
    let Some(bind_block) = func.block_of(bind.addr).map(|b| b.start) else { return false };
    let loops = func.natural_loops(&dom);
    close_sites.iter().filter(|c| c.function == bind.function).any(|c| {
        let Some(cb) = func.block_of(c.addr).map(|b| b.start) else { return false };
        let same_fd = snapshot(eng, c.addr, stack).is_some_and(|st| arg(st, eng, 0) == r.fd);
        same_fd && loops.iter().any(|(_, body)| body.contains(&bind_block) && body.contains(&cb))
    })
}

fn peer_checks(eng: &Engine) -> Vec<PeerCredCheck> {
    let mut by_site: BTreeMap<u64, BTreeSet<Usage>> = BTreeMap::new();
    for u in &eng.cred_uses {
        if !eng.peercred_sites.contains(&u.site) {
            continue;
        }
        let usage = match &u.kind {
            UseKind::Comparison { comparand } => Usage {
                cred: Cred::from_field(u.field),
                kind: UsageKind::Comparison,
                comparand: *comparand,
                callee: None,
                name_lookup: false,
                at: u.at,
            },
            UseKind::Argument { callee, name_lookup } => Usage {
                cred: Cred::from_field(u.field),
                kind: UsageKind::FunctionArg,
                comparand: None,
                callee: Some(callee.clone()),
                name_lookup: *name_lookup,
                at: u.at,
            },
        };
        by_site.entry(u.site).or_default().insert(usage);
    }
    by_site
        .into_iter()
        .map(|(site, usages)| PeerCredCheck {
            callsite: site,
            creds_used: usages.iter().map(|u| u.cred).collect::<BTreeSet<_>>().into_iter().collect(),
            usages: usages.into_iter().collect(),
        })
        .filter(|c| !c.creds_used.is_empty())
        .collect()
}

/// Strength of one check. A PID reaching a process-name lookup is
/// spoofable regardless of other uses; otherwise any UID/GID comparison is
/// secure and remaining uses are weak.
pub fn classify_check_strength(check: &PeerCredCheck) -> CheckStrength {
    if check.creds_used.is_empty() {
        return CheckStrength::None;
    }
    if check.usages.iter().any(|u| u.cred == Cred::Pid && u.kind == UsageKind::FunctionArg && u.name_lookup) {
        return CheckStrength::Spoofable;
    }
    if check.usages.iter().any(|u| u.cred != Cred::Pid && u.kind == UsageKind::Comparison) {
        return CheckStrength::Secure;
    }
    CheckStrength::Weak
}

#[cfg(test)]
mod tests {
    use super::*;

    fn usage(cred: Cred, kind: UsageKind, lookup: bool) -> Usage {
        Usage {
            cred,
            kind,
            comparand: (kind == UsageKind::Comparison).then_some(1000),
            callee: (kind == UsageKind::FunctionArg).then(|| Callee::Symbol("get_name".into())),
            name_lookup: lookup,
            at: 0,
        }
    }

    fn check(us: Vec<Usage>) -> PeerCredCheck {
        PeerCredCheck {
            callsite: 0,
            creds_used: us.iter().map(|u| u.cred).collect::<BTreeSet<_>>().into_iter().collect(),
            usages: us,
        }
    }

    #[test]
    fn strength_table() {
        assert_eq!(
            classify_check_strength(&check(vec![usage(Cred::Uid, UsageKind::Comparison, false)])),
            CheckStrength::Secure
        );
        assert_eq!(
            classify_check_strength(&check(vec![usage(Cred::Pid, UsageKind::Comparison, false)])),
            CheckStrength::Weak
        );
        assert_eq!(
            classify_check_strength(&check(vec![
                usage(Cred::Pid, UsageKind::FunctionArg, true),
                usage(Cred::Uid, UsageKind::Comparison, false)
            ])),
            CheckStrength::Spoofable
        );
        assert_eq!(classify_check_strength(&check(vec![])), CheckStrength::None);
        assert!(CheckStrength::None < CheckStrength::Spoofable && CheckStrength::Weak < CheckStrength::Secure);
    }

    #[test]
    fn garbage_is_malformed() {
        let e = analyze_binary(b"\x7fEL", &BindApiConfig::default()).unwrap_err();
        assert_eq!(e.reason, SkipReason::MalformedElf);
    }
}
