use std::collections::BTreeSet;
use std::path::PathBuf;

use udsaudit_binary::cfg::{build_cfg, find_callsites};
use udsaudit_binary::elf::load_elf;
use udsaudit_binary::{
    analyze_binary, BinaryAnalysis, BindApiConfig, CheckStrength, Confidence, Cred, CredArg, CredModKind,
    NamespaceHint, Position, SkipReason, UsageKind,
};

const ARCHES: &[&str] = &["aarch64", "x86_64"];

fn path(arch: &str, opt: &str, name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/bin").join(arch).join(opt).join(name)
}

fn run(arch: &str, opt: &str, name: &str) -> BinaryAnalysis {
    let bytes = std::fs::read(path(arch, opt, name)).unwrap();
    analyze_binary(&bytes, &BindApiConfig::default()).unwrap_or_else(|e| panic!("{arch}/{opt}/{name}: {e:?}"))
}

type Expected = &'static [(&'static [u8], NamespaceHint)];

/// Address constants as written in the fixture sources.
const ORACLE: &[(&str, Expected)] = &[
    ("bind_direct", &[(b"/dev/socket/direct", NamespaceHint::Filesystem)]),
    ("bind_snprintf", &[(b"/dev/socket/nims", NamespaceHint::Filesystem)]),
    ("bind_abstract", &[(b"\0cand.socket.ctrl", NamespaceHint::Abstract)]),
    ("getenv_reserved", &[(b"cnd", NamespaceHint::ReservedEnv)]),
    ("local_server", &[(b"\0fmhal_sock", NamespaceHint::Abstract)]),
    ("local_server_bind", &[(b"/data/misc/fs_sock", NamespaceHint::Filesystem)]),
    ("control_socket", &[(b"dmagent", NamespaceHint::ReservedEnv)]),
    ("framework_listener", &[(b"netd", NamespaceHint::ReservedEnv)]),
    ("socket_listener", &[(b"vold", NamespaceHint::ReservedEnv)]),
    ("credmod", &[(b"/data/misc/camera/cam_socket", NamespaceHint::Filesystem)]),
    ("peercred_uid", &[(b"\0fmhal.uid", NamespaceHint::Abstract)]),
    ("peercred_pid", &[(b"pidchk", NamespaceHint::ReservedEnv)]),
    ("peercred_comm", &[(b"dpmd", NamespaceHint::ReservedEnv)]),
    ("close_rebind", &[(b"\0dun.ctrl", NamespaceHint::Abstract)]),
    (
        "bind_helper",
        &[(b"/dev/socket/helper_a", NamespaceHint::Filesystem), (b"/dev/socket/helper_b", NamespaceHint::Filesystem)],
    ),
];

fn recovered(a: &BinaryAnalysis) -> BTreeSet<(Vec<u8>, NamespaceHint)> {
    a.binds
        .iter()
        .filter(|b| b.bind.confidence == Confidence::Exact)
        .map(|b| (b.bind.address_bytes.clone(), b.bind.namespace_hint))
        .collect()
}

fn expected(list: &[(&[u8], NamespaceHint)]) -> BTreeSet<(Vec<u8>, NamespaceHint)> {
    list.iter().map(|(b, h)| (b.to_vec(), *h)).collect()
}

#[test]
fn o0_recovery_is_exact() {
    let mut failures = Vec::new();
    for arch in ARCHES {
        for (name, want) in ORACLE {
            let a = run(arch, "O0", name);
            let got = recovered(&a);
            if got != expected(want) {
                failures.push(format!("{arch}/{name}: got {got:?}"));
            }
            for b in &a.binds {
                if b.bind.confidence == Confidence::Exact {
                    assert!(b.replayed, "{arch}/{name}: exact bytes failed replay");
                }
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn o2_recovery_rate() {
    for arch in ARCHES {
        let mut hit = 0;
        let mut total = 0;
        for (name, want) in ORACLE {
            let got = recovered(&run(arch, "O2", name));
            for w in expected(want) {
                total += 1;
                if got.contains(&w) {
                    hit += 1;
                } else {
                    println!("{arch}/O2/{name}: missed {:?}", String::from_utf8_lossy(&w.0));
                }
            }
        }
        println!("{arch} -O2 exact recovery: {hit}/{total}");
    }
}

#[test]
fn namespace_hint_matches_bytes() {
    for arch in ARCHES {
        for opt in ["O0", "O2"] {
            for (name, _) in ORACLE {
                for b in run(arch, opt, name).binds {
                    let bytes = &b.bind.address_bytes;
                    assert_eq!(b.bind.namespace_hint == NamespaceHint::Abstract, bytes.first() == Some(&0), "{name}");
                    if b.bind.namespace_hint == NamespaceHint::Filesystem {
                        assert_eq!(bytes.first(), Some(&b'/'));
                    }
                }
            }
        }
    }
}

#[test]
fn imports_include_bind_and_getsockopt() {
    let bin = load_elf(&std::fs::read(path("aarch64", "O0", "bind_direct")).unwrap()).unwrap();
    let names: BTreeSet<&str> = bin.imports.values().map(String::as_str).collect();
    assert!(names.contains("bind") && names.contains("getsockopt"));
}

#[test]
fn one_bind_edge_and_callsites() {
    for arch in ARCHES {
        let bin = load_elf(&std::fs::read(path(arch, "O0", "bind_direct")).unwrap()).unwrap();
        let cfg = build_cfg(&bin);
        let binds = find_callsites(&cfg, &BTreeSet::from(["bind".to_string()]));
        assert_eq!(binds.len(), 1, "{arch}");
        assert!(find_callsites(&cfg, &BTreeSet::from(["nonexistent".to_string()])).is_empty());

        let bin = load_elf(&std::fs::read(path(arch, "O0", "local_server")).unwrap()).unwrap();
        let cfg = build_cfg(&bin);
        let s = find_callsites(&cfg, &BTreeSet::from(["socket_local_server".to_string()]));
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].symbol, "socket_local_server");
    }
}

#[test]
fn indirect_calls_are_unresolved() {
    for arch in ARCHES {
        let bin = load_elf(&std::fs::read(path(arch, "O0", "indirect_call")).unwrap()).unwrap();
        let cfg = build_cfg(&bin);
        assert!(!cfg.unresolved_calls.is_empty(), "{arch}");
        for site in &cfg.unresolved_calls {
            assert!(!cfg.call_edges.contains_key(site) || cfg.call_edges[site] == udsaudit_binary::Callee::Unresolved);
        }
    }
}

#[test]
fn symbolic_name_yields_no_bytes() {
    for arch in ARCHES {
        let a = run(arch, "O0", "bind_symbolic");
        assert_eq!(a.binds.len(), 1);
        assert_eq!(a.binds[0].bind.confidence, Confidence::Symbolic);
        assert!(a.binds[0].bind.address_bytes.is_empty());
    }
}

#[test]
fn getenv_other_names_ignored() {
    for arch in ARCHES {
        let a = run(arch, "O0", "getenv_reserved");
        assert_eq!(a.binds.len(), 1);
        assert_eq!(a.binds[0].bind.api, "getenv");
    }
}

#[test]
fn cred_mods_around_bind() {
    for arch in ARCHES {
        let a = run(arch, "O0", "credmod");
        let mods = &a.binds[0].cred_mods;
        let summary: Vec<(CredModKind, Vec<CredArg>, Position)> =
            mods.iter().map(|m| (m.kind, m.args.clone(), m.position)).collect();
        assert_eq!(
            summary,
            vec![
                (CredModKind::Umask, vec![CredArg::Const(0)], Position::BeforeBind),
                (CredModKind::Chmod, vec![CredArg::Const(0o666)], Position::AfterBind),
                (CredModKind::Fchown, vec![CredArg::Const(1000), CredArg::Const(3003)], Position::AfterBind),
            ],
            "{arch}"
        );
        assert!(run(arch, "O0", "bind_direct").binds[0].cred_mods.is_empty());
    }
}

#[test]
fn peer_credential_checks() {
    for arch in ARCHES {
        for opt in ["O0", "O2"] {
            let uid = run(arch, opt, "peercred_uid");
            assert_eq!(uid.peer_checks.len(), 1, "{arch}/{opt}");
            assert_eq!(uid.peer_checks[0].creds_used, vec![Cred::Uid]);
            let cmps: BTreeSet<u64> = uid.peer_checks[0]
                .usages
                .iter()
                .filter(|u| u.kind == UsageKind::Comparison)
                .filter_map(|u| u.comparand)
                .collect();
            assert!(cmps.is_subset(&BTreeSet::from([0, 1000, 1002])) && cmps.contains(&1000), "{arch}/{opt}: {cmps:?}");
            assert_eq!(uid.auth_strength(), CheckStrength::Secure);

            let pid = run(arch, opt, "peercred_pid");
            assert_eq!(pid.peer_checks[0].creds_used, vec![Cred::Pid], "{arch}/{opt}");
            assert_eq!(pid.auth_strength(), CheckStrength::Weak);

            let comm = run(arch, opt, "peercred_comm");
            assert_eq!(comm.peer_checks[0].creds_used, vec![Cred::Pid], "{arch}/{opt}");
            assert!(comm.peer_checks[0]
                .usages
                .iter()
                .any(|u| u.kind == UsageKind::FunctionArg && u.callee.is_some() && u.name_lookup));
            assert_eq!(comm.auth_strength(), CheckStrength::Spoofable);

            // SO_TYPE is not a credential query
            assert!(run(arch, opt, "bind_direct").peer_checks.is_empty());
        }
    }
}

#[test]
fn close_rebind_only_in_loop() {
    for arch in ARCHES {
        for opt in ["O0", "O2"] {
            let a = run(arch, opt, "close_rebind");
            assert!(a.binds.iter().all(|b| b.close_rebind), "{arch}/{opt}");
            assert!(!a.binds.is_empty());
            // closes the client only; the listening socket is never closed
            assert!(run(arch, opt, "peercred_uid").binds.iter().all(|b| !b.close_rebind));
            assert!(run(arch, opt, "bind_direct").binds.iter().all(|b| !b.close_rebind));
        }
    }
}

#[test]
fn static_binaries() {
    for arch in ARCHES {
        let bytes = std::fs::read(path(arch, "O0", "static_stripped")).unwrap();
        let bin = load_elf(&bytes).unwrap();
        assert!(bin.imports.is_empty());
        let e = analyze_binary(&bytes, &BindApiConfig::default()).unwrap_err();
        assert_eq!(e.reason, SkipReason::SkippedStatic);

        let a = run(arch, "O0", "static_symbols");
        assert_eq!(recovered(&a), expected(&[(b"/dev/socket/static", NamespaceHint::Filesystem)]), "{arch}");
    }
}

#[test]
fn custom_bind_api_list() {
    let bytes = std::fs::read(path("aarch64", "O0", "control_socket")).unwrap();
    let cfg = BindApiConfig::from_text("bind\n");
    let a = analyze_binary(&bytes, &cfg).unwrap();
    assert!(a.binds.is_empty());
}

#[test]
fn exact_results_are_never_wrong() {
    for arch in ARCHES {
        for opt in ["O0", "O2"] {
            for (name, want) in ORACLE {
                let got = recovered(&run(arch, opt, name));
                assert!(got.is_subset(&expected(want)), "{arch}/{opt}/{name}: {got:?}");
            }
        }
    }
}
