//! Android init RC parsing: service definitions, their `socket` options,
//! property triggers and filesystem commands.
//!
//! Parsing is lenient by construction. Unknown options and commands are
//! counted, never fatal.

use std::collections::BTreeSet;
use std::fmt;

use log::warn;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SocketType {
    Stream,
    Dgram,
    Seqpacket,
}

impl SocketType {
    fn parse(s: &str) -> Option<Self> {
        // init accepts e.g. `stream+passcred`
        let base = s.split('+').next().unwrap_or(s);
        Some(match base {
            "stream" => SocketType::Stream,
            "dgram" => SocketType::Dgram,
            "seqpacket" => SocketType::Seqpacket,
            _ => return None,
        })
    }
}

/// `socket <name> <type> <perm> [ <user> [ <group> [ <seclabel> ] ] ]`
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SocketOption {
    pub name: String,
    pub sock_type: SocketType,
    pub perm: u16,
    pub user: String,
    pub group: String,
    pub seclabel: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerAction {
    Start,
    Stop,
    Restart,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct PropertyTrigger {
    pub property: String,
    /// Trigger value, `*` for any.
    pub value: String,
    pub action: TriggerAction,
    pub service: String,
}

/// Where a parsed item came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Origin {
    pub file: String,
    pub line: usize,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file, self.line)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ServiceDefinition {
    pub name: String,
    pub exec_path: String,
    pub args: Vec<String>,
    /// Defaults to root when absent.
    pub user: Option<String>,
    pub group: Option<String>,
    pub supplementary_groups: Vec<String>,
    pub classes: Vec<String>,
    pub oneshot: bool,
    pub disabled: bool,
    pub seclabel: Option<String>,
    pub sockets: Vec<SocketOption>,
    pub triggers: Vec<PropertyTrigger>,
    pub origin: Origin,
}

impl ServiceDefinition {
    pub fn new(name: &str, exec_path: &str) -> Self {
        ServiceDefinition {
            name: name.to_string(),
            exec_path: exec_path.to_string(),
            args: Vec::new(),
            user: None,
            group: None,
            supplementary_groups: Vec::new(),
            classes: vec!["default".to_string()],
            oneshot: false,
            disabled: false,
            seclabel: None,
            sockets: Vec::new(),
            triggers: Vec::new(),
            origin: Origin::default(),
        }
    }

    /// Started by `class_start` during boot.
    pub fn starts_at_boot(&self) -> bool {
        !self.disabled
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum FsCommand {
    Mkdir { path: String, mode: Option<u16>, owner: Option<String>, group: Option<String> },
    Chmod { mode: u16, path: String },
    Chown { owner: String, group: Option<String>, path: String },
    Restorecon { path: String, recursive: bool },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FsAction {
    pub command: FsCommand,
    pub origin: Origin,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InitRc {
    pub services: Vec<ServiceDefinition>,
    pub triggers: Vec<PropertyTrigger>,
    pub fs_actions: Vec<FsAction>,
    pub unknown_options: usize,
    pub unknown_commands: usize,
    pub warnings: Vec<String>,
}

impl InitRc {
    /// Merges several parsed files. The first definition of a service name
    /// wins; later ones are reported and dropped.
    pub fn merge(parts: impl IntoIterator<Item = InitRc>) -> InitRc {
        let mut out = InitRc::default();
        let mut names = BTreeSet::new();
        for part in parts {
            for svc in part.services {
                if names.insert(svc.name.clone()) {
                    out.services.push(svc);
                } else {
                    let msg = format!("{}: duplicate service {} ignored", svc.origin, svc.name);
                    warn!("{msg}");
                    out.warnings.push(msg);
                }
            }
            out.triggers.extend(part.triggers);
            out.fs_actions.extend(part.fs_actions);
            out.unknown_options += part.unknown_options;
            out.unknown_commands += part.unknown_commands;
            out.warnings.extend(part.warnings);
        }
        out.link_triggers();
        out
    }

    /// Copies each property trigger onto the service it names. Returns the
    /// dangling ones.
    pub fn link_triggers(&mut self) -> Vec<PropertyTrigger> {
        let mut dangling = Vec::new();
        for svc in &mut self.services {
            svc.triggers.clear();
        }
        for t in &self.triggers {
            match self.services.iter_mut().find(|s| s.name == t.service) {
                Some(svc) => svc.triggers.push(t.clone()),
                None => dangling.push(t.clone()),
            }
        }
        for t in &dangling {
            let msg = format!("property trigger {}={} targets unknown service {}", t.property, t.value, t.service);
            warn!("{msg}");
            self.warnings.push(msg);
        }
        dangling
    }

    pub fn service(&self, name: &str) -> Option<&ServiceDefinition> {
        self.services.iter().find(|s| s.name == name)
    }
}

const KNOWN_SERVICE_OPTIONS: &[&str] = &[
    "capabilities",
    "console",
    "critical",
    "enter_namespace",
    "file",
    "interface",
    "ioprio",
    "keycodes",
    "memcg.limit_in_bytes",
    "memcg.limit_percent",
    "memcg.limit_property",
    "memcg.soft_limit_in_bytes",
    "memcg.swappiness",
    "namespace",
    "oom_score_adjust",
    "onrestart",
    "override",
    "priority",
    "reboot_on_failure",
    "restart_period",
    "rlimit",
    "setenv",
    "shutdown",
    "sigstop",
    "task_profiles",
    "timeout_period",
    "updatable",
    "writepid",
];

const KNOWN_COMMANDS: &[&str] = &[
    "bootchart",
    "class_reset",
    "class_restart",
    "class_start",
    "class_stop",
    "copy",
    "domainname",
    "enable",
    "exec",
    "exec_background",
    "exec_start",
    "export",
    "hostname",
    "ifup",
    "insmod",
    "installkey",
    "load_persist_props",
    "load_system_props",
    "loglevel",
    "mark_post_data",
    "mount",
    "mount_all",
    "rm",
    "rmdir",
    "setprop",
    "setrlimit",
    "swapon_all",
    "symlink",
    "sysclktz",
    "trigger",
    "umount",
    "umount_all",
    "verity_update_state",
    "wait",
    "wait_for_prop",
    "write",
    "readahead",
    "setkey",
    "start",
    "stop",
    "restart",
    "mkdir",
    "chmod",
    "chown",
    "restorecon",
    "restorecon_recursive",
];

enum Section {
    None,
    Service(usize),
    On(Vec<(String, String)>),
}

/// Splits a logical line into words, honouring double quotes.
fn split_words(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_quotes = false;
    let mut has_word = false;
    for c in line.chars() {
        match c {
            '"' => {
                in_quotes = !in_quotes;
                has_word = true;
            }
            c if c.is_whitespace() && !in_quotes => {
                if has_word {
                    out.push(std::mem::take(&mut cur));
                    has_word = false;
                }
            }
            c => {
                cur.push(c);
                has_word = true;
            }
        }
    }
    if has_word {
        out.push(cur);
    }
    out
}

/// Joins `\`-continued lines and strips comments. Yields (first line number,
/// words).
fn logical_lines(text: &str) -> Vec<(usize, Vec<String>)> {
    let mut out = Vec::new();
    let mut buf = String::new();
    let mut start = 0;
    for (idx, raw) in text.lines().enumerate() {
        if buf.is_empty() {
            start = idx + 1;
        }
        let trimmed = raw.trim();
        if buf.is_empty() && trimmed.starts_with('#') {
            continue;
        }
        if let Some(stripped) = trimmed.strip_suffix('\\') {
            buf.push_str(stripped);
            buf.push(' ');
            continue;
        }
        buf.push_str(trimmed);
        let words = split_words(&buf);
        buf.clear();
        if !words.is_empty() {
            out.push((start, words));
        }
    }
    if !buf.is_empty() {
        let words = split_words(&buf);
        if !words.is_empty() {
            out.push((start, words));
        }
    }
    out
}

fn parse_mode(s: &str) -> Option<u16> {
    u16::from_str_radix(s, 8).ok().filter(|m| *m <= 0o7777)
}

/// Property conditions in an `on` trigger expression.
fn property_conditions(words: &[String]) -> Vec<(String, String)> {
    words
        .iter()
        .filter_map(|w| w.strip_prefix("property:"))
        .filter_map(|cond| {
            let (name, value) = cond.split_once('=')?;
            Some((name.to_string(), value.to_string()))
        })
        .collect()
}

/// Parses one RC file.
pub fn parse_initrc(text: &str, origin: &str) -> InitRc {
    let mut rc = InitRc::default();
    let mut section = Section::None;
    let mut skip_service = false;

    for (line, words) in logical_lines(text) {
        let here = Origin { file: origin.to_string(), line };
        let kw = words[0].as_str();
        match kw {
            "service" => {
                skip_service = false;
                if words.len() < 3 || !words[2].starts_with('/') {
                    let msg = format!("{here}: malformed service statement");
                    warn!("{msg}");
                    rc.warnings.push(msg);
                    skip_service = true;
                    section = Section::None;
                    continue;
                }
                let mut svc = ServiceDefinition::new(&words[1], &words[2]);
                svc.args = words[3..].to_vec();
                svc.origin = here;
                rc.services.push(svc);
                section = Section::Service(rc.services.len() - 1);
                continue;
            }
            "on" => {
                skip_service = false;
                section = Section::On(property_conditions(&words[1..]));
                continue;
            }
            "import" => {
                skip_service = false;
                section = Section::None;
                continue;
            }
            _ => {}
        }
        match &section {
            Section::Service(idx) => {
                let svc = &mut rc.services[*idx];
                service_option(svc, &words, &here, &mut rc.unknown_options, &mut rc.warnings);
            }
            Section::On(conds) => {
                let conds = conds.clone();
                command(&mut rc, &conds, &words, here);
            }
            Section::None => {
                if !skip_service {
                    rc.unknown_commands += 1;
                }
            }
        }
    }
    rc
}

fn service_option(
    svc: &mut ServiceDefinition,
    words: &[String],
    here: &Origin,
    unknown: &mut usize,
    warnings: &mut Vec<String>,
) {
    let args = &words[1..];
    match words[0].as_str() {
        "socket" => match parse_socket(args) {
            Some(opt) => {
                if svc.sockets.iter().any(|s| s.name == opt.name) {
                    warnings.push(format!("{here}: duplicate socket {} in service {}", opt.name, svc.name));
                } else {
                    svc.sockets.push(opt);
                }
            }
            None => warnings.push(format!("{here}: malformed socket option")),
        },
        "user" => svc.user = args.first().cloned(),
        "group" => {
            svc.group = args.first().cloned();
            svc.supplementary_groups = args.iter().skip(1).cloned().collect();
        }
        "seclabel" => svc.seclabel = args.first().cloned(),
        "oneshot" => svc.oneshot = true,
        "disabled" => svc.disabled = true,
        "class" => {
            if !args.is_empty() {
                svc.classes = args.to_vec();
            }
        }
        opt if KNOWN_SERVICE_OPTIONS.contains(&opt) => {}
        _ => *unknown += 1,
    }
}

fn parse_socket(args: &[String]) -> Option<SocketOption> {
    if args.len() < 3 {
        return None;
    }
    let name = args[0].clone();
    if name.is_empty() {
        return None;
    }
    let sock_type = SocketType::parse(&args[1])?;
    let perm = parse_mode(&args[2])?;
    Some(SocketOption {
        name,
        sock_type,
        perm,
        user: args.get(3).cloned().unwrap_or_else(|| "root".into()),
        group: args.get(4).cloned().unwrap_or_else(|| "root".into()),
        seclabel: args.get(5).cloned(),
    })
}

fn command(rc: &mut InitRc, conds: &[(String, String)], words: &[String], here: Origin) {
    let args = &words[1..];
    let action = match words[0].as_str() {
        "start" => Some(TriggerAction::Start),
        "stop" => Some(TriggerAction::Stop),
        "restart" => Some(TriggerAction::Restart),
        _ => None,
    };
    if let Some(action) = action {
        if let Some(service) = args.first() {
            for (property, value) in conds {
                rc.triggers.push(PropertyTrigger {
                    property: property.clone(),
                    value: value.clone(),
                    action,
                    service: service.clone(),
                });
            }
        }
        return;
    }
    let fs = match (words[0].as_str(), args) {
        ("mkdir", [path, rest @ ..]) => Some(FsCommand::Mkdir {
            path: path.clone(),
            mode: rest.first().and_then(|m| parse_mode(m)),
            owner: rest.get(1).cloned(),
            group: rest.get(2).cloned(),
        }),
        ("chmod", [mode, path, ..]) => parse_mode(mode).map(|mode| FsCommand::Chmod { mode, path: path.clone() }),
        ("chown", [owner, group, path, ..]) => {
            Some(FsCommand::Chown { owner: owner.clone(), group: Some(group.clone()), path: path.clone() })
        }
        ("chown", [owner, path]) => Some(FsCommand::Chown { owner: owner.clone(), group: None, path: path.clone() }),
        ("restorecon", paths) | ("restorecon_recursive", paths) => {
            let recursive = words[0] == "restorecon_recursive" || paths.iter().any(|p| p == "--recursive");
            for p in paths.iter().filter(|p| p.starts_with('/')) {
                rc.fs_actions.push(FsAction {
                    command: FsCommand::Restorecon { path: p.clone(), recursive },
                    origin: here.clone(),
                });
            }
            return;
        }
        (cmd, _) if KNOWN_COMMANDS.contains(&cmd) => None,
        _ => {
            rc.unknown_commands += 1;
            None
        }
    };
    if let Some(command) = fs {
        rc.fs_actions.push(FsAction { command, origin: here });
    }
}
