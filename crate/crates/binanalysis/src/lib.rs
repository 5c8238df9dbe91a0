//! Recovery of Unix domain socket addresses and peer-credential checks from
//! Android daemon ELF binaries (aarch64 and x86_64).

pub mod apis;
pub mod cfg;
pub mod elf;
pub mod engine;
pub mod extract;
pub mod ir;
pub mod lift_a64;
pub mod lift_x64;

use serde::Serialize;

pub use apis::BindApiConfig;
pub use cfg::{build_cfg, find_callsites, Callee, Callsite, Cfg};
pub use elf::{load_elf, Arch, BinError, BinaryImage};
pub use extract::analyze_binary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NamespaceHint {
    Abstract,
    Filesystem,
    ReservedEnv,
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    Exact,
    Partial,
    Symbolic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExtractedBind {
    pub callsite: u64,
    /// Enclosing function of the callsite.
    pub function: u64,
    pub address_bytes: Vec<u8>,
    pub namespace_hint: NamespaceHint,
    pub api: String,
    pub confidence: Confidence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CredModKind {
    Umask,
    Seteuid,
    Setegid,
    Chmod,
    Fchmod,
    Chown,
    Fchown,
}

impl CredModKind {
    pub fn from_symbol(s: &str) -> Option<Self> {
        Some(match s {
            "umask" => CredModKind::Umask,
            "seteuid" => CredModKind::Seteuid,
            "setegid" => CredModKind::Setegid,
            "chmod" => CredModKind::Chmod,
            "fchmod" => CredModKind::Fchmod,
            "chown" => CredModKind::Chown,
            "fchown" => CredModKind::Fchown,
            _ => return None,
        })
    }

    pub fn before_bind(self) -> bool {
        matches!(self, CredModKind::Umask | CredModKind::Seteuid | CredModKind::Setegid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CredArg {
    Const(u64),
    Symbolic,
}

impl CredArg {
    pub fn value(self) -> Option<u64> {
        match self {
            CredArg::Const(v) => Some(v),
            CredArg::Symbolic => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    BeforeBind,
    AfterBind,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct CredModCall {
    pub kind: CredModKind,
    /// Mode for umask/chmod/fchmod, id for seteuid/setegid, (uid, gid) for the chown pair.
    pub args: Vec<CredArg>,
    pub position: Position,
    pub callsite: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Cred {
    Pid,
    Uid,
    Gid,
}

impl Cred {
    pub fn from_field(f: u8) -> Self {
        match f {
            0 => Cred::Pid,
            1 => Cred::Uid,
            _ => Cred::Gid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UsageKind {
    Comparison,
    FunctionArg,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Usage {
    pub cred: Cred,
    pub kind: UsageKind,
    /// Constant operand of a comparison; `None` when not a comparison or unresolved.
    pub comparand: Option<u64>,
    pub callee: Option<Callee>,
    /// Callee reads a process name from `/proc`.
    pub name_lookup: bool,
    pub at: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PeerCredCheck {
    pub callsite: u64,
    pub creds_used: Vec<Cred>,
    pub usages: Vec<Usage>,
}

/// Ordered by the protection offered: `None < Spoofable < Weak < Secure`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStrength {
    None,
    Spoofable,
    Weak,
    Secure,
}

impl CheckStrength {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckStrength::None => "none",
            CheckStrength::Spoofable => "spoofable",
            CheckStrength::Weak => "weak",
            CheckStrength::Secure => "secure",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BindFinding {
    pub bind: ExtractedBind,
    pub cred_mods: Vec<CredModCall>,
    /// Close of the bound descriptor inside a loop that rebinds it.
    pub close_rebind: bool,
    /// Exact bytes passed the def-chain replay.
    pub replayed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SkipReason {
    SkippedStatic,
    MalformedElf,
    UnsupportedArch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Skip {
    pub reason: SkipReason,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct BinaryAnalysis {
    pub arch: Arch,
    pub binds: Vec<BindFinding>,
    pub peer_checks: Vec<PeerCredCheck>,
    pub functions: usize,
    pub unresolved_calls: usize,
    pub undecodable: usize,
    /// getsockopt calls whose optname was not a constant.
    pub nonconst_optname: usize,
    /// Analysis hit a budget and may have lost precision.
    pub incomplete: bool,
}

impl BinaryAnalysis {
    pub fn auth_strength(&self) -> CheckStrength {
        self.peer_checks.iter().map(extract::classify_check_strength).max().unwrap_or(CheckStrength::None)
    }
}
