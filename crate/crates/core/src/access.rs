//! Namespace classification and MAC ∧ DAC accessibility verdicts for the
//! untrusted-app threat model.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;
use udsaudit_binary::{CheckStrength, PeerCredCheck};

use crate::dataflow::{ObjectCategory, ObjectNode};
use crate::firmware::{ancestors, FileKind, FirmwareImage, FsEntry};

pub const UNTRUSTED_APP: &str = "untrusted_app";
pub const APP_UID: u32 = 10123;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Namespace {
    Filesystem,
    Reserved,
    Abstract,
}

impl Namespace {
    pub fn as_str(self) -> &'static str {
        match self {
            Namespace::Filesystem => "FILESYSTEM",
            Namespace::Reserved => "RESERVED",
            Namespace::Abstract => "ABSTRACT",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Initrc,
    BinaryBind,
    BinaryGetenv,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AccessError {
    #[error("unknown permission `{0}`")]
    UnknownPermission(String),
    #[error("address {0:?} is neither abstract, reserved nor a path")]
    UnclassifiableAddress(String),
}

/// Install-time permissions an untrusted app can hold that map to
/// supplementary groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Permission {
    Internet,
    Bluetooth,
    BluetoothAdmin,
    ManageExternalStorage,
}

impl Permission {
    pub const ALL: [Permission; 4] =
        [Permission::Internet, Permission::Bluetooth, Permission::BluetoothAdmin, Permission::ManageExternalStorage];

    pub fn gid(self) -> u32 {
        match self {
            Permission::Internet => 3003,
            Permission::Bluetooth => 3002,
            Permission::BluetoothAdmin => 3001,
            Permission::ManageExternalStorage => 1077,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Permission::Internet => "INTERNET",
            Permission::Bluetooth => "BLUETOOTH",
            Permission::BluetoothAdmin => "BLUETOOTH_ADMIN",
            Permission::ManageExternalStorage => "MANAGE_EXTERNAL_STORAGE",
        }
    }
}

impl fmt::Display for Permission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Permission {
    type Err = AccessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bare = s.trim().trim_start_matches("android.permission.");
        Permission::ALL
            .into_iter()
            .find(|p| p.as_str() == bare)
            .ok_or_else(|| AccessError::UnknownPermission(s.to_string()))
    }
}

pub fn parse_permissions(list: &str) -> Result<BTreeSet<Permission>, AccessError> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CredentialSet {
    pub uid: u32,
    pub gid: u32,
    pub groups: BTreeSet<u32>,
}

pub fn threat_model_credentials(grants: &BTreeSet<Permission>) -> CredentialSet {
    app_credentials(APP_UID, grants)
}

pub fn app_credentials(uid: u32, grants: &BTreeSet<Permission>) -> CredentialSet {
    CredentialSet { uid, gid: uid, groups: grants.iter().map(|p| p.gid()).collect() }
}

/// Write access for `creds` under the owner/group/other procedure.
pub fn eval_dac(entry: &FsEntry, creds: &CredentialSet) -> bool {
    mode_allows(entry, creds, 0o2)
}

/// `bit` is one of 4 (r), 2 (w), 1 (x) and is checked in the class that
/// applies: owner, then group (primary or supplementary), then other.
pub fn mode_allows(entry: &FsEntry, creds: &CredentialSet, bit: u16) -> bool {
    let shift = if entry.uid == creds.uid {
        6
    } else if entry.gid == creds.gid || creds.groups.contains(&entry.gid) {
        3
    } else {
        0
    };
    (entry.mode >> shift) & bit != 0
}

/// DAC write on `entry` plus search permission on every parent directory
/// present in the image. Missing parents are assumed traversable.
pub fn eval_dac_path(image: &FirmwareImage, entry: &FsEntry, creds: &CredentialSet) -> (bool, Vec<String>) {
    let mut notes = Vec::new();
    for dir in ancestors(&entry.path) {
        match image.entry(dir) {
            Some(d) if d.kind == FileKind::Directory => {
                if !mode_allows(d, creds, 0o1) {
                    return (false, notes);
                }
            }
            Some(_) => {}
            None => notes.push(format!("{dir} not in manifest; assumed traversable")),
        }
    }
    (eval_dac(entry, creds), notes)
}

/// Namespace of a recovered address. Init-declared and environment-derived
/// names are RESERVED regardless of content.
pub fn classify_namespace(bytes: &[u8], provenance: Provenance, reserved_hint: bool) -> Result<Namespace, AccessError> {
    if provenance == Provenance::Initrc || provenance == Provenance::BinaryGetenv || reserved_hint {
        return Ok(Namespace::Reserved);
    }
    match bytes.first() {
        Some(0) => Ok(Namespace::Abstract),
        Some(b'/') => Ok(Namespace::Filesystem),
        _ => Err(AccessError::UnclassifiableAddress(escape(bytes))),
    }
}

/// Printable form: `@name` for abstract sockets, `\xNN` for non-printables.
pub fn display_address(bytes: &[u8], ns: Namespace) -> String {
    match ns {
        Namespace::Abstract => format!("@{}", escape(bytes.get(1..).unwrap_or_default())),
        _ => escape(bytes),
    }
}

fn escape(bytes: &[u8]) -> String {
    let mut s = String::new();
    for b in bytes {
        if b.is_ascii_graphic() || *b == b' ' {
            s.push(*b as char);
        } else {
            s.push_str(&format!("\\x{b:02x}"));
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SocketEndpoint {
    pub address: String,
    #[serde(skip)]
    pub raw: Vec<u8>,
    pub namespace: Namespace,
    pub owner_binary: String,
    pub owner_domain: String,
    pub file_entry: Option<FsEntry>,
    pub checks: Vec<PeerCredCheck>,
    pub provenance: Provenance,
    /// Strongest classification among `checks`.
    pub auth: CheckStrength,
    pub close_rebind: bool,
    pub property_restart: bool,
    /// A post-bind permission change had non-constant arguments.
    pub dac_indeterminate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DosRisk {
    None,
    CloseRebind,
    PropertyRestart,
    Both,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AccessVerdict {
    pub mac_ipc: bool,
    /// `None` for abstract sockets.
    pub mac_file: Option<bool>,
    /// `None` for abstract sockets and reserved names without a file.
    pub dac: Option<bool>,
    pub required_permissions: Vec<Permission>,
    pub accessible: bool,
    pub dos_risk: DosRisk,
    pub dac_indeterminate: bool,
    pub auth_summary: CheckStrength,
}

/// `(mac_ipc, mac_file)` against the set of objects the subject can write.
pub fn eval_mac(writable: &BTreeSet<ObjectNode>, endpoint: &SocketEndpoint) -> (bool, Option<bool>) {
    let ipc = writable.contains(&ObjectNode::new(endpoint.owner_domain.clone(), ObjectCategory::IpcSocket));
    let file = match endpoint.namespace {
        Namespace::Abstract => None,
        _ => Some(
            endpoint
                .file_entry
                .as_ref()
                .and_then(FsEntry::selinux_type)
                .is_some_and(|t| writable.contains(&ObjectNode::new(t, ObjectCategory::File))),
        ),
    };
    (ipc, file)
}

pub fn dos_risk(endpoint: &SocketEndpoint) -> DosRisk {
    if endpoint.namespace != Namespace::Abstract {
        return DosRisk::None;
    }
    match (endpoint.close_rebind, endpoint.property_restart) {
        (true, true) => DosRisk::Both,
        (true, false) => DosRisk::CloseRebind,
        (false, true) => DosRisk::PropertyRestart,
        (false, false) => DosRisk::None,
    }
}

/// Subsets of `grants`, smallest first, ties in lexicographic order.
pub fn grant_subsets(grants: &BTreeSet<Permission>) -> Vec<BTreeSet<Permission>> {
    let items: Vec<Permission> = grants.iter().copied().collect();
    let mut subsets: Vec<BTreeSet<Permission>> = (0u32..1 << items.len())
        .map(|mask| items.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, p)| *p).collect())
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.iter().cmp(b.iter())));
    subsets
}

/// Evaluates one endpoint. An app holding `grants` may request any subset
/// of them, so the endpoint counts as reachable when some subset passes;
/// `required_permissions` is the first passing subset of minimal size.
pub fn evaluate(
    endpoint: &SocketEndpoint,
    writable: &BTreeSet<ObjectNode>,
    image: &FirmwareImage,
    grants: &BTreeSet<Permission>,
) -> AccessVerdict {
    let (mac_ipc, mac_file) = eval_mac(writable, endpoint);
    let dac_under = |h: &BTreeSet<Permission>| -> Option<bool> {
        match endpoint.namespace {
            Namespace::Abstract => None,
            _ => endpoint.file_entry.as_ref().map(|e| eval_dac_path(image, e, &threat_model_credentials(h)).0),
        }
    };
    let passes = |h: &BTreeSet<Permission>| {
        mac_ipc
            && match endpoint.namespace {
                Namespace::Abstract => true,
                _ => mac_file == Some(true) && dac_under(h) == Some(true),
            }
    };
    let subsets = grant_subsets(grants);
    let first = subsets.iter().find(|h| passes(h));
    let dac = match endpoint.namespace {
        Namespace::Abstract => None,
        _ if endpoint.file_entry.is_none() => None,
        _ => Some(subsets.iter().any(|h| dac_under(h) == Some(true))),
    };
    AccessVerdict {
        mac_ipc,
        mac_file,
        dac,
        required_permissions: first.map(|h| h.iter().copied().collect()).unwrap_or_default(),
        accessible: first.is_some(),
        dos_risk: dos_risk(endpoint),
        dac_indeterminate: endpoint.dac_indeterminate,
        auth_summary: endpoint.auth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::firmware::FileContexts;

    fn creds(groups: &[u32]) -> CredentialSet {
        CredentialSet { uid: APP_UID, gid: APP_UID, groups: groups.iter().copied().collect() }
    }

    fn sock(mode: u16, uid: u32, gid: u32) -> FsEntry {
        FsEntry::new("/dev/socket/x", mode, uid, gid, FileKind::SocketFile).with_label("u:object_r:x_socket:s0")
    }

    fn endpoint(ns: Namespace, entry: Option<FsEntry>) -> SocketEndpoint {
        SocketEndpoint {
            address: "x".into(),
            raw: b"x".to_vec(),
            namespace: ns,
            owner_binary: "/system/bin/x".into(),
            owner_domain: "xd".into(),
            file_entry: entry,
            checks: vec![],
            provenance: Provenance::Initrc,
            auth: CheckStrength::None,
            close_rebind: false,
            property_restart: false,
            dac_indeterminate: false,
        }
    }

    fn writable(file: bool) -> BTreeSet<ObjectNode> {
        let mut s = BTreeSet::from([ObjectNode::new("xd", ObjectCategory::IpcSocket)]);
        if file {
            s.insert(ObjectNode::new("x_socket", ObjectCategory::File));
        }
        s
    }

    fn empty_image() -> FirmwareImage {
        FirmwareImage::from_parts(FileContexts::default(), "")
    }

    #[test]
    fn dac_examples() {
        assert!(eval_dac(&sock(0o666, 0, 0), &creds(&[])));
        assert!(eval_dac(&sock(0o660, 0, 3003), &creds(&[3003])));
        assert!(!eval_dac(&sock(0o660, 0, 3003), &creds(&[])));
        assert!(!eval_dac(&sock(0o600, 0, 0), &creds(&[])));
    }

    #[test]
    fn credentials_from_grants() {
        let all: BTreeSet<Permission> = Permission::ALL.into_iter().collect();
        assert_eq!(threat_model_credentials(&all).groups, BTreeSet::from([3001, 3002, 3003, 1077]));
        assert!(threat_model_credentials(&BTreeSet::new()).groups.is_empty());
        assert!(threat_model_credentials(&BTreeSet::from([Permission::Internet])).groups.contains(&3003));
        assert_eq!("CAMERA".parse::<Permission>(), Err(AccessError::UnknownPermission("CAMERA".into())));
        assert_eq!("android.permission.INTERNET".parse::<Permission>(), Ok(Permission::Internet));
    }

    #[test]
    fn namespaces_and_display() {
        assert_eq!(classify_namespace(b"\0fmhal_sock", Provenance::BinaryBind, false), Ok(Namespace::Abstract));
        assert_eq!(display_address(b"\0fmhal_sock", Namespace::Abstract), "@fmhal_sock");
        assert_eq!(classify_namespace(b"/dev/socket/nims", Provenance::BinaryBind, false), Ok(Namespace::Filesystem));
        assert_eq!(classify_namespace(b"cnd", Provenance::BinaryGetenv, false), Ok(Namespace::Reserved));
        assert!(classify_namespace(b"rel", Provenance::BinaryBind, false).is_err());
        assert_eq!(display_address(b"\0a\x01", Namespace::Abstract), "@a\\x01");
    }

    #[test]
    fn reserved_inet_socket_needs_internet() {
        let ep = endpoint(Namespace::Reserved, Some(sock(0o660, 0, 3003)));
        let all: BTreeSet<Permission> = Permission::ALL.into_iter().collect();
        let v = evaluate(&ep, &writable(true), &empty_image(), &all);
        assert!(v.accessible);
        assert_eq!(v.required_permissions, vec![Permission::Internet]);
        assert_eq!((v.mac_file, v.dac), (Some(true), Some(true)));
    }

    #[test]
    fn abstract_needs_nothing() {
        let ep = endpoint(Namespace::Abstract, None);
        let v = evaluate(&ep, &writable(false), &empty_image(), &BTreeSet::new());
        assert!(v.accessible);
        assert!(v.required_permissions.is_empty());
        assert_eq!((v.mac_file, v.dac), (None, None));
    }

    #[test]
    fn mac_ipc_denial_wins() {
        let ep = endpoint(Namespace::Reserved, Some(sock(0o666, 0, 0)));
        let v = evaluate(
            &ep,
            &BTreeSet::from([ObjectNode::new("x_socket", ObjectCategory::File)]),
            &empty_image(),
            &BTreeSet::new(),
        );
        assert!(!v.mac_ipc && !v.accessible);
    }

    #[test]
    fn closed_parent_directory_blocks() {
        let img = empty_image()
            .insert_entry(FsEntry::new("/dev/socket", 0o750, 0, 1000, FileKind::Directory), false)
            .unwrap();
        let (ok, _) = eval_dac_path(&img, &sock(0o666, 0, 0), &creds(&[]));
        assert!(!ok);
        let (ok, notes) = eval_dac_path(&empty_image(), &sock(0o666, 0, 0), &creds(&[]));
        assert!(ok);
        assert!(!notes.is_empty());
    }

    #[test]
    fn group_class_can_reduce_access() {
        // other may write, the inet group may not: holding INTERNET hurts
        let ep = endpoint(Namespace::Reserved, Some(sock(0o606, 0, 3003)));
        let v = evaluate(&ep, &writable(true), &empty_image(), &BTreeSet::from([Permission::Internet]));
        assert!(v.accessible);
        assert!(v.required_permissions.is_empty());
    }

    #[test]
    fn dos_only_for_abstract() {
        let mut ep = endpoint(Namespace::Abstract, None);
        ep.close_rebind = true;
        ep.property_restart = true;
        assert_eq!(dos_risk(&ep), DosRisk::Both);
        ep.namespace = Namespace::Reserved;
        assert_eq!(dos_risk(&ep), DosRisk::None);
    }
}
