//! Materialises init-created files: runs the permission-relevant init
//! commands and creates `/dev/socket/<name>` for every socket option of an
//! enabled service.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::firmware::{normalize_path, FileKind, FirmwareImage, FsEntry};
use crate::initrc::{FsCommand, InitRc, Origin, PropertyTrigger, ServiceDefinition, SocketType, TriggerAction};

pub const SOCKET_DIR: &str = "/dev/socket";

/// Android ids from `android_filesystem_config.h`.
pub const AID_TABLE: &[(&str, u32)] = &[
    ("root", 0),
    ("system", 1000),
    ("radio", 1001),
    ("bluetooth", 1002),
    ("graphics", 1003),
    ("input", 1004),
    ("audio", 1005),
    ("camera", 1006),
    ("log", 1007),
    ("compass", 1008),
    ("mount", 1009),
    ("wifi", 1010),
    ("adb", 1011),
    ("install", 1012),
    ("media", 1013),
    ("dhcp", 1014),
    ("sdcard_rw", 1015),
    ("vpn", 1016),
    ("keystore", 1017),
    ("usb", 1018),
    ("drm", 1019),
    ("mdnsr", 1020),
    ("gps", 1021),
    ("media_rw", 1023),
    ("mtp", 1024),
    ("drmrpc", 1026),
    ("nfc", 1027),
    ("sdcard_r", 1028),
    ("clat", 1029),
    ("loop_radio", 1030),
    ("mediadrm", 1031),
    ("package_info", 1032),
    ("sdcard_pics", 1033),
    ("sdcard_av", 1034),
    ("sdcard_all", 1035),
    ("logd", 1036),
    ("shared_relro", 1037),
    ("dbus", 1038),
    ("tlsdate", 1039),
    ("mediaex", 1040),
    ("audioserver", 1041),
    ("metrics_coll", 1042),
    ("metricsd", 1043),
    ("webserv", 1044),
    ("debuggerd", 1045),
    ("mediacodec", 1046),
    ("cameraserver", 1047),
    ("firewall", 1048),
    ("trunks", 1049),
    ("nvram", 1050),
    ("dns", 1051),
    ("dns_tether", 1052),
    ("webview_zygote", 1053),
    ("vehicle_network", 1054),
    ("media_audio", 1055),
    ("media_video", 1056),
    ("media_image", 1057),
    ("tombstoned", 1058),
    ("media_obb", 1059),
    ("ese", 1060),
    ("ota_update", 1061),
    ("automotive_evs", 1062),
    ("lowpan", 1063),
    ("hsm", 1064),
    ("reserved_disk", 1065),
    ("statsd", 1066),
    ("incidentd", 1067),
    ("secure_element", 1068),
    ("lmkd", 1069),
    ("llkd", 1070),
    ("iorapd", 1071),
    ("gpu_service", 1072),
    ("network_stack", 1073),
    ("gsid", 1074),
    ("fsverity_cert", 1075),
    ("credstore", 1076),
    ("external_storage", 1077),
    ("shell", 2000),
    ("cache", 2001),
    ("diag", 2002),
    ("net_bt_admin", 3001),
    ("net_bt", 3002),
    ("inet", 3003),
    ("net_raw", 3004),
    ("net_admin", 3005),
    ("net_bw_stats", 3006),
    ("net_bw_acct", 3007),
    ("readproc", 3009),
    ("wakelock", 3010),
    ("uhid", 3011),
    ("everybody", 9997),
    ("misc", 9998),
    ("nobody", 9999),
    ("app", 10000),
];

pub fn aid(name: &str) -> Option<u32> {
    AID_TABLE.iter().find(|(n, _)| *n == name).map(|(_, id)| *id)
}

/// Resolves a user/group name. Image overrides win over the static table;
/// numeric names are taken literally. Unknown names map to root.
pub fn resolve_id(name: &str, overrides: &BTreeMap<String, u32>) -> Result<u32, u32> {
    if let Ok(n) = name.parse::<u32>() {
        return Ok(n);
    }
    if let Some(id) = overrides.get(name) {
        return Ok(*id);
    }
    aid(name).ok_or(0)
}

/// Socket promised by an init service definition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReservedSocket {
    pub service: String,
    pub name: String,
    pub path: String,
    pub sock_type: SocketType,
    pub perm: u16,
    pub user: String,
    pub group: String,
    pub seclabel: Option<String>,
    pub origin: Origin,
}

pub fn socket_path(name: &str) -> String {
    format!("{SOCKET_DIR}/{name}")
}

pub fn extract_reserved_sockets(service: &ServiceDefinition) -> Vec<ReservedSocket> {
    service
        .sockets
        .iter()
        .map(|s| ReservedSocket {
            service: service.name.clone(),
            name: s.name.clone(),
            path: socket_path(&s.name),
            sock_type: s.sock_type,
            perm: s.perm,
            user: s.user.clone(),
            group: s.group.clone(),
            seclabel: s.seclabel.clone(),
            origin: service.origin.clone(),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct BootResult {
    pub image: FirmwareImage,
    /// Sockets that could not be created because the path was taken.
    pub conflicts: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn simulate_boot(image: &FirmwareImage, rc: &InitRc) -> BootResult {
    let mut img = image.clone();
    let mut conflicts = Vec::new();
    let mut warnings = Vec::new();
    let id = |name: &str, what: &Origin, warnings: &mut Vec<String>| match resolve_id(name, &image.id_overrides) {
        Ok(v) => v,
        Err(v) => {
            warnings.push(format!("{what}: unknown user/group `{name}`, using {v}"));
            v
        }
    };

    for action in &rc.fs_actions {
        let o = &action.origin;
        match &action.command {
            FsCommand::Mkdir { path, mode, owner, group } => {
                let Some(p) = normalize_path(path) else {
                    warnings.push(format!("{o}: relative path `{path}`"));
                    continue;
                };
                let uid = owner.as_deref().map_or(0, |n| id(n, o, &mut warnings));
                let gid = group.as_deref().map_or(uid, |n| id(n, o, &mut warnings));
                let label = img.label_or_default(&p, FileKind::Directory);
                img.put(FsEntry::new(&p, mode.unwrap_or(0o755), uid, gid, FileKind::Directory).with_label(label));
            }
            FsCommand::Chmod { mode, path } => match img.entry(path).cloned() {
                Some(mut e) => {
                    e.mode = mode & 0o7777;
                    img.put(e);
                }
                None => warnings.push(format!("{o}: chmod of missing `{path}`")),
            },
            FsCommand::Chown { owner, group, path } => match img.entry(path).cloned() {
                Some(mut e) => {
                    e.uid = id(owner, o, &mut warnings);
                    if let Some(g) = group {
                        e.gid = id(g, o, &mut warnings);
                    }
                    img.put(e);
                }
                None => warnings.push(format!("{o}: chown of missing `{path}`")),
            },
            FsCommand::Restorecon { path, recursive } => img.relabel(path, *recursive),
        }
    }

    if img.entry(SOCKET_DIR).is_none() {
        let label = img.label_or_default(SOCKET_DIR, FileKind::Directory);
        img.put(FsEntry::new(SOCKET_DIR, 0o755, 0, 0, FileKind::Directory).with_label(label));
    }

    for svc in rc.services.iter().filter(|s| s.starts_at_boot()) {
        for s in extract_reserved_sockets(svc) {
            let uid = id(&s.user, &s.origin, &mut warnings);
            let gid = id(&s.group, &s.origin, &mut warnings);
            let label = s.seclabel.clone().unwrap_or_else(|| img.label_or_default(&s.path, FileKind::SocketFile));
            let entry = FsEntry::new(&s.path, s.perm & 0o7777, uid, gid, FileKind::SocketFile).with_label(label);
            match img.entry(&s.path) {
                Some(existing) if *existing == entry => {}
                Some(_) => conflicts.push(format!(
                    "{}: socket `{}` of service {} conflicts with an existing entry; keeping the first",
                    s.origin, s.path, s.service
                )),
                None => img.put(entry),
            }
        }
    }
    BootResult { image: img, conflicts, warnings }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RestartRisk {
    None,
    PropertyRestart,
}

pub fn restart_risk(service: &ServiceDefinition, triggers: &[PropertyTrigger]) -> RestartRisk {
    let mine = || triggers.iter().filter(|t| t.service == service.name);
    let stop = mine().any(|t| matches!(t.action, TriggerAction::Stop | TriggerAction::Restart));
    let late_start = !service.starts_at_boot() && mine().any(|t| t.action == TriggerAction::Start);
    if stop || late_start {
        RestartRisk::PropertyRestart
    } else {
        RestartRisk::None
    }
}
