//! In-memory model of an extracted firmware tree.
//!
//! The manifest is the only source of DAC and MAC metadata; host filesystem
//! permission bits are never consulted. The image is immutable once built:
//! [`FirmwareImage::insert_entry`] returns a derived image.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label assigned when no file_contexts rule matches a path.
pub const DEFAULT_LABEL: &str = "u:object_r:unlabeled:s0";

const ELF_MAGIC: &[u8; 4] = b"\x7fELF";

const POLICY_CANDIDATES: &[&str] = &[
    "policy.conf",
    "sepolicy.conf",
    "etc/selinux/policy.conf",
    "system/etc/selinux/policy.conf",
    "vendor/etc/selinux/policy.conf",
];

const FILE_CONTEXTS_CANDIDATES: &[&str] = &[
    "file_contexts",
    "plat_file_contexts",
    "system/etc/selinux/plat_file_contexts",
    "vendor/etc/selinux/vendor_file_contexts",
    "vendor/etc/selinux/nonplat_file_contexts",
    "odm/etc/selinux/odm_file_contexts",
];

const RC_DIRS: &[&str] = &["system/etc/init", "vendor/etc/init", "odm/etc/init", "product/etc/init"];

#[derive(Debug, Error)]
pub enum FirmwareError {
    #[error("malformed manifest at line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error("malformed file_contexts at line {line}: {reason}")]
    MalformedFileContexts { line: usize, reason: String },
    #[error("no SELinux AV-rule document found under {0}")]
    MissingPolicy(PathBuf),
    #[error("path already present in image: {0}")]
    DuplicatePath(String),
    #[error("no file_contexts rule matches {0}")]
    NoMatchingContext(String),
    #[error("path is not absolute: {0}")]
    RelativePath(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Non-fatal conditions found while loading an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum LoadWarning {
    MissingInitRc,
    UnresolvedImport { from: String, target: String },
    MissingFileContexts,
}

impl fmt::Display for LoadWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoadWarning::MissingInitRc => write!(f, "no init RC files found"),
            LoadWarning::UnresolvedImport { from, target } => {
                write!(f, "{from}: cannot resolve import {target}")
            }
            LoadWarning::MissingFileContexts => write!(f, "no file_contexts found"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Regular,
    Directory,
    Symlink,
    SocketFile,
    Device,
    Other,
}

impl FileKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FileKind::Regular => "regular",
            FileKind::Directory => "directory",
            FileKind::Symlink => "symlink",
            FileKind::SocketFile => "socket_file",
            FileKind::Device => "device",
            FileKind::Other => "other",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "regular" => FileKind::Regular,
            "directory" => FileKind::Directory,
            "symlink" => FileKind::Symlink,
            "socket_file" => FileKind::SocketFile,
            "device" => FileKind::Device,
            "other" => FileKind::Other,
            _ => return None,
        })
    }

    /// Maps a file_contexts type specifier (`-s`, `-d`, ...) to a kind.
    fn from_spec(spec: &str) -> Option<Option<Self>> {
        Some(match spec {
            "--" => Some(FileKind::Regular),
            "-d" => Some(FileKind::Directory),
            "-l" => Some(FileKind::Symlink),
            "-s" => Some(FileKind::SocketFile),
            "-c" | "-b" => Some(FileKind::Device),
            "-p" => Some(FileKind::Other),
            _ => return None,
        })
    }
}

/// One filesystem object with its DAC bits, ownership and SELinux label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FsEntry {
    pub path: String,
    pub mode: u16,
    pub uid: u32,
    pub gid: u32,
    /// `None` means the label is not yet assigned.
    pub selabel: Option<String>,
    pub kind: FileKind,
}

impl FsEntry {
    pub fn new(path: &str, mode: u16, uid: u32, gid: u32, kind: FileKind) -> Self {
        FsEntry {
            path: normalize_path(path).unwrap_or_else(|| path.to_string()),
            mode: mode & 0o7777,
            uid,
            gid,
            selabel: None,
            kind,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.selabel = Some(label.into());
        self
    }

    /// SELinux type component of the label, if labeled.
    pub fn selinux_type(&self) -> Option<&str> {
        self.selabel.as_deref().and_then(context_type)
    }
}

/// Returns the type field of a `user:role:type[:level]` context.
pub fn context_type(context: &str) -> Option<&str> {
    let mut parts = context.split(':');
    let _user = parts.next()?;
    let _role = parts.next()?;
    parts.next().filter(|t| !t.is_empty())
}

/// Normalizes an absolute slash-separated path. Returns `None` for relative
/// input.
pub fn normalize_path(path: &str) -> Option<String> {
    if !path.starts_with('/') {
        return None;
    }
    let mut parts: Vec<&str> = Vec::new();
    for comp in path.split('/') {
        match comp {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            c => parts.push(c),
        }
    }
    Some(format!("/{}", parts.join("/")))
}

/// Parent directories of an absolute path, nearest first, excluding `/`.
pub fn ancestors(path: &str) -> impl Iterator<Item = &str> {
    let mut cur = path;
    std::iter::from_fn(move || {
        let idx = cur.rfind('/')?;
        if idx == 0 {
            return None;
        }
        cur = &cur[..idx];
        Some(cur)
    })
}

#[derive(Clone, Debug)]
struct ContextRule {
    pattern: String,
    regex: Regex,
    file_kind: Option<FileKind>,
    context: String,
    prefix_len: usize,
}

impl PartialEq for ContextRule {
    fn eq(&self, other: &Self) -> bool {
        self.pattern == other.pattern && self.file_kind == other.file_kind && self.context == other.context
    }
}

/// Ordered file_contexts label rules.
///
/// Patterns are anchored regular expressions. When several rules match, the
/// one with the longest literal prefix wins and ties go to the rule that
/// appears last.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FileContexts {
    rules: Vec<ContextRule>,
}

impl FileContexts {
    pub fn parse(text: &str) -> Result<Self, FirmwareError> {
        let mut fc = FileContexts::default();
        fc.extend_from(text)?;
        Ok(fc)
    }

    pub fn extend_from(&mut self, text: &str) -> Result<(), FirmwareError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let (pattern, kind, context) = match fields.as_slice() {
                [p, c] => (*p, None, *c),
                [p, spec, c] => match FileKind::from_spec(spec) {
                    Some(kind) => (*p, kind, *c),
                    None => {
                        return Err(FirmwareError::MalformedFileContexts {
                            line: idx + 1,
                            reason: format!("unknown file type specifier {spec}"),
                        })
                    }
                },
                _ => {
                    return Err(FirmwareError::MalformedFileContexts {
                        line: idx + 1,
                        reason: "expected `pattern [type] context`".into(),
                    })
                }
            };
            self.push(pattern, kind, context)
                .map_err(|reason| FirmwareError::MalformedFileContexts { line: idx + 1, reason })?;
        }
        Ok(())
    }

    fn push(&mut self, pattern: &str, kind: Option<FileKind>, context: &str) -> Result<(), String> {
        let regex = Regex::new(&format!("^(?:{pattern})$")).map_err(|e| e.to_string())?;
        self.rules.push(ContextRule {
            pattern: pattern.to_string(),
            regex,
            file_kind: kind,
            context: context.to_string(),
            prefix_len: literal_prefix_len(pattern),
        });
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    /// Best-matching context for `path`. Typed rules only apply when `kind`
    /// is known and equal.
    pub fn lookup(&self, path: &str, kind: Option<FileKind>) -> Option<&str> {
        let mut best: Option<&ContextRule> = None;
        for rule in &self.rules {
            if let Some(k) = rule.file_kind {
                if Some(k) != kind {
                    continue;
                }
            }
            if !rule.regex.is_match(path) {
                continue;
            }
            if best.is_none_or(|b| rule.prefix_len >= b.prefix_len) {
                best = Some(rule);
            }
        }
        best.map(|r| r.context.as_str())
    }
}

/// Number of leading characters of a regex that match literally.
fn literal_prefix_len(pattern: &str) -> usize {
    let mut len = 0;
    let mut chars = pattern.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next() {
                Some(n) if n.is_ascii_punctuation() => len += 1,
                _ => break,
            },
            '.' | '^' | '$' | '?' | '*' | '+' | '|' | '[' | '(' | '{' => break,
            _ => {
                // a quantifier applying to this char makes it optional
                if matches!(chars.peek(), Some('?' | '*' | '{')) {
                    break;
                }
                len += 1;
            }
        }
    }
    len
}

/// Immutable model of one extracted firmware image.
#[derive(Clone, Debug, PartialEq)]
pub struct FirmwareImage {
    entries: Arc<BTreeMap<String, FsEntry>>,
    pub file_contexts: FileContexts,
    pub policy_source: String,
    /// (image path, text), sorted by path.
    pub initrc_sources: Vec<(String, String)>,
    pub binaries: BTreeMap<String, Arc<[u8]>>,
    /// Extra name→id mappings from passwd/group files shipped in the image.
    pub id_overrides: BTreeMap<String, u32>,
    pub warnings: Vec<LoadWarning>,
}

impl FirmwareImage {
    /// An image with no entries, built from in-memory sources.
    pub fn from_parts(file_contexts: FileContexts, policy_source: impl Into<String>) -> Self {
        FirmwareImage {
            entries: Arc::new(BTreeMap::new()),
            file_contexts,
            policy_source: policy_source.into(),
            initrc_sources: Vec::new(),
            binaries: BTreeMap::new(),
            id_overrides: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &FsEntry> {
        self.entries.values()
    }

    pub fn entry(&self, path: &str) -> Option<&FsEntry> {
        self.entries.get(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Context of the best-matching file_contexts rule for `path`.
    pub fn resolve_label(&self, path: &str) -> Result<String, FirmwareError> {
        let kind = self.entries.get(path).map(|e| e.kind);
        self.resolve_label_for(path, kind)
    }

    fn resolve_label_for(&self, path: &str, kind: Option<FileKind>) -> Result<String, FirmwareError> {
        self.file_contexts
            .lookup(path, kind)
            .map(str::to_string)
            .ok_or_else(|| FirmwareError::NoMatchingContext(path.to_string()))
    }

    /// Like [`resolve_label`](Self::resolve_label) but falls back to
    /// [`DEFAULT_LABEL`].
    pub fn label_or_default(&self, path: &str, kind: FileKind) -> String {
        self.resolve_label_for(path, Some(kind)).unwrap_or_else(|_| DEFAULT_LABEL.to_string())
    }

    /// Returns a derived image containing `entry`. Unset labels are resolved
    /// before the entry is committed.
    pub fn insert_entry(&self, entry: FsEntry, overwrite: bool) -> Result<FirmwareImage, FirmwareError> {
        let path = normalize_path(&entry.path).ok_or_else(|| FirmwareError::RelativePath(entry.path.clone()))?;
        if !overwrite && self.entries.contains_key(&path) {
            return Err(FirmwareError::DuplicatePath(path));
        }
        let mut entry = FsEntry { path: path.clone(), ..entry };
        entry.mode &= 0o7777;
        if entry.selabel.is_none() {
            entry.selabel = Some(self.label_or_default(&path, entry.kind));
        }
        let mut next = self.clone();
        Arc::make_mut(&mut next.entries).insert(path, entry);
        Ok(next)
    }

    /// In-place variant used by the boot simulator; callers own `self`.
    pub(crate) fn put(&mut self, entry: FsEntry) {
        Arc::make_mut(&mut self.entries).insert(entry.path.clone(), entry);
    }

    /// Re-resolves the label of `path` (and of everything below it when
    /// `recursive`).
    pub(crate) fn relabel(&mut self, path: &str, recursive: bool) {
        let prefix = format!("{}/", path.trim_end_matches('/'));
        let targets: Vec<(String, FileKind)> = self
            .entries
            .values()
            .filter(|e| e.path == path || (recursive && e.path.starts_with(&prefix)))
            .map(|e| (e.path.clone(), e.kind))
            .collect();
        for (p, kind) in targets {
            let label = self.label_or_default(&p, kind);
            if let Some(e) = Arc::make_mut(&mut self.entries).get_mut(&p) {
                e.selabel = Some(label);
            }
        }
    }
}

/// Parses manifest text. Each record is
/// `path<TAB>mode_octal<TAB>uid<TAB>gid<TAB>selabel<TAB>kind`.
pub fn parse_manifest(text: &str) -> Result<Vec<FsEntry>, FirmwareError> {
    Ok(parse_manifest_records(text)?.into_iter().map(|(_, e)| e).collect())
}

fn parse_manifest_records(text: &str) -> Result<Vec<(usize, FsEntry)>, FirmwareError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let bad = |reason: String| FirmwareError::MalformedManifest { line: line_no, reason };
        if raw.starts_with('#') || raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 tab-separated fields, found {}", fields.len())));
        }
        let path = normalize_path(fields[0]).ok_or_else(|| bad(format!("path {} is not absolute", fields[0])))?;
        let mode = u32::from_str_radix(fields[1], 8).map_err(|_| bad(format!("invalid octal mode {}", fields[1])))?;
        if mode > 0o7777 {
            return Err(bad(format!("mode {} out of range", fields[1])));
        }
        let uid = fields[2].parse::<u32>().map_err(|_| bad(format!("invalid uid {}", fields[2])))?;
        let gid = fields[3].parse::<u32>().map_err(|_| bad(format!("invalid gid {}", fields[3])))?;
        let selabel = match fields[4] {
            "-" => None,
            ctx if context_type(ctx).is_some() => Some(ctx.to_string()),
            ctx => return Err(bad(format!("invalid security context {ctx}"))),
        };
        let kind = FileKind::parse(fields[5]).ok_or_else(|| bad(format!("unknown kind {}", fields[5])))?;
        if !seen.insert(path.clone()) {
            return Err(bad(format!("duplicate path {path}")));
        }
        out.push((line_no, FsEntry { path, mode: mode as u16, uid, gid, selabel, kind }));
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String, FirmwareError> {
    fs::read_to_string(path).map_err(|source| FirmwareError::Io { path: path.to_path_buf(), source })
}

fn host_path(root: &Path, image_path: &str) -> PathBuf {
    root.join(image_path.trim_start_matches('/'))
}

/// Loads an extracted tree and its manifest into a [`FirmwareImage`].
pub fn load_image(root_dir: &Path, manifest: &Path) -> Result<FirmwareImage, FirmwareError> {
    let numbered = parse_manifest_records(&read_text(manifest)?)?;
    let mut warnings = Vec::new();
    for (line, rec) in &numbered {
        if rec.kind == FileKind::Regular && !host_path(root_dir, &rec.path).is_file() {
            return Err(FirmwareError::MalformedManifest {
                line: *line,
                reason: format!("{} is not present under {}", rec.path, root_dir.display()),
            });
        }
    }
    let records: Vec<FsEntry> = numbered.into_iter().map(|(_, e)| e).collect();

    let policy_path = POLICY_CANDIDATES
        .iter()
        .map(|c| root_dir.join(c))
        .find(|p| p.is_file())
        .ok_or_else(|| FirmwareError::MissingPolicy(root_dir.to_path_buf()))?;
    let policy_source = read_text(&policy_path)?;

    let mut file_contexts = FileContexts::default();
    let mut found_fc = false;
    for cand in FILE_CONTEXTS_CANDIDATES {
        let p = root_dir.join(cand);
        if p.is_file() {
            file_contexts.extend_from(&read_text(&p)?)?;
            found_fc = true;
        }
    }
    if !found_fc {
        warnings.push(LoadWarning::MissingFileContexts);
    }

    let initrc_sources = collect_rc_sources(root_dir, &mut warnings)?;
    if initrc_sources.is_empty() {
        warnings.push(LoadWarning::MissingInitRc);
    }

    let mut binaries = BTreeMap::new();
    for rec in records.iter().filter(|r| r.kind == FileKind::Regular) {
        let host = host_path(root_dir, &rec.path);
        let bytes = fs::read(&host).map_err(|source| FirmwareError::Io { path: host.clone(), source })?;
        if bytes.starts_with(ELF_MAGIC) {
            binaries.insert(rec.path.clone(), Arc::from(bytes));
        }
    }

    let id_overrides = load_id_overrides(root_dir)?;

    let mut image = FirmwareImage {
        entries: Arc::new(BTreeMap::new()),
        file_contexts,
        policy_source,
        initrc_sources,
        binaries,
        id_overrides,
        warnings,
    };
    let entries = Arc::make_mut(&mut image.entries);
    for rec in records {
        entries.insert(rec.path.clone(), rec);
    }
    let unlabeled: Vec<(String, FileKind)> =
        image.entries.values().filter(|e| e.selabel.is_none()).map(|e| (e.path.clone(), e.kind)).collect();
    for (path, kind) in unlabeled {
        let label = image.label_or_default(&path, kind);
        if let Some(e) = Arc::make_mut(&mut image.entries).get_mut(&path) {
            e.selabel = Some(label);
        }
    }
    Ok(image)
}

/// `init.rc` plus its imports, root `*.rc` files and the per-partition init
/// directories. Imports resolve relative to the image root; a visited set
/// breaks cycles.
fn collect_rc_sources(root: &Path, warnings: &mut Vec<LoadWarning>) -> Result<Vec<(String, String)>, FirmwareError> {
    let mut queue: Vec<String> = Vec::new();
    if let Ok(rd) = fs::read_dir(root) {
        let mut names: Vec<String> = rd
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.ends_with(".rc"))
            .collect();
        names.sort();
        queue.extend(names.into_iter().map(|n| format!("/{n}")));
    }
    for dir in RC_DIRS {
        if let Ok(rd) = fs::read_dir(root.join(dir)) {
            let mut names: Vec<String> = rd
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().into_string().ok())
                .filter(|n| n.ends_with(".rc"))
                .collect();
            names.sort();
            queue.extend(names.into_iter().map(|n| format!("/{dir}/{n}")));
        }
    }

    let mut visited = BTreeMap::new();
    while let Some(path) = queue.pop() {
        if visited.contains_key(&path) {
            continue;
        }
        let host = host_path(root, &path);
        let text = read_text(&host)?;
        for line in text.lines() {
            let mut words = line.split_whitespace();
            if words.next() != Some("import") {
                continue;
            }
            let Some(target) = words.next() else { continue };
            match normalize_path(target) {
                Some(t) if !target.contains("${") && host_path(root, &t).is_file() => queue.push(t),
                _ => warnings.push(LoadWarning::UnresolvedImport { from: path.clone(), target: target.to_string() }),
            }
        }
        visited.insert(path, text);
    }
    Ok(visited.into_iter().collect())
}

/// Reads `name:...:id` lines from passwd/group files shipped in the image.
fn load_id_overrides(root: &Path) -> Result<BTreeMap<String, u32>, FirmwareError> {
    let mut ids = BTreeMap::new();
    for cand in ["etc/passwd", "system/etc/passwd", "etc/group", "system/etc/group"] {
        let p = root.join(cand);
        if !p.is_file() {
            continue;
        }
        for line in read_text(&p)?.lines() {
            let fields: Vec<&str> = line.split(':').collect();
            if fields.len() >= 3 && !fields[0].is_empty() {
                if let Ok(id) = fields[2].parse::<u32>() {
                    ids.entry(fields[0].to_string()).or_insert(id);
                }
            }
        }
    }
    Ok(ids)
}
