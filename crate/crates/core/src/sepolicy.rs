//! Textual SELinux AV-rule parsing and subject→binary correlation.
//!
//! Grammar (statements end with `;`, `#` starts a comment):
//!
//! ```text
//! allow SRC TGT:CLASS PERM;
//! allow SRC TGT:CLASS { P1 P2 ... };
//! attribute NAME;
//! typeattribute TYPE ATTR;
//! type_transition SRC ENTRY:process TGT;
//! ```
//!
//! `SRC`, `TGT` and `CLASS` may also be brace sets; they expand into one
//! rule per combination. `type NAME, ATTR...;` declarations contribute
//! attribute membership. Everything else is counted and skipped.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::Serialize;
use thiserror::Error;

use crate::firmware::{context_type, FileKind, FirmwareImage};
use crate::initrc::ServiceDefinition;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("syntax error at line {line}: {reason}")]
    SyntaxError { line: usize, reason: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ParseMode {
    Strict,
    #[default]
    Lenient,
}

/// `allow source target:class { perms }` with a single class.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct AvRule {
    pub source: String,
    /// May be the literal `self`.
    pub target: String,
    pub class: String,
    pub perms: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct DomainTransition {
    pub source: String,
    pub entrypoint: String,
    pub target: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PolicyStats {
    pub allow_statements: usize,
    pub rules: usize,
    pub attributes: usize,
    pub transitions: usize,
    /// Recognized statement kinds that carry nothing we model
    /// (`neverallow`, `dontaudit`, non-process `type_transition`, ...).
    pub ignored: usize,
    pub unknown: usize,
    pub malformed: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PolicyDb {
    pub av_rules: Vec<AvRule>,
    /// Attribute name → member types. Declared attributes with no members map
    /// to an empty set.
    pub attributes: BTreeMap<String, BTreeSet<String>>,
    pub domain_transitions: Vec<DomainTransition>,
    pub stats: PolicyStats,
    pub warnings: Vec<String>,
}

impl PolicyDb {
    pub fn is_attribute(&self, name: &str) -> bool {
        self.attributes.contains_key(name)
    }

    /// Member types of an attribute, or the name itself for a plain type.
    pub fn expand(&self, name: &str) -> BTreeSet<String> {
        match self.attributes.get(name) {
            Some(members) => members.clone(),
            None => BTreeSet::from([name.to_string()]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Token {
    text: String,
    line: usize,
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let mut cur = String::new();
        let flush = |cur: &mut String, out: &mut Vec<Token>| {
            if !cur.is_empty() {
                out.push(Token { text: std::mem::take(cur), line: idx + 1 });
            }
        };
        for c in line.chars() {
            match c {
                '{' | '}' | ';' | ':' | ',' | '(' | ')' => {
                    flush(&mut cur, &mut out);
                    out.push(Token { text: c.to_string(), line: idx + 1 });
                }
                c if c.is_whitespace() => flush(&mut cur, &mut out),
                c => cur.push(c),
            }
        }
        flush(&mut cur, &mut out);
    }
    out
}

/// Statements that end at end-of-line (or a brace block) rather than `;`.
const LINE_STATEMENTS: &[&str] = &["class", "common", "sid", "genfscon", "portcon", "netifcon", "nodecon", "fscon"];

const BLOCK_STATEMENTS: &[&str] = &["if", "else", "optional", "require", "booleanif", "tunableif"];

const IGNORED_STATEMENTS: &[&str] = &[
    "auditallow",
    "dontaudit",
    "neverallow",
    "allowxperm",
    "auditallowxperm",
    "dontauditxperm",
    "neverallowxperm",
    "type_change",
    "type_member",
    "typealias",
    "role",
    "roleattribute",
    "role_transition",
    "user",
    "bool",
    "sensitivity",
    "category",
    "dominance",
    "level",
    "mlsconstrain",
    "constrain",
    "mlsvalidatetrans",
    "validatetrans",
    "fs_use_xattr",
    "fs_use_task",
    "fs_use_trans",
    "policycap",
    "permissive",
    "range_transition",
    "attribute_role",
    "expandattribute",
    "typebounds",
];

struct Parser<'a> {
    toks: &'a [Token],
    pos: usize,
    mode: ParseMode,
    db: PolicyDb,
}

/// Parses AV-rule text into a [`PolicyDb`].
pub fn parse_policy(text: &str, mode: ParseMode) -> Result<PolicyDb, PolicyError> {
    let toks = tokenize(text);
    let mut p = Parser { toks: &toks, pos: 0, mode, db: PolicyDb::default() };
    p.run()?;
    let mut db = p.db;
    db.stats.rules = db.av_rules.len();
    db.stats.attributes = db.attributes.len();
    db.stats.transitions = db.domain_transitions.len();
    Ok(db)
}

impl<'a> Parser<'a> {
    fn run(&mut self) -> Result<(), PolicyError> {
        while self.pos < self.toks.len() {
            let start = self.pos;
            let kw = self.toks[start].text.clone();
            let line = self.toks[start].line;
            if LINE_STATEMENTS.contains(&kw.as_str()) {
                self.skip_line_statement(line);
                self.db.stats.ignored += 1;
                continue;
            }
            if BLOCK_STATEMENTS.contains(&kw.as_str()) {
                self.skip_block();
                self.db.stats.unknown += 1;
                continue;
            }
            let Some(end) = self.statement_end() else {
                self.fail(line, "unterminated statement")?;
                self.pos = self.toks.len();
                break;
            };
            let stmt: Vec<&Token> = self.toks[start + 1..end].iter().collect();
            self.pos = end + 1;
            let res = match kw.as_str() {
                "allow" => self.allow(&stmt),
                "attribute" => self.attribute(&stmt),
                "typeattribute" => self.typeattribute(&stmt),
                "type" => self.type_decl(&stmt),
                "type_transition" => self.type_transition(&stmt),
                k if IGNORED_STATEMENTS.contains(&k) => {
                    self.db.stats.ignored += 1;
                    Ok(())
                }
                _ => {
                    self.db.stats.unknown += 1;
                    Ok(())
                }
            };
            if let Err(reason) = res {
                self.fail(line, &reason)?;
            }
        }
        Ok(())
    }

    fn fail(&mut self, line: usize, reason: &str) -> Result<(), PolicyError> {
        match self.mode {
            ParseMode::Strict => Err(PolicyError::SyntaxError { line, reason: reason.to_string() }),
            ParseMode::Lenient => {
                self.db.stats.malformed += 1;
                let msg = format!("line {line}: {reason}; statement skipped");
                warn!("policy {msg}");
                self.db.warnings.push(msg);
                Ok(())
            }
        }
    }

    /// Index of the terminating `;` at brace depth zero.
    fn statement_end(&self) -> Option<usize> {
        let mut depth = 0i32;
        for (i, t) in self.toks.iter().enumerate().skip(self.pos) {
            match t.text.as_str() {
                "{" | "(" => depth += 1,
                "}" | ")" => depth -= 1,
                ";" if depth <= 0 => return Some(i),
                _ => {}
            }
        }
        None
    }

    fn skip_line_statement(&mut self, line: usize) {
        self.pos += 1;
        while self.pos < self.toks.len() && self.toks[self.pos].line == line {
            if self.toks[self.pos].text == "{" {
                self.skip_braces();
                return;
            }
            self.pos += 1;
        }
    }

    fn skip_block(&mut self) {
        while self.pos < self.toks.len() && self.toks[self.pos].text != "{" {
            self.pos += 1;
        }
        self.skip_braces();
    }

    fn skip_braces(&mut self) {
        let mut depth = 0i32;
        while self.pos < self.toks.len() {
            match self.toks[self.pos].text.as_str() {
                "{" => depth += 1,
                "}" => {
                    depth -= 1;
                    if depth == 0 {
                        self.pos += 1;
                        return;
                    }
                }
                _ => {}
            }
            self.pos += 1;
        }
    }

    fn allow(&mut self, stmt: &[&Token]) -> Result<(), String> {
        let mut i = 0;
        let sources = name_set(stmt, &mut i)?;
        let targets = name_set(stmt, &mut i)?;
        expect(stmt, &mut i, ":")?;
        let classes = name_set(stmt, &mut i)?;
        let perms = name_set(stmt, &mut i)?;
        if i != stmt.len() {
            return Err("trailing tokens after permission set".into());
        }
        if perms.is_empty() {
            return Err("empty permission set".into());
        }
        let perms: BTreeSet<String> = perms.into_iter().collect();
        self.db.stats.allow_statements += 1;
        for s in &sources {
            for t in &targets {
                for c in &classes {
                    self.db.av_rules.push(AvRule {
                        source: s.clone(),
                        target: t.clone(),
                        class: c.clone(),
                        perms: perms.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    fn attribute(&mut self, stmt: &[&Token]) -> Result<(), String> {
        match stmt {
            [name] if is_identifier(&name.text) => {
                self.db.attributes.entry(name.text.clone()).or_default();
                Ok(())
            }
            _ => Err("expected `attribute NAME;`".into()),
        }
    }

    fn typeattribute(&mut self, stmt: &[&Token]) -> Result<(), String> {
        let Some((ty, rest)) = stmt.split_first() else {
            return Err("expected `typeattribute TYPE ATTR;`".into());
        };
        if !is_identifier(&ty.text) {
            return Err(format!("invalid type name {}", ty.text));
        }
        let attrs = comma_list(rest)?;
        if attrs.is_empty() {
            return Err("expected `typeattribute TYPE ATTR;`".into());
        }
        for a in attrs {
            self.db.attributes.entry(a).or_default().insert(ty.text.clone());
        }
        Ok(())
    }

    fn type_decl(&mut self, stmt: &[&Token]) -> Result<(), String> {
        let Some((ty, rest)) = stmt.split_first() else {
            return Err("expected `type NAME;`".into());
        };
        if !is_identifier(&ty.text) {
            return Err(format!("invalid type name {}", ty.text));
        }
        // drop an optional alias clause
        let rest: Vec<&Token> = match rest.iter().position(|t| t.text == ",") {
            Some(p) => rest[p..].to_vec(),
            None => Vec::new(),
        };
        for a in comma_list(&rest)? {
            self.db.attributes.entry(a).or_default().insert(ty.text.clone());
        }
        Ok(())
    }

    fn type_transition(&mut self, stmt: &[&Token]) -> Result<(), String> {
        match stmt {
            [src, entry, colon, class, target] if colon.text == ":" => {
                for t in [src, entry, class, target] {
                    if !is_identifier(&t.text) {
                        return Err(format!("invalid name {}", t.text));
                    }
                }
                if class.text == "process" {
                    self.db.domain_transitions.push(DomainTransition {
                        source: src.text.clone(),
                        entrypoint: entry.text.clone(),
                        target: target.text.clone(),
                    });
                } else {
                    self.db.stats.ignored += 1;
                }
                Ok(())
            }
            // named type transitions only apply to files
            [_, _, colon, class, _, _] if colon.text == ":" && class.text != "process" => {
                self.db.stats.ignored += 1;
                Ok(())
            }
            _ => Err("expected `type_transition SRC ENTRY:process TGT;`".into()),
        }
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')
        && !s.starts_with('-')
}

fn expect(stmt: &[&Token], i: &mut usize, want: &str) -> Result<(), String> {
    match stmt.get(*i) {
        Some(t) if t.text == want => {
            *i += 1;
            Ok(())
        }
        Some(t) => Err(format!("expected `{want}`, found `{}`", t.text)),
        None => Err(format!("expected `{want}`")),
    }
}

/// A single name or a `{ a b c }` set. Complements, wildcards and
/// exclusions are rejected.
fn name_set(stmt: &[&Token], i: &mut usize) -> Result<Vec<String>, String> {
    let Some(first) = stmt.get(*i) else {
        return Err("unexpected end of statement".into());
    };
    if first.text == "{" {
        *i += 1;
        let mut names = Vec::new();
        loop {
            let Some(t) = stmt.get(*i) else {
                return Err("unterminated `{`".into());
            };
            *i += 1;
            if t.text == "}" {
                break;
            }
            if !is_identifier(&t.text) {
                return Err(format!("unsupported set element `{}`", t.text));
            }
            names.push(t.text.clone());
        }
        if names.is_empty() {
            return Err("empty set".into());
        }
        Ok(names)
    } else if is_identifier(&first.text) {
        *i += 1;
        Ok(vec![first.text.clone()])
    } else {
        Err(format!("unsupported name `{}`", first.text))
    }
}

fn comma_list(toks: &[&Token]) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut want_name = true;
    for t in toks {
        if want_name {
            if t.text == "," && out.is_empty() {
                continue;
            }
            if !is_identifier(&t.text) {
                return Err(format!("invalid name {}", t.text));
            }
            out.push(t.text.clone());
        } else if t.text != "," {
            return Err(format!("expected `,`, found `{}`", t.text));
        }
        want_name = !want_name;
    }
    Ok(out)
}

/// Domain → backing executable correlation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Correlation {
    pub binaries: BTreeMap<String, BTreeSet<String>>,
    /// Transition targets and service domains with no backing file found.
    pub unmatched: BTreeSet<String>,
}

/// Maps subject domains to the binaries their processes execute, via
/// domain-transition entrypoint labels and service `seclabel` options.
pub fn correlate_subject_binaries(db: &PolicyDb, image: &FirmwareImage, services: &[ServiceDefinition]) -> Correlation {
    let mut by_type: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in image.entries().filter(|e| e.kind == FileKind::Regular) {
        if let Some(t) = e.selinux_type() {
            by_type.entry(t).or_default().push(e.path.as_str());
        }
    }

    let mut out = Correlation::default();
    let mut candidates = BTreeSet::new();
    for tr in &db.domain_transitions {
        candidates.insert(tr.target.clone());
        for path in by_type.get(tr.entrypoint.as_str()).into_iter().flatten() {
            out.binaries.entry(tr.target.clone()).or_default().insert(path.to_string());
        }
    }
    for svc in services {
        let Some(domain) = svc.seclabel.as_deref().and_then(context_type) else {
            continue;
        };
        candidates.insert(domain.to_string());
        out.binaries.entry(domain.to_string()).or_default().insert(svc.exec_path.clone());
    }
    out.unmatched = candidates.into_iter().filter(|d| !out.binaries.contains_key(d)).collect();
    for d in &out.unmatched {
        warn!("domain {d} has no backing binary");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::firmware::{FileContexts, FsEntry};

    fn rules(text: &str) -> Vec<AvRule> {
        parse_policy(text, ParseMode::Strict).unwrap().av_rules
    }

    #[test]
    fn single_allow() {
        let r = rules("allow untrusted_app cnd:unix_stream_socket connectto;");
        assert_eq!(
            r,
            vec![AvRule {
                source: "untrusted_app".into(),
                target: "cnd".into(),
                class: "unix_stream_socket".into(),
                perms: BTreeSet::from(["connectto".to_string()]),
            }]
        );
    }

    #[test]
    fn perm_set() {
        let r = rules("allow a b:file {read write};");
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].perms, BTreeSet::from(["read".to_string(), "write".to_string()]));
    }

    #[test]
    fn empty_input() {
        let db = parse_policy("", ParseMode::Strict).unwrap();
        assert!(db.av_rules.is_empty());
        assert_eq!(db.stats, PolicyStats::default());
    }

    #[test]
    fn set_expansion_in_source_target_class() {
        let r = rules("allow { a b } { c self }:{ file sock_file } write;");
        assert_eq!(r.len(), 8);
        assert!(r.iter().any(|x| x.source == "b" && x.target == "self" && x.class == "sock_file"));
    }

    #[test]
    fn attributes_and_membership() {
        let db = parse_policy(
            "attribute appdomain;\nattribute empty_attr;\ntypeattribute untrusted_app appdomain;\ntype netd, domain, mlstrustedsubject;\n",
            ParseMode::Strict,
        )
        .unwrap();
        assert_eq!(db.attributes["appdomain"], BTreeSet::from(["untrusted_app".to_string()]));
        assert!(db.attributes["empty_attr"].is_empty());
        assert!(db.attributes["domain"].contains("netd"));
        assert!(db.attributes["mlstrustedsubject"].contains("netd"));
        assert_eq!(db.expand("plain"), BTreeSet::from(["plain".to_string()]));
    }

    #[test]
    fn process_transitions_only() {
        let db = parse_policy(
            "type_transition init cnd_exec:process cnd;\ntype_transition cnd socket_device:sock_file cnd_socket;\n",
            ParseMode::Strict,
        )
        .unwrap();
        assert_eq!(
            db.domain_transitions,
            vec![DomainTransition { source: "init".into(), entrypoint: "cnd_exec".into(), target: "cnd".into() }]
        );
        assert_eq!(db.stats.ignored, 1);
    }

    #[test]
    fn unknown_statements_are_counted() {
        let text = "class file\nclass dir inherits file { search }\nsid kernel u:r:kernel:s0\n\
                    neverallow a b:file write;\nfoo bar baz;\nif (b) { allow a b:file read; }\nallow a b:file read;\n";
        let db = parse_policy(text, ParseMode::Strict).unwrap();
        assert_eq!(db.av_rules.len(), 1);
        assert_eq!(db.stats.unknown, 2);
        assert_eq!(db.stats.ignored, 4);
    }

    #[test]
    fn strict_vs_lenient() {
        let text = "allow a b file read;\nallow c d:file write;\n";
        let err = parse_policy(text, ParseMode::Strict).unwrap_err();
        assert_eq!(err, PolicyError::SyntaxError { line: 1, reason: "expected `:`, found `file`".into() });
        let db = parse_policy(text, ParseMode::Lenient).unwrap();
        assert_eq!(db.av_rules.len(), 1);
        assert_eq!(db.stats.malformed, 1);
        assert_eq!(db.warnings.len(), 1);
        assert!(parse_policy("allow a b:file ~{ read };", ParseMode::Strict).is_err());
        assert!(parse_policy("allow a b:file read", ParseMode::Strict).is_err());
    }

    #[test]
    fn correlation_via_transition_and_seclabel() {
        let db = parse_policy("type_transition init cnd_exec:process cnd;\n", ParseMode::Strict).unwrap();
        let img = FirmwareImage::from_parts(FileContexts::default(), "")
            .insert_entry(
                FsEntry::new("/system/bin/cnd", 0o755, 0, 2000, FileKind::Regular).with_label("u:object_r:cnd_exec:s0"),
                false,
            )
            .unwrap();
        let c = correlate_subject_binaries(&db, &img, &[]);
        assert_eq!(c.binaries["cnd"], BTreeSet::from(["/system/bin/cnd".to_string()]));

        let svc = ServiceDefinition {
            seclabel: Some("u:r:dpmd:s0".into()),
            ..ServiceDefinition::new("dpmd", "/system/bin/dpmd")
        };
        let c = correlate_subject_binaries(&PolicyDb::default(), &img, &[svc]);
        assert_eq!(c.binaries["dpmd"], BTreeSet::from(["/system/bin/dpmd".to_string()]));

        let empty = FirmwareImage::from_parts(FileContexts::default(), "");
        assert!(correlate_subject_binaries(&PolicyDb::default(), &empty, &[]).binaries.is_empty());
    }

    #[test]
    fn unmatched_domains_reported() {
        let db = parse_policy("type_transition init ghost_exec:process ghost;\n", ParseMode::Strict).unwrap();
        let img = FirmwareImage::from_parts(FileContexts::default(), "");
        let c = correlate_subject_binaries(&db, &img, &[]);
        assert!(c.binaries.is_empty());
        assert_eq!(c.unmatched, BTreeSet::from(["ghost".to_string()]));
    }
}
