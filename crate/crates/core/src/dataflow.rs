//! Read/write abstraction of AV rules over subjects and objects.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::warn;
use serde::Serialize;

use crate::sepolicy::PolicyDb;

const FILE_CLASSES: &[&str] = &["file", "dir", "lnk_file", "chr_file", "blk_file", "fifo_file", "sock_file"];

/// Which permissions imply a write (data flows subject → object) or a read
/// (object → subject). Vendor policies vary, so callers may substitute their
/// own table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermissionTable {
    pub write: BTreeSet<String>,
    pub read: BTreeSet<String>,
}

impl Default for PermissionTable {
    fn default() -> Self {
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        PermissionTable {
            write: set(&["write", "append", "connectto", "sendto", "create", "setattr", "bind"]),
            read: set(&["read", "getattr", "recvfrom", "accept", "listen", "getopt"]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectCategory {
    File,
    IpcSocket,
    IpcOther,
}

impl ObjectCategory {
    pub fn of_class(class: &str) -> Self {
        if FILE_CLASSES.contains(&class) {
            ObjectCategory::File
        } else if class.contains("socket") {
            ObjectCategory::IpcSocket
        } else {
            ObjectCategory::IpcOther
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ObjectNode {
    pub type_name: String,
    pub category: ObjectCategory,
}

impl ObjectNode {
    pub fn new(type_name: impl Into<String>, category: ObjectCategory) -> Self {
        ObjectNode { type_name: type_name.into(), category }
    }
}

impl fmt::Display for ObjectNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cat = match self.category {
            ObjectCategory::File => "file",
            ObjectCategory::IpcSocket => "ipc_socket",
            ObjectCategory::IpcOther => "ipc_other",
        };
        write!(f, "{}/{}", self.type_name, cat)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DataflowGraph {
    pub subjects: BTreeSet<String>,
    pub objects: BTreeSet<ObjectNode>,
    pub read_edges: BTreeSet<(String, ObjectNode)>,
    pub write_edges: BTreeSet<(String, ObjectNode)>,
    /// Server domains of socket IPC objects. Several candidates are kept when
    /// the policy does not single one out.
    pub ipc_owner: BTreeMap<ObjectNode, BTreeSet<String>>,
    /// Rule permissions that imply neither a read nor a write.
    pub unknown_permissions: usize,
}

/// Expands attributes and `self`, then maps every rule permission through the
/// permission table.
pub fn build_dataflow_graph(db: &PolicyDb, table: &PermissionTable) -> DataflowGraph {
    let mut g = DataflowGraph::default();
    let mut socket_perms: BTreeMap<(String, ObjectNode), BTreeSet<&str>> = BTreeMap::new();

    for rule in &db.av_rules {
        let category = ObjectCategory::of_class(&rule.class);
        for src in db.expand(&rule.source) {
            let targets = if rule.target == "self" { BTreeSet::from([src.clone()]) } else { db.expand(&rule.target) };
            g.subjects.insert(src.clone());
            for tgt in targets {
                let obj = ObjectNode::new(tgt, category);
                g.objects.insert(obj.clone());
                for perm in &rule.perms {
                    let w = table.write.contains(perm);
                    let r = table.read.contains(perm);
                    if w {
                        g.write_edges.insert((src.clone(), obj.clone()));
                    }
                    if r {
                        g.read_edges.insert((src.clone(), obj.clone()));
                    }
                    if !w && !r {
                        g.unknown_permissions += 1;
                    }
                }
                if category == ObjectCategory::IpcSocket {
                    socket_perms.entry((src.clone(), obj)).or_default().extend(rule.perms.iter().map(String::as_str));
                }
            }
        }
    }

    for ((domain, obj), perms) in socket_perms {
        if perms.contains("bind") || (perms.contains("listen") && perms.contains("accept")) {
            g.ipc_owner.entry(obj).or_default().insert(domain);
        }
    }
    g
}

impl DataflowGraph {
    pub fn has_write(&self, subject: &str, object: &ObjectNode) -> bool {
        self.write_edges.contains(&(subject.to_string(), object.clone()))
    }

    fn writes_of<'a>(&'a self, subject: &'a str) -> impl Iterator<Item = &'a ObjectNode> + 'a {
        self.write_edges
            .range((subject.to_string(), ObjectNode::new("", ObjectCategory::File))..)
            .take_while(move |(s, _)| s == subject)
            .map(|(_, o)| o)
    }

    fn readers_of<'a>(&'a self, object: &'a ObjectNode) -> impl Iterator<Item = &'a str> + 'a {
        self.read_edges.iter().filter(move |(_, o)| o == object).map(|(s, _)| s.as_str())
    }
}

/// Objects `subject` can write within `hops` steps.
///
/// One hop is a direct write edge. Each further hop moves to the subjects
/// that read an object reached so far and adds what they write. The
/// multi-hop chaining is experimental.
pub fn query_writable(graph: &DataflowGraph, subject: &str, hops: u32) -> BTreeSet<ObjectNode> {
    let mut result = BTreeSet::new();
    if !graph.subjects.contains(subject) {
        warn!("query subject {subject} is not in the graph");
        return result;
    }
    let mut visited_subjects = BTreeSet::from([subject.to_string()]);
    let mut frontier = vec![subject.to_string()];
    for hop in 0..hops.max(1) {
        let mut reached = BTreeSet::new();
        for s in &frontier {
            for o in graph.writes_of(s) {
                if result.insert(o.clone()) {
                    reached.insert(o.clone());
                }
            }
        }
        if hop + 1 == hops.max(1) {
            break;
        }
        frontier = reached
            .iter()
            .flat_map(|o| graph.readers_of(o))
            .filter(|s| visited_subjects.insert(s.to_string()))
            .map(str::to_string)
            .collect();
        if frontier.is_empty() {
            break;
        }
    }
    result
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum IpcOwner {
    Known(String),
    Unknown,
}

impl IpcOwner {
    pub fn domain(&self) -> Option<&str> {
        match self {
            IpcOwner::Known(d) => Some(d),
            IpcOwner::Unknown => None,
        }
    }
}

/// Keeps socket IPC objects, one pair per owner candidate.
pub fn filter_socket_ipc(graph: &DataflowGraph, objects: &BTreeSet<ObjectNode>) -> Vec<(ObjectNode, IpcOwner)> {
    let mut out = Vec::new();
    for obj in objects.iter().filter(|o| o.category == ObjectCategory::IpcSocket) {
        match graph.ipc_owner.get(obj) {
            Some(owners) if !owners.is_empty() => {
                out.extend(owners.iter().map(|d| (obj.clone(), IpcOwner::Known(d.clone()))));
            }
            _ => out.push((obj.clone(), IpcOwner::Unknown)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sepolicy::{parse_policy, ParseMode};

    fn graph(text: &str) -> DataflowGraph {
        build_dataflow_graph(&parse_policy(text, ParseMode::Strict).unwrap(), &PermissionTable::default())
    }

    fn sock(t: &str) -> ObjectNode {
        ObjectNode::new(t, ObjectCategory::IpcSocket)
    }

    #[test]
    fn connectto_is_socket_write() {
        let g = graph("allow A B:unix_stream_socket connectto;");
        assert!(g.write_edges.contains(&("A".to_string(), sock("B"))));
        assert!(g.read_edges.is_empty());
    }

    #[test]
    fn sock_file_write_is_file_write() {
        let g = graph("allow A B:sock_file write;");
        assert!(g.write_edges.contains(&("A".to_string(), ObjectNode::new("B", ObjectCategory::File))));
    }

    #[test]
    fn empty_policy_empty_graph() {
        let g = graph("");
        assert_eq!(g, DataflowGraph::default());
    }

    #[test]
    fn categories() {
        assert_eq!(ObjectCategory::of_class("unix_dgram_socket"), ObjectCategory::IpcSocket);
        assert_eq!(ObjectCategory::of_class("tcp_socket"), ObjectCategory::IpcSocket);
        assert_eq!(ObjectCategory::of_class("sock_file"), ObjectCategory::File);
        assert_eq!(ObjectCategory::of_class("dir"), ObjectCategory::File);
        assert_eq!(ObjectCategory::of_class("binder"), ObjectCategory::IpcOther);
    }

    #[test]
    fn self_and_attribute_expansion() {
        let g = graph(
            "attribute appdomain;\ntypeattribute untrusted_app appdomain;\ntypeattribute platform_app appdomain;\n\
             allow appdomain cnd:unix_stream_socket connectto;\nallow cnd self:unix_stream_socket { create bind listen accept };\n",
        );
        assert!(g.has_write("untrusted_app", &sock("cnd")));
        assert!(g.has_write("platform_app", &sock("cnd")));
        assert!(g.has_write("cnd", &sock("cnd")));
        assert_eq!(g.ipc_owner[&sock("cnd")], BTreeSet::from(["cnd".to_string()]));
    }

    #[test]
    fn unknown_permissions_counted() {
        let g = graph("allow A B:file { ioctl lock read };");
        assert_eq!(g.unknown_permissions, 2);
        assert_eq!(g.read_edges.len(), 1);
    }

    #[test]
    fn one_hop_query() {
        let g = graph("allow untrusted_app cnd:unix_stream_socket connectto;");
        assert_eq!(query_writable(&g, "untrusted_app", 1), BTreeSet::from([sock("cnd")]));
        assert!(query_writable(&DataflowGraph::default(), "untrusted_app", 1).is_empty());
        assert!(query_writable(&g, "nobody", 1).is_empty());
    }

    #[test]
    fn multi_hop_chains_through_readers() {
        let g = graph(
            "allow app shared:file write;\nallow relay shared:file read;\nallow relay target:unix_stream_socket connectto;\n",
        );
        let one = query_writable(&g, "app", 1);
        assert_eq!(one, BTreeSet::from([ObjectNode::new("shared", ObjectCategory::File)]));
        let two = query_writable(&g, "app", 2);
        assert!(two.contains(&sock("target")));
        assert_eq!(two.len(), 2);
    }

    #[test]
    fn socket_filter_and_owners() {
        let g = graph(
            "allow app cnd:unix_stream_socket connectto;\nallow app orphan:unix_stream_socket connectto;\n\
             allow app data_file:file write;\nallow cnd self:unix_stream_socket { listen accept };\n",
        );
        let objs = query_writable(&g, "app", 1);
        let f = filter_socket_ipc(&g, &objs);
        assert_eq!(f, vec![(sock("cnd"), IpcOwner::Known("cnd".into())), (sock("orphan"), IpcOwner::Unknown),]);
        assert!(filter_socket_ipc(&g, &BTreeSet::new()).is_empty());
    }

    #[test]
    fn owner_ties_report_all() {
        let g = graph("allow a s:unix_dgram_socket bind;\nallow b s:unix_dgram_socket bind;\n");
        let f = filter_socket_ipc(&g, &BTreeSet::from([sock("s")]));
        assert_eq!(f.len(), 2);
    }
}
