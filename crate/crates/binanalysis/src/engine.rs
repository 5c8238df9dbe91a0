//! Reaching-definitions style abstract interpretation over the lifted IR.
//!
//! Values form a flat lattice: differing definitions reaching a join point
//! collapse to [`Val::Top`]. Stack memory is modelled bytewise relative to
//! the stack pointer at the entry of the root function, so buffers passed
//! down to callees keep a single coordinate space. Every known byte carries
//! the definition it came from, which lets callers replay how a recovered
//! string was assembled.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{Hash, Hasher};

use crate::cfg::{abi, Callee, Cfg};
use crate::elf::BinaryImage;
use crate::ir::{Abi, Addr, BinOp, CallTarget, Expr, Flow, Insn, Reg, Src, Stmt, NUM_REGS, NUM_VREGS};

pub const MAX_DEPTH: usize = 3;
const SO_PEERCRED: u64 = 0x11;
const HAVOC_SPAN: i64 = 4096;
const MAX_STRING: usize = 4096;
const BLOCK_VISIT_CAP: u32 = 200;
const STEP_BUDGET: u64 = 5_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Val {
    Const(u64),
    /// Offset from the root entry stack pointer.
    Stack(i64),
    /// Incoming argument of the root function.
    Param(u8),
    /// Return value of the call at this address.
    Ret(u64),
    /// A field of the ucred struct filled by the getsockopt at `site`
    /// (0 = pid, 1 = uid, 2 = gid).
    Cred {
        site: u64,
        field: u8,
    },
    Top,
}

impl Val {
    pub fn as_const(self) -> Option<u64> {
        match self {
            Val::Const(c) => Some(c),
            _ => None,
        }
    }

    fn is_param_derived(self) -> bool {
        matches!(self, Val::Param(_))
    }
}

/// Origin of one known memory byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Def {
    /// Byte of the loaded binary at this address.
    Data(u64),
    /// Byte `idx` of a constant stored by the instruction at `insn`.
    Imm { insn: u64, value: u64, idx: u8 },
    /// Fill byte written by a memset-like call at `insn`.
    Fill { insn: u64 },
    /// Byte `idx` of formatted text recorded in the render arena.
    Render { event: u32, idx: u16 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemByte {
    Known { val: u8, def: Def },
    Piece { val: Val, idx: u8, size: u8 },
}

impl MemByte {
    pub fn known(self) -> Option<(u8, Def)> {
        match self {
            MemByte::Known { val, def } => Some((val, def)),
            _ => None,
        }
    }
}

fn join_byte(a: &MemByte, b: &MemByte) -> Option<MemByte> {
    match (a, b) {
        (MemByte::Known { val: x, def: d1 }, MemByte::Known { val: y, def: d2 }) if x == y => {
            Some(MemByte::Known { val: *x, def: (*d1).min(*d2) })
        }
        _ if a == b => Some(*a),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct State {
    pub regs: Vec<Val>,
    pub vregs: Vec<[Option<MemByte>; 16]>,
    pub stack: BTreeMap<i64, MemByte>,
    /// Overlay over writable data; `None` marks a byte as unknown.
    pub globals: BTreeMap<u64, Option<MemByte>>,
}

impl State {
    pub fn entry(abi: &Abi) -> Self {
        let mut regs = vec![Val::Top; NUM_REGS];
        for (i, r) in abi.args.iter().enumerate() {
            regs[*r as usize] = Val::Param(i as u8);
        }
        regs[abi.sp as usize] = Val::Stack(0);
        State { regs, vregs: vec![[None; 16]; NUM_VREGS], stack: BTreeMap::new(), globals: BTreeMap::new() }
    }

    pub fn reg(&self, r: Reg) -> Val {
        self.regs.get(r as usize).copied().unwrap_or(Val::Top)
    }

    fn join(&mut self, other: &State) -> bool {
        let before = self.hash_value();
        for (a, b) in self.regs.iter_mut().zip(&other.regs) {
            if a != b {
                *a = Val::Top;
            }
        }
        for (va, vb) in self.vregs.iter_mut().zip(&other.vregs) {
            for (a, b) in va.iter_mut().zip(vb) {
                *a = match (a.as_ref(), b.as_ref()) {
                    (Some(x), Some(y)) => join_byte(x, y),
                    _ => None,
                };
            }
        }
        self.stack = self.stack.iter().filter_map(|(k, a)| Some((*k, join_byte(a, other.stack.get(k)?)?))).collect();
        let keys: BTreeSet<u64> = self.globals.keys().chain(other.globals.keys()).copied().collect();
        for k in keys {
            let v = match (self.globals.get(&k), other.globals.get(&k)) {
                (Some(Some(a)), Some(Some(b))) => join_byte(a, b),
                _ => None,
            };
            self.globals.insert(k, v);
        }
        before != self.hash_value()
    }

    pub fn hash_value(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.hash(&mut h);
        h.finish()
    }
}

/// How a peer credential was used.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum UseKind {
    Comparison { comparand: Option<u64> },
    Argument { callee: Callee, name_lookup: bool },
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CredUse {
    pub site: u64,
    pub field: u8,
    pub kind: UseKind,
    pub at: u64,
}

/// Formatted text produced by simulated printf-family calls.
#[derive(Clone, Debug, Default)]
pub struct RenderArena {
    texts: Vec<Vec<u8>>,
    ids: HashMap<Vec<u8>, u32>,
}

impl RenderArena {
    fn intern(&mut self, text: &[u8]) -> u32 {
        if let Some(id) = self.ids.get(text) {
            return *id;
        }
        let id = self.texts.len() as u32;
        self.texts.push(text.to_vec());
        self.ids.insert(text.to_vec(), id);
        id
    }

    pub fn byte(&self, event: u32, idx: u16) -> Option<u8> {
        self.texts.get(event as usize)?.get(idx as usize).copied()
    }
}

struct Summary {
    exit: Option<State>,
    snaps: Vec<(u64, Vec<u64>, State)>,
}

/// Pre-call snapshot of a watched callsite under one calling context.
pub type SnapKey = (u64, Vec<u64>);

pub struct Engine<'a> {
    bin: &'a BinaryImage,
    cfg: &'a Cfg,
    abi: &'static Abi,
    /// Callsites whose pre-call state is captured.
    pub targets: BTreeSet<u64>,
    pub snapshots: BTreeMap<SnapKey, State>,
    snap_log: Vec<(u64, Vec<u64>, State)>,
    pub cred_uses: BTreeSet<CredUse>,
    pub peercred_sites: BTreeSet<u64>,
    pub nonconst_optname: BTreeSet<u64>,
    pub arena: RenderArena,
    /// Functions whose body (transitively) reads a process name.
    pub name_lookups: BTreeSet<u64>,
    /// Internal callees not entered because of the depth limit.
    pub depth_limited: BTreeSet<u64>,
    pub incomplete: bool,
    memo: HashMap<(u64, u64), Summary>,
    call_stack: Vec<u64>,
    active: Vec<u64>,
    steps: u64,
}

/// Externals that never write through their pointer arguments.
const PURE_EXTERNALS: &[&str] = &[
    "bind",
    "connect",
    "listen",
    "socket",
    "close",
    "shutdown",
    "chmod",
    "fchmod",
    "chown",
    "fchown",
    "lchown",
    "umask",
    "seteuid",
    "setegid",
    "setuid",
    "setgid",
    "setresuid",
    "setresgid",
    "getenv",
    "strcmp",
    "strncmp",
    "strcasecmp",
    "strstr",
    "strchr",
    "strrchr",
    "atoi",
    "atol",
    "strtol",
    "strtoul",
    "printf",
    "puts",
    "fprintf",
    "syslog",
    "__android_log_print",
    "__android_log_write",
    "android_get_control_socket",
    "socket_local_server",
    "socket_local_server_bind",
    "unlink",
    "open",
    "openat",
    "write",
    "send",
    "sendto",
    "sendmsg",
    "access",
    "getpid",
    "getuid",
    "geteuid",
    "getgid",
    "kill",
    "exit",
    "_exit",
    "abort",
    "fork",
    "execv",
    "execve",
    "sleep",
    "usleep",
    "perror",
    "free",
    "malloc",
    "calloc",
    "fopen",
    "fclose",
    "setsockopt",
    "fcntl",
    "signal",
];

/// Simulated libc string routines.
pub const SIMULATED: &[&str] = &[
    "strcpy", "strncpy", "strlcpy", "strcat", "strncat", "sprintf", "snprintf", "memcpy", "memmove", "memset", "bzero",
    "strlen",
];

/// Fixed arities for common externals; used to limit which argument
/// registers count as "passed".
fn known_arity(name: &str) -> Option<usize> {
    Some(match name {
        "close"
        | "umask"
        | "seteuid"
        | "setegid"
        | "setuid"
        | "setgid"
        | "getenv"
        | "strlen"
        | "atoi"
        | "puts"
        | "android_get_control_socket"
        | "free"
        | "malloc"
        | "unlink"
        | "perror"
        | "exit"
        | "_exit"
        | "sleep" => 1,
        "chmod" | "fchmod" | "listen" | "strcmp" | "strcpy" | "strcat" | "kill" | "access" | "bzero" | "strstr"
        | "strchr" | "strrchr" | "fopen" | "shutdown" => 2,
        "bind"
        | "connect"
        | "socket"
        | "chown"
        | "fchown"
        | "lchown"
        | "accept"
        | "read"
        | "write"
        | "memcpy"
        | "memmove"
        | "memset"
        | "strncmp"
        | "strncpy"
        | "strlcpy"
        | "strncat"
        | "socket_local_server"
        | "socket_local_server_bind"
        | "open"
        | "recv"
        | "send"
        | "__android_log_write" => 3,
        "getsockopt" | "setsockopt" | "recvfrom" => 5,
        _ => return None,
    })
}

enum Loc {
    Stack(i64),
    Global(u64),
}

impl<'a> Engine<'a> {
    pub fn new(bin: &'a BinaryImage, cfg: &'a Cfg, targets: BTreeSet<u64>, name_lookups: BTreeSet<u64>) -> Self {
        Engine {
            bin,
            cfg,
            abi: abi(bin.arch),
            targets,
            snapshots: BTreeMap::new(),
            snap_log: Vec::new(),
            cred_uses: BTreeSet::new(),
            peercred_sites: BTreeSet::new(),
            nonconst_optname: BTreeSet::new(),
            arena: RenderArena::default(),
            name_lookups,
            depth_limited: BTreeSet::new(),
            incomplete: false,
            memo: HashMap::new(),
            call_stack: Vec::new(),
            active: Vec::new(),
            steps: 0,
        }
    }

    pub fn abi(&self) -> &'static Abi {
        self.abi
    }

    /// Analyzes `entry` as a root with symbolic parameters.
    pub fn analyze(&mut self, entry: u64) {
        let init = State::entry(self.abi);
        self.active.push(entry);
        self.run(entry, init);
        self.active.pop();
    }

    fn run(&mut self, entry: u64, init: State) -> Option<State> {
        let func = self.cfg.functions.get(&entry)?;
        let mut ins: BTreeMap<u64, State> = BTreeMap::new();
        let mut visits: BTreeMap<u64, u32> = BTreeMap::new();
        let mut work: BTreeSet<u64> = BTreeSet::from([entry]);
        ins.insert(entry, init);
        let mut exit: Option<State> = None;

        while let Some(b) = work.pop_first() {
            let Some(block) = func.blocks.get(&b) else { continue };
            let v = visits.entry(b).or_insert(0);
            *v += 1;
            if *v > BLOCK_VISIT_CAP || self.steps > STEP_BUDGET {
                self.incomplete = true;
                continue;
            }
            let mut st = ins[&b].clone();
            let mut written: BTreeSet<Reg> = BTreeSet::new();
            for insn in &block.insns {
                self.exec(&mut st, insn, &mut written);
                if insn.flow == Flow::Return {
                    match &mut exit {
                        None => exit = Some(st.clone()),
                        Some(e) => {
                            e.join(&st);
                        }
                    }
                }
            }
            for s in &block.succs {
                let changed = match ins.get_mut(s) {
                    None => {
                        ins.insert(*s, st.clone());
                        true
                    }
                    Some(old) => old.join(&st),
                };
                if changed {
                    work.insert(*s);
                }
            }
        }
        exit
    }

    fn src(&self, st: &State, s: Src) -> Val {
        match s {
            Src::Imm(i) => Val::Const(i),
            Src::Reg(r) => st.reg(r),
        }
    }

    fn addr(&self, st: &State, a: &Addr) -> Val {
        let mut v = match a.base {
            Some(r) => st.reg(r),
            None => Val::Const(0),
        };
        if let Some((r, scale)) = a.index {
            match st.reg(r) {
                Val::Const(i) => v = binop(BinOp::Add, v, Val::Const(i.wrapping_mul(scale as u64))),
                _ => return Val::Top,
            }
        }
        binop(BinOp::Add, v, Val::Const(a.disp as u64))
    }

    fn loc(&self, v: Val) -> Option<Loc> {
        match v {
            Val::Stack(o) => Some(Loc::Stack(o)),
            Val::Const(a) if self.bin.section_at(a).is_some() => Some(Loc::Global(a)),
            _ => None,
        }
    }

    /// Byte at `loc + i`.
    fn byte(&self, st: &State, loc: &Loc, i: i64) -> Option<MemByte> {
        match *loc {
            Loc::Stack(o) => st.stack.get(&(o + i)).copied(),
            Loc::Global(a) => {
                let a = a.wrapping_add(i as u64);
                match st.globals.get(&a) {
                    Some(b) => *b,
                    None => self.bin.byte(a).map(|val| MemByte::Known { val, def: Def::Data(a) }),
                }
            }
        }
    }

    fn put(&self, st: &mut State, loc: &Loc, i: i64, b: Option<MemByte>) {
        match *loc {
            Loc::Stack(o) => match b {
                Some(b) => {
                    st.stack.insert(o + i, b);
                }
                None => {
                    st.stack.remove(&(o + i));
                }
            },
            Loc::Global(a) => {
                let a = a.wrapping_add(i as u64);
                if self.bin.section_at(a).is_some_and(|s| s.write || s.nobits) {
                    st.globals.insert(a, b);
                }
            }
        }
    }

    /// Forgets `len` bytes starting at `loc`.
    fn havoc(&self, st: &mut State, loc: &Loc, len: i64) {
        match *loc {
            Loc::Stack(o) => {
                let keys: Vec<i64> = st.stack.range(o..o + len).map(|(k, _)| *k).collect();
                for k in keys {
                    st.stack.remove(&k);
                }
            }
            Loc::Global(a) => {
                for i in 0..len.min(512) {
                    self.put(st, loc, i, None);
                }
                let _ = a;
            }
        }
    }

    fn load(&self, st: &State, addr: Val, size: u8, signed: bool) -> Val {
        let Some(loc) = self.loc(addr) else { return Val::Top };
        let bytes: Vec<Option<MemByte>> = (0..size as i64).map(|i| self.byte(st, &loc, i)).collect();
        if let Some(known) = bytes.iter().map(|b| b.and_then(|b| b.known())).collect::<Option<Vec<_>>>() {
            let mut v = 0u64;
            for (i, (b, _)) in known.iter().enumerate() {
                v |= (*b as u64) << (8 * i);
            }
            if signed && size < 8 {
                v = sext(v, size as u32 * 8);
            }
            return Val::Const(v);
        }
        if let Some(MemByte::Piece { val, idx: 0, size: psize }) = bytes[0] {
            let whole = psize == size
                && bytes.iter().enumerate().all(|(i, b)| *b == Some(MemByte::Piece { val, idx: i as u8, size: psize }));
            if whole {
                return val;
            }
        }
        Val::Top
    }

    fn store(&self, st: &mut State, addr: Val, val: Val, size: u8, insn: u64) {
        let Some(loc) = self.loc(addr) else { return };
        for i in 0..size {
            let b = match val {
                Val::Const(c) => Some(MemByte::Known {
                    val: (c >> (8 * i as u32).min(63)) as u8 & if i >= 8 { 0 } else { 0xff },
                    def: Def::Imm { insn, value: c, idx: i },
                }),
                Val::Top => None,
                v => Some(MemByte::Piece { val: v, idx: i, size }),
            };
            self.put(st, &loc, i as i64, b);
        }
    }

    fn exec(&mut self, st: &mut State, insn: &Insn, written: &mut BTreeSet<Reg>) {
        for s in &insn.stmts {
            self.steps += 1;
            match *s {
                Stmt::Assign { dst, expr, width } => {
                    let v = match expr {
                        Expr::Src(a) => self.src(st, a),
                        Expr::Bin(op, a, b) => binop(op, self.src(st, a), self.src(st, b)),
                        Expr::AddrOf(a) => self.addr(st, &a),
                        Expr::Load { addr, size, signed } => {
                            let a = self.addr(st, &addr);
                            self.load(st, a, size, signed)
                        }
                    };
                    let v = match (v, width) {
                        (Val::Const(c), 4) => Val::Const(c & 0xffff_ffff),
                        (v, _) => v,
                    };
                    st.regs[dst as usize] = v;
                    written.insert(dst);
                }
                Stmt::Store { addr, src, size } => {
                    let a = self.addr(st, &addr);
                    let v = self.src(st, src);
                    let v = match (v, size) {
                        (Val::Const(c), s) if s < 8 => Val::Const(c & ((1u64 << (s as u32 * 8)) - 1)),
                        (v, _) => v,
                    };
                    self.store(st, a, v, size, insn.addr);
                }
                Stmt::Cmp(a, b) => {
                    let (x, y) = (self.src(st, a), self.src(st, b));
                    self.record_cmp(x, y, insn.addr, false);
                }
                Stmt::Test(a, b) => {
                    let (x, y) = (self.src(st, a), self.src(st, b));
                    self.record_cmp(x, y, insn.addr, a == b);
                }
                Stmt::Clobber(r) => {
                    st.regs[r as usize] = Val::Top;
                    written.insert(r);
                }
                Stmt::VLoad { v, addr, size } => {
                    let a = self.addr(st, &addr);
                    let loc = self.loc(a);
                    let mut bytes = [None; 16];
                    for (i, slot) in bytes.iter_mut().enumerate().take(size.min(16) as usize) {
                        *slot = loc.as_ref().and_then(|l| self.byte(st, l, i as i64));
                    }
                    st.vregs[v as usize % NUM_VREGS] = bytes;
                }
                Stmt::VStore { v, addr, size } => {
                    let a = self.addr(st, &addr);
                    if let Some(loc) = self.loc(a) {
                        let bytes = st.vregs[v as usize % NUM_VREGS];
                        for (i, b) in bytes.into_iter().take(size.min(16) as usize).enumerate() {
                            self.put(st, &loc, i as i64, b);
                        }
                    }
                }
                Stmt::VZero(v) => {
                    st.vregs[v as usize % NUM_VREGS] =
                        [Some(MemByte::Known { val: 0, def: Def::Fill { insn: insn.addr } }); 16];
                }
                Stmt::VClobber(v) => st.vregs[v as usize % NUM_VREGS] = [None; 16],
                Stmt::Call(target) => {
                    self.call(st, insn, target, written);
                    written.clear();
                }
            }
        }
    }

    fn record_cmp(&mut self, x: Val, y: Val, at: u64, self_test: bool) {
        let (cred, other) = match (x, y) {
            (Val::Cred { site, field }, o) => ((site, field), o),
            (o, Val::Cred { site, field }) => ((site, field), o),
            _ => return,
        };
        let comparand = if self_test { Some(0) } else { other.as_const().map(|c| c & 0xffff_ffff) };
        self.cred_uses.insert(CredUse { site: cred.0, field: cred.1, kind: UseKind::Comparison { comparand }, at });
    }

    fn callee_of(&self, st: &State, target: CallTarget) -> (Callee, Option<u64>) {
        let addr = match target {
            CallTarget::Direct(t) => Some(t),
            CallTarget::Indirect(s) => self.src(st, s).as_const(),
        };
        match addr {
            Some(a) => match self.bin.name_at(a) {
                Some(n) => (Callee::Symbol(n.to_string()), self.cfg.functions.contains_key(&a).then_some(a)),
                None if self.cfg.functions.contains_key(&a) => (Callee::Addr(a), Some(a)),
                None => (Callee::Unresolved, None),
            },
            None => (Callee::Unresolved, None),
        }
    }

    fn arg(&self, st: &State, i: usize) -> Val {
        match self.abi.args.get(i) {
            Some(r) => st.reg(*r),
            None => {
                // stack-passed argument at the call
                let n = self.abi.args.len();
                let sp = st.reg(self.abi.sp);
                self.load(st, binop(BinOp::Add, sp, Val::Const(8 * (i - n) as u64)), 8, false)
            }
        }
    }

    fn call(&mut self, st: &mut State, insn: &Insn, target: CallTarget, written: &BTreeSet<Reg>) {
        let (callee, internal) = self.callee_of(st, target);
        let name = callee.symbol().map(str::to_string);
        if self.targets.contains(&insn.addr) {
            let key = (insn.addr, self.call_stack.clone());
            self.snap_log.push((insn.addr, self.call_stack.clone(), st.clone()));
            self.snapshots.insert(key, st.clone());
        }

        let arity = name
            .as_deref()
            .and_then(known_arity)
            .or_else(|| internal.and_then(|e| self.cfg.functions.get(&e)).map(|f| f.arity))
            .unwrap_or_else(|| self.abi.args.iter().take_while(|r| written.contains(r)).count());
        self.record_arg_uses(st, insn.addr, &callee, internal, arity);

        let sim_name = name.as_deref().filter(|n| SIMULATED.contains(n) || *n == "getsockopt");
        let descend = internal.filter(|e| {
            sim_name.is_none()
                && !name.as_deref().is_some_and(is_api_name)
                && !self.active.contains(e)
                && self.cfg.functions.contains_key(e)
        });

        let ret = if let Some(n) = sim_name {
            self.simulate(st, insn.addr, n)
        } else if let Some(entry) = descend {
            if self.call_stack.len() < MAX_DEPTH {
                match self.descend(st, insn.addr, entry) {
                    Some(post) => {
                        *st = post;
                        return;
                    }
                    None => Val::Top,
                }
            } else {
                self.depth_limited.insert(entry);
                self.havoc_args(st, arity);
                Val::Ret(insn.addr)
            }
        } else {
            if !name.as_deref().is_some_and(|n| PURE_EXTERNALS.contains(&n)) {
                self.havoc_args(st, arity);
            }
            Val::Ret(insn.addr)
        };
        for r in self.abi.caller_saved {
            st.regs[*r as usize] = Val::Top;
        }
        for v in st.vregs.iter_mut() {
            *v = [None; 16];
        }
        st.regs[self.abi.ret as usize] = ret;
    }

    fn record_arg_uses(&mut self, st: &State, at: u64, callee: &Callee, internal: Option<u64>, arity: usize) {
        let args: Vec<Val> = (0..arity.min(8)).map(|i| self.arg(st, i)).collect();
        if !args.iter().any(|a| matches!(a, Val::Cred { .. })) {
            return;
        }
        let proc_string = args
            .iter()
            .any(|a| a.as_const().and_then(|p| self.bin.cstring(p, 256)).is_some_and(|s| is_proc_name_path(&s)));
        let name_lookup = proc_string || internal.is_some_and(|e| self.name_lookups.contains(&e));
        for a in args {
            if let Val::Cred { site, field } = a {
                self.cred_uses.insert(CredUse {
                    site,
                    field,
                    kind: UseKind::Argument { callee: callee.clone(), name_lookup },
                    at,
                });
            }
        }
    }

    fn havoc_args(&self, st: &mut State, arity: usize) {
        for i in 0..arity.min(8) {
            if let Some(loc) = self.loc(self.arg(st, i)) {
                if matches!(loc, Loc::Stack(_))
                    || matches!(loc, Loc::Global(a) if self.bin.section_at(a).is_some_and(|s| s.write || s.nobits))
                {
                    self.havoc(st, &loc, HAVOC_SPAN);
                }
            }
        }
    }

    fn descend(&mut self, st: &State, site: u64, entry: u64) -> Option<State> {
        let mut callee_state = st.clone();
        let sp = st.reg(self.abi.sp);
        if self.abi.call_push > 0 {
            let new_sp = binop(BinOp::Sub, sp, Val::Const(self.abi.call_push as u64));
            callee_state.regs[self.abi.sp as usize] = new_sp;
            self.store(&mut callee_state, new_sp, Val::Top, 8, site);
        }
        let key = (entry, callee_state.hash_value());
        let depth = self.call_stack.len() + 1;
        let exit = if let Some(sum) = self.memo.get(&key) {
            let replay: Vec<(u64, Vec<u64>, State)> = sum
                .snaps
                .iter()
                .map(|(a, rel, s)| {
                    let mut stack = self.call_stack.clone();
                    stack.push(site);
                    stack.extend(rel);
                    (*a, stack, s.clone())
                })
                .collect();
            let exit = sum.exit.clone();
            for (a, stack, s) in replay {
                self.snapshots.insert((a, stack.clone()), s.clone());
                self.snap_log.push((a, stack, s));
            }
            exit
        } else {
            let before = self.snap_log.len();
            self.call_stack.push(site);
            self.active.push(entry);
            let exit = self.run(entry, callee_state);
            self.active.pop();
            self.call_stack.pop();
            let snaps =
                self.snap_log[before..].iter().map(|(a, stack, s)| (*a, stack[depth..].to_vec(), s.clone())).collect();
            self.memo.insert(key, Summary { exit: exit.clone(), snaps });
            exit
        };
        let exit = exit?;
        let mut post = exit;
        for (i, v) in st.regs.iter().enumerate() {
            if !self.abi.caller_saved.contains(&(i as u8)) {
                post.regs[i] = *v;
            }
        }
        for r in self.abi.caller_saved {
            if *r != self.abi.ret {
                post.regs[*r as usize] = Val::Top;
            }
        }
        if let Val::Stack(o) = sp {
            post.stack = post.stack.split_off(&o);
        }
        Some(post)
    }

    /// C string at `ptr` with byte origins. The flag reports whether a
    /// terminator was seen.
    pub fn read_cstr(&self, st: &State, ptr: Val, max: usize) -> (Vec<(u8, Def)>, bool) {
        let mut out = Vec::new();
        let Some(loc) = self.loc(ptr) else { return (out, false) };
        for i in 0..max as i64 {
            match self.byte(st, &loc, i).and_then(|b| b.known()) {
                Some((0, _)) => return (out, true),
                Some(b) => out.push(b),
                None => return (out, false),
            }
        }
        (out, false)
    }

    /// Raw bytes at `ptr`, `None` where unknown.
    pub fn read_bytes(&self, st: &State, ptr: Val, len: usize) -> Vec<Option<(u8, Def)>> {
        match self.loc(ptr) {
            Some(loc) => (0..len as i64).map(|i| self.byte(st, &loc, i).and_then(|b| b.known())).collect(),
            None => vec![None; len],
        }
    }

    fn write_bytes(&self, st: &mut State, dst: &Loc, bytes: &[(u8, Def)]) {
        for (i, (val, def)) in bytes.iter().enumerate() {
            self.put(st, dst, i as i64, Some(MemByte::Known { val: *val, def: *def }));
        }
    }

    fn simulate(&mut self, st: &mut State, site: u64, name: &str) -> Val {
        let a: Vec<Val> = (0..6).map(|i| self.arg(st, i)).collect();
        let dst = self.loc(a[0]);
        if dst.is_none() && name != "strlen" && name != "getsockopt" {
            // unknown destination: any stack byte may have changed
            st.stack.clear();
        }
        match name {
            "strcpy" => {
                let (s, term) = self.read_cstr(st, a[1], MAX_STRING);
                self.copy_string(st, dst, s, term, None, site);
                a[0]
            }
            "strncpy" | "strlcpy" => {
                let (s, term) = self.read_cstr(st, a[1], MAX_STRING);
                let n = a[2].as_const().map(|n| n as usize);
                if name == "strlcpy" {
                    let n = n.map(|n| n.saturating_sub(1));
                    let s: Vec<(u8, Def)> = match n {
                        Some(n) => s.into_iter().take(n).collect(),
                        None => s,
                    };
                    let term = term || n.is_some();
                    self.copy_string(st, dst, s, term, None, site);
                    Val::Top
                } else {
                    self.copy_string(st, dst, s, term, n, site);
                    a[0]
                }
            }
            "strcat" | "strncat" => {
                let (d, dterm) = self.read_cstr(st, a[0], MAX_STRING);
                let (mut s, mut term) = self.read_cstr(st, a[1], MAX_STRING);
                if name == "strncat" {
                    if let Some(n) = a[2].as_const() {
                        if s.len() > n as usize {
                            s.truncate(n as usize);
                            term = true;
                        }
                    } else {
                        term = false;
                    }
                }
                let tail = if dterm { binop(BinOp::Add, a[0], Val::Const(d.len() as u64)) } else { Val::Top };
                match (dterm, self.loc(tail)) {
                    (true, Some(l)) => self.copy_string(st, Some(l), s, term, None, site),
                    _ => {
                        if let Some(l) = dst {
                            self.havoc(st, &l, HAVOC_SPAN);
                        }
                    }
                }
                a[0]
            }
            "memcpy" | "memmove" => {
                if let Some(l) = dst {
                    match a[2].as_const().filter(|n| *n <= MAX_STRING as u64) {
                        Some(n) => {
                            let src: Vec<Option<MemByte>> = match self.loc(a[1]) {
                                Some(sl) => (0..n as i64).map(|i| self.byte(st, &sl, i)).collect(),
                                None => vec![None; n as usize],
                            };
                            for (i, b) in src.into_iter().enumerate() {
                                self.put(st, &l, i as i64, b);
                            }
                        }
                        None => self.havoc(st, &l, HAVOC_SPAN),
                    }
                }
                a[0]
            }
            "memset" | "bzero" => {
                let (c, n) = if name == "bzero" { (Val::Const(0), a[1]) } else { (a[1], a[2]) };
                if let Some(l) = dst {
                    match (c.as_const(), n.as_const().filter(|n| *n <= MAX_STRING as u64)) {
                        (Some(c), Some(n)) => {
                            for i in 0..n as i64 {
                                self.put(
                                    st,
                                    &l,
                                    i,
                                    Some(MemByte::Known { val: c as u8, def: Def::Fill { insn: site } }),
                                );
                            }
                        }
                        (_, Some(n)) => self.havoc(st, &l, n as i64),
                        _ => self.havoc(st, &l, HAVOC_SPAN),
                    }
                }
                a[0]
            }
            "strlen" => {
                let (s, term) = self.read_cstr(st, a[0], MAX_STRING);
                if term {
                    Val::Const(s.len() as u64)
                } else {
                    Val::Top
                }
            }
            "sprintf" | "snprintf" => {
                let (limit, fmt_idx) =
                    if name == "snprintf" { (Some(a[1].as_const().map(|n| n as usize)), 2) } else { (None, 1) };
                let (fmt, fterm) = self.read_cstr(st, a[fmt_idx], MAX_STRING);
                let (mut out, complete) =
                    if fterm { self.format(st, &fmt, fmt_idx + 1, site) } else { (Vec::new(), false) };
                let full_len = out.len();
                let mut complete = complete;
                match limit {
                    Some(Some(n)) => {
                        if out.len() + 1 > n {
                            out.truncate(n.saturating_sub(1));
                        }
                    }
                    Some(None) => complete = false,
                    None => {}
                }
                if let Some(l) = dst {
                    if complete {
                        let nul = (0u8, Def::Fill { insn: site });
                        out.push(nul);
                        self.write_bytes(st, &l, &out);
                    } else {
                        self.havoc(st, &l, HAVOC_SPAN);
                        self.write_bytes(st, &l, &out);
                    }
                }
                if complete {
                    Val::Const(full_len as u64)
                } else {
                    Val::Top
                }
            }
            "getsockopt" => {
                match a[2].as_const() {
                    Some(SO_PEERCRED) => {
                        self.peercred_sites.insert(site);
                        if let Some(l) = self.loc(a[3]) {
                            for field in 0..3u8 {
                                for i in 0..4u8 {
                                    self.put(
                                        st,
                                        &l,
                                        (field * 4 + i) as i64,
                                        Some(MemByte::Piece { val: Val::Cred { site, field }, idx: i, size: 4 }),
                                    );
                                }
                            }
                        }
                    }
                    Some(_) => {
                        if let Some(l) = self.loc(a[3]) {
                            self.havoc(st, &l, 16);
                        }
                    }
                    None => {
                        self.nonconst_optname.insert(site);
                        if let Some(l) = self.loc(a[3]) {
                            self.havoc(st, &l, 16);
                        }
                    }
                }
                Val::Ret(site)
            }
            _ => Val::Top,
        }
    }

    fn copy_string(
        &self,
        st: &mut State,
        dst: Option<Loc>,
        s: Vec<(u8, Def)>,
        term: bool,
        n: Option<usize>,
        site: u64,
    ) {
        let Some(l) = dst else { return };
        let len = s.len();
        match n {
            Some(n) => {
                let mut bytes: Vec<(u8, Def)> = s.into_iter().take(n).collect();
                if term {
                    while bytes.len() < n {
                        bytes.push((0, Def::Fill { insn: site }));
                    }
                    self.write_bytes(st, &l, &bytes);
                } else {
                    self.havoc(st, &l, n as i64);
                    self.write_bytes(st, &l, &bytes);
                }
            }
            None => {
                if term {
                    let mut bytes = s;
                    bytes.push((0, Def::Fill { insn: site }));
                    self.write_bytes(st, &l, &bytes);
                } else {
                    self.havoc(st, &l, HAVOC_SPAN);
                    self.write_bytes(st, &l, &s);
                    let _ = len;
                }
            }
        }
    }

    /// Renders a printf format. Returns the produced bytes and whether
    /// rendering completed without unknown inputs.
    fn format(&mut self, st: &State, fmt: &[(u8, Def)], first_arg: usize, site: u64) -> (Vec<(u8, Def)>, bool) {
        let mut out: Vec<(u8, Def)> = Vec::new();
        let mut argi = first_arg;
        let mut i = 0;
        let bytes: Vec<u8> = fmt.iter().map(|(b, _)| *b).collect();
        while i < bytes.len() {
            if bytes[i] != b'%' {
                out.push(fmt[i]);
                i += 1;
                continue;
            }
            let start = i;
            i += 1;
            while i < bytes.len() && b"-+ #0".contains(&bytes[i]) {
                i += 1;
            }
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'.' {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let mut long = false;
            while i < bytes.len() && b"hlzjtq".contains(&bytes[i]) {
                long |= matches!(bytes[i], b'l' | b'z' | b'j' | b't' | b'q');
                i += 1;
            }
            let Some(&conv) = bytes.get(i) else { return (out, false) };
            i += 1;
            if i - start > 2 && !matches!(conv, b's' | b'd' | b'i' | b'u' | b'x' | b'X' | b'c') {
                return (out, false);
            }
            // width/precision/flags only supported when absent
            let plain = i - start == 2 || (i - start == 3 && long) || (i - start == 4 && long);
            match conv {
                b'%' => out.push((b'%', fmt[i - 1].1)),
                b's' if plain => {
                    let (s, term) = self.read_cstr(st, self.arg(st, argi), MAX_STRING);
                    argi += 1;
                    out.extend(s);
                    if !term {
                        return (out, false);
                    }
                }
                b'd' | b'i' | b'u' | b'x' | b'X' | b'c' if plain => {
                    let Some(v) = self.arg(st, argi).as_const() else { return (out, false) };
                    argi += 1;
                    let v = if long { v } else { v & 0xffff_ffff };
                    let text: Vec<u8> = match conv {
                        b'd' | b'i' => {
                            if long {
                                (v as i64).to_string().into_bytes()
                            } else {
                                (v as u32 as i32).to_string().into_bytes()
                            }
                        }
                        b'u' => v.to_string().into_bytes(),
                        b'x' => format!("{v:x}").into_bytes(),
                        b'X' => format!("{v:X}").into_bytes(),
                        _ => vec![v as u8],
                    };
                    let ev = self.arena.intern(&text);
                    out.extend(text.iter().enumerate().map(|(k, b)| (*b, Def::Render { event: ev, idx: k as u16 })));
                }
                _ => return (out, false),
            }
        }
        let _ = site;
        (out, true)
    }

    /// Checks that every byte with a recorded origin can be re-derived from
    /// the binary, the instruction constant or the render arena.
    pub fn replay(&self, bytes: &[(u8, Def)]) -> bool {
        bytes.iter().all(|(val, def)| {
            let expected = match *def {
                Def::Data(a) => self.bin.byte(a),
                Def::Imm { value, idx, .. } => Some((value >> (8 * idx as u32).min(63)) as u8),
                Def::Fill { .. } => Some(*val),
                Def::Render { event, idx } => self.arena.byte(event, idx),
            };
            expected == Some(*val)
        })
    }
}

pub fn is_api_name(name: &str) -> bool {
    crate::apis::is_bind_api(name) || PURE_EXTERNALS.contains(&name) || SIMULATED.contains(&name)
}

/// `/proc/...` path naming a process attribute.
pub fn is_proc_name_path(s: &[u8]) -> bool {
    let s = String::from_utf8_lossy(s);
    s.contains("/proc/") && (s.contains("comm") || s.contains("cmdline") || s.contains("status"))
}

pub fn sext(v: u64, bits: u32) -> u64 {
    if bits >= 64 || bits == 0 {
        return v;
    }
    let shift = 64 - bits;
    (((v << shift) as i64) >> shift) as u64
}

pub fn binop(op: BinOp, a: Val, b: Val) -> Val {
    use Val::*;
    match (op, a, b) {
        (_, Const(x), Const(y)) => Const(match op {
            BinOp::Add => x.wrapping_add(y),
            BinOp::Sub => x.wrapping_sub(y),
            BinOp::And => x & y,
            BinOp::Or => x | y,
            BinOp::Xor => x ^ y,
            BinOp::Shl => x.wrapping_shl(y as u32 & 63),
            BinOp::Shr => x.wrapping_shr(y as u32 & 63),
            BinOp::Sar => ((x as i64).wrapping_shr(y as u32 & 63)) as u64,
            BinOp::Mul => x.wrapping_mul(y),
            BinOp::Sext => sext(x, y as u32),
        }),
        (BinOp::Add, Stack(o), Const(c)) | (BinOp::Add, Const(c), Stack(o)) => Stack(o.wrapping_add(c as i64)),
        (BinOp::Sub, Stack(o), Const(c)) => Stack(o.wrapping_sub(c as i64)),
        (BinOp::Sub, Stack(x), Stack(y)) => Const(x.wrapping_sub(y) as u64),
        // `orr xd, sp-derived, #small` on a 16-byte aligned frame
        (BinOp::Or, Stack(o), Const(c)) | (BinOp::Or, Const(c), Stack(o)) if c < 16 && (o as u64 & 15) & c == 0 => {
            Stack(o.wrapping_add(c as i64))
        }
        (BinOp::Add | BinOp::Sub | BinOp::Or | BinOp::Xor | BinOp::Shl | BinOp::Shr | BinOp::Sar, v, Const(0)) => v,
        (BinOp::Add | BinOp::Or | BinOp::Xor, Const(0), v) => v,
        (BinOp::And, v, Const(0xffff_ffff)) | (BinOp::And, Const(0xffff_ffff), v) if v != Top => v,
        (BinOp::And, v, Const(u64::MAX)) => v,
        (BinOp::Sext, v, _) if !matches!(v, Const(_)) => v,
        (BinOp::Sub, x, y) if x == y && x != Top => Const(0),
        _ => Top,
    }
}

/// True if `v` is, or was derived from, a root parameter.
pub fn depends_on_param(v: Val) -> bool {
    v.is_param_derived()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_arithmetic() {
        assert_eq!(binop(BinOp::Add, Val::Stack(-16), Val::Const(2)), Val::Stack(-14));
        assert_eq!(binop(BinOp::Sub, Val::Stack(-16), Val::Stack(-32)), Val::Const(16));
        assert_eq!(binop(BinOp::Add, Val::Param(0), Val::Const(1)), Val::Top);
        assert_eq!(
            binop(BinOp::And, Val::Cred { site: 1, field: 1 }, Val::Const(0xffff_ffff)),
            Val::Cred { site: 1, field: 1 }
        );
    }

    #[test]
    fn sign_extension() {
        assert_eq!(sext(0xff, 8), u64::MAX);
        assert_eq!(sext(0x7f, 8), 0x7f);
        assert_eq!(binop(BinOp::Sext, Val::Const(0xffff_fffe), Val::Const(32)), Val::Const(u64::MAX - 1));
    }

    #[test]
    fn join_forgets_conflicts() {
        let abi = &crate::ir::AARCH64_ABI;
        let mut a = State::entry(abi);
        let mut b = State::entry(abi);
        a.regs[8] = Val::Const(1);
        b.regs[8] = Val::Const(2);
        let def = Def::Fill { insn: 0 };
        a.stack.insert(-8, MemByte::Known { val: 1, def });
        b.stack.insert(-8, MemByte::Known { val: 1, def });
        a.stack.insert(-7, MemByte::Known { val: 1, def });
        assert!(a.join(&b));
        assert_eq!(a.regs[8], Val::Top);
        assert_eq!(a.stack.len(), 1);
        assert!(!a.join(&b));
    }

    #[test]
    fn proc_paths() {
        assert!(is_proc_name_path(b"/proc/%d/comm"));
        assert!(is_proc_name_path(b"/proc/self/cmdline"));
        assert!(!is_proc_name_path(b"/dev/socket/%s"));
    }
}
