//! Function discovery and control-flow graphs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use crate::elf::{prologue_starts, Arch, BinaryImage, IMPORT_BASE};
use crate::ir::{Abi, BinOp, CallTarget, Expr, Flow, Insn, Src, Stmt, AARCH64_ABI, X86_64_ABI};
use crate::{lift_a64, lift_x64};

const NORETURN: &[&str] = &["exit", "_exit", "abort", "__stack_chk_fail", "pthread_exit", "__assert_fail", "_Exit"];

#[derive(Clone, Debug)]
pub struct Block {
    pub start: u64,
    pub insns: Vec<Insn>,
    pub succs: Vec<u64>,
}

impl Block {
    pub fn end(&self) -> u64 {
        self.insns.last().map_or(self.start, |i| i.addr + i.len as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(untagged)]
pub enum Callee {
    Symbol(String),
    Addr(u64),
    Unresolved,
}

impl Callee {
    pub fn symbol(&self) -> Option<&str> {
        match self {
            Callee::Symbol(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Function {
    pub entry: u64,
    pub name: Option<String>,
    pub blocks: BTreeMap<u64, Block>,
    /// Constants materialised in the body that point at mapped data.
    pub data_refs: BTreeSet<u64>,
    /// Argument registers read before written.
    pub arity: usize,
}

impl Function {
    pub fn block_of(&self, addr: u64) -> Option<&Block> {
        let (_, b) = self.blocks.range(..=addr).next_back()?;
        (addr < b.end()).then_some(b)
    }

    pub fn insns(&self) -> impl Iterator<Item = &Insn> {
        self.blocks.values().flat_map(|b| b.insns.iter())
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.block_of(addr).is_some()
    }

    fn preds(&self) -> BTreeMap<u64, Vec<u64>> {
        let mut preds: BTreeMap<u64, Vec<u64>> = self.blocks.keys().map(|k| (*k, Vec::new())).collect();
        for b in self.blocks.values() {
            for s in &b.succs {
                if let Some(p) = preds.get_mut(s) {
                    p.push(b.start);
                }
            }
        }
        preds
    }

    /// Dominator sets per block, iterative data-flow formulation.
    pub fn dominators(&self) -> BTreeMap<u64, BTreeSet<u64>> {
        let all: BTreeSet<u64> = self.blocks.keys().copied().collect();
        let preds = self.preds();
        let reachable = self.reachable();
        let mut dom: BTreeMap<u64, BTreeSet<u64>> = all.iter().map(|b| (*b, all.clone())).collect();
        dom.insert(self.entry, BTreeSet::from([self.entry]));
        let mut changed = true;
        while changed {
            changed = false;
            for b in all.iter().filter(|b| **b != self.entry && reachable.contains(b)) {
                let mut new: Option<BTreeSet<u64>> = None;
                for p in preds[b].iter().filter(|p| reachable.contains(p)) {
                    new = Some(match new {
                        None => dom[p].clone(),
                        Some(acc) => acc.intersection(&dom[p]).copied().collect(),
                    });
                }
                let mut new = new.unwrap_or_default();
                new.insert(*b);
                if new != dom[b] {
                    dom.insert(*b, new);
                    changed = true;
                }
            }
        }
        dom
    }

    fn reachable(&self) -> BTreeSet<u64> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![self.entry];
        while let Some(b) = stack.pop() {
            if self.blocks.contains_key(&b) && seen.insert(b) {
                stack.extend(self.blocks[&b].succs.iter().copied());
            }
        }
        seen
    }

    /// Does instruction `a` dominate instruction `b`?
    pub fn dominates(&self, dom: &BTreeMap<u64, BTreeSet<u64>>, a: u64, b: u64) -> bool {
        let (Some(ba), Some(bb)) = (self.block_of(a), self.block_of(b)) else {
            return false;
        };
        if ba.start == bb.start {
            return a <= b;
        }
        dom.get(&bb.start).is_some_and(|d| d.contains(&ba.start))
    }

    /// Bodies of natural loops (header, member blocks).
    pub fn natural_loops(&self, dom: &BTreeMap<u64, BTreeSet<u64>>) -> Vec<(u64, BTreeSet<u64>)> {
        let preds = self.preds();
        let mut loops = Vec::new();
        for b in self.blocks.values() {
            for h in &b.succs {
                if !dom.get(&b.start).is_some_and(|d| d.contains(h)) {
                    continue;
                }
                let mut body = BTreeSet::from([*h, b.start]);
                let mut stack = vec![b.start];
                while let Some(n) = stack.pop() {
                    if n == *h {
                        continue;
                    }
                    for p in &preds[&n] {
                        if body.insert(*p) {
                            stack.push(*p);
                        }
                    }
                }
                loops.push((*h, body));
            }
        }
        loops
    }
}

#[derive(Clone, Debug, Default)]
pub struct Cfg {
    pub functions: BTreeMap<u64, Function>,
    pub call_edges: BTreeMap<u64, Callee>,
    /// Callsites whose target could not be determined without guessing.
    pub unresolved_calls: BTreeSet<u64>,
    pub undecodable: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Callsite {
    pub addr: u64,
    pub function: u64,
    pub symbol: String,
}

impl Cfg {
    pub fn function_of(&self, addr: u64) -> Option<&Function> {
        let (_, f) = self.functions.range(..=addr).rev().find(|(_, f)| f.contains(addr))?;
        Some(f)
    }

    /// Callers of `entry`: (callsite, caller entry).
    pub fn callers_of(&self, entry: u64) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        for f in self.functions.values() {
            for i in f.insns() {
                if i.call_target() == Some(CallTarget::Direct(entry)) {
                    out.push((i.addr, f.entry));
                }
            }
        }
        out
    }
}

pub fn abi(arch: Arch) -> &'static Abi {
    match arch {
        Arch::Aarch64 => &AARCH64_ABI,
        Arch::X86_64 => &X86_64_ABI,
    }
}

pub fn lift_at(bin: &BinaryImage, addr: u64) -> Option<Insn> {
    let s = bin.section_at(addr).filter(|s| s.exec && !s.nobits)?;
    let off = (addr - s.vaddr) as usize;
    let bytes = &s.data[off..];
    match bin.arch {
        Arch::Aarch64 => lift_a64::lift(bytes, addr),
        Arch::X86_64 => lift_x64::lift(&bytes[..bytes.len().min(15)], addr),
    }
}

/// Discovers functions and builds per-function CFGs. Indirect jumps end a
/// block with no successors.
pub fn build_cfg(bin: &BinaryImage) -> Cfg {
    let mut cfg = Cfg::default();
    let text_fn = |a: &u64| bin.is_exec(*a) && !bin.is_plt(*a) && !bin.is_import(*a);
    let mut starts: BTreeSet<u64> = bin.symbols.keys().copied().filter(text_fn).collect();
    if text_fn(&bin.entry) {
        starts.insert(bin.entry);
    }
    if !bin.has_symtab {
        starts.extend(prologue_starts(bin));
    }
    let mut queue: VecDeque<u64> = starts.iter().copied().collect();
    while let Some(entry) = queue.pop_front() {
        if cfg.functions.contains_key(&entry) {
            continue;
        }
        let (func, new_targets, undecodable) = build_function(bin, entry, &starts);
        cfg.undecodable += undecodable;
        for t in new_targets {
            if text_fn(&t) && starts.insert(t) {
                queue.push_back(t);
            }
        }
        cfg.functions.insert(entry, func);
    }
    // resolve call edges
    for f in cfg.functions.values() {
        for b in f.blocks.values() {
            let mut consts = ConstTracker::new(bin);
            for i in &b.insns {
                if let Some(target) = i.call_target() {
                    let callee = match target {
                        CallTarget::Direct(t) => match bin.name_at(t) {
                            Some(n) => Callee::Symbol(n.to_string()),
                            None => Callee::Addr(t),
                        },
                        CallTarget::Indirect(src) => match consts.value(src, i) {
                            Some(v) => match bin.name_at(v) {
                                Some(n) => Callee::Symbol(n.to_string()),
                                None if cfg.functions.contains_key(&v) => Callee::Addr(v),
                                None => Callee::Unresolved,
                            },
                            None => Callee::Unresolved,
                        },
                    };
                    if callee == Callee::Unresolved {
                        cfg.unresolved_calls.insert(i.addr);
                    }
                    cfg.call_edges.insert(i.addr, callee);
                }
                consts.step(i);
            }
        }
    }
    cfg
}

fn build_function(bin: &BinaryImage, entry: u64, starts: &BTreeSet<u64>) -> (Function, Vec<u64>, usize) {
    let mut insns: BTreeMap<u64, Insn> = BTreeMap::new();
    let mut leaders = BTreeSet::from([entry]);
    let mut queue = vec![entry];
    let mut call_targets = Vec::new();
    let mut undecodable = 0;

    while let Some(start) = queue.pop() {
        let mut addr = start;
        loop {
            if insns.contains_key(&addr) {
                leaders.insert(addr);
                break;
            }
            let Some(mut insn) = lift_at(bin, addr) else {
                undecodable += 1;
                break;
            };
            let next = addr + insn.len as u64;
            let mut stop = false;
            if let Some(CallTarget::Direct(t)) = insn.call_target() {
                call_targets.push(t);
                if bin.name_at(t).is_some_and(|n| NORETURN.contains(&n)) {
                    insn.flow = Flow::Stop;
                }
            }
            match insn.flow {
                Flow::Next => {}
                Flow::Jump(t) => {
                    if (t != entry && starts.contains(&t)) || bin.is_import(t) || bin.is_plt(t) {
                        // tail call
                        insn.stmts.push(Stmt::Call(CallTarget::Direct(t)));
                        insn.flow = Flow::Return;
                        call_targets.push(t);
                    } else {
                        leaders.insert(t);
                        queue.push(t);
                    }
                    stop = true;
                }
                Flow::CondJump(t) => {
                    leaders.insert(t);
                    leaders.insert(next);
                    queue.push(t);
                }
                Flow::IndirectJump | Flow::Return | Flow::Stop => stop = true,
            }
            let flow = insn.flow;
            insns.insert(addr, insn);
            if stop {
                break;
            }
            if matches!(flow, Flow::CondJump(_)) {
                queue.push(next);
                break;
            }
            if starts.contains(&next) {
                break;
            }
            addr = next;
        }
    }

    // split into blocks
    let mut blocks: BTreeMap<u64, Block> = BTreeMap::new();
    let mut cur: Option<Block> = None;
    for (addr, insn) in insns {
        let starts_new = match &cur {
            None => true,
            Some(b) => leaders.contains(&addr) || b.end() != addr,
        };
        if starts_new {
            if let Some(b) = cur.take() {
                blocks.insert(b.start, b);
            }
            cur = Some(Block { start: addr, insns: Vec::new(), succs: Vec::new() });
        }
        let b = cur.as_mut().expect("block open");
        let terminal = !matches!(insn.flow, Flow::Next);
        b.insns.push(insn);
        if terminal {
            blocks.insert(b.start, cur.take().expect("block open"));
        }
    }
    if let Some(b) = cur.take() {
        blocks.insert(b.start, b);
    }
    let keys: BTreeSet<u64> = blocks.keys().copied().collect();
    for b in blocks.values_mut() {
        let last = b.insns.last().expect("non-empty block");
        let fall = last.addr + last.len as u64;
        b.succs = match last.flow {
            Flow::Next => vec![fall],
            Flow::Jump(t) => vec![t],
            Flow::CondJump(t) => vec![t, fall],
            _ => vec![],
        };
        b.succs.retain(|s| keys.contains(s));
        b.succs.dedup();
    }

    let mut data_refs = BTreeSet::new();
    for b in blocks.values() {
        let mut consts = ConstTracker::new(bin);
        for i in &b.insns {
            consts.step(i);
            data_refs.extend(consts.fresh.drain(..).filter(|v| bin.section_at(*v).is_some_and(|s| !s.exec)));
        }
    }

    let mut func = Function { entry, name: bin.symbols.get(&entry).cloned(), blocks, data_refs, arity: 0 };
    func.arity = arity_scan(&func, abi(bin.arch));
    (func, call_targets, undecodable)
}

/// Arguments read before written, scanning in address order.
fn arity_scan(func: &Function, abi: &Abi) -> usize {
    let mut written = BTreeSet::new();
    let mut max = 0;
    let read = |r: u8, written: &BTreeSet<u8>, max: &mut usize| {
        if let Some(pos) = abi.args.iter().position(|a| *a == r) {
            if !written.contains(&r) {
                *max = (*max).max(pos + 1);
            }
        }
    };
    for i in func.insns() {
        for s in &i.stmts {
            let mut srcs: Vec<u8> = Vec::new();
            let mut src = |s: &Src| {
                if let Src::Reg(r) = s {
                    srcs.push(*r)
                }
            };
            let addr_regs = |a: &crate::ir::Addr, out: &mut Vec<u8>| {
                out.extend(a.base);
                out.extend(a.index.map(|(r, _)| r));
            };
            let mut dst = None;
            match s {
                Stmt::Assign { dst: d, expr, .. } => {
                    match expr {
                        Expr::Src(a) => src(a),
                        Expr::Bin(_, a, b) => {
                            src(a);
                            src(b)
                        }
                        Expr::AddrOf(a) | Expr::Load { addr: a, .. } => addr_regs(a, &mut srcs),
                    }
                    dst = Some(*d);
                }
                Stmt::Store { addr, src: s, .. } => {
                    src(s);
                    addr_regs(addr, &mut srcs);
                }
                Stmt::Cmp(a, b) | Stmt::Test(a, b) => {
                    src(a);
                    src(b)
                }
                Stmt::VLoad { addr, .. } | Stmt::VStore { addr, .. } => addr_regs(addr, &mut srcs),
                Stmt::Call(_) => {
                    // args of the first call are ours only if read above
                    for r in abi.caller_saved {
                        written.insert(*r);
                    }
                }
                Stmt::Clobber(d) => dst = Some(*d),
                _ => {}
            }
            for r in srcs {
                read(r, &written, &mut max);
            }
            if let Some(d) = dst {
                written.insert(d);
            }
        }
    }
    max
}

/// Block-local constant evaluation used to resolve GOT-indirect calls and
/// collect referenced data addresses.
struct ConstTracker<'a> {
    bin: &'a BinaryImage,
    regs: BTreeMap<u8, u64>,
    fresh: Vec<u64>,
}

impl<'a> ConstTracker<'a> {
    fn new(bin: &'a BinaryImage) -> Self {
        ConstTracker { bin, regs: BTreeMap::new(), fresh: Vec::new() }
    }

    fn src(&self, s: Src) -> Option<u64> {
        match s {
            Src::Imm(i) => Some(i),
            Src::Reg(r) => self.regs.get(&r).copied(),
        }
    }

    fn addr(&self, a: &crate::ir::Addr) -> Option<u64> {
        if a.index.is_some() {
            return None;
        }
        let base = match a.base {
            Some(r) => self.regs.get(&r).copied()?,
            None => 0,
        };
        Some(base.wrapping_add(a.disp as u64))
    }

    /// Value of `s` as seen by the call in `insn` (temporaries included).
    fn value(&mut self, s: Src, insn: &Insn) -> Option<u64> {
        let saved = self.regs.clone();
        for st in &insn.stmts {
            if matches!(st, Stmt::Call(_)) {
                break;
            }
            self.eval(st);
        }
        let v = self.src(s);
        self.regs = saved;
        v.filter(|v| *v >= IMPORT_BASE || self.bin.is_exec(*v))
    }

    fn eval(&mut self, st: &Stmt) {
        match st {
            Stmt::Assign { dst, expr, width } => {
                let v = match expr {
                    Expr::Src(s) => self.src(*s),
                    Expr::Bin(BinOp::Add, a, b) => self.src(*a).zip(self.src(*b)).map(|(a, b)| a.wrapping_add(b)),
                    Expr::Bin(BinOp::Sub, a, b) => self.src(*a).zip(self.src(*b)).map(|(a, b)| a.wrapping_sub(b)),
                    Expr::AddrOf(a) => self.addr(a),
                    Expr::Load { addr, size: 8, .. } => self.addr(addr).and_then(|a| self.bin.read_u64(a)),
                    _ => None,
                };
                let v = v.map(|v| if *width == 4 { v & 0xffff_ffff } else { v });
                match v {
                    Some(v) => {
                        self.regs.insert(*dst, v);
                        self.fresh.push(v);
                    }
                    None => {
                        self.regs.remove(dst);
                    }
                }
            }
            Stmt::Clobber(r) => {
                self.regs.remove(r);
            }
            Stmt::Call(_) => self.regs.clear(),
            _ => {}
        }
    }

    fn step(&mut self, insn: &Insn) {
        for st in &insn.stmts {
            self.eval(st);
        }
    }
}

/// Callsites whose callee symbol is in `symbols`.
pub fn find_callsites(cfg: &Cfg, symbols: &BTreeSet<String>) -> Vec<Callsite> {
    let mut out = Vec::new();
    for (addr, callee) in &cfg.call_edges {
        if let Some(sym) = callee.symbol().filter(|s| symbols.contains(*s)) {
            if let Some(f) = cfg.function_of(*addr) {
                if f.name.as_deref() == Some(sym) {
                    continue;
                }
                out.push(Callsite { addr: *addr, function: f.entry, symbol: sym.to_string() });
            }
        }
    }
    out
}
