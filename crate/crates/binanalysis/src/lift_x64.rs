//! x86_64 → IR.

use iced_x86::{Decoder, DecoderOptions, FlowControl, Instruction, Mnemonic, OpKind, Register};

use crate::ir::{Addr, BinOp, CallTarget, Expr, Flow, Insn, Reg, Src, Stmt, TMP0};

const RAX: Reg = 0;
const RCX: Reg = 1;
const RDX: Reg = 2;
const RSP: Reg = 4;
const RBP: Reg = 5;
const RDI: Reg = 7;
const R11: Reg = 11;

fn gpr(r: Register) -> Option<(Reg, u8)> {
    if !r.is_gpr() {
        return None;
    }
    Some((r.full_register().number() as Reg, r.size() as u8))
}

fn xmm(r: Register) -> Option<u8> {
    (r.is_xmm() || r.is_ymm() || r.is_zmm()).then(|| r.number() as u8)
}

struct Lift<'a> {
    ins: &'a Instruction,
    stmts: Vec<Stmt>,
    next_tmp: Reg,
}

impl Lift<'_> {
    fn tmp(&mut self) -> Reg {
        let t = self.next_tmp;
        self.next_tmp += 1;
        t
    }

    fn assign(&mut self, dst: Reg, expr: Expr, width: u8) {
        // partial writes of 8/16-bit registers merge with the old value
        if width < 4 {
            self.stmts.push(Stmt::Clobber(dst));
        } else {
            self.stmts.push(Stmt::Assign { dst, expr, width });
        }
    }

    fn mem(&self) -> Addr {
        let ins = self.ins;
        if ins.is_ip_rel_memory_operand() {
            return Addr::abs(ins.ip_rel_memory_address());
        }
        let base = gpr(ins.memory_base()).map(|(r, _)| r);
        let index = gpr(ins.memory_index()).map(|(r, _)| (r, ins.memory_index_scale() as u8));
        Addr { base, index, disp: ins.memory_displacement64() as i64 }
    }

    fn mem_size(&self) -> u8 {
        self.ins.memory_size().size() as u8
    }

    /// Value of operand `i`; memory operands are loaded into a temporary.
    fn src(&mut self, i: u32) -> Option<Src> {
        let ins = self.ins;
        Some(match ins.op_kind(i) {
            OpKind::Register => Src::Reg(gpr(ins.op_register(i))?.0),
            OpKind::Immediate8
            | OpKind::Immediate16
            | OpKind::Immediate32
            | OpKind::Immediate64
            | OpKind::Immediate8to16
            | OpKind::Immediate8to32
            | OpKind::Immediate8to64
            | OpKind::Immediate32to64 => Src::Imm(ins.immediate(i)),
            OpKind::Memory => {
                let t = self.tmp();
                let size = self.mem_size();
                self.stmts.push(Stmt::Assign {
                    dst: t,
                    expr: Expr::Load { addr: self.mem(), size, signed: false },
                    width: 8,
                });
                Src::Reg(t)
            }
            _ => return None,
        })
    }

    fn op_width(&self, i: u32) -> u8 {
        match self.ins.op_kind(i) {
            OpKind::Register => self.ins.op_register(i).size() as u8,
            OpKind::Memory => self.mem_size(),
            _ => 8,
        }
    }

    /// Writes `expr` to operand 0.
    fn write0(&mut self, expr: Expr) {
        let ins = self.ins;
        match ins.op0_kind() {
            OpKind::Register => {
                if let Some((r, w)) = gpr(ins.op0_register()) {
                    self.assign(r, expr, w);
                } else if let Some(v) = xmm(ins.op0_register()) {
                    self.stmts.push(Stmt::VClobber(v));
                }
            }
            OpKind::Memory => {
                let size = self.mem_size();
                let src = match expr {
                    Expr::Src(s) => s,
                    e => {
                        let t = self.tmp();
                        self.stmts.push(Stmt::Assign { dst: t, expr: e, width: 8 });
                        Src::Reg(t)
                    }
                };
                let addr = self.mem();
                self.stmts.push(Stmt::Store { addr, src, size });
            }
            _ => {}
        }
    }

    fn clobber0(&mut self) {
        let ins = self.ins;
        if ins.op_count() == 0 {
            return;
        }
        match ins.op0_kind() {
            OpKind::Register => {
                if let Some((r, _)) = gpr(ins.op0_register()) {
                    self.stmts.push(Stmt::Clobber(r));
                } else if let Some(v) = xmm(ins.op0_register()) {
                    self.stmts.push(Stmt::VClobber(v));
                }
            }
            OpKind::Memory => {
                let t = self.tmp();
                self.stmts.push(Stmt::Clobber(t));
                let addr = self.mem();
                let size = self.mem_size().max(1);
                self.stmts.push(Stmt::Store { addr, src: Src::Reg(t), size });
            }
            _ => {}
        }
    }
}

pub fn lift(bytes: &[u8], pc: u64) -> Option<Insn> {
    let mut dec = Decoder::with_ip(64, bytes, pc, DecoderOptions::NONE);
    if !dec.can_decode() {
        return None;
    }
    let ins = dec.decode();
    if ins.is_invalid() {
        return None;
    }
    let mut l = Lift { ins: &ins, stmts: Vec::new(), next_tmp: TMP0 };
    let flow = lift_insn(&mut l);
    Some(Insn { addr: pc, len: ins.len() as u8, stmts: l.stmts, flow, text: format!("{ins}") })
}

fn lift_insn(l: &mut Lift) -> Flow {
    let ins = l.ins;
    match ins.flow_control() {
        FlowControl::UnconditionalBranch => return Flow::Jump(ins.near_branch_target()),
        FlowControl::ConditionalBranch => return Flow::CondJump(ins.near_branch_target()),
        FlowControl::IndirectBranch => return Flow::IndirectJump,
        FlowControl::Return => return Flow::Return,
        FlowControl::Call => {
            l.stmts.push(Stmt::Call(CallTarget::Direct(ins.near_branch_target())));
            return Flow::Next;
        }
        FlowControl::IndirectCall => {
            if let Some(s) = l.src(0) {
                l.stmts.push(Stmt::Call(CallTarget::Indirect(s)));
            }
            return Flow::Next;
        }
        FlowControl::Exception => return Flow::Stop,
        FlowControl::Interrupt => {
            for r in [RAX, RCX, R11] {
                l.stmts.push(Stmt::Clobber(r));
            }
            return if ins.mnemonic() == Mnemonic::Int3 { Flow::Stop } else { Flow::Next };
        }
        _ => {}
    }
    if ins.mnemonic() == Mnemonic::Hlt || ins.mnemonic() == Mnemonic::Ud2 {
        return Flow::Stop;
    }

    let two_same_regs = ins.op_count() == 2
        && ins.op0_kind() == OpKind::Register
        && ins.op1_kind() == OpKind::Register
        && ins.op0_register() == ins.op1_register();

    match ins.mnemonic() {
        Mnemonic::Mov => {
            let Some(s) = l.src(1) else {
                l.clobber0();
                return Flow::Next;
            };
            l.write0(Expr::Src(s));
        }
        Mnemonic::Movzx | Mnemonic::Movsx | Mnemonic::Movsxd => {
            let signed = ins.mnemonic() != Mnemonic::Movzx;
            let size = l.op_width(1);
            let expr = match ins.op1_kind() {
                OpKind::Memory => Expr::Load { addr: l.mem(), size, signed },
                _ => match l.src(1) {
                    Some(s) if signed => Expr::Bin(BinOp::Sext, s, Src::Imm(size as u64 * 8)),
                    Some(s) => Expr::Bin(BinOp::And, s, Src::Imm((1u64 << (size * 8).min(63)) - 1)),
                    None => {
                        l.clobber0();
                        return Flow::Next;
                    }
                },
            };
            l.write0(expr);
        }
        Mnemonic::Lea => {
            let addr = l.mem();
            l.write0(Expr::AddrOf(addr));
        }
        Mnemonic::Xor | Mnemonic::Sub if two_same_regs => l.write0(Expr::Src(Src::Imm(0))),
        Mnemonic::Add
        | Mnemonic::Sub
        | Mnemonic::And
        | Mnemonic::Or
        | Mnemonic::Xor
        | Mnemonic::Shl
        | Mnemonic::Shr
        | Mnemonic::Sar
        | Mnemonic::Imul
            if ins.op_count() >= 2 =>
        {
            let op = match ins.mnemonic() {
                Mnemonic::Add => BinOp::Add,
                Mnemonic::Sub => BinOp::Sub,
                Mnemonic::And => BinOp::And,
                Mnemonic::Or => BinOp::Or,
                Mnemonic::Xor => BinOp::Xor,
                Mnemonic::Shl => BinOp::Shl,
                Mnemonic::Shr => BinOp::Shr,
                Mnemonic::Sar => BinOp::Sar,
                _ => BinOp::Mul,
            };
            // imul r, r/m, imm
            let (a, b) = if ins.op_count() == 3 { (l.src(1), l.src(2)) } else { (l.src(0), l.src(1)) };
            match (a, b) {
                (Some(a), Some(b)) => {
                    if ins.mnemonic() == Mnemonic::Sub {
                        l.stmts.push(Stmt::Cmp(a, b));
                    }
                    l.write0(Expr::Bin(op, a, b));
                }
                _ => l.clobber0(),
            }
        }
        Mnemonic::Cmp => {
            if let (Some(a), Some(b)) = (l.src(0), l.src(1)) {
                l.stmts.push(Stmt::Cmp(a, b));
            }
        }
        Mnemonic::Test => {
            if let (Some(a), Some(b)) = (l.src(0), l.src(1)) {
                l.stmts.push(Stmt::Test(a, b));
            }
        }
        Mnemonic::Push => {
            let s = l.src(0).unwrap_or(Src::Imm(0));
            l.stmts.push(Stmt::Assign { dst: RSP, expr: Expr::Bin(BinOp::Sub, Src::Reg(RSP), Src::Imm(8)), width: 8 });
            l.stmts.push(Stmt::Store { addr: Addr::base_disp(RSP, 0), src: s, size: 8 });
        }
        Mnemonic::Pop => {
            let load = Expr::Load { addr: Addr::base_disp(RSP, 0), size: 8, signed: false };
            let t = l.tmp();
            l.stmts.push(Stmt::Assign { dst: t, expr: load, width: 8 });
            l.stmts.push(Stmt::Assign { dst: RSP, expr: Expr::Bin(BinOp::Add, Src::Reg(RSP), Src::Imm(8)), width: 8 });
            l.write0(Expr::Src(Src::Reg(t)));
        }
        Mnemonic::Leave => {
            l.stmts.push(Stmt::Assign { dst: RSP, expr: Expr::Src(Src::Reg(RBP)), width: 8 });
            l.stmts.push(Stmt::Assign {
                dst: RBP,
                expr: Expr::Load { addr: Addr::base_disp(RSP, 0), size: 8, signed: false },
                width: 8,
            });
            l.stmts.push(Stmt::Assign { dst: RSP, expr: Expr::Bin(BinOp::Add, Src::Reg(RSP), Src::Imm(8)), width: 8 });
        }
        Mnemonic::Cdqe => {
            l.stmts.push(Stmt::Assign { dst: RAX, expr: Expr::Bin(BinOp::Sext, Src::Reg(RAX), Src::Imm(32)), width: 8 })
        }
        Mnemonic::Cdq | Mnemonic::Cqo => l.stmts.push(Stmt::Clobber(RDX)),
        Mnemonic::Nop | Mnemonic::Endbr64 | Mnemonic::Endbr32 | Mnemonic::Prefetchnta | Mnemonic::Prefetcht0 => {}
        Mnemonic::Movaps
        | Mnemonic::Movups
        | Mnemonic::Movdqa
        | Mnemonic::Movdqu
        | Mnemonic::Movapd
        | Mnemonic::Movupd => match (ins.op0_kind(), ins.op1_kind()) {
            (OpKind::Register, OpKind::Memory) => match xmm(ins.op0_register()) {
                Some(v) => l.stmts.push(Stmt::VLoad { v, addr: l.mem(), size: l.mem_size() }),
                None => l.clobber0(),
            },
            (OpKind::Memory, OpKind::Register) => match xmm(ins.op1_register()) {
                Some(v) => l.stmts.push(Stmt::VStore { v, addr: l.mem(), size: l.mem_size() }),
                None => l.clobber0(),
            },
            _ => l.clobber0(),
        },
        Mnemonic::Pxor | Mnemonic::Xorps | Mnemonic::Xorpd if two_same_regs => {
            if let Some(v) = xmm(ins.op0_register()) {
                l.stmts.push(Stmt::VZero(v));
            }
        }
        Mnemonic::Stosb
        | Mnemonic::Stosd
        | Mnemonic::Stosq
        | Mnemonic::Stosw
        | Mnemonic::Movsb
        | Mnemonic::Movsq
        | Mnemonic::Movsd
            if ins.has_rep_prefix() =>
        {
            // bulk fill/copy with unknown extent; treat as opaque
            for r in [RCX, RDI, 6] {
                l.stmts.push(Stmt::Clobber(r));
            }
        }
        _ => l.clobber0(),
    }
    Flow::Next
}
