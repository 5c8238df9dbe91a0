//! aarch64 → IR.

use yaxpeax_arch::{Decoder, U8Reader};
use yaxpeax_arm::armv8::a64::{InstDecoder, Instruction, Opcode, Operand, SIMDSizeCode, ShiftStyle, SizeCode};

use crate::ir::{Addr, BinOp, CallTarget, Expr, Flow, Insn, Reg, Src, Stmt, TMP0};

#[cfg(test)]
const SP: Reg = 31;

/// Sink for writes to the zero register.
const DISCARD: Reg = TMP0 + 7;

fn width(sz: SizeCode) -> u8 {
    match sz {
        SizeCode::X => 8,
        SizeCode::W => 4,
    }
}

fn vsize(sz: SIMDSizeCode) -> u8 {
    match sz {
        SIMDSizeCode::B => 1,
        SIMDSizeCode::H => 2,
        SIMDSizeCode::S => 4,
        SIMDSizeCode::D => 8,
        SIMDSizeCode::Q => 16,
    }
}

struct Lift {
    pc: u64,
    stmts: Vec<Stmt>,
    next_tmp: Reg,
}

impl Lift {
    fn tmp(&mut self) -> Reg {
        let t = self.next_tmp;
        self.next_tmp += 1;
        t
    }

    fn assign(&mut self, dst: Reg, expr: Expr, width: u8) {
        self.stmts.push(Stmt::Assign { dst, expr, width });
    }

    /// Destination register of an operand, `None` when not a GPR.
    fn dst(&self, op: &Operand) -> Option<(Reg, u8)> {
        match *op {
            Operand::Register(sz, 31) => Some((DISCARD, width(sz))),
            Operand::Register(sz, n) => Some((n as Reg, width(sz))),
            Operand::RegisterOrSP(sz, n) => Some((n as Reg, width(sz))),
            _ => None,
        }
    }

    /// Source value of an operand, emitting shift temporaries as needed.
    fn src(&mut self, op: &Operand) -> Option<Src> {
        Some(match *op {
            Operand::Register(_, 31) => Src::Imm(0),
            Operand::Register(_, n) | Operand::RegisterOrSP(_, n) => Src::Reg(n as Reg),
            Operand::Immediate(i) => Src::Imm(i as u64),
            Operand::Imm64(i) => Src::Imm(i),
            Operand::Imm16(i) => Src::Imm(i as u64),
            Operand::ImmShift(i, sh) => Src::Imm((i as u64) << sh),
            Operand::RegShift(style, amt, sz, n) => {
                let base = if n == 31 { Src::Imm(0) } else { Src::Reg(n as Reg) };
                let op = match style {
                    ShiftStyle::LSL => BinOp::Shl,
                    ShiftStyle::LSR => BinOp::Shr,
                    ShiftStyle::ASR => BinOp::Sar,
                    ShiftStyle::UXTW if amt == 0 => {
                        let t = self.tmp();
                        self.assign(t, Expr::Bin(BinOp::And, base, Src::Imm(0xffff_ffff)), 8);
                        return Some(Src::Reg(t));
                    }
                    ShiftStyle::SXTW if amt == 0 => {
                        let t = self.tmp();
                        self.assign(t, Expr::Bin(BinOp::Sext, base, Src::Imm(32)), 8);
                        return Some(Src::Reg(t));
                    }
                    ShiftStyle::UXTX | ShiftStyle::SXTX => BinOp::Shl,
                    _ => return None,
                };
                if amt == 0 {
                    return Some(base);
                }
                let t = self.tmp();
                self.assign(t, Expr::Bin(op, base, Src::Imm(amt as u64)), width(sz));
                Src::Reg(t)
            }
            _ => return None,
        })
    }

    /// Effective address of a memory operand, plus a pending base update
    /// applied after the access.
    fn mem(&mut self, op: &Operand) -> Option<(Addr, Option<(Reg, i64)>)> {
        Some(match *op {
            Operand::RegPreIndex(base, off, wb) => {
                let base = base as Reg;
                if wb {
                    self.assign(base, Expr::Bin(BinOp::Add, Src::Reg(base), Src::Imm(off as i64 as u64)), 8);
                    (Addr::base_disp(base, 0), None)
                } else {
                    (Addr::base_disp(base, off as i64), None)
                }
            }
            Operand::RegPostIndex(base, off) => (Addr::base_disp(base as Reg, 0), Some((base as Reg, off as i64))),
            Operand::RegRegOffset(base, idx, _sz, style, amt) => {
                let index = match style {
                    ShiftStyle::LSL | ShiftStyle::UXTX | ShiftStyle::SXTX | ShiftStyle::SXTW | ShiftStyle::UXTW => {
                        (idx as Reg, 1u8 << amt)
                    }
                    _ => return None,
                };
                if idx == 31 {
                    (Addr::base_disp(base as Reg, 0), None)
                } else {
                    (Addr { base: Some(base as Reg), index: Some(index), disp: 0 }, None)
                }
            }
            Operand::PCOffset(off) => (Addr::abs(self.pc.wrapping_add(off as u64)), None),
            _ => return None,
        })
    }

    fn post(&mut self, update: Option<(Reg, i64)>) {
        if let Some((r, off)) = update {
            self.assign(r, Expr::Bin(BinOp::Add, Src::Reg(r), Src::Imm(off as u64)), 8);
        }
    }

    fn clobber_dst(&mut self, ins: &Instruction) {
        match ins.operands[0] {
            Operand::Register(_, n) | Operand::RegisterOrSP(_, n)
                if n != 31 || matches!(ins.operands[0], Operand::RegisterOrSP(..)) =>
            {
                self.stmts.push(Stmt::Clobber(n as Reg))
            }
            Operand::SIMDRegister(_, v)
            | Operand::SIMDRegisterElements(_, v, _)
            | Operand::SIMDRegisterElementsLane(_, v, _, _) => self.stmts.push(Stmt::VClobber(v as u8)),
            _ => {}
        }
    }
}

/// Decodes and lifts one instruction.
pub fn lift(bytes: &[u8], pc: u64) -> Option<Insn> {
    let word = bytes.get(..4)?;
    let mut reader = U8Reader::new(word);
    let ins = InstDecoder::default().decode(&mut reader).ok()?;
    let mut l = Lift { pc, stmts: Vec::new(), next_tmp: TMP0 };
    let flow = lift_insn(&mut l, &ins);
    Some(Insn { addr: pc, len: 4, stmts: l.stmts, flow, text: ins.to_string() })
}

fn lift_insn(l: &mut Lift, ins: &Instruction) -> Flow {
    let ops = &ins.operands;
    let pc = l.pc;
    let target = |op: &Operand| match *op {
        Operand::PCOffset(off) => Some(pc.wrapping_add(off as u64)),
        _ => None,
    };
    match ins.opcode {
        Opcode::B => return target(&ops[0]).map_or(Flow::Stop, Flow::Jump),
        Opcode::Bcc(_) | Opcode::BCcc(_) => return target(&ops[0]).map_or(Flow::Stop, Flow::CondJump),
        Opcode::CBZ | Opcode::CBNZ => {
            if let Some(s) = l.src(&ops[0]) {
                l.stmts.push(Stmt::Cmp(s, Src::Imm(0)));
            }
            return target(&ops[1]).map_or(Flow::Stop, Flow::CondJump);
        }
        Opcode::TBZ | Opcode::TBNZ => {
            if let (Some(s), Operand::Immediate(bit)) = (l.src(&ops[0]), ops[1]) {
                l.stmts.push(Stmt::Test(s, Src::Imm(1u64 << (bit & 63))));
            }
            return target(&ops[2]).map_or(Flow::Stop, Flow::CondJump);
        }
        Opcode::BL => {
            if let Some(t) = target(&ops[0]) {
                l.stmts.push(Stmt::Call(CallTarget::Direct(t)));
            }
            return Flow::Next;
        }
        Opcode::BLR | Opcode::BLRAA | Opcode::BLRAAZ | Opcode::BLRAB | Opcode::BLRABZ => {
            if let Some(s) = l.src(&ops[0]) {
                l.stmts.push(Stmt::Call(CallTarget::Indirect(s)));
            }
            return Flow::Next;
        }
        Opcode::BR | Opcode::BRAA | Opcode::BRAAZ | Opcode::BRAB | Opcode::BRABZ => return Flow::IndirectJump,
        Opcode::RET | Opcode::RETAA | Opcode::RETAB => return Flow::Return,
        Opcode::BRK | Opcode::UDF | Opcode::HLT | Opcode::Invalid => return Flow::Stop,
        Opcode::SVC => {
            l.stmts.push(Stmt::Clobber(0));
            return Flow::Next;
        }
        _ => {}
    }

    match ins.opcode {
        Opcode::MOVZ | Opcode::MOVN | Opcode::MOVK => {
            let (Some((d, w)), Operand::ImmShift(imm, sh)) = (l.dst(&ops[0]), ops[1]) else {
                l.clobber_dst(ins);
                return Flow::Next;
            };
            let v = (imm as u64) << sh;
            match ins.opcode {
                Opcode::MOVZ => l.assign(d, Expr::Src(Src::Imm(v)), w),
                Opcode::MOVN => l.assign(d, Expr::Src(Src::Imm(!v)), w),
                _ => {
                    l.assign(d, Expr::Bin(BinOp::And, Src::Reg(d), Src::Imm(!(0xffffu64 << sh))), w);
                    l.assign(d, Expr::Bin(BinOp::Or, Src::Reg(d), Src::Imm(v)), w);
                }
            }
        }
        Opcode::ADR | Opcode::ADRP => {
            if let (Some((d, _)), Operand::PCOffset(off)) = (l.dst(&ops[0]), ops[1]) {
                let base = if ins.opcode == Opcode::ADRP { pc & !0xfff } else { pc };
                l.assign(d, Expr::Src(Src::Imm(base.wrapping_add(off as u64))), 8);
            }
        }
        Opcode::ADD
        | Opcode::SUB
        | Opcode::ADDS
        | Opcode::SUBS
        | Opcode::AND
        | Opcode::ANDS
        | Opcode::ORR
        | Opcode::EOR
        | Opcode::LSLV
        | Opcode::LSRV
        | Opcode::ASRV => {
            let op = match ins.opcode {
                Opcode::ADD | Opcode::ADDS => BinOp::Add,
                Opcode::SUB | Opcode::SUBS => BinOp::Sub,
                Opcode::AND | Opcode::ANDS => BinOp::And,
                Opcode::ORR => BinOp::Or,
                Opcode::EOR => BinOp::Xor,
                Opcode::LSLV => BinOp::Shl,
                Opcode::LSRV => BinOp::Shr,
                _ => BinOp::Sar,
            };
            let (Some((d, w)), Some(a), Some(b)) = (l.dst(&ops[0]), l.src(&ops[1]), l.src(&ops[2])) else {
                l.clobber_dst(ins);
                return Flow::Next;
            };
            match ins.opcode {
                Opcode::SUBS => l.stmts.push(Stmt::Cmp(a, b)),
                Opcode::ADDS => match b {
                    Src::Imm(i) => {
                        let mask = if w == 4 { 0xffff_ffff } else { u64::MAX };
                        l.stmts.push(Stmt::Cmp(a, Src::Imm(i.wrapping_neg() & mask)));
                    }
                    _ => l.stmts.push(Stmt::Test(a, b)),
                },
                Opcode::ANDS => l.stmts.push(Stmt::Test(a, b)),
                _ => {}
            }
            if d != DISCARD {
                l.assign(d, Expr::Bin(op, a, b), w);
            }
        }
        Opcode::MADD => {
            let (Some((d, w)), Some(a), Some(b)) = (l.dst(&ops[0]), l.src(&ops[1]), l.src(&ops[2])) else {
                l.clobber_dst(ins);
                return Flow::Next;
            };
            if matches!(l.src(&ops[3]), Some(Src::Imm(0))) {
                l.assign(d, Expr::Bin(BinOp::Mul, a, b), w);
            } else {
                l.stmts.push(Stmt::Clobber(d));
            }
        }
        Opcode::UBFM | Opcode::SBFM => {
            let (Some((d, w)), Some(a), Operand::Immediate(immr), Operand::Immediate(imms)) =
                (l.dst(&ops[0]), l.src(&ops[1]), ops[2], ops[3])
            else {
                l.clobber_dst(ins);
                return Flow::Next;
            };
            let bits = w as u32 * 8;
            let signed = ins.opcode == Opcode::SBFM;
            let expr = if imms == bits - 1 {
                Some(Expr::Bin(if signed { BinOp::Sar } else { BinOp::Shr }, a, Src::Imm(immr as u64)))
            } else if !signed && imms + 1 == immr {
                Some(Expr::Bin(BinOp::Shl, a, Src::Imm((bits - 1 - imms) as u64)))
            } else if immr == 0 && !signed {
                Some(Expr::Bin(BinOp::And, a, Src::Imm((1u64 << (imms + 1)) - 1)))
            } else if immr == 0 && signed {
                Some(Expr::Bin(BinOp::Sext, a, Src::Imm((imms + 1) as u64)))
            } else {
                None
            };
            match expr {
                Some(e) => l.assign(d, e, w),
                None => l.stmts.push(Stmt::Clobber(d)),
            }
        }
        Opcode::LDR
        | Opcode::LDUR
        | Opcode::LDRB
        | Opcode::LDURB
        | Opcode::LDRH
        | Opcode::LDURH
        | Opcode::LDRSW
        | Opcode::LDURSW
        | Opcode::LDRSB
        | Opcode::LDURSB
        | Opcode::LDRSH
        | Opcode::LDURSH => {
            let Some((addr, upd)) = l.mem(&ops[1]) else {
                l.clobber_dst(ins);
                return Flow::Next;
            };
            match ops[0] {
                Operand::SIMDRegister(sz, v) => l.stmts.push(Stmt::VLoad { v: v as u8, addr, size: vsize(sz) }),
                _ => {
                    let Some((d, w)) = l.dst(&ops[0]) else {
                        return Flow::Next;
                    };
                    let (size, signed) = match ins.opcode {
                        Opcode::LDRB | Opcode::LDURB => (1, false),
                        Opcode::LDRH | Opcode::LDURH => (2, false),
                        Opcode::LDRSB | Opcode::LDURSB => (1, true),
                        Opcode::LDRSH | Opcode::LDURSH => (2, true),
                        Opcode::LDRSW | Opcode::LDURSW => (4, true),
                        _ => (w, false),
                    };
                    l.assign(d, Expr::Load { addr, size, signed }, w);
                }
            }
            l.post(upd);
        }
        Opcode::STR | Opcode::STUR | Opcode::STRB | Opcode::STURB | Opcode::STRH | Opcode::STURH => {
            let Some((addr, upd)) = l.mem(&ops[1]) else {
                return Flow::Next;
            };
            match ops[0] {
                Operand::SIMDRegister(sz, v) => l.stmts.push(Stmt::VStore { v: v as u8, addr, size: vsize(sz) }),
                Operand::Register(sz, _) => {
                    let size = match ins.opcode {
                        Opcode::STRB | Opcode::STURB => 1,
                        Opcode::STRH | Opcode::STURH => 2,
                        _ => width(sz),
                    };
                    if let Some(src) = l.src(&ops[0]) {
                        l.stmts.push(Stmt::Store { addr, src, size });
                    }
                }
                _ => {}
            }
            l.post(upd);
        }
        Opcode::LDP | Opcode::STP | Opcode::LDPSW | Opcode::LDNP | Opcode::STNP => {
            let Some((addr, upd)) = l.mem(&ops[2]) else {
                l.clobber_dst(ins);
                return Flow::Next;
            };
            let load = matches!(ins.opcode, Opcode::LDP | Opcode::LDPSW | Opcode::LDNP);
            for (i, op) in ops[..2].iter().enumerate() {
                match *op {
                    Operand::SIMDRegister(sz, v) => {
                        let size = vsize(sz);
                        let a = Addr { disp: addr.disp + i as i64 * size as i64, ..addr };
                        l.stmts.push(if load {
                            Stmt::VLoad { v: v as u8, addr: a, size }
                        } else {
                            Stmt::VStore { v: v as u8, addr: a, size }
                        });
                    }
                    Operand::Register(sz, n) => {
                        let size = if ins.opcode == Opcode::LDPSW { 4 } else { width(sz) };
                        let a = Addr { disp: addr.disp + i as i64 * size as i64, ..addr };
                        if load {
                            if n != 31 {
                                l.assign(
                                    n as Reg,
                                    Expr::Load { addr: a, size, signed: ins.opcode == Opcode::LDPSW },
                                    width(sz).max(size),
                                );
                            }
                        } else {
                            let src = if n == 31 { Src::Imm(0) } else { Src::Reg(n as Reg) };
                            l.stmts.push(Stmt::Store { addr: a, src, size });
                        }
                    }
                    _ => {}
                }
            }
            l.post(upd);
        }
        Opcode::MOVI => {
            if let (
                Operand::SIMDRegisterElements(_, v, _) | Operand::SIMDRegister(_, v),
                Operand::Imm64(0) | Operand::Immediate(0),
            ) = (ops[0], ops[1])
            {
                l.stmts.push(Stmt::VZero(v as u8));
            } else {
                l.clobber_dst(ins);
            }
        }
        Opcode::HINT
        | Opcode::PACIASP
        | Opcode::PACIBSP
        | Opcode::AUTIASP
        | Opcode::AUTIBSP
        | Opcode::DMB(_)
        | Opcode::DSB(_)
        | Opcode::ISB
        | Opcode::PRFM
        | Opcode::PRFUM
        | Opcode::CLREX => {}
        Opcode::CCMP | Opcode::CCMN => {
            if let (Some(a), Some(b)) = (l.src(&ops[0]), l.src(&ops[1])) {
                l.stmts.push(Stmt::Cmp(a, if ins.opcode == Opcode::CCMN { neg(b) } else { b }));
            }
        }
        _ => {
            l.clobber_dst(ins);
            // loads with writeback to a second register are rare; keep SP sane
            for op in &ops[1..] {
                if let Operand::RegPreIndex(b, _, true) | Operand::RegPostIndex(b, _) = *op {
                    l.stmts.push(Stmt::Clobber(b as Reg));
                }
            }
        }
    }
    Flow::Next
}

fn neg(s: Src) -> Src {
    match s {
        Src::Imm(i) => Src::Imm(i.wrapping_neg()),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(word: u32, pc: u64) -> Insn {
        lift(&word.to_le_bytes(), pc).unwrap()
    }

    #[test]
    fn movz_and_bl() {
        // mov w0, #0x3
        let i = one(0x52800060, 0x1000);
        assert_eq!(i.stmts, vec![Stmt::Assign { dst: 0, expr: Expr::Src(Src::Imm(3)), width: 4 }]);
        // bl +0x3c
        let i = one(0x9400000f, 0x103d4);
        assert_eq!(i.stmts, vec![Stmt::Call(CallTarget::Direct(0x10410))]);
    }

    #[test]
    fn store_zero_register() {
        // strb wzr, [sp, #0x10]
        let i = one(0x390043ff, 0);
        assert_eq!(i.stmts, vec![Stmt::Store { addr: Addr::base_disp(SP, 0x10), src: Src::Imm(0), size: 1 }]);
    }

    #[test]
    fn cmp_is_recorded() {
        // cmp w8, #0x3e8
        let i = one(0x710fa11f, 0);
        assert_eq!(i.stmts, vec![Stmt::Cmp(Src::Reg(8), Src::Imm(1000))]);
    }

    #[test]
    fn ret_and_garbage() {
        assert_eq!(one(0xd65f03c0, 0).flow, Flow::Return);
        assert!(lift(&[0, 0], 0).is_none());
    }
}
