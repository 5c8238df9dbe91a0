//! Small register-transfer IR shared by both lifters.

/// Register number. General registers use the architecture's numbering;
/// temporaries live at [`TMP0`] and above.
pub type Reg = u8;

pub const TMP0: Reg = 40;
pub const NUM_REGS: usize = 48;
pub const NUM_VREGS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Src {
    Reg(Reg),
    Imm(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Sar,
    Mul,
    /// Sign-extend from the bit width given by the right operand.
    Sext,
}

/// `base + index * scale + disp`
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Addr {
    pub base: Option<Reg>,
    pub index: Option<(Reg, u8)>,
    pub disp: i64,
}

impl Addr {
    pub fn base_disp(base: Reg, disp: i64) -> Self {
        Addr { base: Some(base), index: None, disp }
    }

    pub fn abs(addr: u64) -> Self {
        Addr { base: None, index: None, disp: addr as i64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expr {
    Src(Src),
    Bin(BinOp, Src, Src),
    AddrOf(Addr),
    Load { addr: Addr, size: u8, signed: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CallTarget {
    Direct(u64),
    Indirect(Src),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stmt {
    /// `dst = expr`, truncated to `width` bytes (4 or 8).
    Assign {
        dst: Reg,
        expr: Expr,
        width: u8,
    },
    Store {
        addr: Addr,
        src: Src,
        size: u8,
    },
    /// Comparison of two values; flags are not modelled beyond recording it.
    Cmp(Src, Src),
    /// Bit test. `Test(r, r)` compares against zero.
    Test(Src, Src),
    Call(CallTarget),
    Clobber(Reg),
    /// Vector register transfers, modelled bytewise.
    VLoad {
        v: u8,
        addr: Addr,
        size: u8,
    },
    VStore {
        v: u8,
        addr: Addr,
        size: u8,
    },
    VZero(u8),
    VClobber(u8),
}

/// How control leaves an instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Next,
    Jump(u64),
    CondJump(u64),
    /// Indirect jump, target unresolved.
    IndirectJump,
    Return,
    /// Trap or undecodable byte sequence.
    Stop,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Insn {
    pub addr: u64,
    pub len: u8,
    pub stmts: Vec<Stmt>,
    pub flow: Flow,
    pub text: String,
}

impl Insn {
    pub fn call_target(&self) -> Option<CallTarget> {
        self.stmts.iter().find_map(|s| match s {
            Stmt::Call(t) => Some(*t),
            _ => None,
        })
    }
}

/// Calling-convention facts the engine needs.
#[derive(Clone, Debug)]
pub struct Abi {
    pub sp: Reg,
    pub ret: Reg,
    pub args: &'static [Reg],
    pub caller_saved: &'static [Reg],
    /// Bytes the call instruction pushes (return address).
    pub call_push: i64,
}

pub const AARCH64_ABI: Abi = Abi {
    sp: 31,
    ret: 0,
    args: &[0, 1, 2, 3, 4, 5, 6, 7],
    caller_saved: &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 30],
    call_push: 0,
};

// rax rcx rdx rbx rsp rbp rsi rdi r8..r15
pub const X86_64_ABI: Abi =
    Abi { sp: 4, ret: 0, args: &[7, 6, 2, 1, 8, 9], caller_saved: &[0, 1, 2, 6, 7, 8, 9, 10, 11], call_push: 8 };
