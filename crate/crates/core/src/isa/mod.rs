// SPDX-License-Identifier: Apache-2.0

//! Toy register-machine ISA with segment-style base addressing.
//!
//! Code lives in a per-sandbox instruction array. Code addresses are
//! absolute values `code_base + index`; direct targets in the instruction
//! stream are indices relative to the start of the program. The grammar of
//! the text form is in `docs/isa.md`.

mod parse;
pub mod vm;

use std::collections::BTreeSet;
use std::fmt;

pub(crate) use parse::parse_number;
pub use parse::{parse_program, ParseError};

/// General-purpose registers r0..r15 followed by rsp and rbp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(u8);

impl Reg {
    pub const COUNT: usize = 18;
    pub const RSP: Reg = Reg(16);
    pub const RBP: Reg = Reg(17);
    /// Code-pointer scratch of the instrumenter.
    pub const R13: Reg = Reg(13);
    /// Data-pointer scratch of the instrumenter.
    pub const R14: Reg = Reg(14);
    /// Base register in r15 mode.
    pub const R15: Reg = Reg(15);

    pub fn gpr(n: u8) -> Reg {
        assert!(n < 16, "r{n} does not exist");
        Reg(n)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_stack(self) -> bool {
        self == Reg::RSP || self == Reg::RBP
    }

    pub fn all() -> impl Iterator<Item = Reg> {
        (0..Self::COUNT as u8).map(Reg)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Reg::RSP => f.write_str("rsp"),
            Reg::RBP => f.write_str("rbp"),
            Reg(n) => write!(f, "r{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Segment {
    #[default]
    None,
    Gs,
}

/// `[segment:][base + index*scale + disp]`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MemOperand {
    pub segment: Segment,
    pub base: Option<Reg>,
    pub index: Option<(Reg, u8)>,
    pub disp: i32,
}

impl MemOperand {
    pub fn base_disp(base: Reg, disp: i32) -> Self {
        MemOperand { base: Some(base), disp, ..Default::default() }
    }

    pub fn regs(&self) -> impl Iterator<Item = Reg> {
        self.base.into_iter().chain(self.index.map(|(r, _)| r))
    }

    /// Stack-relative operands are exempt from data confinement. An index
    /// register disqualifies the exemption.
    pub fn is_stack_relative(&self) -> bool {
        self.index.is_none() && self.base.is_some_and(Reg::is_stack)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Reg(Reg),
    Imm(u64),
}

/// Source of `and_keepflags`: a register or an address expression evaluated
/// without a memory access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddrSource {
    Reg(Reg),
    Expr(MemOperand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Imm {
    Value(u64),
    /// Address of the instruction with this program index.
    Code(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimeCall {
    Alloc = 1,
    Free = 2,
    WriteOut = 3,
    Yield = 4,
    Exit = 5,
}

impl RuntimeCall {
    pub const ALL: [RuntimeCall; 5] =
        [RuntimeCall::Alloc, RuntimeCall::Free, RuntimeCall::WriteOut, RuntimeCall::Yield, RuntimeCall::Exit];

    pub fn from_id(id: u64) -> Option<Self> {
        Self::ALL.into_iter().find(|c| *c as u64 == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            RuntimeCall::Alloc => "alloc",
            RuntimeCall::Free => "free",
            RuntimeCall::WriteOut => "write_out",
            RuntimeCall::Yield => "yield",
            RuntimeCall::Exit => "exit",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Code(u32),
    Runtime(RuntimeCall),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cond {
    Zero,
    NotZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instr {
    Mov { dst: Reg, src: Reg },
    MovImm { dst: Reg, imm: Imm },
    Add { dst: Reg, a: Reg, b: Operand },
    AndKeepFlags { dst: Reg, src: AddrSource, mask: u64 },
    Or { dst: Reg, a: Reg, b: Operand },
    Lea { dst: Reg, mem: MemOperand },
    Load { dst: Reg, mem: MemOperand },
    Store { mem: MemOperand, src: Reg },
    Cmp { a: Reg, b: Operand },
    Jcc { cond: Cond, target: u32 },
    Jmp { target: u32 },
    JmpReg { reg: Reg },
    Call { target: Target },
    CallReg { reg: Reg },
    Push { reg: Reg },
    Pop { reg: Reg },
    Ret,
    MaskCode { dst: Reg, src: Reg },
    Syscall,
    AssertAlias { reg: Reg, segment: Segment },
    Halt,
}

impl Instr {
    /// Register written by this instruction, if any (implicit rsp updates of
    /// push/pop/call/ret are not reported).
    pub fn written_reg(&self) -> Option<Reg> {
        match *self {
            Instr::Mov { dst, .. }
            | Instr::MovImm { dst, .. }
            | Instr::Add { dst, .. }
            | Instr::AndKeepFlags { dst, .. }
            | Instr::Or { dst, .. }
            | Instr::Lea { dst, .. }
            | Instr::Load { dst, .. }
            | Instr::MaskCode { dst, .. } => Some(dst),
            Instr::Pop { reg } => Some(reg),
            _ => None,
        }
    }

    /// Every register named by the instruction.
    pub fn named_regs(&self) -> Vec<Reg> {
        let op = |o: &Operand| match o {
            Operand::Reg(r) => Some(*r),
            Operand::Imm(_) => None,
        };
        match self {
            Instr::Mov { dst, src } => vec![*dst, *src],
            Instr::MovImm { dst, .. } => vec![*dst],
            Instr::Add { dst, a, b } | Instr::Or { dst, a, b } => [Some(*dst), Some(*a), op(b)].into_iter().flatten().collect(),
            Instr::AndKeepFlags { dst, src, .. } => {
                let mut v = vec![*dst];
                match src {
                    AddrSource::Reg(r) => v.push(*r),
                    AddrSource::Expr(m) => v.extend(m.regs()),
                }
                v
            }
            Instr::Lea { dst, mem } | Instr::Load { dst, mem } => std::iter::once(*dst).chain(mem.regs()).collect(),
            Instr::Store { mem, src } => std::iter::once(*src).chain(mem.regs()).collect(),
            Instr::Cmp { a, b } => [Some(*a), op(b)].into_iter().flatten().collect(),
            Instr::JmpReg { reg } | Instr::CallReg { reg } | Instr::Push { reg } | Instr::Pop { reg } => vec![*reg],
            Instr::MaskCode { dst, src } => vec![*dst, *src],
            Instr::AssertAlias { reg, .. } => vec![*reg],
            Instr::Jcc { .. } | Instr::Jmp { .. } | Instr::Call { .. } | Instr::Ret | Instr::Syscall | Instr::Halt => {
                vec![]
            }
        }
    }

    /// Relative code index referenced directly by this instruction.
    pub fn code_ref(&self) -> Option<u32> {
        match *self {
            Instr::Jcc { target, .. } | Instr::Jmp { target } => Some(target),
            Instr::Call { target: Target::Code(t) } => Some(t),
            Instr::MovImm { imm: Imm::Code(t), .. } => Some(t),
            _ => None,
        }
    }

    pub fn with_code_ref(self, new: u32) -> Instr {
        match self {
            Instr::Jcc { cond, .. } => Instr::Jcc { cond, target: new },
            Instr::Jmp { .. } => Instr::Jmp { target: new },
            Instr::Call { target: Target::Code(_) } => Instr::Call { target: Target::Code(new) },
            Instr::MovImm { dst, imm: Imm::Code(_) } => Instr::MovImm { dst, imm: Imm::Code(new) },
            other => other,
        }
    }

    fn write_with(&self, f: &mut fmt::Formatter<'_>, label: &dyn Fn(u32) -> String) -> fmt::Result {
        match self {
            Instr::Mov { dst, src } => write!(f, "mov {dst}, {src}"),
            Instr::MovImm { dst, imm: Imm::Value(v) } => write!(f, "movimm {dst}, {}", ImmFmt(*v)),
            Instr::MovImm { dst, imm: Imm::Code(t) } => write!(f, "movimm {dst}, {}", label(*t)),
            Instr::Add { dst, a, b } => write!(f, "add {dst}, {a}, {}", OperandFmt(b)),
            Instr::AndKeepFlags { dst, src, mask } => match src {
                AddrSource::Reg(r) => write!(f, "and_keepflags {dst}, {r}, {}", ImmFmt(*mask)),
                AddrSource::Expr(m) => write!(f, "and_keepflags {dst}, {m}, {}", ImmFmt(*mask)),
            },
            Instr::Or { dst, a, b } => write!(f, "or {dst}, {a}, {}", OperandFmt(b)),
            Instr::Lea { dst, mem } => write!(f, "lea {dst}, {mem}"),
            Instr::Load { dst, mem } => write!(f, "load {dst}, {mem}"),
            Instr::Store { mem, src } => write!(f, "store {mem}, {src}"),
            Instr::Cmp { a, b } => write!(f, "cmp {a}, {}", OperandFmt(b)),
            Instr::Jcc { cond: Cond::Zero, target } => write!(f, "jz {}", label(*target)),
            Instr::Jcc { cond: Cond::NotZero, target } => write!(f, "jnz {}", label(*target)),
            Instr::Jmp { target } => write!(f, "jmp {}", label(*target)),
            Instr::JmpReg { reg } => write!(f, "jmpreg {reg}"),
            Instr::Call { target: Target::Code(t) } => write!(f, "call {}", label(*t)),
            Instr::Call { target: Target::Runtime(c) } => write!(f, "call @{}", c.name()),
            Instr::CallReg { reg } => write!(f, "callreg {reg}"),
            Instr::Push { reg } => write!(f, "push {reg}"),
            Instr::Pop { reg } => write!(f, "pop {reg}"),
            Instr::Ret => f.write_str("ret"),
            Instr::MaskCode { dst, src } if dst == src => write!(f, "maskcode {dst}"),
            Instr::MaskCode { dst, src } => write!(f, "maskcode {dst}, {src}"),
            Instr::Syscall => f.write_str("syscall"),
            Instr::AssertAlias { reg, segment: Segment::None } => write!(f, "assert_alias {reg}"),
            Instr::AssertAlias { reg, segment: Segment::Gs } => write!(f, "assert_alias gs:{reg}"),
            Instr::Halt => f.write_str("halt"),
        }
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_with(f, &|t| t.to_string())
    }
}

struct ImmFmt(u64);

impl fmt::Display for ImmFmt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 <= 0xFFFF {
            write!(f, "{}", self.0)
        } else {
            write!(f, "0x{:016X}", self.0)
        }
    }
}

struct OperandFmt<'a>(&'a Operand);

impl fmt::Display for OperandFmt<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(v) => write!(f, "{}", ImmFmt(*v)),
        }
    }
}

impl fmt::Display for MemOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.segment == Segment::Gs {
            f.write_str("gs:")?;
        }
        f.write_str("[")?;
        let mut first = true;
        if let Some(b) = self.base {
            write!(f, "{b}")?;
            first = false;
        }
        if let Some((r, s)) = self.index {
            if !first {
                f.write_str("+")?;
            }
            write!(f, "{r}*{s}")?;
            first = false;
        }
        if first {
            write!(f, "{}", self.disp)?;
        } else if self.disp > 0 {
            write!(f, "+{}", self.disp)?;
        } else if self.disp < 0 {
            write!(f, "{}", self.disp)?;
        }
        f.write_str("]")
    }
}

/// Where an instruction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Origin {
    /// Present in the input program (possibly with rewritten operands).
    Original,
    /// Added by the instrumenter; counted as instrumentation overhead.
    Inserted,
    /// Verification-build `assert_alias`; counted separately.
    Assertion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub instr: Instr,
    pub origin: Origin,
    /// Index of the input instruction this slot was produced from.
    pub source: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub slots: Vec<Slot>,
    /// Bytes copied into the sandbox's static region at creation.
    pub static_data: Vec<u8>,
    /// Size of the code region, a power of two strictly larger than the
    /// number of slots; the tail is implicit `halt` padding.
    pub code_size: u64,
}

impl Program {
    pub fn from_instrs(instrs: Vec<Instr>) -> Self {
        let slots = instrs
            .into_iter()
            .enumerate()
            .map(|(i, instr)| Slot { instr, origin: Origin::Original, source: i as u32 })
            .collect::<Vec<_>>();
        let code_size = min_code_size(slots.len());
        Program { slots, static_data: Vec::new(), code_size }
    }

    pub fn parse(text: &str) -> Result<Self, ParseError> {
        parse_program(text)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn instrs(&self) -> impl Iterator<Item = &Instr> {
        self.slots.iter().map(|s| &s.instr)
    }

    /// Text form with `L<n>:` labels on every direct target.
    pub fn to_asm(&self) -> String {
        struct Line<'a>(&'a Instr);
        impl fmt::Display for Line<'_> {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.write_with(f, &|t| format!("L{t}"))
            }
        }
        let targets: BTreeSet<u32> = self.instrs().filter_map(Instr::code_ref).collect();
        let mut out = String::new();
        if !self.static_data.is_empty() {
            out.push_str(".static ");
            for b in &self.static_data {
                out.push_str(&format!("{b:02x}"));
            }
            out.push('\n');
        }
        for (i, slot) in self.slots.iter().enumerate() {
            if targets.contains(&(i as u32)) {
                out.push_str(&format!("L{i}:\n"));
            }
            out.push_str(&format!("    {}\n", Line(&slot.instr)));
        }
        // Targets may point at the padding right after the last slot.
        for t in targets.range(self.slots.len() as u32..) {
            out.push_str(&format!("L{t}:\n"));
        }
        out
    }
}

/// Smallest power of two that holds `len` slots plus one padding `halt`.
pub fn min_code_size(len: usize) -> u64 {
    (len as u64 + 1).next_power_of_two()
}
