// SPDX-License-Identifier: Apache-2.0

//! Sandboxing rewriter for toy-ISA programs.
//!
//! Register contract of instrumented code:
//! - r14 always holds a truncated offset (gs mode) or an address inside the
//!   own window (r15 mode). Only instrumentation writes it.
//! - r13 always holds an address inside the code region when code isolation
//!   is on. Only instrumentation writes it outside the `pop` of a `ret`
//!   expansion, which is immediately followed by its `maskcode`.
//! - rsp and rbp lie inside the own window after every explicit write.
//!
//! Every inserted sequence keeps these invariants when entered at any slot,
//! so a masked indirect jump into the middle of a sequence cannot leave the
//! window. Displacements (|disp| < 2^31) and push/pop drift are absorbed by
//! the unmapped guard bands at both ends of every window.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{min_code_size, AddrSource, Instr, MemOperand, Operand, Origin, Program, Reg, Segment, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Base address in the gs segment register.
    Gs,
    /// Base address in the reserved general-purpose register r15.
    R15,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Gs, Mode::R15];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Gs => "gs",
            Mode::R15 => "r15",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gs" => Ok(Mode::Gs),
            "r15" => Ok(Mode::R15),
            other => Err(format!("unknown mode `{other}` (expected gs or r15)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstrumentationConfig {
    pub mode: Mode,
    pub offset_bits: u8,
    pub emit_assertions: bool,
    /// Mask indirect branches and returns in addition to data accesses.
    pub isolate_code: bool,
    /// Minimum size of the output code region; must be a power of two.
    pub code_size: Option<u64>,
}

impl InstrumentationConfig {
    pub fn new(mode: Mode) -> Self {
        InstrumentationConfig { mode, offset_bits: 48, emit_assertions: false, isolate_code: true, code_size: None }
    }

    pub fn mask(&self) -> u64 {
        (1u64 << self.offset_bits) - 1
    }

    pub fn reserved(&self) -> Vec<Reg> {
        let mut r = vec![Reg::R14];
        if self.isolate_code {
            r.push(Reg::R13);
        }
        if self.mode == Mode::R15 {
            r.push(Reg::R15);
        }
        r
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Report {
    pub rewritten_loads: u64,
    pub rewritten_stores: u64,
    pub inserted_instructions: u64,
    pub masked_branches: u64,
    pub rets_expanded: u64,
    pub stack_restores: u64,
    pub assertions: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RewriteError {
    #[error("instruction {index}: {reg} is reserved by the instrumentation")]
    ReservedRegister { index: usize, reg: Reg },
    #[error("instruction {index}: direct target {target} lies outside the code region")]
    InvalidTarget { index: usize, target: u32 },
    #[error("instruction {index}: gs-segment operands are reserved for instrumented code")]
    SegmentOperand { index: usize },
    #[error("code size {0} is not a power of two large enough for the output")]
    CodeSize(u64),
}

struct Emitter {
    slots: Vec<Slot>,
    source: u32,
}

impl Emitter {
    fn push(&mut self, instr: Instr, origin: Origin) {
        self.slots.push(Slot { instr, origin, source: self.source });
    }
}

fn check_input(index: usize, instr: &Instr, cfg: &InstrumentationConfig, len: usize, code_size: u64) -> Result<(), RewriteError> {
    let reserved = cfg.reserved();
    if let Some(reg) = instr.named_regs().into_iter().find(|r| reserved.contains(r)) {
        return Err(RewriteError::ReservedRegister { index, reg });
    }
    let gs_operand = match instr {
        Instr::Load { mem, .. } | Instr::Store { mem, .. } | Instr::Lea { mem, .. } => mem.segment == Segment::Gs,
        Instr::AndKeepFlags { src: AddrSource::Expr(mem), .. } => mem.segment == Segment::Gs,
        Instr::AssertAlias { segment, .. } => *segment == Segment::Gs,
        _ => false,
    };
    if gs_operand {
        return Err(RewriteError::SegmentOperand { index });
    }
    if let Some(target) = instr.code_ref() {
        // Targets at or past the end resolve to the halt padding.
        if target as u64 >= code_size.max(len as u64 + 1) {
            return Err(RewriteError::InvalidTarget { index, target });
        }
    }
    Ok(())
}

/// Rewrites `program` so that every data access stays inside the sandbox's
/// alias window and, with `isolate_code`, every indirect transfer stays in
/// the code region.
pub fn instrument(program: &Program, cfg: &InstrumentationConfig) -> Result<(Program, Report), RewriteError> {
    let len = program.len();
    for (i, instr) in program.instrs().enumerate() {
        check_input(i, instr, cfg, len, program.code_size)?;
    }

    let mask = cfg.mask();
    let mut report = Report::default();
    let mut out = Emitter { slots: Vec::with_capacity(len * 3), source: 0 };
    let mut starts = Vec::with_capacity(len + 1);

    for (i, instr) in program.instrs().enumerate() {
        starts.push(out.slots.len() as u32);
        out.source = i as u32;
        let instr = *instr;
        match instr {
            Instr::Load { dst, mem } if !mem.is_stack_relative() => {
                let mem = confine(&mut out, cfg, mem, mask);
                out.push(Instr::Load { dst, mem }, Origin::Original);
                report.rewritten_loads += 1;
            }
            Instr::Store { mem, src } if !mem.is_stack_relative() => {
                let mem = confine(&mut out, cfg, mem, mask);
                out.push(Instr::Store { mem, src }, Origin::Original);
                report.rewritten_stores += 1;
            }
            Instr::JmpReg { reg } if cfg.isolate_code => {
                out.push(Instr::MaskCode { dst: Reg::R13, src: reg }, Origin::Inserted);
                out.push(Instr::JmpReg { reg: Reg::R13 }, Origin::Original);
                report.masked_branches += 1;
            }
            Instr::CallReg { reg } if cfg.isolate_code => {
                out.push(Instr::MaskCode { dst: Reg::R13, src: reg }, Origin::Inserted);
                out.push(Instr::CallReg { reg: Reg::R13 }, Origin::Original);
                report.masked_branches += 1;
            }
            Instr::Ret if cfg.isolate_code => {
                out.push(Instr::Pop { reg: Reg::R13 }, Origin::Original);
                out.push(Instr::MaskCode { dst: Reg::R13, src: Reg::R13 }, Origin::Inserted);
                out.push(Instr::JmpReg { reg: Reg::R13 }, Origin::Inserted);
                report.rets_expanded += 1;
            }
            other => out.push(other, Origin::Original),
        }
        if let Some(reg) = instr.written_reg().filter(|r| r.is_stack()) {
            restore(&mut out, cfg, reg, mask);
            report.stack_restores += 1;
        }
    }
    let new_len = out.slots.len() as u32;
    starts.push(new_len);

    for slot in &mut out.slots {
        if slot.origin == Origin::Original {
            if let Some(t) = slot.instr.code_ref() {
                let mapped = starts.get(t as usize).copied().unwrap_or(new_len);
                slot.instr = slot.instr.with_code_ref(mapped);
            }
        }
    }

    report.inserted_instructions = out.slots.iter().filter(|s| s.origin == Origin::Inserted).count() as u64;
    report.assertions = out.slots.iter().filter(|s| s.origin == Origin::Assertion).count() as u64;

    let min = min_code_size(out.slots.len());
    let code_size = match cfg.code_size {
        None => min,
        Some(n) if n.is_power_of_two() && n >= min => n,
        Some(n) => return Err(RewriteError::CodeSize(n)),
    };
    let program = Program { slots: out.slots, static_data: program.static_data.clone(), code_size };
    Ok((program, report))
}

/// Emits the truncate-and-rebase prefix for a non-stack operand and returns
/// the operand the access should use.
fn confine(out: &mut Emitter, cfg: &InstrumentationConfig, mem: MemOperand, mask: u64) -> MemOperand {
    let src = match (mem.base, mem.index) {
        (Some(b), None) => AddrSource::Reg(b),
        _ => AddrSource::Expr(MemOperand { disp: 0, ..mem }),
    };
    out.push(Instr::AndKeepFlags { dst: Reg::R14, src, mask }, Origin::Inserted);
    let segment = match cfg.mode {
        Mode::Gs => Segment::Gs,
        Mode::R15 => {
            out.push(Instr::Or { dst: Reg::R14, a: Reg::R14, b: Operand::Reg(Reg::R15) }, Origin::Inserted);
            Segment::None
        }
    };
    if cfg.emit_assertions {
        out.push(Instr::AssertAlias { reg: Reg::R14, segment }, Origin::Assertion);
    }
    MemOperand { segment, base: Some(Reg::R14), index: None, disp: mem.disp }
}

/// Forces a freshly written rsp/rbp back into the window.
fn restore(out: &mut Emitter, cfg: &InstrumentationConfig, reg: Reg, mask: u64) {
    out.push(Instr::AndKeepFlags { dst: Reg::R14, src: AddrSource::Reg(reg), mask }, Origin::Inserted);
    let rebase = match cfg.mode {
        Mode::Gs => Instr::Lea { dst: reg, mem: MemOperand { segment: Segment::Gs, ..MemOperand::base_disp(Reg::R14, 0) } },
        Mode::R15 => Instr::Or { dst: reg, a: Reg::R14, b: Operand::Reg(Reg::R15) },
    };
    out.push(rebase, Origin::Inserted);
    if cfg.emit_assertions {
        out.push(Instr::AssertAlias { reg, segment: Segment::None }, Origin::Assertion);
    }
}

/// Extra instructions the rewrite adds for one input instruction. Used as
/// an independent count in tests.
pub fn static_extra(instr: &Instr, cfg: &InstrumentationConfig) -> u64 {
    let per_mem = match cfg.mode {
        Mode::Gs => 1,
        Mode::R15 => 2,
    };
    let mut n = match instr {
        Instr::Load { mem, .. } | Instr::Store { mem, .. } if !mem.is_stack_relative() => per_mem,
        Instr::JmpReg { .. } | Instr::CallReg { .. } if cfg.isolate_code => 1,
        Instr::Ret if cfg.isolate_code => 2,
        _ => 0,
    };
    if instr.written_reg().is_some_and(Reg::is_stack) {
        n += 2;
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rewrite(src: &str, cfg: InstrumentationConfig) -> (Vec<String>, Report) {
        let p = Program::parse(src).unwrap();
        let (out, report) = instrument(&p, &cfg).unwrap();
        (out.instrs().map(|i| i.to_string()).collect(), report)
    }

    fn data_only(mode: Mode) -> InstrumentationConfig {
        InstrumentationConfig { isolate_code: false, ..InstrumentationConfig::new(mode) }
    }

    #[test]
    fn r15_load() {
        let (out, r) = rewrite("load r1, [r2+8]", data_only(Mode::R15));
        assert_eq!(
            out,
            ["and_keepflags r14, r2, 0x0000FFFFFFFFFFFF", "or r14, r14, r15", "load r1, [r14+8]"]
        );
        assert_eq!((r.rewritten_loads, r.inserted_instructions), (1, 2));
    }

    #[test]
    fn gs_load() {
        let (out, r) = rewrite("load r1, [r2+8]", data_only(Mode::Gs));
        assert_eq!(out, ["and_keepflags r14, r2, 0x0000FFFFFFFFFFFF", "load r1, gs:[r14+8]"]);
        assert_eq!(r.inserted_instructions, 1);
    }

    #[test]
    fn indexed_operand_folds_into_one_mask() {
        let (out, _) = rewrite("store [r2+r3*8-16], r1", data_only(Mode::Gs));
        assert_eq!(out, ["and_keepflags r14, [r2+r3*8], 0x0000FFFFFFFFFFFF", "store gs:[r14-16], r1"]);
    }

    #[test]
    fn stack_relative_untouched() {
        let (out, r) = rewrite("load r1, [rsp+16]\nstore [rbp-8], r1", data_only(Mode::R15));
        assert_eq!(out, ["load r1, [rsp+16]", "store [rbp-8], r1"]);
        assert_eq!(r, Report::default());
    }

    #[test]
    fn ret_expansion() {
        let (out, r) = rewrite("ret", InstrumentationConfig::new(Mode::Gs));
        assert_eq!(out, ["pop r13", "maskcode r13", "jmpreg r13"]);
        assert_eq!((r.rets_expanded, r.inserted_instructions), (1, 2));
    }

    #[test]
    fn indirect_branches_masked() {
        let (out, r) = rewrite("callreg r3\njmpreg r4", InstrumentationConfig::new(Mode::Gs));
        assert_eq!(out, ["maskcode r13, r3", "callreg r13", "maskcode r13, r4", "jmpreg r13"]);
        assert_eq!(r.masked_branches, 2);
    }

    #[test]
    fn stack_restore() {
        let (out, r) = rewrite("pop rbp\nmov rsp, r3", data_only(Mode::R15));
        assert_eq!(
            out,
            [
                "pop rbp",
                "and_keepflags r14, rbp, 0x0000FFFFFFFFFFFF",
                "or rbp, r14, r15",
                "mov rsp, r3",
                "and_keepflags r14, rsp, 0x0000FFFFFFFFFFFF",
                "or rsp, r14, r15",
            ]
        );
        assert_eq!(r.stack_restores, 2);
        let (out, _) = rewrite("mov rsp, r3", data_only(Mode::Gs));
        assert_eq!(out[2], "lea rsp, gs:[r14]");
    }

    #[test]
    fn assertions_follow_each_point() {
        let cfg = InstrumentationConfig { emit_assertions: true, ..InstrumentationConfig::new(Mode::R15) };
        let (out, r) = rewrite("load r1, [r2]\npop rsp", cfg);
        assert_eq!(out[2], "assert_alias r14");
        assert_eq!(out.last().unwrap(), "assert_alias rsp");
        assert_eq!((r.assertions, r.inserted_instructions), (2, 4));
        let cfg = InstrumentationConfig { emit_assertions: true, ..InstrumentationConfig::new(Mode::Gs) };
        let (out, _) = rewrite("load r1, [r2]", cfg);
        assert_eq!(out[1], "assert_alias gs:r14");
    }

    #[test]
    fn targets_are_remapped() {
        let p = Program::parse("jmp end\nload r1, [r2]\nend: halt").unwrap();
        let (out, _) = instrument(&p, &data_only(Mode::R15)).unwrap();
        assert_eq!(out.slots[0].instr, Instr::Jmp { target: 4 });
        assert_eq!(out.slots[4].instr, Instr::Halt);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = Program::from_instrs(vec![Instr::Jmp { target: 1000 }]);
        assert!(matches!(instrument(&p, &data_only(Mode::Gs)), Err(RewriteError::InvalidTarget { .. })));
        let p = Program::parse("mov r1, r15").unwrap();
        assert_eq!(
            instrument(&p, &data_only(Mode::R15)),
            Err(RewriteError::ReservedRegister { index: 0, reg: Reg::R15 })
        );
        assert!(instrument(&p, &data_only(Mode::Gs)).is_ok());
        let p = Program::parse("mov r14, r1").unwrap();
        assert!(instrument(&p, &data_only(Mode::Gs)).is_err());
        let p = Program::parse("load r1, gs:[r2]").unwrap();
        assert!(matches!(instrument(&p, &data_only(Mode::Gs)), Err(RewriteError::SegmentOperand { .. })));
    }

    #[test]
    fn runtime_entries_are_valid_direct_targets() {
        let (out, _) = rewrite("call @alloc\nhalt", InstrumentationConfig::new(Mode::Gs));
        assert_eq!(out, ["call @alloc", "halt"]);
    }

    #[test]
    fn static_extra_matches_rewrite() {
        let src = "load r1, [r2]\nstore [r3+r4*2], r1\nload r5, [rsp]\nret\ncallreg r1\npop rbp\nadd rsp, rsp, 8\nhalt";
        let p = Program::parse(src).unwrap();
        for mode in Mode::ALL {
            for isolate_code in [false, true] {
                let cfg = InstrumentationConfig { isolate_code, ..InstrumentationConfig::new(mode) };
                let (_, r) = instrument(&p, &cfg).unwrap();
                let expected: u64 = p.instrs().map(|i| static_extra(i, &cfg)).sum();
                assert_eq!(r.inserted_instructions, expected);
            }
        }
    }
}
