// SPDX-License-Identifier: Apache-2.0

//! Fetch-decode-execute interpreter.
//!
//! Faults never abort the host: they become [`TrapReason`]s and leave
//! registers and memory exactly as they were before the faulting
//! instruction. The interpreter also carries two monitors used as oracles by
//! the soundness suites: accesses that reach a mapped page outside the
//! sandbox's own alias window, and transfers to addresses outside the code
//! region.

use serde::Serialize;

use super::{AddrSource, Cond, Imm, Instr, MemOperand, Operand, Origin, Program, Reg, RuntimeCall, Segment, Target};
use crate::crypto::{EngineError, KeyId};
use crate::memory::{Access, AddressLayout, MemError, MemorySystem};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind")]
pub enum TrapReason {
    IntegrityViolation { paddr: u64, keyid: KeyId },
    UninitializedLine { paddr: u64 },
    PageFault { vaddr: u64 },
    ProtectionFault { vaddr: u64 },
    MixedKeyAccess { vaddr: u64 },
    SandboxEscapeAssert { value: u64 },
    InvalidCodeAddress { target: u64 },
    FuelExhausted,
    UnknownSyscall { id: u64 },
    ArgValidation { addr: u64 },
    MachineFault { message: String },
}

impl TrapReason {
    /// Stable short name used by scenario files and reports.
    pub fn name(&self) -> &'static str {
        match self {
            TrapReason::IntegrityViolation { .. } => "IntegrityViolation",
            TrapReason::UninitializedLine { .. } => "UninitializedLine",
            TrapReason::PageFault { .. } => "PageFault",
            TrapReason::ProtectionFault { .. } => "ProtectionFault",
            TrapReason::MixedKeyAccess { .. } => "MixedKeyAccess",
            TrapReason::SandboxEscapeAssert { .. } => "SandboxEscapeAssert",
            TrapReason::InvalidCodeAddress { .. } => "InvalidCodeAddress",
            TrapReason::FuelExhausted => "FuelExhausted",
            TrapReason::UnknownSyscall { .. } => "UnknownSyscall",
            TrapReason::ArgValidation { .. } => "ArgValidation",
            TrapReason::MachineFault { .. } => "MachineFault",
        }
    }
}

impl From<MemError> for TrapReason {
    fn from(e: MemError) -> Self {
        match e {
            MemError::Engine(EngineError::IntegrityViolation { paddr, keyid }) => {
                TrapReason::IntegrityViolation { paddr, keyid }
            }
            MemError::Engine(EngineError::UninitializedLine(paddr)) => TrapReason::UninitializedLine { paddr },
            MemError::PageFault(vaddr) => TrapReason::PageFault { vaddr },
            MemError::ProtectionFault { vaddr, .. } => TrapReason::ProtectionFault { vaddr },
            MemError::MixedKeyAccess(vaddr) => TrapReason::MixedKeyAccess { vaddr },
            other => TrapReason::MachineFault { message: other.to_string() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Status {
    Running,
    Halted,
    Yielded,
    Exited { code: u64 },
    Trapped { reason: TrapReason },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub total: u64,
    pub loads: u64,
    pub stores: u64,
    /// Executed instructions inserted by the instrumenter.
    pub extra_instrumentation: u64,
    /// Executed verification assertions.
    pub assertions: u64,
    /// Data accesses that reached a mapped page outside the own window.
    pub foreign_accesses: u64,
    /// Control transfers that targeted an address outside the code region.
    pub control_escapes: u64,
}

impl Counters {
    pub fn accumulate(&mut self, other: &Counters) {
        self.total += other.total;
        self.loads += other.loads;
        self.stores += other.stores;
        self.extra_instrumentation += other.extra_instrumentation;
        self.assertions += other.assertions;
        self.foreign_accesses += other.foreign_accesses;
        self.control_escapes += other.control_escapes;
    }
}

/// Zero flag observed right before an input-program instruction executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub source: u32,
    pub zf: bool,
}

pub enum GateOutcome {
    Continue,
    Yield,
    Exit(u64),
}

/// What the interpreter needs from its host: memory and the trusted runtime.
pub trait Environment {
    fn mem(&mut self) -> &mut MemorySystem;

    /// Executes a runtime call. Arguments are in r1..r3 and the result goes
    /// to r0.
    fn runtime_call(&mut self, vm: &mut VmState, call: RuntimeCall) -> Result<GateOutcome, TrapReason>;
}

/// Host without a runtime; every runtime call traps.
pub struct BareMetal<'a>(pub &'a mut MemorySystem);

impl Environment for BareMetal<'_> {
    fn mem(&mut self) -> &mut MemorySystem {
        self.0
    }

    fn runtime_call(&mut self, _vm: &mut VmState, call: RuntimeCall) -> Result<GateOutcome, TrapReason> {
        Err(TrapReason::UnknownSyscall { id: call as u64 })
    }
}

#[derive(Debug, Clone)]
pub struct VmState {
    pub regs: [u64; Reg::COUNT],
    /// Written only by the runtime.
    pub gs: u64,
    pub zf: bool,
    pub pc: u64,
    pub code_base: u64,
    pub code_size: u64,
    /// Alias index of the sandbox this state belongs to.
    pub alias: u16,
    pub status: Status,
    pub counters: Counters,
    layout: AddressLayout,
    trace: Option<Vec<TraceEvent>>,
}

impl VmState {
    pub fn new(layout: AddressLayout, alias: u16, code_base: u64, code_size: u64) -> Self {
        assert!(code_size.is_power_of_two(), "code region must be a power of two");
        VmState {
            regs: [0; Reg::COUNT],
            gs: 0,
            zf: false,
            pc: code_base,
            code_base,
            code_size,
            alias,
            status: Status::Running,
            counters: Counters::default(),
            layout,
            trace: None,
        }
    }

    pub fn reg(&self, r: Reg) -> u64 {
        self.regs[r.index()]
    }

    pub fn set_reg(&mut self, r: Reg, v: u64) {
        self.regs[r.index()] = v;
    }

    pub fn layout(&self) -> &AddressLayout {
        &self.layout
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> &[TraceEvent] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn in_code_region(&self, addr: u64) -> bool {
        addr.wrapping_sub(self.code_base) < self.code_size
    }

    pub fn mask_code(&self, value: u64) -> u64 {
        self.code_base + (value & (self.code_size - 1))
    }

    fn operand(&self, o: Operand) -> u64 {
        match o {
            Operand::Reg(r) => self.reg(r),
            Operand::Imm(v) => v,
        }
    }

    /// `base + index*scale + disp`, plus the gs base for gs-segment operands.
    pub fn effective_address(&self, mem: &MemOperand) -> u64 {
        let mut ea = (mem.disp as i64) as u64;
        if let Some(b) = mem.base {
            ea = ea.wrapping_add(self.reg(b));
        }
        if let Some((r, s)) = mem.index {
            ea = ea.wrapping_add(self.reg(r).wrapping_mul(s as u64));
        }
        if mem.segment == Segment::Gs {
            ea = ea.wrapping_add(self.gs);
        }
        ea
    }

    fn monitor(&mut self, env: &mut dyn Environment, addr: u64, access: Access) {
        if self.layout.alias_of(addr) != Some(self.alias) && env.mem().translate(addr, access).is_ok() {
            self.counters.foreign_accesses += 1;
        }
    }

    fn read_u64(&mut self, env: &mut dyn Environment, addr: u64) -> Result<u64, TrapReason> {
        self.monitor(env, addr, Access::Read);
        Ok(env.mem().read_u64(addr)?)
    }

    fn write_u64(&mut self, env: &mut dyn Environment, addr: u64, value: u64) -> Result<(), TrapReason> {
        self.monitor(env, addr, Access::Write);
        Ok(env.mem().write_u64(addr, value)?)
    }

    fn check_transfer(&mut self, target: u64) -> Result<u64, TrapReason> {
        if self.in_code_region(target) {
            Ok(target)
        } else {
            self.counters.control_escapes += 1;
            Err(TrapReason::InvalidCodeAddress { target })
        }
    }

    fn push(&mut self, env: &mut dyn Environment, value: u64) -> Result<(), TrapReason> {
        let addr = self.reg(Reg::RSP).wrapping_sub(8);
        self.write_u64(env, addr, value)?;
        self.set_reg(Reg::RSP, addr);
        Ok(())
    }

    fn runtime(&mut self, env: &mut dyn Environment, call: RuntimeCall) -> Result<Option<u64>, TrapReason> {
        match env.runtime_call(self, call)? {
            GateOutcome::Continue => Ok(Some(self.pc + 1)),
            GateOutcome::Yield => {
                self.status = Status::Yielded;
                Ok(Some(self.pc + 1))
            }
            GateOutcome::Exit(code) => {
                self.status = Status::Exited { code };
                Ok(None)
            }
        }
    }

    /// Executes one instruction. Does nothing unless the state is running.
    pub fn step(&mut self, program: &Program, env: &mut dyn Environment) -> &Status {
        if self.status != Status::Running {
            return &self.status;
        }
        let index = self.pc.wrapping_sub(self.code_base);
        let (instr, origin, source) = match program.slots.get(index as usize) {
            Some(slot) if index < self.code_size => (slot.instr, slot.origin, slot.source),
            _ => (Instr::Halt, Origin::Inserted, u32::MAX),
        };
        self.counters.total += 1;
        match origin {
            Origin::Inserted if source != u32::MAX => self.counters.extra_instrumentation += 1,
            Origin::Assertion => self.counters.assertions += 1,
            Origin::Original => {
                let zf = self.zf;
                if let Some(t) = self.trace.as_mut() {
                    t.push(TraceEvent { source, zf });
                }
            }
            Origin::Inserted => {}
        }
        match self.execute(instr, env) {
            Ok(Some(next)) => self.pc = next,
            Ok(None) => {}
            Err(reason) => self.status = Status::Trapped { reason },
        }
        &self.status
    }

    /// Returns the next pc, or `None` when execution stops.
    fn execute(&mut self, instr: Instr, env: &mut dyn Environment) -> Result<Option<u64>, TrapReason> {
        let next = self.pc.wrapping_add(1);
        match instr {
            Instr::Mov { dst, src } => self.set_reg(dst, self.reg(src)),
            Instr::MovImm { dst, imm } => {
                let v = match imm {
                    Imm::Value(v) => v,
                    Imm::Code(t) => self.code_base.wrapping_add(t as u64),
                };
                self.set_reg(dst, v);
            }
            Instr::Add { dst, a, b } => {
                let v = self.reg(a).wrapping_add(self.operand(b));
                self.zf = v == 0;
                self.set_reg(dst, v);
            }
            Instr::AndKeepFlags { dst, src, mask } => {
                let v = match src {
                    AddrSource::Reg(r) => self.reg(r),
                    AddrSource::Expr(m) => self.effective_address(&m),
                };
                self.set_reg(dst, v & mask);
            }
            Instr::Or { dst, a, b } => self.set_reg(dst, self.reg(a) | self.operand(b)),
            Instr::Lea { dst, mem } => self.set_reg(dst, self.effective_address(&mem)),
            Instr::Load { dst, mem } => {
                let addr = self.effective_address(&mem);
                let v = self.read_u64(env, addr)?;
                self.counters.loads += 1;
                self.set_reg(dst, v);
            }
            Instr::Store { mem, src } => {
                let addr = self.effective_address(&mem);
                self.write_u64(env, addr, self.reg(src))?;
                self.counters.stores += 1;
            }
            Instr::Cmp { a, b } => self.zf = self.reg(a) == self.operand(b),
            Instr::Jcc { cond, target } => {
                let taken = match cond {
                    Cond::Zero => self.zf,
                    Cond::NotZero => !self.zf,
                };
                if taken {
                    return self.check_transfer(self.code_base.wrapping_add(target as u64)).map(Some);
                }
            }
            Instr::Jmp { target } => {
                return self.check_transfer(self.code_base.wrapping_add(target as u64)).map(Some);
            }
            Instr::JmpReg { reg } => return self.check_transfer(self.reg(reg)).map(Some),
            Instr::Call { target: Target::Code(t) } => {
                let dest = self.check_transfer(self.code_base.wrapping_add(t as u64))?;
                self.push(env, next)?;
                return Ok(Some(dest));
            }
            Instr::Call { target: Target::Runtime(call) } => return self.runtime(env, call),
            Instr::CallReg { reg } => {
                let dest = self.check_transfer(self.reg(reg))?;
                self.push(env, next)?;
                return Ok(Some(dest));
            }
            Instr::Push { reg } => self.push(env, self.reg(reg))?,
            Instr::Pop { reg } => {
                let sp = self.reg(Reg::RSP);
                let v = self.read_u64(env, sp)?;
                self.set_reg(Reg::RSP, sp.wrapping_add(8));
                self.set_reg(reg, v);
            }
            Instr::Ret => {
                let sp = self.reg(Reg::RSP);
                let v = self.read_u64(env, sp)?;
                let dest = self.check_transfer(v)?;
                self.set_reg(Reg::RSP, sp.wrapping_add(8));
                return Ok(Some(dest));
            }
            Instr::MaskCode { dst, src } => self.set_reg(dst, self.mask_code(self.reg(src))),
            Instr::Syscall => {
                let id = self.reg(Reg::gpr(0));
                let call = RuntimeCall::from_id(id).ok_or(TrapReason::UnknownSyscall { id })?;
                return self.runtime(env, call);
            }
            Instr::AssertAlias { reg, segment } => {
                let mut v = self.reg(reg);
                if segment == Segment::Gs {
                    v = v.wrapping_add(self.gs);
                }
                if self.layout.alias_of(v) != Some(self.alias) {
                    return Err(TrapReason::SandboxEscapeAssert { value: v });
                }
            }
            Instr::Halt => {
                self.status = Status::Halted;
                return Ok(None);
            }
        }
        Ok(Some(next))
    }

    /// Steps until the state stops running or `fuel` instructions have
    /// executed; running out of fuel traps with `FuelExhausted`.
    pub fn run(&mut self, program: &Program, env: &mut dyn Environment, fuel: u64) -> Status {
        let mut spent = 0;
        while self.status == Status::Running {
            if spent == fuel {
                self.status = Status::Trapped { reason: TrapReason::FuelExhausted };
                break;
            }
            self.step(program, env);
            spent += 1;
        }
        self.status.clone()
    }

    /// Continues a yielded state.
    pub fn resume(&mut self) {
        if self.status == Status::Yielded {
            self.status = Status::Running;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{Engine, EngineConfig};
    use crate::memory::Perms;

    const ALIAS: u16 = 1;

    fn setup() -> (MemorySystem, VmState) {
        let engine = Engine::new(EngineConfig { phys_pages: 16, ..Default::default() }).unwrap();
        let mut mem = MemorySystem::new(engine).unwrap();
        let base = mem.layout().window_base(ALIAS);
        mem.map_page(base + 0x1000, 1, KeyId(1), Perms::RW).unwrap();
        mem.map_page(base + 0x2000, 2, KeyId(1), Perms::RW).unwrap();
        mem.write(base + 0x1000, &[0; 4096]).unwrap();
        mem.write(base + 0x2000, &[0; 4096]).unwrap();
        let layout = *mem.layout();
        let mut vm = VmState::new(layout, ALIAS, base + (1 << 40), 64);
        vm.set_reg(Reg::RSP, base + 0x3000);
        (mem, vm)
    }

    fn run(src: &str, mem: &mut MemorySystem, vm: &mut VmState) -> Status {
        let p = Program::parse(src).unwrap();
        vm.code_size = p.code_size.max(vm.code_size);
        vm.run(&p, &mut BareMetal(mem), 10_000)
    }

    #[test]
    fn halt_only() {
        let (mut mem, mut vm) = setup();
        assert_eq!(run("halt", &mut mem, &mut vm), Status::Halted);
        assert_eq!(vm.counters.total, 1);
    }

    #[test]
    fn load_store_roundtrip() {
        let (mut mem, mut vm) = setup();
        let base = mem.layout().window_base(ALIAS);
        mem.write_u64(base + 0x1008, 0xDEAD_BEEF).unwrap();
        vm.set_reg(Reg::gpr(2), base + 0x1000);
        run("load r1, [r2+8]\nstore [r2+16], r1\nhalt", &mut mem, &mut vm);
        assert_eq!(vm.reg(Reg::gpr(1)), 0xDEAD_BEEF);
        assert_eq!(mem.read_u64(base + 0x1010).unwrap(), 0xDEAD_BEEF);
        assert_eq!((vm.counters.loads, vm.counters.stores), (1, 1));
    }

    #[test]
    fn wrong_key_load_traps_without_side_effects() {
        let (mut mem, mut vm) = setup();
        let base = mem.layout().window_base(ALIAS);
        // Same physical page seen through sandbox 2's alias and key.
        let other = mem.layout().window_base(2);
        mem.map_page(other + 0x1000, 1, KeyId(2), Perms::RW).unwrap();
        vm.set_reg(Reg::gpr(2), other + 0x1000);
        vm.set_reg(Reg::gpr(1), 77);
        let st = run("load r1, [r2]\nhalt", &mut mem, &mut vm);
        assert!(matches!(st, Status::Trapped { reason: TrapReason::IntegrityViolation { .. } }));
        assert_eq!(vm.reg(Reg::gpr(1)), 77);
        assert_eq!(vm.pc, vm.code_base);
        assert_eq!(vm.counters.foreign_accesses, 1);
        // The host can keep using the memory system.
        assert_eq!(mem.read_u64(base + 0x1000).unwrap(), 0);
    }

    #[test]
    fn assert_alias_checks_window() {
        let (mut mem, mut vm) = setup();
        let base = mem.layout().window_base(ALIAS);
        vm.set_reg(Reg::gpr(2), base + 5);
        assert_eq!(run("assert_alias r2\nhalt", &mut mem, &mut vm), Status::Halted);

        let (mut mem, mut vm) = setup();
        vm.set_reg(Reg::gpr(2), (3u64 << 48) | 5);
        let st = run("assert_alias r2\nhalt", &mut mem, &mut vm);
        assert_eq!(st, Status::Trapped { reason: TrapReason::SandboxEscapeAssert { value: (3u64 << 48) | 5 } });

        let (mut mem, mut vm) = setup();
        vm.gs = base;
        vm.set_reg(Reg::R14, 0x1234);
        assert_eq!(run("assert_alias gs:r14\nhalt", &mut mem, &mut vm), Status::Halted);
    }

    #[test]
    fn calls_and_returns() {
        let (mut mem, mut vm) = setup();
        let src = "call f\nhalt\nf: movimm r1, 5\nret\n";
        assert_eq!(run(src, &mut mem, &mut vm), Status::Halted);
        assert_eq!(vm.reg(Reg::gpr(1)), 5);
        assert_eq!(vm.pc, vm.code_base + 1);
    }

    #[test]
    fn smashed_return_escapes_when_uninstrumented() {
        let (mut mem, mut vm) = setup();
        let src = "call f\nhalt\nf: movimm r1, 0x4141414141414141\nstore [rsp], r1\nret\n";
        let st = run(src, &mut mem, &mut vm);
        assert_eq!(st, Status::Trapped { reason: TrapReason::InvalidCodeAddress { target: 0x4141_4141_4141_4141 } });
        assert_eq!(vm.counters.control_escapes, 1);
    }

    #[test]
    fn maskcode_confines() {
        let (mut mem, mut vm) = setup();
        vm.set_reg(Reg::gpr(3), u64::MAX);
        run("maskcode r13, r3\nhalt", &mut mem, &mut vm);
        assert!(vm.in_code_region(vm.reg(Reg::R13)));
    }

    #[test]
    fn flags_semantics() {
        let (mut mem, mut vm) = setup();
        run("movimm r1, 1\nadd r1, r1, -1\nand_keepflags r2, r1, 0\nor r3, r1, 7\nhalt", &mut mem, &mut vm);
        assert!(vm.zf);
        let (mut mem, mut vm) = setup();
        run("movimm r1, 3\ncmp r1, 4\nand_keepflags r2, r1, 0\nhalt", &mut mem, &mut vm);
        assert!(!vm.zf);
    }

    #[test]
    fn fuel_exhaustion() {
        let (mut mem, mut vm) = setup();
        let p = Program::parse("l: jmp l").unwrap();
        let st = vm.run(&p, &mut BareMetal(&mut mem), 1_000_000);
        assert_eq!(st, Status::Trapped { reason: TrapReason::FuelExhausted });
        assert_eq!(vm.counters.total, 1_000_000);
    }

    #[test]
    fn bare_metal_rejects_runtime_calls() {
        let (mut mem, mut vm) = setup();
        let st = run("movimm r0, 99\nsyscall", &mut mem, &mut vm);
        assert_eq!(st, Status::Trapped { reason: TrapReason::UnknownSyscall { id: 99 } });
    }
}
