// SPDX-License-Identifier: Apache-2.0

//! Random-program confinement checks.
//!
//! Each trial loads a fresh runtime with a victim sandbox holding known heap
//! data and a sandbox running a random well-formed program whose registers
//! are seeded with addresses inside the victim. The program may use any
//! register the instrumenter leaves to it and any addressing form except
//! segment operands. After the run three oracles are read: verification
//! assertions that fired, data accesses the VM observed landing in another
//! window, and control transfers that left the code region. The victim then
//! reads its data back; a successful read returning altered bytes is a
//! silent corruption.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::crypto::{EngineConfig, LINE_SIZE};
use crate::instrument::Mode;
use crate::isa::vm::{Status, TrapReason};
use crate::isa::{Cond, Imm, Instr, MemOperand, Operand, Program, Reg, RuntimeCall, Target};
use crate::parallel::{chunk_seed, Executor};
use crate::runtime::{window, Runtime, RuntimeConfig, RuntimeError};

const CHUNK: u64 = 64;
const VICTIM_SMALL: u64 = 256;
const VICTIM_LARGE: u64 = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FuzzConfig {
    pub programs: u64,
    pub seed: u64,
    pub mode: Mode,
    /// `false` runs the same programs unconfined as a control group.
    pub instrumented: bool,
    pub program_len: usize,
    pub fuel: u64,
    pub keyid_bits: u8,
    pub phys_pages: u64,
}

impl FuzzConfig {
    pub fn new(mode: Mode, programs: u64, seed: u64) -> Self {
        FuzzConfig {
            programs,
            seed,
            mode,
            instrumented: true,
            program_len: 48,
            fuel: 1500,
            keyid_bits: 4,
            phys_pages: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FuzzReport {
    pub programs: u64,
    pub executed: u64,
    pub loads: u64,
    pub stores: u64,
    pub assertions_checked: u64,
    pub assertion_failures: u64,
    pub foreign_accesses: u64,
    pub control_escapes: u64,
    pub silent_corruptions: u64,
    /// How attacker runs ended, by trap name or `halted`, `exited`,
    /// `running`.
    pub outcomes: BTreeMap<String, u64>,
}

impl FuzzReport {
    fn merge(&mut self, o: &FuzzReport) {
        self.programs += o.programs;
        self.executed += o.executed;
        self.loads += o.loads;
        self.stores += o.stores;
        self.assertions_checked += o.assertions_checked;
        self.assertion_failures += o.assertion_failures;
        self.foreign_accesses += o.foreign_accesses;
        self.control_escapes += o.control_escapes;
        self.silent_corruptions += o.silent_corruptions;
        for (k, v) in &o.outcomes {
            *self.outcomes.entry(k.clone()).or_default() += v;
        }
    }

    /// Any observed breach. Zero for a sound confinement.
    pub fn breaches(&self) -> u64 {
        self.assertion_failures + self.foreign_accesses + self.control_escapes + self.silent_corruptions
    }
}

/// Addresses a program is likely to find interesting.
struct Targets {
    values: Vec<u64>,
}

fn gpr(rng: &mut impl Rng) -> Reg {
    Reg::gpr(rng.gen_range(0..13))
}

/// Destination register; the stack registers are rare so that programs
/// keep a working stack most of the time.
fn dst(rng: &mut impl Rng) -> Reg {
    match rng.gen_range(0..40) {
        0 => Reg::RSP,
        1 => Reg::RBP,
        _ => gpr(rng),
    }
}

fn src(rng: &mut impl Rng) -> Reg {
    match rng.gen_range(0..10) {
        0 => Reg::RSP,
        1 => Reg::RBP,
        _ => gpr(rng),
    }
}

fn imm(rng: &mut impl Rng, t: &Targets) -> u64 {
    match rng.gen_range(0..4) {
        0 => rng.gen_range(0..64),
        1 => rng.gen(),
        _ => *t.values.choose(rng).expect("nonempty"),
    }
}

fn mem(rng: &mut impl Rng) -> MemOperand {
    let base = (rng.gen_range(0..20) != 0).then(|| src(rng));
    let index = (rng.gen_range(0..3) == 0).then(|| (gpr(rng), *[1u8, 2, 4, 8].choose(rng).expect("nonempty")));
    let disp = match rng.gen_range(0..6) {
        0 => rng.gen(),
        1 => rng.gen_range(-4096..4096),
        _ => rng.gen_range(-8..8) * 8,
    };
    MemOperand { base, index, disp, ..Default::default() }
}

fn operand<R: Rng>(rng: &mut R, t: &Targets) -> Operand {
    if rng.gen() {
        Operand::Reg(src(rng))
    } else {
        Operand::Imm(imm(rng, t))
    }
}

fn gen_instr<R: Rng>(rng: &mut R, t: &Targets, len: usize) -> Instr {
    // Direct targets may name the padding slot right after the program.
    let target = |rng: &mut R| rng.gen_range(0..=len as u32);
    match rng.gen_range(0..100) {
        0..=7 => Instr::Mov { dst: dst(rng), src: src(rng) },
        8..=17 => {
            let imm = if rng.gen_range(0..4) == 0 { Imm::Code(target(rng)) } else { Imm::Value(imm(rng, t)) };
            Instr::MovImm { dst: dst(rng), imm }
        }
        18..=25 => Instr::Add { dst: dst(rng), a: src(rng), b: operand(rng, t) },
        26..=29 => Instr::Or { dst: dst(rng), a: src(rng), b: operand(rng, t) },
        30..=33 => Instr::Lea { dst: dst(rng), mem: mem(rng) },
        34..=47 => Instr::Load { dst: dst(rng), mem: mem(rng) },
        48..=61 => Instr::Store { mem: mem(rng), src: src(rng) },
        62..=66 => Instr::Cmp { a: src(rng), b: operand(rng, t) },
        67..=71 => {
            let cond = if rng.gen() { Cond::Zero } else { Cond::NotZero };
            Instr::Jcc { cond, target: target(rng) }
        }
        72..=73 => Instr::Jmp { target: target(rng) },
        74..=76 => Instr::JmpReg { reg: src(rng) },
        77..=78 => Instr::Call { target: Target::Code(target(rng)) },
        79..=81 => Instr::CallReg { reg: src(rng) },
        82..=84 => Instr::Push { reg: src(rng) },
        85..=87 => Instr::Pop { reg: dst(rng) },
        88..=90 => Instr::Ret,
        91..=96 => {
            let call = *RuntimeCall::ALL.choose(rng).expect("nonempty");
            Instr::Call { target: Target::Runtime(call) }
        }
        97..=98 => Instr::Syscall,
        _ => Instr::Halt,
    }
}

/// A random program over the registers and forms left to sandboxed code.
pub fn random_program(rng: &mut impl Rng, targets: &[u64], len: usize) -> Program {
    let t = Targets { values: targets.to_vec() };
    Program::from_instrs((0..len).map(|_| gen_instr(rng, &t, len)).collect())
}

fn pattern(seed: u64, len: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen()).collect()
}

fn trial(cfg: &FuzzConfig, index: u64) -> Result<FuzzReport, RuntimeError> {
    let seed = chunk_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rt_cfg = RuntimeConfig {
        engine: EngineConfig { keyid_bits: cfg.keyid_bits, mac_bits: 28, rng_seed: seed, phys_pages: cfg.phys_pages },
        mode: cfg.mode,
        instrument: cfg.instrumented,
        isolate_code: true,
        emit_assertions: true,
        stack_pages: 1,
        trace: false,
    };
    let mut rt = Runtime::new(rt_cfg)?;
    let victim = rt.create("victim", &Program::from_instrs(vec![Instr::Halt]), None)?;
    let small = rt.alloc(victim, VICTIM_SMALL)?;
    let large = rt.alloc(victim, VICTIM_LARGE)?;
    let data = [(small, pattern(seed ^ 1, VICTIM_SMALL)), (large, pattern(seed ^ 2, VICTIM_LARGE))];
    for (addr, bytes) in &data {
        rt.write_as(victim, *addr, bytes)?.expect("victim writes its own chunk");
    }

    let v = rt.sandbox(victim)?;
    let (vbase, vcode, vstack) = (v.base, v.code_base, v.stack_base);
    let layout = *rt.mem().layout();
    // The attacker gets the next keyID; keyID 3 belongs to nobody.
    let abase = layout.window_base(2);
    let astack = abase + window::STACK + 4096 - 512;
    let hostile = vec![
        small,
        small + LINE_SIZE as u64,
        large,
        large + 4096,
        vbase,
        vcode,
        vcode + 1,
        vstack,
        vstack + 4096 - 8,
        vbase + window::PHYS_ALIAS,
        layout.window_base(3),
        0,
        u64::MAX,
        1 << 63,
        (1 << 48) - 8,
    ];
    let mut pool = hostile.clone();
    pool.extend([astack, abase + window::CODE]);
    let attacker_program = random_program(&mut rng, &pool, cfg.program_len);
    let attacker = rt.create("attacker", &attacker_program, None)?;
    debug_assert_eq!(rt.sandbox(attacker)?.base, abase);
    let own_chunk = rt.alloc(attacker, 1024)?;
    let own = [own_chunk, own_chunk + 512, astack, astack + 256];
    {
        let vm = rt.vm_mut(attacker)?;
        for i in 0..13 {
            // Half the registers hold usable pointers so runs get past the
            // first access.
            let v = if rng.gen() { own.choose(&mut rng) } else { hostile.choose(&mut rng) };
            vm.set_reg(Reg::gpr(i), *v.expect("nonempty"));
        }
    }

    let mut spent = 0;
    let mut status = Status::Running;
    while spent < cfg.fuel && rt.sandbox(attacker)?.is_live() {
        status = rt.run(attacker, cfg.fuel - spent)?;
        spent = rt.sandbox(attacker)?.vm().counters.total;
        if !matches!(status, Status::Yielded) {
            break;
        }
    }
    let counters = rt.sandbox(attacker)?.vm().counters;
    let outcome = match &status {
        Status::Running | Status::Yielded => "running",
        Status::Halted => "halted",
        Status::Exited { .. } => "exited",
        Status::Trapped { reason: TrapReason::FuelExhausted } => "running",
        Status::Trapped { reason } => reason.name(),
    };
    let assertion_failures = matches!(status, Status::Trapped { reason: TrapReason::SandboxEscapeAssert { .. } }) as u64;

    let mut silent_corruptions = 0;
    for (addr, bytes) in &data {
        if !rt.sandbox(victim)?.is_live() {
            break;
        }
        if let Ok(got) = rt.read_as(victim, *addr, bytes.len())? {
            if got != *bytes {
                silent_corruptions += 1;
            }
        }
    }
    Ok(FuzzReport {
        programs: 1,
        executed: counters.total,
        loads: counters.loads,
        stores: counters.stores,
        assertions_checked: counters.assertions,
        assertion_failures,
        foreign_accesses: counters.foreign_accesses,
        control_escapes: counters.control_escapes,
        silent_corruptions,
        outcomes: BTreeMap::from([(outcome.to_string(), 1)]),
    })
}

pub fn run_fuzz(cfg: &FuzzConfig, exec: Executor) -> Result<FuzzReport, RuntimeError> {
    let parts = exec.map_chunks(cfg.programs, CHUNK, |_, range| {
        let mut acc = FuzzReport::default();
        for i in range {
            acc.merge(&trial(cfg, i)?);
        }
        Ok::<_, RuntimeError>(acc)
    });
    let mut total = FuzzReport::default();
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}
