// SPDX-License-Identifier: Apache-2.0

//! Dynamic instruction-count overhead of the instrumenter.
//!
//! Every program runs once per mode and variant in a fresh runtime. The
//! data-only variant confines memory operands; code+data also confines
//! indirect control flow.

use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::crypto::EngineConfig;
use crate::instrument::Mode;
use crate::isa::vm::Status;
use crate::isa::{Cond, Imm, Instr, MemOperand, Operand, ParseError, Program, Reg, RuntimeCall, Target};
use crate::parallel::Executor;
use crate::runtime::{Runtime, RuntimeConfig, RuntimeError};

pub const SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum OverheadError {
    #[error("{path}: {source}")]
    Parse { path: String, source: ParseError },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{program}: {source}")]
    Runtime { program: String, source: RuntimeError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    DataOnly,
    CodeData,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::DataOnly, Variant::CodeData];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadRow {
    pub program: String,
    pub mode: Mode,
    pub variant: Variant,
    pub total: u64,
    pub extra: u64,
    /// `extra / total`.
    pub fraction: f64,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadReport {
    pub schema: u32,
    pub fuel: u64,
    pub rows: Vec<OverheadRow>,
}

impl OverheadReport {
    pub fn row(&self, program: &str, mode: Mode, variant: Variant) -> Option<&OverheadRow> {
        self.rows.iter().find(|r| r.program == program && r.mode == mode && r.variant == variant)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// `.s` files of `dir`, in name order.
pub fn load_corpus(dir: &Path) -> Result<Vec<(String, Program)>, OverheadError> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "s"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p)?;
            let name = p.file_stem().expect("has extension").to_string_lossy().into_owned();
            let program =
                Program::parse(&text).map_err(|source| OverheadError::Parse { path: p.display().to_string(), source })?;
            Ok((name, program))
        })
        .collect()
}

/// Allocates one line and loads from it `n` times through a non-stack
/// pointer.
pub fn load_loop(n: u64) -> Program {
    let (r0, r1, r2, r3) = (Reg::gpr(0), Reg::gpr(1), Reg::gpr(2), Reg::gpr(3));
    Program::from_instrs(vec![
        Instr::MovImm { dst: r1, imm: Imm::Value(64) },
        Instr::Call { target: Target::Runtime(RuntimeCall::Alloc) },
        Instr::MovImm { dst: r2, imm: Imm::Value(n) },
        Instr::Load { dst: r3, mem: MemOperand::base_disp(r0, 0) },
        Instr::Add { dst: r2, a: r2, b: Operand::Imm(u64::MAX) },
        Instr::Jcc { cond: Cond::NotZero, target: 3 },
        Instr::Halt,
    ])
}

pub fn measure(name: &str, program: &Program, mode: Mode, variant: Variant, fuel: u64) -> Result<OverheadRow, RuntimeError> {
    let mut rt = Runtime::new(RuntimeConfig {
        engine: EngineConfig { phys_pages: 256, ..EngineConfig::default() },
        mode,
        instrument: true,
        isolate_code: variant == Variant::CodeData,
        emit_assertions: false,
        ..RuntimeConfig::default()
    })?;
    let id = rt.create(name, program, None)?;
    let status = rt.run(id, fuel)?;
    let c = rt.sandbox(id)?.vm().counters;
    Ok(OverheadRow {
        program: name.to_string(),
        mode,
        variant,
        total: c.total,
        extra: c.extra_instrumentation,
        fraction: if c.total == 0 { 0.0 } else { c.extra_instrumentation as f64 / c.total as f64 },
        status,
    })
}

pub fn run_overhead(programs: &[(String, Program)], fuel: u64, exec: Executor) -> Result<OverheadReport, OverheadError> {
    let cells: Vec<(usize, Mode, Variant)> = (0..programs.len())
        .flat_map(|p| Mode::ALL.into_iter().flat_map(move |m| Variant::ALL.into_iter().map(move |v| (p, m, v))))
        .collect();
    let rows = exec.map_chunks(cells.len() as u64, 1, |i, _| {
        let (p, mode, variant) = cells[i as usize];
        let (name, program) = &programs[p];
        measure(name, program, mode, variant, fuel).map_err(|source| OverheadError::Runtime { program: name.clone(), source })
    });
    Ok(OverheadReport { schema: SCHEMA, fuel, rows: rows.into_iter().collect::<Result<_, _>>()? })
}
