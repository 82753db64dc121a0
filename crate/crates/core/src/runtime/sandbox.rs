// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;
use std::sync::Arc;

use serde::Serialize;

use crate::crypto::KeyId;
use crate::instrument::{Mode, Report};
use crate::isa::vm::{TrapReason, VmState};
use crate::isa::Program;

/// Offsets inside a sandbox's alias window.
pub mod window {
    /// Width of the bands at both ends of a window that are never mapped.
    pub const GUARD: u64 = 1 << 32;
    pub const STACK: u64 = 1 << 33;
    pub const STATIC: u64 = 1 << 34;
    /// Every physical page `p` is visible at `PHYS_ALIAS + p * 4096`.
    pub const PHYS_ALIAS: u64 = 1 << 36;
    /// Remapped pages and multi-page chunks.
    pub const OVERFLOW: u64 = 1 << 42;
    pub const CODE: u64 = 1 << 44;
    pub const MIN_OFFSET_BITS: u8 = 46;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct SandboxId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    Exit { code: u64 },
    Trap { reason: TrapReason },
}

impl Termination {
    /// `clean` for exits, the trap name otherwise.
    pub fn name(&self) -> &'static str {
        match self {
            Termination::Exit { .. } => "clean",
            Termination::Trap { reason } => reason.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SandboxStatus {
    Live,
    Terminated { termination: Termination },
}

#[derive(Debug)]
pub struct Sandbox {
    pub id: SandboxId,
    pub name: String,
    pub keyid: KeyId,
    /// `alias << offset_bits`; alias equals keyid.
    pub base: u64,
    pub mode: Mode,
    pub code_base: u64,
    pub code_size: u64,
    pub stack_base: u64,
    pub stack_size: u64,
    pub static_base: u64,
    pub static_size: u64,
    pub status: SandboxStatus,
    /// Attributed writer of a corrupted line read by some victim.
    pub flagged: bool,
    /// Bytes passed to the `write_out` runtime call.
    pub output: Vec<u8>,
    pub program: Arc<Program>,
    pub report: Option<Report>,
    pub(crate) vm: Option<Box<VmState>>,
    /// Non-default virtual page through which a physical page is reached.
    pub(crate) page_vpn: HashMap<u64, u64>,
    /// Virtual pages whose exact entry no longer matches the alias range.
    pub(crate) remapped: HashMap<u64, u64>,
    pub(crate) next_overflow: u64,
    /// Exact entries outside the alias range.
    pub(crate) mapped: Vec<u64>,
    pub(crate) private_pages: Vec<u64>,
}

impl Sandbox {
    pub fn is_live(&self) -> bool {
        self.status == SandboxStatus::Live
    }

    pub fn vm(&self) -> &VmState {
        self.vm.as_deref().expect("vm is parked between runs")
    }

    pub fn stack_top(&self) -> u64 {
        self.stack_base + self.stack_size
    }

    pub fn termination(&self) -> Option<&Termination> {
        match &self.status {
            SandboxStatus::Live => None,
            SandboxStatus::Terminated { termination } => Some(termination),
        }
    }
}
