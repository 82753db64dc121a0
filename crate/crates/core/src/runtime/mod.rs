// SPDX-License-Identifier: Apache-2.0

//! Trusted runtime: sandbox lifecycle, cache-line allocator with sub-page
//! co-location and relocation, runtime-call gateway, violation handling.
//!
//! Every physical page is aliased into every sandbox window under that
//! sandbox's keyID, so isolation between sandboxes rests on the engine's
//! integrity check alone. The runtime itself touches memory through
//! physical line addresses.

mod heap;
mod sandbox;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

pub use heap::{Chunk, Extent, Heap, Use, LINES};
pub use sandbox::{window, Sandbox, SandboxId, SandboxStatus, Termination};

use crate::crypto::{Engine, EngineConfig, EngineError, KeyId, LINE_SIZE, PAGE_SIZE};
use crate::instrument::{instrument, InstrumentationConfig, Mode, RewriteError};
use crate::isa::vm::{Environment, GateOutcome, Status, TrapReason, VmState};
use crate::isa::{Program, Reg, RuntimeCall};
use crate::memory::{MemError, MemorySystem, Perms};

/// Largest buffer a single `write_out` call may pass.
pub const MAX_WRITE_OUT: u64 = 1 << 16;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("all {0} sandbox keyIDs are in use")]
    Capacity(usize),
    #[error("out of physical pages")]
    Oom,
    #[error("allocation size must be positive")]
    InvalidSize,
    #[error("{vaddr:#x} is not a live chunk of the caller")]
    InvalidFree { vaddr: u64 },
    #[error("sandbox {0:?} is not live")]
    NotLive(SandboxId),
    #[error("no sandbox {0:?}")]
    UnknownSandbox(SandboxId),
    #[error("relocation rejected: {0}")]
    Relocation(String),
    #[error("invalid runtime configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuntimeConfig {
    pub engine: EngineConfig,
    pub mode: Mode,
    /// Load programs through the instrumenter.
    pub instrument: bool,
    pub isolate_code: bool,
    pub emit_assertions: bool,
    pub stack_pages: u64,
    /// Record the zero-flag trace of every sandbox VM.
    pub trace: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            engine: EngineConfig::default(),
            mode: Mode::Gs,
            instrument: true,
            isolate_code: true,
            emit_assertions: false,
            stack_pages: 2,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Disposition {
    Terminated,
    /// The reader owns the corrupted line: its computation is aborted and it
    /// stays live. Attribution comes from simulator-only provenance.
    VictimAborted { writer: Option<SandboxId> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ViolationRecord {
    pub sandbox: SandboxId,
    pub keyid: KeyId,
    pub trap: TrapReason,
    pub disposition: Disposition,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RuntimeStats {
    pub sandboxes_created: u64,
    pub live_sandboxes: u64,
    pub allocations: u64,
    pub frees: u64,
    pub relocated_chunks: u64,
    pub pages_reclaimed: u64,
    pub pages_in_use: u64,
    pub violations: u64,
    pub victim_aborts: u64,
    pub terminations: u64,
    pub lines_scrubbed: u64,
    pub keys_reprogrammed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dest {
    /// A page taken from the pool; equal labels share one page.
    Fresh(u32),
    Page(u64),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RelocationSummary {
    pub moved_chunks: usize,
    pub moved_lines: usize,
    pub reclaimed_pages: Vec<u64>,
    pub fresh_pages: BTreeMap<u32, u64>,
}

pub struct Runtime {
    cfg: RuntimeConfig,
    mem: MemorySystem,
    heap: Heap,
    sandboxes: Vec<Sandbox>,
    by_key: HashMap<KeyId, SandboxId>,
    free_keys: BTreeSet<u16>,
    /// Last keyID the runtime initialized each line with.
    scrub_owner: HashMap<u64, KeyId>,
    scrub_lines: HashMap<KeyId, HashSet<u64>>,
    stats: RuntimeStats,
    violations: Vec<ViolationRecord>,
}

impl Runtime {
    pub fn new(cfg: RuntimeConfig) -> Result<Self, RuntimeError> {
        let engine = Engine::new(cfg.engine)?;
        let mem = MemorySystem::new(engine)?;
        if mem.layout().offset_bits < window::MIN_OFFSET_BITS {
            return Err(RuntimeError::Config(format!("windows need at least {} offset bits", window::MIN_OFFSET_BITS)));
        }
        let alias_bytes = cfg.engine.phys_pages * PAGE_SIZE;
        if window::PHYS_ALIAS + alias_bytes > window::OVERFLOW {
            return Err(RuntimeError::Config("physical memory exceeds the alias region".into()));
        }
        if cfg.stack_pages == 0 {
            return Err(RuntimeError::Config("stack_pages must be positive".into()));
        }
        let free_keys = (1..cfg.engine.key_count() as u16).collect();
        Ok(Runtime {
            cfg,
            mem,
            heap: Heap::new(cfg.engine.phys_pages),
            sandboxes: Vec::new(),
            by_key: HashMap::new(),
            free_keys,
            scrub_owner: HashMap::new(),
            scrub_lines: HashMap::new(),
            stats: RuntimeStats::default(),
            violations: Vec::new(),
        })
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.cfg
    }

    pub fn mem(&self) -> &MemorySystem {
        &self.mem
    }

    /// Direct access for keyID-protect style operations and test oracles.
    pub fn mem_mut(&mut self) -> &mut MemorySystem {
        &mut self.mem
    }

    pub fn heap(&self) -> &Heap {
        &self.heap
    }

    pub fn stats(&self) -> RuntimeStats {
        RuntimeStats {
            live_sandboxes: self.by_key.len() as u64,
            pages_in_use: self.heap.pages_in_use() as u64,
            ..self.stats
        }
    }

    pub fn violations(&self) -> &[ViolationRecord] {
        &self.violations
    }

    pub fn sandboxes(&self) -> &[Sandbox] {
        &self.sandboxes
    }

    pub fn sandbox(&self, id: SandboxId) -> Result<&Sandbox, RuntimeError> {
        self.sandboxes.get(id.0 as usize).ok_or(RuntimeError::UnknownSandbox(id))
    }

    /// Register state of a parked sandbox VM, for seeding and inspection.
    pub fn vm_mut(&mut self, id: SandboxId) -> Result<&mut VmState, RuntimeError> {
        let sb = self.sandboxes.get_mut(id.0 as usize).ok_or(RuntimeError::UnknownSandbox(id))?;
        Ok(sb.vm.as_deref_mut().expect("vm is parked between runs"))
    }

    fn sb_mut(&mut self, id: SandboxId) -> &mut Sandbox {
        &mut self.sandboxes[id.0 as usize]
    }

    fn live(&self, id: SandboxId) -> Result<&Sandbox, RuntimeError> {
        let sb = self.sandbox(id)?;
        if sb.is_live() {
            Ok(sb)
        } else {
            Err(RuntimeError::NotLive(id))
        }
    }

    pub fn sandbox_by_keyid(&self, keyid: KeyId) -> Option<SandboxId> {
        self.by_key.get(&keyid).copied()
    }

    fn init_line(&mut self, paddr: u64, keyid: KeyId, data: &[u8; LINE_SIZE]) -> Result<(), RuntimeError> {
        self.mem.engine_mut().line_write_full(paddr, keyid, data)?;
        if let Some(prev) = self.scrub_owner.insert(paddr, keyid) {
            if let Some(set) = self.scrub_lines.get_mut(&prev) {
                set.remove(&paddr);
            }
        }
        self.scrub_lines.entry(keyid).or_default().insert(paddr);
        Ok(())
    }

    fn take_private_page(&mut self, keyid: KeyId, vpage: u64, fill: &[u8]) -> Result<u64, RuntimeError> {
        let ppn = self.heap.take_page(Use::Private).ok_or(RuntimeError::Oom)?;
        self.heap.occupy(ppn, 0..LINES, keyid);
        self.mem.map_page(vpage, ppn, keyid, Perms::RW)?;
        for l in 0..LINES {
            let mut line = [0u8; LINE_SIZE];
            let start = (l * LINE_SIZE).min(fill.len());
            let end = ((l + 1) * LINE_SIZE).min(fill.len());
            line[..end - start].copy_from_slice(&fill[start..end]);
            self.init_line(ppn * PAGE_SIZE + (l * LINE_SIZE) as u64, keyid, &line)?;
        }
        Ok(ppn)
    }

    /// Creates a sandbox with the lowest free keyID.
    pub fn create(&mut self, name: &str, program: &Program, mode: Option<Mode>) -> Result<SandboxId, RuntimeError> {
        let mode = mode.unwrap_or(self.cfg.mode);
        let Some(&key) = self.free_keys.first() else {
            return Err(RuntimeError::Capacity(self.cfg.engine.key_count() - 1));
        };
        let keyid = KeyId(key);
        let static_pages = (program.static_data.len() as u64).div_ceil(PAGE_SIZE);
        if (self.heap.free_page_count() as u64) < self.cfg.stack_pages + static_pages {
            return Err(RuntimeError::Oom);
        }
        let (program, report) = if self.cfg.instrument {
            let icfg = InstrumentationConfig {
                mode,
                offset_bits: self.mem.layout().offset_bits,
                emit_assertions: self.cfg.emit_assertions,
                isolate_code: self.cfg.isolate_code,
                code_size: None,
            };
            let (p, r) = instrument(program, &icfg)?;
            (p, Some(r))
        } else {
            (program.clone(), None)
        };
        self.free_keys.remove(&key);

        let layout = *self.mem.layout();
        let base = layout.window_base(key);
        self.mem.map_alias_range(base + window::PHYS_ALIAS, 0, self.cfg.engine.phys_pages, keyid, Perms::RW)?;

        let mut private_pages = Vec::new();
        let mut mapped = Vec::new();
        for i in 0..self.cfg.stack_pages {
            let vpage = base + window::STACK + i * PAGE_SIZE;
            private_pages.push(self.take_private_page(keyid, vpage, &[])?);
            mapped.push(vpage);
        }
        for i in 0..static_pages {
            let vpage = base + window::STATIC + i * PAGE_SIZE;
            let from = (i * PAGE_SIZE) as usize;
            private_pages.push(self.take_private_page(keyid, vpage, &program.static_data[from..])?);
            mapped.push(vpage);
        }

        let code_base = base + window::CODE;
        let stack_base = base + window::STACK;
        let stack_size = self.cfg.stack_pages * PAGE_SIZE;
        let mut vm = VmState::new(layout, key, code_base, program.code_size);
        let top = stack_base + stack_size;
        vm.set_reg(Reg::RSP, top);
        vm.set_reg(Reg::RBP, top);
        vm.set_reg(Reg::R13, code_base);
        match mode {
            Mode::Gs => vm.gs = base,
            Mode::R15 => {
                vm.set_reg(Reg::R15, base);
                vm.set_reg(Reg::R14, base);
            }
        }
        if self.cfg.trace {
            vm.enable_trace();
        }

        let id = SandboxId(self.sandboxes.len() as u32);
        self.sandboxes.push(Sandbox {
            id,
            name: name.to_string(),
            keyid,
            base,
            mode,
            code_base,
            code_size: program.code_size,
            stack_base,
            stack_size,
            static_base: base + window::STATIC,
            static_size: program.static_data.len() as u64,
            status: SandboxStatus::Live,
            flagged: false,
            output: Vec::new(),
            program: Arc::new(program),
            report,
            vm: Some(Box::new(vm)),
            page_vpn: HashMap::new(),
            remapped: HashMap::new(),
            next_overflow: base + window::OVERFLOW,
            mapped,
            private_pages,
        });
        self.by_key.insert(keyid, id);
        self.stats.sandboxes_created += 1;
        Ok(id)
    }

    /// Virtual page through which `id` reaches physical page `ppn`.
    fn vpage_for(&mut self, id: SandboxId, ppn: u64) -> Result<u64, RuntimeError> {
        let sb = &self.sandboxes[id.0 as usize];
        if let Some(&v) = sb.page_vpn.get(&ppn) {
            return Ok(v);
        }
        let default = sb.base + window::PHYS_ALIAS + ppn * PAGE_SIZE;
        if !sb.remapped.contains_key(&default) {
            return Ok(default);
        }
        let (v, keyid) = (sb.next_overflow, sb.keyid);
        self.mem.map_page(v, ppn, keyid, Perms::RW)?;
        let sb = self.sb_mut(id);
        sb.next_overflow += PAGE_SIZE;
        sb.page_vpn.insert(ppn, v);
        sb.mapped.push(v);
        Ok(v)
    }

    /// Allocates `size` bytes rounded up to whole lines, zero-initialized
    /// under the sandbox's keyID.
    pub fn alloc(&mut self, id: SandboxId, size: u64) -> Result<u64, RuntimeError> {
        let keyid = self.live(id)?.keyid;
        if size == 0 {
            return Err(RuntimeError::InvalidSize);
        }
        let lines = size.div_ceil(LINE_SIZE as u64);
        let mut extents = Vec::new();
        let vaddr;
        if lines <= LINES as u64 {
            let n = lines as usize;
            let (ppn, first) = match self.heap.find_run(n) {
                Some(found) => found,
                None => (self.heap.take_page(Use::Heap).ok_or(RuntimeError::Oom)?, 0),
            };
            let vpage = match self.vpage_for(id, ppn) {
                Ok(v) => v,
                Err(e) => {
                    self.heap.release(ppn, 0..0);
                    return Err(e);
                }
            };
            extents.push(Extent { ppn, vpage, first_line: first, count: n });
            vaddr = vpage + (first * LINE_SIZE) as u64;
        } else {
            let pages = lines.div_ceil(LINES as u64);
            if (self.heap.free_page_count() as u64) < pages {
                return Err(RuntimeError::Oom);
            }
            let vbase = self.sandboxes[id.0 as usize].next_overflow;
            let mut left = lines as usize;
            for i in 0..pages {
                let ppn = self.heap.take_page(Use::Heap).expect("checked above");
                let vpage = vbase + i * PAGE_SIZE;
                self.mem.map_page(vpage, ppn, keyid, Perms::RW)?;
                self.sb_mut(id).mapped.push(vpage);
                let count = left.min(LINES);
                left -= count;
                extents.push(Extent { ppn, vpage, first_line: 0, count });
            }
            self.sb_mut(id).next_overflow = vbase + pages * PAGE_SIZE;
            vaddr = vbase;
        }
        for e in &extents {
            self.heap.occupy(e.ppn, e.lines(), keyid);
            for i in 0..e.count {
                self.init_line(e.line_paddr(i), keyid, &[0; LINE_SIZE])?;
            }
        }
        self.heap.insert_chunk(Chunk { owner: keyid, vaddr, lines: lines as usize, extents });
        self.stats.allocations += 1;
        Ok(vaddr)
    }

    /// Marks a chunk's lines free. Contents are left in place until the
    /// lines are handed out again.
    pub fn free(&mut self, id: SandboxId, vaddr: u64) -> Result<(), RuntimeError> {
        let keyid = self.live(id)?.keyid;
        let chunk = self.heap.remove_chunk(keyid, vaddr).ok_or(RuntimeError::InvalidFree { vaddr })?;
        for e in &chunk.extents {
            self.heap.release(e.ppn, e.lines());
        }
        self.stats.frees += 1;
        Ok(())
    }

    pub fn chunk(&self, id: SandboxId, vaddr: u64) -> Option<&Chunk> {
        let sb = self.sandbox(id).ok()?;
        self.heap.chunk(sb.keyid, vaddr)
    }

    /// Moves chunks to other physical pages and patches the owners'
    /// mappings so every chunk keeps its virtual address. The mapping is
    /// page-granular, so all chunks one owner reaches through the same
    /// virtual page move together and keep their line indices. Source pages
    /// left empty are returned to the pool.
    pub fn relocate(&mut self, plan: &[(SandboxId, u64, Dest)]) -> Result<RelocationSummary, RuntimeError> {
        let mut summary = RelocationSummary::default();
        if plan.is_empty() {
            return Ok(summary);
        }
        let reject = |m: String| Err(RuntimeError::Relocation(m));

        struct Group {
            owner: SandboxId,
            src: u64,
            dest: Dest,
            vaddrs: Vec<u64>,
            lines: Vec<usize>,
        }
        let mut groups: BTreeMap<(KeyId, u64), Group> = BTreeMap::new();
        for &(id, vaddr, dest) in plan {
            let keyid = self.live(id)?.keyid;
            let Some(chunk) = self.heap.chunk(keyid, vaddr) else {
                return reject(format!("{vaddr:#x} is not a live chunk"));
            };
            let [e] = chunk.extents.as_slice() else {
                return reject(format!("chunk {vaddr:#x} spans several pages"));
            };
            let g = groups.entry((keyid, e.vpage)).or_insert(Group {
                owner: id,
                src: e.ppn,
                dest,
                vaddrs: Vec::new(),
                lines: Vec::new(),
            });
            if g.dest != dest {
                return reject(format!("chunks on virtual page {:#x} must move to one destination", e.vpage));
            }
            if g.vaddrs.contains(&vaddr) {
                return reject(format!("chunk {vaddr:#x} listed twice"));
            }
            g.vaddrs.push(vaddr);
            g.lines.extend(e.lines());
        }
        for (&(keyid, vpage), g) in &groups {
            let on_page = self
                .heap
                .chunks_of(keyid)
                .filter(|c| c.extents.iter().any(|e| e.vpage == vpage))
                .count();
            if on_page != g.vaddrs.len() {
                return reject(format!("virtual page {vpage:#x} holds chunks missing from the plan"));
            }
        }

        // Resolve destinations and check line availability before mutating.
        let labels: BTreeSet<u32> = groups
            .values()
            .filter_map(|g| match g.dest {
                Dest::Fresh(l) => Some(l),
                Dest::Page(_) => None,
            })
            .collect();
        let explicit: BTreeSet<u64> = groups
            .values()
            .filter_map(|g| match g.dest {
                Dest::Page(p) => Some(p),
                Dest::Fresh(_) => None,
            })
            .collect();
        for &p in &explicit {
            if p >= self.cfg.engine.phys_pages {
                return reject(format!("page {p} does not exist"));
            }
            if !self.heap.is_free_page(p) && self.heap.page_kind(p) != Some(Use::Heap) {
                return reject(format!("page {p} is not a heap page"));
            }
        }
        let needed = labels.len() + explicit.iter().filter(|&&p| self.heap.is_free_page(p)).count();
        if self.heap.free_page_count() < needed {
            return Err(RuntimeError::Oom);
        }
        let mut planned: HashMap<Dest, HashSet<usize>> = HashMap::new();
        for g in groups.values() {
            if let Dest::Page(p) = g.dest {
                if p == g.src {
                    return reject(format!("chunk already on page {p}"));
                }
                let free_now = self.heap.is_free_page(p) || g.lines.iter().all(|&l| self.heap.lines_free(p, l..l + 1));
                if !free_now {
                    return reject(format!("destination page {p} has no room at the required lines"));
                }
            }
            let set = planned.entry(g.dest).or_default();
            for &l in &g.lines {
                if !set.insert(l) {
                    return reject("two moves target the same destination line".into());
                }
            }
        }

        // All source lines must verify before anything moves.
        let mut payload: Vec<Vec<(usize, [u8; LINE_SIZE])>> = Vec::new();
        for (&(keyid, _), g) in &groups {
            let mut lines = Vec::new();
            for &l in &g.lines {
                let paddr = g.src * PAGE_SIZE + (l * LINE_SIZE) as u64;
                lines.push((l, self.mem.engine_mut().line_read(paddr, keyid)?));
            }
            payload.push(lines);
        }

        for &p in &explicit {
            if self.heap.is_free_page(p) {
                self.heap.take_specific(p, Use::Heap);
            }
        }
        for &l in &labels {
            let p = self.heap.take_page(Use::Heap).expect("checked above");
            summary.fresh_pages.insert(l, p);
        }

        for (((keyid, vpage), g), lines) in groups.iter().zip(payload) {
            let dest = match g.dest {
                Dest::Page(p) => p,
                Dest::Fresh(l) => summary.fresh_pages[&l],
            };
            for (l, data) in &lines {
                self.init_line(dest * PAGE_SIZE + (l * LINE_SIZE) as u64, *keyid, data)?;
                self.heap.occupy(dest, *l..*l + 1, *keyid);
            }
            for &vaddr in &g.vaddrs {
                let chunk = self.heap.chunk_mut(*keyid, vaddr).expect("validated");
                chunk.extents[0].ppn = dest;
            }
            self.mem.map_page(*vpage, dest, *keyid, Perms::RW)?;
            let sb = self.sb_mut(g.owner);
            sb.remapped.insert(*vpage, dest);
            if sb.page_vpn.get(&g.src) == Some(vpage) {
                sb.page_vpn.remove(&g.src);
            }
            let in_range = *vpage >= sb.base + window::PHYS_ALIAS && *vpage < sb.base + window::OVERFLOW;
            if in_range && !sb.mapped.contains(vpage) {
                sb.mapped.push(*vpage);
            }
            let mut emptied = false;
            for &l in &g.lines {
                emptied |= self.heap.release(g.src, l..l + 1);
            }
            if emptied {
                summary.reclaimed_pages.push(g.src);
                self.stats.pages_reclaimed += 1;
            }
            summary.moved_chunks += g.vaddrs.len();
            summary.moved_lines += lines.len();
        }
        summary.reclaimed_pages.sort_unstable();
        self.stats.relocated_chunks += summary.moved_chunks as u64;
        Ok(summary)
    }

    /// Reads on behalf of a sandbox. A fault is handled by the violation
    /// policy before it is returned.
    pub fn read_as(&mut self, id: SandboxId, vaddr: u64, len: usize) -> Result<Result<Vec<u8>, TrapReason>, RuntimeError> {
        self.live(id)?;
        match self.mem.read(vaddr, len) {
            Ok(bytes) => Ok(Ok(bytes)),
            Err(e) => {
                let trap = TrapReason::from(e);
                self.handle_violation(id, trap.clone());
                Ok(Err(trap))
            }
        }
    }

    pub fn write_as(&mut self, id: SandboxId, vaddr: u64, bytes: &[u8]) -> Result<Result<(), TrapReason>, RuntimeError> {
        self.live(id)?;
        match self.mem.write(vaddr, bytes) {
            Ok(()) => Ok(Ok(())),
            Err(e) => {
                let trap = TrapReason::from(e);
                self.handle_violation(id, trap.clone());
                Ok(Err(trap))
            }
        }
    }

    /// An 8-byte read of an arbitrary pointer, confined the way instrumented
    /// code confines it. Returns the address actually accessed.
    pub fn forge_read(&mut self, id: SandboxId, addr: u64) -> Result<(u64, Result<Vec<u8>, TrapReason>), RuntimeError> {
        let base = self.live(id)?.base;
        let confined = base | (addr & self.mem.layout().truncation_mask());
        Ok((confined, self.read_as(id, confined, 8)?))
    }

    /// Applies the violation policy to a trap raised while `id` ran.
    pub fn handle_violation(&mut self, id: SandboxId, trap: TrapReason) -> Disposition {
        let keyid = self.sandboxes[id.0 as usize].keyid;
        self.stats.violations += 1;
        let mut disposition = Disposition::Terminated;
        if let TrapReason::IntegrityViolation { paddr, .. } = trap {
            let occupant = self.heap.occupant(paddr / PAGE_SIZE, ((paddr % PAGE_SIZE) as usize) / LINE_SIZE);
            if occupant == Some(keyid) {
                let writer = self
                    .mem
                    .engine()
                    .provenance(paddr)
                    .map(|p| p.last_writer)
                    .filter(|&w| w != keyid)
                    .and_then(|w| self.sandbox_by_keyid(w));
                if let Some(w) = writer {
                    self.sb_mut(w).flagged = true;
                }
                disposition = Disposition::VictimAborted { writer };
            }
        }
        match disposition {
            Disposition::Terminated => self.terminate(id, Termination::Trap { reason: trap.clone() }),
            Disposition::VictimAborted { .. } => self.stats.victim_aborts += 1,
        }
        self.violations.push(ViolationRecord { sandbox: id, keyid, trap, disposition: disposition.clone() });
        disposition
    }

    /// Ends a sandbox and sweeps everything it owned. Its keyID is
    /// reprogrammed before it becomes available again.
    pub fn terminate(&mut self, id: SandboxId, termination: Termination) {
        if !self.sandboxes[id.0 as usize].is_live() {
            return;
        }
        let keyid = self.sandboxes[id.0 as usize].keyid;
        let chunks: Vec<u64> = self.heap.chunks_of(keyid).map(|c| c.vaddr).collect();
        for vaddr in chunks {
            let chunk = self.heap.remove_chunk(keyid, vaddr).expect("listed");
            for e in &chunk.extents {
                self.heap.release(e.ppn, e.lines());
            }
        }
        let private = std::mem::take(&mut self.sb_mut(id).private_pages);
        for ppn in private {
            self.heap.release(ppn, 0..LINES);
        }
        let mut lines: Vec<u64> = self.scrub_lines.remove(&keyid).unwrap_or_default().into_iter().collect();
        lines.sort_unstable();
        for paddr in &lines {
            self.scrub_owner.remove(paddr);
            self.mem
                .engine_mut()
                .line_write_full(*paddr, KeyId::DEFAULT, &[0; LINE_SIZE])
                .expect("swept line is in range");
        }
        self.stats.lines_scrubbed += lines.len() as u64;

        let base = self.sandboxes[id.0 as usize].base;
        self.mem.unmap_alias_range(base + window::PHYS_ALIAS);
        for vpage in std::mem::take(&mut self.sb_mut(id).mapped) {
            // Entries inside the alias range went with it.
            let _ = self.mem.unmap_page(vpage);
        }
        self.mem.engine_mut().program_key(keyid).expect("sandbox keyID is valid");
        self.stats.keys_reprogrammed += 1;

        let sb = self.sb_mut(id);
        sb.status = SandboxStatus::Terminated { termination };
        sb.page_vpn.clear();
        sb.remapped.clear();
        self.by_key.remove(&keyid);
        self.free_keys.insert(keyid.0);
        self.stats.terminations += 1;
    }

    fn validate_arg(&self, id: SandboxId, addr: u64, len: u64) -> Result<(), TrapReason> {
        let alias = self.sandboxes[id.0 as usize].keyid.0;
        let layout = self.mem.layout();
        let last = addr.checked_add(len.max(1) - 1).ok_or(TrapReason::ArgValidation { addr })?;
        if layout.alias_of(addr) == Some(alias) && layout.alias_of(last) == Some(alias) {
            Ok(())
        } else {
            Err(TrapReason::ArgValidation { addr })
        }
    }

    fn gate(&mut self, id: SandboxId, vm: &mut VmState, call: RuntimeCall) -> Result<GateOutcome, TrapReason> {
        let arg = |i: u8| vm.reg(Reg::gpr(i));
        let result = match call {
            RuntimeCall::Alloc => match self.alloc(id, arg(1)) {
                Ok(v) => v,
                Err(RuntimeError::Oom | RuntimeError::InvalidSize) => 0,
                Err(e) => return Err(TrapReason::MachineFault { message: e.to_string() }),
            },
            RuntimeCall::Free => {
                let addr = arg(1);
                self.validate_arg(id, addr, 1)?;
                match self.free(id, addr) {
                    Ok(()) => 0,
                    Err(_) => u64::MAX,
                }
            }
            RuntimeCall::WriteOut => {
                let (buf, len) = (arg(1), arg(2));
                if len > MAX_WRITE_OUT {
                    return Err(TrapReason::ArgValidation { addr: buf });
                }
                if len > 0 {
                    self.validate_arg(id, buf, len)?;
                    let bytes = self.mem.read(buf, len as usize)?;
                    self.sb_mut(id).output.extend_from_slice(&bytes);
                }
                len
            }
            RuntimeCall::Yield => return Ok(GateOutcome::Yield),
            RuntimeCall::Exit => return Ok(GateOutcome::Exit(arg(1))),
        };
        vm.set_reg(Reg::gpr(0), result);
        Ok(GateOutcome::Continue)
    }

    /// Runs a sandbox for at most `fuel` instructions. Running out of fuel
    /// pauses the sandbox; traps go through the violation policy.
    pub fn run(&mut self, id: SandboxId, fuel: u64) -> Result<Status, RuntimeError> {
        self.live(id)?;
        let sb = self.sb_mut(id);
        let mut vm = sb.vm.take().expect("vm is parked between runs");
        let program = Arc::clone(&sb.program);
        vm.resume();
        let status = vm.run(&program, &mut Gate { rt: self, id }, fuel);
        if status == (Status::Trapped { reason: TrapReason::FuelExhausted }) {
            vm.status = Status::Running;
        }
        self.sb_mut(id).vm = Some(vm);
        match &status {
            Status::Trapped { reason: TrapReason::FuelExhausted } => {}
            Status::Trapped { reason } => {
                self.handle_violation(id, reason.clone());
            }
            Status::Exited { code } => self.terminate(id, Termination::Exit { code: *code }),
            _ => {}
        }
        Ok(status)
    }

    /// Cooperative round robin: every runnable sandbox gets `slice`
    /// instructions per round until none is runnable or `rounds` is spent.
    pub fn schedule(&mut self, slice: u64, rounds: u64) -> Result<u64, RuntimeError> {
        for round in 0..rounds {
            let runnable: Vec<SandboxId> = self
                .sandboxes
                .iter()
                .filter(|s| s.is_live() && matches!(s.vm().status, Status::Running | Status::Yielded))
                .map(|s| s.id)
                .collect();
            if runnable.is_empty() {
                return Ok(round);
            }
            for id in runnable {
                if self.sandboxes[id.0 as usize].is_live() {
                    self.run(id, slice)?;
                }
            }
        }
        Ok(rounds)
    }

    /// Differential check of the allocator against the engine's ownership
    /// record and of the structural heap invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        let occupied = self.heap.occupied_lines();
        for &(paddr, keyid) in &occupied {
            let owner = self.mem.engine().provenance(paddr).map(|p| p.owner);
            if owner != Some(keyid) {
                return Err(format!("line {paddr:#x}: allocator says {keyid}, engine says {owner:?}"));
            }
        }
        let mut chunk_lines = 0;
        for c in self.heap.chunks() {
            if c.vaddr % LINE_SIZE as u64 != 0 {
                return Err(format!("chunk {:#x} is not line aligned", c.vaddr));
            }
            let sum: usize = c.extents.iter().map(|e| e.count).sum();
            if sum != c.lines {
                return Err(format!("chunk {:#x} extents cover {sum} of {} lines", c.vaddr, c.lines));
            }
            for e in &c.extents {
                for l in e.lines() {
                    if self.heap.occupant(e.ppn, l) != Some(c.owner) {
                        return Err(format!("chunk {:#x} line {}:{l} not occupied by its owner", c.vaddr, e.ppn));
                    }
                }
                let got = self.mem.translate(e.vpage, crate::memory::Access::Read).map_err(|e| e.to_string())?;
                if got.paddr_line / PAGE_SIZE != e.ppn || got.keyid != c.owner {
                    return Err(format!("chunk {:#x} mapping does not reach page {}", c.vaddr, e.ppn));
                }
            }
            chunk_lines += c.lines;
        }
        let private_lines: usize =
            self.sandboxes.iter().filter(|s| s.is_live()).map(|s| s.private_pages.len() * LINES).sum();
        if chunk_lines + private_lines != occupied.len() {
            return Err(format!(
                "{} occupied lines but {chunk_lines} chunk and {private_lines} private lines",
                occupied.len()
            ));
        }
        let max = self.cfg.engine.key_count() - 1;
        if self.by_key.len() > max {
            return Err(format!("{} live sandboxes exceed {max}", self.by_key.len()));
        }
        Ok(())
    }
}

struct Gate<'a> {
    rt: &'a mut Runtime,
    id: SandboxId,
}

impl Environment for Gate<'_> {
    fn mem(&mut self) -> &mut MemorySystem {
        &mut self.rt.mem
    }

    fn runtime_call(&mut self, vm: &mut VmState, call: RuntimeCall) -> Result<GateOutcome, TrapReason> {
        self.rt.gate(self.id, vm, call)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rt(keyid_bits: u8) -> Runtime {
        let engine = EngineConfig { keyid_bits, phys_pages: 256, ..Default::default() };
        Runtime::new(RuntimeConfig { engine, stack_pages: 1, ..Default::default() }).unwrap()
    }

    fn halt() -> Program {
        Program::parse("halt").unwrap()
    }

    #[test]
    fn first_sandbox_layout() {
        let mut r = rt(6);
        let id = r.create("a", &halt(), None).unwrap();
        let sb = r.sandbox(id).unwrap();
        assert_eq!((sb.keyid, sb.base), (KeyId(1), 1 << 48));
        assert_eq!(sb.vm().gs, 1 << 48);
        r.check_invariants().unwrap();
    }

    #[test]
    fn capacity_at_six_bits() {
        let mut r = rt(6);
        for i in 0..63 {
            r.create(&format!("s{i}"), &halt(), None).unwrap();
        }
        assert!(matches!(r.create("x", &halt(), None), Err(RuntimeError::Capacity(63))));
    }

    #[test]
    fn alloc_rounds_to_lines_and_zero_fills() {
        let mut r = rt(6);
        let id = r.create("a", &halt(), None).unwrap();
        let v = r.alloc(id, 100).unwrap();
        assert_eq!(r.chunk(id, v).unwrap().lines, 2);
        assert_eq!(r.read_as(id, v, 128).unwrap().unwrap(), vec![0; 128]);
        r.check_invariants().unwrap();
    }

    #[test]
    fn co_located_chunks_are_isolated() {
        let mut r = rt(6);
        let y = r.create("y", &halt(), None).unwrap();
        let z = r.create("z", &halt(), None).unwrap();
        let vy = r.alloc(y, 1024).unwrap();
        let vz = r.alloc(z, 1024).unwrap();
        let (py, pz) = (r.chunk(y, vy).unwrap().extents[0].ppn, r.chunk(z, vz).unwrap().extents[0].ppn);
        assert_eq!(py, pz);
        r.write_as(y, vy, &[7; 64]).unwrap().unwrap();
        let mask = r.mem().layout().truncation_mask();
        let cross = r.sandbox(z).unwrap().base | (vy & mask);
        let got = r.read_as(z, cross, 8).unwrap();
        assert!(matches!(got, Err(TrapReason::IntegrityViolation { .. })));
        assert!(!r.sandbox(z).unwrap().is_live());
        assert_eq!(r.read_as(y, vy, 1).unwrap().unwrap(), vec![7]);
    }

    #[test]
    fn free_errors() {
        let mut r = rt(6);
        let a = r.create("a", &halt(), None).unwrap();
        let b = r.create("b", &halt(), None).unwrap();
        let v = r.alloc(a, 64).unwrap();
        assert!(matches!(r.free(b, v), Err(RuntimeError::InvalidFree { .. })));
        r.free(a, v).unwrap();
        assert!(matches!(r.free(a, v), Err(RuntimeError::InvalidFree { .. })));
    }

    #[test]
    fn realloc_never_shows_prior_plaintext() {
        let mut r = rt(6);
        let a = r.create("a", &halt(), None).unwrap();
        let b = r.create("b", &halt(), None).unwrap();
        let v = r.alloc(a, 64).unwrap();
        r.write_as(a, v, &[0xAB; 64]).unwrap().unwrap();
        r.free(a, v).unwrap();
        let w = r.alloc(b, 64).unwrap();
        assert_eq!(w & 0xFFFF_FFFF_FFFF, v & 0xFFFF_FFFF_FFFF, "same physical line");
        assert_eq!(r.read_as(b, w, 64).unwrap().unwrap(), vec![0; 64]);
    }

    #[test]
    fn multi_page_chunk() {
        let mut r = rt(6);
        let a = r.create("a", &halt(), None).unwrap();
        let v = r.alloc(a, 3 * 4096 + 64).unwrap();
        let c = r.chunk(a, v).unwrap();
        assert_eq!(c.extents.len(), 4);
        let data: Vec<u8> = (0..3 * 4096 + 64).map(|i| i as u8).collect();
        r.write_as(a, v, &data).unwrap().unwrap();
        assert_eq!(r.read_as(a, v, data.len()).unwrap().unwrap(), data);
        r.check_invariants().unwrap();
    }

    #[test]
    fn relocation_keeps_vaddrs() {
        let mut r = rt(6);
        let a = r.create("a", &halt(), None).unwrap();
        let b = r.create("b", &halt(), None).unwrap();
        let va = r.alloc(a, 1024).unwrap();
        let vb = r.alloc(b, 1024).unwrap();
        r.write_as(a, va, &[1; 1024]).unwrap().unwrap();
        r.write_as(b, vb, &[2; 1024]).unwrap().unwrap();
        let s = r.relocate(&[(a, va, Dest::Fresh(0)), (b, vb, Dest::Fresh(0))]).unwrap();
        assert_eq!(s.reclaimed_pages.len(), 1);
        assert_eq!(r.read_as(a, va, 1024).unwrap().unwrap(), vec![1; 1024]);
        assert_eq!(r.read_as(b, vb, 1024).unwrap().unwrap(), vec![2; 1024]);
        r.check_invariants().unwrap();
        // New allocations still land where their mapping says.
        let again = r.alloc(a, 64).unwrap();
        r.write_as(a, again, &[3; 64]).unwrap().unwrap();
        r.check_invariants().unwrap();
    }

    #[test]
    fn relocation_rejects_partial_groups() {
        let mut r = rt(6);
        let a = r.create("a", &halt(), None).unwrap();
        let v1 = r.alloc(a, 64).unwrap();
        let _v2 = r.alloc(a, 64).unwrap();
        assert!(matches!(r.relocate(&[(a, v1, Dest::Fresh(0))]), Err(RuntimeError::Relocation(_))));
        assert_eq!(r.relocate(&[]).unwrap(), RelocationSummary::default());
    }

    #[test]
    fn syscalls_from_code() {
        let mut r = rt(6);
        let src = "movimm r0, 1\nmovimm r1, 100\nsyscall\nmov r5, r0\nmovimm r2, 0x5a\nstore [r5], r2\n\
                   movimm r0, 3\nmov r1, r5\nmovimm r2, 1\nsyscall\nmovimm r1, 9\ncall @exit\n";
        let id = r.create("a", &Program::parse(src).unwrap(), None).unwrap();
        let st = r.run(id, 1000).unwrap();
        assert_eq!(st, Status::Exited { code: 9 });
        let sb = r.sandbox(id).unwrap();
        assert_eq!(sb.output, vec![0x5a]);
        assert_eq!(sb.termination().unwrap().name(), "clean");
        // Keyid recycled after the sweep.
        let next = r.create("b", &halt(), None).unwrap();
        assert_eq!(r.sandbox(next).unwrap().keyid, KeyId(1));
    }

    #[test]
    fn foreign_buffer_fails_validation() {
        let mut r = rt(6);
        let src = "movimm r0, 3\nmovimm r1, 0x0002000000001000\nmovimm r2, 8\nsyscall\nhalt";
        let id = r.create("a", &Program::parse(src).unwrap(), None).unwrap();
        let st = r.run(id, 100).unwrap();
        assert!(matches!(st, Status::Trapped { reason: TrapReason::ArgValidation { .. } }));
        assert!(!r.sandbox(id).unwrap().is_live());
    }

    #[test]
    fn trap_in_one_sandbox_leaves_others_running() {
        let mut r = rt(6);
        let bad = Program::parse("movimm r0, 77\nsyscall").unwrap();
        let good = Program::parse("movimm r1, 3\nl: add r1, r1, -1\ncall @yield\ncmp r1, 0\njnz l\nhalt").unwrap();
        let a = r.create("a", &bad, None).unwrap();
        let b = r.create("b", &good, None).unwrap();
        r.schedule(2, 100).unwrap();
        assert!(!r.sandbox(a).unwrap().is_live());
        assert_eq!(r.sandbox(b).unwrap().vm().status, Status::Halted);
    }

    #[test]
    fn sweep_scrubs_and_rekeys() {
        let mut r = rt(6);
        let a = r.create("a", &halt(), None).unwrap();
        let v = r.alloc(a, 64).unwrap();
        r.write_as(a, v, &[0xCD; 64]).unwrap().unwrap();
        let paddr = r.chunk(a, v).unwrap().extents[0].line_paddr(0);
        r.free(a, v).unwrap();
        r.terminate(a, Termination::Exit { code: 0 });
        assert_eq!(r.mem().engine().provenance(paddr).unwrap().owner, KeyId::DEFAULT);
        let b = r.create("b", &halt(), None).unwrap();
        assert_eq!(r.sandbox(b).unwrap().keyid, KeyId(1));
        let view = r.sandbox(b).unwrap().base | (v & r.mem().layout().truncation_mask());
        assert!(r.read_as(b, view, 64).unwrap().is_err());
    }
}
