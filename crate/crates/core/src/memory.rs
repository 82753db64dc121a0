// SPDX-License-Identifier: Apache-2.0

//! Paging on top of the encryption engine.
//!
//! A virtual address decomposes as `[zero padding | alias | offset]`. The PTE
//! reached through the full virtual page number (alias bits included) carries
//! the keyID used for the access, so the same physical page mapped under two
//! aliases is seen through two different keys.
//!
//! The page table is flat. Besides single-page entries it holds alias ranges,
//! a compact form of many consecutive PTEs sharing one keyID; a single-page
//! entry always takes precedence over a range, and an entry with
//! `valid == false` punches a hole into one.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::crypto::{Engine, EngineError, KeyId, LINE_SIZE};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("page fault at {0:#x}")]
    PageFault(u64),
    #[error("{access:?} access to {vaddr:#x} violates page permissions")]
    ProtectionFault { vaddr: u64, access: Access },
    #[error("access at {0:#x} straddles pages with different keyIDs")]
    MixedKeyAccess(u64),
    #[error("address {0:#x} is not page aligned")]
    Misaligned(u64),
    #[error("physical page {0} is out of range")]
    PpnOutOfRange(u64),
    #[error("keyID {0} is out of range")]
    KeyIdOutOfRange(u16),
    #[error("mapping at {0:#x} would be writable and executable")]
    WriteExecute(u64),
    #[error("invalid address layout: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Access {
    Read,
    Write,
    Execute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl Perms {
    pub const R: Perms = Perms { read: true, write: false, execute: false };
    pub const RW: Perms = Perms { read: true, write: true, execute: false };
    pub const RX: Perms = Perms { read: true, write: false, execute: true };

    pub fn allows(&self, access: Access) -> bool {
        match access {
            Access::Read => self.read,
            Access::Write => self.write,
            Access::Execute => self.execute,
        }
    }
}

/// Split of a 64-bit virtual address into alias index and in-sandbox offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddressLayout {
    pub offset_bits: u8,
    pub alias_bits: u8,
    pub page_bits: u8,
}

impl AddressLayout {
    pub const LINE_BITS: u8 = 6;

    pub fn new(offset_bits: u8, alias_bits: u8, page_bits: u8) -> Result<Self, MemError> {
        if offset_bits as u32 + alias_bits as u32 > 63 {
            return Err(MemError::Layout(format!(
                "offset_bits {offset_bits} + alias_bits {alias_bits} exceeds 63"
            )));
        }
        if alias_bits == 0 || page_bits < Self::LINE_BITS || page_bits >= offset_bits {
            return Err(MemError::Layout(format!(
                "unsupported alias_bits {alias_bits} / page_bits {page_bits}"
            )));
        }
        Ok(AddressLayout { offset_bits, alias_bits, page_bits })
    }

    /// 48-bit sandbox offsets and 4 KiB pages.
    pub fn with_alias_bits(alias_bits: u8) -> Result<Self, MemError> {
        Self::new(48, alias_bits, 12)
    }

    pub fn truncation_mask(&self) -> u64 {
        (1u64 << self.offset_bits) - 1
    }

    pub fn page_size(&self) -> u64 {
        1 << self.page_bits
    }

    /// Bits above alias and offset must be zero.
    pub fn is_canonical(&self, vaddr: u64) -> bool {
        vaddr >> (self.offset_bits + self.alias_bits) == 0
    }

    pub fn decompose(&self, vaddr: u64) -> Option<(u16, u64)> {
        self.is_canonical(vaddr)
            .then(|| ((vaddr >> self.offset_bits) as u16, vaddr & self.truncation_mask()))
    }

    pub fn compose(&self, alias: u16, offset: u64) -> u64 {
        debug_assert!((alias as u64) < 1 << self.alias_bits);
        debug_assert!(offset <= self.truncation_mask());
        ((alias as u64) << self.offset_bits) | offset
    }

    pub fn alias_of(&self, vaddr: u64) -> Option<u16> {
        self.decompose(vaddr).map(|(a, _)| a)
    }

    pub fn window_base(&self, alias: u16) -> u64 {
        self.compose(alias, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageTableEntry {
    pub ppn: u64,
    pub keyid: KeyId,
    pub perms: Perms,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct AliasRange {
    pages: u64,
    first_ppn: u64,
    keyid: KeyId,
    perms: Perms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Translation {
    pub paddr_line: u64,
    pub offset: usize,
    pub keyid: KeyId,
}

/// One line-sized piece of a larger access.
#[derive(Debug, Clone, Copy)]
struct LineSpan {
    translation: Translation,
    len: usize,
}

#[derive(Debug, Default, Clone)]
struct PageTable {
    entries: BTreeMap<u64, PageTableEntry>,
    ranges: BTreeMap<u64, AliasRange>,
}

impl PageTable {
    fn lookup(&self, vpn: u64) -> Option<PageTableEntry> {
        if let Some(e) = self.entries.get(&vpn) {
            return e.valid.then_some(*e);
        }
        let (&start, r) = self.ranges.range(..=vpn).next_back()?;
        (vpn - start < r.pages).then(|| PageTableEntry {
            ppn: r.first_ppn + (vpn - start),
            keyid: r.keyid,
            perms: r.perms,
            valid: true,
        })
    }

    fn in_range(&self, vpn: u64) -> bool {
        self.ranges
            .range(..=vpn)
            .next_back()
            .is_some_and(|(&start, r)| vpn - start < r.pages)
    }
}

/// Physical memory plus one process page table.
#[derive(Debug)]
pub struct MemorySystem {
    layout: AddressLayout,
    engine: Engine,
    table: PageTable,
}

impl MemorySystem {
    /// Default layout: 48 offset bits, alias bits equal to the engine's keyID
    /// width.
    pub fn new(engine: Engine) -> Result<Self, MemError> {
        let layout = AddressLayout::with_alias_bits(engine.config().keyid_bits)?;
        Self::with_layout(engine, layout)
    }

    pub fn with_layout(engine: Engine, layout: AddressLayout) -> Result<Self, MemError> {
        if layout.alias_bits != engine.config().keyid_bits {
            return Err(MemError::Layout("alias_bits must equal keyid_bits".into()));
        }
        Ok(MemorySystem { layout, engine, table: PageTable::default() })
    }

    pub fn layout(&self) -> &AddressLayout {
        &self.layout
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    pub fn phys_pages(&self) -> u64 {
        self.engine.config().phys_pages
    }

    fn vpn(&self, vaddr: u64) -> u64 {
        vaddr >> self.layout.page_bits
    }

    fn check_mapping(&self, vaddr_page: u64, ppn: u64, keyid: KeyId, perms: Perms) -> Result<(), MemError> {
        if vaddr_page & (self.layout.page_size() - 1) != 0 {
            return Err(MemError::Misaligned(vaddr_page));
        }
        if !self.layout.is_canonical(vaddr_page) {
            return Err(MemError::PageFault(vaddr_page));
        }
        if ppn >= self.phys_pages() {
            return Err(MemError::PpnOutOfRange(ppn));
        }
        if keyid.0 as usize >= self.engine.key_table().len() {
            return Err(MemError::KeyIdOutOfRange(keyid.0));
        }
        if perms.write && perms.execute {
            return Err(MemError::WriteExecute(vaddr_page));
        }
        Ok(())
    }

    /// Maps (or remaps) one virtual page. The VPN includes the alias bits.
    pub fn map_page(&mut self, vaddr_page: u64, ppn: u64, keyid: KeyId, perms: Perms) -> Result<(), MemError> {
        self.check_mapping(vaddr_page, ppn, keyid, perms)?;
        let vpn = self.vpn(vaddr_page);
        self.table.entries.insert(vpn, PageTableEntry { ppn, keyid, perms, valid: true });
        Ok(())
    }

    /// Maps `pages` consecutive virtual pages onto consecutive physical pages
    /// starting at `first_ppn`, all under one keyID.
    pub fn map_alias_range(
        &mut self,
        vaddr: u64,
        first_ppn: u64,
        pages: u64,
        keyid: KeyId,
        perms: Perms,
    ) -> Result<(), MemError> {
        if pages == 0 {
            return Ok(());
        }
        self.check_mapping(vaddr, first_ppn, keyid, perms)?;
        if first_ppn + pages > self.phys_pages() {
            return Err(MemError::PpnOutOfRange(first_ppn + pages - 1));
        }
        let last = vaddr + (pages - 1) * self.layout.page_size();
        if !self.layout.is_canonical(last) {
            return Err(MemError::PageFault(last));
        }
        let start = self.vpn(vaddr);
        let overlaps = self.table.in_range(start)
            || self.table.ranges.range(start..start + pages).next().is_some();
        if overlaps {
            return Err(MemError::Layout(format!("alias range at {vaddr:#x} overlaps an existing range")));
        }
        self.table.ranges.insert(start, AliasRange { pages, first_ppn, keyid, perms });
        Ok(())
    }

    /// Drops the alias range starting at `vaddr` together with every
    /// single-page entry inside it.
    pub fn unmap_alias_range(&mut self, vaddr: u64) -> bool {
        let start = self.vpn(vaddr);
        match self.table.ranges.remove(&start) {
            Some(r) => {
                let inside: Vec<u64> = self.table.entries.range(start..start + r.pages).map(|(k, _)| *k).collect();
                for vpn in inside {
                    self.table.entries.remove(&vpn);
                }
                true
            }
            None => false,
        }
    }

    pub fn unmap_page(&mut self, vaddr_page: u64) -> Result<(), MemError> {
        let vpn = self.vpn(vaddr_page);
        if self.table.lookup(vpn).is_none() {
            return Err(MemError::PageFault(vaddr_page));
        }
        if self.table.in_range(vpn) {
            let hole = PageTableEntry { ppn: 0, keyid: KeyId::DEFAULT, perms: Perms::default(), valid: false };
            self.table.entries.insert(vpn, hole);
        } else {
            self.table.entries.remove(&vpn);
        }
        Ok(())
    }

    /// Replaces the keyID of a mapped page. Line contents are untouched, so
    /// lines initialized under the old key fail their MAC when read through
    /// the new one.
    pub fn set_keyid(&mut self, vaddr_page: u64, keyid: KeyId) -> Result<(), MemError> {
        if keyid.0 as usize >= self.engine.key_table().len() {
            return Err(MemError::KeyIdOutOfRange(keyid.0));
        }
        let vpn = self.vpn(vaddr_page);
        let mut pte = self.table.lookup(vpn).ok_or(MemError::PageFault(vaddr_page))?;
        pte.keyid = keyid;
        self.table.entries.insert(vpn, pte);
        Ok(())
    }

    pub fn pte(&self, vaddr: u64) -> Option<PageTableEntry> {
        if !self.layout.is_canonical(vaddr) {
            return None;
        }
        self.table.lookup(self.vpn(vaddr))
    }

    pub fn translate(&self, vaddr: u64, access: Access) -> Result<Translation, MemError> {
        let pte = self.pte(vaddr).ok_or(MemError::PageFault(vaddr))?;
        if !pte.perms.allows(access) {
            return Err(MemError::ProtectionFault { vaddr, access });
        }
        let in_page = vaddr & (self.layout.page_size() - 1);
        let paddr = (pte.ppn << self.layout.page_bits) | in_page;
        let line_mask = LINE_SIZE as u64 - 1;
        Ok(Translation { paddr_line: paddr & !line_mask, offset: (paddr & line_mask) as usize, keyid: pte.keyid })
    }

    /// Translates every line touched by `[vaddr, vaddr + len)` before any
    /// line is accessed, so faults leave memory untouched.
    fn spans(&self, vaddr: u64, len: usize, access: Access) -> Result<Vec<LineSpan>, MemError> {
        let mut spans = Vec::with_capacity(len / LINE_SIZE + 2);
        let mut cursor = vaddr;
        let mut remaining = len;
        while remaining > 0 {
            let translation = self.translate(cursor, access)?;
            let take = remaining.min(LINE_SIZE - translation.offset);
            if let Some(first) = spans.first() {
                let first: &LineSpan = first;
                if first.translation.keyid != translation.keyid {
                    return Err(MemError::MixedKeyAccess(vaddr));
                }
            }
            spans.push(LineSpan { translation, len: take });
            remaining -= take;
            cursor = cursor.checked_add(take as u64).ok_or(MemError::PageFault(u64::MAX))?;
        }
        Ok(spans)
    }

    pub fn read(&mut self, vaddr: u64, len: usize) -> Result<Vec<u8>, MemError> {
        let spans = self.spans(vaddr, len, Access::Read)?;
        let mut out = Vec::with_capacity(len);
        for span in spans {
            let t = span.translation;
            let line = self.engine.line_read(t.paddr_line, t.keyid)?;
            out.extend_from_slice(&line[t.offset..t.offset + span.len]);
        }
        Ok(out)
    }

    /// Writes covering a whole line use the initializing full-line path;
    /// everything else is a read-modify-write of an initialized line.
    pub fn write(&mut self, vaddr: u64, bytes: &[u8]) -> Result<(), MemError> {
        let spans = self.spans(vaddr, bytes.len(), Access::Write)?;
        for span in &spans {
            let t = span.translation;
            if span.len < LINE_SIZE && !self.engine.is_initialized(t.paddr_line) {
                return Err(EngineError::UninitializedLine(t.paddr_line).into());
            }
        }
        let mut consumed = 0;
        for span in spans {
            let t = span.translation;
            let chunk = &bytes[consumed..consumed + span.len];
            if span.len == LINE_SIZE {
                let full: &[u8; LINE_SIZE] = chunk.try_into().expect("full line span");
                self.engine.line_write_full(t.paddr_line, t.keyid, full)?;
            } else {
                self.engine.line_write_partial(t.paddr_line, t.keyid, t.offset, chunk)?;
            }
            consumed += span.len;
        }
        Ok(())
    }

    pub fn read_u64(&mut self, vaddr: u64) -> Result<u64, MemError> {
        let bytes = self.read(vaddr, 8)?;
        Ok(u64::from_le_bytes(bytes.try_into().expect("8 bytes")))
    }

    pub fn write_u64(&mut self, vaddr: u64, value: u64) -> Result<(), MemError> {
        self.write(vaddr, &value.to_le_bytes())
    }
}
