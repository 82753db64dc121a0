// SPDX-License-Identifier: Apache-2.0

//! Physical page pool and cache-line occupancy.
//!
//! Pure bookkeeping: the runtime performs every engine write and mapping.
//! A line has at most one occupant. Heap pages stay eligible for sub-page
//! co-location until every line is taken.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::crypto::{KeyId, LINES_PER_PAGE, LINE_SIZE, PAGE_SIZE};

pub const LINES: usize = LINES_PER_PAGE as usize;

/// Contiguous lines of one physical page, seen through one virtual page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Extent {
    pub ppn: u64,
    pub vpage: u64,
    pub first_line: usize,
    pub count: usize,
}

impl Extent {
    pub fn line_paddr(&self, i: usize) -> u64 {
        self.ppn * PAGE_SIZE + ((self.first_line + i) * LINE_SIZE) as u64
    }

    pub fn lines(&self) -> std::ops::Range<usize> {
        self.first_line..self.first_line + self.count
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Chunk {
    pub owner: KeyId,
    pub vaddr: u64,
    pub lines: usize,
    pub extents: Vec<Extent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Use {
    Heap,
    /// Stack or static memory; never shared.
    Private,
}

#[derive(Debug, Clone)]
struct PageOcc {
    lines: [Option<KeyId>; LINES],
    used: usize,
    kind: Use,
}

#[derive(Debug, Clone)]
pub struct Heap {
    free_pages: BTreeSet<u64>,
    pages: HashMap<u64, PageOcc>,
    /// Heap pages in use with at least one free line.
    partial: BTreeSet<u64>,
    chunks: BTreeMap<(KeyId, u64), Chunk>,
}

impl Heap {
    pub fn new(phys_pages: u64) -> Self {
        Heap {
            free_pages: (0..phys_pages).collect(),
            pages: HashMap::new(),
            partial: BTreeSet::new(),
            chunks: BTreeMap::new(),
        }
    }

    pub fn free_page_count(&self) -> usize {
        self.free_pages.len()
    }

    pub fn pages_in_use(&self) -> usize {
        self.pages.len()
    }

    pub fn is_free_page(&self, ppn: u64) -> bool {
        self.free_pages.contains(&ppn)
    }

    /// Lowest free page, now in use with no occupied lines.
    pub fn take_page(&mut self, kind: Use) -> Option<u64> {
        let ppn = self.free_pages.pop_first()?;
        self.pages.insert(ppn, PageOcc { lines: [None; LINES], used: 0, kind });
        Some(ppn)
    }

    /// Takes a specific free page out of the pool.
    pub fn take_specific(&mut self, ppn: u64, kind: Use) -> bool {
        if !self.free_pages.remove(&ppn) {
            return false;
        }
        self.pages.insert(ppn, PageOcc { lines: [None; LINES], used: 0, kind });
        true
    }

    /// First fit over partially occupied heap pages, lowest page and lowest
    /// line first.
    pub fn find_run(&self, n: usize) -> Option<(u64, usize)> {
        self.partial.iter().find_map(|&ppn| {
            let occ = &self.pages[&ppn];
            let mut run = 0;
            for (i, l) in occ.lines.iter().enumerate() {
                run = if l.is_none() { run + 1 } else { 0 };
                if run == n {
                    return Some((ppn, i + 1 - n));
                }
            }
            None
        })
    }

    pub fn occupant(&self, ppn: u64, line: usize) -> Option<KeyId> {
        self.pages.get(&ppn).and_then(|p| p.lines[line])
    }

    pub fn lines_free(&self, ppn: u64, lines: std::ops::Range<usize>) -> bool {
        match self.pages.get(&ppn) {
            Some(p) => p.kind == Use::Heap && lines.into_iter().all(|l| p.lines[l].is_none()),
            None => false,
        }
    }

    pub fn occupy(&mut self, ppn: u64, lines: std::ops::Range<usize>, owner: KeyId) {
        let occ = self.pages.get_mut(&ppn).expect("page in use");
        for l in lines {
            assert!(occ.lines[l].is_none(), "line {ppn}:{l} already occupied");
            occ.lines[l] = Some(owner);
            occ.used += 1;
        }
        if occ.kind == Use::Heap && occ.used < LINES {
            self.partial.insert(ppn);
        } else {
            self.partial.remove(&ppn);
        }
    }

    /// Marks lines free. Returns true when the page became empty and went
    /// back to the pool.
    pub fn release(&mut self, ppn: u64, lines: std::ops::Range<usize>) -> bool {
        let occ = self.pages.get_mut(&ppn).expect("page in use");
        for l in lines {
            if occ.lines[l].take().is_some() {
                occ.used -= 1;
            }
        }
        if occ.used == 0 {
            self.pages.remove(&ppn);
            self.partial.remove(&ppn);
            self.free_pages.insert(ppn);
            true
        } else {
            if occ.kind == Use::Heap {
                self.partial.insert(ppn);
            }
            false
        }
    }

    pub fn insert_chunk(&mut self, chunk: Chunk) {
        self.chunks.insert((chunk.owner, chunk.vaddr), chunk);
    }

    pub fn chunk(&self, owner: KeyId, vaddr: u64) -> Option<&Chunk> {
        self.chunks.get(&(owner, vaddr))
    }

    pub fn chunk_mut(&mut self, owner: KeyId, vaddr: u64) -> Option<&mut Chunk> {
        self.chunks.get_mut(&(owner, vaddr))
    }

    pub fn remove_chunk(&mut self, owner: KeyId, vaddr: u64) -> Option<Chunk> {
        self.chunks.remove(&(owner, vaddr))
    }

    pub fn chunks_of(&self, owner: KeyId) -> impl Iterator<Item = &Chunk> {
        self.chunks.range((owner, 0)..=(owner, u64::MAX)).map(|(_, c)| c)
    }

    pub fn chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.chunks.values()
    }

    /// Occupied lines of every page in use, as `(paddr_line, occupant)`.
    pub fn occupied_lines(&self) -> Vec<(u64, KeyId)> {
        let mut v: Vec<_> = self
            .pages
            .iter()
            .flat_map(|(&ppn, occ)| {
                occ.lines
                    .iter()
                    .enumerate()
                    .filter_map(move |(l, o)| o.map(|k| (ppn * PAGE_SIZE + (l * LINE_SIZE) as u64, k)))
            })
            .collect();
        v.sort_unstable();
        v
    }

    pub fn page_kind(&self, ppn: u64) -> Option<Use> {
        self.pages.get(&ppn).map(|p| p.kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_fit_prefers_partial_pages() {
        let mut h = Heap::new(4);
        let p = h.take_page(Use::Heap).unwrap();
        h.occupy(p, 0..2, KeyId(1));
        assert_eq!(h.find_run(2), Some((p, 2)));
        h.occupy(p, 2..4, KeyId(2));
        h.release(p, 0..2);
        assert_eq!(h.find_run(2), Some((p, 0)));
        assert_eq!(h.find_run(3), Some((p, 4)));
        assert_eq!(h.find_run(61), None);
    }

    #[test]
    fn private_pages_never_shared() {
        let mut h = Heap::new(2);
        let p = h.take_page(Use::Private).unwrap();
        h.occupy(p, 0..1, KeyId(1));
        assert_eq!(h.find_run(1), None);
        assert!(!h.lines_free(p, 2..3));
    }

    #[test]
    fn empty_page_returns_to_pool() {
        let mut h = Heap::new(2);
        let p = h.take_page(Use::Heap).unwrap();
        h.occupy(p, 5..9, KeyId(3));
        assert_eq!(h.free_page_count(), 1);
        assert!(!h.release(p, 5..7));
        assert!(h.release(p, 7..9));
        assert_eq!(h.free_page_count(), 2);
        assert_eq!(h.take_page(Use::Heap), Some(p));
    }

    #[test]
    #[should_panic(expected = "already occupied")]
    fn double_occupy_panics() {
        let mut h = Heap::new(1);
        let p = h.take_page(Use::Heap).unwrap();
        h.occupy(p, 0..2, KeyId(1));
        h.occupy(p, 1..3, KeyId(2));
    }
}
