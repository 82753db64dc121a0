// SPDX-License-Identifier: Apache-2.0
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tmebox_core::crypto::{EngineConfig, KeyId, LINE_SIZE, PAGE_SIZE};
use tmebox_core::isa::Program;
use tmebox_core::runtime::{Runtime, RuntimeConfig, SandboxId, Termination};

pub fn repo_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn scenario_dir() -> PathBuf {
    repo_dir().join("scenarios")
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RevocationTally {
    pub sequences: u64,
    pub operations: u64,
    pub stale_reads: u64,
    pub rekeyed_reads: u64,
    pub recycled_keys: u64,
    /// Successful reads returning a line another incarnation wrote.
    pub leaks: u64,
    /// Own reads that did not return the owner's data.
    pub own_mismatches: u64,
    pub invariant_failures: u64,
}

impl RevocationTally {
    pub fn merge(&mut self, o: &RevocationTally) {
        self.sequences += o.sequences;
        self.operations += o.operations;
        self.stale_reads += o.stale_reads;
        self.rekeyed_reads += o.rekeyed_reads;
        self.recycled_keys += o.recycled_keys;
        self.leaks += o.leaks;
        self.own_mismatches += o.own_mismatches;
        self.invariant_failures += o.invariant_failures;
    }
}

struct Live {
    id: SandboxId,
    incarnation: u32,
    chunks: Vec<(u64, Vec<[u8; LINE_SIZE]>)>,
}

/// One randomized sequence of create/terminate, alloc, free, keyID change
/// and read operations, checked against a shadow of who wrote what.
pub fn revocation_sequence(seed: u64, ops: usize) -> RevocationTally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let engine = EngineConfig { keyid_bits: 2, mac_bits: 28, rng_seed: seed, phys_pages: 96 };
    let mut rt = Runtime::new(RuntimeConfig { engine, stack_pages: 1, ..RuntimeConfig::default() }).unwrap();
    let halt = Program::parse("halt").unwrap();
    let mask = rt.mem().layout().truncation_mask();
    let mut t = RevocationTally { sequences: 1, ..Default::default() };

    let mut live: Vec<Live> = Vec::new();
    let mut next_incarnation = 0u32;
    let mut seen_keys: HashSet<KeyId> = HashSet::new();
    // Every line ever written, by window offset, with its writer.
    let mut written: HashMap<[u8; LINE_SIZE], u32> = HashMap::new();
    let mut offsets: Vec<u64> = Vec::new();

    let check_read = |bytes: &[u8], reader: u32, written: &HashMap<[u8; LINE_SIZE], u32>| -> bool {
        let line: [u8; LINE_SIZE] = bytes.try_into().expect("line read");
        matches!(written.get(&line), Some(&w) if w != reader)
    };

    for _ in 0..ops {
        t.operations += 1;
        match rng.gen_range(0..100) {
            0..=14 => {
                if live.len() < 3 {
                    let id = rt.create("s", &halt, None).unwrap();
                    if !seen_keys.insert(rt.sandbox(id).unwrap().keyid) {
                        t.recycled_keys += 1;
                    }
                    live.push(Live { id, incarnation: next_incarnation, chunks: Vec::new() });
                    next_incarnation += 1;
                } else {
                    let i = rng.gen_range(0..live.len());
                    let gone = live.swap_remove(i);
                    rt.terminate(gone.id, Termination::Exit { code: 0 });
                }
            }
            15..=39 if !live.is_empty() => {
                let s = live.choose_mut(&mut rng).unwrap();
                let lines = if rng.gen_range(0..5) == 0 { rng.gen_range(65..100) } else { rng.gen_range(1..24) };
                let Ok(vaddr) = rt.alloc(s.id, lines * LINE_SIZE as u64) else { continue };
                let mut data = Vec::new();
                for l in 0..lines {
                    let mut line = [0u8; LINE_SIZE];
                    rng.fill_bytes(&mut line);
                    let at = vaddr + l * LINE_SIZE as u64;
                    rt.write_as(s.id, at, &line).unwrap().unwrap();
                    written.insert(line, s.incarnation);
                    offsets.push(at & mask);
                    data.push(line);
                }
                s.chunks.push((vaddr, data));
            }
            40..=54 if !live.is_empty() => {
                let s = live.choose_mut(&mut rng).unwrap();
                if !s.chunks.is_empty() {
                    let (vaddr, _) = s.chunks.swap_remove(rng.gen_range(0..s.chunks.len()));
                    rt.free(s.id, vaddr).unwrap();
                }
            }
            55..=64 if !live.is_empty() => {
                // Move a page of the chunk to another keyID, read, move back.
                let s = live.choose(&mut rng).unwrap();
                if let Some((vaddr, data)) = s.chunks.choose(&mut rng) {
                    let page = vaddr & !(PAGE_SIZE - 1);
                    let own = rt.mem().pte(page).unwrap().keyid;
                    let other = KeyId(rng.gen_range(0..4));
                    if other == own {
                        continue;
                    }
                    rt.mem_mut().set_keyid(page, other).unwrap();
                    t.rekeyed_reads += 1;
                    if let Ok(bytes) = rt.mem_mut().read(*vaddr, LINE_SIZE) {
                        if bytes == data[0] {
                            t.leaks += 1;
                        }
                    }
                    rt.mem_mut().set_keyid(page, own).unwrap();
                }
            }
            65..=79 if !live.is_empty() => {
                let s = live.choose(&mut rng).unwrap();
                if let Some((vaddr, data)) = s.chunks.choose(&mut rng) {
                    let l = rng.gen_range(0..data.len());
                    let got = rt.mem_mut().read(vaddr + (l * LINE_SIZE) as u64, LINE_SIZE).map(|b| b == data[l]);
                    if got != Ok(true) {
                        t.own_mismatches += 1;
                    }
                }
            }
            80..=99 if !live.is_empty() && !offsets.is_empty() => {
                // Any sandbox reads whatever some earlier line left behind.
                let s = live.choose(&mut rng).unwrap();
                let base = rt.sandbox(s.id).unwrap().base;
                let at = base | *offsets.choose(&mut rng).unwrap();
                t.stale_reads += 1;
                if let Ok(bytes) = rt.mem_mut().read(at, LINE_SIZE) {
                    if check_read(&bytes, s.incarnation, &written) {
                        t.leaks += 1;
                    }
                }
            }
            _ => {}
        }
        if rt.check_invariants().is_err() {
            t.invariant_failures += 1;
        }
    }
    t
}
