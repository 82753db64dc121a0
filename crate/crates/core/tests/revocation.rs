// SPDX-License-Identifier: Apache-2.0

mod common;

use tmebox_core::crypto::{KeyId, LINE_SIZE};
use tmebox_core::isa::Program;
use tmebox_core::runtime::{Runtime, RuntimeConfig, Termination};

#[test]
fn recycled_keyid_cannot_read_predecessor_lines() {
    let mut rt = Runtime::new(RuntimeConfig::default()).unwrap();
    let halt = Program::parse("halt").unwrap();
    let a = rt.create("a", &halt, None).unwrap();
    let x = rt.alloc(a, 256).unwrap();
    rt.write_as(a, x, &[0x5A; 256]).unwrap().unwrap();
    rt.terminate(a, Termination::Exit { code: 0 });

    let b = rt.create("b", &halt, None).unwrap();
    assert_eq!(rt.sandbox(b).unwrap().keyid, KeyId(1));
    assert_eq!(rt.sandbox(b).unwrap().base, rt.sandbox(a).unwrap().base);
    // Same keyID, same window, same virtual address: the line was scrubbed
    // and the key reprogrammed, so nothing verifies.
    assert!(rt.mem_mut().read(x, LINE_SIZE).is_err());
    let stats = rt.stats();
    assert_eq!(stats.keys_reprogrammed, 1);
    assert!(stats.lines_scrubbed >= 4);
    rt.check_invariants().unwrap();
}

#[test]
fn free_then_realloc_hands_out_zeroed_lines() {
    let mut rt = Runtime::new(RuntimeConfig::default()).unwrap();
    let halt = Program::parse("halt").unwrap();
    let a = rt.create("a", &halt, None).unwrap();
    let b = rt.create("b", &halt, None).unwrap();
    let x = rt.alloc(a, 128).unwrap();
    rt.write_as(a, x, &[0x77; 128]).unwrap().unwrap();
    rt.free(a, x).unwrap();
    let y = rt.alloc(b, 128).unwrap();
    assert_eq!(rt.chunk(b, y).unwrap().extents[0].ppn, {
        let pa = rt.mem().translate(x, tmebox_core::memory::Access::Read).unwrap().paddr_line;
        pa / 4096
    });
    assert_eq!(rt.read_as(b, y, 128).unwrap().unwrap(), vec![0; 128]);
    // a's stale pointer now fails verification.
    assert!(rt.mem_mut().read(x, 64).is_err());
}

#[test]
fn randomized_sequences_never_leak() {
    let mut total = common::RevocationTally::default();
    for seed in 0..200 {
        total.merge(&common::revocation_sequence(seed, 40));
    }
    assert_eq!((total.leaks, total.own_mismatches, total.invariant_failures), (0, 0, 0), "{total:?}");
    assert!(total.stale_reads > 500 && total.rekeyed_reads > 100 && total.recycled_keys > 50, "{total:?}");
}
