// SPDX-License-Identifier: Apache-2.0

//! Multi-key memory encryption engine.
//!
//! Every 64-byte physical line is stored as ciphertext plus a truncated MAC.
//! The key used for an access is selected by its keyID through the
//! [`KeyTable`]. A read recomputes the MAC under the requesting key; a
//! mismatch raises [`EngineError::IntegrityViolation`].
//!
//! Primitives (stable across platforms, little-endian throughout):
//!
//! * Encryption is XTS-AES-128 over the four 16-byte blocks of a line. The
//!   32 bytes of key material split into the data key (bytes 0..16) and the
//!   tweak key (bytes 16..32). The data-unit number is the line's physical
//!   address; block `j` of the line uses tweak `E_tweak(paddr) * alpha^j`
//!   in GF(2^128).
//! * The MAC is `SHA3-256("tmebox-line-mac\0" || key material || paddr ||
//!   ciphertext)`, read as a little-endian `u32` from the first four digest
//!   bytes and truncated to `mac_bits`.

use std::collections::HashMap;

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockDecrypt, BlockEncrypt, KeyInit};
use aes::Aes128;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha3::{Digest, Sha3_256};
use thiserror::Error;

/// Size in bytes of one cache line, the engine's unit of encryption.
pub const LINE_SIZE: usize = 64;
/// Bytes per page in the physical address space.
pub const PAGE_SIZE: u64 = 4096;
/// Lines per physical page.
pub const LINES_PER_PAGE: u64 = PAGE_SIZE / LINE_SIZE as u64;

const MAC_DOMAIN: &[u8] = b"tmebox-line-mac\0";

/// Key identifier selecting an entry of the key table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
#[serde(transparent)]
pub struct KeyId(pub u16);

impl KeyId {
    /// Platform default key, never assigned to a sandbox.
    pub const DEFAULT: KeyId = KeyId(0);
}

impl std::fmt::Display for KeyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error("physical address {0:#x} is not 64-byte aligned")]
    Alignment(u64),
    #[error("physical address {0:#x} is outside physical memory")]
    PhysRange(u64),
    #[error("keyID {0} is outside the key table")]
    InvalidKeyId(u16),
    #[error("line {0:#x} has never been initialized")]
    UninitializedLine(u64),
    #[error("integrity violation on line {paddr:#x} for keyID {keyid}")]
    IntegrityViolation { paddr: u64, keyid: KeyId },
    #[error("partial write of {len} bytes at offset {offset} does not fit in a line")]
    LineRange { offset: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineConfig {
    /// Width of keyIDs, 1..=15.
    pub keyid_bits: u8,
    /// MAC width, 4..=28. Values below 28 exist to make collision statistics
    /// observable.
    pub mac_bits: u8,
    pub rng_seed: u64,
    /// Number of 4 KiB physical pages backing the engine.
    pub phys_pages: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            keyid_bits: 6,
            mac_bits: 28,
            rng_seed: 0,
            phys_pages: 1 << 16,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(1..=15).contains(&self.keyid_bits) {
            return Err(EngineError::Config(format!(
                "keyid_bits must be in [1, 15], got {}",
                self.keyid_bits
            )));
        }
        if !(4..=28).contains(&self.mac_bits) {
            return Err(EngineError::Config(format!(
                "mac_bits must be in [4, 28], got {}",
                self.mac_bits
            )));
        }
        // Keep physical addresses well below the bits a PTE would repurpose.
        if self.phys_pages == 0 || self.phys_pages > 1 << 32 {
            return Err(EngineError::Config(format!(
                "phys_pages must be in [1, 2^32], got {}",
                self.phys_pages
            )));
        }
        Ok(())
    }

    pub fn key_count(&self) -> usize {
        1usize << self.keyid_bits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyMode {
    EncryptWithIntegrity,
}

#[derive(Clone)]
pub struct KeyEntry {
    pub material: [u8; 32],
    pub mode: KeyMode,
    /// Number of times the entry was reprogrammed.
    pub generation: u64,
}

impl std::fmt::Debug for KeyEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyEntry").field("mode", &self.mode).field("generation", &self.generation).finish_non_exhaustive()
    }
}

/// Dense table indexed by keyID. Entry 0 is the platform default key.
#[derive(Debug, Clone)]
pub struct KeyTable {
    entries: Vec<KeyEntry>,
}

impl KeyTable {
    /// Derives independent key material for every keyID from one seed.
    pub fn generate(keyid_bits: u8, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let entries = (0..1usize << keyid_bits)
            .map(|_| {
                let mut material = [0u8; 32];
                rng.fill_bytes(&mut material);
                KeyEntry { material, mode: KeyMode::EncryptWithIntegrity, generation: 0 }
            })
            .collect();
        KeyTable { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, keyid: KeyId) -> Option<&KeyEntry> {
        self.entries.get(keyid.0 as usize)
    }

    /// Fresh material for `keyid`, drawn from a stream disjoint from the
    /// initial table and from every other `(keyid, generation)`.
    fn reprogram(&mut self, keyid: KeyId, seed: u64) {
        let entry = &mut self.entries[keyid.0 as usize];
        entry.generation += 1;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream((entry.generation << 16) | keyid.0 as u64);
        rng.fill_bytes(&mut entry.material);
    }
}

/// Hardware-visible state of one physical line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheLineCell {
    pub ciphertext: [u8; LINE_SIZE],
    pub mac: u32,
    pub initialized: bool,
}

/// Simulator-only bookkeeping of who touched a line. Hardware keeps no such
/// record; the runtime uses it for attribution and tests use it as the
/// ownership oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    /// keyID of the most recent full-line write.
    pub owner: KeyId,
    /// keyID of the most recent write of any kind.
    pub last_writer: KeyId,
}

#[derive(Debug, Clone)]
struct LineSlot {
    cell: CacheLineCell,
    provenance: Provenance,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct EngineStats {
    pub full_writes: u64,
    pub partial_writes: u64,
    pub reads: u64,
    pub violations: u64,
}

/// XTS key pair for one keyID.
struct LineCipher {
    data: Aes128,
    tweak: Aes128,
}

impl LineCipher {
    fn new(material: &[u8; 32]) -> Self {
        LineCipher {
            data: Aes128::new(GenericArray::from_slice(&material[..16])),
            tweak: Aes128::new(GenericArray::from_slice(&material[16..])),
        }
    }

    fn initial_tweak(&self, paddr: u64) -> [u8; 16] {
        let mut t = GenericArray::clone_from_slice(&(paddr as u128).to_le_bytes());
        self.tweak.encrypt_block(&mut t);
        t.into()
    }

    fn encrypt(&self, paddr: u64, plaintext: &[u8; LINE_SIZE]) -> [u8; LINE_SIZE] {
        let mut tweak = self.initial_tweak(paddr);
        let mut out = [0u8; LINE_SIZE];
        for (src, dst) in plaintext.chunks_exact(16).zip(out.chunks_exact_mut(16)) {
            let mut block = GenericArray::clone_from_slice(src);
            xor_in(&mut block, &tweak);
            self.data.encrypt_block(&mut block);
            xor_in(&mut block, &tweak);
            dst.copy_from_slice(&block);
            gf128_mul_alpha(&mut tweak);
        }
        out
    }

    fn decrypt(&self, paddr: u64, ciphertext: &[u8; LINE_SIZE]) -> [u8; LINE_SIZE] {
        let mut tweak = self.initial_tweak(paddr);
        let mut out = [0u8; LINE_SIZE];
        for (src, dst) in ciphertext.chunks_exact(16).zip(out.chunks_exact_mut(16)) {
            let mut block = GenericArray::clone_from_slice(src);
            xor_in(&mut block, &tweak);
            self.data.decrypt_block(&mut block);
            xor_in(&mut block, &tweak);
            dst.copy_from_slice(&block);
            gf128_mul_alpha(&mut tweak);
        }
        out
    }
}

fn xor_in(block: &mut [u8], tweak: &[u8; 16]) {
    for (b, t) in block.iter_mut().zip(tweak) {
        *b ^= t;
    }
}

/// Multiply by the primitive element of GF(2^128), XTS byte order.
fn gf128_mul_alpha(t: &mut [u8; 16]) {
    let carry = t[15] >> 7;
    for i in (1..16).rev() {
        t[i] = (t[i] << 1) | (t[i - 1] >> 7);
    }
    t[0] <<= 1;
    if carry != 0 {
        t[0] ^= 0x87;
    }
}

/// Truncated line MAC. Public so tests and tools can recompute it.
pub fn line_mac(material: &[u8; 32], paddr: u64, ciphertext: &[u8; LINE_SIZE], mac_bits: u8) -> u32 {
    let mut h = Sha3_256::new();
    h.update(MAC_DOMAIN);
    h.update(material);
    h.update(paddr.to_le_bytes());
    h.update(ciphertext);
    let digest = h.finalize();
    let word = u32::from_le_bytes([digest[0], digest[1], digest[2], digest[3]]);
    word & mac_mask(mac_bits)
}

fn mac_mask(bits: u8) -> u32 {
    if bits >= 32 {
        u32::MAX
    } else {
        (1u32 << bits) - 1
    }
}

/// Single-threaded engine instance. Lines are stored sparsely; a line that
/// was never written is uninitialized.
pub struct Engine {
    config: EngineConfig,
    keys: KeyTable,
    ciphers: Vec<Option<Box<LineCipher>>>,
    lines: HashMap<u64, LineSlot>,
    stats: EngineStats,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.config)
            .field("initialized_lines", &self.lines.len())
            .field("stats", &self.stats)
            .finish()
    }
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let keys = KeyTable::generate(config.keyid_bits, config.rng_seed);
        let mut ciphers = Vec::new();
        ciphers.resize_with(keys.len(), || None);
        Ok(Engine { config, keys, ciphers, lines: HashMap::new(), stats: EngineStats::default() })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn key_table(&self) -> &KeyTable {
        &self.keys
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    pub fn phys_bytes(&self) -> u64 {
        self.config.phys_pages * PAGE_SIZE
    }

    pub fn cell(&self, paddr_line: u64) -> Option<&CacheLineCell> {
        self.lines.get(&paddr_line).map(|s| &s.cell)
    }

    pub fn provenance(&self, paddr_line: u64) -> Option<Provenance> {
        self.lines.get(&paddr_line).map(|s| s.provenance)
    }

    pub fn is_initialized(&self, paddr_line: u64) -> bool {
        self.lines.contains_key(&paddr_line)
    }

    /// Number of initialized lines.
    pub fn initialized_lines(&self) -> usize {
        self.lines.len()
    }

    /// All initialized line addresses in ascending order.
    pub fn line_addresses(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.lines.keys().copied().collect();
        v.sort_unstable();
        v
    }

    fn check_addr(&self, paddr_line: u64) -> Result<(), EngineError> {
        if !paddr_line.is_multiple_of(LINE_SIZE as u64) {
            return Err(EngineError::Alignment(paddr_line));
        }
        if paddr_line >= self.phys_bytes() {
            return Err(EngineError::PhysRange(paddr_line));
        }
        Ok(())
    }

    fn check_key(&self, keyid: KeyId) -> Result<(), EngineError> {
        if (keyid.0 as usize) < self.keys.len() {
            Ok(())
        } else {
            Err(EngineError::InvalidKeyId(keyid.0))
        }
    }

    fn cipher(&mut self, keyid: KeyId) -> &LineCipher {
        let idx = keyid.0 as usize;
        let material = &self.keys.entries[idx].material;
        self.ciphers[idx].get_or_insert_with(|| Box::new(LineCipher::new(material)))
    }

    fn material(&self, keyid: KeyId) -> &[u8; 32] {
        &self.keys.entries[keyid.0 as usize].material
    }

    /// Initializes (or re-initializes) a line under `keyid`. No ownership
    /// check: a full-line write always claims the line.
    pub fn line_write_full(
        &mut self,
        paddr_line: u64,
        keyid: KeyId,
        plaintext: &[u8; LINE_SIZE],
    ) -> Result<(), EngineError> {
        self.check_addr(paddr_line)?;
        self.check_key(keyid)?;
        let ciphertext = self.cipher(keyid).encrypt(paddr_line, plaintext);
        let mac = line_mac(self.material(keyid), paddr_line, &ciphertext, self.config.mac_bits);
        self.lines.insert(
            paddr_line,
            LineSlot {
                cell: CacheLineCell { ciphertext, mac, initialized: true },
                provenance: Provenance { owner: keyid, last_writer: keyid },
            },
        );
        self.stats.full_writes += 1;
        Ok(())
    }

    /// Replaces the key material behind `keyid`. Lines written under the
    /// previous material no longer verify.
    pub fn program_key(&mut self, keyid: KeyId) -> Result<(), EngineError> {
        self.check_key(keyid)?;
        self.keys.reprogram(keyid, self.config.rng_seed);
        self.ciphers[keyid.0 as usize] = None;
        Ok(())
    }

    pub fn line_read(&mut self, paddr_line: u64, keyid: KeyId) -> Result<[u8; LINE_SIZE], EngineError> {
        self.check_addr(paddr_line)?;
        self.check_key(keyid)?;
        self.stats.reads += 1;
        let Some(slot) = self.lines.get(&paddr_line) else {
            return Err(EngineError::UninitializedLine(paddr_line));
        };
        let ciphertext = slot.cell.ciphertext;
        let stored = slot.cell.mac;
        let mac = line_mac(self.material(keyid), paddr_line, &ciphertext, self.config.mac_bits);
        if mac != stored {
            self.stats.violations += 1;
            return Err(EngineError::IntegrityViolation { paddr: paddr_line, keyid });
        }
        Ok(self.cipher(keyid).decrypt(paddr_line, &ciphertext))
    }

    /// Read-modify-write of part of a line under `keyid`. The stored
    /// ciphertext is decrypted with the writer's key without a MAC check, so
    /// a non-owner splices into garbage and leaves a MAC the owner rejects.
    pub fn line_write_partial(
        &mut self,
        paddr_line: u64,
        keyid: KeyId,
        offset: usize,
        bytes: &[u8],
    ) -> Result<(), EngineError> {
        self.check_addr(paddr_line)?;
        self.check_key(keyid)?;
        if bytes.is_empty() || offset >= LINE_SIZE || offset + bytes.len() > LINE_SIZE {
            return Err(EngineError::LineRange { offset, len: bytes.len() });
        }
        let Some(slot) = self.lines.get(&paddr_line) else {
            return Err(EngineError::UninitializedLine(paddr_line));
        };
        let ciphertext = slot.cell.ciphertext;
        let owner = slot.provenance.owner;
        let mut scratch = self.cipher(keyid).decrypt(paddr_line, &ciphertext);
        scratch[offset..offset + bytes.len()].copy_from_slice(bytes);
        let ciphertext = self.cipher(keyid).encrypt(paddr_line, &scratch);
        let mac = line_mac(self.material(keyid), paddr_line, &ciphertext, self.config.mac_bits);
        self.lines.insert(
            paddr_line,
            LineSlot {
                cell: CacheLineCell { ciphertext, mac, initialized: true },
                provenance: Provenance { owner, last_writer: keyid },
            },
        );
        self.stats.partial_writes += 1;
        Ok(())
    }

    /// Decrypts stored ciphertext under an arbitrary key without touching the
    /// MAC. Models what a colliding wrong-key access would observe.
    pub fn decrypt_unchecked(&mut self, paddr_line: u64, keyid: KeyId) -> Result<[u8; LINE_SIZE], EngineError> {
        self.check_addr(paddr_line)?;
        self.check_key(keyid)?;
        let ciphertext = self
            .lines
            .get(&paddr_line)
            .map(|s| s.cell.ciphertext)
            .ok_or(EngineError::UninitializedLine(paddr_line))?;
        Ok(self.cipher(keyid).decrypt(paddr_line, &ciphertext))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine(bits: u8, mac_bits: u8) -> Engine {
        Engine::new(EngineConfig { keyid_bits: bits, mac_bits, rng_seed: 7, phys_pages: 64 }).unwrap()
    }

    #[test]
    fn key_table_sizes() {
        let e = engine(6, 28);
        assert_eq!(e.key_table().len(), 64);
        let e = engine(15, 28);
        assert_eq!(e.key_table().len(), 32768);
        assert!(e.key_table().get(KeyId::DEFAULT).is_some());
    }

    #[test]
    fn config_bounds() {
        for (bits, mac) in [(0, 28), (16, 28), (6, 3), (6, 29)] {
            let cfg = EngineConfig { keyid_bits: bits, mac_bits: mac, ..Default::default() };
            assert!(matches!(Engine::new(cfg), Err(EngineError::Config(_))), "{bits} {mac}");
        }
    }

    #[test]
    fn aes_known_answer() {
        // FIPS-197 appendix C.1.
        let key: [u8; 16] = *b"\x00\x01\x02\x03\x04\x05\x06\x07\x08\x09\x0a\x0b\x0c\x0d\x0e\x0f";
        let c = Aes128::new(GenericArray::from_slice(&key));
        let mut b = GenericArray::clone_from_slice(b"\x00\x11\x22\x33\x44\x55\x66\x77\x88\x99\xaa\xbb\xcc\xdd\xee\xff");
        c.encrypt_block(&mut b);
        assert_eq!(b.as_slice(), b"\x69\xc4\xe0\xd8\x6a\x7b\x04\x30\xd8\xcd\xb7\x80\x70\xb4\xc5\x5a");
    }

    #[test]
    fn xts_known_answer() {
        // IEEE 1619-2007 XTS-AES-128 vector 1: all-zero keys, data unit 0.
        let cipher = LineCipher::new(&[0u8; 32]);
        let ct = cipher.encrypt(0, &[0u8; 64]);
        let expected_first_two_blocks = [
            0x91, 0x7c, 0xf6, 0x9e, 0xbd, 0x68, 0xb2, 0xec, 0x9b, 0x9f, 0xe9, 0xa3, 0xea, 0xdd, 0xa6, 0x92,
            0xcd, 0x43, 0xd2, 0xf5, 0x95, 0x98, 0xed, 0x85, 0x8c, 0x02, 0xc2, 0x65, 0x2f, 0xbf, 0x92, 0x2e,
        ];
        assert_eq!(&ct[..32], &expected_first_two_blocks);
        assert_eq!(cipher.decrypt(0, &ct), [0u8; 64]);
    }

    #[test]
    fn gf_doubling_carries() {
        let mut t = [0u8; 16];
        t[15] = 0x80;
        gf128_mul_alpha(&mut t);
        let mut expected = [0u8; 16];
        expected[0] = 0x87;
        assert_eq!(t, expected);
    }

    #[test]
    fn roundtrip_and_reassignment() {
        let mut e = engine(6, 28);
        e.line_write_full(0x40, KeyId(1), &[0u8; 64]).unwrap();
        assert_eq!(e.line_read(0x40, KeyId(1)).unwrap(), [0u8; 64]);
        e.line_write_full(0x40, KeyId(2), &[9u8; 64]).unwrap();
        assert_eq!(e.line_read(0x40, KeyId(2)).unwrap(), [9u8; 64]);
        assert_eq!(e.provenance(0x40).unwrap().owner, KeyId(2));
    }

    #[test]
    fn address_errors() {
        let mut e = engine(6, 28);
        assert_eq!(e.line_write_full(0x1001, KeyId(1), &[0; 64]), Err(EngineError::Alignment(0x1001)));
        let past = 64 * PAGE_SIZE;
        assert_eq!(e.line_write_full(past, KeyId(1), &[0; 64]), Err(EngineError::PhysRange(past)));
        assert_eq!(e.line_write_full(0, KeyId(64), &[0; 64]), Err(EngineError::InvalidKeyId(64)));
        assert_eq!(e.line_read(0x80, KeyId(1)), Err(EngineError::UninitializedLine(0x80)));
        assert_eq!(
            e.line_write_partial(0x80, KeyId(1), 0, &[1]),
            Err(EngineError::UninitializedLine(0x80))
        );
        e.line_write_full(0x80, KeyId(1), &[0; 64]).unwrap();
        assert!(matches!(e.line_write_partial(0x80, KeyId(1), 60, &[0; 8]), Err(EngineError::LineRange { .. })));
        assert!(matches!(e.line_write_partial(0x80, KeyId(1), 0, &[]), Err(EngineError::LineRange { .. })));
    }

    #[test]
    fn wrong_key_read_violates() {
        let mut e = engine(6, 28);
        e.line_write_full(0x100, KeyId(1), &[0u8; 64]).unwrap();
        // Independent recomputation of both MACs from the key table.
        let ct = e.cell(0x100).unwrap().ciphertext;
        let m1 = line_mac(&e.key_table().get(KeyId(1)).unwrap().material, 0x100, &ct, 28);
        let m2 = line_mac(&e.key_table().get(KeyId(2)).unwrap().material, 0x100, &ct, 28);
        assert_eq!(e.cell(0x100).unwrap().mac, m1);
        assert_ne!(m1, m2);
        assert_eq!(
            e.line_read(0x100, KeyId(2)),
            Err(EngineError::IntegrityViolation { paddr: 0x100, keyid: KeyId(2) })
        );
        assert_eq!(e.stats().violations, 1);
    }

    #[test]
    fn partial_write_by_owner_splices() {
        let mut e = engine(6, 28);
        let data: [u8; 64] = std::array::from_fn(|i| i as u8);
        e.line_write_full(0x200, KeyId(3), &data).unwrap();
        e.line_write_partial(0x200, KeyId(3), 10, &[0xAA; 4]).unwrap();
        let mut expected = data;
        expected[10..14].fill(0xAA);
        assert_eq!(e.line_read(0x200, KeyId(3)).unwrap(), expected);
    }

    #[test]
    fn foreign_partial_write_corrupts_owner_view() {
        let mut e = engine(6, 28);
        let data: [u8; 64] = std::array::from_fn(|i| (i * 3) as u8);
        e.line_write_full(0x300, KeyId(1), &data).unwrap();
        e.line_write_partial(0x300, KeyId(2), 16, &[0xEE; 8]).unwrap();
        assert!(matches!(e.line_read(0x300, KeyId(1)), Err(EngineError::IntegrityViolation { .. })));

        // The writer's view matches its MAC but is garbage outside the splice.
        let seen = e.line_read(0x300, KeyId(2)).unwrap();
        assert_eq!(&seen[16..24], &[0xEE; 8]);
        let outside_equal = (0..64).filter(|&i| !(16..24).contains(&i)).filter(|&i| seen[i] == data[i]).count();
        assert!(outside_equal < 8, "{outside_equal} bytes leaked");
        let p = e.provenance(0x300).unwrap();
        assert_eq!((p.owner, p.last_writer), (KeyId(1), KeyId(2)));
    }

    #[test]
    fn mac_truncation_width() {
        let ct = [5u8; 64];
        for bits in [4u8, 8, 16, 28] {
            assert!(line_mac(&[1; 32], 0, &ct, bits) < (1u32 << bits));
        }
    }

    #[test]
    fn same_seed_same_ciphertext() {
        let mut a = engine(6, 28);
        let mut b = engine(6, 28);
        a.line_write_full(0x40, KeyId(5), &[1; 64]).unwrap();
        b.line_write_full(0x40, KeyId(5), &[1; 64]).unwrap();
        assert_eq!(a.cell(0x40), b.cell(0x40));
    }

    #[test]
    fn reprogrammed_key_rejects_stale_lines() {
        let mut e = engine(6, 28);
        let before = e.key_table().get(KeyId(3)).unwrap().material;
        e.line_write_full(0x80, KeyId(3), &[9; 64]).unwrap();
        e.program_key(KeyId(3)).unwrap();
        assert_ne!(e.key_table().get(KeyId(3)).unwrap().material, before);
        assert!(matches!(e.line_read(0x80, KeyId(3)), Err(EngineError::IntegrityViolation { .. })));
        e.line_write_full(0x80, KeyId(3), &[4; 64]).unwrap();
        assert_eq!(e.line_read(0x80, KeyId(3)).unwrap(), [4; 64]);
        // Other entries keep their material.
        assert_eq!(e.key_table().get(KeyId(4)).unwrap().material, engine(6, 28).key_table().get(KeyId(4)).unwrap().material);
    }
}
