// SPDX-License-Identifier: Apache-2.0

//! Wrong-key read trials against the engine.
//!
//! Trial `i` writes a random line under writer keyID `w` and reads it back
//! under reader `r != w`, where `(w, r)` is ordered pair `i mod P` of the
//! `P = K (K - 1)` pairs over the `K` non-default keyIDs. Any trial count
//! that is a multiple of `P` covers every pair equally.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::crypto::{Engine, EngineConfig, EngineError, KeyId, LINE_SIZE, PAGE_SIZE};
use crate::parallel::{chunk_seed, Executor};

const CHUNK: u64 = 8192;
const PAGES: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TrialConfig {
    pub keyid_bits: u8,
    pub mac_bits: u8,
    pub trials: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TrialResult {
    pub trials: u64,
    pub detected: u64,
    pub false_accepts: u64,
    pub pairs: u64,
    /// Fewest trials any single ordered pair received.
    pub min_trials_per_pair: u64,
}

impl TrialResult {
    pub fn false_accept_rate(&self) -> f64 {
        self.false_accepts as f64 / self.trials as f64
    }
}

/// Ordered pair number `index` among the `k (k - 1)` pairs of keyIDs
/// `1..=k`.
pub fn ordered_pair(index: u64, k: u64) -> (KeyId, KeyId) {
    let w = index / (k - 1);
    let mut r = index % (k - 1);
    if r >= w {
        r += 1;
    }
    (KeyId(w as u16 + 1), KeyId(r as u16 + 1))
}

pub fn wrong_key_trials(cfg: &TrialConfig, exec: Executor) -> Result<TrialResult, EngineError> {
    let engine_cfg = EngineConfig { keyid_bits: cfg.keyid_bits, mac_bits: cfg.mac_bits, rng_seed: cfg.seed, phys_pages: PAGES };
    engine_cfg.validate()?;
    let k = (1u64 << cfg.keyid_bits) - 1;
    if k < 2 {
        return Err(EngineError::Config("wrong-key trials need at least two sandbox keyIDs".into()));
    }
    let pairs = k * (k - 1);
    let parts = exec.map_chunks(cfg.trials, CHUNK, |chunk, range| {
        let mut engine = Engine::new(engine_cfg).expect("validated");
        let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(cfg.seed, chunk));
        let (mut detected, mut accepted) = (0u64, 0u64);
        for i in range {
            let (w, r) = ordered_pair(i % pairs, k);
            let paddr = rng.gen_range(0..PAGES * PAGE_SIZE / LINE_SIZE as u64) * LINE_SIZE as u64;
            let mut line = [0u8; LINE_SIZE];
            rng.fill_bytes(&mut line);
            engine.line_write_full(paddr, w, &line).expect("in range");
            match engine.line_read(paddr, r) {
                Err(EngineError::IntegrityViolation { .. }) => detected += 1,
                Ok(_) => accepted += 1,
                Err(e) => panic!("unexpected engine error {e}"),
            }
        }
        (detected, accepted)
    });
    let (detected, false_accepts) = parts.iter().fold((0, 0), |(d, a), (x, y)| (d + x, a + y));
    Ok(TrialResult {
        trials: cfg.trials,
        detected,
        false_accepts,
        pairs,
        min_trials_per_pair: cfg.trials / pairs,
    })
}

/// Binomial acceptance band `p ± z sqrt(p (1 - p) / n)`.
pub fn binomial_band(p: f64, n: u64, z: f64) -> (f64, f64) {
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    (p - z * sigma, p + z * sigma)
}
