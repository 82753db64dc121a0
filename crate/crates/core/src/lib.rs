// SPDX-License-Identifier: Apache-2.0

pub mod crypto;
pub mod instrument;
pub mod isa;
pub mod memory;
pub mod runtime;
pub mod scenario;
pub mod montecarlo;
pub mod parallel;
pub mod fuzz;
pub mod overhead;
