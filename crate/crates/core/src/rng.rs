//! Seed derivation and counter-based random streams.
//!
//! All randomness in the crate flows from one root seed. Sub-seeds are
//! derived by hashing `(root, label, index)` so independent components never
//! share a stream, and per-pixel noise uses a counter-based generator that is
//! a pure function of `(seed, pixel index)` — output is identical under any
//! thread count or evaluation order.

use sha2::{Digest, Sha256};

/// Derive a sub-seed from a root seed, a component label, and an index.
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[0..8].try_into().unwrap())
}

/// One round of the splitmix64 mixing function.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform f64 in (0, 1), never exactly 0 or 1.
fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard-normal draw keyed on `(seed, index)` via splitmix + Box-Muller.
pub fn counter_normal(seed: u64, index: u64) -> f64 {
    let mut state = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let u1 = unit_open(splitmix64(&mut state));
    let u2 = unit_open(splitmix64(&mut state));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
