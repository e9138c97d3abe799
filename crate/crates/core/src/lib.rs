//! Fairness-aware demonstration selection for in-context learning.
//!
//! The crate covers the full selection-level pipeline: labeled pools with
//! sensitive attributes ([`corpus`]), embedding geometry and seeded k-means
//! ([`vectorspace`]), the demonstration selection strategies ([`selectors`]),
//! fairness and performance metrics ([`metrics`]), a deterministic experiment
//! harness with a synthetic biased oracle ([`harness`]), and a synthetic
//! pool generator for self-contained runs ([`synthetic`]).
//!
//! All selection and evaluation paths are pure functions of their inputs and
//! an explicit 64-bit seed. With the built-in oracle, identical configs
//! produce byte-identical artifacts.
//!
//! The `parallel` feature (on by default) runs the k-means assignment step
//! and the per-query evaluation loop on rayon; without it everything falls
//! back to equivalent sequential code producing bit-identical results.

pub mod corpus;
pub mod harness;
pub mod metrics;
pub mod selectors;
pub mod synthetic;
pub mod vectorspace;

mod exec;

pub use corpus::{LabeledExample, Pool, QueryExample, SensitiveAttributeSchema};
pub use selectors::DemonstrationSet;
pub use vectorspace::{ClusterModel, EmbeddingMatrix};

/// Derives a child seed from a base seed and a string label.
///
/// Used for per-query selection and oracle streams so that results do not
/// depend on query processing order. FNV-1a over the label with a splitmix64
/// finalizer; stable across platforms and releases, unlike `DefaultHasher`.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    h = h.wrapping_mul(0x1000_0000_01b3);
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}
