//! Character-sequence autoencoder with a slot bottleneck.
//!
//! A Transformer encoder maps characters to contextual vectors, an iterative
//! slot-attention step compresses them into K slot vectors, hard-concrete
//! gates prune the slots that are not needed, and a shallow decoder
//! reconstructs the input autoregressively. The crate also carries the
//! evaluation stack used to inspect what the slots learn: BPE target
//! generation, Hungarian-matched probing classification, and attention-map
//! export.

pub mod bpe;
pub mod checkpoint;
pub mod corpus;
pub mod diff;
pub mod gates;
pub mod model;
pub mod params;
pub mod posenc;
pub mod probe;
pub mod seeds;
pub mod slotattn;
pub mod trainer;
pub mod viz;
