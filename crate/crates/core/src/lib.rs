//! Certified output invariance for single-layer transformers.
//!
//! Given model weights and an input restriction (a fixed prefix, some free
//! slots, a fixed query token), the verifier bounds how far the query-row
//! logits can move over every filling of the free slots. When that bound is
//! below half the gap between the top two logits on one concrete filling,
//! greedy decoding provably returns the same token for every filling, and the
//! model is reported as overwhelmed by the prefix.
//!
//! Modules follow the pipeline:
//!
//! * [`format`] reads and writes the `OVWM` weight container.
//! * [`model`] is the exact forward pass at the query position.
//! * [`bounds`] is the verifier for unconstrained free slots.
//! * [`perm`] is the verifier for free slots holding a permutation of a
//!   given multiset, with exact assignment-based mass bounds.
//! * [`oracle`] enumerates small spaces exhaustively for ground truth.
//! * [`convergence`] studies the repetition restriction as `n_ctx` grows.

pub mod assignment;
pub mod bounds;
pub mod convergence;
pub mod error;
pub mod format;
pub mod hexfloat;
pub mod model;
pub mod oracle;
pub mod perm;
pub mod tensor;
pub mod toy;

pub use bounds::{
    verify_overwhelmed, InputRestriction, LogitBounds, SamplePolicy, SoftmaxMassBounds, VerificationReport,
    Verdict, VerifyOptions,
};
pub use error::{Error, Result};
pub use model::{InputSequence, Model, ModelWeights, QueryLogits, TokenId};
pub use perm::{verify_overwhelmed_perm, Method, PermutationClass};
