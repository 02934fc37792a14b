//! Object-aligned auxiliary views for visual contrastive decoding.
//!
//! The crate is model-agnostic: attention maps and next-token logits come
//! from a [`providers::LogitProvider`] (a closed-form mock for desk-scale
//! checks, or a remote backend over the OAV1 framing).

pub mod auxview;
pub mod decode;
pub mod eval;
pub mod providers;
pub mod saliency;
pub mod tensors;
