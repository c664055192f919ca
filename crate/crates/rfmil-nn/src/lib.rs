//! Minimal CPU neural-network engine.
//!
//! Layers follow an explicit forward-cache / hand-written-backward pattern:
//! `forward` is pure over immutable parameters and returns a cache holding
//! whatever the gradient computation needs, `backward` consumes the cache,
//! accumulates parameter gradients in place, and returns the gradient with
//! respect to the layer input. There is no tape; models wire their own
//! backward order.
//!
//! Conventions:
//! - image tensors are `[N, C, H, W]`, sequence tensors are `[n, d]`
//! - linear weights are `[out, in]`, applied as `y = x Wᵀ + b`
//! - shape misuse is a programmer error and panics; fallible domain-level
//!   validation belongs to the caller

pub mod act;
pub mod adam;
pub mod attention;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod param;
pub mod rng;
pub mod schedule;

pub use adam::Adam;
pub use attention::{single_head_attention, MhaCache, MultiHeadAttention};
pub use conv::{Conv2d, ConvCache, GlobalAvgPool};
pub use linear::Linear;
pub use norm::{GroupNorm, LayerNorm};
pub use param::Param;
pub use schedule::WarmupCosine;
