//! Training-free token merging (ToMe) for dense prediction.
//!
//! Tokens of a latent grid are split into `src` and `dst` sets, the most
//! similar `src` tokens are averaged into their best `dst` match before each
//! transformer component, and the component output is copied back to every
//! original position afterwards so the residual stream keeps full resolution.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: the small dense kernel everything runs on.
//! - [`rng`]: counter-based randomness keyed by `(seed, purpose, step, layer)`.
//! - [`partition`]: `src`/`dst` splits (alternating, strided, random, random tile).
//! - [`matching`]: bipartite soft matching over block inputs.
//! - [`merging`]: merge, unmerge and the pruning comparator.
//! - [`unet`]: a randomly initialised U-Net of transformer blocks with ToMe wrapped around each component.
//! - [`diffusion`]: a guided denoising loop with ratio schedules.
//! - [`metrics`]: FLOP accounting and run reports.
//! - [`viz`]: pixmap renderings of partitions and merge groups.

pub mod config;
pub mod diffusion;
pub mod error;
pub mod matching;
pub mod merging;
pub mod metrics;
pub mod partition;
pub mod rng;
pub mod tensor;
pub mod unet;
pub mod viz;

pub use config::ToMeConfig;
pub use error::{Error, Result};
pub use tensor::Matrix;
