//! Zero-shot object detection head operating on precomputed region features.
//!
//! A region feature `f` is scored against every class through a learnable
//! projection `W1` composed with a fixed matrix of class word vectors `W2`:
//! `o = (W1 W2)ᵀ f`. Because the word vectors of unseen classes sit in `W2`
//! next to the seen ones, a projection trained on seen classes alone still
//! produces scores for the unseen ones.
//!
//! The crate is `no_std` (it needs `alloc`) and does no IO. Parsing helpers
//! take `&str`; the `zsd` crate wraps them with files and a CLI.
//!
//! Modules, bottom-up:
//!
//! - [`semantics`]: word-vector tables and the seen/unseen/meta label space.
//! - [`model`]: the projection, the box head and the forward pass.
//! - [`loss`]: max-margin and meta-class clustering losses with analytic
//!   gradients.
//! - [`train`]: Adam, proposal labeling, batch composition, rebalancing.
//! - [`infer`]: thresholded unseen detection, ConSE fallback, tagging.
//! - [`eval`]: IoU, NMS, average precision and the four task reports.
//! - [`data`]: datasets, the split protocol and a synthetic generator.
#![no_std]

extern crate alloc;

pub mod bbox;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod semantics;
pub mod train;

mod error;

pub use bbox::{Bbox, BoxDelta};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::Model;
pub use semantics::{ClassId, EmbeddingTable, LabelSpace, MetaId};
