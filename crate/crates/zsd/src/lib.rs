//! File formats, pipeline glue and the `zsd` command line for the
//! `zsd-core` zero-shot detection head.

pub mod bundle;
pub mod checkpoint;
mod error;
pub mod formats;
pub mod manifest;
pub mod pipeline;

pub use error::{Error, Result};
pub use zsd_core as core;
