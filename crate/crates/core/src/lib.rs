//! Publish-subscribe middleware built as a protected library.

pub mod bench;
pub mod buffers;
pub mod daemon;
pub mod dds;
pub mod error;
pub mod heap;
pub mod runtime;
pub mod transport;
pub mod wait;
pub mod wire;

pub use error::{Error, Result};
