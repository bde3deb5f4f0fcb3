pub mod episode;
pub mod error;
pub mod eval;
pub mod language;
pub mod nn;
pub mod oracle;
pub mod percept;
pub mod policy;
pub mod train;
pub mod world;

pub use error::{Error, Result};
