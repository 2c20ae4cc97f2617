//! Look-up-table compilation and multiplier-free execution of feed-forward
//! networks.

pub mod compiler;
pub mod costs;
pub mod engine;
pub mod error;
pub mod exec;
pub mod formats;
pub mod lut;
pub mod modelio;
pub mod oracle;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::ExecPolicy;
