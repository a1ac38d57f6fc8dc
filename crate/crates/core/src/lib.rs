//! Interval-POMDP runtime shielding.
//!
//! Learns interval perception models from labeled counts, propagates
//! conservative belief envelopes by linear programming, and lifts a
//! perfect-perception safety shield to shields that act on observations only.

pub mod benchio;
pub mod envelope;
pub mod error;
pub mod intervals;
pub mod linprog;
pub mod model;
pub mod shields;
pub mod simulate;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
