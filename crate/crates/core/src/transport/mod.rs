//! Framing, simulated delivery and end-to-end sessions.

pub mod channel;
pub mod wire;
pub mod session;
