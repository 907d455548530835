//! Serves a trained policy in a paced live simulation over WebSocket: JSON
//! telemetry out, pushes, resets and pacing commands in.

pub mod protocol;
pub mod server;
pub mod sim;

pub use protocol::{Command, Outbound, Role, StateFrame};
pub use server::{serve, BridgeHandle};
pub use sim::{BridgeConfig, BridgeSim};
