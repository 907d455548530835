//! Wire messages. Every frame is one JSON object with a `type` tag; see
//! `PROTOCOL.md` for the field-by-field description.

use hoverlab::eval::Region;
use serde::{Deserialize, Serialize};

pub const MAX_PUSH_DURATION_S: f64 = 2.0;
pub const MAX_RATE_HZ: f64 = 1000.0;

/// Client to server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    /// World-frame force in N, applied from the next control step.
    Push {
        force: [f64; 3],
        duration_s: f64,
    },
    Reset {
        region: Region,
    },
    Pause,
    Resume,
    /// Control steps per wall-clock second; the control rate is real time.
    SetRate {
        hz: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Operator,
    Observer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub seq: u64,
    /// Session clock in simulated seconds; never decreases.
    pub t: f64,
    pub episode: u64,
    /// Seconds since the current episode started.
    pub episode_t: f64,
    pub pos: [f64; 3],
    pub euler: [f64; 3],
    pub lin_vel: [f64; 3],
    pub ang_vel: [f64; 3],
    pub rpm: [f64; 4],
    pub reward_total: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<String>,
}

/// Server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Outbound {
    Hello { role: Role, rate_hz: f64, control_dt: f64, target: [f64; 3], push_force_n: f64, push_duration_s: f64 },
    State(StateFrame),
    Error { message: String },
}

fn finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

impl Command {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            Command::Push { force, duration_s } => {
                if !finite(&force) {
                    return Err("push force must be finite".into());
                }
                if !(duration_s > 0.0 && duration_s <= MAX_PUSH_DURATION_S) {
                    return Err(format!("push duration_s must lie in (0, {MAX_PUSH_DURATION_S}]"));
                }
            }
            Command::SetRate { hz } => {
                if !(hz > 0.0 && hz <= MAX_RATE_HZ) {
                    return Err(format!("rate must lie in (0, {MAX_RATE_HZ}] Hz"));
                }
            }
            Command::Reset { .. } | Command::Pause | Command::Resume => {}
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cmd: Command = serde_json::from_str(text).map_err(|e| format!("malformed message: {e}"))?;
        cmd.validate()?;
        Ok(cmd)
    }
}

impl Outbound {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("outbound messages serialize")
    }
}
