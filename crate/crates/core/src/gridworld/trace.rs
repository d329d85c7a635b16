//! JSON-lines export of episode traces.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::GridState;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    pub mission: String,
    pub agent_pos: (usize, usize),
    pub agent_dir: u8,
}

impl TraceRecord {
    /// Record for the transition that produced `after`.
    pub fn after(after: &GridState, action: usize, reward: f64, done: bool) -> Self {
        Self {
            step: after.step,
            action,
            reward,
            done,
            mission: after.mission.sentence(),
            agent_pos: after.agent_pos,
            agent_dir: after.agent_dir,
        }
    }
}

pub fn write_trace<W: Write>(mut out: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
