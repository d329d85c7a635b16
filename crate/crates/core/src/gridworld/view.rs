use serde::{Deserialize, Serialize};

use super::{Color, GridState, ObjectKind, DIRECTIONS};

pub const VIEW_SIZE: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VisionCell {
    pub kind: ObjectKind,
    pub color: Color,
}

impl VisionCell {
    pub const UNSEEN: VisionCell = VisionCell {
        kind: ObjectKind::Unseen,
        color: Color::None,
    };
    pub const OUT_OF_BOUNDS: VisionCell = VisionCell {
        kind: ObjectKind::OutOfBounds,
        color: Color::None,
    };
    pub const AGENT: VisionCell = VisionCell {
        kind: ObjectKind::Agent,
        color: Color::None,
    };
}

/// Egocentric view: row 0 is farthest ahead, the agent sits at row 6,
/// column 3, facing up.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub vision: [[VisionCell; VIEW_SIZE]; VIEW_SIZE],
    pub mission_text: Vec<String>,
}

impl Observation {
    pub fn mission(&self) -> String {
        self.mission_text.join(" ")
    }
}

/// Maps a view cell to world coordinates (may fall outside the grid).
pub(crate) fn view_to_world(state: &GridState, row: usize, col: usize) -> (i64, i64) {
    let (fx, fy) = DIRECTIONS[state.agent_dir as usize];
    let (rx, ry) = DIRECTIONS[(state.agent_dir as usize + 1) % 4];
    let ahead = (VIEW_SIZE - 1 - row) as i64;
    let side = col as i64 - (VIEW_SIZE / 2) as i64;
    (
        state.agent_pos.0 as i64 + ahead * fx + side * rx,
        state.agent_pos.1 as i64 + ahead * fy + side * ry,
    )
}

/// Sweeps rows away from the agent, spreading visibility sideways and forward
/// from every visible cell that can be seen through.
fn visibility(opaque: &[[bool; VIEW_SIZE]; VIEW_SIZE]) -> [[bool; VIEW_SIZE]; VIEW_SIZE] {
    let mut vis = [[false; VIEW_SIZE]; VIEW_SIZE];
    vis[VIEW_SIZE - 1][VIEW_SIZE / 2] = true;
    for row in (0..VIEW_SIZE).rev() {
        for col in 0..VIEW_SIZE - 1 {
            if !vis[row][col] || opaque[row][col] {
                continue;
            }
            vis[row][col + 1] = true;
            if row > 0 {
                vis[row - 1][col + 1] = true;
                vis[row - 1][col] = true;
            }
        }
        for col in (1..VIEW_SIZE).rev() {
            if !vis[row][col] || opaque[row][col] {
                continue;
            }
            vis[row][col - 1] = true;
            if row > 0 {
                vis[row - 1][col - 1] = true;
                vis[row - 1][col] = true;
            }
        }
    }
    vis
}

pub fn render_observation(state: &GridState) -> Observation {
    let mut raw = [[VisionCell::OUT_OF_BOUNDS; VIEW_SIZE]; VIEW_SIZE];
    let mut opaque = [[true; VIEW_SIZE]; VIEW_SIZE];
    for (row, cells) in raw.iter_mut().enumerate() {
        for (col, out) in cells.iter_mut().enumerate() {
            let (x, y) = view_to_world(state, row, col);
            if state.in_bounds(x, y) {
                let cell = state.cell(x as usize, y as usize);
                *out = VisionCell {
                    kind: cell.kind,
                    color: cell.color,
                };
                opaque[row][col] = !cell.see_behind();
            }
        }
    }
    raw[VIEW_SIZE - 1][VIEW_SIZE / 2] = VisionCell::AGENT;
    opaque[VIEW_SIZE - 1][VIEW_SIZE / 2] = false;
    if state.occlusion {
        let vis = visibility(&opaque);
        for row in 0..VIEW_SIZE {
            for col in 0..VIEW_SIZE {
                if !vis[row][col] {
                    raw[row][col] = VisionCell::UNSEEN;
                }
            }
        }
    }
    Observation {
        vision: raw,
        mission_text: state.mission.text.clone(),
    }
}
