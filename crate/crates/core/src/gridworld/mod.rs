//! Seedable language-conditioned grid environments.
//!
//! Three tasks share one simulator: walk up to a named object, walk up to a
//! named door, and pick up a named object. The agent sees a 7x7 egocentric
//! window with two discrete channels (object kind and color) and receives a
//! reward only on success, decaying linearly with the step count.

mod mission;
pub mod trace;
mod view;

use std::collections::VecDeque;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use mission::{mission_grammar, template_objects, Mission, MissionTemplate};
pub use view::{render_observation, Observation, VisionCell, VIEW_SIZE};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Wall,
    Door,
    Key,
    Ball,
    Box,
    Empty,
    Unseen,
    Agent,
    OutOfBounds,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 9] = [
        ObjectKind::Wall,
        ObjectKind::Door,
        ObjectKind::Key,
        ObjectKind::Ball,
        ObjectKind::Box,
        ObjectKind::Empty,
        ObjectKind::Unseen,
        ObjectKind::Agent,
        ObjectKind::OutOfBounds,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectKind::Wall => "wall",
            ObjectKind::Door => "door",
            ObjectKind::Key => "key",
            ObjectKind::Ball => "ball",
            ObjectKind::Box => "box",
            ObjectKind::Empty => "empty",
            ObjectKind::Unseen => "unseen",
            ObjectKind::Agent => "agent",
            ObjectKind::OutOfBounds => "out_of_bounds",
        }
    }

    fn can_pickup(self) -> bool {
        matches!(self, ObjectKind::Key | ObjectKind::Ball | ObjectKind::Box)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Purple,
    Yellow,
    Grey,
    None,
}

impl Color {
    pub const ALL: [Color; 7] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Purple,
        Color::Yellow,
        Color::Grey,
        Color::None,
    ];

    /// Colors an object can be painted.
    pub const PAINTS: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Purple,
        Color::Yellow,
        Color::Grey,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Purple => "purple",
            Color::Yellow => "yellow",
            Color::Grey => "grey",
            Color::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EnvKind {
    GoToObject,
    GoToDoor,
    Fetch,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::GoToObject, EnvKind::GoToDoor, EnvKind::Fetch];
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::GoToObject => "GoToObject",
            EnvKind::GoToDoor => "GoToDoor",
            EnvKind::Fetch => "Fetch",
        })
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "gotoobject" => Ok(EnvKind::GoToObject),
            "gotodoor" => Ok(EnvKind::GoToDoor),
            "fetch" => Ok(EnvKind::Fetch),
            _ => Err(Error::Config(format!("unknown environment {s:?}"))),
        }
    }
}

/// The seven discrete actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Forward = 0,
    Left = 1,
    Right = 2,
    Pickup = 3,
    Drop = 4,
    Toggle = 5,
    Done = 6,
}

impl Action {
    pub const COUNT: usize = 7;
    pub const ALL: [Action; 7] = [
        Action::Forward,
        Action::Left,
        Action::Right,
        Action::Pickup,
        Action::Drop,
        Action::Toggle,
        Action::Done,
    ];
}

impl TryFrom<usize> for Action {
    type Error = Error;

    fn try_from(id: usize) -> Result<Self> {
        Action::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid("env_step", format!("action id {id} outside 0..7")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub kind: ObjectKind,
    pub color: Color,
    pub open: bool,
}

impl Cell {
    pub const EMPTY: Cell = Cell {
        kind: ObjectKind::Empty,
        color: Color::None,
        open: false,
    };

    pub const WALL: Cell = Cell {
        kind: ObjectKind::Wall,
        color: Color::Grey,
        open: false,
    };

    pub fn object(kind: ObjectKind, color: Color) -> Self {
        Self {
            kind,
            color,
            open: false,
        }
    }

    fn passable(self) -> bool {
        self.kind == ObjectKind::Empty || (self.kind == ObjectKind::Door && self.open)
    }

    pub(crate) fn see_behind(self) -> bool {
        !(self.kind == ObjectKind::Wall || (self.kind == ObjectKind::Door && !self.open))
    }
}

/// Environment block of the experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub env_kind: EnvKind,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Success reward is `1 - reward_decay * step / max_steps`.
    #[serde(default = "default_reward_decay")]
    pub reward_decay: f64,
    /// `max_steps = max_steps_factor * width * height`.
    #[serde(default = "default_max_steps_factor")]
    pub max_steps_factor: usize,
    /// Objects placed per episode; defaults to 2 (GoToObject) or 3 (Fetch).
    #[serde(default)]
    pub n_objects: Option<usize>,
    /// Picking up the wrong object in Fetch ends the episode with reward 0.
    #[serde(default = "default_true")]
    pub fetch_wrong_pickup_terminates: bool,
    /// Cells hidden behind walls and closed doors render as unseen.
    #[serde(default = "default_true")]
    pub occlusion: bool,
}

fn default_grid_size() -> usize {
    8
}
fn default_reward_decay() -> f64 {
    0.9
}
fn default_max_steps_factor() -> usize {
    4
}
fn default_true() -> bool {
    true
}

impl EnvConfig {
    pub fn new(env_kind: EnvKind) -> Self {
        Self {
            env_kind,
            grid_size: default_grid_size(),
            seed: 0,
            reward_decay: default_reward_decay(),
            max_steps_factor: default_max_steps_factor(),
            n_objects: None,
            fetch_wrong_pickup_terminates: true,
            occlusion: true,
        }
    }

    pub fn with_grid_size(mut self, size: usize) -> Self {
        self.grid_size = size;
        self
    }

    pub fn objects(&self) -> usize {
        self.n_objects.unwrap_or(match self.env_kind {
            EnvKind::Fetch => 3,
            _ => 2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 5 {
            return Err(Error::Config(format!("grid_size {} < 5", self.grid_size)));
        }
        if self.max_steps_factor == 0 {
            return Err(Error::Config("max_steps_factor must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.reward_decay) {
            return Err(Error::Config("reward_decay must lie in [0, 1]".into()));
        }
        let interior = (self.grid_size - 2) * (self.grid_size - 2);
        if self.env_kind != EnvKind::GoToDoor && (self.objects() == 0 || self.objects() + 1 > interior) {
            return Err(Error::Config(format!("{} objects do not fit", self.objects())));
        }
        Ok(())
    }
}

/// Headings in clockwise order; `y` grows downward.
pub const DIRECTIONS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridState {
    pub env_kind: EnvKind,
    pub width: usize,
    pub height: usize,
    pub cells: Vec<Cell>,
    pub agent_pos: (usize, usize),
    /// Index into [`DIRECTIONS`].
    pub agent_dir: u8,
    pub carrying: Option<Cell>,
    pub mission: Mission,
    pub step: usize,
    pub max_steps: usize,
    pub done: bool,
    pub reward_decay: f64,
    pub fetch_wrong_pickup_terminates: bool,
    pub occlusion: bool,
    pub rng: ChaCha8Rng,
}

impl GridState {
    /// Hand-built state from text rows: `#` wall, `.` empty, and one agent
    /// arrow (`>`, `v`, `<`, `^`). Objects are placed afterwards.
    pub fn from_ascii(
        config: &EnvConfig,
        rows: &[&str],
        objects: &[((usize, usize), Cell)],
        mission: Mission,
    ) -> Result<GridState> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        let mut cells = Vec::with_capacity(width * height);
        let mut agent = None;
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::Config("ragged layout".into()));
            }
            for (x, ch) in row.chars().enumerate() {
                cells.push(match ch {
                    '#' => Cell::WALL,
                    '.' => Cell::EMPTY,
                    '>' | 'v' | '<' | '^' => {
                        let dir = ['>', 'v', '<', '^'].iter().position(|&c| c == ch).unwrap();
                        agent = Some(((x, y), dir as u8));
                        Cell::EMPTY
                    }
                    other => return Err(Error::Config(format!("unknown layout char {other:?}"))),
                });
            }
        }
        let (agent_pos, agent_dir) = agent.ok_or_else(|| Error::Config("layout has no agent".into()))?;
        for &((x, y), cell) in objects {
            cells[y * width + x] = cell;
        }
        Ok(GridState {
            env_kind: config.env_kind,
            width,
            height,
            cells,
            agent_pos,
            agent_dir,
            carrying: None,
            mission,
            step: 0,
            max_steps: config.max_steps_factor * width * height,
            done: false,
            reward_decay: config.reward_decay,
            fetch_wrong_pickup_terminates: config.fetch_wrong_pickup_terminates,
            occlusion: config.occlusion,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    pub fn cell(&self, x: usize, y: usize) -> Cell {
        self.cells[y * self.width + x]
    }

    pub fn set_cell(&mut self, x: usize, y: usize, cell: Cell) {
        self.cells[y * self.width + x] = cell;
    }

    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn front_pos(&self) -> Option<(usize, usize)> {
        let (dx, dy) = DIRECTIONS[self.agent_dir as usize];
        let (x, y) = (self.agent_pos.0 as i64 + dx, self.agent_pos.1 as i64 + dy);
        self.in_bounds(x, y).then_some((x as usize, y as usize))
    }

    fn targets(&self, cell: Cell) -> bool {
        cell.kind == self.mission.object_kind && cell.color == self.mission.color
    }

    /// Reward for succeeding from the current (pre-action) step count.
    pub fn success_reward(&self) -> f64 {
        1.0 - self.reward_decay * (self.step as f64 / self.max_steps as f64)
    }

    /// Applies one action in place and returns `(reward, done)`.
    pub fn step_mut(&mut self, action: Action) -> Result<(f64, bool)> {
        if self.done {
            return Err(Error::EpisodeTerminated);
        }
        let front = self.front_pos();
        let mut reward = 0.0;
        let mut done = false;
        match action {
            Action::Left => self.agent_dir = (self.agent_dir + 3) % 4,
            Action::Right => self.agent_dir = (self.agent_dir + 1) % 4,
            Action::Forward => {
                if let Some((x, y)) = front {
                    if self.cell(x, y).passable() {
                        self.agent_pos = (x, y);
                    }
                }
            }
            Action::Pickup => {
                if let Some((x, y)) = front {
                    let cell = self.cell(x, y);
                    if self.carrying.is_none() && cell.kind.can_pickup() {
                        self.carrying = Some(cell);
                        self.set_cell(x, y, Cell::EMPTY);
                        if self.env_kind == EnvKind::Fetch {
                            if self.targets(cell) {
                                reward = self.success_reward();
                                done = true;
                            } else if self.fetch_wrong_pickup_terminates {
                                done = true;
                            }
                        }
                    }
                }
            }
            Action::Drop => {
                if let (Some((x, y)), Some(item)) = (front, self.carrying) {
                    if self.cell(x, y).kind == ObjectKind::Empty {
                        self.set_cell(x, y, item);
                        self.carrying = None;
                    }
                }
            }
            Action::Toggle => {
                if let Some((x, y)) = front {
                    let mut cell = self.cell(x, y);
                    if cell.kind == ObjectKind::Door {
                        cell.open = !cell.open;
                        self.set_cell(x, y, cell);
                    }
                }
            }
            Action::Done => {}
        }
        if !done && self.env_kind != EnvKind::Fetch {
            if let Some((x, y)) = self.front_pos() {
                if self.targets(self.cell(x, y)) {
                    reward = self.success_reward();
                    done = true;
                }
            }
        }
        self.step += 1;
        if self.step >= self.max_steps {
            done = true;
        }
        self.done = done;
        Ok((reward, done))
    }

    /// Renders the full grid as text: walls `#`, doors `D`/`d` (closed/open),
    /// keys `k`, balls `o`, boxes `b`, the agent as an arrow.
    pub fn render_ascii(&self) -> String {
        let mut out = String::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let ch = if (x, y) == self.agent_pos {
                    ['>', 'v', '<', '^'][self.agent_dir as usize]
                } else {
                    let c = self.cell(x, y);
                    match c.kind {
                        ObjectKind::Wall => '#',
                        ObjectKind::Door if c.open => 'd',
                        ObjectKind::Door => 'D',
                        ObjectKind::Key => 'k',
                        ObjectKind::Ball => 'o',
                        ObjectKind::Box => 'b',
                        _ => '.',
                    }
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out.push_str(&self.mission.sentence());
        out.push('\n');
        out
    }

    /// Whether some free cell next to a mission target can be reached from
    /// the agent through passable cells (doors count as passable since they
    /// can be toggled open).
    pub fn target_reachable(&self) -> bool {
        let idx = |x: usize, y: usize| y * self.width + x;
        let mut seen = vec![false; self.cells.len()];
        let mut queue = VecDeque::from([self.agent_pos]);
        seen[idx(self.agent_pos.0, self.agent_pos.1)] = true;
        while let Some((x, y)) = queue.pop_front() {
            for (dx, dy) in DIRECTIONS {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if !self.in_bounds(nx, ny) {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                let cell = self.cell(nx, ny);
                if self.targets(cell) {
                    return true;
                }
                let walkable = cell.kind == ObjectKind::Empty || cell.kind == ObjectKind::Door;
                if walkable && !seen[idx(nx, ny)] {
                    seen[idx(nx, ny)] = true;
                    queue.push_back((nx, ny));
                }
            }
        }
        false
    }
}

/// Builds a fresh episode. Layouts whose target cannot be approached are
/// redrawn from the same generator.
pub fn env_reset(config: &EnvConfig, seed: u64) -> (GridState, Observation) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let state = generate(config, &mut rng);
        if state.target_reachable() {
            let obs = render_observation(&state);
            return (state, obs);
        }
    }
}

/// Functional form of [`GridState::step_mut`].
pub fn env_step(state: &GridState, action: usize) -> Result<(GridState, Observation, f64, bool)> {
    let action = Action::try_from(action)?;
    let mut next = state.clone();
    let (reward, done) = next.step_mut(action)?;
    let obs = render_observation(&next);
    Ok((next, obs, reward, done))
}

fn generate(config: &EnvConfig, rng: &mut ChaCha8Rng) -> GridState {
    let (w, h) = (config.grid_size, config.grid_size);
    let mut cells = vec![Cell::EMPTY; w * h];
    for x in 0..w {
        cells[x] = Cell::WALL;
        cells[(h - 1) * w + x] = Cell::WALL;
    }
    for y in 0..h {
        cells[y * w] = Cell::WALL;
        cells[y * w + w - 1] = Cell::WALL;
    }
    let mut free: Vec<(usize, usize)> = (1..h - 1)
        .flat_map(|y| (1..w - 1).map(move |x| (x, y)))
        .collect();
    let mut take_free = |rng: &mut ChaCha8Rng| free.swap_remove(rng.gen_range(0..free.len()));

    let mut placed: Vec<Cell> = Vec::new();
    match config.env_kind {
        EnvKind::GoToDoor => {
            let mut colors = Color::PAINTS.to_vec();
            colors.shuffle(rng);
            let sides = [
                (rng.gen_range(1..w - 1), 0),
                (w - 1, rng.gen_range(1..h - 1)),
                (rng.gen_range(1..w - 1), h - 1),
                (0, rng.gen_range(1..h - 1)),
            ];
            for ((x, y), color) in sides.into_iter().zip(colors) {
                let door = Cell::object(ObjectKind::Door, color);
                cells[y * w + x] = door;
                placed.push(door);
            }
        }
        EnvKind::GoToObject | EnvKind::Fetch => {
            let kinds: &[ObjectKind] = if config.env_kind == EnvKind::Fetch {
                &[ObjectKind::Key, ObjectKind::Ball]
            } else {
                &[ObjectKind::Key, ObjectKind::Ball, ObjectKind::Box]
            };
            for _ in 0..config.objects() {
                let kind = *kinds.choose(rng).unwrap();
                let color = *Color::PAINTS.choose(rng).unwrap();
                let (x, y) = take_free(rng);
                let obj = Cell::object(kind, color);
                cells[y * w + x] = obj;
                placed.push(obj);
            }
        }
    }
    let agent_pos = take_free(rng);
    let agent_dir = rng.gen_range(0..4u8);
    let target = *placed.choose(rng).unwrap();
    let template = *mission_grammar(config.env_kind).choose(rng).unwrap();
    let mission = Mission::new(template, target.color, target.kind);
    GridState {
        env_kind: config.env_kind,
        width: w,
        height: h,
        cells,
        agent_pos,
        agent_dir,
        carrying: None,
        mission,
        step: 0,
        max_steps: config.max_steps_factor * w * h,
        done: false,
        reward_decay: config.reward_decay,
        fetch_wrong_pickup_terminates: config.fetch_wrong_pickup_terminates,
        occlusion: config.occlusion,
        rng: rng.clone(),
    }
}
