//! Modified GridWorld: the agent must enter the object cells in plan order.
//!
//! Coordinates are `(x, y)` with `y` growing upwards; `Up` increments `y`.
//! There are no walls or obstacles. Moving off the grid is a no-op that still
//! costs a step. Entering the cell of the current sub-goal advances the plan,
//! entering any other object cell fails the episode.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::language::{ExecutionPlan, Referent};

pub const STACK_LEN: usize = 4;
pub const PLANES: usize = 4;
pub const STACK_CHANNELS: usize = STACK_LEN * PLANES;
pub const DEFAULT_STEPS_PER_SUBGOAL: usize = 30;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("execution plan is empty")]
    EmptyPlan,
    #[error("step called on a finished episode ({0})")]
    SteppedAfterDone(Status),
    #[error("step called before reset")]
    NotReset,
    #[error("layout file: {0}")]
    Io(#[from] std::io::Error),
    #[error("layout file: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell(pub usize, pub usize);

impl Cell {
    pub fn x(self) -> usize {
        self.0
    }

    pub fn y(self) -> usize {
        self.1
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.0.abs_diff(other.0) + self.1.abs_diff(other.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Success,
    Failure,
    Timeout,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        self != Status::Running
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Status::Running => "running",
            Status::Success => "success",
            Status::Failure => "failure",
            Status::Timeout => "timeout",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayoutFile", into = "LayoutFile")]
pub struct GridLayout {
    width: usize,
    height: usize,
    agent_start: Cell,
    objects: [Cell; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutFile {
    width: usize,
    height: usize,
    agent_start: Cell,
    objects: ObjectCells,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectCells {
    red: Cell,
    blue: Cell,
    green: Cell,
}

impl TryFrom<LayoutFile> for GridLayout {
    type Error = EnvError;

    fn try_from(f: LayoutFile) -> Result<Self, EnvError> {
        GridLayout::new(
            f.width,
            f.height,
            f.agent_start,
            [f.objects.red, f.objects.blue, f.objects.green],
        )
    }
}

impl From<GridLayout> for LayoutFile {
    fn from(l: GridLayout) -> Self {
        LayoutFile {
            width: l.width,
            height: l.height,
            agent_start: l.agent_start,
            objects: ObjectCells {
                red: l.objects[0],
                blue: l.objects[1],
                green: l.objects[2],
            },
        }
    }
}

impl GridLayout {
    /// `objects` is indexed by [`Referent::index`].
    pub fn new(
        width: usize,
        height: usize,
        agent_start: Cell,
        objects: [Cell; 3],
    ) -> Result<Self, EnvError> {
        if width == 0 || height == 0 {
            return Err(EnvError::InvalidLayout("grid must be non-empty".into()));
        }
        let cells = [agent_start, objects[0], objects[1], objects[2]];
        if let Some(c) = cells.iter().find(|c| c.0 >= width || c.1 >= height) {
            return Err(EnvError::InvalidLayout(format!(
                "cell {c:?} outside {width}x{height} grid"
            )));
        }
        for i in 0..cells.len() {
            for j in i + 1..cells.len() {
                if cells[i] == cells[j] {
                    return Err(EnvError::InvalidLayout(format!(
                        "cell {:?} used twice",
                        cells[i]
                    )));
                }
            }
        }
        Ok(Self {
            width,
            height,
            agent_start,
            objects,
        })
    }

    /// The 10x10 instance drawn in the reference figure.
    pub fn figure() -> Self {
        Self::new(10, 10, Cell(1, 5), [Cell(6, 5), Cell(4, 9), Cell(3, 0)]).expect("static layout")
    }

    /// Uniformly places the agent and the three objects on distinct cells.
    pub fn random<R: Rng + ?Sized>(
        width: usize,
        height: usize,
        rng: &mut R,
    ) -> Result<Self, EnvError> {
        if width * height < 4 {
            return Err(EnvError::InvalidLayout(
                "grid too small for four distinct cells".into(),
            ));
        }
        let picked = rand::seq::index::sample(rng, width * height, 4);
        let cell = |i: usize| Cell(picked.index(i) % width, picked.index(i) / width);
        Self::new(width, height, cell(0), [cell(1), cell(2), cell(3)])
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn agent_start(&self) -> Cell {
        self.agent_start
    }

    pub fn object_cell(&self, r: Referent) -> Cell {
        self.objects[r.index()]
    }

    pub fn object_at(&self, c: Cell) -> Option<Referent> {
        Referent::ALL
            .into_iter()
            .find(|r| self.objects[r.index()] == c)
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.0 < self.width && c.1 < self.height
    }

    /// Neighbour in direction `a`, or `c` itself when the move leaves the grid.
    pub fn neighbor(&self, c: Cell, a: Action) -> Cell {
        match a {
            Action::Up if c.1 + 1 < self.height => Cell(c.0, c.1 + 1),
            Action::Down if c.1 > 0 => Cell(c.0, c.1 - 1),
            Action::Left if c.0 > 0 => Cell(c.0 - 1, c.1),
            Action::Right if c.0 + 1 < self.width => Cell(c.0 + 1, c.1),
            _ => c,
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.height).flat_map(move |y| (0..self.width).map(move |x| Cell(x, y)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub gamma: f64,
    pub r_correct: f64,
    pub r_wrong: f64,
    pub r_step: f64,
    pub shaping: bool,
    /// Multiplier on the potential. Any positive value keeps the optimal
    /// policies of the unshaped task.
    pub potential_scale: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            r_correct: 1.0,
            r_wrong: -1.0,
            r_step: 0.0,
            shaping: true,
            potential_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub agent: Cell,
    pub plan: ExecutionPlan,
    pub progress: usize,
    pub steps: usize,
    pub max_steps: usize,
    pub status: Status,
}

impl EnvState {
    pub fn initial(
        layout: &GridLayout,
        plan: ExecutionPlan,
        max_steps: usize,
    ) -> Result<Self, EnvError> {
        if plan.is_empty() {
            return Err(EnvError::EmptyPlan);
        }
        Ok(Self {
            agent: layout.agent_start(),
            plan,
            progress: 0,
            steps: 0,
            max_steps,
            status: Status::Running,
        })
    }

    pub fn current_goal(&self) -> Option<Referent> {
        self.plan.order().get(self.progress).copied()
    }
}

/// One environment transition without shaping. Returns the next state and
/// the base reward.
pub fn transition(
    layout: &GridLayout,
    state: &EnvState,
    action: Action,
    rewards: &RewardConfig,
) -> Result<(EnvState, f64), EnvError> {
    if state.status.is_terminal() {
        return Err(EnvError::SteppedAfterDone(state.status));
    }
    let mut next = state.clone();
    next.agent = layout.neighbor(state.agent, action);
    next.steps += 1;
    let mut reward = rewards.r_step;
    if next.agent != state.agent {
        if let Some(obj) = layout.object_at(next.agent) {
            if Some(obj) == state.current_goal() {
                next.progress += 1;
                reward += rewards.r_correct;
                if next.progress == next.plan.len() {
                    next.status = Status::Success;
                }
            } else {
                reward += rewards.r_wrong;
                next.status = Status::Failure;
            }
        }
    }
    if next.status == Status::Running && next.steps >= next.max_steps {
        next.status = Status::Timeout;
    }
    Ok((next, reward))
}

/// Shortest 4-connected path length on the open grid.
pub fn bfs_distance(layout: &GridLayout, from: Cell, to: Cell) -> usize {
    bfs_path(layout, from, to, &[])
        .map(|p| p.len() - 1)
        .expect("open grid is connected")
}

/// Shortest path from `from` to `to` (both inclusive) that never enters a
/// `blocked` cell. Neighbours are expanded in [`Action::ALL`] order.
pub fn bfs_path(layout: &GridLayout, from: Cell, to: Cell, blocked: &[Cell]) -> Option<Vec<Cell>> {
    let idx = |c: Cell| c.1 * layout.width() + c.0;
    let mut parent: Vec<Option<Cell>> = vec![None; layout.width() * layout.height()];
    let mut seen = vec![false; parent.len()];
    let mut queue = VecDeque::from([from]);
    seen[idx(from)] = true;
    while let Some(c) = queue.pop_front() {
        if c == to {
            let mut path = vec![c];
            let mut cur = c;
            while let Some(p) = parent[idx(cur)] {
                path.push(p);
                cur = p;
            }
            path.reverse();
            return Some(path);
        }
        for a in Action::ALL {
            let n = layout.neighbor(c, a);
            if seen[idx(n)] || (n != to && blocked.contains(&n)) {
                continue;
            }
            seen[idx(n)] = true;
            parent[idx(n)] = Some(c);
            queue.push_back(n);
        }
    }
    None
}

/// Negative distance to the current sub-goal; zero once the episode is over.
pub fn potential(layout: &GridLayout, state: &EnvState) -> f64 {
    match (state.status, state.current_goal()) {
        (Status::Running, Some(goal)) => {
            -(bfs_distance(layout, state.agent, layout.object_cell(goal)) as f64)
        }
        _ => 0.0,
    }
}

pub fn shaped_reward(r_base: f64, phi_s: f64, phi_next: f64, gamma: f64) -> f64 {
    r_base + gamma * phi_next - phi_s
}

/// One-hot occupancy planes, stored as the hot cell of each plane in the
/// order agent, red, blue, green.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Observation {
    hot: [Cell; PLANES],
}

impl Observation {
    pub fn hot_cells(&self) -> &[Cell; PLANES] {
        &self.hot
    }

    pub fn value(&self, plane: usize, c: Cell) -> f64 {
        if self.hot[plane] == c {
            1.0
        } else {
            0.0
        }
    }

    /// Dense `(plane, y, x)` tensor.
    pub fn to_planes(&self, width: usize, height: usize) -> Vec<f64> {
        let mut out = vec![0.0; PLANES * width * height];
        for (p, c) in self.hot.iter().enumerate() {
            out[(p * height + c.1) * width + c.0] = 1.0;
        }
        out
    }
}

pub fn encode_observation(layout: &GridLayout, state: &EnvState) -> Observation {
    Observation {
        hot: [
            state.agent,
            layout.objects[0],
            layout.objects[1],
            layout.objects[2],
        ],
    }
}

/// The last [`STACK_LEN`] observations, oldest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameStack {
    frames: [Observation; STACK_LEN],
}

impl FrameStack {
    pub fn filled(obs: Observation) -> Self {
        Self {
            frames: [obs; STACK_LEN],
        }
    }

    pub fn frames(&self) -> &[Observation; STACK_LEN] {
        &self.frames
    }

    pub fn newest(&self) -> &Observation {
        &self.frames[STACK_LEN - 1]
    }

    /// Writes the stack as a dense `(y, x, channel)` array with
    /// `channel = frame * PLANES + plane`. `out` must hold
    /// `height * width * STACK_CHANNELS` values.
    pub fn write_input(&self, width: usize, height: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), width * height * STACK_CHANNELS);
        out.fill(0.0);
        for (f, obs) in self.frames.iter().enumerate() {
            for (p, c) in obs.hot.iter().enumerate() {
                out[(c.1 * width + c.0) * STACK_CHANNELS + f * PLANES + p] = 1.0;
            }
        }
    }

    pub fn to_input(&self, width: usize, height: usize) -> Vec<f64> {
        let mut out = vec![0.0; width * height * STACK_CHANNELS];
        self.write_input(width, height, &mut out);
        out
    }
}

pub fn push_frame(stack: &FrameStack, obs: Observation) -> FrameStack {
    let mut frames = stack.frames;
    frames.rotate_left(1);
    frames[STACK_LEN - 1] = obs;
    FrameStack { frames }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub base_reward: f64,
    pub done: bool,
    pub status: Status,
}

/// A simulator instance. Single-threaded; clone it to run episodes in parallel.
#[derive(Debug, Clone)]
pub struct GridWorld {
    layout: GridLayout,
    rewards: RewardConfig,
    state: Option<EnvState>,
    frames: Option<FrameStack>,
}

impl GridWorld {
    pub fn new(layout: GridLayout, rewards: RewardConfig) -> Self {
        Self {
            layout,
            rewards,
            state: None,
            frames: None,
        }
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    pub fn rewards(&self) -> &RewardConfig {
        &self.rewards
    }

    pub fn reset(
        &mut self,
        plan: ExecutionPlan,
        max_steps: usize,
    ) -> Result<(&EnvState, &FrameStack), EnvError> {
        let state = EnvState::initial(&self.layout, plan, max_steps)?;
        let frames = FrameStack::filled(encode_observation(&self.layout, &state));
        self.state = Some(state);
        self.frames = Some(frames);
        Ok((self.state.as_ref().unwrap(), self.frames.as_ref().unwrap()))
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    pub fn frames(&self) -> Option<&FrameStack> {
        self.frames.as_ref()
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome, EnvError> {
        let (state, frames) = match (&self.state, &self.frames) {
            (Some(s), Some(f)) => (s, f),
            _ => return Err(EnvError::NotReset),
        };
        let (next, base) = transition(&self.layout, state, action, &self.rewards)?;
        let reward = if self.rewards.shaping {
            shaped_reward(
                base,
                self.rewards.potential_scale * potential(&self.layout, state),
                self.rewards.potential_scale * potential(&self.layout, &next),
                self.rewards.gamma,
            )
        } else {
            base
        };
        let frames = push_frame(frames, encode_observation(&self.layout, &next));
        let outcome = StepOutcome {
            reward,
            base_reward: base,
            done: next.status.is_terminal(),
            status: next.status,
        };
        self.state = Some(next);
        self.frames = Some(frames);
        Ok(outcome)
    }
}

/// Text grid, top row is the largest `y`. `A` marks the agent (drawn over
/// an object it stands on), `R`/`B`/`G` the objects, `·` empty cells.
pub fn render_ascii(layout: &GridLayout, state: &EnvState) -> String {
    let mut out = String::with_capacity((layout.width() * 3 + 1) * layout.height());
    for y in (0..layout.height()).rev() {
        for x in 0..layout.width() {
            let c = Cell(x, y);
            let glyph = if c == state.agent {
                'A'
            } else {
                match layout.object_at(c) {
                    Some(Referent::Red) => 'R',
                    Some(Referent::Blue) => 'B',
                    Some(Referent::Green) => 'G',
                    None => '·',
                }
            };
            out.push(glyph);
        }
        out.push('\n');
    }
    out
}

/// One line of an episode trace log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub step: usize,
    pub action: Action,
    pub agent: Cell,
    pub progress: usize,
    pub r_base: f64,
    pub r_shaped: f64,
    pub status: Status,
}
