//! Desk-scale environments: a continuous point maze with sparse goal reward
//! and a dense-reward 1-D chain for smoke tests.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DdsError, Result};

pub const MEDIUM_MAZE: &str = include_str!("../mazes/medium-maze.txt");
pub const OPEN_MAZE: &str = include_str!("../mazes/open-maze.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    SparseGoal,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub dim_s: usize,
    pub dim_a: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_steps: usize,
    pub reward: RewardKind,
}

impl EnvSpec {
    pub fn clamp_action(&self, action: &[f64]) -> (Vec<f64>, bool) {
        let mut clamped = false;
        let out = action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| {
                let c = if a.is_nan() { 0.0 } else { a.clamp(lo, hi) };
                clamped |= c != a;
                c
            })
            .collect();
        (out, clamped)
    }
}

/// Mutable part of an environment rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub obs: Vec<f64>,
    pub t: usize,
    pub done: bool,
    /// Number of actions that had to be clamped into the action box.
    pub clamped_actions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// Done because the task was solved (as opposed to hitting the time limit).
    pub terminal: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn center(self) -> [f64; 2] {
        [self.col as f64 + 0.5, self.row as f64 + 0.5]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// Wall grid parsed from ASCII: `#` wall, `.` free, `S` start, `G` goal.
#[derive(Clone, Debug, PartialEq)]
pub struct MazeLayout {
    pub rows: usize,
    pub cols: usize,
    walls: Vec<bool>,
    pub start: Cell,
    pub goal: Cell,
}

impl FromStr for MazeLayout {
    type Err = DdsError;

    fn from_str(s: &str) -> Result<Self> {
        let lines: Vec<&str> = s.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let bad = |m: String| DdsError::Config(format!("maze layout: {m}"));
        let cols = lines.first().map(|l| l.chars().count()).ok_or_else(|| bad("empty".into()))?;
        let (mut start, mut goal) = (None, None);
        let mut walls = Vec::with_capacity(lines.len() * cols);
        for (r, line) in lines.iter().enumerate() {
            if line.chars().count() != cols {
                return Err(bad(format!("row {r} has {} columns, expected {cols}", line.chars().count())));
            }
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    'S' => {
                        start = Some(Cell::new(r, c));
                        walls.push(false);
                    }
                    'G' => {
                        goal = Some(Cell::new(r, c));
                        walls.push(false);
                    }
                    other => return Err(bad(format!("unexpected character {other:?} at ({r}, {c})"))),
                }
            }
        }
        let layout = Self {
            rows: lines.len(),
            cols,
            walls,
            start: start.ok_or_else(|| bad("no start cell 'S'".into()))?,
            goal: goal.ok_or_else(|| bad("no goal cell 'G'".into()))?,
        };
        for r in 0..layout.rows {
            for c in 0..layout.cols {
                let border = r == 0 || c == 0 || r + 1 == layout.rows || c + 1 == layout.cols;
                if border && !layout.is_wall(r as isize, c as isize) {
                    return Err(bad(format!("border cell ({r}, {c}) must be a wall")));
                }
            }
        }
        if layout.distances_from(layout.goal)[layout.index(layout.start)].is_none() {
            return Err(bad("goal is unreachable from start".into()));
        }
        Ok(layout)
    }
}

impl MazeLayout {
    fn index(&self, c: Cell) -> usize {
        c.row * self.cols + c.col
    }

    pub fn is_wall(&self, row: isize, col: isize) -> bool {
        if row < 0 || col < 0 || row as usize >= self.rows || col as usize >= self.cols {
            return true;
        }
        self.walls[row as usize * self.cols + col as usize]
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| Cell::new(r, c)))
            .filter(|c| !self.is_wall(c.row as isize, c.col as isize))
            .collect()
    }

    pub fn neighbors(&self, c: Cell) -> Vec<Cell> {
        let mut out = Vec::with_capacity(4);
        for (dr, dc) in [(-1isize, 0isize), (0, 1), (1, 0), (0, -1)] {
            let (r, cc) = (c.row as isize + dr, c.col as isize + dc);
            if !self.is_wall(r, cc) {
                out.push(Cell::new(r as usize, cc as usize));
            }
        }
        out
    }

    /// Breadth-first cell distances from `from` (None = unreachable or wall).
    pub fn distances_from(&self, from: Cell) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.rows * self.cols];
        dist[self.index(from)] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(u) = queue.pop_front() {
            let du = dist[self.index(u)].unwrap();
            for v in self.neighbors(u) {
                if dist[self.index(v)].is_none() {
                    dist[self.index(v)] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn distance(&self, from: Cell, to: Cell) -> Option<usize> {
        self.distances_from(to)[self.index(from)]
    }

    /// Shortest cell path from `from` to `to`, both inclusive.
    pub fn shortest_path(&self, from: Cell, to: Cell) -> Option<Vec<Cell>> {
        let dist = self.distances_from(to);
        let mut cur = from;
        let mut d = dist[self.index(cur)]?;
        let mut path = vec![cur];
        while d > 0 {
            cur = self.neighbors(cur).into_iter().find(|n| dist[self.index(*n)] == Some(d - 1))?;
            d -= 1;
            path.push(cur);
        }
        Some(path)
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Cell {
        Cell::new(y.floor().max(0.0) as usize, x.floor().max(0.0) as usize)
    }
}

/// Double-integrator point agent in a wall grid (one cell = one length unit).
///
/// State is `(x, y, vx, vy)`; actions are accelerations in `[-1, 1]^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMaze {
    pub layout: MazeLayout,
    pub spec: EnvSpec,
    pub damping: f64,
    pub accel: f64,
    pub radius: f64,
}

impl PointMaze {
    pub fn new(name: &str, layout: MazeLayout, max_steps: usize) -> Self {
        let spec = EnvSpec {
            name: name.into(),
            dim_s: 4,
            dim_a: 2,
            action_low: vec![-1.0; 2],
            action_high: vec![1.0; 2],
            max_steps,
            reward: RewardKind::SparseGoal,
        };
        Self { layout, spec, damping: 0.75, accel: 0.05, radius: 0.1 }
    }

    pub fn medium() -> Self {
        Self::new("medium-maze", MEDIUM_MAZE.parse().expect("bundled layout parses"), 300)
    }

    pub fn open() -> Self {
        Self::new("open-maze", OPEN_MAZE.parse().expect("bundled layout parses"), 200)
    }

    /// Steady-state speed under a constant unit acceleration.
    pub fn max_speed(&self) -> f64 {
        self.accel / (1.0 - self.damping)
    }

    pub fn reset_at(&self, cell: Cell) -> EnvState {
        let [x, y] = cell.center();
        EnvState { obs: vec![x, y, 0.0, 0.0], t: 0, done: false, clamped_actions: 0 }
    }

    /// True if the agent disc centered at `(x, y)` overlaps a wall cell.
    fn blocked(&self, x: f64, y: f64) -> bool {
        // touching a wall face is not an overlap
        const EPS: f64 = 1e-9;
        let r = self.radius;
        let (c0, c1) = ((x - r + EPS).floor() as isize, (x + r - EPS).floor() as isize);
        let (r0, r1) = ((y - r + EPS).floor() as isize, (y + r - EPS).floor() as isize);
        (r0..=r1).any(|row| (c0..=c1).any(|col| self.layout.is_wall(row, col)))
    }

    fn step_impl(&self, state: &mut EnvState, action: &[f64]) -> (f64, bool) {
        let [x, y, vx, vy] = [state.obs[0], state.obs[1], state.obs[2], state.obs[3]];
        let mut nvx = self.damping * vx + self.accel * action[0];
        let mut nvy = self.damping * vy + self.accel * action[1];
        let r = self.radius;
        const EPS: f64 = 1e-9;
        // axis-separated moves; a blocked move stops at the wall face
        let mut nx = x + nvx;
        if self.blocked(nx, y) {
            nx = if nvx > 0.0 { (x + r - EPS).floor() + 1.0 - r } else { (x - r + EPS).floor() + r };
            nvx = 0.0;
        }
        let mut ny = y + nvy;
        if self.blocked(nx, ny) {
            ny = if nvy > 0.0 { (y + r - EPS).floor() + 1.0 - r } else { (y - r + EPS).floor() + r };
            nvy = 0.0;
        }
        state.obs = vec![nx, ny, nvx, nvy];
        let reached = self.layout.cell_of(nx, ny) == self.layout.goal;
        (if reached { 1.0 } else { 0.0 }, reached)
    }
}

/// Dense-reward 1-D chain: position in `[0, length]`, velocity command in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    pub spec: EnvSpec,
    pub length: f64,
    pub speed: f64,
    pub goal: f64,
}

impl Chain {
    pub fn new(max_steps: usize) -> Self {
        let spec = EnvSpec {
            name: "chain".into(),
            dim_s: 1,
            dim_a: 1,
            action_low: vec![-1.0],
            action_high: vec![1.0],
            max_steps,
            reward: RewardKind::Dense,
        };
        Self { spec, length: 10.0, speed: 0.25, goal: 9.5 }
    }

    pub fn reset_at(&self, x: f64) -> EnvState {
        EnvState { obs: vec![x.clamp(0.0, self.length)], t: 0, done: false, clamped_actions: 0 }
    }

    fn step_impl(&self, state: &mut EnvState, action: &[f64]) -> (f64, bool) {
        let x = (state.obs[0] + self.speed * action[0]).clamp(0.0, self.length);
        state.obs = vec![x];
        let reached = x >= self.goal;
        let reward = if reached { 1.0 } else { -(self.goal - x).abs() / self.length * 0.1 };
        (reward, reached)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Env {
    Maze(PointMaze),
    Chain(Chain),
}

impl Env {
    /// Bundled environments: `medium-maze`, `open-maze`, `chain`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "medium-maze" => Ok(Env::Maze(PointMaze::medium())),
            "open-maze" => Ok(Env::Maze(PointMaze::open())),
            "chain" => Ok(Env::Chain(Chain::new(60))),
            other => Err(DdsError::Config(format!("unknown environment `{other}`"))),
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        match self {
            Env::Maze(m) => &m.spec,
            Env::Chain(c) => &c.spec,
        }
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        match &mut self {
            Env::Maze(m) => m.spec.max_steps = max_steps,
            Env::Chain(c) => c.spec.max_steps = max_steps,
        }
        self
    }

    /// Evaluation start state.
    pub fn reset(&self) -> EnvState {
        match self {
            Env::Maze(m) => m.reset_at(m.layout.start),
            Env::Chain(c) => c.reset_at(0.5),
        }
    }

    pub fn reset_to(&self, obs: &[f64]) -> Result<EnvState> {
        if obs.len() != self.spec().dim_s {
            return Err(DdsError::Env(format!("state has {} dims, env expects {}", obs.len(), self.spec().dim_s)));
        }
        Ok(EnvState { obs: obs.to_vec(), t: 0, done: false, clamped_actions: 0 })
    }

    /// Advances one step. Out-of-box actions are clamped and counted.
    pub fn step(&self, state: &mut EnvState, action: &[f64]) -> Result<StepResult> {
        let spec = self.spec();
        if state.done {
            return Err(DdsError::Env("step called on a finished episode".into()));
        }
        if action.len() != spec.dim_a {
            return Err(DdsError::Env(format!("action has {} dims, env expects {}", action.len(), spec.dim_a)));
        }
        let (action, clamped) = spec.clamp_action(action);
        if clamped {
            state.clamped_actions += 1;
        }
        let (reward, terminal) = match self {
            Env::Maze(m) => m.step_impl(state, &action),
            Env::Chain(c) => c.step_impl(state, &action),
        };
        state.t += 1;
        state.done = terminal || state.t >= spec.max_steps;
        Ok(StepResult { obs: state.obs.clone(), reward, done: state.done, terminal })
    }

    pub fn maze(&self) -> Option<&PointMaze> {
        match self {
            Env::Maze(m) => Some(m),
            Env::Chain(_) => None,
        }
    }
}
