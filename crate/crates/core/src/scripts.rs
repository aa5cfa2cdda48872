//! Scripted data-collection controllers.
//!
//! Maze scripts are waypoint followers over the cell graph with Gaussian
//! action noise. Episodes are short relative to the start-to-goal distance, so
//! reaching the goal from the evaluation start requires stitching segments of
//! different episodes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use dds_autodiff::rng::{normal, SeedStreams};

use crate::dataset::{Episode, OfflineDataset};
use crate::env::{Cell, Env, EnvState, PointMaze};
use crate::error::{DdsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Script {
    /// Random walk over neighbouring cells, never turning back unless forced.
    Wander,
    /// Shortest cell paths toward randomly drawn destination cells; the goal
    /// is drawn with probability `goal_bias`.
    Destination,
    /// Chain: constant command of -0.5.
    ChainLeft,
    /// Chain: constant command of +0.5.
    ChainRight,
}

impl Script {
    pub fn name(self) -> &'static str {
        match self {
            Script::Wander => "wander",
            Script::Destination => "destination",
            Script::ChainLeft => "chain-left",
            Script::ChainRight => "chain-right",
        }
    }

    fn for_maze(self) -> bool {
        matches!(self, Script::Wander | Script::Destination)
    }
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Script {
    type Err = DdsError;

    fn from_str(s: &str) -> Result<Self> {
        [Script::Wander, Script::Destination, Script::ChainLeft, Script::ChainRight]
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| DdsError::Config(format!("unknown script `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataGenConfig {
    pub episodes: usize,
    pub episode_len: usize,
    /// Cruise speed of the waypoint follower (cells per step).
    pub speed: f64,
    pub action_noise: f64,
    /// Probability that a destination script heads for the goal cell.
    pub goal_bias: f64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self { episodes: 600, episode_len: 60, speed: 0.12, action_noise: 0.1, goal_bias: 0.2 }
    }
}

/// Velocity-tracking waypoint follower for the point maze.
struct Follower {
    waypoint: Cell,
    previous: Cell,
    destination: Cell,
}

impl Follower {
    fn action(&self, maze: &PointMaze, obs: &[f64], speed: f64) -> [f64; 2] {
        let [wx, wy] = self.waypoint.center();
        let (dx, dy) = (wx - obs[0], wy - obs[1]);
        let dist = (dx * dx + dy * dy).sqrt();
        let scale = if dist > speed { speed / dist } else { 1.0 };
        let (tvx, tvy) = (dx * scale, dy * scale);
        let ax = (tvx - maze.damping * obs[2]) / maze.accel;
        let ay = (tvy - maze.damping * obs[3]) / maze.accel;
        [ax.clamp(-1.0, 1.0), ay.clamp(-1.0, 1.0)]
    }

    fn reached(&self, obs: &[f64]) -> bool {
        let [wx, wy] = self.waypoint.center();
        ((wx - obs[0]).powi(2) + (wy - obs[1]).powi(2)).sqrt() < 0.2
    }
}

fn draw_destination<R: Rng + ?Sized>(maze: &PointMaze, at: Cell, goal_bias: f64, rng: &mut R) -> Cell {
    if rng.random::<f64>() < goal_bias && at != maze.layout.goal {
        return maze.layout.goal;
    }
    let cells: Vec<Cell> = maze.layout.free_cells().into_iter().filter(|&c| c != at).collect();
    cells[rng.random_range(0..cells.len())]
}

fn next_waypoint<R: Rng + ?Sized>(maze: &PointMaze, script: Script, f: &mut Follower, at: Cell, cfg: &DataGenConfig, rng: &mut R) -> Cell {
    match script {
        Script::Destination => {
            if at == f.destination {
                f.destination = draw_destination(maze, at, cfg.goal_bias, rng);
            }
            maze.layout.shortest_path(at, f.destination).and_then(|p| p.get(1).copied()).unwrap_or(at)
        }
        _ => {
            let previous = f.previous;
            let nb = maze.layout.neighbors(at);
            let forward: Vec<Cell> = nb.iter().copied().filter(|&c| c != previous).collect();
            let options = if forward.is_empty() { nb } else { forward };
            if options.is_empty() {
                at
            } else {
                options[rng.random_range(0..options.len())]
            }
        }
    }
}

/// Rounds to the nearest `f32` so that what is stored on disk is exactly
/// what the environment consumed.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

fn rollout_maze<R: Rng + ?Sized>(maze: &PointMaze, env: &Env, script: Script, start: Cell, cfg: &DataGenConfig, rng: &mut R) -> Result<Episode> {
    let mut state: EnvState = maze.reset_at(start);
    let destination = draw_destination(maze, start, cfg.goal_bias, rng);
    let mut follower = Follower { waypoint: start, previous: start, destination };
    follower.waypoint = next_waypoint(maze, script, &mut follower, start, cfg, rng);
    let mut ep = empty_episode(maze.spec.dim_s, maze.spec.dim_a, script);
    while !state.done {
        if follower.reached(&state.obs) {
            let at = follower.waypoint;
            let nxt = next_waypoint(maze, script, &mut follower, at, cfg, rng);
            follower.previous = at;
            follower.waypoint = nxt;
        }
        let base = follower.action(maze, &state.obs, cfg.speed);
        let action: Vec<f64> =
            base.iter().map(|a| f32_exact((a + cfg.action_noise * normal(rng)).clamp(-1.0, 1.0))).collect();
        ep.states.extend(state.obs.iter().copied().map(f32_exact));
        let step = env.step(&mut state, &action)?;
        ep.actions.extend(action);
        ep.rewards.push(f32_exact(step.reward));
        ep.terminals.push(step.terminal);
    }
    ep.final_state = state.obs.iter().copied().map(f32_exact).collect();
    Ok(ep)
}

fn rollout_chain<R: Rng + ?Sized>(env: &Env, x0: f64, command: f64, cfg: &DataGenConfig, rng: &mut R) -> Result<Episode> {
    let Env::Chain(chain) = env else { unreachable!("chain rollout on non-chain env") };
    let mut state = chain.reset_at(x0);
    let script = if command < 0.0 { Script::ChainLeft } else { Script::ChainRight };
    let mut ep = empty_episode(1, 1, script);
    while !state.done {
        let a = f32_exact((command + cfg.action_noise * normal(rng)).clamp(-1.0, 1.0));
        ep.states.extend(state.obs.iter().copied().map(f32_exact));
        let step = env.step(&mut state, &[a])?;
        ep.actions.push(a);
        ep.rewards.push(f32_exact(step.reward));
        ep.terminals.push(step.terminal);
    }
    ep.final_state = state.obs.iter().copied().map(f32_exact).collect();
    Ok(ep)
}

fn empty_episode(dim_s: usize, dim_a: usize, script: Script) -> Episode {
    Episode {
        dim_s,
        dim_a,
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        terminals: Vec::new(),
        final_state: Vec::new(),
        seed: 0,
        script: script.name().into(),
    }
}

/// Generates `cfg.episodes` scripted episodes; episode `i` runs `scripts[i % len]`.
pub fn generate_dataset(env: &Env, scripts: &[Script], cfg: &DataGenConfig, seed: u64) -> Result<OfflineDataset> {
    if scripts.is_empty() || cfg.episodes == 0 || cfg.episode_len == 0 {
        return Err(DdsError::Config("need at least one script, episode and step".into()));
    }
    let is_maze = env.maze().is_some();
    if let Some(bad) = scripts.iter().find(|s| s.for_maze() != is_maze) {
        return Err(DdsError::Config(format!("script `{bad}` does not apply to env `{}`", env.spec().name)));
    }
    let data_env = env.clone().with_max_steps(cfg.episode_len);
    let streams = SeedStreams::new(seed);
    let mut episodes = Vec::with_capacity(cfg.episodes);
    for i in 0..cfg.episodes {
        let ep_seed = streams.stream_seed("episode") ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut rng = streams.indexed("episode", i as u64);
        let script = scripts[i % scripts.len()];
        let mut ep = match &data_env {
            Env::Maze(maze) => {
                let starts: Vec<Cell> = maze.layout.free_cells().into_iter().filter(|&c| c != maze.layout.goal).collect();
                let start = starts[rng.random_range(0..starts.len())];
                rollout_maze(maze, &data_env, script, start, cfg, &mut rng)?
            }
            Env::Chain(chain) => {
                let x0 = f32_exact(rng.random_range(0.0..chain.length));
                let command = if script == Script::ChainLeft { -0.5 } else { 0.5 };
                rollout_chain(&data_env, x0, command, cfg, &mut rng)?
            }
        };
        ep.seed = ep_seed;
        episodes.push(ep);
    }
    Ok(OfflineDataset { env: env.spec().clone(), episodes, creation_seed: seed })
}

/// Replays recorded actions from each episode's first state and returns the
/// rewards the environment produces, rounded to storage precision like the
/// recorded ones.
pub fn replay_rewards(env: &Env, episode: &Episode) -> Result<Vec<f64>> {
    let env = env.clone().with_max_steps(episode.len());
    let mut state = env.reset_to(episode.state(0))?;
    (0..episode.len()).map(|i| env.step(&mut state, episode.action(i)).map(|s| f32_exact(s.reward))).collect()
}

/// Episodes that start in the evaluation start cell and reach the goal.
pub fn goal_reaching_from_start(env: &Env, dataset: &OfflineDataset) -> (usize, usize) {
    let Some(maze) = env.maze() else { return (0, 0) };
    let from_start: Vec<&Episode> = dataset
        .episodes
        .iter()
        .filter(|e| maze.layout.cell_of(e.state(0)[0], e.state(0)[1]) == maze.layout.start)
        .collect();
    (from_start.iter().filter(|e| e.is_terminal()).count(), from_start.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DataGenConfig {
        DataGenConfig { episodes: 40, ..DataGenConfig::default() }
    }

    #[test]
    fn script_env_mismatch_is_rejected() {
        let env = Env::by_name("chain").unwrap();
        assert!(generate_dataset(&env, &[Script::Wander], &small_cfg(), 0).is_err());
        let maze = Env::by_name("medium-maze").unwrap();
        assert!(generate_dataset(&maze, &[Script::ChainLeft], &small_cfg(), 0).is_err());
    }

    #[test]
    fn replay_reproduces_rewards_exactly() {
        let env = Env::by_name("medium-maze").unwrap();
        let ds = generate_dataset(&env, &[Script::Wander, Script::Destination], &small_cfg(), 3).unwrap();
        ds.validate().unwrap();
        for ep in &ds.episodes {
            assert_eq!(replay_rewards(&env, ep).unwrap(), ep.rewards);
            assert!(ep.actions.iter().all(|a| (-1.0..=1.0).contains(a)));
        }
        assert!(ds.episodes.iter().any(|e| e.is_terminal()), "some destination episodes should reach the goal");
    }

    #[test]
    fn generation_is_deterministic() {
        let env = Env::by_name("medium-maze").unwrap();
        let a = generate_dataset(&env, &[Script::Wander, Script::Destination], &small_cfg(), 11).unwrap();
        let b = generate_dataset(&env, &[Script::Wander, Script::Destination], &small_cfg(), 11).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&env, &[Script::Wander, Script::Destination], &small_cfg(), 12).unwrap();
        assert_ne!(a, c);
    }
}
