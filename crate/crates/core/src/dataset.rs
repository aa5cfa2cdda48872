//! In-memory offline datasets, normalization statistics and fixed-length windows.

use serde::{Deserialize, Serialize};

use crate::env::EnvSpec;
use crate::error::{data_err, Result};

/// One recorded episode. Per-step arrays have equal length; `final_state` is
/// the observation after the last action.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub dim_s: usize,
    pub dim_a: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    pub final_state: Vec<f64>,
    pub seed: u64,
    pub script: String,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim_s..(i + 1) * self.dim_s]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.dim_a..(i + 1) * self.dim_a]
    }

    /// Observation reached after step `i`.
    pub fn next_state(&self, i: usize) -> &[f64] {
        if i + 1 < self.len() {
            self.state(i + 1)
        } else {
            &self.final_state
        }
    }

    /// True if the episode ended by solving the task.
    pub fn is_terminal(&self) -> bool {
        self.terminals.last().copied().unwrap_or(false)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(data_err("episode has no steps"));
        }
        if self.states.len() != n * self.dim_s
            || self.actions.len() != n * self.dim_a
            || self.terminals.len() != n
            || self.final_state.len() != self.dim_s
        {
            return Err(data_err("episode arrays have inconsistent lengths"));
        }
        if self.terminals[..n - 1].iter().any(|&t| t) {
            return Err(data_err("terminal flag before the last step"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

fn mean_std(rows: impl Iterator<Item = Vec<f64>>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for r in rows {
        n += 1;
        for j in 0..dim {
            sum[j] += r[j];
            sq[j] += r[j] * r[j];
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let v = (q / n - m * m).max(0.0).sqrt();
            if v < 1e-6 { 1.0 } else { v }
        })
        .collect();
    (mean, std)
}

impl NormStats {
    pub fn identity(dim_s: usize, dim_a: usize) -> Self {
        Self {
            state_mean: vec![0.0; dim_s],
            state_std: vec![1.0; dim_s],
            action_mean: vec![0.0; dim_a],
            action_std: vec![1.0; dim_a],
        }
    }

    pub fn from_episodes(episodes: &[Episode]) -> Self {
        let (ds, da) = episodes.first().map_or((0, 0), |e| (e.dim_s, e.dim_a));
        let states = episodes.iter().flat_map(|e| (0..e.len()).map(move |i| e.state(i).to_vec()));
        let actions = episodes.iter().flat_map(|e| (0..e.len()).map(move |i| e.action(i).to_vec()));
        let (state_mean, state_std) = mean_std(states, ds);
        let (action_mean, action_std) = mean_std(actions, da);
        Self { state_mean, state_std, action_mean, action_std }
    }

    pub fn norm_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.state_mean).zip(&self.state_std).map(|((v, m), sd)| (v - m) / sd).collect()
    }

    pub fn norm_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(&self.action_mean).zip(&self.action_std).map(|((v, m), sd)| (v - m) / sd).collect()
    }

    pub fn denorm_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(&self.action_mean).zip(&self.action_std).map(|((v, m), sd)| v * sd + m).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub env: EnvSpec,
    pub episodes: Vec<Episode>,
    pub creation_seed: u64,
}

impl OfflineDataset {
    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes.is_empty() {
            return Err(data_err("dataset has no episodes"));
        }
        for (i, e) in self.episodes.iter().enumerate() {
            if e.dim_s != self.env.dim_s || e.dim_a != self.env.dim_a {
                return Err(data_err(format!("episode {i} dims ({}, {}) do not match env", e.dim_s, e.dim_a)));
            }
            e.validate().map_err(|err| data_err(format!("episode {i}: {err}")))?;
        }
        Ok(())
    }

    pub fn norm_stats(&self) -> NormStats {
        NormStats::from_episodes(&self.episodes)
    }

    /// All non-overlapping windows of every episode, in episode order.
    pub fn windows(&self, horizon: usize) -> Vec<TrajectoryWindow> {
        self.episodes.iter().enumerate().flat_map(|(i, e)| split_windows(e, i, horizon)).collect()
    }
}

/// `H` consecutive steps of one episode, the unit of skill learning.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryWindow {
    pub horizon: usize,
    pub dim_s: usize,
    pub dim_a: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Observation after the window's last action.
    pub next_state: Vec<f64>,
    /// The window's last step ended the episode by solving the task.
    pub terminal: bool,
    pub episode_id: usize,
    pub start_index: usize,
}

impl TrajectoryWindow {
    pub fn from_episode(episode: &Episode, episode_id: usize, start: usize, horizon: usize) -> Option<Self> {
        if horizon == 0 || start + horizon > episode.len() {
            return None;
        }
        let (ds, da) = (episode.dim_s, episode.dim_a);
        let end = start + horizon;
        Some(Self {
            horizon,
            dim_s: ds,
            dim_a: da,
            states: episode.states[start * ds..end * ds].to_vec(),
            actions: episode.actions[start * da..end * da].to_vec(),
            rewards: episode.rewards[start..end].to_vec(),
            next_state: episode.next_state(end - 1).to_vec(),
            terminal: episode.terminals[end - 1],
            episode_id,
            start_index: start,
        })
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim_s..(i + 1) * self.dim_s]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.dim_a..(i + 1) * self.dim_a]
    }

    /// `sum_i gamma^(i-1) r_i` over the window.
    pub fn discounted_reward(&self, gamma: f64) -> f64 {
        self.rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
    }
}

/// Non-overlapping windows at offsets `0, H, 2H, ..`; a trailing remainder
/// shorter than `H` is dropped.
pub fn split_windows(episode: &Episode, episode_id: usize, horizon: usize) -> Vec<TrajectoryWindow> {
    if horizon == 0 {
        return Vec::new();
    }
    (0..episode.len() / horizon)
        .filter_map(|w| TrajectoryWindow::from_episode(episode, episode_id, w * horizon, horizon))
        .collect()
}
