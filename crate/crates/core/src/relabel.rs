//! Relabeling of raw episodes into skill-level transitions.

use serde::{Deserialize, Serialize};

use crate::dataset::{split_windows, OfflineDataset, TrajectoryWindow};
use crate::env::EnvSpec;
use crate::error::{config_err, data_err, Result};
use crate::skill::SkillModel;

/// One high-level transition: the window's first state, the inferred skill,
/// the discounted window reward and the state after the window.
#[derive(Clone, Debug, PartialEq)]
pub struct RelabeledTransition {
    pub state: Vec<f64>,
    pub skill_index: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    pub gamma_used: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelabeledDataset {
    pub env: EnvSpec,
    pub horizon: usize,
    pub gamma: f64,
    pub num_skills: usize,
    /// Fingerprint of the skill checkpoint that produced the indices.
    pub fingerprint: String,
    pub transitions: Vec<RelabeledTransition>,
}

impl RelabeledDataset {
    pub fn dim_s(&self) -> usize {
        self.env.dim_s
    }

    pub fn validate(&self) -> Result<()> {
        if self.transitions.is_empty() {
            return Err(data_err("relabeled dataset is empty"));
        }
        for (i, t) in self.transitions.iter().enumerate() {
            if t.skill_index >= self.num_skills {
                return Err(data_err(format!("transition {i}: skill {} outside [0, {})", t.skill_index, self.num_skills)));
            }
            if t.state.len() != self.dim_s() || t.next_state.len() != self.dim_s() {
                return Err(data_err(format!("transition {i}: state dims do not match env")));
            }
            if !t.reward.is_finite() {
                return Err(data_err(format!("transition {i}: non-finite reward")));
            }
        }
        Ok(())
    }

    /// Per-skill transition counts.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_skills];
        for t in &self.transitions {
            h[t.skill_index] += 1;
        }
        h
    }
}

/// How windows that would cross the end of a goal-reaching episode are handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalPolicy {
    /// Plain non-overlapping windows; a short terminal remainder is dropped.
    #[default]
    Discard,
    /// Additionally emit the last `H` steps of a terminal episode as a window
    /// when the partition would drop the terminal step.
    AlignTail,
}

/// Windows used for relabeling: the plain partition, plus the terminal tail
/// under [`TerminalPolicy::AlignTail`].
pub fn relabel_windows(dataset: &OfflineDataset, horizon: usize, policy: TerminalPolicy) -> Vec<TrajectoryWindow> {
    let mut out = Vec::new();
    for (i, e) in dataset.episodes.iter().enumerate() {
        out.extend(split_windows(e, i, horizon));
        let dropped = e.len() % horizon != 0;
        if policy == TerminalPolicy::AlignTail && dropped && e.is_terminal() && e.len() >= horizon {
            out.extend(TrajectoryWindow::from_episode(e, i, e.len() - horizon, horizon));
        }
    }
    out
}

/// Turns every window into one [`RelabeledTransition`] using the skill model
/// in eval mode.
pub fn relabel(
    dataset: &OfflineDataset,
    model: &SkillModel,
    horizon: usize,
    gamma: f64,
    policy: TerminalPolicy,
) -> Result<RelabeledDataset> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(config_err(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    if horizon != model.config.horizon {
        return Err(config_err(format!("horizon {horizon} does not match skill checkpoint horizon {}", model.config.horizon)));
    }
    if dataset.env.dim_s != model.config.dim_s || dataset.env.dim_a != model.config.dim_a {
        return Err(config_err("dataset dimensions do not match the skill checkpoint"));
    }
    let windows = relabel_windows(dataset, horizon, policy);
    if windows.is_empty() {
        return Err(data_err(format!("no episode has at least {horizon} steps")));
    }
    let indices = model.skill_indices(&windows)?;
    let transitions = windows
        .iter()
        .zip(indices)
        .map(|(w, k)| RelabeledTransition {
            state: w.state(0).to_vec(),
            skill_index: k,
            reward: w.discounted_reward(gamma),
            next_state: w.next_state.clone(),
            terminal: w.terminal,
            gamma_used: gamma,
        })
        .collect();
    Ok(RelabeledDataset {
        env: dataset.env.clone(),
        horizon,
        gamma,
        num_skills: model.config.num_skills,
        fingerprint: model.fingerprint(),
        transitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::ramp_episode;
    use crate::env::Env;

    fn ds(episodes: Vec<crate::dataset::Episode>) -> OfflineDataset {
        let mut env = Env::by_name("chain").unwrap().spec().clone();
        env.dim_s = 2;
        OfflineDataset { env, episodes, creation_seed: 0 }
    }

    #[test]
    fn align_tail_adds_the_terminal_window_only() {
        let d = ds(vec![ramp_episode(25, true), ramp_episode(25, false), ramp_episode(20, true)]);
        assert_eq!(relabel_windows(&d, 10, TerminalPolicy::Discard).len(), 6);
        let aligned = relabel_windows(&d, 10, TerminalPolicy::AlignTail);
        assert_eq!(aligned.len(), 7);
        let tail = aligned.iter().find(|w| w.episode_id == 0 && w.start_index == 15).unwrap();
        assert!(tail.terminal);
    }
}
