#![allow(dead_code)]

use dds_autodiff::rng::normal;
use dds_autodiff::{SeedStreams, StreamRng};
use dds_core::dataset::{Episode, NormStats, OfflineDataset, TrajectoryWindow};
use dds_core::diffusion::NoiseNetConfig;
use dds_core::env::{EnvSpec, RewardKind};
use dds_core::skill::{EncoderConfig, SkillConfig, SkillModel};
use rand::Rng;

pub fn rng(seed: u64) -> StreamRng {
    SeedStreams::new(seed).stream("test")
}

pub fn spec(dim_s: usize, dim_a: usize) -> EnvSpec {
    EnvSpec {
        name: "synthetic".into(),
        dim_s,
        dim_a,
        action_low: vec![-1.0; dim_a],
        action_high: vec![1.0; dim_a],
        max_steps: 1000,
        reward: RewardKind::Dense,
    }
}

/// Random episode; rewards are 0/1 and states are f32-representable.
pub fn random_episode(rng: &mut StreamRng, len: usize, dim_s: usize, dim_a: usize, terminal: bool) -> Episode {
    let f = |v: f64| v as f32 as f64;
    let mut terminals = vec![false; len];
    if terminal && len > 0 {
        terminals[len - 1] = true;
    }
    Episode {
        dim_s,
        dim_a,
        states: (0..len * dim_s).map(|_| f(normal(rng))).collect(),
        actions: (0..len * dim_a).map(|_| f(rng.random_range(-1.0..1.0))).collect(),
        rewards: (0..len).map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect(),
        terminals,
        final_state: (0..dim_s).map(|_| f(normal(rng))).collect(),
        seed: rng.random(),
        script: "random".into(),
    }
}

pub fn random_dataset(seed: u64, episodes: usize, len: usize, dim_s: usize, dim_a: usize) -> OfflineDataset {
    let mut r = rng(seed);
    let episodes = (0..episodes).map(|i| random_episode(&mut r, len + i % 3, dim_s, dim_a, i % 4 == 0)).collect();
    OfflineDataset { env: spec(dim_s, dim_a), episodes, creation_seed: seed }
}

pub fn random_windows(seed: u64, n: usize, horizon: usize, dim_s: usize, dim_a: usize) -> Vec<TrajectoryWindow> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let ep = random_episode(&mut r, horizon, dim_s, dim_a, false);
            TrajectoryWindow::from_episode(&ep, i, 0, horizon).unwrap()
        })
        .collect()
}

pub fn tiny_config(dim_s: usize, dim_a: usize, horizon: usize, num_skills: usize, dim_z: usize) -> SkillConfig {
    SkillConfig {
        dim_s,
        dim_a,
        action_low: vec![-1.0; dim_a],
        action_high: vec![1.0; dim_a],
        horizon,
        num_skills,
        dim_z,
        encoder: EncoderConfig { layers: 2, heads: 2, hidden: 8, dropout: 0.0 },
        decoder: NoiseNetConfig { hidden: 8, time_dim: 4, blocks: 1, dropout: 0.0 },
        diffusion_steps: 5,
        beta_min: 0.1,
        beta_max: 10.0,
        beta: 0.25,
    }
}

pub fn tiny_model(seed: u64) -> SkillModel {
    SkillModel::new(tiny_config(3, 2, 4, 5, 6), NormStats::identity(3, 2), &mut rng(seed)).unwrap()
}

/// Condition value and the action mode it selects, for the sampler fidelity check.
pub const TWO_MODES: [(f64, f64); 2] = [(-1.0, -0.5), (1.0, 0.4)];

/// Trains a small noise net on a synthetic two-mode action distribution where
/// the condition selects the mode, and returns, per condition, the fraction
/// of 1000 samples within 0.1 of the selected mode.
pub fn two_mode_sampler_fidelity(seed: u64) -> Vec<f64> {
    use dds_autodiff::{AdamConfig, AdamState, Binder, Graph, Mode, ParamStore, Tensor};
    use dds_core::diffusion::{denoise, noise_pred_loss, NoiseNet, NoiseSchedule};

    let schedule = NoiseSchedule::new(5, 0.1, 10.0).unwrap();
    let cfg = NoiseNetConfig { hidden: 64, time_dim: 16, blocks: 2, dropout: 0.0 };
    let streams = SeedStreams::new(seed);
    let mut init = streams.stream("init");
    let mut store = ParamStore::new();
    let net = NoiseNet::new(&mut store, "net", cfg, 1, 1, &mut init).unwrap();
    let mut opt = AdamState::for_store(AdamConfig::with_lr(1e-3), &store);
    let mut data_rng = streams.stream("data");
    let batch = 128;
    for _ in 0..4000 {
        let mut x0 = Vec::with_capacity(batch);
        let mut cond = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (c, m) = TWO_MODES[data_rng.random_range(0..2)];
            x0.push(m + 0.02 * normal(&mut data_rng));
            cond.push(c);
        }
        let t: Vec<usize> = (0..batch).map(|_| data_rng.random_range(1..=schedule.steps)).collect();
        let eps = Tensor::new(vec![batch, 1], (0..batch).map(|_| normal(&mut data_rng)).collect()).unwrap();
        let x0 = Tensor::new(vec![batch, 1], x0).unwrap();
        let mut g = Graph::new(Mode::Train);
        let c = g.input(Tensor::new(vec![batch, 1], cond).unwrap());
        let loss = noise_pred_loss(&mut g, &net, Binder::trainable(&store), &schedule, &x0, c, &t, &eps, &mut data_rng).unwrap();
        store.zero_grad();
        g.backward_into(loss, &mut store).unwrap();
        opt.step(&mut store).unwrap();
    }
    TWO_MODES
        .iter()
        .map(|&(c, mode)| {
            let n = 1000;
            let cond = Tensor::new(vec![n, 1], vec![c; n]).unwrap();
            let mut rngs: Vec<StreamRng> = (0..n as u64).map(|i| streams.indexed("sample", i)).collect();
            let x = denoise(&net, &store, &schedule, &cond, &mut rngs).unwrap();
            x.data().iter().filter(|&&v| (v - mode).abs() <= 0.1).count() as f64 / n as f64
        })
        .collect()
}

/// Expectile of `values` at `tau` by bisection on the first-order condition
/// `tau * sum (v - m)+ = (1 - tau) * sum (m - v)+`.
pub fn expectile_oracle(values: &[f64], tau: f64) -> f64 {
    let (mut lo, mut hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    for _ in 0..200 {
        let m = 0.5 * (lo + hi);
        let up: f64 = values.iter().map(|v| (v - m).max(0.0)).sum();
        let down: f64 = values.iter().map(|v| (m - v).max(0.0)).sum();
        if tau * up > (1.0 - tau) * down {
            lo = m;
        } else {
            hi = m;
        }
    }
    0.5 * (lo + hi)
}

/// Relabeled dataset from `(state, skill, reward, next_state, terminal)` tuples.
pub fn tabular_dataset(
    dim_s: usize,
    num_skills: usize,
    gamma: f64,
    rows: &[(Vec<f64>, usize, f64, Vec<f64>, bool)],
) -> dds_core::relabel::RelabeledDataset {
    dds_core::relabel::RelabeledDataset {
        env: spec(dim_s, 1),
        horizon: 1,
        gamma,
        num_skills,
        fingerprint: "tabular".into(),
        transitions: rows
            .iter()
            .map(|(s, k, r, n, d)| dds_core::relabel::RelabeledTransition {
                state: s.clone(),
                skill_index: *k,
                reward: *r,
                next_state: n.clone(),
                terminal: *d,
                gamma_used: gamma,
            })
            .collect(),
    }
}

/// Converged `V` of a single state whose target critics return the fixed
/// `q` row; one transition per skill.
pub fn converged_expectile(q: &[f64], tau: f64) -> f64 {
    use dds_core::iql::{IqlBatch, IqlConfig, IqlLearner, StateNorm};
    let k = q.len();
    let cfg = IqlConfig { hidden: 8, tau, lr: 1e-2, ..IqlConfig::default() };
    let mut l = IqlLearner::new(cfg, 1, k, 0.9, StateNorm::identity(1), &mut rng(0)).unwrap();
    for head in ["q1", "q2"] {
        let w = l.targets.id(&format!("{head}.2.weight")).unwrap();
        let b = l.targets.id(&format!("{head}.2.bias")).unwrap();
        l.targets.get_mut(w).value.fill(0.0);
        l.targets.get_mut(b).value.data_mut().copy_from_slice(q);
    }
    let rows: Vec<_> = (0..k).map(|i| (vec![0.5], i, 0.0, vec![0.5], true)).collect();
    let data = tabular_dataset(1, k, 0.9, &rows);
    let all: Vec<usize> = (0..k).collect();
    let batch = IqlBatch::gather(&data, &l.norm, &all).unwrap();
    for step in 0..6000 {
        if step == 3000 {
            l.value_opt.set_lr(1e-3);
        }
        if step == 5000 {
            l.value_opt.set_lr(1e-4);
        }
        l.value_update(&batch).unwrap();
    }
    l.values(&batch.states).unwrap()[0]
}

/// Five-state chain: skill 0 steps left, skill 1 steps right, reaching state 4
/// pays 1 and terminates. Returns `(max |Q - Q_vi|, Q_learned, Q_vi)`.
pub fn chain_q_vs_value_iteration(tau: f64) -> (f64, Vec<[f64; 2]>, Vec<[f64; 2]>) {
    use dds_core::iql::{IqlBatch, IqlConfig, IqlLearner, StateNorm};
    let gamma = 0.9;
    let onehot = |s: usize| -> Vec<f64> { (0..5).map(|i| if i == s { 1.0 } else { 0.0 }).collect() };
    let mut rows = Vec::new();
    for s in 0..4usize {
        for k in 0..2usize {
            let n = if k == 0 { s.saturating_sub(1) } else { s + 1 };
            let done = n == 4;
            rows.push((onehot(s), k, if done { 1.0 } else { 0.0 }, onehot(n), done));
        }
    }
    let data = tabular_dataset(5, 2, gamma, &rows);
    // value iteration on the empirical MDP with the same expectile backup
    let mut q = vec![[0.0f64; 2]; 4];
    for _ in 0..2000 {
        let v: Vec<f64> = q.iter().map(|row| expectile_oracle(row, tau)).collect();
        for s in 0..4usize {
            for k in 0..2usize {
                let n = if k == 0 { s.saturating_sub(1) } else { s + 1 };
                q[s][k] = if n == 4 { 1.0 } else { gamma * v[n] };
            }
        }
    }
    let cfg = IqlConfig { hidden: 32, tau, lr: 3e-3, ema_alpha: 0.02, gamma_high: Some(gamma), ..IqlConfig::default() };
    let mut l = IqlLearner::new(cfg, 5, 2, gamma, StateNorm::identity(5), &mut rng(1)).unwrap();
    let all: Vec<usize> = (0..rows.len()).collect();
    let batch = IqlBatch::gather(&data, &l.norm, &all).unwrap();
    for step in 0..8000 {
        if step == 6000 {
            l.value_opt.set_lr(3e-4);
            l.critic_opt.set_lr(3e-4);
        }
        l.value_update(&batch).unwrap();
        l.q_update(&batch).unwrap();
    }
    let states = l.norm.batch(&(0..4).map(|s| rows[2 * s].0.as_slice()).collect::<Vec<_>>()).unwrap();
    let learned = l.target_q(&states).unwrap();
    let learned: Vec<[f64; 2]> = (0..4).map(|s| [learned.row(s)[0], learned.row(s)[1]]).collect();
    let err = learned.iter().zip(&q).flat_map(|(a, b)| [(a[0] - b[0]).abs(), (a[1] - b[1]).abs()]).fold(0.0, f64::max);
    (err, learned, q)
}
