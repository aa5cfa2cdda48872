//! High-level offline learner over skill indices: expectile value regression,
//! twin Q heads with Polyak targets and advantage-weighted policy extraction.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use dds_autodiff::checkpoint::{collect_stores, decode_tensors, encode_tensors, restore_store};
use dds_autodiff::{ema_update, AdamConfig, AdamState, Binder, Graph, Mlp, Mode, ParamStore, SeedStreams, Tensor, Var};

use crate::error::{config_err, data_err, DdsError, Result};
use crate::relabel::RelabeledDataset;
use crate::skill::sidecar_path;

/// `|tau - 1(u < 0)| u^2`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqlConfig {
    pub hidden: usize,
    pub tau: f64,
    pub lr: f64,
    pub batch: usize,
    pub q_steps: usize,
    pub awr_steps: usize,
    pub ema_alpha: f64,
    /// Bellman discount between skill decisions; `None` means `gamma^H`.
    pub gamma_high: Option<f64>,
    pub alpha_awr: f64,
    pub weight_clip: f64,
    /// Metrics are recorded every this many steps of each phase.
    pub log_every: usize,
}

impl Default for IqlConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            tau: 0.7,
            lr: 1e-4,
            batch: 256,
            q_steps: 1_000_000,
            awr_steps: 1_000_000,
            ema_alpha: 0.005,
            gamma_high: None,
            alpha_awr: 3.0,
            weight_clip: 100.0,
            log_every: 1000,
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(config_err(format!("expectile tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.weight_clip > 0.0) {
            return Err(config_err("advantage weight clip must be positive"));
        }
        if self.batch == 0 || self.hidden == 0 {
            return Err(config_err("batch size and hidden width must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(config_err("EMA alpha must lie in [0, 1]"));
        }
        if let Some(g) = self.gamma_high {
            if !(0.0..=1.0).contains(&g) {
                return Err(config_err("high-level discount must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn resolved_gamma(&self, gamma: f64, horizon: usize) -> f64 {
        self.gamma_high.unwrap_or_else(|| gamma.powi(horizon as i32))
    }
}

/// Per-dimension state standardization for the high-level networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StateNorm {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn from_states<'a>(states: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let rows: Vec<&[f64]> = states.collect();
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..dim)
            .map(|j| {
                let v = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v.sqrt() < 1e-6 { 1.0 } else { v.sqrt() }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.mean).zip(&self.std).map(|((v, m), sd)| (v - m) / sd).collect()
    }

    pub fn batch(&self, states: &[&[f64]]) -> Result<Tensor> {
        let dim = self.mean.len();
        let data: Vec<f64> = states.iter().flat_map(|s| self.apply(s)).collect();
        Ok(Tensor::new(vec![states.len(), dim], data)?)
    }
}

/// Transitions of one update, with normalized states.
pub struct IqlBatch {
    pub states: Tensor,
    pub next_states: Tensor,
    pub skills: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
}

impl IqlBatch {
    pub fn gather(data: &RelabeledDataset, norm: &StateNorm, indices: &[usize]) -> Result<Self> {
        let ts: Vec<_> = indices.iter().map(|&i| &data.transitions[i]).collect();
        Ok(Self {
            states: norm.batch(&ts.iter().map(|t| t.state.as_slice()).collect::<Vec<_>>())?,
            next_states: norm.batch(&ts.iter().map(|t| t.next_state.as_slice()).collect::<Vec<_>>())?,
            skills: ts.iter().map(|t| t.skill_index).collect(),
            rewards: ts.iter().map(|t| t.reward).collect(),
            terminals: ts.iter().map(|t| t.terminal).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AwrStats {
    pub loss: f64,
    pub mean_advantage: f64,
    pub entropy: f64,
}

/// All high-level networks plus their optimizers.
#[derive(Clone, Debug)]
pub struct IqlLearner {
    pub config: IqlConfig,
    pub num_skills: usize,
    pub dim_s: usize,
    pub gamma_high: f64,
    pub norm: StateNorm,
    pub critics: ParamStore,
    pub targets: ParamStore,
    pub value: ParamStore,
    pub policy: ParamStore,
    q1: Mlp,
    q2: Mlp,
    v_net: Mlp,
    pi_net: Mlp,
    pub critic_opt: AdamState,
    pub value_opt: AdamState,
    pub policy_opt: AdamState,
}

fn two_hidden(input: usize, hidden: usize, out: usize) -> [usize; 4] {
    [input, hidden, hidden, out]
}

impl IqlLearner {
    pub fn new<R: Rng + ?Sized>(config: IqlConfig, dim_s: usize, num_skills: usize, gamma_high: f64, norm: StateNorm, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if num_skills == 0 || dim_s == 0 {
            return Err(config_err("high-level learner needs at least one skill and one state dimension"));
        }
        let h = config.hidden;
        let mut critics = ParamStore::new();
        let q1 = Mlp::new(&mut critics, "q1", &two_hidden(dim_s, h, num_skills), rng)?;
        let q2 = Mlp::new(&mut critics, "q2", &two_hidden(dim_s, h, num_skills), rng)?;
        let targets = critics.clone();
        let mut value = ParamStore::new();
        let v_net = Mlp::new(&mut value, "value", &two_hidden(dim_s, h, 1), rng)?;
        let mut policy = ParamStore::new();
        let pi_net = Mlp::new(&mut policy, "policy", &two_hidden(dim_s, h, num_skills), rng)?;
        let adam = AdamConfig::with_lr(config.lr);
        Ok(Self {
            critic_opt: AdamState::for_store(adam, &critics),
            value_opt: AdamState::for_store(adam, &value),
            policy_opt: AdamState::for_store(adam, &policy),
            config,
            num_skills,
            dim_s,
            gamma_high,
            norm,
            critics,
            targets,
            value,
            policy,
            q1,
            q2,
            v_net,
            pi_net,
        })
    }

    fn check_skills(&self, skills: &[usize]) -> Result<()> {
        if let Some(&k) = skills.iter().find(|&&k| k >= self.num_skills) {
            return Err(data_err(format!("skill index {k} outside [0, {})", self.num_skills)));
        }
        Ok(())
    }

    fn eval_mlp(net: &Mlp, store: &ParamStore, states: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(states.clone());
        let y = net.forward(&mut g, Binder::frozen(store), x)?;
        Ok(g.value(y).clone())
    }

    /// Element-wise minimum of the two target heads, `[n, K]`.
    pub fn target_q(&self, states: &Tensor) -> Result<Tensor> {
        let a = Self::eval_mlp(&self.q1, &self.targets, states)?;
        let b = Self::eval_mlp(&self.q2, &self.targets, states)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x.min(*y)).collect();
        Ok(Tensor::new(a.shape().to_vec(), data)?)
    }

    /// Online heads `(Q1, Q2)`, each `[n, K]`.
    pub fn online_q(&self, states: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((Self::eval_mlp(&self.q1, &self.critics, states)?, Self::eval_mlp(&self.q2, &self.critics, states)?))
    }

    pub fn values(&self, states: &Tensor) -> Result<Vec<f64>> {
        Ok(Self::eval_mlp(&self.v_net, &self.value, states)?.into_data())
    }

    pub fn logits(&self, states: &Tensor) -> Result<Tensor> {
        Self::eval_mlp(&self.pi_net, &self.policy, states)
    }

    /// Expectile regression of `V(s)` toward `min(Q1', Q2')(s, k)`; returns the
    /// loss and the graph (for gradient inspection). Does not step.
    pub fn value_loss(&self, batch: &IqlBatch, value: &ParamStore) -> Result<(Graph, Var)> {
        self.check_skills(&batch.skills)?;
        let q = self.target_q(&batch.states)?;
        let targets: Vec<f64> = batch.skills.iter().enumerate().map(|(i, &k)| q.row(i)[k]).collect();
        let mut g = Graph::new(Mode::Train);
        let s = g.input(batch.states.clone());
        let v = self.v_net.forward(&mut g, Binder::trainable(value), s)?;
        let current = g.value(v).data().to_vec();
        let weights: Vec<f64> =
            targets.iter().zip(&current).map(|(q, v)| if q - v < 0.0 { 1.0 - self.config.tau } else { self.config.tau }).collect();
        let n = batch.len();
        let tq = g.input(Tensor::new(vec![n, 1], targets)?);
        let w = g.input(Tensor::new(vec![n, 1], weights)?);
        let u = g.sub(tq, v)?;
        let sq = g.square(u);
        let weighted = g.mul(w, sq)?;
        let loss = g.mean(weighted);
        Ok((g, loss))
    }

    pub fn value_update(&mut self, batch: &IqlBatch) -> Result<f64> {
        let (g, loss) = self.value_loss(batch, &self.value)?;
        let l = g.value(loss).item();
        self.value.zero_grad();
        g.backward_into(loss, &mut self.value)?;
        self.value_opt.step(&mut self.value)?;
        Ok(l)
    }

    /// Bellman targets `r + gamma_high V(s') (1 - d)`.
    pub fn bellman_targets(&self, batch: &IqlBatch) -> Result<Vec<f64>> {
        let v_next = self.values(&batch.next_states)?;
        Ok((0..batch.len())
            .map(|i| {
                let cont = if batch.terminals[i] { 0.0 } else { self.gamma_high * v_next[i] };
                batch.rewards[i] + cont
            })
            .collect())
    }

    /// Sum of both heads' squared errors at the batch skills. Does not step.
    pub fn q_loss(&self, batch: &IqlBatch, critics: &ParamStore) -> Result<(Graph, Var)> {
        self.check_skills(&batch.skills)?;
        let y = self.bellman_targets(batch)?;
        let n = batch.len();
        let mut g = Graph::new(Mode::Train);
        let s = g.input(batch.states.clone());
        let target = g.input(Tensor::new(vec![n, 1], y)?);
        let mut total = None;
        for net in [&self.q1, &self.q2] {
            let q = net.forward(&mut g, Binder::trainable(critics), s)?;
            let picked = g.pick(q, &batch.skills)?;
            let d = g.sub(picked, target)?;
            let sq = g.square(d);
            let m = g.mean(sq);
            total = Some(match total {
                None => m,
                Some(t) => g.add(t, m)?,
            });
        }
        Ok((g, total.expect("two heads")))
    }

    pub fn q_update(&mut self, batch: &IqlBatch) -> Result<f64> {
        let (g, loss) = self.q_loss(batch, &self.critics)?;
        let l = g.value(loss).item();
        self.critics.zero_grad();
        g.backward_into(loss, &mut self.critics)?;
        self.critic_opt.step(&mut self.critics)?;
        ema_update(&mut self.targets, &self.critics, self.config.ema_alpha)?;
        Ok(l)
    }

    /// Clipped exponentiated advantages from the target critics and `V`.
    pub fn awr_weights(&self, batch: &IqlBatch) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_skills(&batch.skills)?;
        let q = self.target_q(&batch.states)?;
        let v = self.values(&batch.states)?;
        let adv: Vec<f64> = batch.skills.iter().enumerate().map(|(i, &k)| q.row(i)[k] - v[i]).collect();
        let w = adv.iter().map(|a| (self.config.alpha_awr * a).exp().min(self.config.weight_clip)).collect();
        Ok((w, adv))
    }

    /// `-mean(w log pi(k|s))` with fixed weights. Does not step.
    pub fn awr_loss(&self, batch: &IqlBatch, weights: &[f64], policy: &ParamStore) -> Result<(Graph, Var)> {
        self.check_skills(&batch.skills)?;
        let n = batch.len();
        let mut g = Graph::new(Mode::Train);
        let s = g.input(batch.states.clone());
        let logits = self.pi_net.forward(&mut g, Binder::trainable(policy), s)?;
        let logp = g.log_softmax(logits);
        let picked = g.pick(logp, &batch.skills)?;
        let w = g.input(Tensor::new(vec![n, 1], weights.to_vec())?);
        let weighted = g.mul(w, picked)?;
        let m = g.mean(weighted);
        let loss = g.scale(m, -1.0);
        Ok((g, loss))
    }

    pub fn awr_update(&mut self, batch: &IqlBatch, weights: &[f64]) -> Result<f64> {
        let (g, loss) = self.awr_loss(batch, weights, &self.policy)?;
        let l = g.value(loss).item();
        self.policy.zero_grad();
        g.backward_into(loss, &mut self.policy)?;
        self.policy_opt.step(&mut self.policy)?;
        Ok(l)
    }

    /// Mean entropy of the policy over `states`.
    pub fn policy_entropy(&self, states: &Tensor) -> Result<f64> {
        let logits = self.logits(states)?;
        let n = logits.rows();
        Ok((0..n).map(|i| entropy(&softmax(logits.row(i)))).sum::<f64>() / n.max(1) as f64)
    }

    pub fn select_skill<R: Rng + ?Sized>(&self, state: &[f64], mode: SelectMode, rng: &mut R) -> Result<usize> {
        let s = self.norm.batch(&[state])?;
        let logits = self.logits(&s)?;
        Ok(select_skill(logits.row(0), mode, rng))
    }

    fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        Ok(collect_stores(&[
            ("critics.", &self.critics),
            ("targets.", &self.targets),
            ("value.", &self.value),
            ("policy.", &self.policy),
        ])?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, encode_tensors(&self.tensors()?)?)?;
        let side = IqlSidecar {
            config: self.config.clone(),
            num_skills: self.num_skills,
            dim_s: self.dim_s,
            gamma_high: self.gamma_high,
            norm: self.norm.clone(),
        };
        fs::write(sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: IqlSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)
            .map_err(|e| data_err(format!("high-level sidecar: {e}")))?;
        let tensors = decode_tensors(&fs::read(path)?)?;
        let mut rng = SeedStreams::new(0).stream("load");
        let mut l = Self::new(side.config, side.dim_s, side.num_skills, side.gamma_high, side.norm, &mut rng)?;
        restore_store(&mut l.critics, "critics.", &tensors)?;
        restore_store(&mut l.targets, "targets.", &tensors)?;
        restore_store(&mut l.value, "value.", &tensors)?;
        restore_store(&mut l.policy, "policy.", &tensors)?;
        Ok(l)
    }
}

#[derive(Serialize, Deserialize)]
struct IqlSidecar {
    config: IqlConfig,
    num_skills: usize,
    dim_s: usize,
    gamma_high: f64,
    norm: StateNorm,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    #[default]
    Greedy,
    Sample,
}

/// Greedy: first maximal logit. Sample: a draw from the softmax.
pub fn select_skill<R: Rng + ?Sized>(logits: &[f64], mode: SelectMode, rng: &mut R) -> usize {
    match mode {
        SelectMode::Greedy => {
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            best
        }
        SelectMode::Sample => {
            let p = softmax(logits);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    return i;
                }
            }
            p.len() - 1
        }
    }
}

/// One row of the training metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqlMetricsRow {
    pub step: usize,
    pub phase: String,
    pub value_loss: f64,
    pub q_loss: f64,
    pub awr_loss: f64,
    pub mean_advantage: f64,
    pub policy_entropy: f64,
}

pub struct IqlTrainOutput {
    pub learner: IqlLearner,
    pub metrics: Vec<IqlMetricsRow>,
}

/// `q_steps` of interleaved value and Q updates, then `awr_steps` of policy extraction.
pub fn train_highlevel(data: &RelabeledDataset, config: IqlConfig, seed: u64) -> Result<IqlTrainOutput> {
    data.validate()?;
    let gamma_high = config.resolved_gamma(data.gamma, data.horizon);
    let norm = StateNorm::from_states(data.transitions.iter().map(|t| t.state.as_slice()), data.dim_s());
    let streams = SeedStreams::new(seed);
    let mut init = streams.stream("iql.init");
    let mut learner = IqlLearner::new(config, data.dim_s(), data.num_skills, gamma_high, norm, &mut init)?;
    let mut batch_rng = streams.stream("iql.batch");
    let n = data.transitions.len();
    let cfg = learner.config.clone();
    let log_every = cfg.log_every.max(1);
    let mut metrics = Vec::new();
    let sample = |rng: &mut dds_autodiff::StreamRng| -> Vec<usize> { (0..cfg.batch).map(|_| rng.random_range(0..n)).collect() };
    let (mut vl_acc, mut ql_acc, mut count) = (0.0, 0.0, 0usize);
    for step in 0..cfg.q_steps {
        let batch = IqlBatch::gather(data, &learner.norm, &sample(&mut batch_rng))?;
        let vl = learner.value_update(&batch)?;
        let ql = learner.q_update(&batch)?;
        if !(vl.is_finite() && ql.is_finite()) {
            return Err(DdsError::Numeric(format!("high-level losses became non-finite at step {step}: value={vl} q={ql}")));
        }
        vl_acc += vl;
        ql_acc += ql;
        count += 1;
        if (step + 1) % log_every == 0 || step + 1 == cfg.q_steps {
            let (_, adv) = learner.awr_weights(&batch)?;
            metrics.push(IqlMetricsRow {
                step: step + 1,
                phase: "q".into(),
                value_loss: vl_acc / count as f64,
                q_loss: ql_acc / count as f64,
                awr_loss: f64::NAN,
                mean_advantage: adv.iter().sum::<f64>() / adv.len() as f64,
                policy_entropy: learner.policy_entropy(&batch.states)?,
            });
            (vl_acc, ql_acc, count) = (0.0, 0.0, 0);
        }
    }
    // critics are frozen from here on, so the weights of every transition are fixed
    let all: Vec<usize> = (0..n).collect();
    let full = IqlBatch::gather(data, &learner.norm, &all)?;
    let (weights, adv) = learner.awr_weights(&full)?;
    let mean_adv = adv.iter().sum::<f64>() / n as f64;
    let (mut al_acc, mut count) = (0.0, 0usize);
    for step in 0..cfg.awr_steps {
        let idx = sample(&mut batch_rng);
        let batch = IqlBatch::gather(data, &learner.norm, &idx)?;
        let w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
        let al = learner.awr_update(&batch, &w)?;
        if !al.is_finite() {
            return Err(DdsError::Numeric(format!("policy loss became non-finite at step {step}")));
        }
        al_acc += al;
        count += 1;
        if (step + 1) % log_every == 0 || step + 1 == cfg.awr_steps {
            metrics.push(IqlMetricsRow {
                step: cfg.q_steps + step + 1,
                phase: "awr".into(),
                value_loss: f64::NAN,
                q_loss: f64::NAN,
                awr_loss: al_acc / count as f64,
                mean_advantage: mean_adv,
                policy_entropy: learner.policy_entropy(&batch.states)?,
            });
            (al_acc, count) = (0.0, 0);
        }
    }
    Ok(IqlTrainOutput { learner, metrics })
}
