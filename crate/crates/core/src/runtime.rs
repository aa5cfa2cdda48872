//! Run configuration, the end-to-end pipeline, hierarchical rollouts,
//! evaluation, single-skill replay and the ablation sweep.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dds_autodiff::{SeedStreams, StreamRng};

use crate::dataset::OfflineDataset;
use crate::diffusion::NoiseNetConfig;
use crate::env::{Cell, Env};
use crate::error::{config_err, DdsError, Result};
use crate::iql::{train_highlevel, IqlConfig, IqlLearner, IqlMetricsRow, SelectMode};
use crate::relabel::{relabel, RelabeledDataset, TerminalPolicy};
use crate::scripts::{generate_dataset, DataGenConfig, Script};
use crate::skill::{train_skills, EncoderConfig, SkillConfig, SkillEpochRecord, SkillModel, SkillTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkillSection {
    pub encoder: EncoderConfig,
    pub decoder: NoiseNetConfig,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub commitment: f64,
    pub train: SkillTrainConfig,
}

impl Default for SkillSection {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: NoiseNetConfig::default(),
            diffusion_steps: 5,
            beta_min: 0.1,
            beta_max: 10.0,
            commitment: 0.25,
            train: SkillTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub mode: SelectMode,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { episodes: 20, seeds: vec![0, 1, 2, 3, 4], mode: SelectMode::Greedy }
    }
}

/// Everything a run needs. Defaults follow the reference hyperparameters;
/// [`RunConfig::desk`] scales the networks and step counts to one CPU core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub env: String,
    pub seed: u64,
    pub horizon: usize,
    pub num_skills: usize,
    pub dim_z: usize,
    pub gamma: f64,
    pub scripts: Vec<Script>,
    pub data: DataGenConfig,
    pub skill: SkillSection,
    pub relabel: TerminalPolicy,
    pub iql: IqlConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: "medium-maze".into(),
            seed: 0,
            horizon: 10,
            num_skills: 16,
            dim_z: 128,
            gamma: 0.99,
            scripts: vec![Script::Wander, Script::Destination],
            data: DataGenConfig::default(),
            skill: SkillSection::default(),
            relabel: TerminalPolicy::Discard,
            iql: IqlConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Reduced architecture and step budget for single-core runs.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.skill.encoder = EncoderConfig { layers: 1, heads: 4, hidden: 32, dropout: 0.1 };
        c.skill.decoder = NoiseNetConfig { hidden: 64, time_dim: 16, blocks: 2, dropout: 0.1 };
        c.skill.train = SkillTrainConfig { steps: 3000, batch: 32, lr: 1e-3 };
        c.relabel = TerminalPolicy::AlignTail;
        c.data.episodes = 3000;
        c.iql = IqlConfig {
            hidden: 128,
            lr: 3e-4,
            batch: 256,
            q_steps: 20000,
            awr_steps: 4000,
            alpha_awr: 100.0,
            log_every: 1000,
            ..IqlConfig::default()
        };
        c
    }

    /// Small configuration for the 1-D chain; runs in seconds.
    pub fn chain_smoke() -> Self {
        let mut c = Self::desk();
        c.env = "chain".into();
        c.num_skills = 4;
        c.dim_z = 8;
        c.scripts = vec![Script::ChainLeft, Script::ChainRight];
        c.data = DataGenConfig { episodes: 40, episode_len: 40, ..DataGenConfig::default() };
        c.skill.train.steps = 300;
        c.skill.decoder.hidden = 32;
        c.iql.hidden = 32;
        c.iql.q_steps = 500;
        c.iql.awr_steps = 300;
        c.iql.log_every = 100;
        c.eval.episodes = 4;
        c.eval.seeds = vec![0, 1];
        c
    }

    pub fn validate(&self) -> Result<()> {
        Env::by_name(&self.env)?;
        if self.horizon == 0 || self.num_skills == 0 || self.dim_z == 0 {
            return Err(config_err("horizon, num_skills and dim_z must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(config_err(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.eval.seeds.is_empty() || self.eval.episodes == 0 {
            return Err(config_err("evaluation needs at least one seed and one episode"));
        }
        self.iql.validate()?;
        self.skill_config(Env::by_name(&self.env)?.spec().dim_s, Env::by_name(&self.env)?.spec().dim_a)?.validate()
    }

    pub fn env(&self) -> Result<Env> {
        Env::by_name(&self.env)
    }

    pub fn skill_config(&self, dim_s: usize, dim_a: usize) -> Result<SkillConfig> {
        let env = self.env()?;
        Ok(SkillConfig {
            dim_s,
            dim_a,
            action_low: env.spec().action_low.clone(),
            action_high: env.spec().action_high.clone(),
            horizon: self.horizon,
            num_skills: self.num_skills,
            dim_z: self.dim_z,
            encoder: self.skill.encoder,
            decoder: self.skill.decoder,
            diffusion_steps: self.skill.diffusion_steps,
            beta_min: self.skill.beta_min,
            beta_max: self.skill.beta_max,
            beta: self.skill.commitment,
        })
    }

    /// Checks that trained models agree with this configuration.
    pub fn check_models(&self, skills: &SkillModel, learner: Option<&IqlLearner>) -> Result<()> {
        let c = &skills.config;
        if c.horizon != self.horizon || c.num_skills != self.num_skills || c.dim_z != self.dim_z {
            return Err(config_err(format!(
                "skill checkpoint has H={}, K={}, D_z={}; config has H={}, K={}, D_z={}",
                c.horizon, c.num_skills, c.dim_z, self.horizon, self.num_skills, self.dim_z
            )));
        }
        let spec = self.env()?.spec().clone();
        if c.dim_s != spec.dim_s || c.dim_a != spec.dim_a {
            return Err(config_err("skill checkpoint dimensions do not match the environment"));
        }
        if let Some(l) = learner {
            if l.num_skills != c.num_skills || l.dim_s != c.dim_s {
                return Err(config_err("high-level checkpoint does not match the skill checkpoint"));
            }
        }
        Ok(())
    }
}

pub fn generate(config: &RunConfig) -> Result<OfflineDataset> {
    generate_dataset(&config.env()?, &config.scripts, &config.data, config.seed)
}

/// Artifacts of one full run.
pub struct Pipeline {
    pub dataset: OfflineDataset,
    pub skills: SkillModel,
    pub skill_epochs: Vec<SkillEpochRecord>,
    pub relabeled: RelabeledDataset,
    pub learner: IqlLearner,
    pub iql_metrics: Vec<IqlMetricsRow>,
}

/// Skill training, relabeling and high-level training on an existing dataset.
pub fn run_pipeline_on(config: &RunConfig, dataset: OfflineDataset) -> Result<Pipeline> {
    config.validate()?;
    let skill_cfg = config.skill_config(dataset.env.dim_s, dataset.env.dim_a)?;
    let trained = train_skills(&dataset, skill_cfg, &config.skill.train, config.seed)?;
    let relabeled = relabel(&dataset, &trained.model, config.horizon, config.gamma, config.relabel)?;
    let hl = train_highlevel(&relabeled, config.iql.clone(), config.seed)?;
    Ok(Pipeline {
        dataset,
        skills: trained.model,
        skill_epochs: trained.epochs,
        relabeled,
        learner: hl.learner,
        iql_metrics: hl.metrics,
    })
}

pub fn run_pipeline(config: &RunConfig) -> Result<Pipeline> {
    run_pipeline_on(config, generate(config)?)
}

/// Where skills come from during a rollout.
#[derive(Clone, Copy)]
pub enum SkillSource<'a> {
    Policy(&'a IqlLearner, SelectMode),
    /// Replay one skill for the whole episode.
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub state: Vec<f64>,
    pub skill: usize,
    pub action: Vec<f64>,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillTrace {
    pub seed: u64,
    pub steps: Vec<TraceStep>,
    pub final_state: Vec<f64>,
    pub success: bool,
    pub total_reward: f64,
}

impl SkillTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Rolls out one episode per seed, batching the decoder across episodes.
/// Each episode draws from its own streams, keyed by its seed.
pub fn run_episodes(
    env: &Env,
    skills: &SkillModel,
    source: SkillSource<'_>,
    seeds: &[u64],
    start: Option<Cell>,
) -> Result<Vec<SkillTrace>> {
    let spec = env.spec();
    if spec.dim_s != skills.config.dim_s || spec.dim_a != skills.config.dim_a {
        return Err(config_err("environment and skill checkpoint dimensions differ"));
    }
    if let SkillSource::Policy(l, _) = source {
        if l.dim_s != spec.dim_s || l.num_skills != skills.config.num_skills {
            return Err(config_err("high-level checkpoint does not match environment or skill checkpoint"));
        }
    }
    if let SkillSource::Fixed(k) = source {
        if k >= skills.config.num_skills {
            return Err(config_err(format!("skill {k} outside [0, {})", skills.config.num_skills)));
        }
    }
    let h = skills.config.horizon;
    let mut states = Vec::with_capacity(seeds.len());
    for _ in seeds {
        states.push(match (start, env) {
            (Some(cell), Env::Maze(m)) => m.reset_at(cell),
            _ => env.reset(),
        });
    }
    let mut sample_rngs: Vec<StreamRng> = seeds.iter().map(|&s| SeedStreams::new(s).stream("rollout.sampler")).collect();
    let mut select_rngs: Vec<StreamRng> = seeds.iter().map(|&s| SeedStreams::new(s).stream("rollout.select")).collect();
    let mut traces: Vec<SkillTrace> = seeds
        .iter()
        .map(|&seed| SkillTrace { seed, steps: Vec::new(), final_state: Vec::new(), success: false, total_reward: 0.0 })
        .collect();
    let mut current = vec![0usize; seeds.len()];
    let mut t = 0;
    loop {
        let active: Vec<usize> = (0..seeds.len()).filter(|&i| !states[i].done).collect();
        if active.is_empty() {
            break;
        }
        if t % h == 0 {
            for &i in &active {
                current[i] = match source {
                    SkillSource::Fixed(k) => k,
                    SkillSource::Policy(l, mode) => l.select_skill(&states[i].obs, mode, &mut select_rngs[i])?,
                };
            }
        }
        let obs: Vec<Vec<f64>> = active.iter().map(|&i| states[i].obs.clone()).collect();
        let ks: Vec<usize> = active.iter().map(|&i| current[i]).collect();
        let mut rngs: Vec<StreamRng> = active.iter().map(|&i| sample_rngs[i].clone()).collect();
        let actions = skills.sample_actions(&obs, &ks, &mut rngs)?;
        for (j, &i) in active.iter().enumerate() {
            sample_rngs[i] = rngs[j].clone();
            let step = env.step(&mut states[i], &actions[j])?;
            let tr = &mut traces[i];
            tr.steps.push(TraceStep { t, state: obs[j].clone(), skill: current[i], action: actions[j].clone(), reward: step.reward });
            tr.total_reward += step.reward;
            if step.done {
                tr.success = step.terminal;
                tr.final_state = step.obs;
            }
        }
        t += 1;
    }
    Ok(traces)
}

pub fn run_hierarchical_episode(env: &Env, skills: &SkillModel, source: SkillSource<'_>, seed: u64) -> Result<SkillTrace> {
    Ok(run_episodes(env, skills, source, &[seed], None)?.remove(0))
}

/// Episode seeds of one evaluation seed.
pub fn episode_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    let streams = SeedStreams::new(seed);
    (0..episodes as u64).map(|i| streams.indexed("eval.episode", i).random()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub episodes: usize,
    pub successes: usize,
    /// Percent of successful episodes.
    pub success_rate: f64,
    pub mean_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_seed: Vec<SeedResult>,
    pub mean: f64,
    /// Population standard deviation across seeds.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize(per_seed: Vec<SeedResult>) -> EvalReport {
    let rates: Vec<f64> = per_seed.iter().map(|r| r.success_rate).collect();
    let (mean, std) = mean_std(&rates);
    EvalReport { per_seed, mean, std }
}

fn seed_result(seed: u64, traces: &[SkillTrace]) -> SeedResult {
    let successes = traces.iter().filter(|t| t.success).count();
    SeedResult {
        seed,
        episodes: traces.len(),
        successes,
        success_rate: 100.0 * successes as f64 / traces.len().max(1) as f64,
        mean_return: traces.iter().map(|t| t.total_reward).sum::<f64>() / traces.len().max(1) as f64,
    }
}

/// Success rate over `episodes` per seed; seeds run in parallel.
pub fn evaluate(env: &Env, skills: &SkillModel, source: SkillSource<'_>, episodes: usize, seeds: &[u64]) -> Result<EvalReport> {
    let per_seed = seeds
        .par_iter()
        .map(|&s| Ok(seed_result(s, &run_episodes(env, skills, source, &episode_seeds(s, episodes), None)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(per_seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayRow {
    pub skill: usize,
    pub start_row: usize,
    pub start_col: usize,
    pub rollout: usize,
    pub end_x: f64,
    pub end_y: f64,
    pub success: bool,
    pub steps: usize,
}

pub struct ReplayResult {
    pub rows: Vec<ReplayRow>,
    pub traces: Vec<(usize, Cell, SkillTrace)>,
}

/// Replays every skill for the whole episode (`steps` env steps) from each start.
pub fn replay_skills(
    env: &Env,
    skills: &SkillModel,
    starts: &[Cell],
    rollouts: usize,
    steps: usize,
    seed: u64,
) -> Result<ReplayResult> {
    let env = env.clone().with_max_steps(steps);
    let k = skills.config.num_skills;
    let jobs: Vec<(usize, usize)> = (0..k).flat_map(|s| (0..starts.len()).map(move |c| (s, c))).collect();
    let results = jobs
        .par_iter()
        .map(|&(skill, c)| {
            let streams = SeedStreams::new(seed);
            let seeds: Vec<u64> = (0..rollouts).map(|r| streams.indexed("replay", (skill * 1000 + c) as u64 * 1000 + r as u64).random()).collect();
            run_episodes(&env, skills, SkillSource::Fixed(skill), &seeds, Some(starts[c])).map(|t| (skill, c, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for (skill, c, ts) in results {
        for (r, tr) in ts.into_iter().enumerate() {
            rows.push(ReplayRow {
                skill,
                start_row: starts[c].row,
                start_col: starts[c].col,
                rollout: r,
                end_x: tr.final_state[0],
                end_y: tr.final_state.get(1).copied().unwrap_or(0.0),
                success: tr.success,
                steps: tr.len(),
            });
            traces.push((skill, starts[c], tr));
        }
    }
    Ok(ReplayResult { rows, traces })
}

/// Pairwise distinctness of skill endpoints: a pair counts when the mean
/// (over starts) distance between the two skills' endpoint centroids
/// exceeds twice the larger within-skill spread, where a skill's spread is
/// the mean (over starts) RMS distance of its endpoints to their centroid.
/// Returns `(distinct_pairs, total_pairs)`.
pub fn distinct_skill_pairs(rows: &[ReplayRow], num_skills: usize) -> (usize, usize) {
    let mut starts: Vec<(usize, usize)> = rows.iter().map(|r| (r.start_row, r.start_col)).collect();
    starts.sort();
    starts.dedup();
    let stat = |k: usize, s: (usize, usize)| -> Option<([f64; 2], f64)> {
        let pts: Vec<[f64; 2]> =
            rows.iter().filter(|r| r.skill == k && (r.start_row, r.start_col) == s).map(|r| [r.end_x, r.end_y]).collect();
        if pts.is_empty() {
            return None;
        }
        let n = pts.len() as f64;
        let c = [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n];
        let rms = (pts.iter().map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sum::<f64>() / n).sqrt();
        Some((c, rms))
    };
    let table: Vec<Vec<Option<([f64; 2], f64)>>> = (0..num_skills).map(|k| starts.iter().map(|&s| stat(k, s)).collect()).collect();
    let spread: Vec<f64> = table
        .iter()
        .map(|per| {
            let v: Vec<f64> = per.iter().flatten().map(|x| x.1).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect();
    let mut distinct = 0;
    let mut total = 0;
    for i in 0..num_skills {
        for j in i + 1..num_skills {
            total += 1;
            let d: Vec<f64> = (0..starts.len())
                .filter_map(|s| match (table[i][s], table[j][s]) {
                    (Some((a, _)), Some((b, _))) => Some(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()),
                    _ => None,
                })
                .collect();
            if d.is_empty() {
                continue;
            }
            let between = d.iter().sum::<f64>() / d.len() as f64;
            if between > 2.0 * spread[i].max(spread[j]) {
                distinct += 1;
            }
        }
    }
    (distinct, total)
}

/// Success rate of every skill replayed from the evaluation start, in percent.
pub fn single_skill_success(env: &Env, skills: &SkillModel, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    (0..skills.config.num_skills)
        .into_par_iter()
        .map(|k| {
            let seeds = episode_seeds(seed ^ (k as u64).wrapping_mul(0x9e37_79b9), episodes);
            let t = run_episodes(env, skills, SkillSource::Fixed(k), &seeds, None)?;
            Ok(100.0 * t.iter().filter(|t| t.success).count() as f64 / episodes as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub num_skills: usize,
    pub dim_z: usize,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub num_skills: usize,
    pub dim_z: usize,
    pub horizon: usize,
    pub mean: f64,
    pub std: f64,
    pub status: String,
}

/// (K, D_z) grid at a fixed horizon.
pub fn grid(ks: &[usize], dzs: &[usize], horizon: usize) -> Vec<SweepCell> {
    dzs.iter().flat_map(|&d| ks.iter().map(move |&k| SweepCell { num_skills: k, dim_z: d, horizon })).collect()
}

/// Trains and evaluates every cell on a shared dataset; a failing cell is
/// recorded and the sweep continues.
pub fn sweep(base: &RunConfig, dataset: &OfflineDataset, cells: &[SweepCell]) -> Vec<SweepRow> {
    cells
        .par_iter()
        .map(|cell| {
            let mut cfg = base.clone();
            cfg.num_skills = cell.num_skills;
            cfg.dim_z = cell.dim_z;
            cfg.horizon = cell.horizon;
            let outcome = run_pipeline_on(&cfg, dataset.clone()).and_then(|p| {
                evaluate(&cfg.env()?, &p.skills, SkillSource::Policy(&p.learner, cfg.eval.mode), cfg.eval.episodes, &cfg.eval.seeds)
            });
            let (mean, std, status) = match outcome {
                Ok(r) => (r.mean, r.std, "ok".to_string()),
                Err(e) => (f64::NAN, f64::NAN, format!("failed: {e}")),
            };
            SweepRow { num_skills: cell.num_skills, dim_z: cell.dim_z, horizon: cell.horizon, mean, std, status }
        })
        .collect()
}

/// Table with one row per `D_z` and one `mean ± std` column per `K`.
pub fn table_csv(rows: &[SweepRow]) -> Result<String> {
    let mut ks: Vec<usize> = rows.iter().map(|r| r.num_skills).collect();
    ks.sort();
    ks.dedup();
    let mut dzs: Vec<usize> = rows.iter().map(|r| r.dim_z).collect();
    dzs.sort();
    dzs.dedup();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["dim_z".to_string()];
    header.extend(ks.iter().map(|k| format!("K={k}")));
    w.write_record(&header)?;
    for d in &dzs {
        let mut rec = vec![d.to_string()];
        for k in &ks {
            rec.push(match rows.iter().find(|r| r.dim_z == *d && r.num_skills == *k) {
                Some(r) if r.status == "ok" => format!("{:.1} ± {:.1}", r.mean, r.std),
                Some(_) => "failed".into(),
                None => String::new(),
            });
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| DdsError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
