use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use dds_core::datastore::{read_dataset, read_relabeled, write_csv, write_dataset, write_relabeled};
use dds_core::env::{Cell, Env};
use dds_core::error::{DdsError, Result};
use dds_core::iql::{train_highlevel, IqlLearner};
use dds_core::relabel::relabel as relabel_dataset;
use dds_core::runtime::{
    distinct_skill_pairs, episode_seeds, evaluate, generate, grid, replay_skills, run_episodes, sweep as run_sweep,
    table_csv, RunConfig, SkillSource, SkillTrace, SweepCell, SweepRow,
};
use dds_core::skill::{train_skills as fit_skills, SkillModel};

use crate::config::{to_toml, Common};

/// Creates the output directory and records the resolved config.
fn prepare(common: &Common, command: &str) -> Result<RunConfig> {
    let cfg = common.resolve()?;
    fs::create_dir_all(&common.out_dir)?;
    fs::write(common.path(Path::new(&format!("{command}.config.toml"))), to_toml(&cfg)?)?;
    Ok(cfg)
}

fn load_pair(common: &Common, cfg: &RunConfig, skills: &Path, highlevel: &Path) -> Result<(SkillModel, IqlLearner)> {
    let s = SkillModel::load(&common.path(skills))?;
    let l = IqlLearner::load(&common.path(highlevel))?;
    cfg.check_models(&s, Some(&l))?;
    Ok((s, l))
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "dataset.dds")]
    output: PathBuf,
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = prepare(&a.common, "gen-data")?;
    let ds = generate(&cfg)?;
    write_dataset(&a.common.path(&a.output), &ds)?;
    eprintln!("gen-data: {} episodes, {} steps -> {}", ds.episodes.len(), ds.num_steps(), a.output.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainSkillsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "dataset.dds")]
    dataset: PathBuf,
    #[arg(long, default_value = "skills.ckpt")]
    output: PathBuf,
    /// Per-epoch loss and codebook usage.
    #[arg(long, default_value = "skill_metrics.csv")]
    metrics: PathBuf,
}

pub fn train_skills(a: TrainSkillsArgs) -> Result<()> {
    let cfg = prepare(&a.common, "train-skills")?;
    let ds = read_dataset(&a.common.path(&a.dataset))?;
    let out = fit_skills(&ds, cfg.skill_config(ds.env.dim_s, ds.env.dim_a)?, &cfg.skill.train, cfg.seed)?;
    out.model.save(&a.common.path(&a.output))?;
    write_csv(&a.common.path(&a.metrics), &out.epochs)?;
    if let Some(last) = out.epochs.last() {
        eprintln!("train-skills: step {} total {:.5} perplexity {:.2} -> {}", last.step, last.total, last.perplexity, a.output.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct RelabelArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "dataset.dds")]
    dataset: PathBuf,
    #[arg(long, default_value = "skills.ckpt")]
    skills: PathBuf,
    #[arg(long, default_value = "relabeled.dds")]
    output: PathBuf,
    /// Transition count per skill index.
    #[arg(long, default_value = "relabel_histogram.csv")]
    histogram: PathBuf,
}

#[derive(Serialize)]
struct HistogramRow {
    skill: usize,
    transitions: usize,
}

pub fn relabel(a: RelabelArgs) -> Result<()> {
    let cfg = prepare(&a.common, "relabel")?;
    let ds = read_dataset(&a.common.path(&a.dataset))?;
    let skills = SkillModel::load(&a.common.path(&a.skills))?;
    cfg.check_models(&skills, None)?;
    let rl = relabel_dataset(&ds, &skills, cfg.horizon, cfg.gamma, cfg.relabel)?;
    write_relabeled(&a.common.path(&a.output), &rl)?;
    let rows: Vec<HistogramRow> =
        rl.histogram().into_iter().enumerate().map(|(skill, transitions)| HistogramRow { skill, transitions }).collect();
    write_csv(&a.common.path(&a.histogram), &rows)?;
    eprintln!("relabel: {} transitions -> {}", rl.transitions.len(), a.output.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainHlArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "relabeled.dds")]
    relabeled: PathBuf,
    #[arg(long, default_value = "highlevel.ckpt")]
    output: PathBuf,
    /// Step-indexed value, Q and AWR losses.
    #[arg(long, default_value = "iql_metrics.csv")]
    metrics: PathBuf,
}

pub fn train_hl(a: TrainHlArgs) -> Result<()> {
    let cfg = prepare(&a.common, "train-hl")?;
    let rl = read_relabeled(&a.common.path(&a.relabeled))?;
    if rl.horizon != cfg.horizon || rl.num_skills != cfg.num_skills {
        return Err(DdsError::Config(format!(
            "relabeled data has H={}, K={}; config has H={}, K={}",
            rl.horizon, rl.num_skills, cfg.horizon, cfg.num_skills
        )));
    }
    let out = train_highlevel(&rl, cfg.iql.clone(), cfg.seed)?;
    out.learner.save(&a.common.path(&a.output))?;
    write_csv(&a.common.path(&a.metrics), &out.metrics)?;
    eprintln!("train-hl: {} metric rows -> {}", out.metrics.len(), a.output.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "skills.ckpt")]
    skills: PathBuf,
    #[arg(long, default_value = "highlevel.ckpt")]
    highlevel: PathBuf,
    /// Per-seed success rates.
    #[arg(long, default_value = "eval_seeds.csv")]
    per_seed: PathBuf,
    /// Mean and standard deviation across seeds.
    #[arg(long, default_value = "eval_summary.json")]
    summary: PathBuf,
    /// Also write every step of every episode to this CSV.
    #[arg(long)]
    traces: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    env: &'a str,
    mode: dds_core::iql::SelectMode,
    episodes_per_seed: usize,
    seeds: &'a [u64],
    mean: f64,
    std: f64,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let cfg = prepare(&a.common, "eval")?;
    let (skills, learner) = load_pair(&a.common, &cfg, &a.skills, &a.highlevel)?;
    let env = cfg.env()?;
    let source = SkillSource::Policy(&learner, cfg.eval.mode);
    let report = evaluate(&env, &skills, source, cfg.eval.episodes, &cfg.eval.seeds)?;
    write_csv(&a.common.path(&a.per_seed), &report.per_seed)?;
    let summary = EvalSummary {
        env: &cfg.env,
        mode: cfg.eval.mode,
        episodes_per_seed: cfg.eval.episodes,
        seeds: &cfg.eval.seeds,
        mean: report.mean,
        std: report.std,
    };
    fs::write(a.common.path(&a.summary), serde_json::to_vec_pretty(&summary)?)?;
    if let Some(path) = &a.traces {
        let mut w = TraceWriter::create(&a.common.path(path), &env, &["eval_seed", "episode"])?;
        for &s in &cfg.eval.seeds {
            let traces = run_episodes(&env, &skills, source, &episode_seeds(s, cfg.eval.episodes), None)?;
            for (i, t) in traces.iter().enumerate() {
                w.write(&[s.to_string(), i.to_string()], t)?;
            }
        }
        w.finish()?;
    }
    println!("success {:.1} ± {:.1}", report.mean, report.std);
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "skills.ckpt")]
    skills: PathBuf,
    /// Skills to replay; all when omitted.
    #[arg(long, value_delimiter = ',')]
    skill: Option<Vec<usize>>,
    /// Start cell as ROW,COL; repeatable. Defaults to the evaluation start.
    #[arg(long = "start", value_name = "ROW,COL")]
    starts: Vec<String>,
    #[arg(long, default_value_t = 5)]
    rollouts: usize,
    /// Episode length; defaults to the environment limit.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "replay_trace.csv")]
    trace: PathBuf,
    /// One row per rollout with its end point.
    #[arg(long, default_value = "replay_endpoints.csv")]
    endpoints: PathBuf,
    #[arg(long, default_value = "replay_summary.json")]
    summary: PathBuf,
}

fn parse_cell(s: &str) -> Result<Cell> {
    let bad = || DdsError::Config(format!("start cell must be ROW,COL, got {s:?}"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok(Cell::new(r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

#[derive(Serialize)]
struct ReplaySummary {
    skills: Vec<usize>,
    starts: Vec<[usize; 2]>,
    rollouts: usize,
    success_rate: Vec<f64>,
    distinct_pairs: usize,
    total_pairs: usize,
}

pub fn replay_skill(a: ReplayArgs) -> Result<()> {
    let cfg = prepare(&a.common, "replay-skill")?;
    let skills = SkillModel::load(&a.common.path(&a.skills))?;
    cfg.check_models(&skills, None)?;
    let env = cfg.env()?;
    let k = skills.config.num_skills;
    let chosen = a.skill.clone().unwrap_or_else(|| (0..k).collect());
    if let Some(&bad) = chosen.iter().find(|&&s| s >= k) {
        return Err(DdsError::Config(format!("skill {bad} outside [0, {k})")));
    }
    let starts: Vec<Cell> = if a.starts.is_empty() {
        vec![env.maze().map(|m| m.layout.start).unwrap_or(Cell::new(0, 0))]
    } else {
        a.starts.iter().map(|s| parse_cell(s)).collect::<Result<_>>()?
    };
    if let Some(m) = env.maze() {
        for c in &starts {
            if m.layout.is_wall(c.row as isize, c.col as isize) {
                return Err(DdsError::Config(format!("start cell ({}, {}) is a wall", c.row, c.col)));
            }
        }
    }
    let steps = a.steps.unwrap_or(env.spec().max_steps);
    let result = replay_skills(&env, &skills, &starts, a.rollouts, steps, cfg.seed)?;
    let keep = |s: &usize| chosen.contains(s);
    let rows: Vec<_> = result.rows.iter().filter(|r| keep(&r.skill)).cloned().collect();
    write_csv(&a.common.path(&a.endpoints), &rows)?;
    let mut w = TraceWriter::create(&a.common.path(&a.trace), &env, &["skill", "start_row", "start_col", "rollout"])?;
    // rows and traces are parallel
    for (row, (_, _, t)) in result.rows.iter().zip(&result.traces) {
        if keep(&row.skill) {
            let key = [row.skill, row.start_row, row.start_col, row.rollout].map(|v| v.to_string());
            w.write(&key, t)?;
        }
    }
    w.finish()?;
    let (distinct, total) = distinct_skill_pairs(&result.rows, k);
    let success_rate = chosen
        .iter()
        .map(|&s| {
            let mine: Vec<_> = result.rows.iter().filter(|r| r.skill == s).collect();
            100.0 * mine.iter().filter(|r| r.success).count() as f64 / mine.len().max(1) as f64
        })
        .collect();
    let summary = ReplaySummary {
        skills: chosen,
        starts: starts.iter().map(|c| [c.row, c.col]).collect(),
        rollouts: a.rollouts,
        success_rate,
        distinct_pairs: distinct,
        total_pairs: total,
    };
    fs::write(a.common.path(&a.summary), serde_json::to_vec_pretty(&summary)?)?;
    println!("distinct skill pairs {distinct}/{total}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Existing dataset to share across cells; generated from the config when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
    ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64,128")]
    dzs: Vec<usize>,
    /// Horizons for the H curve, at the configured K and D_z.
    #[arg(long, value_delimiter = ',')]
    horizons: Vec<usize>,
    /// K-by-D_z table of mean ± std.
    #[arg(long, default_value = "sweep_table.csv")]
    table: PathBuf,
    /// One row per grid cell.
    #[arg(long, default_value = "sweep_rows.csv")]
    rows: PathBuf,
    #[arg(long, default_value = "h_curve.csv")]
    h_curve: PathBuf,
}

fn write_rows(path: &Path, rows: &[SweepRow]) -> Result<()> {
    if rows.is_empty() {
        fs::write(path, "num_skills,dim_z,horizon,mean,std,status\n")?;
        return Ok(());
    }
    write_csv(path, rows)
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = prepare(&a.common, "sweep")?;
    if a.ks.is_empty() || a.dzs.is_empty() || a.ks.contains(&0) || a.dzs.contains(&0) || a.horizons.contains(&0) {
        return Err(DdsError::Config("sweep values must be positive and non-empty".into()));
    }
    let ds = match &a.dataset {
        Some(p) => read_dataset(&a.common.path(p))?,
        None => generate(&cfg)?,
    };
    let rows = run_sweep(&cfg, &ds, &grid(&a.ks, &a.dzs, cfg.horizon));
    write_rows(&a.common.path(&a.rows), &rows)?;
    fs::write(a.common.path(&a.table), table_csv(&rows)?)?;
    let h_cells: Vec<SweepCell> =
        a.horizons.iter().map(|&h| SweepCell { num_skills: cfg.num_skills, dim_z: cfg.dim_z, horizon: h }).collect();
    let h_rows = run_sweep(&cfg, &ds, &h_cells);
    write_rows(&a.common.path(&a.h_curve), &h_rows)?;
    for r in rows.iter().chain(&h_rows) {
        println!("K={} D_z={} H={}: {:.1} ± {:.1} ({})", r.num_skills, r.dim_z, r.horizon, r.mean, r.std, r.status);
    }
    Ok(())
}

/// Step-level trace CSV: key columns, then `t`, state, action, skill, reward.
struct TraceWriter {
    w: csv::Writer<fs::File>,
}

impl TraceWriter {
    fn create(path: &Path, env: &Env, keys: &[&str]) -> Result<Self> {
        let spec = env.spec();
        let mut header: Vec<String> = keys.iter().map(|s| s.to_string()).collect();
        header.push("t".into());
        header.extend((0..spec.dim_s).map(|i| format!("s{i}")));
        header.extend((0..spec.dim_a).map(|i| format!("a{i}")));
        header.extend(["skill_index".into(), "reward".into()]);
        let mut w = csv::Writer::from_path(path).map_err(DdsError::from)?;
        w.write_record(&header).map_err(DdsError::from)?;
        Ok(Self { w })
    }

    fn write(&mut self, keys: &[String], trace: &SkillTrace) -> Result<()> {
        for s in &trace.steps {
            let mut rec = keys.to_vec();
            rec.push(s.t.to_string());
            rec.extend(s.state.iter().map(|v| v.to_string()));
            rec.extend(s.action.iter().map(|v| v.to_string()));
            rec.push(s.skill.to_string());
            rec.push(s.reward.to_string());
            self.w.write_record(&rec).map_err(DdsError::from)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}
