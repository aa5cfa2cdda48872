//! Skill extraction: transformer window encoder, quantized codebook and the
//! diffusion action decoder, trained jointly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use dds_autodiff::checkpoint::{collect_stores, decode_tensors, encode_tensors, restore_store};
use dds_autodiff::rng::normal_vec;
use dds_autodiff::{AdamConfig, AdamState, Binder, Graph, LayerNorm, Linear, Mlp, Mode, ParamId, ParamStore, SeedStreams, StreamRng, Tensor, Var};

use crate::dataset::{NormStats, OfflineDataset, TrajectoryWindow};
use crate::diffusion::{clip_action, denoise, noise_pred_loss, NoiseNet, NoiseNetConfig, NoiseSchedule};
use crate::error::{config_err, data_err, DdsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { layers: 4, heads: 8, hidden: 256, dropout: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillConfig {
    pub dim_s: usize,
    pub dim_a: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
    pub num_skills: usize,
    pub dim_z: usize,
    pub encoder: EncoderConfig,
    pub decoder: NoiseNetConfig,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Commitment weight.
    pub beta: f64,
}

impl SkillConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.heads == 0 || e.hidden % e.heads != 0 {
            return Err(config_err(format!("encoder hidden {} is not divisible by {} heads", e.hidden, e.heads)));
        }
        if self.horizon == 0 || self.dim_z == 0 || self.num_skills == 0 {
            return Err(config_err("horizon, skill dimension and skill count must be positive"));
        }
        if !(0.0..1.0).contains(&e.dropout) || !(0.0..1.0).contains(&self.decoder.dropout) {
            return Err(config_err("dropout must lie in [0, 1)"));
        }
        if self.beta < 0.0 {
            return Err(config_err("commitment weight must be non-negative"));
        }
        if self.action_low.len() != self.dim_a || self.action_high.len() != self.dim_a {
            return Err(config_err("action bounds do not match the action dimension"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    proj: Linear,
    norm1: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    norm2: LayerNorm,
}

/// Post-norm transformer over the `H` steps of a window, mean-pooled and
/// projected to the skill dimension.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub horizon: usize,
    embed: Linear,
    positions: ParamId,
    layers: Vec<EncoderLayer>,
    head: Mlp,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: EncoderConfig,
        dim_in: usize,
        horizon: usize,
        dim_z: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let h = config.hidden;
        let embed = Linear::new(store, "encoder.embed", dim_in, h, rng)?;
        let pos: Vec<f64> = (0..horizon * h).map(|_| 0.02 * dds_autodiff::rng::normal(rng)).collect();
        let positions = store.insert("encoder.positions", Tensor::new(vec![horizon, h], pos)?)?;
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("encoder.layer{i}");
                Ok(EncoderLayer {
                    query: Linear::new(store, &format!("{p}.query"), h, h, rng)?,
                    key: Linear::new(store, &format!("{p}.key"), h, h, rng)?,
                    value: Linear::new(store, &format!("{p}.value"), h, h, rng)?,
                    proj: Linear::new(store, &format!("{p}.proj"), h, h, rng)?,
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), h)?,
                    ff_in: Linear::new(store, &format!("{p}.ff_in"), h, 4 * h, rng)?,
                    ff_out: Linear::new(store, &format!("{p}.ff_out"), 4 * h, h, rng)?,
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), h)?,
                })
            })
            .collect::<Result<_>>()?;
        let head = Mlp::new(store, "encoder.head", &[h, h, dim_z], rng)?;
        Ok(Self { config, horizon, embed, positions, layers, head })
    }

    /// Embeds `batch` windows given as `[batch*H, dim_s + dim_a]` rows.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, p: Binder<'_>, steps: Var, batch: usize, rng: &mut R) -> Result<Var> {
        let rows = g.shape(steps)[0];
        if rows != batch * self.horizon {
            return Err(config_err(format!(
                "encoder expects windows of {} steps, got {rows} rows for {batch} windows",
                self.horizon
            )));
        }
        let (h, heads) = (self.config.hidden, self.config.heads);
        let drop = self.config.dropout;
        let x = self.embed.forward(g, p, steps)?;
        let pos = p.bind(g, self.positions);
        let mut x = g.add_tiled(x, pos)?;
        let scale = 1.0 / ((h / heads) as f64).sqrt();
        for l in &self.layers {
            let q = l.query.forward(g, p, x)?;
            let k = l.key.forward(g, p, x)?;
            let v = l.value.forward(g, p, x)?;
            let q = g.split_heads(q, batch, self.horizon, heads)?;
            let k = g.split_heads(k, batch, self.horizon, heads)?;
            let v = g.split_heads(v, batch, self.horizon, heads)?;
            let scores = g.bmm(q, k, true)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            let ctx = g.bmm(attn, v, false)?;
            let ctx = g.merge_heads(ctx, batch, self.horizon, heads)?;
            let a = l.proj.forward(g, p, ctx)?;
            let a = g.dropout(a, drop, rng)?;
            let r = g.add(x, a)?;
            x = l.norm1.forward(g, p, r)?;
            let f = l.ff_in.forward(g, p, x)?;
            let f = g.relu(f);
            let f = l.ff_out.forward(g, p, f)?;
            let f = g.dropout(f, drop, rng)?;
            let r = g.add(x, f)?;
            x = l.norm2.forward(g, p, r)?;
        }
        let pooled = g.mean_pool(x, self.horizon)?;
        Ok(self.head.forward(g, p, pooled)?)
    }
}

/// Index of the nearest row of `vectors: [K, D]`; ties go to the lowest index.
pub fn nearest(vectors: &Tensor, embedding: &[f64]) -> Result<(usize, f64)> {
    if vectors.rows() == 0 {
        return Err(config_err("codebook is empty"));
    }
    if vectors.cols() != embedding.len() {
        return Err(config_err(format!("embedding has {} dims, codebook has {}", embedding.len(), vectors.cols())));
    }
    let mut best = (0, f64::INFINITY);
    for k in 0..vectors.rows() {
        let d: f64 = vectors.row(k).iter().zip(embedding).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok((best.0, best.1.sqrt()))
}

/// Skill vectors with per-epoch usage counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub vectors: Tensor,
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() == 0 {
            return Err(config_err("codebook needs a [K, D] matrix with K >= 1"));
        }
        let k = vectors.rows();
        Ok(Self { vectors, usage: vec![0; k] })
    }

    /// `N(0, 1) / sqrt(D)` initialization.
    pub fn init<R: Rng + ?Sized>(k: usize, dim: usize, rng: &mut R) -> Result<Tensor> {
        let scale = 1.0 / (dim as f64).sqrt();
        Ok(Tensor::new(vec![k, dim], normal_vec(rng, k * dim).into_iter().map(|v| v * scale).collect())?)
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Nearest code, counted in the usage statistics.
    pub fn quantize(&mut self, embedding: &[f64]) -> Result<(usize, Vec<f64>)> {
        let (k, _) = nearest(&self.vectors, embedding)?;
        self.usage[k] += 1;
        Ok((k, self.vectors.row(k).to_vec()))
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    pub fn perplexity(&self) -> Result<f64> {
        perplexity(&self.usage)
    }
}

/// `exp` of the entropy of the empirical usage distribution.
pub fn perplexity(usage: &[u64]) -> Result<f64> {
    let total: u64 = usage.iter().sum();
    if total == 0 {
        return Err(data_err("perplexity of a codebook with no recorded usage"));
    }
    let h: f64 = usage
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SkillLossReport {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub beta: f64,
    pub total: f64,
}

/// Loss terms of one batch as graph nodes.
pub struct SkillLoss {
    pub total: Var,
    pub reconstruction: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub indices: Vec<usize>,
}

impl SkillLoss {
    pub fn report(&self, g: &Graph, beta: f64) -> SkillLossReport {
        SkillLossReport {
            reconstruction: g.value(self.reconstruction).item(),
            codebook: g.value(self.codebook).item(),
            commitment: g.value(self.commitment).item(),
            beta,
            total: g.value(self.total).item(),
        }
    }
}

/// Diffusion draws for one batch: a step and a noise vector per window step.
#[derive(Clone, Debug)]
pub struct DiffusionDraws {
    pub t: Vec<usize>,
    pub eps: Tensor,
}

impl DiffusionDraws {
    pub fn sample<R: Rng + ?Sized>(rows: usize, dim_a: usize, steps: usize, rng: &mut R) -> Result<Self> {
        let t = (0..rows).map(|_| rng.random_range(1..=steps)).collect();
        let eps = Tensor::new(vec![rows, dim_a], normal_vec(rng, rows * dim_a))?;
        Ok(Self { t, eps })
    }
}

/// Normalized window batch: `steps` is `[B*H, dim_s + dim_a]`, `states`
/// `[B*H, dim_s]` and `actions` `[B*H, dim_a]`.
pub struct WindowBatch {
    pub batch: usize,
    pub steps: Tensor,
    pub states: Tensor,
    pub actions: Tensor,
}

impl WindowBatch {
    pub fn new(windows: &[&TrajectoryWindow], norm: &NormStats) -> Result<Self> {
        let first = windows.first().ok_or_else(|| data_err("empty window batch"))?;
        let (h, ds, da) = (first.horizon, first.dim_s, first.dim_a);
        let rows = windows.len() * h;
        let (mut steps, mut states, mut actions) =
            (Vec::with_capacity(rows * (ds + da)), Vec::with_capacity(rows * ds), Vec::with_capacity(rows * da));
        for w in windows {
            if w.horizon != h || w.dim_s != ds || w.dim_a != da {
                return Err(data_err("windows in one batch must share horizon and dimensions"));
            }
            for i in 0..h {
                let s = norm.norm_state(w.state(i));
                let a = norm.norm_action(w.action(i));
                steps.extend(&s);
                steps.extend(&a);
                states.extend(s);
                actions.extend(a);
            }
        }
        Ok(Self {
            batch: windows.len(),
            steps: Tensor::new(vec![rows, ds + da], steps)?,
            states: Tensor::new(vec![rows, ds], states)?,
            actions: Tensor::new(vec![rows, da], actions)?,
        })
    }
}

/// Encoder, codebook and decoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct SkillModel {
    pub config: SkillConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub codebook: ParamId,
    pub decoder: NoiseNet,
    pub schedule: NoiseSchedule,
    pub norm: NormStats,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: SkillConfig,
    norm: NormStats,
    schedule: NoiseSchedule,
    fingerprint: String,
}

impl SkillModel {
    pub fn new<R: Rng + ?Sized>(config: SkillConfig, norm: NormStats, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config.encoder, config.dim_s + config.dim_a, config.horizon, config.dim_z, rng)?;
        let codebook = store.insert("codebook.vectors", Codebook::init(config.num_skills, config.dim_z, rng)?)?;
        let decoder = NoiseNet::new(&mut store, "decoder", config.decoder, config.dim_a, config.dim_s + config.dim_z, rng)?;
        let schedule = NoiseSchedule::new(config.diffusion_steps, config.beta_min, config.beta_max)?;
        Ok(Self { config, store, encoder, codebook, decoder, schedule, norm })
    }

    pub fn codebook_vectors(&self) -> &Tensor {
        self.store.value(self.codebook)
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::new(self.codebook_vectors().clone())
    }

    /// Builds the loss graph of one batch with given diffusion draws.
    pub fn loss_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &WindowBatch,
        draws: &DiffusionDraws,
        rng: &mut R,
    ) -> Result<SkillLoss> {
        let p = Binder::trainable(store);
        let steps = g.input(batch.steps.clone());
        let emb = self.encoder.forward(g, p, steps, batch.batch, rng)?;
        let codes = p.bind(g, self.codebook);
        let indices = {
            let e = g.value(emb);
            (0..batch.batch).map(|i| nearest(store.value(self.codebook), e.row(i)).map(|r| r.0)).collect::<Result<Vec<_>>>()?
        };
        let z = g.gather_rows(codes, &indices)?;
        let emb_sg = g.stop_gradient(emb);
        let z_sg = g.stop_gradient(z);
        let d_cb = g.sub(emb_sg, z)?;
        let sq = g.square(d_cb);
        let codebook = g.mean(sq);
        let d_cm = g.sub(emb, z_sg)?;
        let sq = g.square(d_cm);
        let commitment = g.mean(sq);
        let st = g.straight_through(emb, z)?;
        let z_rows = g.repeat_rows(st, self.config.horizon)?;
        let s = g.input(batch.states.clone());
        let cond = g.concat(&[s, z_rows])?;
        let reconstruction =
            noise_pred_loss(g, &self.decoder, p, &self.schedule, &batch.actions, cond, &draws.t, &draws.eps, rng)?;
        let weighted = g.scale(commitment, self.config.beta);
        let partial = g.add(reconstruction, codebook)?;
        let total = g.add(partial, weighted)?;
        Ok(SkillLoss { total, reconstruction, codebook, commitment, indices })
    }

    /// Continuous embeddings `[n, D_z]` in eval mode.
    pub fn embed(&self, windows: &[TrajectoryWindow]) -> Result<Tensor> {
        let mut out = Vec::with_capacity(windows.len() * self.config.dim_z);
        let mut unused = SeedStreams::new(0).stream("unused");
        for chunk in windows.chunks(256) {
            let refs: Vec<&TrajectoryWindow> = chunk.iter().collect();
            self.check_windows(&refs)?;
            let batch = WindowBatch::new(&refs, &self.norm)?;
            let mut g = Graph::new(Mode::Eval);
            let steps = g.input(batch.steps);
            let e = self.encoder.forward(&mut g, Binder::frozen(&self.store), steps, chunk.len(), &mut unused)?;
            out.extend_from_slice(g.value(e).data());
        }
        Ok(Tensor::new(vec![windows.len(), self.config.dim_z], out)?)
    }

    pub fn encode(&self, window: &TrajectoryWindow) -> Result<Vec<f64>> {
        Ok(self.embed(std::slice::from_ref(window))?.into_data())
    }

    /// Nearest-code index of every window.
    pub fn skill_indices(&self, windows: &[TrajectoryWindow]) -> Result<Vec<usize>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let e = self.embed(windows)?;
        (0..windows.len()).map(|i| nearest(self.codebook_vectors(), e.row(i)).map(|r| r.0)).collect()
    }

    fn check_windows(&self, windows: &[&TrajectoryWindow]) -> Result<()> {
        for w in windows {
            if w.horizon != self.config.horizon {
                return Err(config_err(format!("window horizon {} does not match model horizon {}", w.horizon, self.config.horizon)));
            }
            if w.dim_s != self.config.dim_s || w.dim_a != self.config.dim_a {
                return Err(config_err("window dimensions do not match the skill model"));
            }
        }
        Ok(())
    }

    /// Samples one action per (state, skill) pair with one rng per row;
    /// actions are denormalized and clipped to the action box.
    pub fn sample_actions(&self, states: &[Vec<f64>], skills: &[usize], rngs: &mut [StreamRng]) -> Result<Vec<Vec<f64>>> {
        let (ds, dz) = (self.config.dim_s, self.config.dim_z);
        if states.len() != skills.len() || states.len() != rngs.len() {
            return Err(config_err("one skill and one rng per state required"));
        }
        let codes = self.codebook_vectors();
        let mut cond = Vec::with_capacity(states.len() * (ds + dz));
        for (s, &k) in states.iter().zip(skills) {
            if s.len() != ds {
                return Err(config_err(format!("state has {} dims, skill model expects {ds}", s.len())));
            }
            if k >= self.config.num_skills {
                return Err(config_err(format!("skill {k} outside [0, {})", self.config.num_skills)));
            }
            cond.extend(self.norm.norm_state(s));
            cond.extend_from_slice(codes.row(k));
        }
        let cond = Tensor::new(vec![states.len(), ds + dz], cond)?;
        let x = denoise(&self.decoder, &self.store, &self.schedule, &cond, rngs)?;
        Ok((0..states.len())
            .map(|i| {
                let mut a = self.norm.denorm_action(x.row(i));
                clip_action(&mut a, &self.config.action_low, &self.config.action_high);
                a
            })
            .collect())
    }

    fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        Ok(collect_stores(&[("", &self.store)])?)
    }

    /// Hex CRC-32 over the parameters and configuration.
    pub fn fingerprint(&self) -> String {
        let mut h = crc32fast::Hasher::new();
        if let Ok(bytes) = self.tensors().and_then(|t| Ok(encode_tensors(&t)?)) {
            h.update(&bytes);
        }
        if let Ok(cfg) = serde_json::to_vec(&self.config) {
            h.update(&cfg);
        }
        format!("{:08x}", h.finalize())
    }

    /// Writes the tensor container to `path` and the JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, encode_tensors(&self.tensors()?)?)?;
        let sidecar = Sidecar {
            config: self.config.clone(),
            norm: self.norm.clone(),
            schedule: self.schedule.clone(),
            fingerprint: self.fingerprint(),
        };
        fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)
            .map_err(|e| data_err(format!("skill sidecar: {e}")))?;
        let tensors = decode_tensors(&fs::read(path)?)?;
        let mut rng = SeedStreams::new(0).stream("load");
        let mut model = Self::new(sidecar.config, sidecar.norm, &mut rng)?;
        restore_store(&mut model.store, "", &tensors)?;
        if tensors.len() != model.store.len() {
            return Err(data_err("skill checkpoint has unexpected extra arrays"));
        }
        model.schedule = sidecar.schedule;
        if model.fingerprint() != sidecar.fingerprint {
            return Err(data_err("skill checkpoint does not match its sidecar fingerprint"));
        }
        Ok(model)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for SkillTrainConfig {
    fn default() -> Self {
        Self { steps: 50_000, batch: 128, lr: 5e-5 }
    }
}

/// Mean loss terms and codebook usage over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillEpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
    pub perplexity: f64,
    pub used_codes: usize,
}

pub struct SkillTrainOutput {
    pub model: SkillModel,
    pub epochs: Vec<SkillEpochRecord>,
    /// Total loss of every step.
    pub losses: Vec<f64>,
}

/// Joint training of encoder, codebook and decoder on non-overlapping windows.
pub fn train_skills(
    dataset: &OfflineDataset,
    config: SkillConfig,
    train: &SkillTrainConfig,
    seed: u64,
) -> Result<SkillTrainOutput> {
    let windows = dataset.windows(config.horizon);
    if windows.is_empty() {
        return Err(data_err(format!("dataset has no window of {} steps", config.horizon)));
    }
    if train.batch == 0 {
        return Err(config_err("batch size must be positive"));
    }
    let streams = SeedStreams::new(seed);
    let mut init_rng = streams.stream("skill.init");
    let mut model = SkillModel::new(config, dataset.norm_stats(), &mut init_rng)?;
    let mut batch_rng = streams.stream("skill.batch");
    let mut diff_rng = streams.stream("skill.diffusion");
    let mut drop_rng = streams.stream("skill.dropout");
    let mut adam = AdamState::for_store(AdamConfig::with_lr(train.lr), &model.store);
    let steps_per_epoch = windows.len().div_ceil(train.batch).max(1);
    let mut epochs = Vec::new();
    let mut losses = Vec::with_capacity(train.steps);
    let mut usage = vec![0u64; model.config.num_skills];
    let mut acc = SkillLossReport::default();
    let mut in_epoch = 0usize;
    for step in 0..train.steps {
        let picked: Vec<&TrajectoryWindow> =
            (0..train.batch).map(|_| &windows[batch_rng.random_range(0..windows.len())]).collect();
        let batch = WindowBatch::new(&picked, &model.norm)?;
        let draws = DiffusionDraws::sample(batch.batch * model.config.horizon, model.config.dim_a, model.schedule.steps, &mut diff_rng)?;
        let mut g = Graph::new(Mode::Train);
        let loss = model.loss_graph(&mut g, &model.store, &batch, &draws, &mut drop_rng)?;
        let report = loss.report(&g, model.config.beta);
        if !report.total.is_finite() {
            return Err(DdsError::Numeric(format!(
                "skill loss became non-finite at step {step}: recon={} codebook={} commitment={}",
                report.reconstruction, report.codebook, report.commitment
            )));
        }
        model.store.zero_grad();
        g.backward_into(loss.total, &mut model.store)?;
        if !model.store.grads_finite() {
            return Err(DdsError::Numeric(format!("non-finite skill gradient at step {step}")));
        }
        adam.step(&mut model.store)?;
        losses.push(report.total);
        for &k in &loss.indices {
            usage[k] += 1;
        }
        acc.reconstruction += report.reconstruction;
        acc.codebook += report.codebook;
        acc.commitment += report.commitment;
        acc.total += report.total;
        in_epoch += 1;
        if in_epoch == steps_per_epoch || step + 1 == train.steps {
            let n = in_epoch as f64;
            epochs.push(SkillEpochRecord {
                epoch: epochs.len(),
                step: step + 1,
                reconstruction: acc.reconstruction / n,
                codebook: acc.codebook / n,
                commitment: acc.commitment / n,
                total: acc.total / n,
                perplexity: perplexity(&usage)?,
                used_codes: usage.iter().filter(|&&u| u > 0).count(),
            });
            usage.iter_mut().for_each(|u| *u = 0);
            acc = SkillLossReport::default();
            in_epoch = 0;
        }
    }
    Ok(SkillTrainOutput { model, epochs, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_picks_closest_and_lowest_on_ties() {
        let cb = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(nearest(&cb, &[0.9, 0.8]).unwrap().0, 1);
        let tie = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(nearest(&tie, &[0.0, 0.0]).unwrap().0, 0);
        assert_eq!(nearest(&tie, &[1.0, 0.0]).unwrap(), (0, 0.0));
    }

    #[test]
    fn quantize_counts_usage() {
        let mut cb = Codebook::new(Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap()).unwrap();
        let (k, z) = cb.quantize(&[3.0]).unwrap();
        assert_eq!((k, z), (3, vec![3.0]));
        cb.quantize(&[0.1]).unwrap();
        assert_eq!(cb.usage, vec![1, 0, 0, 1]);
    }

    #[test]
    fn perplexity_values() {
        assert!((perplexity(&[5; 16]).unwrap() - 16.0).abs() < 1e-12);
        assert!((perplexity(&[0, 9, 0]).unwrap() - 1.0).abs() < 1e-15);
        let h: f64 = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((perplexity(&[3, 1]).unwrap() - h.exp()).abs() < 1e-12);
        assert!((perplexity(&[3, 1]).unwrap() - 1.7548).abs() < 1e-4);
        assert!(perplexity(&[0, 0]).is_err());
    }

    #[test]
    fn sidecar_path_appends_json() {
        assert_eq!(sidecar_path(Path::new("out/skills.ckpt")), PathBuf::from("out/skills.ckpt.json"));
    }
}
