//! Conditional DDPM action decoder: VP schedule, closed-form forward noising,
//! noise-prediction loss and the ancestral sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use dds_autodiff::rng::normal;
use dds_autodiff::{Binder, SeedStreams, Graph, LayerNorm, Linear, Mode, ParamStore, Tensor, Var};

use crate::error::{config_err, DdsError, Result};

/// Discretized variance-preserving schedule; index `t - 1` holds step `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `beta_t = 1 - exp(-beta_min/T - (beta_max - beta_min)(2t - 1)/(2T^2))`.
    pub fn new(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 || !(beta_min > 0.0) || !(beta_max >= beta_min) || !beta_max.is_finite() {
            return Err(config_err(format!(
                "schedule needs T >= 1 and 0 < beta_min <= beta_max, got T={steps}, beta_min={beta_min}, beta_max={beta_max}"
            )));
        }
        let tf = steps as f64;
        let beta: Vec<f64> = (1..=steps)
            .map(|t| 1.0 - (-beta_min / tf - (beta_max - beta_min) * (2.0 * t as f64 - 1.0) / (2.0 * tf * tf)).exp())
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { steps, beta_min, beta_max, beta, alpha, alpha_bar })
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(config_err(format!("diffusion step {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior variance `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn forward_noise(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        if x0.len() != eps.len() {
            return Err(config_err(format!("x0 has {} dims, eps has {}", x0.len(), eps.len())));
        }
        let ab = self.alpha_bar(t);
        Ok(x0.iter().zip(eps).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect())
    }

    /// Mean of `x_{t-1}` given `x_t` and a noise prediction.
    pub fn posterior_mean(&self, x_t: f64, eps_hat: f64, t: usize) -> f64 {
        (x_t - self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt() * eps_hat) / self.alpha(t).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseNetConfig {
    pub hidden: usize,
    pub time_dim: usize,
    pub blocks: usize,
    pub dropout: f64,
}

impl Default for NoiseNetConfig {
    fn default() -> Self {
        Self { hidden: 256, time_dim: 16, blocks: 4, dropout: 0.1 }
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm: LayerNorm,
    expand: Linear,
    compress: Linear,
}

/// Residual MLP predicting the noise from `(x_t, cond, time embedding)`.
#[derive(Clone, Debug)]
pub struct NoiseNet {
    pub config: NoiseNetConfig,
    pub dim_a: usize,
    pub dim_cond: usize,
    input: Linear,
    blocks: Vec<Block>,
    output: Linear,
}

impl NoiseNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: NoiseNetConfig,
        dim_a: usize,
        dim_cond: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let h = config.hidden;
        if h == 0 || config.time_dim < 4 || config.time_dim % 2 != 0 {
            return Err(config_err("noise net needs hidden >= 1 and an even time embedding of at least 4"));
        }
        let input = Linear::new(store, &format!("{prefix}.input"), dim_a + dim_cond + config.time_dim, h, rng)?;
        let blocks = (0..config.blocks)
            .map(|i| {
                let p = format!("{prefix}.block{i}");
                Ok(Block {
                    norm: LayerNorm::new(store, &format!("{p}.norm"), h)?,
                    expand: Linear::new(store, &format!("{p}.expand"), h, 4 * h, rng)?,
                    compress: Linear::new(store, &format!("{p}.compress"), 4 * h, h, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let output = Linear::new(store, &format!("{prefix}.output"), h, dim_a, rng)?;
        Ok(Self { config, dim_a, dim_cond, input, blocks, output })
    }

    /// Predicted noise `[n, dim_a]` for noisy actions `x_t: [n, dim_a]`,
    /// conditioning `cond: [n, dim_cond]` and per-row steps `t`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: Binder<'_>,
        x_t: Var,
        cond: Var,
        t: &[usize],
        rng: &mut R,
    ) -> Result<Var> {
        let positions: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let temb = g.sinusoidal(&positions, self.config.time_dim)?;
        let x = g.concat(&[x_t, cond, temb])?;
        let mut h = self.input.forward(g, p, x)?;
        for b in &self.blocks {
            let d = g.dropout(h, self.config.dropout, rng)?;
            let n = b.norm.forward(g, p, d)?;
            let e = b.expand.forward(g, p, n)?;
            let e = g.relu(e);
            let c = b.compress.forward(g, p, e)?;
            h = g.add(h, c)?;
        }
        let h = g.relu(h);
        Ok(self.output.forward(g, p, h)?)
    }
}

/// Mean squared error between `eps` and the prediction at
/// `forward_noise(x0, t, eps)`, averaged over rows and action dims.
#[allow(clippy::too_many_arguments)]
pub fn noise_pred_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &NoiseNet,
    p: Binder<'_>,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    cond: Var,
    t: &[usize],
    eps: &Tensor,
    rng: &mut R,
) -> Result<Var> {
    let (n, da) = (x0.rows(), x0.cols());
    if eps.shape() != x0.shape() || t.len() != n || da != net.dim_a {
        return Err(config_err("noise_pred_loss: x0, eps and t disagree in shape"));
    }
    let mut xt = Vec::with_capacity(n * da);
    for (i, &ti) in t.iter().enumerate() {
        xt.extend(schedule.forward_noise(x0.row(i), ti, eps.row(i))?);
    }
    let xt = g.input(Tensor::new(vec![n, da], xt)?);
    let pred = net.forward(g, p, xt, cond, t, rng)?;
    let target = g.input(eps.clone());
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Ancestral sampling for a batch of conditions, one rng per row so that a
/// row's sample does not depend on the rest of the batch. Returns unclipped
/// samples `[n, dim_a]`.
pub fn denoise<R: Rng>(net: &NoiseNet, store: &ParamStore, schedule: &NoiseSchedule, cond: &Tensor, rngs: &mut [R]) -> Result<Tensor> {
    let n = cond.rows();
    let da = net.dim_a;
    if rngs.len() != n || cond.cols() != net.dim_cond {
        return Err(config_err("denoise: one rng per condition row and matching condition width required"));
    }
    let mut x: Vec<f64> = rngs.iter_mut().flat_map(|r| (0..da).map(|_| normal(r)).collect::<Vec<_>>()).collect();
    // eval-mode graphs never draw dropout masks
    let mut unused = SeedStreams::new(0).stream("unused");
    for t in (1..=schedule.steps).rev() {
        let mut g = Graph::new(Mode::Eval);
        let xv = g.input(Tensor::new(vec![n, da], x.clone())?);
        let cv = g.input(cond.clone());
        let eps = net.forward(&mut g, Binder::frozen(store), xv, cv, &vec![t; n], &mut unused)?;
        let eps = g.value(eps).data().to_vec();
        let sigma = schedule.posterior_variance(t).sqrt();
        for (row, r) in rngs.iter_mut().enumerate() {
            for j in 0..da {
                let k = row * da + j;
                let mut v = schedule.posterior_mean(x[k], eps[k], t);
                if t > 1 {
                    v += sigma * normal(r);
                }
                x[k] = v;
            }
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(DdsError::Numeric(format!("sampler produced a non-finite value at step t={t}, row {}", pos / da)));
        }
    }
    Ok(Tensor::new(vec![n, da], x)?)
}

/// Clips each coordinate into `[low, high]`.
pub fn clip_action(a: &mut [f64], low: &[f64], high: &[f64]) {
    for ((v, lo), hi) in a.iter_mut().zip(low).zip(high) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Draws one action per condition row and clips it into the action box.
pub fn sample_actions<R: Rng>(
    net: &NoiseNet,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    cond: &Tensor,
    rngs: &mut [R],
    low: &[f64],
    high: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let x = denoise(net, store, schedule, cond, rngs)?;
    Ok((0..x.rows())
        .map(|i| {
            let mut a = x.row(i).to_vec();
            clip_action(&mut a, low, high);
            a
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_one_matches_scripted_value() {
        let s = NoiseSchedule::new(5, 0.1, 10.0).unwrap();
        assert!((s.beta[0] - 0.195_874_558_333_440_36).abs() < 1e-6, "{}", s.beta[0]);
        assert!((s.beta[4] - 0.835_031_379_177_368_6).abs() < 1e-12);
    }

    #[test]
    fn equal_bounds_collapse_to_constant_beta() {
        let s = NoiseSchedule::new(7, 0.3, 0.3).unwrap();
        let want = 1.0 - (-0.3f64 / 7.0).exp();
        assert!(s.beta.iter().all(|b| (b - want).abs() < 1e-15));
    }

    #[test]
    fn alpha_bar_is_the_running_product() {
        let s = NoiseSchedule::new(5, 0.1, 10.0).unwrap();
        for t in 1..=5 {
            let prod: f64 = (1..=t).map(|i| 1.0 - s.beta(i)).product();
            assert!((s.alpha_bar(t) - prod).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(NoiseSchedule::new(0, 0.1, 10.0).is_err());
        assert!(NoiseSchedule::new(5, 0.0, 10.0).is_err());
        assert!(NoiseSchedule::new(5, 1.0, 0.5).is_err());
        let s = NoiseSchedule::new(5, 0.1, 10.0).unwrap();
        assert!(s.forward_noise(&[1.0], 0, &[0.0]).is_err());
        assert!(s.forward_noise(&[1.0], 6, &[0.0]).is_err());
    }

    #[test]
    fn forward_noise_at_quarter_alpha_bar() {
        let mut s = NoiseSchedule::new(1, 0.1, 10.0).unwrap();
        s.alpha_bar[0] = 0.25;
        assert_eq!(s.forward_noise(&[1.0], 1, &[0.0]).unwrap(), vec![0.5]);
        // alpha_bar_0 = 1 leaves x0 untouched
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn ideal_denoise_at_step_one_recovers_x0() {
        let s = NoiseSchedule::new(5, 0.1, 10.0).unwrap();
        for (x0, e) in [(0.3, -1.2), (-2.0, 0.7), (0.0, 3.0)] {
            let xt = s.forward_noise(&[x0], 1, &[e]).unwrap()[0];
            assert!((s.posterior_mean(xt, e, 1) - x0).abs() < 1e-12);
        }
    }
}
