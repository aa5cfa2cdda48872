mod common;

use common::rng;
use dds_autodiff::rng::normal;
use dds_autodiff::{Binder, Graph, Mode, ParamStore, StreamRng, Tensor};
use dds_core::diffusion::{denoise, noise_pred_loss, sample_actions, NoiseNet, NoiseNetConfig, NoiseSchedule};
use rand::Rng;

fn zero_net(dim_a: usize, dim_cond: usize) -> (NoiseNet, ParamStore) {
    let mut store = ParamStore::new();
    let cfg = NoiseNetConfig { hidden: 8, time_dim: 4, blocks: 1, dropout: 0.0 };
    let net = NoiseNet::new(&mut store, "net", cfg, dim_a, dim_cond, &mut rng(0)).unwrap();
    for p in store.iter_mut() {
        if p.name.starts_with("net.output") {
            p.value.fill(0.0);
        }
    }
    (net, store)
}

#[test]
fn forward_noise_moments_match_alpha_bar() {
    let s = NoiseSchedule::new(5, 0.1, 10.0).unwrap();
    let mut r = rng(1);
    let x0 = 0.7;
    for t in 1..=5 {
        let n = 40_000;
        let xs: Vec<f64> = (0..n).map(|_| s.forward_noise(&[x0], t, &[normal(&mut r)]).unwrap()[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let ab = s.alpha_bar(t);
        assert!((mean - ab.sqrt() * x0).abs() < 0.02, "t={t} mean {mean}");
        assert!((var - (1.0 - ab)).abs() < 0.03, "t={t} var {var}");
    }
}

#[test]
fn loss_of_a_zero_predictor_is_mean_squared_noise() {
    let s = NoiseSchedule::new(5, 0.1, 10.0).unwrap();
    let (net, store) = zero_net(2, 3);
    let mut r = rng(2);
    let n = 6;
    let x0 = Tensor::new(vec![n, 2], (0..2 * n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let eps = Tensor::new(vec![n, 2], (0..2 * n).map(|_| normal(&mut r)).collect()).unwrap();
    let t: Vec<usize> = (0..n).map(|i| 1 + i % 5).collect();
    let mut g = Graph::new(Mode::Train);
    let cond = g.input(Tensor::new(vec![n, 3], vec![0.5; 3 * n]).unwrap());
    let loss = noise_pred_loss(&mut g, &net, Binder::frozen(&store), &s, &x0, cond, &t, &eps, &mut r).unwrap();
    let want = eps.data().iter().map(|e| e * e).sum::<f64>() / (2 * n) as f64;
    assert!((g.value(loss).item() - want).abs() < 1e-12);
}

/// Variance of the ancestral chain under a zero predictor, by the recursion
/// `v_{t-1} = v_t / alpha_t + sigma_t^2` (no noise at the last step).
fn zero_predictor_variance(s: &NoiseSchedule) -> f64 {
    let mut v = 1.0;
    for t in (1..=s.steps).rev() {
        let a = 1.0 - s.beta[t - 1];
        v /= a;
        if t > 1 {
            let ab = s.alpha_bar(t);
            let ab_prev = s.alpha_bar(t - 1);
            v += (1.0 - ab_prev) / (1.0 - ab) * s.beta[t - 1];
        }
    }
    v
}

#[test]
fn zero_predictor_sampler_variance_matches_recursion() {
    let s = NoiseSchedule::new(5, 0.1, 10.0).unwrap();
    let (net, store) = zero_net(1, 2);
    let n = 4000;
    let cond = Tensor::new(vec![n, 2], vec![0.0; 2 * n]).unwrap();
    let mut rngs: Vec<StreamRng> = (0..n as u64).map(|i| dds_autodiff::SeedStreams::new(3).indexed("row", i)).collect();
    let x = denoise(&net, &store, &s, &cond, &mut rngs).unwrap();
    let mean = x.data().iter().sum::<f64>() / n as f64;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let want = zero_predictor_variance(&s);
    assert!((var / want - 1.0).abs() < 0.05, "sample var {var}, recursion {want}");
}

#[test]
fn sampling_is_per_row_deterministic_and_clipped() {
    let s = NoiseSchedule::new(5, 0.1, 10.0).unwrap();
    let (net, store) = zero_net(2, 1);
    let rows = |seeds: &[u64]| -> Vec<StreamRng> { seeds.iter().map(|&i| dds_autodiff::SeedStreams::new(i).stream("row")).collect() };
    let cond = Tensor::new(vec![3, 1], vec![0.0; 3]).unwrap();
    let a = sample_actions(&net, &store, &s, &cond, &mut rows(&[1, 2, 3]), &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
    let b = sample_actions(&net, &store, &s, &cond, &mut rows(&[1, 2, 3]), &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
    assert_eq!(a, b);
    let one = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
    let c = sample_actions(&net, &store, &s, &one, &mut rows(&[2]), &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
    assert_eq!(c[0], a[1]);
    assert!(a.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn trained_sampler_hits_the_conditional_modes() {
    for (i, frac) in common::two_mode_sampler_fidelity(4).into_iter().enumerate() {
        assert!(frac >= 0.95, "condition {i}: only {frac} of samples near its mode");
    }
}
