mod common;

use common::{chain_q_vs_value_iteration, converged_expectile, expectile_oracle, rng, tabular_dataset};
use dds_autodiff::ParamStore;
use dds_core::iql::{select_skill, softmax, train_highlevel, IqlBatch, IqlConfig, IqlLearner, SelectMode, StateNorm};
use rand::Rng;

const Q: [f64; 5] = [0.1, 0.5, 0.2, 0.9, 0.4];

#[test]
fn expectile_fixed_point_mean_to_max() {
    let mean = Q.iter().sum::<f64>() / Q.len() as f64;
    let max = Q.iter().cloned().fold(f64::MIN, f64::max);
    let mut last = f64::MIN;
    for tau in [0.5, 0.7, 0.9, 0.99] {
        let v = converged_expectile(&Q, tau);
        let want = expectile_oracle(&Q, tau);
        assert!((v - want).abs() < 1e-3, "tau {tau}: learned {v}, oracle {want}");
        assert!(v > last, "not monotone in tau");
        last = v;
        if tau == 0.5 {
            assert!((v - mean).abs() < 1e-3);
        }
    }
    assert!(max - last < 0.05, "tau 0.99 expectile {last} should approach the max {max}");
}

#[test]
fn q_matches_value_iteration_on_a_chain() {
    let (err, learned, vi) = chain_q_vs_value_iteration(0.9);
    assert!(err < 1e-2, "sup-norm {err}\nlearned {learned:?}\nvalue iteration {vi:?}");
}

fn bandit() -> dds_core::relabel::RelabeledDataset {
    let rows: Vec<_> = [0.0, 1.0, 0.2]
        .iter()
        .enumerate()
        .flat_map(|(k, &r)| std::iter::repeat_n((vec![0.3, -0.2], k, r, vec![0.3, -0.2], true), 4))
        .collect();
    tabular_dataset(2, 3, 0.9, &rows)
}

#[test]
fn awr_concentrates_on_the_best_bandit_arm() {
    let cfg = IqlConfig { hidden: 16, lr: 3e-3, batch: 12, q_steps: 1500, awr_steps: 1500, alpha_awr: 10.0, log_every: 500, ..IqlConfig::default() };
    let out = train_highlevel(&bandit(), cfg, 3).unwrap();
    let s = out.learner.norm.batch(&[&[0.3, -0.2]]).unwrap();
    let p = softmax(out.learner.logits(&s).unwrap().row(0));
    assert!(p[1] > 0.99, "policy {p:?}");
    assert_eq!(out.metrics.len(), 6);
    assert!(out.metrics.iter().all(|m| m.step % 500 == 0));
}

fn snapshot(store: &ParamStore) -> Vec<f64> {
    store.iter().flat_map(|p| p.value.data().to_vec()).collect()
}

#[test]
fn each_update_touches_only_its_own_networks() {
    let data = bandit();
    let cfg = IqlConfig { hidden: 8, lr: 1e-2, ..IqlConfig::default() };
    let mut l = IqlLearner::new(cfg, 2, 3, 0.9, StateNorm::identity(2), &mut rng(4)).unwrap();
    let batch = IqlBatch::gather(&data, &l.norm, &(0..12).collect::<Vec<_>>()).unwrap();
    let before = |l: &IqlLearner| [snapshot(&l.critics), snapshot(&l.targets), snapshot(&l.value), snapshot(&l.policy)];
    let b = before(&l);
    l.value_update(&batch).unwrap();
    let a = before(&l);
    assert_eq!((&a[0], &a[1], &a[3]), (&b[0], &b[1], &b[3]));
    assert_ne!(a[2], b[2]);
    let b = a;
    l.q_update(&batch).unwrap();
    let a = before(&l);
    assert_eq!((&a[2], &a[3]), (&b[2], &b[3]));
    assert_ne!(a[0], b[0]);
    assert_ne!(a[1], b[1]);
    let b = a;
    let (w, _) = l.awr_weights(&batch).unwrap();
    l.awr_update(&batch, &w).unwrap();
    let a = before(&l);
    assert_eq!((&a[0], &a[1], &a[2]), (&b[0], &b[1], &b[2]));
    assert_ne!(a[3], b[3]);
}

#[test]
fn training_losses_match_finite_differences() {
    let data = bandit();
    let cfg = IqlConfig { hidden: 6, ..IqlConfig::default() };
    let l = IqlLearner::new(cfg, 2, 3, 0.9, StateNorm::identity(2), &mut rng(5)).unwrap();
    let batch = IqlBatch::gather(&data, &l.norm, &(0..12).collect::<Vec<_>>()).unwrap();
    let coords = |s: &ParamStore| -> Vec<_> {
        s.iter().flat_map(|p| {
            let id = s.id(&p.name).unwrap();
            (0..p.value.len().min(3)).map(move |i| (id, i))
        }).collect()
    };
    let (w, _) = l.awr_weights(&batch).unwrap();
    for (name, store) in [("value", &l.value), ("critics", &l.critics), ("policy", &l.policy)] {
        let err = fd_through_learner(store, &coords(store), |s| match name {
            "value" => l.value_loss(&batch, s).unwrap(),
            "critics" => l.q_loss(&batch, s).unwrap(),
            _ => l.awr_loss(&batch, &w, s).unwrap(),
        });
        assert!(err < 1e-4, "{name} loss relative error {err}");
    }
}

/// Finite differences for losses whose graph the learner builds itself.
fn fd_through_learner(
    store: &ParamStore,
    coords: &[(dds_autodiff::ParamId, usize)],
    f: impl Fn(&ParamStore) -> (dds_autodiff::Graph, dds_autodiff::Var),
) -> f64 {
    let mut work = store.clone();
    work.zero_grad();
    let (g, loss) = f(&work);
    g.backward_into(loss, &mut work).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for &(id, i) in coords {
        let a = work.grad(id).data()[i];
        let x0 = work.value(id).data()[i];
        let eval = |x: f64| {
            let mut s = work.clone();
            s.get_mut(id).value.data_mut()[i] = x;
            let (g, l) = f(&s);
            g.value(l).item()
        };
        let n = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
        worst = worst.max(dds_autodiff::gradcheck::relative_error(a, n, 1e-3));
    }
    worst
}

#[test]
fn sample_mode_follows_softmax_frequencies() {
    let logits = [0.0, 2f64.ln(), 3f64.ln(), -1.0];
    let p = softmax(&logits);
    let mut r = rng(6);
    let n = 40_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[select_skill(&logits, SelectMode::Sample, &mut r)] += 1;
    }
    for k in 0..4 {
        assert!((counts[k] as f64 / n as f64 - p[k]).abs() < 0.01, "skill {k}");
    }
}

#[test]
fn checkpoint_roundtrip() {
    let cfg = IqlConfig { hidden: 8, batch: 4, q_steps: 20, awr_steps: 20, log_every: 10, ..IqlConfig::default() };
    let out = train_highlevel(&bandit(), cfg, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hl.ckpt");
    out.learner.save(&path).unwrap();
    let back = IqlLearner::load(&path).unwrap();
    let mut r = rng(8);
    for _ in 0..20 {
        let s = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let x = out.learner.norm.batch(&[&s]).unwrap();
        assert_eq!(back.logits(&x).unwrap(), out.learner.logits(&x).unwrap());
        assert_eq!(back.target_q(&x).unwrap(), out.learner.target_q(&x).unwrap());
        assert_eq!(back.values(&x).unwrap(), out.learner.values(&x).unwrap());
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = IqlConfig { hidden: 8, batch: 4, q_steps: 50, awr_steps: 50, log_every: 10, ..IqlConfig::default() };
    let a = train_highlevel(&bandit(), cfg.clone(), 9).unwrap();
    let b = train_highlevel(&bandit(), cfg, 9).unwrap();
    let bits = |m: &[dds_core::iql::IqlMetricsRow]| -> Vec<u64> {
        m.iter().flat_map(|r| [r.value_loss, r.q_loss, r.awr_loss, r.mean_advantage, r.policy_entropy]).map(f64::to_bits).collect()
    };
    assert_eq!(bits(&a.metrics), bits(&b.metrics));
}
