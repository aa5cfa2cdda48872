use dds_autodiff::{AdamConfig, AdamState, Graph, Mode, ParamStore, Tensor};

/// Straight-line Adam on a scalar, written without the library's types.
fn scripted_adam(w0: f64, lr: f64, steps: usize, grad: impl Fn(f64) -> f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    for t in 1..=steps {
        let g = grad(w);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        w -= lr * mh / (vh.sqrt() + eps);
    }
    w
}

#[test]
fn adam_minimizes_quadratic_like_the_scripted_version() {
    let mut store = ParamStore::new();
    let id = store.insert("w", Tensor::scalar(0.0)).unwrap();
    let mut adam = AdamState::for_store(AdamConfig::with_lr(0.1), &store);
    for _ in 0..100 {
        store.zero_grad();
        let mut g = Graph::new(Mode::Train);
        let w = g.param(&store, id);
        let three = g.input(Tensor::scalar(3.0));
        let d = g.sub(w, three).unwrap();
        let loss = g.square(d);
        g.backward_into(loss, &mut store).unwrap();
        adam.step(&mut store).unwrap();
    }
    let w = store.value(id).item();
    let reference = scripted_adam(0.0, 0.1, 100, |w| 2.0 * (w - 3.0));
    assert!((w - reference).abs() < 1e-12, "{w} vs {reference}");
    assert!((reference - 3.0).abs() < 0.05, "scripted Adam ended at {reference}");
}
