//! Central finite-difference oracle for analytic gradients.
//!
//! The numeric side only ever runs forward passes, so it stays independent of
//! the backward implementation it is checking.

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Magnitude below which errors are measured absolutely rather than relatively.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-6, floor: 1e-3 }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

impl GradCheck {
    /// Maximum relative error over every coordinate of every input, where `f`
    /// builds a scalar from leaves bound to `inputs`.
    pub fn inputs<F>(&self, inputs: &[Tensor], f: F) -> Result<f64>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new(Mode::Train);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        let eval = |ts: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new(Mode::Train);
            let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            Ok(g.value(out).item())
        };
        let mut worst = 0.0f64;
        let mut work = inputs.to_vec();
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
            for i in 0..inputs[k].len() {
                let x0 = inputs[k].data()[i];
                work[k].data_mut()[i] = x0 + self.step;
                let fp = eval(&work)?;
                work[k].data_mut()[i] = x0 - self.step;
                let fm = eval(&work)?;
                work[k].data_mut()[i] = x0;
                let numeric = (fp - fm) / (2.0 * self.step);
                worst = worst.max(relative_error(analytic.data()[i], numeric, self.floor));
            }
        }
        Ok(worst)
    }

    /// Maximum relative error over the listed parameter coordinates, where `f`
    /// builds a scalar loss from `store`. `f` must be deterministic.
    pub fn params<F>(&self, store: &ParamStore, coords: &[(ParamId, usize)], f: F) -> Result<f64>
    where
        F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    {
        let mut work = store.clone();
        work.zero_grad();
        let mut g = Graph::new(Mode::Train);
        let loss = f(&mut g, &work)?;
        g.backward_into(loss, &mut work)?;
        let analytic: Vec<f64> = coords.iter().map(|&(id, i)| work.grad(id).data()[i]).collect();
        let mut worst = 0.0f64;
        for (&(id, i), a) in coords.iter().zip(analytic) {
            let x0 = work.value(id).data()[i];
            let mut eval = |x: f64| -> Result<f64> {
                work.get_mut(id).value.data_mut()[i] = x;
                let mut g = Graph::new(Mode::Train);
                let out = f(&mut g, &work)?;
                Ok(g.value(out).item())
            };
            let fp = eval(x0 + self.step)?;
            let fm = eval(x0 - self.step)?;
            eval(x0)?;
            let numeric = (fp - fm) / (2.0 * self.step);
            worst = worst.max(relative_error(a, numeric, self.floor));
        }
        Ok(worst)
    }
}
