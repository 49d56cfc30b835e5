use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// Adam with decoupled weight decay.
///
/// Every parameter must carry a gradient buffer when [`AdamW::step`] runs;
/// call [`ParamStore::zero_grads`] before each backward pass so that experts
/// no sample was routed to see an explicit zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: OptimizerState,
}

/// First and second moments per parameter and the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let ok = lr >= 0.0
            && weight_decay >= 0.0
            && (0.0..1.0).contains(&beta1)
            && (0.0..1.0).contains(&beta2)
            && eps > 0.0
            && [lr, weight_decay, eps].iter().all(|v| v.is_finite());
        if !ok {
            return Err(Error::config(format!(
                "invalid AdamW settings lr={lr} wd={weight_decay} betas=({beta1}, {beta2}) eps={eps}"
            )));
        }
        Ok(AdamW {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
            state: OptimizerState::default(),
        })
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let n = store.len();
        if self.state.m.is_empty() {
            self.state.m = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.state.v = self.state.m.clone();
        } else if self.state.m.len() != n {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {n}",
                self.state.m.len()
            )));
        }
        for p in store.iter() {
            match &p.grad {
                None => return Err(Error::contract(format!("missing gradient for {}", p.name))),
                Some(g) if g.iter().any(|v| !v.is_finite()) => {
                    return Err(Error::contract(format!("non-finite gradient for {}", p.name)))
                }
                _ => {}
            }
        }
        self.state.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let t = self.state.step.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let g = p.grad.as_ref().expect("checked above");
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for (j, theta) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *theta -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *theta);
            }
        }
        Ok(())
    }
}
