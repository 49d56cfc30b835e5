use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamStore, Tape, Var};

use super::model::{Batch, FusionModel};

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is essentially zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Scalar objective over the parameters in a store.
pub trait LossFn {
    fn loss<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Var<'t>>;
}

/// Result for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Coordinates whose relative error is not below the tolerance.
    pub flagged: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.flagged == 0)
    }

    pub fn failing(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| t.flagged > 0)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tensor,numel,checked,max_abs_err,max_rel_err,flagged,status\n");
        for t in &self.tensors {
            let _ = writeln!(
                out,
                "{},{},{},{:e},{:e},{},{}",
                t.name,
                t.numel,
                t.checked,
                t.max_abs_err,
                t.max_rel_err,
                t.flagged,
                if t.flagged == 0 { "ok" } else { "FAIL" }
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.tensors.iter().map(|t| t.name.len()).max().unwrap_or(6).max(6);
        let mut out = format!("finite-difference step {:e}, tolerance {:e}\n\n", self.step, self.tolerance);
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>12}  {:>12}  {:>7}", "tensor", "checked", "max abs", "max rel", "flagged");
        for t in &self.tensors {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>12.3e}  {:>12.3e}  {:>7}{}",
                t.name,
                t.checked,
                t.max_abs_err,
                t.max_rel_err,
                t.flagged,
                if t.flagged == 0 { "" } else { "  FAIL" }
            );
        }
        let _ = writeln!(out, "\n{}", if self.passed() { "PASS" } else { "FAIL" });
        out
    }
}

/// Compares tape gradients of `f` with central differences.
///
/// Every coordinate is checked when a tensor has at most `max_coords`
/// entries, otherwise a seeded sample of `max_coords` of them. Parameter
/// values are restored bit-exactly afterwards.
pub fn gradcheck<F: LossFn + ?Sized>(
    store: &mut ParamStore,
    f: &F,
    step: f64,
    tolerance: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let grads = f.loss(&tape, store)?.backward()?;
        store
            .iter()
            .zip(store.ids())
            .map(|(p, id)| grads.param(id).map_or_else(|| vec![0.0; p.value.numel()], <[f64]>::to_vec))
            .collect()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        Ok(f.loss(&tape, store)?.item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for (id, grad) in ids.into_iter().zip(&analytic) {
        let numel = store.value(id).numel();
        let coords: Vec<usize> = if numel <= max_coords {
            (0..numel).collect()
        } else {
            let mut c = index::sample(&mut rng, numel, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = TensorCheck {
            name: store.get(id).name.clone(),
            numel,
            checked: coords.len(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            flagged: 0,
        };
        for j in coords {
            let original = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = original + step;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[j] = original - step;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[j] = original;
            let numeric = (plus? - minus?) / (2.0 * step);
            let a = grad[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(rel);
            if !(rel < tolerance) {
                check.flagged += 1;
            }
        }
        tensors.push(check);
    }
    Ok(GradcheckReport { step, tolerance, tensors })
}

struct ModelLoss<'a> {
    model: &'a FusionModel,
    batch: &'a Batch,
}

impl LossFn for ModelLoss<'_> {
    fn loss<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Var<'t>> {
        Ok(self.model.forward_with(tape, store, self.batch)?.total)
    }
}

/// Gradient check of the total training loss of `model` on `batch`.
pub fn gradcheck_model(
    model: &mut FusionModel,
    batch: &Batch,
    step: f64,
    tolerance: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let mut store = std::mem::take(&mut model.params);
    let report = gradcheck(&mut store, &ModelLoss { model, batch }, step, tolerance, max_coords, seed);
    model.params = store;
    report
}
