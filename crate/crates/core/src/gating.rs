//! Per-token gated fusion of the two distilled modalities.
//!
//! A one-hidden-layer MLP, shared across token positions, reads the
//! concatenated row `[I_n[i] | T_n[i]]` and emits a gate `a_i ∈ (0, 1)`.
//! The fused row is `a_i·I_n[i] + (1 − a_i)·T_n[i]`.

use rand::Rng;

use crate::attention::DistilledTokens;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GateNetwork {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_model: usize,
    /// One gate per feature (`l×d`) instead of one per token (`l×1`).
    pub per_feature: bool,
}

/// Gate values, `[l, 1]` (or `[l, d]` for the per-feature variant).
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector {
    pub a: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedTokens {
    pub tokens: Tensor,
}

impl GateNetwork {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d_model: usize,
        hidden: usize,
        per_feature: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::config("gate hidden width must be >= 1"));
        }
        let out = if per_feature { d_model } else { 1 };
        let w1 = store.add(
            "gate.w1",
            Tensor::randn(&[2 * d_model, hidden], (1.0 / d_model as f64).sqrt(), rng),
        )?;
        let b1 = store.add("gate.b1", Tensor::zeros(&[hidden]))?;
        let w2 = store.add(
            "gate.w2",
            Tensor::randn(&[hidden, out], (1.0 / hidden as f64).sqrt(), rng),
        )?;
        let b2 = store.add("gate.b2", Tensor::zeros(&[out]))?;
        Ok(GateNetwork {
            w1,
            b1,
            w2,
            b2,
            d_model,
            per_feature,
        })
    }

    /// `sigmoid(relu([I|T]·w1 + b1)·w2 + b2)`, applied to every token row.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        i_n: Var<'t>,
        t_n: Var<'t>,
    ) -> Result<Var<'t>> {
        if i_n.shape() != t_n.shape() {
            return Err(Error::dims("compute_gate", &i_n.shape(), &t_n.shape()));
        }
        let x = Var::concat_cols(&[i_n, t_n])?;
        let p = |id| tape.param(store, id);
        x.matmul(&p(self.w1))?
            .add_row(&p(self.b1))?
            .relu()?
            .matmul(&p(self.w2))?
            .add_row(&p(self.b2))?
            .sigmoid()
    }
}

/// `T + a⊙(I − T)`, i.e. `a⊙I + (1 − a)⊙T`. A one-column `a` broadcasts
/// across features.
pub fn fuse_vars<'t>(i_n: Var<'t>, t_n: Var<'t>, a: Var<'t>) -> Result<Var<'t>> {
    let diff = i_n.sub(&t_n)?;
    let scaled = if a.shape() == i_n.shape() {
        diff.mul(&a)?
    } else {
        diff.mul_col(&a)?
    };
    t_n.add(&scaled)
}

pub fn compute_gate(
    i_n: &DistilledTokens,
    t_n: &DistilledTokens,
    net: &GateNetwork,
    store: &ParamStore,
) -> Result<GateVector> {
    let tape = Tape::new();
    let a = net.forward(
        &tape,
        store,
        tape.constant(i_n.tokens.clone()),
        tape.constant(t_n.tokens.clone()),
    )?;
    Ok(GateVector {
        a: (*a.value()).clone(),
    })
}

pub fn fuse(i_n: &DistilledTokens, t_n: &DistilledTokens, gate: &GateVector) -> Result<FusedTokens> {
    if let Some(bad) = gate.a.data().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::contract(format!("gate value {bad} outside (0, 1)")));
    }
    if i_n.tokens.shape() != t_n.tokens.shape() {
        return Err(Error::dims("fuse", i_n.tokens.shape(), t_n.tokens.shape()));
    }
    let tape = Tape::new();
    let f = fuse_vars(
        tape.constant(i_n.tokens.clone()),
        tape.constant(t_n.tokens.clone()),
        tape.constant(gate.a.clone()),
    )?;
    Ok(FusedTokens {
        tokens: (*f.value()).clone(),
    })
}

/// Mean and population standard deviation of the gate values.
pub fn gate_stats(a: &Tensor) -> (f64, f64) {
    let n = a.numel().max(1) as f64;
    let mean = a.data().iter().sum::<f64>() / n;
    let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
