//! Classification, contrastive alignment and the weighted total objective.

use crate::error::{Error, Result};
use crate::tensor::{PoolMode, Tape, Tensor, Var};

/// Temperature initialization and clamp range for the contrastive loss.
pub const TEMPERATURE_INIT: f64 = 0.07;
pub const TEMPERATURE_RANGE: (f64, f64) = (0.01, 1.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0 / 3.0,
            lambda2: 1.0 / 3.0,
            lambda3: 1.0 / 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_contrast: f64,
    pub l_moe: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub total: f64,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "l_ce={} l_contrast={} l_moe={} total={}",
            self.l_ce, self.l_contrast, self.l_moe, self.total
        )
    }
}

/// `λ₁·l_ce + λ₂·l_contrast + λ₃·l_moe`.
pub fn total_loss(l_ce: f64, l_contrast: f64, l_moe: f64, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    if ![l_ce, l_contrast, l_moe].iter().all(|v| v.is_finite()) {
        return Err(Error::contract("loss components must be finite"));
    }
    let mut total = w.lambda1 * l_ce;
    if w.lambda2 != 0.0 {
        total += w.lambda2 * l_contrast;
    }
    if w.lambda3 != 0.0 {
        total += w.lambda3 * l_moe;
    }
    Ok(LossBreakdown {
        l_ce,
        l_contrast,
        l_moe,
        lambda1: w.lambda1,
        lambda2: w.lambda2,
        lambda3: w.lambda3,
        total,
    })
}

/// Tape version of [`total_loss`]; a zero weight drops its term entirely.
pub fn weighted_total<'t>(
    ce: Var<'t>,
    contrast: Option<Var<'t>>,
    moe: Option<Var<'t>>,
    w: &LossWeights,
) -> Result<Var<'t>> {
    let mut total = ce.scale(w.lambda1)?;
    for (term, lambda) in [(contrast, w.lambda2), (moe, w.lambda3)] {
        if let Some(t) = term {
            if lambda != 0.0 {
                total = total.add(&t.scale(lambda)?)?;
            }
        }
    }
    Ok(total)
}

/// Mean negative log-likelihood under a stable log-sum-exp.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    Ok(tape.constant(logits.clone()).cross_entropy(labels)?.item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub image_embed: Tensor,
    pub text_embed: Tensor,
    pub temperature: f64,
}

/// `[B, l, d] -> [B, d]` by pooling over the token axis.
pub fn pool_tokens<'t>(x: Var<'t>, mode: PoolMode) -> Result<Var<'t>> {
    let shape = x.shape();
    let [b, l, d] = shape[..] else {
        return Err(Error::dims("pool_tokens", &shape, &[]));
    };
    x.row_pool(&[(0, l)], mode)?.reshape(&[b, d])
}

/// Symmetric InfoNCE with in-batch negatives:
/// `½[CE(S, diag) + CE(Sᵀ, diag)]`, `S = norm(img)·norm(txt)ᵀ / τ`.
pub fn info_nce_var<'t>(image: Var<'t>, text: Var<'t>, temperature: Var<'t>) -> Result<Var<'t>> {
    let (is, ts) = (image.shape(), text.shape());
    if is.len() != 2 || is != ts {
        return Err(Error::dims("info_nce", &is, &ts));
    }
    let b = is[0];
    if b < 2 {
        return Err(Error::contract(format!("info_nce needs a batch of at least 2, got {b}")));
    }
    if temperature.item() <= 0.0 {
        return Err(Error::contract("temperature must be positive"));
    }
    let img = image.l2_normalize_rows()?;
    let txt = text.l2_normalize_rows()?;
    let sim = img.matmul(&txt.transpose()?)?.div_scalar(&temperature)?;
    let diag: Vec<usize> = (0..b).collect();
    let forward = sim.cross_entropy(&diag)?;
    let backward = sim.transpose()?.cross_entropy(&diag)?;
    forward.add(&backward)?.scale(0.5)
}

pub fn info_nce(batch: &ContrastiveBatch) -> Result<f64> {
    let tape = Tape::new();
    let loss = info_nce_var(
        tape.constant(batch.image_embed.clone()),
        tape.constant(batch.text_embed.clone()),
        tape.constant(Tensor::scalar(batch.temperature)),
    )?;
    Ok(loss.item())
}
