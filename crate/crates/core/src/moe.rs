//! Sparse mixture-of-experts classification head.
//!
//! A linear router scores every expert, the `top_k` highest scores are kept
//! (ties go to the lower index), and the selected experts' class logits are
//! mixed with softmax weights renormalized over the kept scores. Only the
//! selected experts are evaluated.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{tape, ParamId, ParamStore, PoolMode, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MoEConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub num_classes: usize,
    /// Take gate weights from the softmax over all experts instead of
    /// renormalizing over the selected ones.
    pub full_softmax_gates: bool,
}

impl Default for MoEConfig {
    fn default() -> Self {
        MoEConfig {
            num_experts: 16,
            top_k: 2,
            expert_hidden: 64,
            num_classes: 8,
            full_softmax_gates: false,
        }
    }
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::config(format!(
                "top_k must be in 1..={}, got {}",
                self.num_experts, self.top_k
            )));
        }
        if self.expert_hidden == 0 || self.num_classes < 2 {
            return Err(Error::config("expert_hidden >= 1 and num_classes >= 2 required"));
        }
        Ok(())
    }
}

/// Two-layer MLP `in -> hidden -> classes` with ReLU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub type Expert = Mlp;

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            w1: store.add(
                format!("{prefix}.w1"),
                Tensor::randn(&[input, hidden], (2.0 / input as f64).sqrt(), rng),
            )?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?,
            w2: store.add(
                format!("{prefix}.w2"),
                Tensor::randn(&[hidden, output], (1.0 / hidden as f64).sqrt(), rng),
            )?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[output]))?,
        })
    }

    pub fn param_count(input: usize, hidden: usize, output: usize) -> usize {
        input * hidden + hidden + hidden * output + output
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let p = |id| tape.param(store, id);
        x.matmul(&p(self.w1))?
            .add_row(&p(self.b1))?
            .relu()?
            .matmul(&p(self.w2))?
            .add_row(&p(self.b2))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterDecision {
    pub gate_logits: Tensor,
    /// Selected experts in descending logit order.
    pub selected: Vec<usize>,
    pub weights: Tensor,
}

/// Per-batch expert usage: `f` counts top-1 assignments, `p` averages the
/// router's full softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingStats {
    pub f: Vec<f64>,
    pub p: Vec<f64>,
}

impl RoutingStats {
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (b, e) = (logits.rows(), logits.cols());
        if b == 0 || logits.rank() != 2 {
            return Err(Error::contract("routing stats need at least one batch item"));
        }
        let mut f = vec![0.0; e];
        let mut p = vec![0.0; e];
        for row in logits.data().chunks(e) {
            f[select_top_k(row, 1)[0]] += 1.0;
            let mut probs = row.to_vec();
            tape::softmax_in_place(&mut probs);
            p.iter_mut().zip(&probs).for_each(|(a, b)| *a += b);
        }
        f.iter_mut().for_each(|v| *v /= b as f64);
        p.iter_mut().for_each(|v| *v /= b as f64);
        Ok(RoutingStats { f, p })
    }
}

/// Indices of the `k` largest values, descending; ties go to the lower index.
pub fn select_top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn gate_weights(logits: &[f64], selected: &[usize], full_softmax: bool) -> Vec<f64> {
    if full_softmax {
        let mut probs = logits.to_vec();
        tape::softmax_in_place(&mut probs);
        selected.iter().map(|&i| probs[i]).collect()
    } else {
        let mut w: Vec<f64> = selected.iter().map(|&i| logits[i]).collect();
        tape::softmax_in_place(&mut w);
        w
    }
}

/// `E · Σ f_i · p_i`; 1 at uniform usage, `E` when collapsed onto one expert.
pub fn load_balance_loss(stats: &RoutingStats, cfg: &MoEConfig) -> Result<f64> {
    if stats.f.len() != cfg.num_experts || stats.p.len() != cfg.num_experts {
        return Err(Error::dims(
            "load_balance_loss",
            &[stats.f.len(), stats.p.len()],
            &[cfg.num_experts],
        ));
    }
    let dot: f64 = stats.f.iter().zip(&stats.p).map(|(f, p)| f * p).sum();
    Ok(cfg.num_experts as f64 * dot)
}

#[derive(Clone, Debug)]
pub struct Router {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct MoEHead {
    pub cfg: MoEConfig,
    pub input_dim: usize,
    pub router: Router,
    pub experts: Vec<Expert>,
}

/// Tape outputs of one batched MoE pass.
pub struct MoEOutput<'t> {
    pub logits: Var<'t>,
    pub router_logits: Var<'t>,
    pub load_balance: Var<'t>,
    pub decisions: Vec<RouterDecision>,
    pub stats: RoutingStats,
}

impl MoEHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        input_dim: usize,
        cfg: MoEConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let router = Router {
            w: store.add(
                "moe.router.w",
                Tensor::randn(&[input_dim, cfg.num_experts], (1.0 / input_dim as f64).sqrt(), rng),
            )?,
            b: store.add("moe.router.b", Tensor::zeros(&[cfg.num_experts]))?,
        };
        let experts = (0..cfg.num_experts)
            .map(|i| {
                Mlp::new(
                    store,
                    &format!("moe.expert{i}"),
                    input_dim,
                    cfg.expert_hidden,
                    cfg.num_classes,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(MoEHead {
            cfg,
            input_dim,
            router,
            experts,
        })
    }

    /// Total learnable scalars, router included.
    pub fn param_count(input: usize, cfg: &MoEConfig) -> usize {
        cfg.num_experts * Mlp::param_count(input, cfg.expert_hidden, cfg.num_classes)
            + input * cfg.num_experts
            + cfg.num_experts
    }

    pub fn router_logits<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(&tape.param(store, self.router.w))?
            .add_row(&tape.param(store, self.router.b))
    }

    /// Routes and mixes a `[B, input_dim]` batch.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<MoEOutput<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::dims("moe_forward", &shape, &[self.input_dim]));
        }
        let batch = shape[0];
        let (e, k) = (self.cfg.num_experts, self.cfg.top_k);
        let router_logits = self.router_logits(tape, store, x)?;
        let lv = router_logits.value();

        let mut selected_all = Vec::with_capacity(batch * k);
        let mut decisions = Vec::with_capacity(batch);
        for row in lv.data().chunks(e) {
            let selected = select_top_k(row, k);
            let w = gate_weights(row, &selected, self.cfg.full_softmax_gates);
            selected_all.extend_from_slice(&selected);
            decisions.push(RouterDecision {
                gate_logits: Tensor::new(vec![e], row.to_vec())?,
                selected,
                weights: Tensor::new(vec![k], w)?,
            });
        }
        let probs = router_logits.softmax_rows()?;
        let weights = if self.cfg.full_softmax_gates {
            probs.gather_cols(&selected_all, k)?
        } else {
            router_logits.gather_cols(&selected_all, k)?.softmax_rows()?
        };

        let mut out: Option<Var<'t>> = None;
        for (ei, expert) in self.experts.iter().enumerate() {
            let mut rows = Vec::new();
            let mut slots = Vec::new();
            for (b, d) in decisions.iter().enumerate() {
                if let Some(slot) = d.selected.iter().position(|&s| s == ei) {
                    rows.push(b);
                    slots.push((b, slot));
                }
            }
            if rows.is_empty() {
                continue;
            }
            let y = expert.forward(tape, store, x.gather_rows(&rows)?)?;
            let part = y
                .mul_col(&weights.gather_entries(&slots)?)?
                .scatter_rows(&rows, batch)?;
            out = Some(match out {
                Some(acc) => acc.add(&part)?,
                None => part,
            });
        }
        let logits = out.ok_or_else(|| Error::contract("no expert selected"))?;

        let stats = RoutingStats::from_logits(&lv)?;
        let p = probs
            .reshape(&[1, batch, e])?
            .row_pool(&[(0, batch)], PoolMode::Mean)?
            .reshape(&[e])?;
        let f = tape.constant(Tensor::new(vec![e], stats.f.clone())?);
        let load_balance = p.mul(&f)?.sum()?.scale(e as f64)?;
        Ok(MoEOutput {
            logits,
            router_logits,
            load_balance,
            decisions,
            stats,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.numel() != self.input_dim {
            return Err(Error::dims("route", x.shape(), &[self.input_dim]));
        }
        Ok(())
    }

    /// One expert's class logits for a flat input vector.
    pub fn expert_output(&self, store: &ParamStore, expert: usize, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let tape = Tape::new();
        let xv = tape.constant(x.clone().reshape(&[1, self.input_dim])?);
        let y = self.experts[expert].forward(&tape, store, xv)?;
        (*y.value()).clone().reshape(&[self.cfg.num_classes])
    }
}

/// Router decision for one flattened bottleneck vector.
pub fn route(x: &Tensor, head: &MoEHead, store: &ParamStore) -> Result<RouterDecision> {
    head.cfg.validate()?;
    head.check_input(x)?;
    let tape = Tape::new();
    let xv = tape.constant(x.clone().reshape(&[1, head.input_dim])?);
    let logits = head.router_logits(&tape, store, xv)?.value();
    let selected = select_top_k(logits.data(), head.cfg.top_k);
    let weights = gate_weights(logits.data(), &selected, head.cfg.full_softmax_gates);
    Ok(RouterDecision {
        gate_logits: (*logits).clone().reshape(&[head.cfg.num_experts])?,
        weights: Tensor::new(vec![selected.len()], weights)?,
        selected,
    })
}

/// `Σ_j w_j · E_{selected_j}(x)`, evaluating only the selected experts.
pub fn moe_forward(
    x: &Tensor,
    head: &MoEHead,
    store: &ParamStore,
    decision: &RouterDecision,
) -> Result<Tensor> {
    let mut out = vec![0.0; head.cfg.num_classes];
    for (&e, &w) in decision.selected.iter().zip(decision.weights.data()) {
        let y = head.expert_output(store, e, x)?;
        out.iter_mut().zip(y.data()).for_each(|(o, v)| *o += w * v);
    }
    Tensor::new(vec![head.cfg.num_classes], out)
}
