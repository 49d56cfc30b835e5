use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::attention::{AttentionOptions, QueryAttention, QueryRole};
use crate::config::{parse_bool, parse_value};
use crate::data::{encode_batch, LabeledSample, Modality};
use crate::error::{Error, Result};
use crate::gating::{fuse_vars, GateNetwork};
use crate::losses::{self, info_nce_var, pool_tokens, LossBreakdown, LossWeights, TEMPERATURE_INIT};
use crate::moe::{MoEConfig, MoEHead, Mlp, RoutingStats};
use crate::tensor::{ParamId, ParamStore, PoolMode, Tape, Tensor, Var};

/// Components that can be switched off, one per ablation row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AblationFlags {
    pub disable_contrastive: bool,
    pub disable_q_transform: bool,
    pub disable_gating: bool,
    pub disable_q_bottleneck: bool,
    pub disable_moe: bool,
    pub image_only: bool,
    pub text_only: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.image_only && self.text_only {
            return Err(Error::config("image_only and text_only are mutually exclusive"));
        }
        Ok(())
    }

    pub fn unimodal(&self) -> Option<Modality> {
        if self.image_only {
            Some(Modality::Image)
        } else if self.text_only {
            Some(Modality::Text)
        } else {
            None
        }
    }

    fn uses(&self, m: Modality) -> bool {
        self.unimodal().is_none_or(|u| u == m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_queries: usize,
    pub num_heads: usize,
    pub query_projection: bool,
    pub output_projection: bool,
    pub residual: bool,
    pub layer_norm: bool,
    pub gate_hidden: usize,
    pub gate_per_feature: bool,
    pub num_classes: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub full_softmax_gates: bool,
    pub contrastive_pool: PoolMode,
    pub loss: LossWeights,
    pub ablation: AblationFlags,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            num_queries: 32,
            num_heads: 4,
            query_projection: true,
            output_projection: true,
            residual: false,
            layer_norm: false,
            gate_hidden: 64,
            gate_per_feature: false,
            num_classes: 8,
            num_experts: 16,
            top_k: 2,
            expert_hidden: 32,
            full_softmax_gates: false,
            contrastive_pool: PoolMode::Mean,
            loss: LossWeights::default(),
            ablation: AblationFlags::default(),
            seed: 0,
        }
    }
}

fn pool_name(p: PoolMode) -> &'static str {
    match p {
        PoolMode::Mean => "mean",
        PoolMode::Max => "max",
    }
}

impl ModelConfig {
    pub fn moe(&self) -> MoEConfig {
        MoEConfig {
            num_experts: self.num_experts,
            top_k: self.top_k,
            expert_hidden: self.expert_hidden,
            num_classes: self.num_classes,
            full_softmax_gates: self.full_softmax_gates,
        }
    }

    fn attention_options(&self) -> AttentionOptions {
        AttentionOptions {
            num_heads: self.num_heads,
            query_projection: self.query_projection,
            output_projection: self.output_projection,
            residual: self.residual,
            layer_norm: self.layer_norm,
        }
    }

    /// Loss weights with ablated terms forced to zero.
    pub fn effective_loss(&self) -> LossWeights {
        let mut w = self.loss;
        if self.ablation.disable_contrastive || self.ablation.unimodal().is_some() {
            w.lambda2 = 0.0;
        }
        if self.ablation.disable_moe {
            w.lambda3 = 0.0;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        self.loss.validate()?;
        if self.num_queries == 0 {
            return Err(Error::config("num_queries must be >= 1"));
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.gate_hidden == 0 {
            return Err(Error::config("gate_hidden must be >= 1"));
        }
        self.moe().validate()
    }

    /// Canonical `model.*` entries.
    pub fn entries(&self) -> Vec<(String, String)> {
        let a = &self.ablation;
        let rows: Vec<(&str, String)> = vec![
            ("d_model", self.d_model.to_string()),
            ("num_queries", self.num_queries.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("query_projection", self.query_projection.to_string()),
            ("output_projection", self.output_projection.to_string()),
            ("residual", self.residual.to_string()),
            ("layer_norm", self.layer_norm.to_string()),
            ("gate_hidden", self.gate_hidden.to_string()),
            ("gate_per_feature", self.gate_per_feature.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("num_experts", self.num_experts.to_string()),
            ("top_k", self.top_k.to_string()),
            ("expert_hidden", self.expert_hidden.to_string()),
            ("full_softmax_gates", self.full_softmax_gates.to_string()),
            ("contrastive_pool", pool_name(self.contrastive_pool).to_string()),
            ("lambda1", format!("{:?}", self.loss.lambda1)),
            ("lambda2", format!("{:?}", self.loss.lambda2)),
            ("lambda3", format!("{:?}", self.loss.lambda3)),
            ("disable_contrastive", a.disable_contrastive.to_string()),
            ("disable_q_transform", a.disable_q_transform.to_string()),
            ("disable_gating", a.disable_gating.to_string()),
            ("disable_q_bottleneck", a.disable_q_bottleneck.to_string()),
            ("disable_moe", a.disable_moe.to_string()),
            ("image_only", a.image_only.to_string()),
            ("text_only", a.text_only.to_string()),
            ("seed", self.seed.to_string()),
        ];
        rows.into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect()
    }

    /// Sets one field from its unprefixed key. Returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let b = |v: &str| parse_bool(key, v);
        match key {
            "d_model" => self.d_model = parse_value(key, value)?,
            "num_queries" => self.num_queries = parse_value(key, value)?,
            "num_heads" => self.num_heads = parse_value(key, value)?,
            "query_projection" => self.query_projection = b(value)?,
            "output_projection" => self.output_projection = b(value)?,
            "residual" => self.residual = b(value)?,
            "layer_norm" => self.layer_norm = b(value)?,
            "gate_hidden" => self.gate_hidden = parse_value(key, value)?,
            "gate_per_feature" => self.gate_per_feature = b(value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "num_experts" => self.num_experts = parse_value(key, value)?,
            "top_k" => self.top_k = parse_value(key, value)?,
            "expert_hidden" => self.expert_hidden = parse_value(key, value)?,
            "full_softmax_gates" => self.full_softmax_gates = b(value)?,
            "contrastive_pool" => {
                self.contrastive_pool = match value {
                    "mean" => PoolMode::Mean,
                    "max" => PoolMode::Max,
                    _ => return Err(Error::config(format!("{key}: expected mean|max, got `{value}`"))),
                }
            }
            "lambda1" => self.loss.lambda1 = parse_value(key, value)?,
            "lambda2" => self.loss.lambda2 = parse_value(key, value)?,
            "lambda3" => self.loss.lambda3 = parse_value(key, value)?,
            "disable_contrastive" => self.ablation.disable_contrastive = b(value)?,
            "disable_q_transform" => self.ablation.disable_q_transform = b(value)?,
            "disable_gating" => self.ablation.disable_gating = b(value)?,
            "disable_q_bottleneck" => self.ablation.disable_q_bottleneck = b(value)?,
            "disable_moe" => self.ablation.disable_moe = b(value)?,
            "image_only" => self.ablation.image_only = b(value)?,
            "text_only" => self.ablation.text_only = b(value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Digest of every setting except the initialization seed; stored in
    /// checkpoints.
    pub fn digest(&self) -> [u8; 32] {
        let mut entries = self.entries();
        entries.retain(|(k, _)| k != "model.seed");
        Sha256::digest(crate::config::render(&entries).as_bytes()).into()
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Moe(MoEHead),
    /// Stand-in for the mixture when it is ablated: one MLP with about the
    /// same number of parameters as all experts plus the router.
    Dense(Mlp),
}

/// One mini-batch of encoder outputs plus training labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub image: Tensor,
    pub text: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[&LabeledSample], use_true_labels: bool) -> Result<Self> {
        Ok(Batch {
            image: encode_batch(samples.iter().copied(), Modality::Image)?,
            text: encode_batch(samples.iter().copied(), Modality::Text)?,
            labels: samples
                .iter()
                .map(|s| if use_true_labels { s.true_label } else { s.observed_label })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Everything one forward pass produces.
pub struct ForwardPass<'t> {
    pub logits: Var<'t>,
    pub ce: Var<'t>,
    pub contrast: Option<Var<'t>>,
    pub load_balance: Option<Var<'t>>,
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
    pub routing: Option<RoutingStats>,
    pub gate: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub q_image: Option<QueryAttention>,
    pub q_text: Option<QueryAttention>,
    pub gate: Option<GateNetwork>,
    pub bottleneck: Option<QueryAttention>,
    pub head: Head,
    pub temperature: Option<ParamId>,
}

/// Independent RNG stream per component, so ablated models share the
/// initialization of every component they keep.
fn component_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

impl FusionModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (d, l, seed) = (config.d_model, config.num_queries, config.seed);
        let ab = config.ablation;
        let opts = config.attention_options();
        let attn = |store: &mut ParamStore, role, n, tag| {
            QueryAttention::new(store, role, n, d, opts, &mut component_rng(seed, tag))
        };
        let q_image = if !ab.disable_q_transform && ab.uses(Modality::Image) {
            Some(attn(&mut params, QueryRole::Image, l, 1)?)
        } else {
            None
        };
        let q_text = if !ab.disable_q_transform && ab.uses(Modality::Text) {
            Some(attn(&mut params, QueryRole::Text, l, 2)?)
        } else {
            None
        };
        let gate = if !ab.disable_gating && ab.unimodal().is_none() {
            Some(GateNetwork::new(
                &mut params,
                d,
                config.gate_hidden,
                config.gate_per_feature,
                &mut component_rng(seed, 3),
            )?)
        } else {
            None
        };
        let bottleneck = if ab.disable_q_bottleneck {
            None
        } else {
            Some(attn(&mut params, QueryRole::Bottleneck, 2, 4)?)
        };
        let moe = config.moe();
        let head = if ab.disable_moe {
            let per_hidden = 2 * d + 1 + config.num_classes;
            let budget = MoEHead::param_count(2 * d, &moe) - config.num_classes;
            let hidden = ((budget as f64 / per_hidden as f64).round() as usize).max(1);
            Head::Dense(Mlp::new(
                &mut params,
                "dense",
                2 * d,
                hidden,
                config.num_classes,
                &mut component_rng(seed, 5),
            )?)
        } else {
            Head::Moe(MoEHead::new(&mut params, 2 * d, moe, &mut component_rng(seed, 5))?)
        };
        let temperature = if config.effective_loss().lambda2 > 0.0 {
            Some(params.add("temperature", Tensor::scalar(TEMPERATURE_INIT))?)
        } else {
            None
        };
        Ok(FusionModel {
            config,
            params,
            q_image,
            q_text,
            gate,
            bottleneck,
            head,
            temperature,
        })
    }

    /// First `l` encoder tokens per sample, padded with the sequence mean.
    fn leading_tokens(&self, tokens: &Tensor) -> Tensor {
        let (b, s, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
        let l = self.config.num_queries;
        let mut out = Vec::with_capacity(b * l * d);
        for i in 0..b {
            let seq = &tokens.data()[i * s * d..(i + 1) * s * d];
            out.extend_from_slice(&seq[..l.min(s) * d]);
            if l > s {
                let mut mean = vec![0.0; d];
                for row in seq.chunks(d) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / s as f64);
                }
                for _ in s..l {
                    out.extend_from_slice(&mean);
                }
            }
        }
        Tensor::new(vec![b, l, d], out).expect("sized by construction")
    }

    fn distill<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        tokens: &Tensor,
        layer: Option<&QueryAttention>,
    ) -> Result<Var<'t>> {
        match layer {
            Some(layer) => layer.forward(tape, store, tape.constant(tokens.clone())),
            None => Ok(tape.constant(self.leading_tokens(tokens))),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, batch: &Batch) -> Result<ForwardPass<'t>> {
        self.forward_with(tape, &self.params, batch)
    }

    /// Forward pass reading parameter values from `store`, which must have
    /// the layout of `self.params`.
    pub fn forward_with<'t>(&self, tape: &'t Tape, store: &ParamStore, batch: &Batch) -> Result<ForwardPass<'t>> {
        let cfg = &self.config;
        let ab = cfg.ablation;
        let b = batch.len();
        let d = cfg.d_model;
        for (m, t) in [(Modality::Image, &batch.image), (Modality::Text, &batch.text)] {
            if t.rank() != 3 || t.shape()[0] != b || t.shape()[2] != d {
                return Err(Error::config(format!(
                    "{m} tokens have shape {:?}, model expects [{b}, _, {d}]",
                    t.shape()
                )));
            }
        }
        let i_n = if ab.uses(Modality::Image) {
            Some(self.distill(tape, store, &batch.image, self.q_image.as_ref())?)
        } else {
            None
        };
        let t_n = if ab.uses(Modality::Text) {
            Some(self.distill(tape, store, &batch.text, self.q_text.as_ref())?)
        } else {
            None
        };

        let contrast = match (self.temperature, i_n, t_n) {
            (Some(tau), Some(i), Some(t)) if b >= 2 => Some(info_nce_var(
                pool_tokens(i, cfg.contrastive_pool)?,
                pool_tokens(t, cfg.contrastive_pool)?,
                tape.param(store, tau),
            )?),
            _ => None,
        };

        let mut gate_values = None;
        let fused = match (i_n, t_n) {
            (Some(i), Some(t)) => {
                let a = match &self.gate {
                    Some(g) => g.forward(tape, store, i, t)?,
                    None => tape.constant(Tensor::full(&[b, cfg.num_queries, 1], 0.5)),
                };
                gate_values = Some((*a.value()).clone());
                fuse_vars(i, t, a)?
            }
            (Some(only), None) | (None, Some(only)) => only,
            (None, None) => unreachable!("flags validated"),
        };

        let compressed = match &self.bottleneck {
            Some(layer) => layer.forward(tape, store, fused)?,
            None => {
                let l = cfg.num_queries;
                let half = l.div_ceil(2);
                let groups = if l >= 2 {
                    [(0, half), (half, l - half)]
                } else {
                    [(0, 1), (0, 1)]
                };
                fused.row_pool(&groups, PoolMode::Mean)?
            }
        };
        let flat = compressed.reshape(&[b, 2 * d])?;

        let (logits, load_balance, routing) = match &self.head {
            Head::Moe(head) => {
                let out = head.forward(tape, store, flat)?;
                (out.logits, Some(out.load_balance), Some(out.stats))
            }
            Head::Dense(mlp) => (mlp.forward(tape, store, flat)?, None, None),
        };
        let ce = logits.cross_entropy(&batch.labels)?;
        let weights = cfg.effective_loss();
        let total = losses::weighted_total(ce, contrast, load_balance, &weights)?;
        let breakdown = LossBreakdown {
            l_ce: ce.item(),
            l_contrast: contrast.map_or(0.0, |v| v.item()),
            l_moe: load_balance.map_or(0.0, |v| v.item()),
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            lambda3: weights.lambda3,
            total: total.item(),
        };
        Ok(ForwardPass {
            logits,
            ce,
            contrast,
            load_balance,
            total,
            breakdown,
            routing,
            gate: gate_values,
        })
    }

    /// Class logits `[B, C]` without keeping the tape.
    pub fn predict_logits(&self, batch: &Batch) -> Result<Tensor> {
        let tape = Tape::new();
        Ok((*self.forward(&tape, batch)?.logits.value()).clone())
    }

    /// Runs a zero batch through the model to surface shape errors early.
    pub fn check_shapes(&self, image_tokens: usize, text_tokens: usize) -> Result<()> {
        let d = self.config.d_model;
        let batch = Batch {
            image: Tensor::zeros(&[2, image_tokens, d]),
            text: Tensor::zeros(&[2, text_tokens, d]),
            labels: vec![0, 0],
        };
        let tape = Tape::new();
        self.forward(&tape, &batch).map(|_| ())
    }

    /// Clamps the contrastive temperature into its allowed range.
    pub fn clamp_temperature(&mut self) {
        if let Some(id) = self.temperature {
            let (lo, hi) = losses::TEMPERATURE_RANGE;
            let v = &mut self.params.get_mut(id).value.data_mut()[0];
            *v = v.clamp(lo, hi);
        }
    }
}

impl fmt::Display for AblationFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = [
            (self.disable_contrastive, "disable_contrastive"),
            (self.disable_q_transform, "disable_q_transform"),
            (self.disable_gating, "disable_gating"),
            (self.disable_q_bottleneck, "disable_q_bottleneck"),
            (self.disable_moe, "disable_moe"),
            (self.image_only, "image_only"),
            (self.text_only, "text_only"),
        ]
        .into_iter()
        .filter_map(|(set, name)| set.then_some(name))
        .collect();
        if on.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&on.join(","))
        }
    }
}
