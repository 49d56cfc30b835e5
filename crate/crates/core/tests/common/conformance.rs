//! Library operations against the brute-force oracles on seeded random
//! instances. Each check returns the largest absolute deviation seen.
#![allow(dead_code)]

use gatefuse::attention::{q_bottleneck, q_transform, AttentionOptions, DistilledTokens, QueryAttention, QueryRole};
use gatefuse::data::{Modality, TokenSequence};
use gatefuse::gating::{compute_gate, fuse, FusedTokens, GateNetwork, GateVector};
use gatefuse::losses::{cross_entropy, info_nce, ContrastiveBatch};
use gatefuse::moe::{load_balance_loss, moe_forward, route, MoEConfig, MoEHead, RoutingStats};
use gatefuse::{ParamId, ParamStore, Tensor};
use rand::Rng;

use super::oracles::{self, Mat};
use super::{rng, rows, uniform};

fn mat(store: &ParamStore, id: ParamId) -> Mat {
    let t = store.value(id);
    if t.rank() == 1 {
        vec![t.data().to_vec()]
    } else {
        rows(t)
    }
}

fn vecv(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.value(id).data().to_vec()
}

fn diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_layer(seed: u64, l: usize) -> (ParamStore, QueryAttention, usize, usize) {
    let mut r = rng(seed);
    let heads = [1, 2, 4][r.random_range(0..3)];
    let d = heads * r.random_range(1..4);
    let opts = AttentionOptions {
        num_heads: heads,
        query_projection: r.random_bool(0.7),
        output_projection: r.random_bool(0.7),
        residual: false,
        layer_norm: false,
    };
    let mut store = ParamStore::new();
    let layer = QueryAttention::new(&mut store, QueryRole::Image, l, d, opts, &mut r).unwrap();
    // Larger queries than the default init make the attention non-uniform.
    let q = uniform(&mut r, &[l, d], -1.5, 1.5);
    store.get_mut(layer.bank.queries).value = q;
    (store, layer, d, heads)
}

fn attention_oracle(store: &ParamStore, layer: &QueryAttention, tokens: &Tensor, heads: usize) -> Vec<f64> {
    let p = &layer.proj;
    let w_q = p.w_q.map(|id| mat(store, id));
    let w_o = p.w_o.map(|id| mat(store, id));
    oracles::query_attention(
        &rows(tokens),
        &mat(store, layer.bank.queries),
        w_q.as_ref(),
        &mat(store, p.w_k),
        &mat(store, p.w_v),
        w_o.as_ref(),
        heads,
    )
    .concat()
}

pub fn q_transform_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(10_000 + seed);
        let l = r.random_range(1..6);
        let (store, layer, d, heads) = random_layer(seed, l);
        let s = r.random_range(1..8);
        let tokens = uniform(&mut r, &[s, d], -2.0, 2.0);
        let seq = TokenSequence {
            modality: Modality::Text,
            tokens: tokens.clone(),
            sample_id: seed,
        };
        let got = q_transform(&seq, &layer, &store).unwrap();
        assert_eq!(got.tokens.shape(), &[l, d]);
        worst = worst.max(diff(got.tokens.data(), &attention_oracle(&store, &layer, &tokens, heads)));
    }
    worst
}

pub fn q_bottleneck_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(20_000 + seed);
        let (store, layer, d, heads) = random_layer(50_000 + seed, 2);
        let l = r.random_range(1..9);
        let tokens = uniform(&mut r, &[l, d], -2.0, 2.0);
        let got = q_bottleneck(&FusedTokens { tokens: tokens.clone() }, &layer, &store).unwrap();
        assert_eq!(got.tokens.shape(), &[2, d]);
        worst = worst.max(diff(got.tokens.data(), &attention_oracle(&store, &layer, &tokens, heads)));
    }
    worst
}

fn distilled(t: Tensor, m: Modality) -> DistilledTokens {
    DistilledTokens { tokens: t, modality: m }
}

pub fn gate_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(30_000 + seed);
        let d = r.random_range(1..7);
        let hidden = r.random_range(1..9);
        let l = r.random_range(1..6);
        let mut store = ParamStore::new();
        let net = GateNetwork::new(&mut store, d, hidden, false, &mut r).unwrap();
        let b1 = uniform(&mut r, &[hidden], -0.5, 0.5);
        store.get_mut(net.b1).value = b1;
        store.get_mut(net.b2).value = uniform(&mut r, &[1], -0.5, 0.5);
        let i_n = uniform(&mut r, &[l, d], -2.0, 2.0);
        let t_n = uniform(&mut r, &[l, d], -2.0, 2.0);
        let got = compute_gate(
            &distilled(i_n.clone(), Modality::Image),
            &distilled(t_n.clone(), Modality::Text),
            &net,
            &store,
        )
        .unwrap();
        let expect = oracles::gate(
            &rows(&i_n),
            &rows(&t_n),
            &mat(&store, net.w1),
            &vecv(&store, net.b1),
            &mat(&store, net.w2),
            &vecv(&store, net.b2),
        );
        worst = worst.max(diff(got.a.data(), &expect));
    }
    worst
}

pub fn fuse_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(40_000 + seed);
        let d = r.random_range(1..9);
        let l = r.random_range(1..7);
        let i_n = uniform(&mut r, &[l, d], -5.0, 5.0);
        let t_n = uniform(&mut r, &[l, d], -5.0, 5.0);
        let a: Vec<f64> = (0..l).map(|_| r.random_range(0.001..0.999)).collect();
        let got = fuse(
            &distilled(i_n.clone(), Modality::Image),
            &distilled(t_n.clone(), Modality::Text),
            &GateVector {
                a: Tensor::new(vec![l, 1], a.clone()).unwrap(),
            },
        )
        .unwrap();
        worst = worst.max(diff(got.tokens.data(), &oracles::fuse(&rows(&i_n), &rows(&t_n), &a).concat()));
    }
    worst
}

fn random_head(seed: u64) -> (ParamStore, MoEHead, Tensor) {
    let mut r = rng(seed);
    let e = r.random_range(1..7);
    let cfg = MoEConfig {
        num_experts: e,
        top_k: r.random_range(1..=e),
        expert_hidden: r.random_range(1..6),
        num_classes: r.random_range(2..5),
        full_softmax_gates: false,
    };
    let input = r.random_range(1..7);
    let mut store = ParamStore::new();
    let head = MoEHead::new(&mut store, input, cfg, &mut r).unwrap();
    store.get_mut(head.router.b).value = uniform(&mut r, &[e], -1.0, 1.0);
    let x = uniform(&mut r, &[input], -2.0, 2.0);
    (store, head, x)
}

/// Largest deviation in logits or weights; panics if the selection differs.
pub fn route_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let (store, head, x) = random_head(60_000 + seed);
        let got = route(&x, &head, &store).unwrap();
        let (logits, selected, weights) = oracles::route(
            x.data(),
            &mat(&store, head.router.w),
            &vecv(&store, head.router.b),
            head.cfg.top_k,
        );
        assert_eq!(got.selected, selected, "instance {seed}: selection differs");
        worst = worst
            .max(diff(got.gate_logits.data(), &logits))
            .max(diff(got.weights.data(), &weights));
    }
    worst
}

pub fn moe_forward_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let (store, head, x) = random_head(70_000 + seed);
        let decision = route(&x, &head, &store).unwrap();
        let got = moe_forward(&x, &head, &store, &decision).unwrap();
        let (_, selected, weights) = oracles::route(
            x.data(),
            &mat(&store, head.router.w),
            &vecv(&store, head.router.b),
            head.cfg.top_k,
        );
        let mut expect = vec![0.0; head.cfg.num_classes];
        for (&e, &w) in selected.iter().zip(&weights) {
            let ex = &head.experts[e];
            let y = oracles::mlp(
                x.data(),
                &mat(&store, ex.w1),
                &vecv(&store, ex.b1),
                &mat(&store, ex.w2),
                &vecv(&store, ex.b2),
            );
            expect.iter_mut().zip(y).for_each(|(o, v)| *o += w * v);
        }
        worst = worst.max(diff(got.data(), &expect));
    }
    worst
}

pub fn cross_entropy_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(80_000 + seed);
        let b = r.random_range(1..6);
        let c = r.random_range(2..7);
        let logits = uniform(&mut r, &[b, c], -8.0, 8.0);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
        let got = cross_entropy(&logits, &labels).unwrap();
        worst = worst.max((got - oracles::cross_entropy(&rows(&logits), &labels)).abs());
    }
    worst
}

pub fn info_nce_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(90_000 + seed);
        let b = r.random_range(2..7);
        let d = r.random_range(1..6);
        let img = uniform(&mut r, &[b, d], -2.0, 2.0);
        let txt = uniform(&mut r, &[b, d], -2.0, 2.0);
        let tau = r.random_range(0.05..1.0);
        let got = info_nce(&ContrastiveBatch {
            image_embed: img.clone(),
            text_embed: txt.clone(),
            temperature: tau,
        })
        .unwrap();
        worst = worst.max((got - oracles::info_nce(&rows(&img), &rows(&txt), tau)).abs());
    }
    worst
}

pub fn load_balance_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(100_000 + seed);
        let b = r.random_range(1..9);
        let e = r.random_range(1..9);
        let logits = uniform(&mut r, &[b, e], -3.0, 3.0);
        let cfg = MoEConfig {
            num_experts: e,
            top_k: 1,
            ..MoEConfig::default()
        };
        let got = load_balance_loss(&RoutingStats::from_logits(&logits).unwrap(), &cfg).unwrap();
        worst = worst.max((got - oracles::load_balance(&rows(&logits))).abs());
    }
    worst
}

/// Every check with its name, in a fixed order.
pub fn all(instances: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("q_transform", q_transform_error(instances)),
        ("q_bottleneck", q_bottleneck_error(instances)),
        ("compute_gate", gate_error(instances)),
        ("fuse", fuse_error(instances)),
        ("route", route_error(instances)),
        ("moe_forward", moe_forward_error(instances)),
        ("cross_entropy", cross_entropy_error(instances)),
        ("info_nce", info_nce_error(instances)),
        ("load_balance_loss", load_balance_error(instances)),
    ]
}
