//! Structural properties of the MoE head and the gated fusion, checked on
//! seeded random instances. Each function returns a description of the first
//! violation it finds.
#![allow(dead_code)]

use gatefuse::attention::DistilledTokens;
use gatefuse::data::Modality;
use gatefuse::gating::{compute_gate, fuse, GateNetwork, GateVector};
use gatefuse::moe::{load_balance_loss, route, MoEConfig, MoEHead, RoutingStats};
use gatefuse::{ParamStore, Tape, Tensor};
use rand::Rng;

use super::{naive_softmax, rng, uniform};

type Check = Result<(), String>;

fn head(seed: u64, e: usize, k: usize, input: usize) -> (ParamStore, MoEHead) {
    let mut r = rng(seed);
    let cfg = MoEConfig {
        num_experts: e,
        top_k: k,
        expert_hidden: 5,
        num_classes: 3,
        full_softmax_gates: false,
    };
    let mut store = ParamStore::new();
    let h = MoEHead::new(&mut store, input, cfg, &mut r).unwrap();
    (store, h)
}

/// With `top_k = E` the sparse head equals the dense softmax mixture of all
/// experts.
pub fn dense_equivalence(instances: u64) -> Check {
    for seed in 0..instances {
        let mut r = rng(seed);
        let e = r.random_range(1..7);
        let (store, h) = head(seed, e, e, 4);
        let x = uniform(&mut r, &[3, 4], -2.0, 2.0);
        let tape = Tape::new();
        let out = h.forward(&tape, &store, tape.constant(x.clone())).unwrap();
        let got = out.logits.value();
        let router = out.router_logits.value();
        for b in 0..3 {
            let probs = naive_softmax(router.row(b));
            let xb = Tensor::new(vec![4], x.row(b).to_vec()).unwrap();
            let mut expect = [0.0; 3];
            for (i, p) in probs.iter().enumerate() {
                let y = h.expert_output(&store, i, &xb).unwrap();
                for c in 0..3 {
                    expect[c] += p * y.data()[c];
                }
            }
            for c in 0..3 {
                let err = (got.row(b)[c] - expect[c]).abs();
                if err > 1e-12 {
                    return Err(format!("instance {seed}: dense mixture differs by {err:e}"));
                }
            }
        }
    }
    Ok(())
}

/// A single input routes gradient into exactly `top_k` experts.
pub fn gradient_sparsity(instances: u64) -> Check {
    for seed in 0..instances {
        let mut r = rng(1_000 + seed);
        let e = r.random_range(2..9);
        let k = r.random_range(1..=e);
        let (store, h) = head(1_000 + seed, e, k, 4);
        let x = uniform(&mut r, &[1, 4], -2.0, 2.0);
        let tape = Tape::new();
        let out = h.forward(&tape, &store, tape.constant(x)).unwrap();
        let w = tape.constant(uniform(&mut r, &[1, 3], 0.5, 1.5));
        let grads = out.logits.mul(&w).unwrap().sum().unwrap().backward().unwrap();
        let touched: Vec<usize> = (0..e)
            .filter(|&i| {
                let ex = &h.experts[i];
                [ex.w1, ex.b1, ex.w2, ex.b2]
                    .iter()
                    .any(|&id| grads.param(id).is_some_and(|g| g.iter().any(|v| *v != 0.0)))
            })
            .collect();
        let mut selected = out.decisions[0].selected.clone();
        selected.sort_unstable();
        if touched != selected || touched.len() != k {
            return Err(format!("instance {seed}: k={k}, selected {selected:?}, gradients in {touched:?}"));
        }
    }
    Ok(())
}

/// `E·Σ f·p` is exactly 1 at uniform usage (power-of-two E, where `1/E` is
/// exact) and exactly E when everything lands on one expert.
pub fn load_balance_extremes() -> Check {
    for e in [1usize, 2, 4, 8, 16, 32] {
        let cfg = MoEConfig {
            num_experts: e,
            top_k: 1,
            ..MoEConfig::default()
        };
        let uniform = RoutingStats {
            f: vec![1.0 / e as f64; e],
            p: vec![1.0 / e as f64; e],
        };
        let l = load_balance_loss(&uniform, &cfg).unwrap();
        if l != 1.0 {
            return Err(format!("E={e}: uniform routing gives {l}, expected exactly 1"));
        }
        // Collapsed routing from actual router logits.
        let mut logits = vec![0.0; e * 4];
        for b in 0..4 {
            logits[b * e] = 800.0;
        }
        let stats = RoutingStats::from_logits(&Tensor::new(vec![4, e], logits).unwrap()).unwrap();
        let l = load_balance_loss(&stats, &cfg).unwrap();
        if l != e as f64 {
            return Err(format!("E={e}: collapsed routing gives {l}, expected exactly {e}"));
        }
    }
    // Uniform routing realized by a batch: each expert wins one row, and every
    // row's softmax averages to uniform by symmetry.
    for e in [2usize, 4, 8, 16] {
        let cfg = MoEConfig {
            num_experts: e,
            top_k: 1,
            ..MoEConfig::default()
        };
        let mut logits = vec![0.0; e * e];
        for b in 0..e {
            logits[b * e + b] = 1.0;
        }
        let stats = RoutingStats::from_logits(&Tensor::new(vec![e, e], logits).unwrap()).unwrap();
        let l = load_balance_loss(&stats, &cfg).unwrap();
        if (l - 1.0).abs() > 1e-15 {
            return Err(format!("E={e}: balanced batch gives {l}"));
        }
    }
    Ok(())
}

/// Selected experts are distinct, the gate weights are positive and sum to one.
pub fn routing_weights(instances: u64) -> Check {
    for seed in 0..instances {
        let mut r = rng(2_000 + seed);
        let e = r.random_range(1..9);
        let k = r.random_range(1..=e);
        let (store, h) = head(2_000 + seed, e, k, 3);
        let x = uniform(&mut r, &[3], -3.0, 3.0);
        let d = route(&x, &h, &store).unwrap();
        let mut s = d.selected.clone();
        s.sort_unstable();
        s.dedup();
        let sum: f64 = d.weights.data().iter().sum();
        if s.len() != k || (sum - 1.0).abs() > 1e-12 || d.weights.data().iter().any(|&w| w <= 0.0) {
            return Err(format!("instance {seed}: selected {:?} weights {:?}", d.selected, d.weights.data()));
        }
    }
    Ok(())
}

fn distilled(t: Tensor, m: Modality) -> DistilledTokens {
    DistilledTokens { tokens: t, modality: m }
}

/// Gates from a random gate network are strictly inside (0, 1), and every
/// fused coordinate lies between the two inputs.
pub fn convex_hull(instances: u64) -> Check {
    for seed in 0..instances {
        let mut r = rng(3_000 + seed);
        let d = r.random_range(1..9);
        let l = r.random_range(1..9);
        let mut store = ParamStore::new();
        let net = GateNetwork::new(&mut store, d, r.random_range(1..9), false, &mut r).unwrap();
        let i_n = distilled(uniform(&mut r, &[l, d], -3.0, 3.0), Modality::Image);
        let t_n = distilled(uniform(&mut r, &[l, d], -3.0, 3.0), Modality::Text);
        let a = compute_gate(&i_n, &t_n, &net, &store).unwrap();
        if let Some(bad) = a.a.data().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
            return Err(format!("instance {seed}: gate value {bad}"));
        }
        let f = fuse(&i_n, &t_n, &a).unwrap();
        for ((&fv, &iv), &tv) in f.tokens.data().iter().zip(i_n.tokens.data()).zip(t_n.tokens.data()) {
            let (lo, hi) = (iv.min(tv), iv.max(tv));
            if fv < lo || fv > hi {
                return Err(format!("instance {seed}: {fv} outside [{lo}, {hi}]"));
            }
        }
    }
    Ok(())
}

/// `fuse(I, T, a) == fuse(T, I, 1 − a)`.
pub fn swap_symmetry(instances: u64) -> Check {
    for seed in 0..instances {
        let mut r = rng(4_000 + seed);
        let d = r.random_range(1..9);
        let l = r.random_range(1..9);
        let i_n = distilled(uniform(&mut r, &[l, d], -3.0, 3.0), Modality::Image);
        let t_n = distilled(uniform(&mut r, &[l, d], -3.0, 3.0), Modality::Text);
        let a: Vec<f64> = (0..l).map(|_| r.random_range(0.001..0.999)).collect();
        let flipped: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        let gate = |v: Vec<f64>| GateVector {
            a: Tensor::new(vec![l, 1], v).unwrap(),
        };
        let x = fuse(&i_n, &t_n, &gate(a)).unwrap();
        let y = fuse(&t_n, &i_n, &gate(flipped)).unwrap();
        let err = x.tokens.max_abs_diff(&y.tokens);
        if err > 1e-12 {
            return Err(format!("instance {seed}: swapped fusion differs by {err:e}"));
        }
    }
    Ok(())
}
