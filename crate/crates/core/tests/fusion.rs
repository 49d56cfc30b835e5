mod common;

use common::{invariants, rng, uniform};
use gatefuse::attention::{q_transform, AttentionOptions, QueryAttention, QueryRole};
use gatefuse::data::{Modality, TokenSequence};
use gatefuse::{ParamStore, Tensor};
use proptest::prelude::*;

#[test]
fn fused_tokens_stay_in_the_convex_hull() {
    invariants::convex_hull(1000).unwrap();
}

#[test]
fn swapping_modalities_mirrors_the_gate() {
    invariants::swap_symmetry(1000).unwrap();
}

fn layer(seed: u64, heads: usize, d: usize, l: usize) -> (ParamStore, QueryAttention) {
    let mut r = rng(seed);
    let opts = AttentionOptions {
        num_heads: heads,
        ..AttentionOptions::default()
    };
    let mut store = ParamStore::new();
    let layer = QueryAttention::new(&mut store, QueryRole::Text, l, d, opts, &mut r).unwrap();
    store.get_mut(layer.bank.queries).value = uniform(&mut r, &[l, d], -2.0, 2.0);
    (store, layer)
}

fn seq(tokens: Tensor) -> TokenSequence {
    TokenSequence {
        modality: Modality::Image,
        tokens,
        sample_id: 0,
    }
}

proptest! {
    #[test]
    fn attention_ignores_token_order(seed in 0u64..1000, s in 2usize..7, rot in 1usize..6) {
        let (store, layer) = layer(seed, 2, 4, 3);
        let mut r = rng(seed ^ 0xabc);
        let tokens = uniform(&mut r, &[s, 4], -2.0, 2.0);
        let mut rows = common::rows(&tokens);
        rows.rotate_left(rot % s);
        let permuted = Tensor::from_rows(&rows).unwrap();
        let a = q_transform(&seq(tokens), &layer, &store).unwrap();
        let b = q_transform(&seq(permuted), &layer, &store).unwrap();
        prop_assert!(a.tokens.max_abs_diff(&b.tokens) < 1e-12);
    }

    #[test]
    fn identity_value_path_stays_within_value_range(seed in 0u64..1000, s in 1usize..7) {
        let (mut store, layer) = layer(seed, 2, 4, 3);
        store.get_mut(layer.proj.w_v).value = Tensor::identity(4);
        store.get_mut(layer.proj.w_o.unwrap()).value = Tensor::identity(4);
        let mut r = rng(seed ^ 0xdef);
        let tokens = uniform(&mut r, &[s, 4], -2.0, 2.0);
        let out = q_transform(&seq(tokens.clone()), &layer, &store).unwrap();
        for c in 0..4 {
            let col: Vec<f64> = (0..s).map(|j| tokens.row(j)[c]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..3 {
                let v = out.tokens.row(i)[c];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn distilled_shape_is_independent_of_sequence_length() {
    let (store, layer) = layer(1, 4, 8, 5);
    for s in [1, 3, 40] {
        let tokens = uniform(&mut rng(s as u64), &[s, 8], -1.0, 1.0);
        let out = q_transform(&seq(tokens), &layer, &store).unwrap();
        assert_eq!(out.tokens.shape(), &[5, 8]);
    }
}
