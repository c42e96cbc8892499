//! Randomized attention invariants, 1000 trials each: row-stochastic
//! weights, single-key identity, convex-hull membership for scalar
//! values, encoder permutation equivariance, and decoder invariance to
//! memory permutation.

use d2sdk_core::attention::{
    decoder_stack, encoder_stack, init_decoder_stack, init_encoder_stack, sdp_attention,
};
use d2sdk_core::params::{derive_rng, Forward, ParamRegistry, ParamSession};
use d2sdk_core::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;

const CASES: u32 = 1000;

fn qkv_strategy() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)>
{
    (1usize..3, 1usize..5, 1usize..5, 1usize..6).prop_flat_map(|(b, nq, nk, d)| {
        (
            Just(b),
            Just(nq),
            Just(nk),
            Just(d),
            prop::collection::vec(-5.0..5.0f64, b * nq * d),
            prop::collection::vec(-5.0..5.0f64, b * nk * d),
            prop::collection::vec(-5.0..5.0f64, b * nk * d),
        )
    })
}

#[allow(clippy::too_many_arguments)]
fn run_sdp(
    b: usize,
    nq: usize,
    nk: usize,
    d: usize,
    dv: usize,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
) -> (Tensor, Tensor) {
    let reg = ParamRegistry::new();
    let mut tape = Tape::new();
    let mut sess = ParamSession::new();
    let mut fx = Forward::new(&mut tape, &reg, &mut sess);
    let qid = fx.tape.leaf(Tensor::new(vec![b, nq, d], q).unwrap(), false);
    let kid = fx.tape.leaf(Tensor::new(vec![b, nk, d], k).unwrap(), false);
    let vid = fx.tape.leaf(Tensor::new(vec![b, nk, dv], v).unwrap(), false);
    let (out, weights) = sdp_attention(&mut fx, qid, kid, vid).unwrap();
    (tape.value(out).clone(), tape.value(weights).clone())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: CASES, ..ProptestConfig::default() })]

    #[test]
    fn attention_rows_are_stochastic((b, nq, nk, d, q, k, v) in qkv_strategy()) {
        let (_, weights) = run_sdp(b, nq, nk, d, d, q, k, v);
        prop_assert_eq!(weights.shape(), &[b, nq, nk]);
        for row in weights.data().chunks_exact(nk) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row sum {}", sum);
            prop_assert!(row.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn single_key_attention_returns_the_value(
        (b, nq, _, d, q, k, v) in qkv_strategy()
    ) {
        let k1 = k[..b * d].to_vec();
        let v1 = v[..b * d].to_vec();
        let (out, _) = run_sdp(b, nq, 1, d, d, q, k1, v1.clone());
        for batch in 0..b {
            let expect = &v1[batch * d..(batch + 1) * d];
            for row in 0..nq {
                let got = &out.data()[(batch * nq + row) * d..(batch * nq + row + 1) * d];
                prop_assert!(
                    got.iter().zip(expect).all(|(a, e)| (a - e).abs() < 1e-12),
                    "batch {} row {}: {:?} vs {:?}", batch, row, got, expect
                );
            }
        }
    }

    #[test]
    fn scalar_values_stay_in_their_convex_hull(
        (b, nq, nk, d, q, k, _) in qkv_strategy(),
        v in prop::collection::vec(-5.0..5.0f64, 2 * 4),
    ) {
        let v: Vec<f64> = v.into_iter().cycle().take(b * nk).collect();
        let (out, _) = run_sdp(b, nq, nk, d, 1, q, k, v.clone());
        for batch in 0..b {
            let vals = &v[batch * nk..(batch + 1) * nk];
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for row in 0..nq {
                let o = out.data()[batch * nq + row];
                prop_assert!(
                    o >= lo - 1e-12 && o <= hi + 1e-12,
                    "output {} outside [{}, {}]", o, lo, hi
                );
            }
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant(
        seed in any::<u64>(),
        heads in 1usize..3,
        d_h in 1usize..4,
        n in 2usize..6,
        scale in 0.2f64..3.0,
    ) {
        let d = heads * d_h;
        let mut reg = ParamRegistry::new();
        let layers = init_encoder_stack(
            &mut reg, "enc", 1, d, 2 * d, true, &mut derive_rng(seed, "prop.enc"),
        ).unwrap();
        let mut value_rng = derive_rng(seed, "prop.enc.values");
        use rand::Rng;
        let tokens: Vec<f64> = (0..n * d)
            .map(|_| value_rng.random_range(-1.0..1.0) * scale)
            .collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut derive_rng(seed, "prop.enc.perm"));

        let forward_tokens = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let mut sess = ParamSession::new();
            let mut fx = Forward::new(&mut tape, &reg, &mut sess);
            let x = fx.tape.leaf(Tensor::new(vec![1, n, d], data).unwrap(), false);
            let out = encoder_stack(&mut fx, &layers, heads, x).unwrap();
            tape.value(out).data().to_vec()
        };
        let base = forward_tokens(tokens.clone());
        let permuted_input: Vec<f64> = perm
            .iter()
            .flat_map(|&p| tokens[p * d..(p + 1) * d].to_vec())
            .collect();
        let permuted = forward_tokens(permuted_input);
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..d {
                let a = permuted[i * d + j];
                let b = base[p * d + j];
                prop_assert!((a - b).abs() < 1e-9, "token {} dim {}: {} vs {}", i, j, a, b);
            }
        }
    }

    #[test]
    fn decoder_ignores_memory_order(
        seed in any::<u64>(),
        heads in 1usize..3,
        d_h in 1usize..4,
        n in 2usize..6,
        with_self_attn in any::<bool>(),
    ) {
        let d = heads * d_h;
        let mut reg = ParamRegistry::new();
        let layers = init_decoder_stack(
            &mut reg, "dec", 1, d, 2 * d, true, &mut derive_rng(seed, "prop.dec"),
        ).unwrap();
        let mut value_rng = derive_rng(seed, "prop.dec.values");
        use rand::Rng;
        let memory: Vec<f64> = (0..n * d).map(|_| value_rng.random_range(-2.0..2.0)).collect();
        let query: Vec<f64> = (0..d).map(|_| value_rng.random_range(-2.0..2.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut derive_rng(seed, "prop.dec.perm"));

        let decode = |mem: Vec<f64>| {
            let mut tape = Tape::new();
            let mut sess = ParamSession::new();
            let mut fx = Forward::new(&mut tape, &reg, &mut sess);
            let q = fx.tape.leaf(Tensor::new(vec![1, 1, d], query.clone()).unwrap(), false);
            let m = fx.tape.leaf(Tensor::new(vec![1, n, d], mem).unwrap(), false);
            let out = decoder_stack(&mut fx, &layers, heads, with_self_attn, q, m).unwrap();
            tape.value(out).data().to_vec()
        };
        let base = decode(memory.clone());
        let shuffled_memory: Vec<f64> = perm
            .iter()
            .flat_map(|&p| memory[p * d..(p + 1) * d].to_vec())
            .collect();
        let shuffled = decode(shuffled_memory);
        for (a, b) in base.iter().zip(&shuffled) {
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }
}
