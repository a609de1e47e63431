//! Encoder block properties and parameter accounting.

mod common;

use std::time::Instant;

use common::random_tensor;
use kgattn::autodiff::{Mode, Tape};
use kgattn::decoder::{DecodeFrom, DecoderConfig, DecoderKind};
use kgattn::encoder::{count_nonembedding_params, Encoder, EncoderBuffers, EncoderConfig};
use kgattn::params::ParamStore;
use kgattn::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(d: usize, heads: usize) -> EncoderConfig {
    EncoderConfig {
        d,
        heads,
        d_k: 4,
        d_v: 4,
        d_h: 16,
        do_enc: 0.0,
        do_mha: 0.0,
        do_sdp: 0.0,
        do_pff: 0.0,
        final_layer_norm: true,
    }
}

fn decoder(kind: DecoderKind) -> DecoderConfig {
    DecoderConfig {
        kind,
        decode_from: DecodeFrom::Relation,
        tucker_input_bn: true,
    }
}

/// Encodes `(a, b)` and returns both output halves.
fn encode_pair(
    enc: &Encoder,
    store: &ParamStore<f64>,
    buffers: &EncoderBuffers<f64>,
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    mode: Mode,
) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let s = tape.leaf(a, false);
    let r = tape.leaf(b, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = enc.encode(&mut tape, &bound, buffers, s, r, mode, &mut rng).unwrap();
    (tape.value(out.source).data().to_vec(), tape.value(out.relation).data().to_vec())
}

#[test]
fn swapping_inputs_swaps_outputs_when_norms_are_shared() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = config(8, 2);
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::init(c, &mut store, &mut rng).unwrap();
    let gamma = random_tensor(&[8], &mut rng);
    let beta = random_tensor(&[8], &mut rng);
    *store.get_mut(enc.params.entity_bn.0) = gamma.clone();
    *store.get_mut(enc.params.relation_bn.0) = gamma;
    *store.get_mut(enc.params.entity_bn.1) = beta.clone();
    *store.get_mut(enc.params.relation_bn.1) = beta;
    let buffers = EncoderBuffers::new(8);
    let a = random_tensor(&[5, 8], &mut rng);
    let b = random_tensor(&[5, 8], &mut rng);
    for mode in [Mode::Eval, Mode::Train] {
        let (x, y) = encode_pair(&enc, &store, &buffers, &a, &b, mode);
        let (y2, x2) = encode_pair(&enc, &store, &buffers, &b, &a, mode);
        for (p, q) in x.iter().zip(&x2).chain(y.iter().zip(&y2)) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    // distinct norm parameters break the symmetry
    *store.get_mut(enc.params.relation_bn.1) = random_tensor(&[8], &mut rng);
    let (x, _) = encode_pair(&enc, &store, &buffers, &a, &b, Mode::Eval);
    let (_, x2) = encode_pair(&enc, &store, &buffers, &b, &a, Mode::Eval);
    assert!(x.iter().zip(&x2).any(|(p, q)| (p - q).abs() > 1e-6));
}

#[test]
fn attention_rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = EncoderConfig {
        heads: 5,
        ..config(8, 5)
    };
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::init(c, &mut store, &mut rng).unwrap();
    let x = random_tensor(&[14, 8], &mut rng);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.leaf(&x, false);
    let (_, probs) = enc.attention_with_probs(&mut tape, &bound, x, Mode::Eval, &mut rng).unwrap();
    let p = tape.value(probs);
    assert_eq!(p.shape(), &[7 * 5 * 2, 2]);
    for i in 0..p.shape()[0] {
        assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

fn headline(heads: usize) -> EncoderConfig {
    EncoderConfig {
        d: 100,
        heads,
        d_k: 32,
        d_v: 50,
        d_h: 2048,
        ..config(100, heads)
    }
}

#[test]
fn nonembedding_count_is_affine_in_heads() {
    let twomult = decoder(DecoderKind::TwoMult);
    let nfp = |h| count_nonembedding_params(&headline(h), &twomult) as i64;
    let slope = nfp(2) - nfp(1);
    for h in 1..200 {
        assert_eq!(nfp(h + 1) - nfp(h), slope);
    }
    assert_eq!(slope, 2 * 100 * 32 + 100 * 50 + 50 * 100);
    assert_eq!(nfp(64), 1_461_948);
    for (h, reported) in [(4, 0.5e6), (8, 0.56e6), (16, 0.70e6), (32, 0.96e6), (64, 1.50e6), (128, 2.58e6)] {
        let rel = (nfp(h) as f64 - reported).abs() / reported;
        assert!(rel < 0.10, "h={h}: {} vs {reported}", nfp(h));
    }
}

#[test]
fn tucker_core_adds_cubic_count() {
    let c = EncoderConfig {
        d: 64,
        ..headline(64)
    };
    let two = count_nonembedding_params(&c, &decoder(DecoderKind::TwoMult));
    let tucker_no_bn = DecoderConfig {
        tucker_input_bn: false,
        ..decoder(DecoderKind::Tucker)
    };
    assert_eq!(count_nonembedding_params(&c, &tucker_no_bn) - two, 262_144);
}

fn forward_seconds(d: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = EncoderConfig {
        d,
        heads: 8,
        d_k: d / 4,
        d_v: d / 4,
        d_h: 4 * d,
        ..config(d, 8)
    };
    let mut store = ParamStore::<f32>::new();
    let enc = Encoder::init(c, &mut store, &mut rng).unwrap();
    let buffers = EncoderBuffers::new(d);
    let a = random_tensor(&[256, d], &mut rng).cast::<f32>();
    let b = random_tensor(&[256, d], &mut rng).cast::<f32>();
    let mut times = Vec::new();
    for _ in 0..5 {
        let start = Instant::now();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let s = tape.leaf(&a, false);
        let r = tape.leaf(&b, false);
        enc.encode(&mut tape, &bound, &buffers, s, r, Mode::Eval, &mut rng).unwrap();
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    times[2]
}

#[test]
fn forward_time_grows_with_width() {
    let small = forward_seconds(32);
    let large = forward_seconds(256);
    assert!(large > small, "d=32: {small}s, d=256: {large}s");
}
