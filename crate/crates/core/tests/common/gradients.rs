//! Finite-difference gradient checks shared by the gradient and acceptance suites.

use kgattn::autodiff::{BatchNormState, Mode, Tape, Var};
use kgattn::decoder::DecoderKind;
use kgattn::tensor::Tensor;
use kgattn::{Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, random_tensor};

/// Reduces any output to a scalar with fixed random weights, so every
/// output entry contributes a distinct amount to the gradient.
fn weigh(tape: &mut Tape<'_, f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(tape.shape(out), &mut rng);
    let w = tape.constant(w, false);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn inputs(shapes: &[&[usize]], seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| random_tensor(s, &mut rng)).collect()
}

fn check(shapes: &[&[usize]], build: impl for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Var) -> f64 {
    gradcheck(&inputs(shapes, 11), build)
}

/// Worst relative error of every differentiable tape operation.
pub fn op_errors() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a: &[usize] = if ta { &[4, 3] } else { &[3, 4] };
        let b: &[usize] = if tb { &[5, 4] } else { &[4, 5] };
        let err = check(&[a, b], |t, v| {
            let y = t.matmul_t(v[0], v[1], ta, tb).unwrap();
            weigh(t, y, 1)
        });
        out.push((format!("matmul(ta={ta}, tb={tb})"), err));
    }
    let mut push = |name: &str, err: f64| out.push((name.to_string(), err));
    push("add", check(&[&[3, 4], &[3, 4]], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        weigh(t, y, 2)
    }));
    push("add_row", check(&[&[3, 4], &[4]], |t, v| {
        let y = t.add_row(v[0], v[1]).unwrap();
        weigh(t, y, 3)
    }));
    push("mul", check(&[&[3, 4], &[3, 4]], |t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        weigh(t, y, 4)
    }));
    push("scale", check(&[&[3, 4]], |t, v| {
        let y = t.scale(v[0], -1.7);
        weigh(t, y, 5)
    }));
    push("relu", check(&[&[5, 4]], |t, v| {
        let y = t.relu(v[0]);
        weigh(t, y, 6)
    }));
    push("sigmoid", check(&[&[5, 4]], |t, v| {
        let y = t.sigmoid(v[0]);
        weigh(t, y, 7)
    }));
    push("sum", check(&[&[2, 3]], |t, v| t.sum(v[0])));
    push("mean", check(&[&[2, 3]], |t, v| t.mean(v[0])));
    push("softmax_rows", check(&[&[4, 5]], |t, v| {
        let y = t.softmax_rows(v[0], 0.7).unwrap();
        weigh(t, y, 8)
    }));
    push("dropout(train)", check(&[&[6, 5]], |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = t.dropout(v[0], 0.4, Mode::Train, &mut rng).unwrap();
        weigh(t, y, 9)
    }));
    let state = BatchNormState::<f64>::new(4);
    push("batch_norm(train)", check(&[&[5, 4], &[4], &[4]], |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], &state, Mode::Train).unwrap();
        weigh(t, y, 10)
    }));
    let mut running = BatchNormState::<f64>::new(4);
    running.running_mean = vec![0.1, -0.2, 0.3, 0.0];
    running.running_var = vec![0.5, 1.5, 2.0, 0.8];
    push("batch_norm(eval)", check(&[&[5, 4], &[4], &[4]], |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], &running, Mode::Eval).unwrap();
        weigh(t, y, 11)
    }));
    push("layer_norm", check(&[&[5, 4], &[4], &[4]], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        weigh(t, y, 12)
    }));
    push("gather_rows", check(&[&[5, 3]], |t, v| {
        let y = t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap();
        weigh(t, y, 13)
    }));
    push("concat_rows", check(&[&[2, 3], &[4, 3]], |t, v| {
        let y = t.concat_rows(v[0], v[1]).unwrap();
        weigh(t, y, 14)
    }));
    push("slice_rows", check(&[&[6, 3]], |t, v| {
        let y = t.slice_rows(v[0], 2, 3).unwrap();
        weigh(t, y, 15)
    }));
    // 3 pairs, 2 heads of width 3
    push("pair_logits", check(&[&[6, 6], &[6, 6]], |t, v| {
        let y = t.pair_logits(v[0], v[1], 2).unwrap();
        weigh(t, y, 16)
    }));
    push("pair_mix", check(&[&[12, 2], &[6, 4]], |t, v| {
        let y = t.pair_mix(v[0], v[1], 2).unwrap();
        weigh(t, y, 17)
    }));
    push("mode_two", check(&[&[3, 9], &[3, 3]], |t, v| {
        let y = t.mode_two(v[0], v[1]).unwrap();
        weigh(t, y, 18)
    }));
    for smoothing in [0.0, 0.1] {
        push(&format!("bce(ls={smoothing})"), check(&[&[3, 6]], |t, v| {
            t.bce_with_logits(v[0], vec![vec![2], vec![0], vec![5]], smoothing).unwrap()
        }));
        push(&format!("bce multi-label(ls={smoothing})"), check(&[&[3, 6]], |t, v| {
            t.bce_with_logits(v[0], vec![vec![1, 2], vec![], vec![0, 3, 5]], smoothing).unwrap()
        }));
    }
    out
}

/// d=8, h=2, d_k=d_v=4, d_h=16 with dropout and label smoothing on.
pub fn small_config(decoder: DecoderKind) -> ModelConfig {
    ModelConfig {
        decoder,
        d: 8,
        heads: 2,
        d_k: 4,
        d_v: 4,
        d_h: 16,
        label_smoothing: 0.1,
        ..ModelConfig::default()
    }
}

/// Loss of `model` on a fixed batch, train mode, fixed dropout masks.
fn model_loss(model: &Model<f64>, config: &ModelConfig) -> (f64, Vec<Option<Vec<f64>>>) {
    let sources = [0u32, 3, 7, 9, 3, 1];
    let relations = [0u32, 1, 2, 3, 2, 0];
    let targets = [vec![5u32], vec![2], vec![0], vec![9], vec![4], vec![8]];
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let fwd = model
        .forward(&mut tape, &sources, &relations, Mode::Train, &mut rng, true)
        .unwrap();
    let loss = tape
        .bce_with_logits(fwd.scores, targets.to_vec(), config.label_smoothing)
        .unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let grads = fwd.bound.vars().iter().map(|&v| grads.take(v)).collect();
    (tape.value(loss).data()[0], grads)
}

/// Checks every parameter scalar of a |V|=10, |R|=2 model end to end.
/// Returns `(scalars checked, worst relative error, worst parameter)`.
pub fn full_model_errors(decoder: DecoderKind) -> (usize, f64, String) {
    let config = small_config(decoder);
    let model = Model::<f64>::new(&config, 10, 2, 5).unwrap();
    let (_, grads) = model_loss(&model, &config);
    let h = 1e-6;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (i, name) in model.store.names().iter().enumerate() {
        let analytic = grads[i].clone().unwrap_or_else(|| vec![0.0; model.store.tensors()[i].len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            plus.store.tensors_mut()[i].data_mut()[j] += h;
            let mut minus = model.clone();
            minus.store.tensors_mut()[i].data_mut()[j] -= h;
            let numeric = (model_loss(&plus, &config).0 - model_loss(&minus, &config).0) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            if err > worst.0 {
                worst = (err, format!("{name}[{j}]"));
            }
            checked += 1;
        }
    }
    (checked, worst.0, worst.1)
}
