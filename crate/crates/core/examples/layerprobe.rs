//! Per-op cost probe at desk calc shapes (not part of the test suite).
use curriculearn::tape::{BnMode, Mode, Tape};
use curriculearn::tensor::Tensor;
use curriculearn::training::Preset;
use curriculearn::wrn::PatchModel;
use std::time::Instant;

fn main() {
    let preset = Preset::desk();
    let mut model =
        PatchModel::<f32>::build(preset.wrn_config(curriculearn::sampling::ScaleKind::Calc, 2), 1)
            .unwrap();
    let p = preset.patch;
    let data: Vec<f32> = (0..32 * p * p).map(|i| (i % 97) as f32 / 97.0).collect();
    let labels: Vec<usize> = (0..32).map(|i| i % 2).collect();

    // forward only
    let reps = 20;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let input = tape.constant(Tensor::new(vec![32, 1, p, p], data.clone()).unwrap());
        let fwd = model.forward(&mut tape, input, Mode::Train).unwrap();
        std::hint::black_box(tape.data(fwd.logits)[0]);
    }
    println!("forward only: {:.1} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // forward infer (constants, no bindings)
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let input = tape.constant(Tensor::new(vec![32, 1, p, p], data.clone()).unwrap());
        let fwd = model.forward(&mut tape, input, Mode::Infer).unwrap();
        std::hint::black_box(tape.data(fwd.logits)[0]);
    }
    println!("forward infer: {:.1} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // forward + backward
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let input = tape.constant(Tensor::new(vec![32, 1, p, p], data.clone()).unwrap());
        let fwd = model.forward(&mut tape, input, Mode::Train).unwrap();
        let loss = tape.softmax_cross_entropy(fwd.logits, &labels).unwrap();
        tape.backward(loss).unwrap();
        std::hint::black_box(tape.grad(fwd.bindings[0].1).unwrap()[0]);
    }
    println!("forward+backward: {:.1} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // individual ops at the initial-conv shape [32,1,64,64] k5 s3 p2
    let x = Tensor::new(vec![32, 1, 64, 64], data.clone()).unwrap();
    let k = Tensor::new(vec![8, 1, 5, 5], vec![0.1; 200]).unwrap();
    let b = Tensor::from_vec(vec![0.0; 8]);
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let xi = tape.constant(x.clone());
        let ki = tape.variable(k.clone());
        let bi = tape.variable(b.clone());
        let y = tape.conv2d(xi, ki, bi, (3, 3), (2, 2)).unwrap();
        let yy = tape.mul(y, y).unwrap();
        let l = tape.sum(yy);
        tape.backward(l).unwrap();
        std::hint::black_box(tape.grad(ki).unwrap()[0]);
    }
    println!("init conv fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // g1 conv3x3 at batch 32: [32,8,22,22] -> 8 filters
    let x = Tensor::new(vec![32, 8, 22, 22], vec![0.3; 32 * 8 * 484]).unwrap();
    let k = Tensor::new(vec![8, 8, 3, 3], vec![0.1; 576]).unwrap();
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let xi = tape.variable(x.clone());
        let ki = tape.variable(k.clone());
        let bi = tape.variable(b.clone());
        let y = tape.conv2d(xi, ki, bi, (1, 1), (1, 1)).unwrap();
        let yy = tape.mul(y, y).unwrap();
        let l = tape.sum(yy);
        tape.backward(l).unwrap();
        std::hint::black_box(tape.grad(ki).unwrap()[0]);
    }
    println!("g1 conv3x3 b32 fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // bn at [32,8,22,22]
    let g = Tensor::from_vec(vec![1.0; 8]);
    let be = Tensor::from_vec(vec![0.0; 8]);
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let xi = tape.variable(x.clone());
        let gi = tape.variable(g.clone());
        let bi = tape.variable(be.clone());
        let mut rm = vec![0.0; 8];
        let mut rv = vec![1.0; 8];
        let y = tape.batchnorm2d(xi, gi, bi, BnMode::Train { running_mean: &mut rm, running_var: &mut rv, momentum: 0.1 }, 1e-5).unwrap();
        let yy = tape.mul(y, y).unwrap();
        let l = tape.sum(yy);
        tape.backward(l).unwrap();
        std::hint::black_box(tape.grad(xi).unwrap()[0]);
    }
    println!("g1 bn b32 fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
