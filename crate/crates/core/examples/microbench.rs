//! Kernel micro-probe (not part of the test suite).
use curriculearn::gemm::{matmul_nn, matmul_nt, matmul_tn_acc};
use curriculearn::tape::{Mode, Tape};
use curriculearn::tensor::Tensor;
use std::time::Instant;

fn main() {
    // conv g1 shapes for a 66-tile image: positions=66*484, ckk=72, f=8
    let (m, l, n) = (66 * 484usize, 72usize, 8usize);
    let a: Vec<f32> = (0..m * l).map(|i| (i % 31) as f32 * 0.1).collect();
    let b: Vec<f32> = (0..n * l).map(|i| (i % 17) as f32 * 0.05).collect();
    let mut c = vec![0.0f32; m * n];
    let t0 = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        c.iter_mut().for_each(|v| *v = 0.0);
        matmul_nt(m, l, n, &a, &b, &mut c);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("conv-g1 matmul_nt: {:.2} ms  ({:.1} G MAC/s)", dt * 1e3, (m * l * n) as f64 / dt / 1e9);

    let bn: Vec<f32> = vec![0.3; n * l];
    let mut cn = vec![0.0f32; m * l];
    let t0 = Instant::now();
    for _ in 0..reps {
        cn.iter_mut().for_each(|v| *v = 0.0);
        matmul_nn(m, n, l, &c, &bn, &mut cn);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("conv-g1 matmul_nn (dcol): {:.2} ms  ({:.1} G MAC/s)", dt * 1e3, (m * l * n) as f64 / dt / 1e9);

    let mut dk = vec![0.0f32; n * l];
    let t0 = Instant::now();
    for _ in 0..reps {
        dk.iter_mut().for_each(|v| *v = 0.0);
        matmul_tn_acc(m, n, l, &c, &a, &mut dk);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("conv-g1 matmul_tn_acc (dK): {:.2} ms  ({:.1} G MAC/s)", dt * 1e3, (m * l * n) as f64 / dt / 1e9);

    // Alloc + zeroing cost of the col buffer
    let t0 = Instant::now();
    for _ in 0..reps {
        let col = vec![0.0f32; m * l];
        std::hint::black_box(&col);
    }
    println!("col alloc+zero ({} MB): {:.2} ms", m * l * 4 / 1_000_000, t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // Whole conv op through the tape at g1 shape: x [66,8,22,22] k [8,8,3,3]
    let x = Tensor::new(vec![66, 8, 22, 22], vec![0.3f32; 66 * 8 * 22 * 22]).unwrap();
    let k = Tensor::new(vec![8, 8, 3, 3], vec![0.1f32; 8 * 8 * 9]).unwrap();
    let bias = Tensor::from_vec(vec![0.0f32; 8]);
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let xi = tape.constant(x.clone());
        let ki = tape.variable(k.clone());
        let bi = tape.variable(bias.clone());
        let y = tape.conv2d(xi, ki, bi, (1, 1), (1, 1)).unwrap();
        std::hint::black_box(tape.data(y).len());
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let macs = 66.0 * 484.0 * 8.0 * 72.0;
    println!("tape conv2d g1 fwd: {:.2} ms  ({:.1} G MAC/s incl im2col)", dt * 1e3, macs / dt / 1e9);

    // Same but with backward.
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let xi = tape.constant(x.clone());
        let ki = tape.variable(k.clone());
        let bi = tape.variable(bias.clone());
        let y = tape.conv2d(xi, ki, bi, (1, 1), (1, 1)).unwrap();
        let yy = tape.mul(y, y).unwrap();
        let loss = tape.sum(yy);
        tape.backward(loss).unwrap();
        std::hint::black_box(tape.grad(ki).unwrap()[0]);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("tape conv2d g1 fwd+bwd(dK only): {:.2} ms", dt * 1e3);

    // BN at g1 shape, train mode fwd+bwd
    let g = Tensor::from_vec(vec![1.0f32; 8]);
    let be = Tensor::from_vec(vec![0.0f32; 8]);
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let xi = tape.variable(x.clone());
        let gi = tape.variable(g.clone());
        let bi = tape.variable(be.clone());
        let mut rm = vec![0.0f32; 8];
        let mut rv = vec![1.0f32; 8];
        let y = tape
            .batchnorm2d(xi, gi, bi, curriculearn::tape::BnMode::Train { running_mean: &mut rm, running_var: &mut rv, momentum: 0.1 }, 1e-5)
            .unwrap();
        let yy = tape.mul(y, y).unwrap();
        let loss = tape.sum(yy);
        tape.backward(loss).unwrap();
        std::hint::black_box(tape.grad(xi).unwrap()[0]);
    }
    println!("tape bn g1 fwd+bwd: {:.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
