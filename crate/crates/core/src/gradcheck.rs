//! Finite-difference verification of every backward rule. Everything here
//! runs at `f64`: the tape code is generic, so the same rules that train at
//! `f32` are checked against central differences with `h = 1e-3`.
//!
//! Relative error uses `|a-f| / max(|a|, |f|, 0.01)`; the floor keeps the
//! ratio meaningful where the true gradient is ~0.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{finite_diff_grad, BnMode, Mode, Tape, TensorId};
use crate::tensor::Tensor;
use crate::tiling::Tiling;
use crate::wrn::{ImageModel, PatchModel, WideResNetConfig};

pub const PRIMITIVE_TOL: f64 = 1e-3;
pub const COMPOSED_TOL: f64 = 1e-2;
const FD_STEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: &'static str,
    pub max_rel_err: f64,
}

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-2)
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

/// Tensor with entries bounded away from zero, for kinked ops (ReLU).
fn rand_tensor_offset(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

/// Max relative error between tape gradients and finite differences for a
/// scalar graph built by `build` over `inputs`. Every input is checked.
pub fn check_graph<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = build(&mut tape, &ids).expect("graph builds");
    let loss_val = tape.data(loss)[0];
    assert!(loss_val.is_finite(), "loss not finite");
    tape.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(ids[k]).expect("input gradient").to_vec();
        let mut eval = |probe: &Tensor<f64>| -> f64 {
            let mut t2 = Tape::new();
            let ids2: Vec<TensorId> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| t2.constant(if i == k { probe.clone() } else { t.clone() }))
                .collect();
            let l = build(&mut t2, &ids2).expect("graph builds");
            t2.data(l)[0]
        };
        let fd = finite_diff_grad(&mut eval, input, FD_STEP);
        for (&a, &f) in analytic.iter().zip(fd.data()) {
            worst = worst.max(rel_err(a, f));
        }
    }
    worst
}

/// FD-check every differentiable primitive on randomized small shapes.
pub fn check_primitives(seed: u64) -> Vec<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut push = |name: &'static str, err: f64| reports.push(OpReport { name, max_rel_err: err });

    // Squared sum turns linear ops into curved scalars so FD sees them.
    let sq = |tape: &mut Tape<f64>, y: TensorId| -> Result<TensorId> {
        let yy = tape.mul(y, y)?;
        Ok(tape.sum(yy))
    };

    push("add", {
        let a = rand_tensor(vec![3, 4], &mut rng);
        let b = rand_tensor(vec![3, 4], &mut rng);
        check_graph(&[a, b], |t, ids| {
            let y = t.add(ids[0], ids[1])?;
            sq(t, y)
        })
    });
    push("mul", {
        let a = rand_tensor(vec![2, 5], &mut rng);
        let b = rand_tensor(vec![2, 5], &mut rng);
        check_graph(&[a, b], |t, ids| {
            let y = t.mul(ids[0], ids[1])?;
            Ok(t.sum(y))
        })
    });
    push("scale", {
        let a = rand_tensor(vec![7], &mut rng);
        check_graph(&[a], |t, ids| {
            let y = t.scale(ids[0], -1.7);
            sq(t, y)
        })
    });
    push("relu", {
        let a = rand_tensor_offset(vec![4, 6], &mut rng);
        check_graph(&[a], |t, ids| {
            let y = t.relu(ids[0]);
            sq(t, y)
        })
    });
    push("conv2d", {
        let x = rand_tensor(vec![2, 3, 7, 6], &mut rng);
        let k = rand_tensor(vec![4, 3, 3, 3], &mut rng);
        let b = rand_tensor(vec![4], &mut rng);
        check_graph(&[x, k, b], |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], (2, 1), (1, 2))?;
            sq(t, y)
        })
    });
    push("conv2d_3x3_s1", {
        let x = rand_tensor(vec![2, 3, 6, 7], &mut rng);
        let k = rand_tensor(vec![4, 3, 3, 3], &mut rng);
        let b = rand_tensor(vec![4], &mut rng);
        check_graph(&[x, k, b], |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], (1, 1), (1, 1))?;
            sq(t, y)
        })
    });
    push("conv2d_1x1", {
        let x = rand_tensor(vec![2, 3, 5, 4], &mut rng);
        let k = rand_tensor(vec![2, 3, 1, 1], &mut rng);
        let b = rand_tensor(vec![2], &mut rng);
        check_graph(&[x, k, b], |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], (1, 1), (0, 0))?;
            sq(t, y)
        })
    });
    push("conv2d_5x5_s3", {
        let x = rand_tensor(vec![1, 1, 13, 11], &mut rng);
        let k = rand_tensor(vec![3, 1, 5, 5], &mut rng);
        let b = rand_tensor(vec![3], &mut rng);
        check_graph(&[x, k, b], |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], (3, 3), (2, 2))?;
            sq(t, y)
        })
    });
    push("batchnorm_train", {
        let x = rand_tensor(vec![3, 2, 4, 3], &mut rng);
        let g = rand_tensor(vec![2], &mut rng);
        let b = rand_tensor(vec![2], &mut rng);
        check_graph(&[x, g, b], |t, ids| {
            let mut rm = vec![0.0; 2];
            let mut rv = vec![1.0; 2];
            let y = t.batchnorm2d(
                ids[0],
                ids[1],
                ids[2],
                BnMode::Train { running_mean: &mut rm, running_var: &mut rv, momentum: 0.1 },
                1e-5,
            )?;
            sq(t, y)
        })
    });
    push("batchnorm_infer", {
        let x = rand_tensor(vec![2, 2, 3, 3], &mut rng);
        let g = rand_tensor(vec![2], &mut rng);
        let b = rand_tensor(vec![2], &mut rng);
        check_graph(&[x, g, b], |t, ids| {
            let rm = vec![0.2, -0.1];
            let rv = vec![0.9, 1.3];
            let y = t.batchnorm2d(
                ids[0],
                ids[1],
                ids[2],
                BnMode::Infer { running_mean: &rm, running_var: &rv },
                1e-5,
            )?;
            sq(t, y)
        })
    });
    push("avgpool2x2_even", {
        let x = rand_tensor(vec![2, 2, 4, 6], &mut rng);
        check_graph(&[x], |t, ids| {
            let y = t.avgpool2x2(ids[0])?;
            sq(t, y)
        })
    });
    push("avgpool2x2_odd", {
        let x = rand_tensor(vec![1, 2, 5, 3], &mut rng);
        check_graph(&[x], |t, ids| {
            let y = t.avgpool2x2(ids[0])?;
            sq(t, y)
        })
    });
    push("global_avg_pool", {
        let x = rand_tensor(vec![2, 3, 4, 5], &mut rng);
        check_graph(&[x], |t, ids| {
            let y = t.global_avg_pool(ids[0])?;
            sq(t, y)
        })
    });
    push("linear", {
        let x = rand_tensor(vec![3, 5], &mut rng);
        let w = rand_tensor(vec![4, 5], &mut rng);
        let b = rand_tensor(vec![4], &mut rng);
        check_graph(&[x, w, b], |t, ids| {
            let y = t.linear(ids[0], ids[1], ids[2])?;
            sq(t, y)
        })
    });
    push("softmax", {
        let x = rand_tensor(vec![3, 4], &mut rng);
        check_graph(&[x], |t, ids| {
            let y = t.softmax(ids[0])?;
            sq(t, y)
        })
    });
    push("softmax_cross_entropy", {
        let x = rand_tensor(vec![4, 3], &mut rng);
        check_graph(&[x], |t, ids| t.softmax_cross_entropy(ids[0], &[0, 2, 1, 2]))
    });
    push("weighted_mean_rows", {
        let x = rand_tensor(vec![4, 3], &mut rng);
        check_graph(&[x], |t, ids| {
            let y = t.weighted_mean_rows(ids[0], &[1.0, 0.75, 0.5, 0.75])?;
            sq(t, y)
        })
    });
    push("concat_cols", {
        let a = rand_tensor(vec![2, 3], &mut rng);
        let b = rand_tensor(vec![2, 2], &mut rng);
        check_graph(&[a, b], |t, ids| {
            let y = t.concat_cols(ids[0], ids[1])?;
            sq(t, y)
        })
    });
    push("concat_batch", {
        let a = rand_tensor(vec![1, 2, 2, 2], &mut rng);
        let b = rand_tensor(vec![2, 2, 2, 2], &mut rng);
        check_graph(&[a, b], |t, ids| {
            let y = t.concat_batch(&[ids[0], ids[1]])?;
            sq(t, y)
        })
    });
    push("crop2d", {
        let x = rand_tensor(vec![1, 2, 5, 6], &mut rng);
        check_graph(&[x], |t, ids| {
            let y = t.crop2d(ids[0], 1, 2, 3, 3)?;
            sq(t, y)
        })
    });
    push("zero_pad2d", {
        let x = rand_tensor(vec![1, 2, 3, 4], &mut rng);
        check_graph(&[x], |t, ids| {
            let y = t.zero_pad2d(ids[0], 2, 1)?;
            sq(t, y)
        })
    });
    push("index_scalar", {
        let x = rand_tensor(vec![2, 3], &mut rng);
        check_graph(&[x], |t, ids| {
            let y = t.index_scalar(ids[0], 4)?;
            sq(t, y)
        })
    });
    push("sum", {
        let x = rand_tensor(vec![5], &mut rng);
        check_graph(&[x], |t, ids| {
            let y = t.sum(ids[0]);
            sq(t, y)
        })
    });
    reports
}

fn toy_config(patch: usize) -> WideResNetConfig {
    WideResNetConfig {
        groups: 2,
        filters_per_group: vec![2, 3],
        blocks_per_group: 1,
        input_patch: patch,
        initial_kernel: 5,
        initial_stride: 3,
        initial_pad: 2,
        num_classes: 2,
    }
}

/// FD check of the full patch model (backbone + classifier + loss) in train
/// mode, against both the input batch and every parameter.
pub fn check_patch_model(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = PatchModel::<f64>::build(toy_config(8), seed).unwrap();
    let input = rand_tensor(vec![2, 1, 8, 8], &mut rng);
    let labels = [0usize, 1];

    let mut tape = Tape::new();
    let mut m = model.clone();
    let input_id = tape.variable(input.clone());
    let fwd = m.forward(&mut tape, input_id, Mode::Train).unwrap();
    let loss = tape.softmax_cross_entropy(fwd.logits, &labels).unwrap();
    tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    // Input gradient.
    {
        let analytic = tape.grad(input_id).unwrap().to_vec();
        let mut eval = |probe: &Tensor<f64>| -> f64 {
            let mut t2 = Tape::new();
            let mut m2 = model.clone();
            let id = t2.constant(probe.clone());
            let f = m2.forward(&mut t2, id, Mode::Train).unwrap();
            let l = t2.softmax_cross_entropy(f.logits, &labels).unwrap();
            t2.data(l)[0]
        };
        let fd = finite_diff_grad(&mut eval, &input, FD_STEP);
        for (&a, &f) in analytic.iter().zip(fd.data()) {
            worst = worst.max(rel_err(a, f));
        }
    }
    // Parameter gradients.
    for (name, id) in &fwd.bindings {
        let analytic = tape.grad(*id).unwrap().to_vec();
        let base = model.params[name].clone();
        let mut eval = |probe: &Tensor<f64>| -> f64 {
            let mut t2 = Tape::new();
            let mut m2 = model.clone();
            m2.params.insert(name.clone(), probe.clone().with_grad());
            let id = t2.constant(input.clone());
            let f = m2.forward(&mut t2, id, Mode::Train).unwrap();
            let l = t2.softmax_cross_entropy(f.logits, &labels).unwrap();
            t2.data(l)[0]
        };
        let fd = finite_diff_grad(&mut eval, &base, FD_STEP);
        for (&a, &f) in analytic.iter().zip(fd.data()) {
            worst = worst.max(rel_err(a, f));
        }
    }
    worst
}

/// End-to-end FD check of the composed image model on a 2-tile toy image
/// (plus a single-tile second scale): gradients w.r.t. both input images and
/// every parameter, in train mode.
pub fn check_image_forward(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calc = PatchModel::<f64>::build(toy_config(8), seed).unwrap();
    let mass = PatchModel::<f64>::build(toy_config(8), seed + 1).unwrap();
    let model = ImageModel::from_patch_models(calc, mass, seed);

    // 8x12 at P=8 tiles to origins (0,0),(0,4): two half-overlapping tiles.
    let calc_tiling = Tiling::new(8, 12, 8).unwrap();
    assert_eq!(calc_tiling.origins, vec![(0, 0), (0, 4)]);
    let mass_tiling = Tiling::new(8, 8, 8).unwrap();
    let calc_img = rand_tensor(vec![1, 1, 8, 12], &mut rng);
    let mass_img = rand_tensor(vec![1, 1, 8, 8], &mut rng);
    let label = [1usize];

    let run = |m: &mut ImageModel<f64>,
               tape: &mut Tape<f64>,
               ci: TensorId,
               mi: TensorId|
     -> (TensorId, Vec<(String, TensorId)>) {
        let fwd = m
            .forward(tape, ci, &calc_tiling, mi, &mass_tiling, Mode::Train)
            .unwrap();
        let loss = tape.softmax_cross_entropy(fwd.logits, &label).unwrap();
        (loss, fwd.bindings)
    };

    let mut tape = Tape::new();
    let mut m = model.clone();
    let ci = tape.variable(calc_img.clone());
    let mi = tape.variable(mass_img.clone());
    let (loss, bindings) = run(&mut m, &mut tape, ci, mi);
    tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (which, img, id) in [(0, &calc_img, ci), (1, &mass_img, mi)] {
        let analytic = tape.grad(id).unwrap().to_vec();
        let mut eval = |probe: &Tensor<f64>| -> f64 {
            let mut t2 = Tape::new();
            let mut m2 = model.clone();
            let a = t2.constant(if which == 0 { probe.clone() } else { calc_img.clone() });
            let b = t2.constant(if which == 1 { probe.clone() } else { mass_img.clone() });
            let (l, _) = run(&mut m2, &mut t2, a, b);
            t2.data(l)[0]
        };
        let fd = finite_diff_grad(&mut eval, img, FD_STEP);
        for (&a, &f) in analytic.iter().zip(fd.data()) {
            worst = worst.max(rel_err(a, f));
        }
    }
    for (name, id) in &bindings {
        let analytic = tape.grad(*id).unwrap().to_vec();
        let base: Tensor<f64> = match name.as_str() {
            "fusion/w" => model.fusion_weight.clone(),
            "fusion/b" => model.fusion_bias.clone(),
            other => {
                if let Some(rest) = other.strip_prefix("calc/") {
                    model.calc.params[rest].clone()
                } else {
                    model.mass.params[other.strip_prefix("mass/").unwrap()].clone()
                }
            }
        };
        let mut eval = |probe: &Tensor<f64>| -> f64 {
            let mut t2 = Tape::new();
            let mut m2 = model.clone();
            *m2.param_mut(name).unwrap() = probe.clone().with_grad();
            let a = t2.constant(calc_img.clone());
            let b = t2.constant(mass_img.clone());
            let (l, _) = run(&mut m2, &mut t2, a, b);
            t2.data(l)[0]
        };
        let fd = finite_diff_grad(&mut eval, &base, FD_STEP);
        for (&a, &f) in analytic.iter().zip(fd.data()) {
            worst = worst.max(rel_err(a, f));
        }
    }
    worst
}

/// A generic trained-ish model has nonzero gradient at interior image pixels.
pub fn interior_pixel_gradient_nonzero(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calc = PatchModel::<f64>::build(toy_config(8), seed).unwrap();
    let mass = PatchModel::<f64>::build(toy_config(8), seed + 1).unwrap();
    let mut model = ImageModel::from_patch_models(calc, mass, seed);
    let calc_tiling = Tiling::new(8, 12, 8).unwrap();
    let mass_tiling = Tiling::new(8, 8, 8).unwrap();
    let calc_img = rand_tensor(vec![1, 1, 8, 12], &mut rng);
    let mass_img = rand_tensor(vec![1, 1, 8, 8], &mut rng);

    let mut tape = Tape::new();
    let ci = tape.variable(calc_img);
    let mi = tape.constant(mass_img);
    let fwd = model
        .forward(&mut tape, ci, &calc_tiling, mi, &mass_tiling, Mode::Train)
        .unwrap();
    tape.backward(fwd.prob_malignant).unwrap();
    // Interior pixel (4, 6) of the calc image.
    let g = tape.grad(ci).unwrap()[4 * 12 + 6];
    g != 0.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_within_tolerance() {
        for report in check_primitives(17) {
            assert!(
                report.max_rel_err < PRIMITIVE_TOL,
                "{}: rel err {}",
                report.name,
                report.max_rel_err
            );
        }
    }

    #[test]
    fn patch_model_within_tolerance() {
        let err = check_patch_model(23);
        assert!(err < COMPOSED_TOL, "patch model rel err {err}");
    }

    #[test]
    fn image_forward_within_tolerance() {
        let err = check_image_forward(29);
        assert!(err < COMPOSED_TOL, "image forward rel err {err}");
    }

    #[test]
    fn image_output_depends_on_interior_pixels() {
        assert!(interior_pixel_gradient_nonzero(31));
    }
}
