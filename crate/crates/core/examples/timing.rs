//! Rough step-time probe for the desk preset (not part of the test suite).

use std::time::Instant;

use curriculearn::phantom::{generate_case, PhantomConfig};
use curriculearn::sampling::ScaleKind;
use curriculearn::tape::{Mode, Tape};
use curriculearn::tensor::Tensor;
use curriculearn::tiling::Tiling;
use curriculearn::training::Preset;
use curriculearn::wrn::{ImageModel, PatchModel};

fn main() {
    let preset = Preset::desk();
    let p = preset.patch;

    // Patch step: batch 32 forward+backward, calc (N=1) and mass (N=2).
    for scale in [ScaleKind::Calc, ScaleKind::Mass] {
        let mut model =
            PatchModel::<f32>::build(preset.wrn_config(scale, 2), 1).unwrap();
        let data: Vec<f32> = (0..32 * p * p).map(|i| (i % 97) as f32 / 97.0).collect();
        let labels: Vec<usize> = (0..32).map(|i| i % 2).collect();
        let reps = 10;
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::<f32>::new();
            let input = tape.constant(Tensor::new(vec![32, 1, p, p], data.clone()).unwrap());
            let fwd = model.forward(&mut tape, input, Mode::Train).unwrap();
            let loss = tape.softmax_cross_entropy(fwd.logits, &labels).unwrap();
            tape.backward(loss).unwrap();
            let _ = tape.grad(fwd.bindings[0].1).unwrap()[0];
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        println!("{scale} patch step (batch 32 fwd+bwd): {:.1} ms", dt * 1e3);
    }

    // Image iteration: desk-sized image through both scales, train mode.
    let config = PhantomConfig::default();
    let case = generate_case(7, &config).unwrap();
    let img = case.breasts[0].views[0].image.to_f32();
    let calc = PatchModel::<f32>::build(preset.wrn_config(ScaleKind::Calc, 3), 1).unwrap();
    let mass = PatchModel::<f32>::build(preset.wrn_config(ScaleKind::Mass, 2), 2).unwrap();
    let mut model = ImageModel::from_patch_models(calc, mass, 3);
    let reps = 5;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let mut branches = Vec::new();
        for scale in [ScaleKind::Calc, ScaleKind::Mass] {
            let spec = preset.scale_spec(scale);
            let (lo, hi) =
                curriculearn::sampling::resize_factor_range((img.height, img.width), spec.target);
            let resized = curriculearn::sampling::resize_image(&img, (lo + hi) / 2.0);
            let tiling = Tiling::new(resized.height, resized.width, p).unwrap();
            let t =
                Tensor::new(vec![1, 1, resized.height, resized.width], resized.data).unwrap();
            let id = tape.constant(t);
            branches.push((id, tiling));
        }
        println!(
            "  tiles: calc {} mass {}",
            branches[0].1.num_patches(),
            branches[1].1.num_patches()
        );
        let fwd = model
            .forward(&mut tape, branches[0].0, &branches[0].1, branches[1].0, &branches[1].1, Mode::Train)
            .unwrap();
        let loss = tape.softmax_cross_entropy(fwd.logits, &[1]).unwrap();
        tape.backward(loss).unwrap();
        let _ = tape.grad(fwd.bindings[0].1).unwrap()[0];
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("image iteration (fwd+bwd): {:.1} ms", dt * 1e3);
}
