//! Diagnostic: do pooled two-scale features separate malignant breasts?
//! Trains a tiny full-batch logistic regression on pooled features.
use curriculearn::checkpoint::Checkpoint;
use curriculearn::dataset::load_split;
use curriculearn::phantom::Split;
use curriculearn::sampling::{resize_factor_range, resize_image, ScaleKind};
use curriculearn::tape::{Mode, Tape};
use curriculearn::tensor::Tensor;
use curriculearn::tiling::Tiling;
use curriculearn::training::Preset;
use curriculearn::wrn::{ImageModel, PatchModel, WideResNetConfig};

fn pooled_features(
    model: &mut PatchModel<f32>,
    img: &curriculearn::pgm::ImageF,
    target: (usize, usize),
    patch: usize,
) -> Vec<f32> {
    let (lo, hi) = resize_factor_range((img.height, img.width), target);
    let resized = resize_image(img, (lo + hi) / 2.0);
    let tiling = Tiling::new(resized.height, resized.width, patch).unwrap();
    let mut tape = Tape::<f32>::new();
    let t = Tensor::new(vec![1, 1, resized.height, resized.width], resized.data).unwrap();
    let id = tape.constant(t);
    let (need_h, need_w) = tiling.image_dims;
    let padded = if resized.height < need_h || resized.width < need_w {
        tape.zero_pad2d(id, need_h - resized.height, need_w - resized.width).unwrap()
    } else {
        id
    };
    let crops: Vec<_> = tiling
        .origins
        .iter()
        .map(|&(r, c)| tape.crop2d(padded, r, c, patch, patch).unwrap())
        .collect();
    let batch = tape.concat_batch(&crops).unwrap();
    let mut bind = Vec::new();
    let feats = model.forward_features(&mut tape, batch, Mode::Infer, &mut bind).unwrap();
    let pooled = tape.weighted_mean_rows(feats, &tiling.weights).unwrap();
    tape.data(pooled).to_vec()
}

fn main() {
    let preset = Preset::desk();
    let dir = std::path::Path::new("/tmp/cal/run7");
    let load = |scale: &str, classes: usize, blocks: usize| -> PatchModel<f32> {
        let ck = Checkpoint::load(&dir.join(format!("patch/{scale}/malig.ckpt"))).unwrap();
        let cfg = WideResNetConfig {
            num_classes: classes,
            ..preset.wrn_config(
                if scale == "calc" { ScaleKind::Calc } else { ScaleKind::Mass },
                classes,
            )
        };
        let _ = blocks;
        PatchModel::read_from(&ck, "model", cfg).unwrap()
    };
    let mut calc = load("calc", 3, 1);
    let mut mass = load("mass", 2, 2);
    let _ = ImageModel::from_patch_models(calc.clone(), mass.clone(), 0);

    let train = load_split(&dir.join("data"), Split::Train).unwrap();
    let val = load_split(&dir.join("data"), Split::Val).unwrap();
    println!("train {} val {}", train.len(), val.len());

    let featurize = |samples: &[curriculearn::dataset::ImageSample],
                     calc: &mut PatchModel<f32>,
                     mass: &mut PatchModel<f32>| {
        samples
            .iter()
            .map(|s| {
                let img = s.image.to_f32();
                let mut f = pooled_features(calc, &img, preset.calc_target, preset.patch);
                f.extend(pooled_features(mass, &img, preset.mass_target, preset.patch));
                (f, s.breast_label)
            })
            .collect::<Vec<_>>()
    };
    let train_feats = featurize(&train[..200.min(train.len())], &mut calc, &mut mass);
    let val_feats = featurize(&val, &mut calc, &mut mass);
    let d = train_feats[0].0.len();
    let pos = train_feats.iter().filter(|x| x.1).count();
    println!("features {d}, train pos {pos}/{}", train_feats.len());

    // Standardize features, then full-batch logistic regression.
    let mut mean = vec![0.0f64; d];
    let mut sd = vec![0.0f64; d];
    for (f, _) in &train_feats {
        for i in 0..d {
            mean[i] += f[i] as f64;
        }
    }
    for m in &mut mean {
        *m /= train_feats.len() as f64;
    }
    for (f, _) in &train_feats {
        for i in 0..d {
            let z = f[i] as f64 - mean[i];
            sd[i] += z * z;
        }
    }
    for s in &mut sd {
        *s = (*s / train_feats.len() as f64).sqrt().max(1e-6);
    }
    let mut wv = vec![0.0f64; d];
    let mut b = 0.0f64;
    for step in 0..3000 {
        let mut gw = vec![0.0f64; d];
        let mut gb = 0.0f64;
        for (f, y) in &train_feats {
            let z: f64 = f
                .iter()
                .enumerate()
                .map(|(i, &v)| wv[i] * ((v as f64 - mean[i]) / sd[i]))
                .sum::<f64>()
                + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - f64::from(u8::from(*y));
            for i in 0..d {
                gw[i] += err * ((f[i] as f64 - mean[i]) / sd[i]);
            }
            gb += err;
        }
        let lr = 0.05 / train_feats.len() as f64;
        for i in 0..d {
            wv[i] -= lr * gw[i];
        }
        b -= lr * gb;
        let _ = step;
    }
    let auc = |set: &[(Vec<f32>, bool)]| {
        let mut pairs = Vec::new();
        for (f, y) in set {
            let z: f64 = f
                .iter()
                .enumerate()
                .map(|(i, &v)| wv[i] * ((v as f64 - mean[i]) / sd[i]))
                .sum::<f64>()
                + b;
            pairs.push((z, *y));
        }
        curriculearn::eval::auc(&pairs).unwrap_or(f64::NAN)
    };
    println!("logreg train AUC {:.3}", auc(&train_feats));
    println!("logreg val AUC {:.3}", auc(&val_feats));
}
