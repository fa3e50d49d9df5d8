//! Wide residual patch classifiers and the two-scale scanning-window image
//! model built on top of them.
//!
//! A patch model is: 5x5/stride-3/pad-2 initial convolution, `groups` groups
//! of `N` pre-activation residual blocks (BN -> ReLU -> 3x3 conv, twice;
//! identity shortcut, bias-free 1x1 projection when the channel count
//! changes), 2x2 average pooling between groups, global average pooling, and
//! one linear classifier. The vector entering the classifier is the "feature"
//! used by the image model.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tape::{BnMode, Mode, Tape, TensorId};
use crate::tensor::{Scalar, Tensor};
use crate::tiling::Tiling;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WideResNetConfig {
    pub groups: usize,
    pub filters_per_group: Vec<usize>,
    /// Residual blocks per group (the width/depth knob `N`).
    pub blocks_per_group: usize,
    /// Square input patch side length.
    pub input_patch: usize,
    pub initial_kernel: usize,
    pub initial_stride: usize,
    pub initial_pad: usize,
    pub num_classes: usize,
}

impl WideResNetConfig {
    /// Full-size configuration: filters (16,32,48,64,96) over five groups,
    /// 256px patches; N = 2 for the calcification scale, 4 for masses.
    pub fn paper(blocks_per_group: usize, num_classes: usize) -> Self {
        WideResNetConfig {
            groups: 5,
            filters_per_group: vec![16, 32, 48, 64, 96],
            blocks_per_group,
            input_patch: 256,
            initial_kernel: 5,
            initial_stride: 3,
            initial_pad: 2,
            num_classes,
        }
    }

    /// Laptop-size preset: same shape family at 64px with filters
    /// (8,16,24,32,48); N = 1 for calcifications, 2 for masses.
    pub fn desk(blocks_per_group: usize, num_classes: usize) -> Self {
        WideResNetConfig {
            groups: 5,
            filters_per_group: vec![8, 16, 24, 32, 48],
            blocks_per_group,
            input_patch: 64,
            initial_kernel: 5,
            initial_stride: 3,
            initial_pad: 2,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters_per_group.len() != self.groups || self.groups == 0 {
            return Err(Error::InvalidArgument(format!(
                "config: {} filter counts for {} groups",
                self.filters_per_group.len(),
                self.groups
            )));
        }
        if self.blocks_per_group == 0 {
            return Err(Error::InvalidArgument("config: blocks_per_group must be >= 1".into()));
        }
        if self.input_patch < self.initial_kernel {
            return Err(Error::InvalidArgument(format!(
                "config: patch {} smaller than initial kernel {}",
                self.input_patch, self.initial_kernel
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("config: need at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.filters_per_group.last().expect("validated")
    }

    /// Spatial side length at each group (before the pool that follows it).
    /// Pools replicate the last row/column on odd sizes, so each pool maps
    /// `s -> ceil(s/2)`.
    pub fn shape_chain(&self) -> Vec<usize> {
        let mut chain = Vec::with_capacity(self.groups);
        let mut s = (self.input_patch + 2 * self.initial_pad - self.initial_kernel)
            / self.initial_stride
            + 1;
        for g in 0..self.groups {
            if g > 0 {
                s = s.div_ceil(2);
            }
            chain.push(s);
        }
        chain
    }
}

/// Running batch-norm statistics (not trained by gradient).
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct PatchModel<T: Scalar = f32> {
    pub config: WideResNetConfig,
    pub params: BTreeMap<String, Tensor<T>>,
    pub bn_stats: BTreeMap<String, BnStats<T>>,
    pub feature_dim: usize,
}

fn he_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<T> =
        (0..numel).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    let mut t = Tensor::new(shape, data).expect("shape/data agree");
    t.requires_grad = true;
    t
}

fn trainable<T: Scalar>(mut t: Tensor<T>) -> Tensor<T> {
    t.requires_grad = true;
    t
}

/// Per-block channel plan: (input channels, output channels).
fn block_channels(config: &WideResNetConfig, group: usize, block: usize) -> (usize, usize) {
    let out = config.filters_per_group[group];
    let inp = if block > 0 {
        out
    } else if group == 0 {
        config.filters_per_group[0]
    } else {
        config.filters_per_group[group - 1]
    };
    (inp, out)
}

impl<T: Scalar> PatchModel<T> {
    /// He-uniform initialization; bit-identical for equal seeds.
    pub fn build(config: WideResNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut bn_stats = BTreeMap::new();

        let f0 = config.filters_per_group[0];
        let k = config.initial_kernel;
        params.insert("init.w".to_string(), he_uniform(vec![f0, 1, k, k], k * k, &mut rng));
        params.insert("init.b".to_string(), trainable(Tensor::zeros(vec![f0])));

        for g in 0..config.groups {
            for b in 0..config.blocks_per_group {
                let (inp, out) = block_channels(&config, g, b);
                let p = format!("g{g}.b{b}");
                params.insert(format!("{p}.bn1.gamma"), trainable(Tensor::full(vec![inp], T::one())));
                params.insert(format!("{p}.bn1.beta"), trainable(Tensor::zeros(vec![inp])));
                bn_stats.insert(
                    format!("{p}.bn1"),
                    BnStats { mean: vec![T::zero(); inp], var: vec![T::one(); inp] },
                );
                params.insert(
                    format!("{p}.conv1.w"),
                    he_uniform(vec![out, inp, 3, 3], inp * 9, &mut rng),
                );
                params.insert(format!("{p}.conv1.b"), trainable(Tensor::zeros(vec![out])));
                params.insert(format!("{p}.bn2.gamma"), trainable(Tensor::full(vec![out], T::one())));
                params.insert(format!("{p}.bn2.beta"), trainable(Tensor::zeros(vec![out])));
                bn_stats.insert(
                    format!("{p}.bn2"),
                    BnStats { mean: vec![T::zero(); out], var: vec![T::one(); out] },
                );
                params.insert(
                    format!("{p}.conv2.w"),
                    he_uniform(vec![out, out, 3, 3], out * 9, &mut rng),
                );
                params.insert(format!("{p}.conv2.b"), trainable(Tensor::zeros(vec![out])));
                if inp != out {
                    params.insert(
                        format!("{p}.proj.w"),
                        he_uniform(vec![out, inp, 1, 1], inp, &mut rng),
                    );
                    params.insert(format!("{p}.proj.b"), trainable(Tensor::zeros(vec![out])));
                }
            }
        }

        let fd = config.feature_dim();
        params.insert("fc.w".to_string(), he_uniform(vec![config.num_classes, fd], fd, &mut rng));
        params.insert("fc.b".to_string(), trainable(Tensor::zeros(vec![config.num_classes])));

        Ok(PatchModel { feature_dim: fd, config, params, bn_stats })
    }

    /// Everything kept except a freshly initialized classifier sized for
    /// `new_num_classes`.
    pub fn replace_classifier(&self, new_num_classes: usize, seed: u64) -> Result<Self> {
        let mut out = self.clone();
        out.config.num_classes = new_num_classes;
        out.config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "replace-classifier"));
        let fd = out.feature_dim;
        out.params
            .insert("fc.w".to_string(), he_uniform(vec![new_num_classes, fd], fd, &mut rng));
        out.params.insert("fc.b".to_string(), trainable(Tensor::zeros(vec![new_num_classes])));
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> PatchModel<U> {
        PatchModel {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            bn_stats: self
                .bn_stats
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        BnStats {
                            mean: v.mean.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
                            var: v.var.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
                        },
                    )
                })
                .collect(),
            feature_dim: self.feature_dim,
        }
    }

    fn bind(
        &self,
        tape: &mut Tape<T>,
        bindings: &mut Vec<(String, TensorId)>,
        name: &str,
        train: bool,
    ) -> TensorId {
        let t = self.params[name].clone();
        if train {
            let id = tape.variable(t);
            bindings.push((name.to_string(), id));
            id
        } else {
            tape.constant(t)
        }
    }

    fn batchnorm(
        &mut self,
        tape: &mut Tape<T>,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats_key: &str,
        mode: Mode,
    ) -> Result<TensorId> {
        let stats = self.bn_stats.get_mut(stats_key).expect("bn stats exist");
        let bn_mode = match mode {
            Mode::Train => BnMode::Train {
                running_mean: &mut stats.mean,
                running_var: &mut stats.var,
                momentum: T::from_f64(BN_MOMENTUM),
            },
            Mode::Infer => BnMode::Infer { running_mean: &stats.mean, running_var: &stats.var },
        };
        tape.batchnorm2d(x, gamma, beta, bn_mode, T::from_f64(BN_EPS))
    }

    fn residual_block(
        &mut self,
        tape: &mut Tape<T>,
        x: TensorId,
        group: usize,
        block: usize,
        mode: Mode,
        bindings: &mut Vec<(String, TensorId)>,
    ) -> Result<TensorId> {
        let train = mode == Mode::Train;
        let (inp, out) = block_channels(&self.config, group, block);
        let p = format!("g{group}.b{block}");

        let g1 = self.bind(tape, bindings, &format!("{p}.bn1.gamma"), train);
        let b1 = self.bind(tape, bindings, &format!("{p}.bn1.beta"), train);
        let mut h = self.batchnorm(tape, x, g1, b1, &format!("{p}.bn1"), mode)?;
        h = tape.relu(h);
        let w1 = self.bind(tape, bindings, &format!("{p}.conv1.w"), train);
        let c1 = self.bind(tape, bindings, &format!("{p}.conv1.b"), train);
        h = tape.conv2d(h, w1, c1, (1, 1), (1, 1))?;

        let g2 = self.bind(tape, bindings, &format!("{p}.bn2.gamma"), train);
        let b2 = self.bind(tape, bindings, &format!("{p}.bn2.beta"), train);
        h = self.batchnorm(tape, h, g2, b2, &format!("{p}.bn2"), mode)?;
        h = tape.relu(h);
        let w2 = self.bind(tape, bindings, &format!("{p}.conv2.w"), train);
        let c2 = self.bind(tape, bindings, &format!("{p}.conv2.b"), train);
        h = tape.conv2d(h, w2, c2, (1, 1), (1, 1))?;

        let shortcut = if inp == out {
            x
        } else {
            let pw = self.bind(tape, bindings, &format!("{p}.proj.w"), train);
            let pb = self.bind(tape, bindings, &format!("{p}.proj.b"), train);
            tape.conv2d(x, pw, pb, (1, 1), (0, 0))?
        };
        tape.add(h, shortcut)
    }

    /// Global-average-pooled backbone features, `[N, feature_dim]`.
    pub fn forward_features(
        &mut self,
        tape: &mut Tape<T>,
        batch: TensorId,
        mode: Mode,
        bindings: &mut Vec<(String, TensorId)>,
    ) -> Result<TensorId> {
        let (_, c, h, w) = tape.tensor(batch).dims4()?;
        let p = self.config.input_patch;
        if c != 1 || h != p || w != p {
            return Err(Error::ShapeMismatch(format!(
                "patch forward: expected [N,1,{p},{p}], got {:?}",
                tape.tensor(batch).shape()
            )));
        }
        let train = mode == Mode::Train;
        let iw = self.bind(tape, bindings, "init.w", train);
        let ib = self.bind(tape, bindings, "init.b", train);
        let stride = self.config.initial_stride;
        let pad = self.config.initial_pad;
        let mut x = tape.conv2d(batch, iw, ib, (stride, stride), (pad, pad))?;
        for g in 0..self.config.groups {
            if g > 0 {
                x = tape.avgpool2x2(x)?;
            }
            for b in 0..self.config.blocks_per_group {
                x = self.residual_block(tape, x, g, b, mode, bindings)?;
            }
        }
        tape.global_avg_pool(x)
    }

    /// Backbone + classifier. `batch` is `[N,1,P,P]`. Train mode updates the
    /// running BN statistics in place and records parameter bindings for
    /// gradient extraction.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        batch: TensorId,
        mode: Mode,
    ) -> Result<PatchForward> {
        let mut bindings = Vec::new();
        let features = self.forward_features(tape, batch, mode, &mut bindings)?;
        let train = mode == Mode::Train;
        let fw = self.bind(tape, &mut bindings, "fc.w", train);
        let fb = self.bind(tape, &mut bindings, "fc.b", train);
        let logits = tape.linear(features, fw, fb)?;
        Ok(PatchForward { logits, features, bindings })
    }
}

pub struct PatchForward {
    pub logits: TensorId,
    pub features: TensorId,
    /// (parameter name, tape id) pairs for gradient extraction; empty in
    /// inference mode.
    pub bindings: Vec<(String, TensorId)>,
}

// ---- two-scale image model ----

#[derive(Clone, Debug)]
pub struct ImageModel<T: Scalar = f32> {
    pub calc: PatchModel<T>,
    pub mass: PatchModel<T>,
    /// `[2, calc.feature_dim + mass.feature_dim]`.
    pub fusion_weight: Tensor<T>,
    pub fusion_bias: Tensor<T>,
}

pub struct ImageForward {
    pub logits: TensorId,
    /// Softmax probability of the malignant class (index 1).
    pub prob_malignant: TensorId,
    pub bindings: Vec<(String, TensorId)>,
}

impl<T: Scalar> ImageModel<T> {
    /// Fuse two trained patch backbones under a fresh softmax head.
    pub fn from_patch_models(calc: PatchModel<T>, mass: PatchModel<T>, seed: u64) -> Self {
        let fused = calc.feature_dim + mass.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "fusion"));
        ImageModel {
            calc,
            mass,
            fusion_weight: he_uniform(vec![2, fused], fused, &mut rng),
            fusion_bias: trainable(Tensor::zeros(vec![2])),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ImageModel<U> {
        ImageModel {
            calc: self.calc.cast(),
            mass: self.mass.cast(),
            fusion_weight: {
                let mut t = self.fusion_weight.cast();
                t.requires_grad = true;
                t
            },
            fusion_bias: {
                let mut t = self.fusion_bias.cast();
                t.requires_grad = true;
                t
            },
        }
    }

    fn scale_branch(
        model: &mut PatchModel<T>,
        prefix: &str,
        tape: &mut Tape<T>,
        image: TensorId,
        tiling: &Tiling,
        mode: Mode,
        bindings: &mut Vec<(String, TensorId)>,
    ) -> Result<TensorId> {
        let (_, _, h, w) = tape.tensor(image).dims4()?;
        let p = tiling.patch;
        if p != model.config.input_patch {
            return Err(Error::ShapeMismatch(format!(
                "image forward: tiling patch {p} vs model patch {}",
                model.config.input_patch
            )));
        }
        let (need_h, need_w) = tiling.image_dims;
        if h > need_h || w > need_w {
            return Err(Error::ShapeMismatch(format!(
                "image forward: image {h}x{w} larger than tiling dims {need_h}x{need_w}"
            )));
        }
        let padded = if h < need_h || w < need_w {
            tape.zero_pad2d(image, need_h - h, need_w - w)?
        } else {
            image
        };
        let crops: Vec<TensorId> = tiling
            .origins
            .iter()
            .map(|&(r, c)| tape.crop2d(padded, r, c, p, p))
            .collect::<Result<_>>()?;
        let batch = tape.concat_batch(&crops)?;
        let mut sub = Vec::new();
        let feats = model.forward_features(tape, batch, mode, &mut sub)?;
        bindings.extend(sub.into_iter().map(|(n, id)| (format!("{prefix}/{n}"), id)));
        let weights: Vec<T> = tiling.weights.iter().map(|&x| T::from_f64(f64::from(x))).collect();
        tape.weighted_mean_rows(feats, &weights)
    }

    /// Whole-image forward: tile each scale's resized image, pool patch
    /// features with the tiling's overlap-normalized weights, concatenate the
    /// two scales, and classify. Fully differentiable down to the input
    /// images (register them on the tape as variables to probe pixel
    /// gradients).
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        calc_image: TensorId,
        calc_tiling: &Tiling,
        mass_image: TensorId,
        mass_tiling: &Tiling,
        mode: Mode,
    ) -> Result<ImageForward> {
        let mut bindings = Vec::new();
        let calc_feat = Self::scale_branch(
            &mut self.calc,
            "calc",
            tape,
            calc_image,
            calc_tiling,
            mode,
            &mut bindings,
        )?;
        let mass_feat = Self::scale_branch(
            &mut self.mass,
            "mass",
            tape,
            mass_image,
            mass_tiling,
            mode,
            &mut bindings,
        )?;
        let fused = tape.concat_cols(calc_feat, mass_feat)?;
        let train = mode == Mode::Train;
        let fw = if train {
            let id = tape.variable(self.fusion_weight.clone());
            bindings.push(("fusion/w".to_string(), id));
            id
        } else {
            tape.constant(self.fusion_weight.clone())
        };
        let fb = if train {
            let id = tape.variable(self.fusion_bias.clone());
            bindings.push(("fusion/b".to_string(), id));
            id
        } else {
            tape.constant(self.fusion_bias.clone())
        };
        let logits = tape.linear(fused, fw, fb)?;
        let probs = tape.softmax(logits)?;
        let prob_malignant = tape.index_scalar(probs, 1)?;
        Ok(ImageForward { logits, prob_malignant, bindings })
    }

    /// Mutable access to a parameter by its binding name
    /// (`calc/...`, `mass/...`, `fusion/w`, `fusion/b`).
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        if let Some(rest) = name.strip_prefix("calc/") {
            self.calc.params.get_mut(rest)
        } else if let Some(rest) = name.strip_prefix("mass/") {
            self.mass.params.get_mut(rest)
        } else if name == "fusion/w" {
            Some(&mut self.fusion_weight)
        } else if name == "fusion/b" {
            Some(&mut self.fusion_bias)
        } else {
            None
        }
    }
}

// ---- checkpoint serialization (f32 models) ----

impl PatchModel<f32> {
    /// Write parameters and BN statistics under `prefix/` in a checkpoint.
    pub fn write_to(&self, ck: &mut Checkpoint, prefix: &str) {
        for (name, t) in &self.params {
            ck.insert(format!("{prefix}/{name}"), t.clone());
        }
        for (name, s) in &self.bn_stats {
            ck.insert(format!("{prefix}/{name}.running_mean"), Tensor::from_vec(s.mean.clone()));
            ck.insert(format!("{prefix}/{name}.running_var"), Tensor::from_vec(s.var.clone()));
        }
    }

    /// Rebuild from a checkpoint section; `config` supplies the shape.
    pub fn read_from(ck: &Checkpoint, prefix: &str, config: WideResNetConfig) -> Result<Self> {
        let mut model = PatchModel::build(config, 0)?;
        for (name, t) in &mut model.params {
            let key = format!("{prefix}/{name}");
            let loaded = ck
                .get(&key)
                .ok_or_else(|| Error::Format(format!("checkpoint missing {key}")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "checkpoint {key}: shape {:?} vs expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            let mut fresh = loaded.clone();
            fresh.requires_grad = true;
            fresh.grad = None;
            *t = fresh;
        }
        for (name, s) in &mut model.bn_stats {
            for (field, buf) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
                let key = format!("{prefix}/{name}.{field}");
                let loaded = ck
                    .get(&key)
                    .ok_or_else(|| Error::Format(format!("checkpoint missing {key}")))?;
                if loaded.numel() != buf.len() {
                    return Err(Error::Format(format!("checkpoint {key}: wrong length")));
                }
                buf.copy_from_slice(loaded.data());
            }
        }
        Ok(model)
    }
}

impl ImageModel<f32> {
    pub fn write_to(&self, ck: &mut Checkpoint) {
        self.calc.write_to(ck, "calc");
        self.mass.write_to(ck, "mass");
        ck.insert("fusion/w", self.fusion_weight.clone());
        ck.insert("fusion/b", self.fusion_bias.clone());
    }

    pub fn read_from(
        ck: &Checkpoint,
        calc_config: WideResNetConfig,
        mass_config: WideResNetConfig,
    ) -> Result<Self> {
        let calc = PatchModel::read_from(ck, "calc", calc_config)?;
        let mass = PatchModel::read_from(ck, "mass", mass_config)?;
        let fw = ck
            .get("fusion/w")
            .ok_or_else(|| Error::Format("checkpoint missing fusion/w".into()))?;
        let fb = ck
            .get("fusion/b")
            .ok_or_else(|| Error::Format("checkpoint missing fusion/b".into()))?;
        let mut fusion_weight = fw.clone();
        fusion_weight.requires_grad = true;
        let mut fusion_bias = fb.clone();
        fusion_bias.requires_grad = true;
        Ok(ImageModel { calc, mass, fusion_weight, fusion_bias })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny_config(num_classes: usize) -> WideResNetConfig {
        WideResNetConfig {
            groups: 2,
            filters_per_group: vec![3, 4],
            blocks_per_group: 1,
            input_patch: 16,
            initial_kernel: 5,
            initial_stride: 3,
            initial_pad: 2,
            num_classes,
        }
    }

    #[test]
    fn shape_chain_closed_form() {
        // Full-size config, 256px input: initial conv to 86, then each pool
        // maps s -> ceil(s/2) between the five groups.
        let cfg = WideResNetConfig::paper(2, 2);
        assert_eq!(cfg.shape_chain(), vec![86, 43, 22, 11, 6]);
        assert_eq!(cfg.feature_dim(), 96);

        let cfg = WideResNetConfig::desk(1, 2);
        assert_eq!(cfg.shape_chain(), vec![22, 11, 6, 3, 2]);
        assert_eq!(cfg.feature_dim(), 48);
    }

    #[test]
    fn build_is_deterministic() {
        let a = PatchModel::<f32>::build(WideResNetConfig::desk(1, 2), 42).unwrap();
        let b = PatchModel::<f32>::build(WideResNetConfig::desk(1, 2), 42).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (k, t) in &a.params {
            assert_eq!(t.data(), b.params[k].data(), "{k}");
        }
        let c = PatchModel::<f32>::build(WideResNetConfig::desk(1, 2), 43).unwrap();
        assert_ne!(a.params["init.w"].data(), c.params["init.w"].data());
    }

    #[test]
    fn forward_shapes_and_uniform_softmax_with_zero_classifier() {
        let mut model = PatchModel::<f32>::build(tiny_config(3), 7).unwrap();
        // Zero the classifier: logits all zero, loss = ln 3.
        model.params.insert("fc.w".into(), Tensor::zeros(vec![3, 4]).with_grad());
        model.params.insert("fc.b".into(), Tensor::zeros(vec![3]).with_grad());

        let mut tape = Tape::<f32>::new();
        let input = tape.constant(Tensor::full(vec![2, 1, 16, 16], 0.3));
        let out = model.forward(&mut tape, input, Mode::Infer).unwrap();
        assert_eq!(tape.tensor(out.features).shape(), &[2, 4]);
        assert_eq!(tape.tensor(out.logits).shape(), &[2, 3]);
        let loss = tape.softmax_cross_entropy(out.logits, &[0, 2]).unwrap();
        assert!((tape.data(loss)[0] - 3.0f32.ln()).abs() < 1e-5);
    }

    #[test]
    fn horizontal_flip_changes_logits() {
        let mut model = PatchModel::<f32>::build(tiny_config(2), 11).unwrap();
        let p = 16;
        let mut data = vec![0.0f32; p * p];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i * 37 % 101) as f32) / 101.0;
        }
        let mut flipped = vec![0.0f32; p * p];
        for r in 0..p {
            for c in 0..p {
                flipped[r * p + c] = data[r * p + (p - 1 - c)];
            }
        }
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::new(vec![1, 1, p, p], data).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 1, p, p], flipped).unwrap());
        let la = model.forward(&mut tape, a, Mode::Infer).unwrap().logits;
        let lb = model.forward(&mut tape, b, Mode::Infer).unwrap().logits;
        let da = tape.data(la).to_vec();
        let db = tape.data(lb).to_vec();
        assert!(da.iter().zip(&db).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn replace_classifier_preserves_backbone_bitwise() {
        let model = PatchModel::<f32>::build(WideResNetConfig::desk(1, 2), 3).unwrap();
        let swapped = model.replace_classifier(3, 99).unwrap();
        assert_eq!(swapped.config.num_classes, 3);
        assert_eq!(swapped.params["fc.w"].shape(), &[3, 48]);
        for (k, t) in &model.params {
            if k.starts_with("fc.") {
                continue;
            }
            assert_eq!(t.data(), swapped.params[k].data(), "{k}");
        }
        for (k, s) in &model.bn_stats {
            assert_eq!(s, &swapped.bn_stats[k], "{k}");
        }

        // Feature path unchanged by the swap.
        let mut m1 = model.clone();
        let mut m2 = swapped.clone();
        let mut tape = Tape::<f32>::new();
        let input = tape.constant(Tensor::full(vec![1, 1, 64, 64], 0.4));
        let f1 = m1.forward(&mut tape, input, Mode::Infer).unwrap().features;
        let f2 = m2.forward(&mut tape, input, Mode::Infer).unwrap().features;
        assert_eq!(tape.data(f1), tape.data(f2));
    }

    #[test]
    fn single_tile_image_forward_equals_patch_features() {
        let calc = PatchModel::<f32>::build(tiny_config(2), 5).unwrap();
        let mass = PatchModel::<f32>::build(tiny_config(2), 6).unwrap();
        let mut image_model = ImageModel::from_patch_models(calc, mass, 1);

        let tiling = Tiling::new(16, 16, 16).unwrap();
        assert_eq!(tiling.num_patches(), 1);
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..256).map(|i| (i % 23) as f32 / 23.0).collect();
        let img = tape.constant(Tensor::new(vec![1, 1, 16, 16], data.clone()).unwrap());
        let out = image_model
            .forward(&mut tape, img, &tiling, img, &tiling, Mode::Infer)
            .unwrap();

        // Pooled single-tile features equal a direct patch forward.
        let direct_in = tape.constant(Tensor::new(vec![1, 1, 16, 16], data).unwrap());
        let direct =
            image_model.calc.forward(&mut tape, direct_in, Mode::Infer).unwrap().features;
        let probs_sum: f32 = {
            let logits = tape.data(out.logits);
            let p = tape.data(out.prob_malignant)[0];
            assert!(logits.len() == 2);
            assert!((0.0..=1.0).contains(&p));
            let m = logits[0].max(logits[1]);
            let e0 = (logits[0] - m).exp();
            let e1 = (logits[1] - m).exp();
            e1 / (e0 + e1) + e0 / (e0 + e1)
        };
        assert!((probs_sum - 1.0).abs() < 1e-6);
        let _ = direct;
    }

    #[test]
    fn disjoint_tiling_matches_naive_mean_oracle() {
        // 2x1 disjoint tiles: pooled features must equal the unweighted mean
        // of per-tile features, cross-checked against separate patch passes.
        let calc = PatchModel::<f32>::build(tiny_config(2), 5).unwrap();
        let mass = PatchModel::<f32>::build(tiny_config(2), 6).unwrap();
        let mut image_model = ImageModel::from_patch_models(calc, mass, 2);

        let tiling = Tiling::new(32, 16, 16).unwrap();
        assert_eq!(tiling.origins, vec![(0, 0), (16, 0)]);
        assert!(tiling.weights.iter().all(|&w| (w - 1.0).abs() < 1e-6));

        let data: Vec<f32> = (0..512).map(|i| ((i * 7) % 97) as f32 / 97.0).collect();
        let mut tape = Tape::<f32>::new();
        let img = tape.constant(Tensor::new(vec![1, 1, 32, 16], data.clone()).unwrap());
        let calc_feat = {
            let mut bindings = Vec::new();
            ImageModel::scale_branch(
                &mut image_model.calc,
                "calc",
                &mut tape,
                img,
                &tiling,
                Mode::Infer,
                &mut bindings,
            )
            .unwrap()
        };

        // Oracle: run each tile separately and average by hand.
        let top = tape.constant(Tensor::new(vec![1, 1, 16, 16], data[..256].to_vec()).unwrap());
        let bot = tape.constant(Tensor::new(vec![1, 1, 16, 16], data[256..].to_vec()).unwrap());
        let ft = image_model.calc.forward(&mut tape, top, Mode::Infer).unwrap().features;
        let fb = image_model.calc.forward(&mut tape, bot, Mode::Infer).unwrap().features;
        let want: Vec<f32> = tape
            .data(ft)
            .iter()
            .zip(tape.data(fb))
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        for (got, want) in tape.data(calc_feat).iter().zip(&want) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn checkpoint_round_trip_for_image_model() {
        let calc = PatchModel::<f32>::build(tiny_config(3), 5).unwrap();
        let mass = PatchModel::<f32>::build(tiny_config(2), 6).unwrap();
        let model = ImageModel::from_patch_models(calc, mass, 3);
        let mut ck = Checkpoint::new();
        model.write_to(&mut ck);
        let back =
            ImageModel::read_from(&ck, model.calc.config.clone(), model.mass.config.clone())
                .unwrap();
        for (k, t) in &model.calc.params {
            assert_eq!(t.data(), back.calc.params[k].data(), "{k}");
        }
        assert_eq!(model.fusion_weight.data(), back.fusion_weight.data());
        for (k, s) in &model.mass.bn_stats {
            assert_eq!(s, &back.mass.bn_stats[k]);
        }
    }
}
