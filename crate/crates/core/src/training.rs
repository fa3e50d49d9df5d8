//! RMSProp, the patch-stage curriculum runner, and the whole-image training
//! stage. All loops are deterministic for a fixed seed: data order, patch
//! augmentation and parameter updates derive from named child seeds, and the
//! kernels themselves are thread-count independent.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{ImageSample, PreparedSample};
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::phantom::{Laterality, PhantomConfig};
use crate::rng::{derive_seed, derived_rng};
use crate::sampling::{
    resize_factor_range, resize_image, AugmentConfig, LabelScheme, PatchTarget, ScaleKind,
    ScaleSpec, StageSpec, StageStream,
};
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;
use crate::tiling::Tiling;
use crate::wrn::{ImageModel, PatchModel, WideResNetConfig};

// ---- optimizer ----

/// RMSProp: `v <- rho v + (1-rho) g^2; theta <- theta - lr g / (sqrt(v)+eps)`.
#[derive(Clone, Debug)]
pub struct RmsPropState {
    pub learning_rate: f32,
    pub rho: f32,
    pub epsilon: f32,
    /// Per-parameter accumulators, keyed by parameter name.
    pub v: BTreeMap<String, Vec<f32>>,
}

impl RmsPropState {
    pub fn new(learning_rate: f32) -> Self {
        RmsPropState { learning_rate, rho: 0.9, epsilon: 1e-8, v: BTreeMap::new() }
    }

    /// One elementwise update for a named parameter.
    pub fn step_param(&mut self, name: &str, param: &mut [f32], grad: &[f32]) -> Result<()> {
        if grad.len() != param.len() {
            return Err(Error::ShapeMismatch(format!(
                "rmsprop {name}: {} grads for {} params",
                grad.len(),
                param.len()
            )));
        }
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient for parameter {name}: {bad}")));
        }
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        let (lr, rho, eps) = (self.learning_rate, self.rho, self.epsilon);
        for ((p, &g), vi) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            *vi = rho * *vi + (1.0 - rho) * g * g;
            *p -= lr * g / (vi.sqrt() + eps);
        }
        Ok(())
    }

    /// Store accumulators under `optim/v/` plus the learning rate.
    pub fn write_to(&self, ck: &mut Checkpoint) {
        for (name, v) in &self.v {
            ck.insert(format!("optim/v/{name}"), Tensor::from_vec(v.clone()));
        }
        ck.insert("optim/hyper", Tensor::from_vec(vec![self.learning_rate, self.rho, self.epsilon]));
    }

    pub fn read_from(ck: &Checkpoint) -> Result<Self> {
        let hyper = ck
            .get("optim/hyper")
            .ok_or_else(|| Error::Format("checkpoint missing optim/hyper".into()))?;
        let h = hyper.data();
        let mut state = RmsPropState { learning_rate: h[0], rho: h[1], epsilon: h[2], v: BTreeMap::new() };
        for (name, t) in ck.section("optim/v") {
            state.v.insert(name, t.data().to_vec());
        }
        Ok(state)
    }
}

// ---- presets ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    Fresh,
    Inherit,
    ReplaceClassifier,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub name: String,
    pub label_scheme: LabelScheme,
    pub class_mix: Vec<(PatchTarget, f64)>,
    pub samples_per_epoch: usize,
    pub epochs: usize,
    pub transition: Transition,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageStageSpec {
    pub iters_hi: usize,
    pub lr_hi: f32,
    pub iters_lo: usize,
    pub lr_lo: f32,
    pub val_every: usize,
    pub rescale_aug: (f64, f64),
}

/// Everything a named run configuration pins down: model sizes, scale
/// targets, curriculum schedules, phantom generation knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub patch: usize,
    pub filters: Vec<usize>,
    pub calc_blocks: usize,
    pub mass_blocks: usize,
    pub calc_target: (usize, usize),
    pub mass_target: (usize, usize),
    pub batch_size: usize,
    pub patch_lr: f32,
    pub patch_aug: AugmentConfig,
    pub calc_stages: Vec<CurriculumStage>,
    pub mass_stages: Vec<CurriculumStage>,
    pub image_stage: ImageStageSpec,
    pub phantom: PhantomConfig,
    pub val_patches: usize,
}

const PAPER_PRESET: &str = include_str!("../presets/paper.json");
const DESK_PRESET: &str = include_str!("../presets/desk.json");

impl Preset {
    pub fn paper() -> Preset {
        serde_json::from_str(PAPER_PRESET).expect("embedded paper preset parses")
    }

    pub fn desk() -> Preset {
        serde_json::from_str(DESK_PRESET).expect("embedded desk preset parses")
    }

    pub fn by_name(name: &str) -> Result<Preset> {
        match name {
            "paper" => Ok(Preset::paper()),
            "desk" => Ok(Preset::desk()),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset {other} (expected paper or desk)"
            ))),
        }
    }

    pub fn scale_spec(&self, scale: ScaleKind) -> ScaleSpec {
        match scale {
            ScaleKind::Calc => ScaleSpec { name: scale, target: self.calc_target },
            ScaleKind::Mass => ScaleSpec { name: scale, target: self.mass_target },
        }
    }

    pub fn wrn_config(&self, scale: ScaleKind, num_classes: usize) -> WideResNetConfig {
        WideResNetConfig {
            groups: self.filters.len(),
            filters_per_group: self.filters.clone(),
            blocks_per_group: match scale {
                ScaleKind::Calc => self.calc_blocks,
                ScaleKind::Mass => self.mass_blocks,
            },
            input_patch: self.patch,
            initial_kernel: 5,
            initial_stride: 3,
            initial_pad: 2,
            num_classes,
        }
    }

    pub fn stages(&self, scale: ScaleKind) -> &[CurriculumStage] {
        match scale {
            ScaleKind::Calc => &self.calc_stages,
            ScaleKind::Mass => &self.mass_stages,
        }
    }

    pub fn stage_spec(&self, scale: ScaleKind, stage: &CurriculumStage) -> StageSpec {
        StageSpec {
            name: stage.name.clone(),
            label_scheme: stage.label_scheme,
            class_mix: stage.class_mix.clone(),
            samples_per_epoch: stage.samples_per_epoch,
            epochs: stage.epochs,
            scale,
            aug: self.patch_aug,
        }
    }
}

const STOP_SENTINEL: &str = "epoch budget reached";

// ---- metrics ----

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    pub val_auc: f64,
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("stage,step,loss,val_auc\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", r.stage, r.step, r.loss, r.val_auc));
    }
    out
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Format(format!("metrics csv line {}: {line}", i + 1)));
        }
        let bad = |what: &str| Error::Format(format!("metrics csv line {}: bad {what}", i + 1));
        rows.push(MetricsRow {
            stage: f[0].to_string(),
            step: f[1].parse().map_err(|_| bad("step"))?,
            loss: f[2].parse().map_err(|_| bad("loss"))?,
            val_auc: f[3].parse().map_err(|_| bad("val_auc"))?,
        });
    }
    Ok(rows)
}

// ---- resume checkpoints ----

/// Serialize a patch-curriculum position (model, optimizer, progress, and
/// the detection snapshot when one exists) into one checkpoint.
pub fn patch_resume_to_checkpoint(
    stage_index: usize,
    next_epoch: usize,
    model: &PatchModel<f32>,
    optimizer: &RmsPropState,
    detect_model: Option<&PatchModel<f32>>,
) -> Checkpoint {
    let mut ck = Checkpoint::new();
    model.write_to(&mut ck, "model");
    optimizer.write_to(&mut ck);
    ck.insert(
        "meta/progress",
        Tensor::from_vec(vec![stage_index as f32, next_epoch as f32]),
    );
    if let Some(d) = detect_model {
        d.write_to(&mut ck, "detect");
    }
    ck
}

pub fn patch_resume_from_checkpoint(
    ck: &Checkpoint,
    model_config: impl Fn(usize) -> WideResNetConfig,
    stages: &[CurriculumStage],
) -> Result<PatchResume> {
    let progress = ck
        .get("meta/progress")
        .ok_or_else(|| Error::Format("resume checkpoint missing meta/progress".into()))?;
    let stage_index = progress.data()[0] as usize;
    let next_epoch = progress.data()[1] as usize;
    if stage_index >= stages.len() {
        return Err(Error::Format(format!("resume: stage index {stage_index} out of range")));
    }
    let classes = stages[stage_index].label_scheme.num_classes();
    let model = PatchModel::read_from(ck, "model", model_config(classes))?;
    let optimizer = RmsPropState::read_from(ck)?;
    let detect_model = if ck.get("detect/init.w").is_some() {
        Some(PatchModel::read_from(ck, "detect", model_config(2))?)
    } else {
        None
    };
    Ok(PatchResume { stage_index, next_epoch, model, optimizer, detect_model })
}

/// Image-stage resume state: model, optimizer, next iteration, best-so-far.
pub struct ImageResume {
    pub next_iter: usize,
    pub best_val_auc: f64,
    pub best_iter: usize,
    pub model: ImageModel<f32>,
    pub optimizer: RmsPropState,
}

pub fn image_resume_to_checkpoint(
    next_iter: usize,
    best_val_auc: f64,
    best_iter: usize,
    model: &ImageModel<f32>,
    optimizer: &RmsPropState,
) -> Checkpoint {
    let mut ck = Checkpoint::new();
    model.write_to(&mut ck);
    optimizer.write_to(&mut ck);
    // best_val_auc rides along bit-exactly as two f32 lanes.
    let bits = best_val_auc.to_bits();
    ck.insert(
        "meta/progress",
        Tensor::from_vec(vec![
            next_iter as f32,
            best_iter as f32,
            f32::from_bits((bits >> 32) as u32),
            f32::from_bits(bits as u32),
        ]),
    );
    ck
}

pub fn image_resume_from_checkpoint(
    ck: &Checkpoint,
    calc_config: WideResNetConfig,
    mass_config: WideResNetConfig,
) -> Result<ImageResume> {
    let progress = ck
        .get("meta/progress")
        .ok_or_else(|| Error::Format("resume checkpoint missing meta/progress".into()))?;
    let p = progress.data();
    let bits = (u64::from(p[2].to_bits()) << 32) | u64::from(p[3].to_bits());
    Ok(ImageResume {
        next_iter: p[0] as usize,
        best_val_auc: f64::from_bits(bits),
        best_iter: p[1] as usize,
        model: ImageModel::read_from(ck, calc_config, mass_config)?,
        optimizer: RmsPropState::read_from(ck)?,
    })
}

// ---- patch stage training ----

/// A fixed validation patch set with scheme labels.
pub struct ValidationPatches {
    pub patch: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
    pub positive_class: usize,
}

/// Draw `n` validation patches from the stage's class mix (no flip/rotation
/// augmentation), deterministically.
pub fn build_validation_patches(
    val: &[PreparedSample],
    preset: &Preset,
    scale: ScaleKind,
    stage: &CurriculumStage,
    n: usize,
    seed: u64,
) -> Result<ValidationPatches> {
    let mut spec = preset.stage_spec(scale, stage);
    spec.samples_per_epoch = n;
    spec.aug = AugmentConfig::none();
    let sources = val.iter().map(PreparedSample::source).collect();
    let stream = StageStream::new(sources, &spec, preset.scale_spec(scale), preset.patch, seed)?;
    let targets = stream.epoch_targets(0);
    let (pixels, labels) = stream.batch(0, &targets, 0, targets.len())?;
    Ok(ValidationPatches {
        patch: preset.patch,
        pixels,
        labels,
        positive_class: stage.label_scheme.positive_class(),
    })
}

/// AUC of `P(positive_class)` against `label == positive_class`.
pub fn validate_patch_model(
    model: &mut PatchModel<f32>,
    val: &ValidationPatches,
) -> Result<f64> {
    let p = val.patch;
    let n = val.labels.len();
    let mut pairs = Vec::with_capacity(n);
    let batch = 64;
    for start in (0..n).step_by(batch) {
        let len = batch.min(n - start);
        let mut tape = Tape::<f32>::new();
        let input = tape.constant(Tensor::new(
            vec![len, 1, p, p],
            val.pixels[start * p * p..(start + len) * p * p].to_vec(),
        )?);
        let fwd = model.forward(&mut tape, input, Mode::Infer)?;
        let probs = tape.softmax(fwd.logits)?;
        let k = model.config.num_classes;
        let data = tape.data(probs);
        for i in 0..len {
            pairs.push((
                f64::from(data[i * k + val.positive_class]),
                val.labels[start + i] == val.positive_class,
            ));
        }
    }
    auc(&pairs)
}

/// One curriculum stage of patch training. Returns the mean loss per epoch
/// via `metrics`; `on_epoch` fires after each epoch with the epoch index.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    model: &mut PatchModel<f32>,
    optimizer: &mut RmsPropState,
    stream: &StageStream<'_>,
    batch_size: usize,
    val: &ValidationPatches,
    metrics: &mut Vec<MetricsRow>,
    start_epoch: usize,
    mut on_epoch: impl FnMut(usize, &PatchModel<f32>, &RmsPropState, &[MetricsRow]) -> Result<()>,
) -> Result<()> {
    let p = stream.patch;
    for epoch in start_epoch..stream.spec.epochs {
        let targets = stream.epoch_targets(epoch);
        let n = targets.len();
        let mut total_loss = 0.0f64;
        let mut steps = 0usize;
        for start in (0..n).step_by(batch_size) {
            let len = batch_size.min(n - start);
            let (pixels, labels) = stream.batch(epoch, &targets, start, len)?;
            let mut tape = Tape::<f32>::new();
            let input = tape.constant(Tensor::new(vec![len, 1, p, p], pixels)?);
            let fwd = model.forward(&mut tape, input, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(fwd.logits, &labels)?;
            let loss_val = f64::from(tape.data(loss)[0]);
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at stage {} epoch {epoch} step {steps}",
                    stream.spec.name
                )));
            }
            tape.backward(loss)?;
            for (name, id) in &fwd.bindings {
                let grad = tape.grad(*id).expect("bound parameter has gradient");
                let param = model.params.get_mut(name).expect("bound parameter exists");
                optimizer.step_param(name, param.data_mut(), grad)?;
            }
            total_loss += loss_val;
            steps += 1;
        }
        let val_auc = validate_patch_model(model, val)?;
        metrics.push(MetricsRow {
            stage: stream.spec.name.clone(),
            step: epoch + 1,
            loss: total_loss / steps.max(1) as f64,
            val_auc,
        });
        on_epoch(epoch, model, optimizer, metrics)?;
    }
    Ok(())
}

/// Where a patch curriculum run stands, for `--resume`.
pub struct PatchResume {
    pub stage_index: usize,
    pub next_epoch: usize,
    pub model: PatchModel<f32>,
    pub optimizer: RmsPropState,
    pub detect_model: Option<PatchModel<f32>>,
}

pub struct PatchCurriculumOutcome {
    pub model: PatchModel<f32>,
    /// Snapshot after the detection stages (before classifier replacement).
    pub detect_model: PatchModel<f32>,
}

/// Run the full patch curriculum for one scale. `on_epoch` sees
/// `(stage_index, epoch, model, optimizer, detect_model, metrics)` after
/// every epoch, for resume checkpointing. With `max_epochs` set, the run
/// stops early after that many epochs and returns `None` (resume later from
/// the last checkpoint).
#[allow(clippy::too_many_arguments)]
pub fn run_patch_curriculum(
    preset: &Preset,
    scale: ScaleKind,
    train: &[PreparedSample],
    val: &[PreparedSample],
    seed: u64,
    resume: Option<PatchResume>,
    max_epochs: Option<usize>,
    metrics: &mut Vec<MetricsRow>,
    mut on_epoch: impl FnMut(
        usize,
        usize,
        &PatchModel<f32>,
        &RmsPropState,
        Option<&PatchModel<f32>>,
        &[MetricsRow],
    ) -> Result<()>,
) -> Result<Option<PatchCurriculumOutcome>> {
    let stages = preset.stages(scale);
    if stages.is_empty() {
        return Err(Error::InvalidArgument(format!("preset has no stages for {scale}")));
    }
    let sources: Vec<_> = train.iter().map(PreparedSample::source).collect();

    let mut ran_epochs = 0usize;
    let (start_stage, mut start_epoch, mut model, mut optimizer, mut detect_model) = match resume {
        Some(r) => (r.stage_index, r.next_epoch, r.model, r.optimizer, r.detect_model),
        None => (0, 0, PatchModel::build(preset.wrn_config(scale, 2), 0)?, RmsPropState::new(preset.patch_lr), None),
    };

    for (si, stage) in stages.iter().enumerate().skip(start_stage) {
        let fresh_entry = start_epoch == 0 || si > start_stage;
        if fresh_entry {
            match stage.transition {
                Transition::Fresh => {
                    let config = preset.wrn_config(scale, stage.label_scheme.num_classes());
                    model = PatchModel::build(config, derive_seed(seed, &format!("init/{scale}/{si}")))?;
                    optimizer = RmsPropState::new(preset.patch_lr);
                }
                Transition::Inherit => {
                    optimizer = RmsPropState::new(preset.patch_lr);
                }
                Transition::ReplaceClassifier => {
                    detect_model = Some(model.clone());
                    model = model.replace_classifier(
                        stage.label_scheme.num_classes(),
                        derive_seed(seed, &format!("replace/{scale}/{si}")),
                    )?;
                    optimizer = RmsPropState::new(preset.patch_lr);
                }
            }
        }
        let spec = preset.stage_spec(scale, stage);
        let stream = StageStream::new(
            sources.clone(),
            &spec,
            preset.scale_spec(scale),
            preset.patch,
            derive_seed(seed, &format!("stream/{scale}/{}", stage.name)),
        )?;
        let val_set = build_validation_patches(
            val,
            preset,
            scale,
            stage,
            preset.val_patches,
            derive_seed(seed, &format!("val/{scale}/{}", stage.name)),
        )?;
        let epoch_base = if si == start_stage { start_epoch } else { 0 };
        let detect_ref = &mut detect_model;
        let mut stopped = false;
        {
            let ran = &mut ran_epochs;
            let stopped = &mut stopped;
            run_stage(
                &mut model,
                &mut optimizer,
                &stream,
                preset.batch_size,
                &val_set,
                metrics,
                epoch_base,
                |epoch, m, opt, rows| {
                    on_epoch(si, epoch, m, opt, detect_ref.as_ref(), rows)?;
                    *ran += 1;
                    if let Some(budget) = max_epochs {
                        if *ran >= budget && !(si + 1 == stages.len() && epoch + 1 == stage.epochs)
                        {
                            *stopped = true;
                            return Err(Error::InvalidArgument(STOP_SENTINEL.into()));
                        }
                    }
                    Ok(())
                },
            )
            .or_else(|e| if *stopped { Ok(()) } else { Err(e) })?;
        }
        if stopped {
            return Ok(None);
        }
        start_epoch = 0;
    }
    let detect_model = detect_model.ok_or_else(|| {
        Error::InvalidArgument("curriculum never reached a classifier replacement".into())
    })?;
    Ok(Some(PatchCurriculumOutcome { model, detect_model }))
}

// ---- image stage ----

#[derive(Clone, Copy, Debug)]
pub struct ImageTrainOptions {
    /// Random resize-factor + extra rescale augmentation; when off, the
    /// resize factor is pinned to the center of the allowable range.
    pub size_aug: bool,
    pub flip_aug: bool,
}

impl Default for ImageTrainOptions {
    fn default() -> Self {
        ImageTrainOptions { size_aug: true, flip_aug: true }
    }
}

pub struct ImageStageOutcome {
    pub best_val_auc: f64,
    pub best_iter: usize,
    pub best_model: ImageModel<f32>,
}

/// What the image-stage validation hook observes.
pub struct ValidationEvent<'a> {
    pub iter: usize,
    pub model: &'a ImageModel<f32>,
    pub optimizer: &'a RmsPropState,
    pub metrics: &'a [MetricsRow],
    pub is_best: bool,
    pub best_val_auc: f64,
    pub best_iter: usize,
}

struct PreppedVal {
    patient_id: String,
    laterality: Laterality,
    label: bool,
    calc: (Tensor<f32>, Tiling),
    mass: (Tensor<f32>, Tiling),
}

fn prep_val_image(
    sample: &ImageSample,
    calc_scale: &ScaleSpec,
    mass_scale: &ScaleSpec,
    patch: usize,
) -> Result<PreppedVal> {
    let img = sample.image.to_f32();
    let dims = (img.height, img.width);
    let prep = |scale: &ScaleSpec| -> Result<(Tensor<f32>, Tiling)> {
        let (lo, hi) = resize_factor_range(dims, scale.target);
        let resized = resize_image(&img, (lo + hi) / 2.0);
        let tiling = Tiling::new(resized.height, resized.width, patch)?;
        let t = Tensor::new(vec![1, 1, resized.height, resized.width], resized.data)?;
        Ok((t, tiling))
    };
    Ok(PreppedVal {
        patient_id: sample.patient_id.clone(),
        laterality: sample.laterality,
        label: sample.breast_label,
        calc: prep(calc_scale)?,
        mass: prep(mass_scale)?,
    })
}

/// Breast-level validation AUC at the center resize factor, no flips.
fn validate_image_model(model: &mut ImageModel<f32>, val: &[PreppedVal]) -> Result<f64> {
    let mut per_breast: BTreeMap<(String, String), (Vec<f64>, bool)> = BTreeMap::new();
    for v in val {
        let mut tape = Tape::<f32>::new();
        let ci = tape.constant(v.calc.0.clone());
        let mi = tape.constant(v.mass.0.clone());
        let fwd = model.forward(&mut tape, ci, &v.calc.1, mi, &v.mass.1, Mode::Infer)?;
        let score = f64::from(tape.data(fwd.prob_malignant)[0]);
        let key = (v.patient_id.clone(), v.laterality.to_string());
        let entry = per_breast.entry(key).or_insert_with(|| (Vec::new(), v.label));
        entry.0.push(score);
    }
    let pairs: Vec<(f64, bool)> = per_breast
        .values()
        .map(|(scores, label)| (scores.iter().sum::<f64>() / scores.len() as f64, *label))
        .collect();
    // A degenerate validation split (single class) cannot rank models; score
    // it as chance so later checkpoints win ties.
    Ok(auc(&pairs).unwrap_or(0.5))
}

/// End-to-end image-level training, batch size 1, including fine-tuning of
/// the patch weights. Validates every `val_every` iterations and keeps the
/// best-validation model. `on_validate` fires after each validation with
/// `(iter, model, optimizer, metrics, is_best)`.
#[allow(clippy::too_many_arguments)]
pub fn run_image_stage(
    model: &mut ImageModel<f32>,
    preset: &Preset,
    train: &[ImageSample],
    val: &[ImageSample],
    options: ImageTrainOptions,
    seed: u64,
    start_iter: usize,
    start_best: Option<(f64, usize)>,
    optimizer: &mut RmsPropState,
    metrics: &mut Vec<MetricsRow>,
    mut on_validate: impl FnMut(ValidationEvent<'_>) -> Result<()>,
) -> Result<ImageStageOutcome> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("image stage: empty training set".into()));
    }
    let spec = &preset.image_stage;
    let calc_scale = preset.scale_spec(ScaleKind::Calc);
    let mass_scale = preset.scale_spec(ScaleKind::Mass);
    let patch = preset.patch;
    let total = spec.iters_hi + spec.iters_lo;

    let val_prepped: Vec<PreppedVal> = val
        .iter()
        .map(|s| prep_val_image(s, &calc_scale, &mass_scale, patch))
        .collect::<Result<_>>()?;

    let (mut best_val_auc, mut best_iter) = start_best.unwrap_or((f64::NEG_INFINITY, 0));
    let mut best_model: Option<ImageModel<f32>> = None;
    let mut order: Vec<usize> = Vec::new();
    let mut order_pass = usize::MAX;
    let mut window_loss = 0.0f64;
    let mut window_steps = 0usize;

    for t in start_iter..total {
        optimizer.learning_rate = if t < spec.iters_hi { spec.lr_hi } else { spec.lr_lo };
        let pass = t / train.len();
        if pass != order_pass {
            order = (0..train.len()).collect();
            let mut rng = derived_rng(seed, &format!("imgorder/p{pass}"));
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            order_pass = pass;
        }
        let sample = &train[order[t % train.len()]];
        let mut rng = derived_rng(seed, &format!("imgiter/t{t}"));
        let img = sample.image.to_f32();
        let dims = (img.height, img.width);
        let flip = options.flip_aug && rng.gen_bool(0.5);

        let mut tape = Tape::<f32>::new();
        let mut branches = Vec::with_capacity(2);
        for scale in [&calc_scale, &mass_scale] {
            let (lo, hi) = resize_factor_range(dims, scale.target);
            let factor = if options.size_aug {
                rng.gen_range(lo..=hi) * rng.gen_range(spec.rescale_aug.0..=spec.rescale_aug.1)
            } else {
                (lo + hi) / 2.0
            };
            let mut resized = resize_image(&img, factor);
            if flip {
                for row in resized.data.chunks_mut(resized.width) {
                    row.reverse();
                }
            }
            let tiling = Tiling::new(resized.height, resized.width, patch)?;
            let tensor = Tensor::new(vec![1, 1, resized.height, resized.width], resized.data)?;
            let id = tape.constant(tensor);
            branches.push((id, tiling));
        }
        let fwd = model.forward(
            &mut tape,
            branches[0].0,
            &branches[0].1,
            branches[1].0,
            &branches[1].1,
            Mode::Train,
        )?;
        let label = usize::from(sample.breast_label);
        let loss = tape.softmax_cross_entropy(fwd.logits, &[label])?;
        let loss_val = f64::from(tape.data(loss)[0]);
        if !loss_val.is_finite() {
            return Err(Error::NonFinite(format!("image-stage loss at iteration {t}")));
        }
        tape.backward(loss)?;
        for (name, id) in &fwd.bindings {
            let grad = tape.grad(*id).expect("bound parameter has gradient");
            let param = model.param_mut(name).expect("binding resolves");
            optimizer.step_param(name, param.data_mut(), grad)?;
        }
        window_loss += loss_val;
        window_steps += 1;

        if (t + 1) % spec.val_every == 0 || t + 1 == total {
            let val_auc = validate_image_model(model, &val_prepped)?;
            metrics.push(MetricsRow {
                stage: "image".to_string(),
                step: t + 1,
                loss: window_loss / window_steps.max(1) as f64,
                val_auc,
            });
            window_loss = 0.0;
            window_steps = 0;
            let is_best = val_auc >= best_val_auc;
            if is_best {
                best_val_auc = val_auc;
                best_iter = t + 1;
                best_model = Some(model.clone());
            }
            on_validate(ValidationEvent {
                iter: t + 1,
                model,
                optimizer,
                metrics,
                is_best,
                best_val_auc,
                best_iter,
            })?;
        }
    }
    Ok(ImageStageOutcome {
        best_val_auc,
        best_iter,
        best_model: best_model.unwrap_or_else(|| model.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn rmsprop_zero_gradient_is_identity() {
        let mut state = RmsPropState::new(1e-2);
        let mut param = vec![1.0f32, -2.0, 3.0];
        let before = param.clone();
        state.step_param("w", &mut param, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(param, before);
    }

    #[test]
    fn rmsprop_single_step_closed_form() {
        // v = 0.1*g^2 = 0.1; delta = -lr/(sqrt(0.1)+eps) ~ -0.031623
        let mut state = RmsPropState::new(1e-2);
        state.rho = 0.9;
        state.epsilon = 1e-8;
        let mut param = vec![0.0f32];
        state.step_param("w", &mut param, &[1.0]).unwrap();
        assert!((param[0] + 0.031_623).abs() < 1e-5, "{}", param[0]);
        assert!((state.v["w"][0] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn rmsprop_first_step_is_gradient_scale_free() {
        // At v=0 the update is lr*g/sqrt((1-rho) g^2): |g| cancels.
        let step_for = |g: f32| {
            let mut state = RmsPropState::new(1e-2);
            let mut param = vec![0.0f32];
            state.step_param("w", &mut param, &[g]).unwrap();
            param[0]
        };
        let small = step_for(1.0);
        let large = step_for(1000.0);
        assert!(((small - large) / small).abs() < 1e-3, "{small} vs {large}");
    }

    #[test]
    fn rmsprop_matches_elementwise_reimplementation() {
        let mut rng = crate::rng::derived_rng(3, "rmsprop-oracle");
        let n = 64;
        let mut param: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut shadow = param.clone();
        let mut v_shadow = vec![0.0f32; n];
        let mut state = RmsPropState::new(2e-4);
        for _ in 0..20 {
            let grads: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
            state.step_param("w", &mut param, &grads).unwrap();
            for i in 0..n {
                v_shadow[i] = 0.9 * v_shadow[i] + 0.1 * grads[i] * grads[i];
                shadow[i] -= 2e-4 * grads[i] / (v_shadow[i].sqrt() + 1e-8);
            }
        }
        for (a, b) in param.iter().zip(&shadow) {
            let rel = (a - b).abs() / b.abs().max(1e-7);
            assert!(rel < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn rmsprop_rejects_non_finite_named() {
        let mut state = RmsPropState::new(1e-2);
        let mut param = vec![0.0f32; 2];
        let err = state.step_param("fc.w", &mut param, &[1.0, f32::NAN]).unwrap_err();
        match err {
            Error::NonFinite(msg) => assert!(msg.contains("fc.w"), "{msg}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn optimizer_state_round_trips() {
        let mut state = RmsPropState::new(3e-4);
        let mut param = vec![0.5f32; 5];
        state.step_param("a", &mut param, &[0.1; 5]).unwrap();
        let mut ck = Checkpoint::new();
        state.write_to(&mut ck);
        let back = RmsPropState::read_from(&ck).unwrap();
        assert_eq!(back.learning_rate, state.learning_rate);
        assert_eq!(back.v["a"], state.v["a"]);
    }

    #[test]
    fn presets_parse_and_validate() {
        for preset in [Preset::desk(), Preset::paper()] {
            for scale in [ScaleKind::Calc, ScaleKind::Mass] {
                preset.wrn_config(scale, 2).validate().unwrap();
                for stage in preset.stages(scale) {
                    preset.stage_spec(scale, stage).validate().unwrap();
                }
            }
        }
        // Paper schedule numbers.
        let paper = Preset::paper();
        assert_eq!(paper.calc_stages[0].epochs, 50);
        assert_eq!(paper.calc_stages[0].samples_per_epoch, 10_000);
        assert_eq!(paper.calc_stages[1].epochs, 125);
        assert_eq!(paper.calc_stages[2].epochs, 225);
        assert_eq!(paper.mass_stages[2].epochs, 150);
        assert_eq!(paper.image_stage.iters_hi, 100_000);
        assert_eq!(paper.image_stage.iters_lo, 50_000);
        assert_eq!(paper.calc_target, (2750, 1500));
        assert_eq!(paper.mass_target, (1100, 600));
        assert!(Preset::by_name("nope").is_err());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![
            MetricsRow { stage: "detect-eq".into(), step: 1, loss: 0.5, val_auc: 0.75 },
            MetricsRow { stage: "image".into(), step: 500, loss: 0.25, val_auc: 0.875 },
        ];
        let back = metrics_from_csv(&metrics_to_csv(&rows)).unwrap();
        assert_eq!(back, rows);
    }
}
