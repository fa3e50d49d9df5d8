//! `curriculearn` command line: synthesize a phantom dataset, train the
//! two-scale patch curriculum and the whole-image model, evaluate at breast
//! level, and compare runs.
//!
//! Every command is deterministic for a fixed `--seed`: rerunning with the
//! same configuration rewrites byte-identical outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use curriculearn::checkpoint::Checkpoint;
use curriculearn::dataset::{load_split, prepare_samples, write_dataset, ImageSample};
use curriculearn::eval::{
    bootstrap_std, breast_score, records_to_csv, roc_auc, roc_curve, roc_svg, tta_scores,
    EvalRecord, EvalSummary,
};
use curriculearn::phantom::{generate_case_named, split_patients, Split, View};
use curriculearn::rng::derive_seed;
use curriculearn::sampling::ScaleKind;
use curriculearn::training::{
    image_resume_from_checkpoint, image_resume_to_checkpoint, metrics_from_csv, metrics_to_csv,
    patch_resume_from_checkpoint, patch_resume_to_checkpoint, run_image_stage,
    run_patch_curriculum, ImageTrainOptions, MetricsRow, Preset, RmsPropState,
};
use curriculearn::wrn::{ImageModel, PatchModel, WideResNetConfig};

#[derive(Parser)]
#[command(name = "curriculearn", version, about = "Two-scale curriculum training pipeline")]
struct Cli {
    /// Root seed; every random decision derives from it.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    /// Single-threaded, bit-reproducible mode (forces --workers 1).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run directory for checkpoints, metrics, and evaluation outputs.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Dataset directory (defaults to $CURRICULEARN_DATA, then <out>/data).
    #[arg(long, global = true, env = "CURRICULEARN_DATA")]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScaleArg {
    Calc,
    Mass,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ViewsArg {
    Cc,
    Mlo,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with ground truth and a split manifest.
    Synth {
        /// Number of patients (each: two breasts, two views per breast).
        #[arg(long)]
        patients: usize,
    },
    /// Train the detection->malignancy patch curriculum for one scale.
    TrainPatch {
        #[arg(long, value_enum)]
        scale: ScaleArg,
        /// Continue from <out>/patch/<scale>/resume.ckpt.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs (for interruption testing).
        #[arg(long)]
        stop_after_epochs: Option<usize>,
    },
    /// Train the whole-image model end-to-end from the patch checkpoints.
    TrainImage {
        /// Start from random weights instead of the patch checkpoints.
        #[arg(long)]
        no_pretrain: bool,
        /// Disable random resize augmentation (flips stay on).
        #[arg(long)]
        no_size_aug: bool,
        /// Continue from <out>/image/resume.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Score the test split with TTA and write records, summary, and ROC.
    Eval {
        #[arg(long, value_enum, default_value_t = ViewsArg::Both)]
        views: ViewsArg,
    },
    /// Compare evaluated runs into one CSV table on stdout.
    Report {
        /// Run directories (each produced by train-image + eval).
        runs: Vec<PathBuf>,
    },
}

/// Flags recorded with a trained image model, consumed by `report`.
#[derive(Serialize, Deserialize)]
struct RunInfo {
    seed: u64,
    preset: String,
    pretraining: String,
    augmentation: String,
}

/// Config sidecar for the image checkpoint.
#[derive(Serialize, Deserialize)]
struct ImageModelInfo {
    calc: WideResNetConfig,
    mass: WideResNetConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = if cli.deterministic { 1 } else { cli.workers.unwrap_or_else(num_cpus) };
    if workers == 0 {
        eprintln!("error: --workers must be >= 1");
        return ExitCode::from(2);
    }
    // Usage-level validation beyond clap's grammar.
    if let Command::Synth { patients } = &cli.command {
        if *patients == 0 {
            eprintln!("error: --patients must be >= 1");
            return ExitCode::from(2);
        }
    }
    if let Command::Report { runs } = &cli.command {
        if runs.is_empty() {
            eprintln!("error: report needs at least one run directory");
            return ExitCode::from(2);
        }
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn num_cpus() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let preset = match cli.preset {
        PresetArg::Paper => Preset::paper(),
        PresetArg::Desk => Preset::desk(),
    };
    let data_dir = cli.data.clone().unwrap_or_else(|| cli.out.join("data"));
    match &cli.command {
        Command::Synth { patients } => cmd_synth(&preset, cli.seed, *patients, &data_dir),
        Command::TrainPatch { scale, resume, stop_after_epochs } => {
            let scale = match scale {
                ScaleArg::Calc => ScaleKind::Calc,
                ScaleArg::Mass => ScaleKind::Mass,
            };
            cmd_train_patch(&preset, cli.seed, &data_dir, &cli.out, scale, *resume, *stop_after_epochs)
        }
        Command::TrainImage { no_pretrain, no_size_aug, resume } => cmd_train_image(
            &preset,
            cli.seed,
            &data_dir,
            &cli.out,
            *no_pretrain,
            *no_size_aug,
            *resume,
        ),
        Command::Eval { views } => cmd_eval(&preset, cli.seed, &data_dir, &cli.out, *views),
        Command::Report { runs } => cmd_report(runs),
    }
}

fn cmd_synth(preset: &Preset, seed: u64, patients: usize, data_dir: &Path) -> anyhow::Result<()> {
    use rayon::prelude::*;
    let cases: Vec<_> = (0..patients)
        .into_par_iter()
        .map(|i| {
            generate_case_named(
                format!("p{i:04}"),
                derive_seed(seed, &format!("case/{i}")),
                &preset.phantom,
            )
        })
        .collect::<Result<_, _>>()?;
    let ids: Vec<String> = cases.iter().map(|c| c.patient_id.clone()).collect();
    let splits = split_patients(&ids, (0.87, 0.05, 0.08), derive_seed(seed, "split"))?;
    let counts = write_dataset(&cases, &splits, data_dir)?;
    println!(
        "wrote {} patients to {} (train {}, val {}, test {})",
        patients,
        data_dir.display(),
        counts.train,
        counts.val,
        counts.test
    );
    Ok(())
}

fn scale_dir(out: &Path, scale: ScaleKind) -> PathBuf {
    out.join("patch").join(scale.to_string())
}

fn write_model_checkpoint(
    path: &Path,
    model: &PatchModel<f32>,
) -> anyhow::Result<()> {
    let mut ck = Checkpoint::new();
    model.write_to(&mut ck, "model");
    ck.save(path)?;
    let sidecar = path.with_extension("json");
    std::fs::write(&sidecar, serde_json::to_string_pretty(&model.config)?)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_patch(
    preset: &Preset,
    seed: u64,
    data_dir: &Path,
    out: &Path,
    scale: ScaleKind,
    resume: bool,
    stop_after_epochs: Option<usize>,
) -> anyhow::Result<()> {
    let dir = scale_dir(out, scale);
    std::fs::create_dir_all(&dir)?;
    let train = prepare_samples(load_split(data_dir, Split::Train).context("loading train split")?)?;
    let val = prepare_samples(load_split(data_dir, Split::Val).context("loading val split")?)?;

    let resume_path = dir.join("resume.ckpt");
    let metrics_path = dir.join("metrics.csv");
    let (resume_state, mut metrics) = if resume && resume_path.exists() {
        let ck = Checkpoint::load(&resume_path)?;
        let stages = preset.stages(scale);
        let state =
            patch_resume_from_checkpoint(&ck, |classes| preset.wrn_config(scale, classes), stages)?;
        let rows = metrics_from_csv(&std::fs::read_to_string(&metrics_path)?)?;
        println!(
            "resuming {scale} at stage {} epoch {}",
            state.stage_index, state.next_epoch
        );
        (Some(state), rows)
    } else {
        (None, Vec::new())
    };

    let outcome = run_patch_curriculum(
        preset,
        scale,
        &train,
        &val,
        seed,
        resume_state,
        stop_after_epochs,
        &mut metrics,
        |stage_index, epoch, model, optimizer, detect_model, rows| {
            let ck = patch_resume_to_checkpoint(stage_index, epoch + 1, model, optimizer, detect_model);
            ck.save(&resume_path)?;
            std::fs::write(&metrics_path, metrics_to_csv(rows))?;
            Ok(())
        },
    )?;

    match outcome {
        Some(done) => {
            write_model_checkpoint(&dir.join("detect.ckpt"), &done.detect_model)?;
            write_model_checkpoint(&dir.join("malig.ckpt"), &done.model)?;
            let last = metrics.last().map(|r| r.val_auc).unwrap_or(f64::NAN);
            println!(
                "{scale} curriculum finished: {} epochs logged, last val AUC {last:.3}",
                metrics.len()
            );
        }
        None => println!("stopped early; continue with --resume"),
    }
    Ok(())
}

fn load_patch_model(path: &Path) -> anyhow::Result<PatchModel<f32>> {
    let config: WideResNetConfig =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
    let ck = Checkpoint::load(path)?;
    Ok(PatchModel::read_from(&ck, "model", config)?)
}

fn cmd_train_image(
    preset: &Preset,
    seed: u64,
    data_dir: &Path,
    out: &Path,
    no_pretrain: bool,
    no_size_aug: bool,
    resume: bool,
) -> anyhow::Result<()> {
    let dir = out.join("image");
    std::fs::create_dir_all(&dir)?;
    let train = load_split(data_dir, Split::Train).context("loading train split")?;
    let val = load_split(data_dir, Split::Val).context("loading val split")?;

    let mut model = if no_pretrain {
        let calc = PatchModel::build(
            preset.wrn_config(ScaleKind::Calc, 2),
            derive_seed(seed, "nopretrain/calc"),
        )?;
        let mass = PatchModel::build(
            preset.wrn_config(ScaleKind::Mass, 2),
            derive_seed(seed, "nopretrain/mass"),
        )?;
        ImageModel::from_patch_models(calc, mass, derive_seed(seed, "image"))
    } else {
        let calc_path = scale_dir(out, ScaleKind::Calc).join("malig.ckpt");
        let mass_path = scale_dir(out, ScaleKind::Mass).join("malig.ckpt");
        for p in [&calc_path, &mass_path] {
            if !p.exists() {
                bail!(
                    "missing patch checkpoint {} (run train-patch first, or pass --no-pretrain)",
                    p.display()
                );
            }
        }
        ImageModel::from_patch_models(
            load_patch_model(&calc_path)?,
            load_patch_model(&mass_path)?,
            derive_seed(seed, "image"),
        )
    };

    let info = ImageModelInfo { calc: model.calc.config.clone(), mass: model.mass.config.clone() };
    std::fs::write(dir.join("image.json"), serde_json::to_string_pretty(&info)?)?;

    let resume_path = dir.join("resume.ckpt");
    let metrics_path = dir.join("metrics.csv");
    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut optimizer = RmsPropState::new(preset.image_stage.lr_hi);
    let mut start_iter = 0usize;
    let mut start_best = None;
    if resume && resume_path.exists() {
        let ck = Checkpoint::load(&resume_path)?;
        let state = image_resume_from_checkpoint(&ck, info.calc.clone(), info.mass.clone())?;
        model = state.model;
        optimizer = state.optimizer;
        start_iter = state.next_iter;
        start_best = Some((state.best_val_auc, state.best_iter));
        metrics = metrics_from_csv(&std::fs::read_to_string(&metrics_path)?)?;
        println!("resuming image stage at iteration {start_iter}");
    }

    let options = ImageTrainOptions { size_aug: !no_size_aug, flip_aug: true };
    let best_path = dir.join("best.ckpt");
    let outcome = run_image_stage(
        &mut model,
        preset,
        &train,
        &val,
        options,
        seed,
        start_iter,
        start_best,
        &mut optimizer,
        &mut metrics,
        |event| {
            let ck = image_resume_to_checkpoint(
                event.iter,
                event.best_val_auc,
                event.best_iter,
                event.model,
                event.optimizer,
            );
            ck.save(&resume_path)?;
            std::fs::write(&metrics_path, metrics_to_csv(event.metrics))?;
            if event.is_best {
                let mut best = Checkpoint::new();
                event.model.write_to(&mut best);
                best.save(&best_path)?;
            }
            Ok(())
        },
    )?;

    // Best-validation weights win; keep the final state alongside.
    let mut best = Checkpoint::new();
    outcome.best_model.write_to(&mut best);
    best.save(&best_path)?;
    let mut fin = Checkpoint::new();
    model.write_to(&mut fin);
    fin.save(&dir.join("final.ckpt"))?;

    let run_info = RunInfo {
        seed,
        preset: preset.name.clone(),
        pretraining: if no_pretrain { "none".into() } else { "lesions".into() },
        augmentation: if no_size_aug { "flips".into() } else { "size, flips".into() },
    };
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&run_info)?)?;
    println!(
        "image stage done: best val AUC {:.3} at iteration {}",
        outcome.best_val_auc, outcome.best_iter
    );
    Ok(())
}

fn cmd_eval(
    preset: &Preset,
    seed: u64,
    data_dir: &Path,
    out: &Path,
    views: ViewsArg,
) -> anyhow::Result<()> {
    let dir = out.join("eval");
    std::fs::create_dir_all(&dir)?;
    let image_dir = out.join("image");
    let info: ImageModelInfo =
        serde_json::from_str(&std::fs::read_to_string(image_dir.join("image.json"))?)?;
    let ck = Checkpoint::load(&image_dir.join("best.ckpt"))?;
    let mut model = ImageModel::read_from(&ck, info.calc, info.mass)?;

    let test = load_split(data_dir, Split::Test).context("loading test split")?;
    let test: Vec<ImageSample> = test
        .into_iter()
        .filter(|s| match views {
            ViewsArg::Cc => s.view == View::Cc,
            ViewsArg::Mlo => s.view == View::Mlo,
            ViewsArg::Both => true,
        })
        .collect();
    if test.is_empty() {
        bail!("test split is empty");
    }

    let calc_scale = preset.scale_spec(ScaleKind::Calc);
    let mass_scale = preset.scale_spec(ScaleKind::Mass);
    let mut per_breast: BTreeMap<(String, String), (Vec<f64>, bool)> = BTreeMap::new();
    for sample in &test {
        let score = tta_scores(&mut model, &sample.image.to_f32(), &calc_scale, &mass_scale)?;
        let key = (sample.patient_id.clone(), sample.laterality.to_string());
        per_breast.entry(key).or_insert_with(|| (Vec::new(), sample.breast_label)).0.push(score);
    }
    let records: Vec<EvalRecord> = per_breast
        .iter()
        .map(|((patient, lat), (scores, label))| {
            Ok(EvalRecord {
                patient_id: patient.clone(),
                laterality: if lat == "L" {
                    curriculearn::phantom::Laterality::Left
                } else {
                    curriculearn::phantom::Laterality::Right
                },
                score: breast_score(scores)?,
                label: *label,
            })
        })
        .collect::<Result<_, curriculearn::Error>>()?;

    let auc = roc_auc(&records)?;
    let auc_std = bootstrap_std(&records, 1000, derive_seed(seed, "bootstrap"))?;
    let curve = roc_curve(&records)?;
    let summary = EvalSummary {
        auc,
        auc_std,
        n_pos: records.iter().filter(|r| r.label).count(),
        n_neg: records.iter().filter(|r| !r.label).count(),
    };
    std::fs::write(dir.join("records.csv"), records_to_csv(&records))?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    std::fs::write(dir.join("roc.svg"), roc_svg(&curve, auc))?;
    println!(
        "eval: AUC {auc:.3} +/- {auc_std:.3} over {} breasts ({} positive)",
        records.len(),
        summary.n_pos
    );
    Ok(())
}

fn cmd_report(runs: &[PathBuf]) -> anyhow::Result<()> {
    let mut table = String::from("run,pretraining,augmentation,auc,auc_std,status\n");
    for run in runs {
        let summary_path = run.join("eval").join("summary.json");
        let info_path = run.join("image").join("run.json");
        let row = match (std::fs::read_to_string(&summary_path), std::fs::read_to_string(&info_path))
        {
            (Ok(summary), info) => {
                let summary: EvalSummary = serde_json::from_str(&summary)
                    .map_err(|e| anyhow!("{}: {e}", summary_path.display()))?;
                let (pre, aug) = match info {
                    Ok(raw) => {
                        let info: RunInfo = serde_json::from_str(&raw)
                            .map_err(|e| anyhow!("{}: {e}", info_path.display()))?;
                        (info.pretraining, info.augmentation)
                    }
                    Err(_) => ("unknown".into(), "unknown".into()),
                };
                format!(
                    "{},{},\"{}\",{:.4},{:.4},ok\n",
                    run.display(),
                    pre,
                    aug,
                    summary.auc,
                    summary.auc_std
                )
            }
            (Err(_), _) => format!("{},,,,,missing\n", run.display()),
        };
        table.push_str(&row);
    }
    print!("{table}");
    Ok(())
}
