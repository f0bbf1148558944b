use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use saliency_core::checkpoint::{load_checkpoint, save_checkpoint};
use saliency_core::dataio::{
    generate_synthetic, load_dataset_dir, read_pnm, resize_sample, write_saliency_pgm, Sample, SyntheticSpec,
};
use saliency_core::eval::{evaluate_predictions, predict_dataset, predict_image};
use saliency_core::metrics::{Averaging, EvalOptions, MetricsReport};
use saliency_core::trainer::{train_with_progress, TrainConfig, FINAL_CHECKPOINT, LOG_FILE};
use saliency_core::verify::{run_suite, SuiteOptions};
use saliency_core::{build_model, Model, ModelConfig, Tensor, Variant};
use serde::Serialize;

use crate::manifest::{files_under, ManifestBuilder, MANIFEST_FILE};
use crate::{AblateArgs, EvalArgs, Failure, GenerateArgs, GradcheckArgs, Hyper, InferArgs, Profile, TrainArgs};

type CmdResult = Result<(), Failure>;

pub const PR_FILE: &str = "pr_curve.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TABLE: &str = "ablation.txt";

/// Published DUTS-TE results of the full-scale models, shown next to the
/// synthetic ablation for orientation: (variant, max F, MAE).
pub const DUTS_TE_REFERENCE: [(&str, f64, f64); 3] =
    [("baseline", 0.856, 0.045), ("baseline-sa", 0.876, 0.041), ("full", 0.879, 0.040)];

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn model_config(profile: Profile, variant: Variant) -> ModelConfig {
    let base = match profile {
        Profile::Reference => ModelConfig::reference(),
        Profile::Desk => ModelConfig::desk(),
    };
    base.with_variant(variant)
}

pub fn train_config(h: &Hyper) -> Result<TrainConfig, Failure> {
    let mut cfg = match h.profile {
        Profile::Reference => TrainConfig::reference(),
        Profile::Desk => TrainConfig::desk(),
    };
    if let Some(v) = h.epochs {
        cfg.epochs = v;
        cfg.phase1_epochs = cfg.phase1_epochs.min(v);
    }
    if let Some(v) = h.phase1_epochs {
        cfg.phase1_epochs = v;
    }
    if let Some(v) = h.lr1 {
        cfg.lr_phase1 = v;
    }
    if let Some(v) = h.lr2 {
        cfg.lr_phase2 = v;
    }
    if let Some(v) = h.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = h.batch_size {
        cfg.batch_size = v;
    }
    cfg.seed = h.seed;
    cfg.threads = h.threads;
    cfg.augment = !h.no_augment;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn load_data(root: &Path) -> Result<Vec<Sample<f64>>, Failure> {
    if !root.is_dir() {
        return Err(Failure::Data(anyhow!("dataset directory {} does not exist", root.display())));
    }
    Ok(load_dataset_dir(root)?)
}

fn fit_to(samples: Vec<Sample<f64>>, cfg: &ModelConfig) -> Result<Vec<Sample<f64>>, Failure> {
    let (h, w) = cfg.input_size;
    Ok(samples
        .iter()
        .map(|s| resize_sample(s, h, w))
        .collect::<saliency_core::Result<Vec<_>>>()?)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<Vec<PathBuf>, Failure> {
    let mut pr = Vec::new();
    report.write_pr_csv(&mut pr).context("formatting PR curve")?;
    let mut summary = Vec::new();
    report.write_summary_csv(&mut summary).context("formatting summary")?;
    let (pr_path, summary_path) = (dir.join(PR_FILE), dir.join(SUMMARY_FILE));
    write_file(&pr_path, pr)?;
    write_file(&summary_path, summary)?;
    Ok(vec![pr_path, summary_path])
}

/// Everything under `dir` except the manifest itself; training logs are
/// marked volatile because they carry wall-clock times.
fn record_outputs(builder: &mut ManifestBuilder, dir: &Path) -> Result<(), Failure> {
    for path in files_under(dir)? {
        match path.file_name().and_then(|n| n.to_str()) {
            Some(MANIFEST_FILE) => {}
            Some(LOG_FILE) => {
                builder.volatile_output(path);
            }
            _ => {
                builder.output(path);
            }
        }
    }
    Ok(())
}

pub fn generate(a: GenerateArgs) -> CmdResult {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let spec = SyntheticSpec {
        n_samples: a.n,
        size: (a.size, a.size),
        shapes_per_image: (a.min_shapes, a.max_shapes),
        texture_amplitude: a.texture,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let builder = ManifestBuilder::new("generate", &spec, Some(a.seed))?;
    let summary = generate_synthetic(&spec, &a.out)?;
    println!(
        "wrote {} samples of {}×{} to {}; mask coverage mean {:.3}, min {:.3}, max {:.3}",
        summary.n_samples,
        a.size,
        a.size,
        a.out.display(),
        summary.mean_coverage,
        summary.min_coverage,
        summary.max_coverage
    );
    let mut builder = builder;
    for sub in ["images", "masks"] {
        for path in files_under(&a.out.join(sub))? {
            builder.output(path);
        }
    }
    builder.write(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct RunConfig<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn train_variant(
    data: &[Sample<f64>],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out: &Path,
) -> Result<Model<f64>, Failure> {
    let mut model = build_model::<f64>(model_cfg, train_cfg.seed)?;
    println!(
        "training {} ({} parameters) on {} samples for {} epochs",
        model_cfg.variant,
        model.parameter_count(),
        data.len(),
        train_cfg.epochs
    );
    train_with_progress(&mut model, data, train_cfg, Some(out), |e| {
        println!(
            "  epoch {:>3}  loss {:.5}  lr {:.1e}  {:.1}s",
            e.epoch + 1,
            e.mean_loss,
            e.lr,
            e.wall_ms as f64 / 1000.0
        );
    })?;
    let config = serde_json::to_string_pretty(&RunConfig {
        model: model_cfg,
        train: train_cfg,
    })
    .context("serializing config")?;
    write_file(&out.join("config.json"), config)?;
    Ok(model)
}

pub fn train(a: TrainArgs) -> CmdResult {
    let train_cfg = train_config(&a.hyper)?;
    let model_cfg = model_config(a.hyper.profile, a.variant);
    model_cfg.validate().map_err(|e| usage(e.to_string()))?;
    let data = fit_to(load_data(&a.data)?, &model_cfg)?;
    if data.is_empty() {
        return Err(Failure::Data(anyhow!("no images found under {}", a.data.join("images").display())));
    }
    let mut builder = ManifestBuilder::new(
        "train",
        RunConfig {
            model: &model_cfg,
            train: &train_cfg,
        },
        Some(train_cfg.seed),
    )?;
    train_variant(&data, &model_cfg, &train_cfg, &a.out)?;
    println!("final checkpoint: {}", a.out.join(FINAL_CHECKPOINT).display());
    record_outputs(&mut builder, &a.out)?;
    builder.write(&a.out)?;
    Ok(())
}

fn load_predictions(dir: &Path, samples: &[Sample<f64>]) -> Result<Vec<Tensor<f64>>, Failure> {
    samples
        .iter()
        .map(|s| {
            let path = dir.join(format!("{}.pgm", s.id));
            let img = read_pnm(&path)?;
            if img.channels != 1 || (img.height, img.width) != (s.height(), s.width()) {
                return Err(Failure::Data(anyhow!(
                    "{} is {}×{}×{}, expected a 1×{}×{} map",
                    path.display(),
                    img.channels,
                    img.height,
                    img.width,
                    s.height(),
                    s.width()
                )));
            }
            Ok(img.to_tensor())
        })
        .collect()
}

#[derive(Serialize)]
struct EvalConfig {
    checkpoint: Option<PathBuf>,
    predictions: Option<PathBuf>,
    data: PathBuf,
    thresholds: usize,
    per_image: bool,
}

pub fn eval(a: EvalArgs) -> CmdResult {
    if a.thresholds < 2 {
        return Err(usage("--thresholds must be at least 2"));
    }
    let opts = EvalOptions {
        n_thresholds: a.thresholds,
        averaging: if a.per_image {
            Averaging::PerImage
        } else {
            Averaging::Pooled
        },
        ..EvalOptions::default()
    };
    let mut builder = ManifestBuilder::new(
        "eval",
        EvalConfig {
            checkpoint: a.checkpoint.clone(),
            predictions: a.predictions.clone(),
            data: a.data.clone(),
            thresholds: a.thresholds,
            per_image: a.per_image,
        },
        None,
    )?;
    let samples = load_data(&a.data)?;
    if samples.is_empty() {
        return Err(Failure::Data(anyhow!("no images found under {}", a.data.join("images").display())));
    }
    let predictions = match (&a.checkpoint, &a.predictions) {
        (_, Some(dir)) => load_predictions(dir, &samples)?,
        (Some(ckpt), None) => {
            let model = load_checkpoint::<f64>(ckpt)?;
            if let Some(v) = a.variant {
                if model.config().variant != v {
                    return Err(saliency_core::Error::ConfigIncompatible(format!(
                        "{} holds a {} model, expected {v}",
                        ckpt.display(),
                        model.config().variant
                    ))
                    .into());
                }
            }
            predict_dataset(&model, &samples)?
        }
        (None, None) => return Err(usage("either --checkpoint or --predictions is required")),
    };
    if let Some(dump) = &a.dump {
        fs::create_dir_all(dump).with_context(|| format!("creating {}", dump.display()))?;
        for (p, s) in predictions.iter().zip(&samples) {
            write_saliency_pgm(&dump.join(format!("{}.pgm", s.id)), p)?;
        }
    }
    let report = evaluate_predictions(&predictions, &samples, opts)?;
    println!("{}", report.summary_line());
    for path in write_report(&a.out, &report)? {
        builder.output(path);
    }
    builder.write(&a.out)?;
    Ok(())
}

pub fn infer(a: InferArgs) -> CmdResult {
    let model = load_checkpoint::<f64>(&a.checkpoint)?;
    let mut builder = ManifestBuilder::new(
        "infer",
        serde_json::json!({ "checkpoint": a.checkpoint, "images": a.images }),
        None,
    )?;
    let mut outputs = Vec::new();
    for path in &a.images {
        let img = read_pnm(path)?;
        if img.channels != 3 {
            return Err(saliency_core::Error::ImageFormat {
                path: path.clone(),
                msg: "expected an RGB (P6) image".into(),
            }
            .into());
        }
        let probs = predict_image(&model, &img.to_tensor::<f64>())?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let dir = match &a.out_dir {
            Some(d) => d.clone(),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let out = dir.join(format!("{stem}_saliency.pgm"));
        write_saliency_pgm(&out, &probs)?;
        println!("{} -> {}", path.display(), out.display());
        outputs.push(out);
    }
    let manifest_dir = match &a.out_dir {
        Some(d) => d.clone(),
        None => outputs[0].parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    for out in outputs {
        builder.output(out);
    }
    builder.write(&manifest_dir)?;
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let opts = SuiteOptions {
        seed: a.seed,
        corrupt: a.corrupt.clone(),
        skip_model: a.skip_model,
    };
    let report = run_suite(&opts)?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        let mut builder = ManifestBuilder::new(
            "gradcheck",
            serde_json::json!({ "seed": a.seed, "corrupt": a.corrupt, "skip_model": a.skip_model }),
            Some(a.seed),
        )?;
        let path = out.join("report.json");
        write_file(&path, serde_json::to_string_pretty(&report).context("serializing report")?)?;
        builder.output(path);
        builder.write(out)?;
    }
    if report.passed() {
        println!("all {} components passed", report.results.len());
        Ok(())
    } else {
        Err(Failure::Numeric(anyhow!("gradient check failed")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub max_f: f64,
    pub mean_f: f64,
    pub mae: f64,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("synthetic benchmark\n");
    out.push_str(&format!("{:<12} {:>7} {:>7} {:>7}\n", "variant", "max_f", "mean_f", "mae"));
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:>7.4} {:>7.4} {:>7.4}\n",
            r.variant.as_str(),
            r.max_f,
            r.mean_f,
            r.mae
        ));
    }
    out.push_str("\nDUTS-TE reference, full-scale models\n");
    out.push_str(&format!("{:<12} {:>7} {:>7}\n", "variant", "max_f", "mae"));
    for (v, f, m) in DUTS_TE_REFERENCE {
        out.push_str(&format!("{v:<12} {f:>7.3} {m:>7.3}\n"));
    }
    out
}

pub fn ablate(a: AblateArgs) -> CmdResult {
    let train_cfg = train_config(&a.hyper)?;
    let configs: Vec<ModelConfig> = Variant::ALL.iter().map(|&v| model_config(a.hyper.profile, v)).collect();
    for c in &configs {
        c.validate().map_err(|e| usage(e.to_string()))?;
    }
    let train_set = fit_to(load_data(&a.train)?, &configs[0])?;
    let test_set = load_data(&a.test)?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Failure::Data(anyhow!("training and test sets must both be nonempty")));
    }
    let mut builder = ManifestBuilder::new(
        "ablate",
        serde_json::json!({ "train": train_cfg, "models": configs, "train_dir": a.train, "test_dir": a.test }),
        Some(train_cfg.seed),
    )?;
    let mut rows = Vec::new();
    for cfg in &configs {
        let dir = a.out.join(cfg.variant.as_str());
        let model = train_variant(&train_set, cfg, &train_cfg, &dir)?;
        save_checkpoint(&model, &dir.join(FINAL_CHECKPOINT))?;
        let predictions = predict_dataset(&model, &test_set)?;
        let report = evaluate_predictions(&predictions, &test_set, EvalOptions::default())?;
        println!("  {}: {}", cfg.variant, report.summary_line());
        write_report(&dir.join("eval"), &report)?;
        rows.push(AblationRow {
            variant: cfg.variant,
            max_f: report.max_f,
            mean_f: report.mean_f,
            mae: report.mae,
        });
    }
    let mut csv = String::from("variant,max_f,mean_f,mae\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.variant, r.max_f, r.mean_f, r.mae));
    }
    write_file(&a.out.join(ABLATION_CSV), csv)?;
    let table = ablation_table(&rows);
    write_file(&a.out.join(ABLATION_TABLE), &table)?;
    print!("\n{table}");
    record_outputs(&mut builder, &a.out)?;
    builder.write(&a.out)?;
    Ok(())
}
