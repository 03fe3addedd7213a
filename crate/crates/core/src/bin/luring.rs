//! `luring` CLI: train the target and mapper variants, run attack grids,
//! compute transfer metrics, and emit reports.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use ndarray::Array1;

use luring_core::analysis::{
    distortion, export_image_grid, omega_dominance, saliency, write_omega_csv,
    DEFAULT_L0_THRESHOLD,
};
use luring_core::attacks::{load_attack_result, save_attack_result, ImageShape};
use luring_core::data::ingest_mnist;
use luring_core::error::Error;
use luring_core::harness::{self, ExperimentConfig, MapperKind};
use luring_core::metrics::{
    write_reports_csv, EvalMasks, TransferReport,
};
use luring_core::models::{
    agreement, compose, load_classifier, load_mapper, save_classifier, save_mapper, Model,
};
use luring_core::toy::{
    classify_feature, demo_report_json, luring_demo, robust_usefulness, usefulness,
    DiagonalMapper, LinearFeature, ToyTask,
};

#[derive(Parser)]
#[command(
    name = "luring",
    about = "Luring-effect defense: train an input mapper on a frozen classifier, attack the composition, and measure how poorly the attacks transfer back.",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the training-subset size (0 = full training set).
    #[arg(long)]
    subset: Option<usize>,
    /// Per-epoch progress output.
    #[arg(long, short = 'v')]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base classifier and save its checkpoint.
    TrainBase(CommonArgs),
    /// Train one mapper variant on top of the saved base checkpoint.
    TrainMapper {
        #[command(flatten)]
        common: CommonArgs,
        /// stack | auto | ce | luring
        #[arg(long)]
        variant: String,
    },
    /// Craft adversarial batches for the configured attack grid and persist
    /// them as container files.
    Attack(CommonArgs),
    /// Compute transfer metrics from saved models and adversarial containers.
    Evaluate(CommonArgs),
    /// Distortion, saliency and logit-direction analyses.
    Analyze(CommonArgs),
    /// Synthetic robust/non-robust feature demonstration.
    ToyFeatures {
        /// Output directory for the demo report.
        #[arg(long, default_value = "toy-out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-render plots and tables from a run directory.
    Report {
        /// Run directory (an `--out` of a previous command).
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: train, attack, evaluate, report.
    Run(CommonArgs),
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(subset) = common.subset {
        cfg.dataset.train_subset = subset;
    }
    Ok(cfg)
}

fn cmd_train_base(common: &CommonArgs) -> Result<(), Error> {
    let cfg = load_config(common)?;
    std::fs::create_dir_all(&cfg.out)?;
    let data = ingest_mnist(&cfg.dataset.path)?;
    let (model, log) = harness::train_base_model(&cfg, &data, common.verbose)?;
    save_classifier(&model, cfg.out.join("base.ckpt"))?;
    log.write_csv(cfg.out.join("train_base.csv"))?;
    let acc = log.rows.last().and_then(|r| r.accuracy).unwrap_or(f64::NAN);
    println!("base classifier trained: test accuracy {acc:.4}");
    Ok(())
}

fn cmd_train_mapper(common: &CommonArgs, variant: &str) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let kind = MapperKind::parse(variant)?;
    let data = ingest_mnist(&cfg.dataset.path)?;
    let base = load_classifier(cfg.out.join("base.ckpt"))?;
    let target = Arc::new(base.frozen());
    let (t, log) = harness::train_mapper_variant(&cfg, kind, &target, &data, cfg.seed, common.verbose)?;
    save_mapper(&t.mapper, cfg.out.join(format!("{}.ckpt", kind.as_str())))?;
    if kind == MapperKind::Stack {
        save_classifier(&t.target, cfg.out.join("stack_inner.ckpt"))?;
    }
    log.write_csv(cfg.out.join(format!("train_{}.csv", kind.as_str())))?;
    let test = data.test;
    let acc = luring_core::models::accuracy(&t, &test.images, &test.labels)?;
    let agree = agreement(target.as_ref(), &t, &test.images, &test.labels)?;
    println!(
        "mapper `{}` trained: composed accuracy {acc:.4}, agreement {agree:.4}",
        kind.as_str()
    );
    Ok(())
}

fn load_models(cfg: &ExperimentConfig) -> Result<harness::TrainedModels, Error> {
    let base = load_classifier(cfg.out.join("base.ckpt"))?;
    let target = Arc::new(base.frozen());
    let mut augmented = std::collections::BTreeMap::new();
    for kind in MapperKind::ALL {
        let mapper = load_mapper(cfg.out.join(format!("{}.ckpt", kind.as_str())))?;
        let inner = if kind == MapperKind::Stack {
            Arc::new(load_classifier(cfg.out.join("stack_inner.ckpt"))?.frozen())
        } else {
            Arc::clone(&target)
        };
        augmented.insert(kind, compose(mapper, inner)?);
    }
    Ok(harness::TrainedModels {
        target,
        augmented,
        logs: Vec::new(),
    })
}

fn cmd_attack(common: &CommonArgs) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let data = ingest_mnist(&cfg.dataset.path)?;
    let models = load_models(&cfg)?;
    let geom = ImageShape {
        h: data.test.rows,
        w: data.test.cols,
    };
    let (xs, ys) = harness::common_correct_eval(&models, &data.test, cfg.dataset.eval_examples)?;
    for (kind, t) in &models.augmented {
        for (ai, aspec) in cfg.attacks.iter().enumerate() {
            for (ei, &eps) in aspec.epsilons.iter().enumerate() {
                let craft = harness::craft_closure(aspec, eps, geom);
                let seed = cfg
                    .seed
                    .wrapping_add(1000 * ai as u64)
                    .wrapping_add(ei as u64);
                let res = craft(t, &xs, &ys, seed)?;
                res.check_budget(eps)?;
                let p = cfg
                    .out
                    .join(format!("adv_{}_{}_eps{eps}.bin", kind.as_str(), aspec.kind));
                save_attack_result(&res, eps, seed, &p)?;
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn cmd_evaluate(common: &CommonArgs) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let models = load_models(&cfg)?;
    let mut labeled: Vec<(String, TransferReport)> = Vec::new();
    for (kind, t) in &models.augmented {
        for aspec in &cfg.attacks {
            for &eps in &aspec.epsilons {
                let p = cfg
                    .out
                    .join(format!("adv_{}_{}_eps{eps}.bin", kind.as_str(), aspec.kind));
                if !p.exists() {
                    continue;
                }
                let (res, meta) = load_attack_result(&p)?;
                let masks = EvalMasks::evaluate(t, models.target.as_ref(), &res)?;
                let agree = agreement(models.target.as_ref(), t, &res.x_clean, &res.y)?;
                labeled.push((
                    kind.as_str().to_string(),
                    TransferReport::from_masks(&masks, res.attack_id.clone(), meta.epsilon, meta.seed, agree),
                ));
            }
        }
    }
    if labeled.is_empty() {
        return Err(Error::Config(
            "no adversarial containers found; run `luring attack` first".into(),
        ));
    }
    let p = cfg.out.join("evaluation.csv");
    write_reports_csv(&p, &labeled)?;
    std::fs::write(
        cfg.out.join("evaluation.json"),
        serde_json::to_string_pretty(&labeled).map_err(|e| Error::Serde(e.to_string()))?,
    )?;
    println!("wrote {}", p.display());
    Ok(())
}

fn cmd_analyze(common: &CommonArgs) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let data = ingest_mnist(&cfg.dataset.path)?;
    let models = load_models(&cfg)?;
    let n = 16.min(data.test.len());
    let sample = data.test.take(n);
    // saliency of the target and sensitivity of each mapper
    let sal = saliency(models.target.as_ref(), &sample.images)?;
    export_image_grid(&sal, sample.rows, sample.cols, 8, cfg.out.join("saliency_base.png"))?;
    for (kind, t) in &models.augmented {
        let sens = t.mapper.sensitivity(&sample.images)?;
        export_image_grid(
            &sens,
            sample.rows,
            sample.cols,
            8,
            cfg.out.join(format!("saliency_{}.png", kind.as_str())),
        )?;
        let sal_t = saliency(t, &sample.images)?;
        export_image_grid(
            &sal_t,
            sample.rows,
            sample.cols,
            8,
            cfg.out.join(format!("saliency_composed_{}.png", kind.as_str())),
        )?;
    }
    // distortion stats from any persisted containers
    let mut dist_rows = Vec::new();
    for entry in std::fs::read_dir(&cfg.out)? {
        let path = entry?.path();
        let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
        if name.starts_with("adv_") && name.ends_with(".bin") {
            let (res, meta) = load_attack_result(&path)?;
            let stats = distortion(&res.x_clean, &res.x_adv, DEFAULT_L0_THRESHOLD)?;
            dist_rows.push((name, meta, stats));
        }
    }
    if !dist_rows.is_empty() {
        let mut w = csv::Writer::from_path(cfg.out.join("distortion.csv"))
            .map_err(|e| Error::Serde(e.to_string()))?;
        w.write_record(["container", "attack_id", "epsilon", "mean_l0", "mean_l2", "mean_linf"])
            .map_err(|e| Error::Serde(e.to_string()))?;
        for (name, meta, st) in &dist_rows {
            w.write_record([
                name.clone(),
                meta.attack_id.clone(),
                format!("{}", meta.epsilon),
                format!("{:.4}", st.mean_l0),
                format!("{:.6}", st.mean_l2),
                format!("{:.6}", st.mean_linf),
            ])
            .map_err(|e| Error::Serde(e.to_string()))?;
        }
        w.flush()?;
    }
    // logit-direction analysis: luring vs the other architectures
    let omega_sample = data.test.take(64.min(data.test.len()));
    let luring = &models.augmented[&MapperKind::Luring];
    let others: Vec<(String, &dyn Model)> = [MapperKind::Stack, MapperKind::Auto, MapperKind::Ce]
        .iter()
        .map(|k| (k.as_str().to_string(), &models.augmented[k] as &dyn Model))
        .collect();
    let classes: Vec<usize> = (0..models.target.n_classes()).collect();
    let rates = omega_dominance(
        models.target.as_ref(),
        luring,
        &others,
        &omega_sample.images,
        &classes,
    )?;
    write_omega_csv(cfg.out.join("omega_dominance.csv"), &rates)?;
    println!("analysis artifacts written to {}", cfg.out.display());
    Ok(())
}

fn cmd_toy(out: &PathBuf, seed: u64) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    // a 4-d task where the feature is robust at ε=0.2 but its amplified
    // composition is not
    let mu = Array1::from_vec(vec![1.0, 0.5, 0.0, 0.0]);
    let task = ToyTask::new(mu, 1.0, 0.2)?;
    let f = LinearFeature::new(Array1::from_vec(vec![1.0, 0.5, 0.0, 0.0]))?;
    let mapper = DiagonalMapper {
        scale: Array1::from_vec(vec![8.0, -1.0, 1.0, 1.0]),
    };
    let report = luring_demo(&task, &f, &mapper, task.epsilon, 10_000, seed)?;
    std::fs::write(out.join("luring_demo.json"), demo_report_json(&report)?)?;
    let composed = mapper.compose(&f);
    let mut rows = Vec::new();
    for (name, feat) in [("target_feature", &f), ("composed_feature", &composed)] {
        let rho = usefulness(feat, &task, 10_000, seed);
        let gamma = robust_usefulness(feat, &task, task.epsilon, 10_000, seed);
        let class = classify_feature(rho.value, gamma.value, 0.0, 0.0)?;
        rows.push((name.to_string(), rho, gamma, class));
    }
    luring_core::toy::write_feature_csv(out.join("features.csv"), &rows)?;
    println!(
        "toy demo: case {:?}, base gamma {:.3}, composed gamma {:.3}",
        report.case, report.base.gamma_closed_form, report.composed.gamma_closed_form
    );
    Ok(())
}

fn real_main() -> Result<(), Error> {
    let cli = Cli::parse();
    match &cli.command {
        Command::TrainBase(c) => cmd_train_base(c),
        Command::TrainMapper { common, variant } => cmd_train_mapper(common, variant),
        Command::Attack(c) => cmd_attack(c),
        Command::Evaluate(c) => cmd_evaluate(c),
        Command::Analyze(c) => cmd_analyze(c),
        Command::ToyFeatures { out, seed } => cmd_toy(out, *seed),
        Command::Report { out } => {
            let arts = harness::runner_report(out)?;
            for a in arts {
                println!("wrote {}", a.display());
            }
            Ok(())
        }
        Command::Run(c) => {
            let cfg = load_config(c)?;
            let manifest = harness::run(&cfg, c.verbose)?;
            println!(
                "run complete: {} stages, {} artifacts, manifest at {}",
                manifest.stages.len(),
                manifest.artifacts.len(),
                cfg.out.join("manifest.json").display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
