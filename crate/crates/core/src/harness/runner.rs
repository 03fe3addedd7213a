//! Experiment orchestration: dataset ingestion, training of the target and
//! the four mapper variants, attack grids, metric computation, and report
//! emission, all recorded in a run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{AttackSpec, ExperimentConfig, MapperKind, MimWSpec};
use super::plots::{render_dr_iar_plot, Series};
use crate::attacks::{
    dim, dim_ti, fgsm, mim, mim_l2, mim_ti, mim_w, mim_w_grid, pgd, save_attack_result, spsa,
    AttackBudget, AttackResult, ImageShape,
};
use crate::data::{ingest_mnist, Dataset, MnistData};
use crate::error::{Error, Result};
use crate::metrics::{
    characterization_protocol, defense_protocol, write_reports_csv, CharacterizationCell,
    TransferReport,
};
use crate::models::{
    compose, mnist_cnn, mnist_mapper, save_classifier, save_mapper, AugmentedModel, Classifier,
    InputMapper, Model,
};
use crate::nn::Network;
use crate::train::{
    train_auto, train_ce, train_classifier, train_luring, train_stack, EvalHook, FitConfig,
    LuringConfig, TrainLog, TrainOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub detail: Option<String>,
    pub seconds: f64,
}

/// Manifest of one experiment run; written after every stage so failures
/// preserve partial results.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<String>,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    fn new(config_hash: String, seed: u64) -> Self {
        RunManifest {
            config_hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            started_unix: now_unix(),
            finished_unix: None,
            stages: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn add_artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }
}

/// The target plus the four trained augmented models.
pub struct TrainedModels {
    pub target: Arc<Classifier>,
    pub augmented: BTreeMap<MapperKind, AugmentedModel>,
    pub logs: Vec<(String, TrainLog)>,
}

fn fresh_mapper(cfg: &ExperimentConfig, seed: u64) -> InputMapper {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    InputMapper::new(
        Network::from_spec(&mnist_mapper(), &mut rng),
        &cfg.mapper_arch,
    )
}

/// Train the base classifier on the training split.
pub fn train_base_model(
    cfg: &ExperimentConfig,
    data: &MnistData,
    verbose: bool,
) -> Result<(Classifier, TrainLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Classifier::new(Network::from_spec(&mnist_cnn(), &mut rng), &cfg.base_arch, 10);
    let eval = data.test.take(cfg.dataset.epoch_eval_examples);
    let fit = FitConfig::new(
        cfg.base.epochs,
        cfg.base.batch_size,
        cfg.base.schedule(),
        cfg.seed,
    );
    let opts = TrainOptions {
        eval: Some(EvalHook {
            x: &eval.images,
            y: &eval.labels,
            target: None,
        }),
        early_stop: cfg
            .base
            .early_stop
            .as_ref()
            .map(|e| e.to_early_stop())
            .transpose()?,
        verbose,
    };
    let train = subset(cfg, &data.train);
    let log = train_classifier(&mut model, &train.images, &train.labels, &fit, &opts)?;
    Ok((model, log))
}

fn subset(cfg: &ExperimentConfig, ds: &Dataset) -> Dataset {
    if cfg.dataset.train_subset > 0 {
        ds.take(cfg.dataset.train_subset)
    } else {
        ds.clone()
    }
}

/// Train one mapper variant against the (frozen) target.
pub fn train_mapper_variant(
    cfg: &ExperimentConfig,
    kind: MapperKind,
    target: &Arc<Classifier>,
    data: &MnistData,
    seed: u64,
    verbose: bool,
) -> Result<(AugmentedModel, TrainLog)> {
    let spec = cfg.train_spec(kind);
    let train = subset(cfg, &data.train);
    let eval = data.test.take(cfg.dataset.epoch_eval_examples);
    let mut mapper = fresh_mapper(cfg, seed ^ 0x9e37_79b9_7f4a_7c15);
    let opts = TrainOptions {
        eval: Some(EvalHook {
            x: &eval.images,
            y: &eval.labels,
            target: Some(target),
        }),
        early_stop: spec
            .early_stop
            .as_ref()
            .map(|e| e.to_early_stop())
            .transpose()?,
        verbose,
    };
    let log = match kind {
        MapperKind::Luring => {
            let lcfg = LuringConfig {
                lambda: spec.lambda.unwrap_or(1.0),
                epochs: spec.epochs,
                batch_size: spec.batch_size,
                lr: spec.schedule(),
                seed,
            };
            train_luring(&mut mapper, target, &train.images, &lcfg, &opts)?
        }
        MapperKind::Ce => {
            let fit = FitConfig::new(spec.epochs, spec.batch_size, spec.schedule(), seed);
            train_ce(&mut mapper, target, &train.images, &fit, &opts)?
        }
        MapperKind::Auto => {
            let fit = FitConfig::new(spec.epochs, spec.batch_size, spec.schedule(), seed);
            train_auto(&mut mapper, &train.images, &fit, &opts)?
        }
        MapperKind::Stack => {
            let fit = FitConfig::new(spec.epochs, spec.batch_size, spec.schedule(), seed);
            let mut inner = (**target).clone();
            inner.trainable = true;
            let log = train_stack(
                &mut mapper,
                &mut inner,
                &train.images,
                &train.labels,
                &fit,
                &opts,
            )?;
            let t = compose(mapper, Arc::new(inner.frozen()))?;
            return Ok((t, log));
        }
    };
    let t = compose(mapper, Arc::clone(target))?;
    Ok((t, log))
}

/// Train the target and all four mapper variants.
pub fn train_models(
    cfg: &ExperimentConfig,
    data: &MnistData,
    verbose: bool,
) -> Result<TrainedModels> {
    let (base, base_log) = train_base_model(cfg, data, verbose)?;
    let target = Arc::new(base.frozen());
    let mut augmented = BTreeMap::new();
    let mut logs = vec![("base".to_string(), base_log)];
    for kind in MapperKind::ALL {
        if verbose {
            eprintln!("training mapper variant `{}`", kind.as_str());
        }
        let (t, log) = train_mapper_variant(cfg, kind, &target, data, cfg.seed, verbose)?;
        logs.push((kind.as_str().to_string(), log));
        augmented.insert(kind, t);
    }
    Ok(TrainedModels {
        target,
        augmented,
        logs,
    })
}

/// Build the crafting closure for one attack spec at one ε.
pub fn craft_closure<'a>(
    spec: &'a AttackSpec,
    epsilon: f32,
    geom: ImageShape,
) -> impl Fn(&dyn Model, &Array2<f32>, &[usize], u64) -> Result<AttackResult> + 'a {
    move |model, x, y, seed| {
        let budget = AttackBudget {
            epsilon,
            steps: spec.steps,
            step_size: spec.step_size,
            momentum: spec.momentum,
            l2_bound: spec.l2_bound,
            diversity_p: spec.diversity_p,
            kernel: spec.kernel,
            random_start: spec.random_start,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match spec.kind.as_str() {
            "fgsm" => fgsm(model, x, y, epsilon),
            "pgd" => pgd(model, x, y, &budget, &mut rng),
            "mim" => mim(model, x, y, &budget, &mut rng),
            "mim_l2" => mim_l2(model, x, y, &budget, &mut rng),
            "dim" => dim(model, x, y, &budget, geom, &mut rng),
            "mim_ti" => mim_ti(model, x, y, &budget, geom, &mut rng),
            "dim_ti" => dim_ti(model, x, y, &budget, geom, &mut rng),
            "spsa" => {
                let scfg = spec.spsa.clone().unwrap_or_default();
                spsa(model, x, y, epsilon, &scfg, &mut rng)
            }
            other => Err(Error::Config(format!("unknown attack kind `{other}`"))),
        }
    }
}

fn mim_w_closure<'a>(
    spec: &'a MimWSpec,
    epsilon: f32,
    geom: ImageShape,
    target: &'a dyn Model,
) -> impl Fn(&dyn Model, &Array2<f32>, &[usize], u64) -> Result<AttackResult> + 'a {
    move |model, x, y, seed| {
        let grid = mim_w_grid(
            epsilon,
            spec.steps,
            spec.step_size,
            spec.diversity_p,
            &spec.kernels,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut res, chosen) = mim_w(model, target, x, y, &grid, geom, &mut rng)?;
        res.attack_id = format!("mim_w:{chosen}");
        Ok(res)
    }
}

/// Inputs for the characterization protocol: test examples correctly
/// classified by the target and by every augmented model.
pub fn common_correct_eval(
    models: &TrainedModels,
    test: &Dataset,
    n_eval: usize,
) -> Result<(Array2<f32>, Vec<usize>)> {
    let pm = models.target.predict(&test.images)?;
    let mut keep: Vec<bool> = pm
        .iter()
        .zip(&test.labels)
        .map(|(p, y)| p == y)
        .collect();
    for t in models.augmented.values() {
        let pt = t.predict(&test.images)?;
        for (k, (p, y)) in pt.iter().zip(&test.labels).enumerate() {
            if p != y {
                keep[k] = false;
            }
        }
    }
    let idx: Vec<usize> = (0..test.len()).filter(|&i| keep[i]).take(n_eval).collect();
    if idx.is_empty() {
        return Err(Error::Domain(
            "no test example is correctly classified by all models".into(),
        ));
    }
    let xs = test.images.select(ndarray::Axis(0), &idx);
    let ys = idx.iter().map(|&i| test.labels[i]).collect();
    Ok((xs, ys))
}

#[derive(Debug, Clone, Serialize)]
struct CharacterizationRow {
    attack_id: String,
    epsilon: f32,
    model: String,
    dr: Option<f64>,
    iar: Option<f64>,
    n_common: usize,
}

fn characterization_rows(
    cells: &[CharacterizationCell],
    attack_id: &str,
    epsilon: f32,
) -> Vec<CharacterizationRow> {
    cells
        .iter()
        .map(|c| CharacterizationRow {
            attack_id: attack_id.to_string(),
            epsilon,
            model: c.model_name.clone(),
            dr: c.dr.value(),
            iar: c.iar.value(),
            n_common: c.n_common,
        })
        .collect()
}

fn write_characterization_csv(path: &Path, rows: &[CharacterizationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["attack_id", "epsilon", "model", "dr", "iar", "n_common"])?;
    for r in rows {
        w.write_record([
            r.attack_id.clone(),
            format!("{}", r.epsilon),
            r.model.clone(),
            r.dr.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NaN".into()),
            r.iar.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NaN".into()),
            r.n_common.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn stage<T>(
    manifest: &mut RunManifest,
    dir: &Path,
    name: &str,
    f: impl FnOnce(&mut RunManifest) -> Result<T>,
) -> Result<T> {
    let start = std::time::Instant::now();
    let out = f(manifest);
    let rec = StageRecord {
        name: name.to_string(),
        status: if out.is_ok() {
            StageStatus::Ok
        } else {
            StageStatus::Failed
        },
        detail: out.as_ref().err().map(|e| e.to_string()),
        seconds: start.elapsed().as_secs_f64(),
    };
    manifest.stages.push(rec);
    manifest.write(dir)?;
    out
}

/// Execute the full pipeline described by a config. Deterministic given the
/// config and seed: reruns produce byte-identical metric CSVs.
pub fn run(cfg: &ExperimentConfig, verbose: bool) -> Result<RunManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    let canonical = cfg.canonical_toml()?;
    let config_hash = format!("{:x}", Sha256::digest(canonical.as_bytes()));
    let resolved = cfg.out.join("config.resolved.toml");
    std::fs::write(&resolved, &canonical)?;
    let mut manifest = RunManifest::new(config_hash, cfg.seed);
    manifest.add_artifact(&resolved);
    let dir = cfg.out.clone();

    let data = stage(&mut manifest, &dir, "ingest", |_| {
        ingest_mnist(&cfg.dataset.path)
    })?;

    let models = stage(&mut manifest, &dir, "train", |m| {
        let models = train_models(cfg, &data, verbose)?;
        let base_path = dir.join("base.ckpt");
        save_classifier(&models.target, &base_path)?;
        m.add_artifact(&base_path);
        for (kind, t) in &models.augmented {
            let p = dir.join(format!("{}.ckpt", kind.as_str()));
            save_mapper(&t.mapper, &p)?;
            m.add_artifact(&p);
            if *kind == MapperKind::Stack {
                let sp = dir.join("stack_inner.ckpt");
                save_classifier(&t.target, &sp)?;
                m.add_artifact(&sp);
            }
        }
        for (name, log) in &models.logs {
            let p = dir.join(format!("train_{name}.csv"));
            log.write_csv(&p)?;
            m.add_artifact(&p);
        }
        Ok(models)
    })?;

    let geom = ImageShape {
        h: data.test.rows,
        w: data.test.cols,
    };

    let char_rows = stage(&mut manifest, &dir, "characterization", |m| {
        let (xs, ys) = common_correct_eval(&models, &data.test, cfg.dataset.eval_examples)?;
        let named: Vec<(String, &dyn Model)> = MapperKind::ALL
            .iter()
            .map(|k| {
                (
                    k.as_str().to_string(),
                    &models.augmented[k] as &dyn Model,
                )
            })
            .collect();
        let mut rows = Vec::new();
        for (ai, aspec) in cfg.attacks.iter().enumerate() {
            if aspec.kind == "spsa" {
                continue;
            }
            for (ei, &eps) in aspec.epsilons.iter().enumerate() {
                let craft = craft_closure(aspec, eps, geom);
                let cells = characterization_protocol(
                    models.target.as_ref(),
                    &named,
                    &xs,
                    &ys,
                    &craft,
                    cfg.seed
                        .wrapping_add(1000 * ai as u64)
                        .wrapping_add(ei as u64),
                )?;
                rows.extend(characterization_rows(&cells, &aspec.kind, eps));
                if verbose {
                    eprintln!("characterization {} eps={eps} done", aspec.kind);
                }
            }
        }
        let p = dir.join("characterization.csv");
        write_characterization_csv(&p, &rows)?;
        m.add_artifact(&p);
        let pj = dir.join("characterization.json");
        std::fs::write(&pj, serde_json::to_string_pretty(&rows)?)?;
        m.add_artifact(&pj);
        Ok(rows)
    })?;
    let _ = char_rows;

    stage(&mut manifest, &dir, "defense", |m| {
        let mut labeled: Vec<(String, TransferReport)> = Vec::new();
        for (kind, t) in &models.augmented {
            // gradient-free attacks from the attack list
            for (ai, aspec) in cfg.attacks.iter().enumerate() {
                if aspec.kind != "spsa" {
                    continue;
                }
                for (ei, &eps) in aspec.epsilons.iter().enumerate() {
                    let craft = craft_closure(aspec, eps, geom);
                    let report = defense_protocol(
                        models.target.as_ref(),
                        t,
                        &data.test.images,
                        &data.test.labels,
                        cfg.dataset.eval_examples,
                        eps,
                        &craft,
                        cfg.seed
                            .wrapping_add(7000 * ai as u64)
                            .wrapping_add(ei as u64),
                    )?;
                    labeled.push((kind.as_str().to_string(), report));
                }
            }
            // the worst-case gradient-based grid
            if let Some(mw) = &cfg.mim_w {
                for (ei, &eps) in mw.epsilons.iter().enumerate() {
                    let craft = mim_w_closure(mw, eps, geom, models.target.as_ref());
                    let report = defense_protocol(
                        models.target.as_ref(),
                        t,
                        &data.test.images,
                        &data.test.labels,
                        cfg.dataset.eval_examples,
                        eps,
                        &craft,
                        cfg.seed.wrapping_add(9000 + ei as u64),
                    )?;
                    if verbose {
                        eprintln!(
                            "defense mim_w {} eps={eps}: ac_m={:.3} dac={:.3} ({})",
                            kind.as_str(),
                            report.ac_m,
                            report.dac,
                            report.attack_id
                        );
                    }
                    labeled.push((kind.as_str().to_string(), report));
                }
            }
        }
        let p = dir.join("defense.csv");
        write_reports_csv(&p, &labeled)?;
        m.add_artifact(&p);
        let pj = dir.join("defense.json");
        std::fs::write(&pj, serde_json::to_string_pretty(&labeled)?)?;
        m.add_artifact(&pj);
        Ok(())
    })?;

    if cfg.persist_adversarial {
        stage(&mut manifest, &dir, "persist-adversarial", |m| {
            let (xs, ys) = common_correct_eval(&models, &data.test, cfg.dataset.eval_examples)?;
            for (kind, t) in &models.augmented {
                for (ai, aspec) in cfg.attacks.iter().enumerate() {
                    for (ei, &eps) in aspec.epsilons.iter().enumerate() {
                        let craft = craft_closure(aspec, eps, geom);
                        let seed = cfg
                            .seed
                            .wrapping_add(1000 * ai as u64)
                            .wrapping_add(ei as u64);
                        let res = craft(t, &xs, &ys, seed)?;
                        let p = dir.join(format!(
                            "adv_{}_{}_eps{eps}.bin",
                            kind.as_str(),
                            aspec.kind
                        ));
                        save_attack_result(&res, eps, seed, &p)?;
                        m.add_artifact(&p);
                    }
                }
            }
            Ok(())
        })?;
    }

    stage(&mut manifest, &dir, "report", |m| {
        let arts = report(&dir)?;
        for a in arts {
            m.add_artifact(&a);
        }
        Ok(())
    })?;

    manifest.finished_unix = Some(now_unix());
    manifest.write(&dir)?;
    Ok(manifest)
}

const MODEL_COLORS: [(&str, &str); 4] = [
    ("stack", "#1f77b4"),
    ("auto", "#2ca02c"),
    ("ce", "#ff7f0e"),
    ("luring", "#d62728"),
];

/// Re-render plots and summary tables from a finished (or partial) run
/// directory.
pub fn report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let char_csv = run_dir.join("characterization.csv");
    if !char_csv.exists() {
        return Err(Error::Config(format!(
            "{}: no characterization.csv; not a run directory",
            run_dir.display()
        )));
    }
    let mut rows: Vec<(String, f64, String, Option<f64>, Option<f64>)> = Vec::new();
    let mut rdr = csv::Reader::from_path(&char_csv)?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Serde(e.to_string()))?;
        let parse_rate = |s: &str| -> Option<f64> {
            let v: f64 = s.parse().ok()?;
            v.is_finite().then_some(v)
        };
        rows.push((
            rec[0].to_string(),
            rec[1].parse().unwrap_or(0.0),
            rec[2].to_string(),
            parse_rate(&rec[3]),
            parse_rate(&rec[4]),
        ));
    }
    let mut attacks: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    attacks.sort();
    attacks.dedup();
    let mut artifacts = Vec::new();
    for attack in &attacks {
        let mut series = Vec::new();
        for (model, color) in MODEL_COLORS {
            let dr_pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| &r.0 == attack && r.2 == model)
                .filter_map(|r| r.3.map(|v| (r.1, v)))
                .collect();
            let iar_pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| &r.0 == attack && r.2 == model)
                .filter_map(|r| r.4.map(|v| (r.1, v)))
                .collect();
            series.push(Series {
                label: format!("{model} DR"),
                color: color.to_string(),
                dashed: false,
                points: dr_pts,
            });
            series.push(Series {
                label: format!("{model} IAR"),
                color: color.to_string(),
                dashed: true,
                points: iar_pts,
            });
        }
        let p = run_dir.join(format!("plot_{attack}.svg"));
        render_dr_iar_plot(
            &format!("Disagreement (solid) and inefficiency (dashed): {attack}"),
            &series,
            &p,
        )?;
        artifacts.push(p);
    }
    // plain-text metric table from the defense CSV, if present
    let defense_csv = run_dir.join("defense.csv");
    if defense_csv.exists() {
        let mut rdr = csv::Reader::from_path(&defense_csv)?;
        let mut table = String::from(
            "architecture  attack              eps    ac_mop   ac_m    dac     dr      iar\n",
        );
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Serde(e.to_string()))?;
            table.push_str(&format!(
                "{:<13} {:<19} {:<6} {:<8} {:<7} {:<7} {:<7} {:<7}\n",
                &rec[0], &rec[8], &rec[9], &rec[3], &rec[4], &rec[5], &rec[1], &rec[2]
            ));
        }
        let p = run_dir.join("defense_table.txt");
        std::fs::write(&p, table)?;
        artifacts.push(p);
    }
    Ok(artifacts)
}
