//! Transfer-evaluation quantities (DR, IAR, AC, DAC, agreement) and the two
//! protocols built on them: the characterization protocol (common-success
//! transfer of four augmented models back to the target) and the defense
//! protocol (attack the exposed model, measure the hidden target).

use ndarray::Array2;
use serde::Serialize;

use crate::attacks::AttackResult;
use crate::error::{Error, Result};
use crate::models::Model;

/// A rate that may be undefined (empty denominator); undefined rates carry
/// their reason and are never silently reported as zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Rate {
    Defined(f64),
    Undefined { reason: String },
}

impl Rate {
    pub fn value(&self) -> Option<f64> {
        match self {
            Rate::Defined(v) => Some(*v),
            Rate::Undefined { .. } => None,
        }
    }

    /// CSV cell: the number, or literal `NaN` when undefined.
    pub fn csv_cell(&self) -> String {
        match self {
            Rate::Defined(v) => format!("{v:.6}"),
            Rate::Undefined { .. } => "NaN".into(),
        }
    }
}

/// Per-example outcome masks of one adversarial batch evaluated on both the
/// augmented model `T` and the hidden target `M`.
#[derive(Debug, Clone)]
pub struct EvalMasks {
    pub pred_t: Vec<usize>,
    pub pred_m: Vec<usize>,
    pub y: Vec<usize>,
    pub success_t: Vec<bool>,
    pub success_m: Vec<bool>,
    pub disagree: Vec<bool>,
}

impl EvalMasks {
    pub fn from_predictions(pred_t: Vec<usize>, pred_m: Vec<usize>, y: Vec<usize>) -> Result<Self> {
        if pred_t.len() != y.len() || pred_m.len() != y.len() {
            return Err(Error::Shape("mask length mismatch".into()));
        }
        let success_t = pred_t.iter().zip(&y).map(|(p, t)| p != t).collect();
        let success_m = pred_m.iter().zip(&y).map(|(p, t)| p != t).collect();
        let disagree = pred_t.iter().zip(&pred_m).map(|(a, b)| a != b).collect();
        Ok(EvalMasks {
            pred_t,
            pred_m,
            y,
            success_t,
            success_m,
            disagree,
        })
    }

    /// Evaluate an attack result against the two models.
    pub fn evaluate(t: &dyn Model, m: &dyn Model, res: &AttackResult) -> Result<Self> {
        let pred_t = t.predict(&res.x_adv)?;
        let pred_m = m.predict(&res.x_adv)?;
        EvalMasks::from_predictions(pred_t, pred_m, res.y.clone())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_successful_t(&self) -> usize {
        self.success_t.iter().filter(|&&s| s).count()
    }
}

/// Disagreement rate: among adversarial examples fooling `T`, the fraction
/// where `M` and `T` predict different labels.
pub fn disagreement_rate(masks: &EvalMasks) -> Rate {
    let denom = masks.n_successful_t();
    if denom == 0 {
        return Rate::Undefined {
            reason: "no adversarial example fools the augmented model".into(),
        };
    }
    let num = masks
        .success_t
        .iter()
        .zip(&masks.disagree)
        .filter(|(&s, &d)| s && d)
        .count();
    Rate::Defined(num as f64 / denom as f64)
}

/// Inefficient adversarial examples rate: among adversarial examples fooling
/// `T`, the fraction still correctly classified by `M`.
pub fn inefficient_rate(masks: &EvalMasks) -> Rate {
    let denom = masks.n_successful_t();
    if denom == 0 {
        return Rate::Undefined {
            reason: "no adversarial example fools the augmented model".into(),
        };
    }
    let num = masks
        .success_t
        .iter()
        .zip(masks.pred_m.iter().zip(&masks.y))
        .filter(|(&s, (p, t))| s && p == t)
        .count();
    Rate::Defined(num as f64 / denom as f64)
}

/// Classical adversarial accuracy: fraction of attacked examples a model
/// still classifies correctly.
pub fn adversarial_accuracy(preds: &[usize], y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    preds.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

/// Which denominator the detection adversarial accuracy uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DacDenominator {
    /// Every attacked example, read literally from the definition.
    #[default]
    AllAttacked,
    /// Only examples that fool the augmented model.
    TSuccessful,
}

/// Detection adversarial accuracy: one minus the fraction of attacked
/// examples where both models agree on a wrong label (those are neither
/// detected by disagreement nor harmless to the target).
pub fn dac(masks: &EvalMasks) -> f64 {
    dac_with(masks, DacDenominator::AllAttacked).value().unwrap_or(0.0)
}

pub fn dac_with(masks: &EvalMasks, denom: DacDenominator) -> Rate {
    let undetected_and_wrong = |i: usize| -> bool {
        masks.pred_t[i] == masks.pred_m[i] && masks.pred_m[i] != masks.y[i]
    };
    match denom {
        DacDenominator::AllAttacked => {
            let n = masks.len();
            if n == 0 {
                return Rate::Undefined {
                    reason: "empty adversarial set".into(),
                };
            }
            let bad = (0..n).filter(|&i| undetected_and_wrong(i)).count();
            Rate::Defined(1.0 - bad as f64 / n as f64)
        }
        DacDenominator::TSuccessful => {
            let idx: Vec<usize> = (0..masks.len()).filter(|&i| masks.success_t[i]).collect();
            if idx.is_empty() {
                return Rate::Undefined {
                    reason: "no adversarial example fools the augmented model".into(),
                };
            }
            let bad = idx.iter().filter(|&&i| undetected_and_wrong(i)).count();
            Rate::Defined(1.0 - bad as f64 / idx.len() as f64)
        }
    }
}

pub use crate::models::agreement;

/// Full metric row for one (attack, ε) cell.
#[derive(Debug, Clone, Serialize)]
pub struct TransferReport {
    pub attack_id: String,
    pub epsilon: f32,
    pub seed: u64,
    pub dr: Rate,
    pub iar: Rate,
    pub ac_mop: f64,
    pub ac_m: f64,
    pub dac: f64,
    pub agreement: f64,
    pub n_attacked: usize,
    pub n_successful_t: usize,
}

impl TransferReport {
    pub fn from_masks(
        masks: &EvalMasks,
        attack_id: impl Into<String>,
        epsilon: f32,
        seed: u64,
        agreement: f64,
    ) -> Self {
        TransferReport {
            attack_id: attack_id.into(),
            epsilon,
            seed,
            dr: disagreement_rate(masks),
            iar: inefficient_rate(masks),
            ac_mop: adversarial_accuracy(&masks.pred_t, &masks.y),
            ac_m: adversarial_accuracy(&masks.pred_m, &masks.y),
            dac: dac(masks),
            agreement,
            n_attacked: masks.len(),
            n_successful_t: masks.n_successful_t(),
        }
    }
}

/// Fixed CSV schema shared by all report files.
pub const REPORT_COLUMNS: [&str; 10] = [
    "dr",
    "iar",
    "ac_mop",
    "ac_m",
    "dac",
    "agreement",
    "n",
    "attack_id",
    "epsilon",
    "seed",
];

/// Write reports as CSV rows, one per (attack, ε, architecture) cell. The
/// caller may prepend an extra labeling column via `label`.
pub fn write_reports_csv(
    path: impl AsRef<std::path::Path>,
    labeled: &[(String, TransferReport)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["architecture"];
    header.extend(REPORT_COLUMNS);
    w.write_record(&header)?;
    for (label, r) in labeled {
        w.write_record([
            label.clone(),
            r.dr.csv_cell(),
            r.iar.csv_cell(),
            format!("{:.6}", r.ac_mop),
            format!("{:.6}", r.ac_m),
            format!("{:.6}", r.dac),
            format!("{:.6}", r.agreement),
            r.n_attacked.to_string(),
            r.attack_id.clone(),
            format!("{}", r.epsilon),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of the characterization protocol for one augmented model.
#[derive(Debug, Clone, Serialize)]
pub struct CharacterizationCell {
    pub model_name: String,
    pub dr: Rate,
    pub iar: Rate,
    /// Size of the common success subset the rates were computed on.
    pub n_common: usize,
}

/// Crafting callback: attack the given exposed model on `(x, y)` using the
/// given seed, returning the adversarial batch.
pub type CraftFn<'a> =
    dyn Fn(&dyn Model, &Array2<f32>, &[usize], u64) -> Result<AttackResult> + 'a;

/// Characterization protocol: craft adversarial examples on each augmented
/// model, keep the indices where all of them are fooled by their own
/// adversarial batch, and compute DR/IAR per model on that common subset.
pub fn characterization_protocol(
    target: &dyn Model,
    augmented: &[(String, &dyn Model)],
    x: &Array2<f32>,
    y: &[usize],
    craft: &CraftFn,
    seed: u64,
) -> Result<Vec<CharacterizationCell>> {
    if augmented.is_empty() {
        return Err(Error::Config("characterization needs at least one model".into()));
    }
    let mut per_model: Vec<(AttackResult, Vec<usize>)> = Vec::with_capacity(augmented.len());
    let mut common: Vec<bool> = vec![true; y.len()];
    for (k, (_, t)) in augmented.iter().enumerate() {
        let res = craft(*t, x, y, seed.wrapping_add(k as u64))?;
        let pred_t = t.predict(&res.x_adv)?;
        for (i, (p, t_lab)) in pred_t.iter().zip(y).enumerate() {
            if p == t_lab {
                common[i] = false;
            }
        }
        per_model.push((res, pred_t));
    }
    let keep: Vec<usize> = (0..y.len()).filter(|&i| common[i]).collect();
    let mut out = Vec::with_capacity(augmented.len());
    for ((name, _), (res, pred_t)) in augmented.iter().zip(&per_model) {
        if keep.is_empty() {
            out.push(CharacterizationCell {
                model_name: name.clone(),
                dr: Rate::Undefined {
                    reason: "empty common success subset".into(),
                },
                iar: Rate::Undefined {
                    reason: "empty common success subset".into(),
                },
                n_common: 0,
            });
            continue;
        }
        let x_adv_sub = res.x_adv.select(ndarray::Axis(0), &keep);
        let pred_m = target.predict(&x_adv_sub)?;
        let pred_t_sub: Vec<usize> = keep.iter().map(|&i| pred_t[i]).collect();
        let y_sub: Vec<usize> = keep.iter().map(|&i| y[i]).collect();
        let masks = EvalMasks::from_predictions(pred_t_sub, pred_m, y_sub)?;
        out.push(CharacterizationCell {
            model_name: name.clone(),
            dr: disagreement_rate(&masks),
            iar: inefficient_rate(&masks),
            n_common: keep.len(),
        });
    }
    Ok(out)
}

/// Pick up to `n_eval` test examples that both models classify correctly.
pub fn select_correctly_classified(
    target: &dyn Model,
    t: &dyn Model,
    x: &Array2<f32>,
    y: &[usize],
    n_eval: usize,
) -> Result<(Array2<f32>, Vec<usize>)> {
    let pm = target.predict(x)?;
    let pt = t.predict(x)?;
    let idx: Vec<usize> = (0..y.len())
        .filter(|&i| pm[i] == y[i] && pt[i] == y[i])
        .take(n_eval)
        .collect();
    let xs = x.select(ndarray::Axis(0), &idx);
    let ys = idx.iter().map(|&i| y[i]).collect();
    Ok((xs, ys))
}

/// Defense protocol: filter to inputs correctly classified by both models,
/// craft adversarial examples on the exposed model `t`, and measure the
/// transfer metrics against the hidden target.
#[allow(clippy::too_many_arguments)]
pub fn defense_protocol(
    target: &dyn Model,
    t: &dyn Model,
    x_test: &Array2<f32>,
    y_test: &[usize],
    n_eval: usize,
    epsilon: f32,
    craft: &CraftFn,
    seed: u64,
) -> Result<TransferReport> {
    let (xs, ys) = select_correctly_classified(target, t, x_test, y_test, n_eval)?;
    if ys.is_empty() {
        return Err(Error::Domain(
            "no test example is correctly classified by both models".into(),
        ));
    }
    let res = craft(t, &xs, &ys, seed)?;
    res.check_budget(epsilon)?;
    let masks = EvalMasks::evaluate(t, target, &res)?;
    let agree = agreement(target, t, &xs, &ys)?;
    Ok(TransferReport::from_masks(
        &masks,
        res.attack_id.clone(),
        epsilon,
        seed,
        agree,
    ))
}
