//! SPSA gradient-free attack: two-sided simultaneous-perturbation gradient
//! estimates of the margin loss, followed by projected sign steps. The
//! adversary only ever sees logits.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{project, sign, AttackResult};
use crate::error::{Error, Result};
use crate::models::Model;

/// Logit-only oracle surface exposed to the gradient-free adversary.
pub trait LogitsOracle: Sync {
    fn logits(&self, x: &Array2<f32>) -> Result<Array2<f32>>;
    fn n_classes(&self) -> usize;
}

impl<M: Model + ?Sized> LogitsOracle for M {
    fn logits(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        Model::logits(self, x)
    }
    fn n_classes(&self) -> usize {
        Model::n_classes(self)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpsaConfig {
    /// Two-sided perturbation radius δ.
    pub perturb_size: f32,
    /// Sign-step learning rate.
    pub lr: f32,
    pub iters: usize,
    /// Rademacher samples per gradient estimate.
    pub batch: usize,
}

impl Default for SpsaConfig {
    /// Learning rate 0.1, 100 iterations, batch 128, δ = 0.01.
    fn default() -> Self {
        SpsaConfig {
            perturb_size: 0.01,
            lr: 0.1,
            iters: 100,
            batch: 128,
        }
    }
}

/// Margin of the true class: `z_y - max_{j != y} z_j`. The attack descends
/// this value; once negative, the example is misclassified.
fn margin(logits: &Array2<f32>, y: usize) -> Array1<f32> {
    Array1::from_iter(logits.rows().into_iter().map(|row| {
        let mut other = f32::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if j != y && v > other {
                other = v;
            }
        }
        row[y] - other
    }))
}

/// Estimate the gradient of the margin at `x_row` with `batch` two-sided
/// Rademacher samples of radius `delta`.
pub fn spsa_gradient<O: LogitsOracle + ?Sized>(
    oracle: &O,
    x_row: &Array1<f32>,
    y: usize,
    delta: f32,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array1<f32>> {
    let d = x_row.len();
    let mut signs = Array2::<f32>::zeros((batch, d));
    for v in signs.iter_mut() {
        *v = if rng.random::<bool>() { 1.0 } else { -1.0 };
    }
    let mut queries = Array2::<f32>::zeros((2 * batch, d));
    for b in 0..batch {
        for j in 0..d {
            queries[[b, j]] = x_row[j] + delta * signs[[b, j]];
            queries[[batch + b, j]] = x_row[j] - delta * signs[[b, j]];
        }
    }
    let logits = oracle.logits(&queries)?;
    let f = margin(&logits, y);
    let mut grad = Array1::<f32>::zeros(d);
    for b in 0..batch {
        let df = (f[b] - f[batch + b]) / (2.0 * delta);
        for j in 0..d {
            // Rademacher entries are ±1, so 1/v = v
            grad[j] += df * signs[[b, j]];
        }
    }
    grad.mapv_inplace(|v| v / batch as f32);
    Ok(grad)
}

/// Run the SPSA attack on a batch. Each example is attacked independently;
/// the query ledger counts `2 * batch * iters` oracle calls per example.
pub fn spsa<O: LogitsOracle + ?Sized>(
    oracle: &O,
    x: &Array2<f32>,
    y: &[usize],
    epsilon: f32,
    cfg: &SpsaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult> {
    if y.len() != x.nrows() {
        return Err(Error::Shape("label count mismatch".into()));
    }
    let mut x_adv = x.clone();
    for (i, &yi) in y.iter().enumerate() {
        let mut cur = x_adv.row(i).to_owned();
        let clean = x.row(i).to_owned().insert_axis(ndarray::Axis(0));
        for _ in 0..cfg.iters {
            let g = spsa_gradient(oracle, &cur, yi, cfg.perturb_size, cfg.batch, rng)?;
            for (c, &gv) in cur.iter_mut().zip(g.iter()) {
                *c -= cfg.lr * sign(gv);
            }
            let mut as2 = cur.clone().insert_axis(ndarray::Axis(0));
            project(&mut as2, &clean, epsilon);
            cur = as2.remove_axis(ndarray::Axis(0));
        }
        x_adv.row_mut(i).assign(&cur);
    }
    Ok(AttackResult {
        x_clean: x.clone(),
        x_adv,
        y: y.to_vec(),
        queries: 2 * cfg.batch * cfg.iters,
        attack_id: "spsa".into(),
    })
}
