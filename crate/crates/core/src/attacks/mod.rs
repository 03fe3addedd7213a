//! Untargeted adversarial attacks under an ℓ∞ budget: FGSM, PGD, MIM and its
//! ℓ2 / diverse-input / translation-invariant variants, the gradient-free
//! SPSA attack, and the MIM-W worst-case selector.
//!
//! All attacks operate on flat `[N, d]` batches in `[0,1]` and guarantee
//! `‖x_adv - x_clean‖∞ <= ε` and `x_adv ∈ [0,1]` on output.

mod container;
mod spsa;
mod ti;

pub use container::{load_attack_result, save_attack_result, AttackMeta};
pub use spsa::{spsa, LogitsOracle, SpsaConfig};
pub use ti::{gaussian_kernel, ti_gradient};

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{GradObjective, Model};

/// Perturbation budget and iteration parameters of an attack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackBudget {
    /// ℓ∞ radius in pixel units.
    pub epsilon: f32,
    pub steps: usize,
    pub step_size: f32,
    /// Momentum decay μ (MIM family).
    pub momentum: f32,
    /// ℓ2 radius for the MIM-L2 variant.
    pub l2_bound: Option<f32>,
    /// Probability of the diverse-input transform (DIM family).
    pub diversity_p: f64,
    /// Kernel size for translation-invariant gradient smoothing; 1 disables.
    pub kernel: usize,
    /// Uniform random start inside the ε-ball (PGD).
    pub random_start: bool,
}

impl AttackBudget {
    /// Iterated-attack defaults: 1000 steps of size 0.01 with μ = 1.
    pub fn new(epsilon: f32) -> Self {
        AttackBudget {
            epsilon,
            steps: 1000,
            step_size: 0.01,
            momentum: 1.0,
            l2_bound: None,
            diversity_p: 1.0,
            kernel: 1,
            random_start: true,
        }
    }

    pub fn with_steps(mut self, steps: usize, step_size: f32) -> Self {
        self.steps = steps;
        self.step_size = step_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must be in [0,1), got {}",
                self.epsilon
            )));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.step_size <= 0.0 {
            return Err(Error::Config("step size must be positive".into()));
        }
        if self.kernel == 0 {
            return Err(Error::Config("kernel size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Spatial geometry of flat rows, needed by the DIM transform and TI
/// smoothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub h: usize,
    pub w: usize,
}

/// Paired clean/adversarial batch produced by one attack run.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub x_clean: Array2<f32>,
    pub x_adv: Array2<f32>,
    pub y: Vec<usize>,
    /// Oracle queries per example (gradient-free attacks only).
    pub queries: usize,
    pub attack_id: String,
}

impl AttackResult {
    /// Check the budget invariant `‖x_adv-x_clean‖∞ <= ε + 1e-6` and
    /// `x_adv ∈ [0,1]`.
    pub fn check_budget(&self, epsilon: f32) -> Result<()> {
        for (a, c) in self.x_adv.iter().zip(self.x_clean.iter()) {
            if (a - c).abs() > epsilon + 1e-6 {
                return Err(Error::Domain(format!(
                    "budget violated: |{a} - {c}| > {epsilon}"
                )));
            }
            if !(0.0..=1.0).contains(a) {
                return Err(Error::Domain(format!("pixel out of range: {a}")));
            }
        }
        Ok(())
    }
}

/// `sign` with `sign(0) = 0`.
#[inline]
pub fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamp `x_adv` into the ℓ∞ ε-ball around `x_clean` intersected with
/// `[0,1]`; the two box constraints commute and are fused.
pub fn project(x_adv: &mut Array2<f32>, x_clean: &Array2<f32>, epsilon: f32) {
    ndarray::Zip::from(x_adv).and(x_clean).for_each(|a, &c| {
        let lo = (c - epsilon).max(0.0);
        let hi = (c + epsilon).min(1.0);
        *a = a.clamp(lo, hi);
    });
}

fn ensure_finite(g: &Array2<f32>, what: &str) -> Result<()> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} gradient")));
    }
    Ok(())
}

/// Single-step fast gradient sign method on the cross-entropy loss.
pub fn fgsm(model: &dyn Model, x: &Array2<f32>, y: &[usize], epsilon: f32) -> Result<AttackResult> {
    let g = model.input_gradient(x, GradObjective::CrossEntropy { y })?;
    ensure_finite(&g, "fgsm")?;
    let mut x_adv = x.clone();
    ndarray::Zip::from(&mut x_adv)
        .and(&g)
        .for_each(|a, &gv| *a += epsilon * sign(gv));
    project(&mut x_adv, x, epsilon);
    Ok(AttackResult {
        x_clean: x.clone(),
        x_adv,
        y: y.to_vec(),
        queries: 0,
        attack_id: "fgsm".into(),
    })
}

/// Iterated FGSM with projection each step and optional uniform random start.
pub fn pgd(
    model: &dyn Model,
    x: &Array2<f32>,
    y: &[usize],
    budget: &AttackBudget,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult> {
    budget.validate()?;
    let mut x_adv = x.clone();
    if budget.random_start {
        for a in x_adv.iter_mut() {
            *a += rng.random_range(-budget.epsilon..=budget.epsilon);
        }
        project(&mut x_adv, x, budget.epsilon);
    }
    for _ in 0..budget.steps {
        let g = model.input_gradient(&x_adv, GradObjective::CrossEntropy { y })?;
        ensure_finite(&g, "pgd")?;
        ndarray::Zip::from(&mut x_adv)
            .and(&g)
            .for_each(|a, &gv| *a += budget.step_size * sign(gv));
        project(&mut x_adv, x, budget.epsilon);
    }
    Ok(AttackResult {
        x_clean: x.clone(),
        x_adv,
        y: y.to_vec(),
        queries: 0,
        attack_id: "pgd".into(),
    })
}

fn l1_norm(row: ArrayView1<f32>) -> f32 {
    row.iter().map(|v| v.abs()).sum()
}

fn l2_norm(row: ArrayView1<f32>) -> f32 {
    row.iter().map(|v| v * v).sum::<f32>().sqrt()
}

/// Which update geometry the momentum attack uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MomentumNorm {
    /// Sign steps inside the ℓ∞ ball (MIM, DIM, MIM-TI, DIM-TI).
    LInf,
    /// Unit-ℓ2 steps with per-step ℓ2 projection then a final ℓ∞ clip.
    L2,
}

#[allow(clippy::too_many_arguments)]
fn momentum_attack(
    model: &dyn Model,
    x: &Array2<f32>,
    y: &[usize],
    budget: &AttackBudget,
    norm: MomentumNorm,
    diversify_inputs: bool,
    geom: Option<ImageShape>,
    rng: &mut ChaCha8Rng,
    attack_id: &str,
) -> Result<AttackResult> {
    budget.validate()?;
    if (diversify_inputs || budget.kernel > 1) && geom.is_none() {
        return Err(Error::Config(
            "image geometry required for diverse-input or kernel-smoothed attacks".into(),
        ));
    }
    let mut x_adv = x.clone();
    let mut g_acc = Array2::<f32>::zeros(x.raw_dim());
    for _ in 0..budget.steps {
        let grad_input = if diversify_inputs {
            let geom = geom.expect("checked above");
            diversify(&x_adv, geom, budget.diversity_p, rng)
        } else {
            x_adv.clone()
        };
        let mut g = model.input_gradient(&grad_input, GradObjective::CrossEntropy { y })?;
        ensure_finite(&g, attack_id)?;
        if budget.kernel > 1 {
            g = ti_gradient(&g, geom.expect("checked above"), budget.kernel)?;
        }
        for (mut acc_row, g_row) in g_acc.rows_mut().into_iter().zip(g.rows()) {
            let norm_v = match norm {
                MomentumNorm::LInf => l1_norm(g_row.view()),
                MomentumNorm::L2 => l2_norm(g_row.view()),
            };
            for (a, &gv) in acc_row.iter_mut().zip(g_row.iter()) {
                let contrib = if norm_v > 0.0 { gv / norm_v } else { 0.0 };
                *a = budget.momentum * *a + contrib;
            }
        }
        match norm {
            MomentumNorm::LInf => {
                ndarray::Zip::from(&mut x_adv)
                    .and(&g_acc)
                    .for_each(|a, &gv| *a += budget.step_size * sign(gv));
                project(&mut x_adv, x, budget.epsilon);
            }
            MomentumNorm::L2 => {
                for (i, acc_row) in g_acc.rows().into_iter().enumerate() {
                    let n = l2_norm(acc_row.view());
                    if n > 0.0 {
                        for (j, &gv) in acc_row.iter().enumerate() {
                            x_adv[[i, j]] += budget.step_size * gv / n;
                        }
                    }
                }
                // per-step feasibility: ℓ2 ball of radius l2_bound and the
                // [0,1] box; the ℓ∞ clip happens once at the end
                if let Some(bound) = budget.l2_bound {
                    for i in 0..x_adv.nrows() {
                        let mut sq = 0.0f32;
                        for j in 0..x_adv.ncols() {
                            let d = x_adv[[i, j]] - x[[i, j]];
                            sq += d * d;
                        }
                        let n = sq.sqrt();
                        if n > bound {
                            let s = bound / n;
                            for j in 0..x_adv.ncols() {
                                x_adv[[i, j]] = x[[i, j]] + (x_adv[[i, j]] - x[[i, j]]) * s;
                            }
                        }
                    }
                }
                x_adv.mapv_inplace(|v| v.clamp(0.0, 1.0));
            }
        }
    }
    if norm == MomentumNorm::L2 {
        project(&mut x_adv, x, budget.epsilon);
    }
    Ok(AttackResult {
        x_clean: x.clone(),
        x_adv,
        y: y.to_vec(),
        queries: 0,
        attack_id: attack_id.into(),
    })
}

/// Momentum iterative method, ℓ∞ version: accumulate ℓ1-normalized gradients
/// and take sign steps.
pub fn mim(
    model: &dyn Model,
    x: &Array2<f32>,
    y: &[usize],
    budget: &AttackBudget,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult> {
    momentum_attack(model, x, y, budget, MomentumNorm::LInf, false, None, rng, "mim")
}

/// Momentum iterative method, ℓ2 version, clipped at the end to respect the
/// ℓ∞ threat model.
pub fn mim_l2(
    model: &dyn Model,
    x: &Array2<f32>,
    y: &[usize],
    budget: &AttackBudget,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult> {
    momentum_attack(model, x, y, budget, MomentumNorm::L2, false, None, rng, "mim_l2")
}

/// MIM over diversified inputs (random resize-and-pad with probability `p`).
pub fn dim(
    model: &dyn Model,
    x: &Array2<f32>,
    y: &[usize],
    budget: &AttackBudget,
    geom: ImageShape,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult> {
    momentum_attack(model, x, y, budget, MomentumNorm::LInf, true, Some(geom), rng, "dim")
}

/// MIM with translation-invariant (kernel-smoothed) gradients.
pub fn mim_ti(
    model: &dyn Model,
    x: &Array2<f32>,
    y: &[usize],
    budget: &AttackBudget,
    geom: ImageShape,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult> {
    momentum_attack(
        model,
        x,
        y,
        budget,
        MomentumNorm::LInf,
        false,
        Some(geom),
        rng,
        &format!("mim_ti_k{}", budget.kernel),
    )
}

/// DIM with translation-invariant gradients.
pub fn dim_ti(
    model: &dyn Model,
    x: &Array2<f32>,
    y: &[usize],
    budget: &AttackBudget,
    geom: ImageShape,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult> {
    momentum_attack(
        model,
        x,
        y,
        budget,
        MomentumNorm::LInf,
        true,
        Some(geom),
        rng,
        &format!("dim_ti_k{}", budget.kernel),
    )
}

/// Diverse-input transform: with probability `p` per example, resize to a
/// random smaller size (nearest neighbor) and pad back at a random offset;
/// otherwise identity. Output shape always equals input shape.
pub fn diversify(
    x: &Array2<f32>,
    geom: ImageShape,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<f32> {
    let (h, w) = (geom.h, geom.w);
    let mut out = x.clone();
    let min_h = ((h as f64) * 0.85).ceil() as usize;
    let min_w = ((w as f64) * 0.85).ceil() as usize;
    for (mut row, src) in out.rows_mut().into_iter().zip(x.rows()) {
        if !(rng.random::<f64>() < p) {
            continue;
        }
        let nh = rng.random_range(min_h..=h);
        let nw = rng.random_range(min_w..=w);
        let top = rng.random_range(0..=(h - nh));
        let left = rng.random_range(0..=(w - nw));
        row.fill(0.0);
        for i in 0..nh {
            let si = i * h / nh;
            for j in 0..nw {
                let sj = j * w / nw;
                row[(top + i) * w + (left + j)] = src[si * w + sj];
            }
        }
    }
    out
}

/// One member of the MIM-W grid.
#[derive(Debug, Clone)]
pub struct GridAttack {
    pub id: String,
    pub kind: GridKind,
    pub budget: AttackBudget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Mim,
    Dim,
    MimTi,
    DimTi,
}

/// The grid used for MIM-W: MIM, DIM at the tuned
/// diversity probability, and the TI variants over the kernel-size search
/// space.
pub fn mim_w_grid(
    epsilon: f32,
    steps: usize,
    step_size: f32,
    diversity_p: f64,
    kernels: &[usize],
) -> Vec<GridAttack> {
    let base = AttackBudget {
        epsilon,
        steps,
        step_size,
        momentum: 1.0,
        l2_bound: None,
        diversity_p,
        kernel: 1,
        random_start: false,
    };
    let mut grid = vec![
        GridAttack {
            id: "mim".into(),
            kind: GridKind::Mim,
            budget: base.clone(),
        },
        GridAttack {
            id: format!("dim_p{diversity_p}"),
            kind: GridKind::Dim,
            budget: base.clone(),
        },
    ];
    for &k in kernels {
        let mut b = base.clone();
        b.kernel = k;
        grid.push(GridAttack {
            id: format!("mim_ti_k{k}"),
            kind: GridKind::MimTi,
            budget: b.clone(),
        });
        grid.push(GridAttack {
            id: format!("dim_ti_k{k}"),
            kind: GridKind::DimTi,
            budget: b,
        });
    }
    grid
}

/// Run one grid member.
pub fn run_grid_attack(
    attack: &GridAttack,
    model: &dyn Model,
    x: &Array2<f32>,
    y: &[usize],
    geom: ImageShape,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult> {
    let mut res = match attack.kind {
        GridKind::Mim => mim(model, x, y, &attack.budget, rng),
        GridKind::Dim => dim(model, x, y, &attack.budget, geom, rng),
        GridKind::MimTi => mim_ti(model, x, y, &attack.budget, geom, rng),
        GridKind::DimTi => dim_ti(model, x, y, &attack.budget, geom, rng),
    }?;
    res.attack_id = attack.id.clone();
    Ok(res)
}

/// Worst-case attack selection: run every grid member against the exposed
/// model `t`, and keep the one whole-set result that minimizes the hidden
/// target's adversarial accuracy. Ties break by grid order.
pub fn mim_w(
    t: &dyn Model,
    target: &dyn Model,
    x: &Array2<f32>,
    y: &[usize],
    grid: &[GridAttack],
    geom: ImageShape,
    rng: &mut ChaCha8Rng,
) -> Result<(AttackResult, String)> {
    if grid.is_empty() {
        return Err(Error::Config("mim_w needs a non-empty grid".into()));
    }
    let mut best: Option<(f64, AttackResult)> = None;
    for attack in grid {
        let res = run_grid_attack(attack, t, x, y, geom, rng)?;
        let preds = target.predict(&res.x_adv)?;
        let ac_m =
            preds.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len().max(1) as f64;
        let better = match &best {
            None => true,
            Some((cur, _)) => ac_m < *cur,
        };
        if better {
            best = Some((ac_m, res));
        }
    }
    let (_, res) = best.expect("non-empty grid");
    let id = res.attack_id.clone();
    Ok((res, id))
}
