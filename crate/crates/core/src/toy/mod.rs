//! Synthetic laboratory for ρ-useful and γ-robust features on a binary
//! linear-Gaussian task, with closed-form oracles, Monte-Carlo estimates,
//! and a two-case demonstration of how an input mapper can flip feature
//! robustness.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};

/// Binary task: `y` uniform on {-1,+1}, `x ~ N(y·mu, sigma² I)`, with an
/// ℓ∞ perturbation set of radius `epsilon`.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub mu: Array1<f64>,
    pub sigma: f64,
    pub epsilon: f64,
}

impl ToyTask {
    pub fn new(mu: Array1<f64>, sigma: f64, epsilon: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(Error::Domain("sigma must be positive".into()));
        }
        if epsilon < 0.0 {
            return Err(Error::Domain("epsilon must be nonnegative".into()));
        }
        Ok(ToyTask { mu, sigma, epsilon })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Sample `(x, y)` pairs.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<f64>) {
        let d = self.dim();
        let mut x = Array2::<f64>::zeros((n, d));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let label = if rng.random::<bool>() { 1.0 } else { -1.0 };
            for j in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                x[[i, j]] = label * self.mu[j] + self.sigma * z;
            }
            y.push(label);
        }
        (x, y)
    }
}

/// A linear feature `f(x) = wᵀx`.
#[derive(Debug, Clone)]
pub struct LinearFeature {
    pub w: Array1<f64>,
}

impl LinearFeature {
    pub fn new(w: Array1<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature weights".into()));
        }
        Ok(LinearFeature { w })
    }

    pub fn eval(&self, x: ndarray::ArrayView1<f64>) -> f64 {
        self.w.dot(&x)
    }

    /// Closed-form usefulness `E[y·f(x)] = wᵀmu`.
    pub fn rho_closed_form(&self, task: &ToyTask) -> f64 {
        self.w.dot(&task.mu)
    }

    /// Closed-form robust usefulness `wᵀmu - ε‖w‖₁`.
    pub fn gamma_closed_form(&self, task: &ToyTask, epsilon: f64) -> f64 {
        self.rho_closed_form(task) - epsilon * self.w.iter().map(|v| v.abs()).sum::<f64>()
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
    pub n: usize,
}

fn mc_estimate(samples: impl Iterator<Item = f64>, n: usize) -> Estimate {
    let vals: Vec<f64> = samples.collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
    Estimate {
        value: mean,
        std_err: (var / n as f64).sqrt(),
        n,
    }
}

/// Monte-Carlo estimate of the usefulness `E[y·f(x)]`.
pub fn usefulness(f: &LinearFeature, task: &ToyTask, n_samples: usize, seed: u64) -> Estimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, y) = task.sample(n_samples, &mut rng);
    mc_estimate(
        x.rows().into_iter().zip(&y).map(|(row, &yi)| yi * f.eval(row)),
        n_samples,
    )
}

/// Monte-Carlo estimate of the robust usefulness
/// `E[inf_{‖δ‖∞<=ε} y·f(x+δ)]`. For a linear feature the inner infimum is
/// `y·f(x) - ε‖w‖₁` exactly, independently of `y` and `x`. Sampling uses the
/// same stream as [`usefulness`], so at ε = 0 the two estimates coincide.
pub fn robust_usefulness(
    f: &LinearFeature,
    task: &ToyTask,
    epsilon: f64,
    n_samples: usize,
    seed: u64,
) -> Estimate {
    let shift = epsilon * f.w.iter().map(|v| v.abs()).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, y) = task.sample(n_samples, &mut rng);
    mc_estimate(
        x.rows()
            .into_iter()
            .zip(&y)
            .map(|(row, &yi)| yi * f.eval(row) - shift),
        n_samples,
    )
}

/// Exhaustive worst case of `y·f(x+δ)` over the corners of the ε-box. For a
/// linear objective the infimum over the box is attained at a corner, so for
/// d <= 12 this is exact. Returns the minimizing value and corner.
pub fn corner_worst_case(
    f: &LinearFeature,
    x: ndarray::ArrayView1<f64>,
    y: f64,
    epsilon: f64,
) -> Result<(f64, Array1<f64>)> {
    let d = f.w.len();
    if d > 12 {
        return Err(Error::Domain(format!(
            "corner enumeration limited to d <= 12, got {d}"
        )));
    }
    let mut best_val = f64::INFINITY;
    let mut best_delta = Array1::<f64>::zeros(d);
    for mask in 0u32..(1u32 << d) {
        let mut val = 0.0;
        for j in 0..d {
            let delta = if mask >> j & 1 == 1 { epsilon } else { -epsilon };
            val += f.w[j] * (x[j] + delta);
        }
        val *= y;
        if val < best_val {
            best_val = val;
            for j in 0..d {
                best_delta[j] = if mask >> j & 1 == 1 { epsilon } else { -epsilon };
            }
        }
    }
    Ok((best_val, best_delta))
}

/// Projected-gradient inner minimization of `y·f(x+δ)` with random restarts;
/// exact for linear features (kept for parity checks against the corner
/// search and for non-corner-enumerable dimensions).
pub fn pgd_worst_case(
    f: &LinearFeature,
    x: ndarray::ArrayView1<f64>,
    y: f64,
    epsilon: f64,
    restarts: usize,
    steps: usize,
    seed: u64,
) -> (f64, Array1<f64>) {
    let d = f.w.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_val = f64::INFINITY;
    let mut best_delta = Array1::<f64>::zeros(d);
    let step = epsilon.max(1e-12) / 2.0;
    for _ in 0..restarts.max(1) {
        let mut delta =
            Array1::from_shape_fn(d, |_| rng.random_range(-epsilon..=epsilon.max(1e-300)));
        for _ in 0..steps {
            // gradient of y·wᵀ(x+δ) w.r.t. δ is y·w; descend and clamp
            for j in 0..d {
                delta[j] = (delta[j] - step * (y * f.w[j]).signum()).clamp(-epsilon, epsilon);
            }
        }
        let val = y * (f.eval(x) + f.w.dot(&delta));
        if val < best_val {
            best_val = val;
            best_delta = delta;
        }
    }
    (best_val, best_delta)
}

/// Feature taxonomy from estimated usefulness and robust usefulness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FeatureClass {
    UsefulRobust,
    UsefulNonRobust,
    NotUseful,
}

/// Classify a feature: useful iff `rho > rho_min`; among useful features,
/// robust iff `gamma > gamma_min` (with `gamma_min >= 0`).
pub fn classify_feature(
    rho: f64,
    gamma: f64,
    rho_min: f64,
    gamma_min: f64,
) -> Result<FeatureClass> {
    if gamma_min < 0.0 {
        return Err(Error::Domain("gamma_min must be >= 0".into()));
    }
    Ok(if rho <= rho_min {
        FeatureClass::NotUseful
    } else if gamma > gamma_min {
        FeatureClass::UsefulRobust
    } else {
        FeatureClass::UsefulNonRobust
    })
}

/// Diagonal input mapper `P(x) = scale ⊙ x`: the simplest parametric mapper
/// that changes which coordinates a composed feature leans on.
#[derive(Debug, Clone)]
pub struct DiagonalMapper {
    pub scale: Array1<f64>,
}

impl DiagonalMapper {
    pub fn identity(d: usize) -> Self {
        DiagonalMapper {
            scale: Array1::ones(d),
        }
    }

    /// The composed feature `f ∘ P` is again linear with weights `scale ⊙ w`.
    pub fn compose(&self, f: &LinearFeature) -> LinearFeature {
        LinearFeature {
            w: &f.w * &self.scale,
        }
    }
}

/// Which of the two luring cases a (task, mapper) pair realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DemoCase {
    /// `f ∘ P` is non-robust while `f` stays robust: the adversarial budget
    /// flips the augmented feature but cannot touch the target's.
    RobustTarget,
    /// Both are non-robust but their worst-case perturbations differ, so the
    /// same budget flips them toward different labels.
    DifferentlyFlipped,
    /// The mapper does not change the feature; no luring effect.
    NoLuring,
}

/// One feature's numbers in the demo report.
#[derive(Debug, Clone, Serialize)]
pub struct FeatureReport {
    pub rho_closed_form: f64,
    pub gamma_closed_form: f64,
    pub rho_estimate: Estimate,
    pub gamma_estimate: Estimate,
    pub class: FeatureClass,
    pub worst_delta: Vec<f64>,
    pub worst_value: f64,
}

/// Full report of the two-case luring demonstration.
#[derive(Debug, Clone, Serialize)]
pub struct LuringDemoReport {
    pub base: FeatureReport,
    pub composed: FeatureReport,
    pub case: DemoCase,
}

fn feature_report(
    f: &LinearFeature,
    task: &ToyTask,
    epsilon: f64,
    n_samples: usize,
    seed: u64,
) -> Result<FeatureReport> {
    let rho_hat = usefulness(f, task, n_samples, seed);
    let gamma_hat = robust_usefulness(f, task, epsilon, n_samples, seed);
    let class = classify_feature(rho_hat.value, gamma_hat.value, 0.0, 0.0)?;
    // worst case at the class mean of the positive class
    let (worst_value, worst_delta) = corner_worst_case(f, task.mu.view(), 1.0, epsilon)?;
    Ok(FeatureReport {
        rho_closed_form: f.rho_closed_form(task),
        gamma_closed_form: f.gamma_closed_form(task, epsilon),
        rho_estimate: rho_hat,
        gamma_estimate: gamma_hat,
        class,
        worst_delta: worst_delta.to_vec(),
        worst_value,
    })
}

/// Build the two luring cases on a linear task: evaluate the target's
/// feature `f` and the augmented feature `f ∘ P`, verify the worst cases by
/// exact corner search, and classify which case the pair realizes.
pub fn luring_demo(
    task: &ToyTask,
    f: &LinearFeature,
    mapper: &DiagonalMapper,
    epsilon: f64,
    n_samples: usize,
    seed: u64,
) -> Result<LuringDemoReport> {
    let composed_f = mapper.compose(f);
    let base = feature_report(f, task, epsilon, n_samples, seed)?;
    let composed = feature_report(&composed_f, task, epsilon, n_samples, seed.wrapping_add(1))?;
    let identical = f
        .w
        .iter()
        .zip(composed_f.w.iter())
        .all(|(a, b)| (a - b).abs() < 1e-15);
    let case = if identical {
        DemoCase::NoLuring
    } else if composed.gamma_closed_form <= 0.0 && base.gamma_closed_form > 0.0 {
        DemoCase::RobustTarget
    } else if composed.gamma_closed_form <= 0.0
        && base.gamma_closed_form <= 0.0
        && base
            .worst_delta
            .iter()
            .zip(&composed.worst_delta)
            .any(|(a, b)| (a - b).abs() > 1e-12)
    {
        DemoCase::DifferentlyFlipped
    } else {
        DemoCase::NoLuring
    };
    Ok(LuringDemoReport {
        base,
        composed,
        case,
    })
}

/// Serialize the demo report as pretty JSON.
pub fn demo_report_json(report: &LuringDemoReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

/// Write a `(feature, rho, gamma, class)` CSV for a set of named features.
pub fn write_feature_csv(
    path: impl AsRef<std::path::Path>,
    rows: &[(String, Estimate, Estimate, FeatureClass)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["feature", "rho", "rho_stderr", "gamma", "gamma_stderr", "class"])?;
    for (name, rho, gamma, class) in rows {
        w.write_record([
            name.clone(),
            format!("{:.6}", rho.value),
            format!("{:.6}", rho.std_err),
            format!("{:.6}", gamma.value),
            format!("{:.6}", gamma.std_err),
            format!("{class:?}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}
