//! Perturbation and gradient analyses: ℓ0/ℓ2/ℓ∞ distortion statistics,
//! input-gradient saliency maps, and the Ω_c opposite-direction pixel count.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::{GradObjective, Model};

/// Distortion statistics between clean and adversarial batches.
#[derive(Debug, Clone, Serialize)]
pub struct DistortionStats {
    /// Mean number of pixels changed by more than the ℓ0 threshold.
    pub mean_l0: f64,
    pub mean_l2: f64,
    pub mean_linf: f64,
    pub per_example_l0: Vec<f64>,
    pub per_example_l2: Vec<f64>,
    pub per_example_linf: Vec<f64>,
}

/// Pixel-change threshold below which a coordinate does not count towards
/// the ℓ0 distortion.
pub const DEFAULT_L0_THRESHOLD: f32 = 1e-6;

pub fn distortion(x: &Array2<f32>, x_adv: &Array2<f32>, tau: f32) -> Result<DistortionStats> {
    if x.dim() != x_adv.dim() {
        return Err(Error::Shape("clean/adversarial shape mismatch".into()));
    }
    let n = x.nrows();
    let mut l0 = Vec::with_capacity(n);
    let mut l2 = Vec::with_capacity(n);
    let mut linf = Vec::with_capacity(n);
    for (c_row, a_row) in x.rows().into_iter().zip(x_adv.rows()) {
        let mut count = 0usize;
        let mut sq = 0.0f64;
        let mut mx = 0.0f64;
        for (&c, &a) in c_row.iter().zip(a_row.iter()) {
            let d = (a - c).abs() as f64;
            if d > tau as f64 {
                count += 1;
            }
            sq += d * d;
            if d > mx {
                mx = d;
            }
        }
        l0.push(count as f64);
        l2.push(sq.sqrt());
        linf.push(mx);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(DistortionStats {
        mean_l0: mean(&l0),
        mean_l2: mean(&l2),
        mean_linf: mean(&linf),
        per_example_l0: l0,
        per_example_l2: l2,
        per_example_linf: linf,
    })
}

/// Saliency map: gradient of the predicted-class logit w.r.t. the input
/// pixels, one row per example.
pub fn saliency(model: &dyn Model, x: &Array2<f32>) -> Result<Array2<f32>> {
    model.input_gradient(x, GradObjective::PredictedLogit)
}

/// Ω_c: per example, the number of input coordinates whose class-`c` logit
/// gradients under the two models point in strictly opposite directions.
/// Coordinates where either gradient is exactly zero do not count.
pub fn omega_c(
    m: &dyn Model,
    t: &dyn Model,
    x: &Array2<f32>,
    class: usize,
) -> Result<Vec<usize>> {
    if class >= m.n_classes() {
        return Err(Error::Domain(format!(
            "class {class} out of range for {} classes",
            m.n_classes()
        )));
    }
    let gm = m.input_gradient(x, GradObjective::Logit { class })?;
    let gt = t.input_gradient(x, GradObjective::Logit { class })?;
    Ok(gm
        .rows()
        .into_iter()
        .zip(gt.rows())
        .map(|(rm, rt)| {
            rm.iter()
                .zip(rt.iter())
                .filter(|(&a, &b)| a * b < 0.0)
                .count()
        })
        .collect())
}

/// Per-class rate of examples where the luring model's Ω_c strictly exceeds
/// that of every other architecture.
pub fn omega_dominance(
    target: &dyn Model,
    luring: &dyn Model,
    others: &[(String, &dyn Model)],
    x: &Array2<f32>,
    classes: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let n = x.nrows();
    let mut out = Vec::with_capacity(classes.len());
    for &c in classes {
        let omega_luring = omega_c(target, luring, x, c)?;
        let mut dominated = vec![true; n];
        for (_, other) in others {
            let omega_other = omega_c(target, *other, x, c)?;
            for i in 0..n {
                if omega_luring[i] <= omega_other[i] {
                    dominated[i] = false;
                }
            }
        }
        let rate = dominated.iter().filter(|&&d| d).count() as f64 / n.max(1) as f64;
        out.push((c, rate));
    }
    Ok(out)
}

/// Render a batch of per-pixel maps as a tiled grayscale PNG grid. Each map
/// is min/max normalized independently; tiles are separated by 1px borders.
pub fn export_image_grid(
    maps: &Array2<f32>,
    h: usize,
    w: usize,
    grid_cols: usize,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    if maps.ncols() != h * w {
        return Err(Error::Shape(format!(
            "map length {} does not match {h}x{w}",
            maps.ncols()
        )));
    }
    let n = maps.nrows();
    let cols = grid_cols.max(1).min(n.max(1));
    let rows = n.div_ceil(cols);
    let (tile_h, tile_w) = (h + 1, w + 1);
    let (img_h, img_w) = (rows * tile_h + 1, cols * tile_w + 1);
    let mut img = image::GrayImage::from_pixel(img_w as u32, img_h as u32, image::Luma([32u8]));
    for (k, map) in maps.rows().into_iter().enumerate() {
        let (gr, gc) = (k / cols, k % cols);
        let (lo, hi) = map
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
        for i in 0..h {
            for j in 0..w {
                let v = ((map[i * w + j] - lo) * scale).round().clamp(0.0, 255.0) as u8;
                img.put_pixel(
                    (gc * tile_w + 1 + j) as u32,
                    (gr * tile_h + 1 + i) as u32,
                    image::Luma([v]),
                );
            }
        }
    }
    img.save(path.as_ref())
        .map_err(|e| Error::Serde(format!("png export failed: {e}")))?;
    Ok(())
}

/// Write an Ω table (rows: class, columns: per-model rates) as CSV.
pub fn write_omega_csv(
    path: impl AsRef<std::path::Path>,
    rates: &[(usize, f64)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["class", "dominance_rate"])?;
    for (c, r) in rates {
        w.write_record([c.to_string(), format!("{r:.6}")])?;
    }
    w.flush()?;
    Ok(())
}
