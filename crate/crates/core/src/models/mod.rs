//! Classifier, input-mapper and augmented-model abstractions.
//!
//! The target classifier `M` maps `[0,1]` input batches to per-class logits.
//! An input mapper `P` maps inputs to inputs of the same shape, squashed into
//! `[0,1]` by a terminal sigmoid. The augmented model is the composition
//! `T = M ∘ P`; it is what an adversary sees, while `M` stays hidden.

mod arch;
mod checkpoint;

pub use arch::{mlp_classifier, mlp_mapper, mnist_cnn, mnist_mapper};
pub use checkpoint::{load_classifier, load_mapper, save_classifier, save_mapper};

use std::sync::Arc;

use ndarray::{s, Array1, Array2};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Elem, Network, Tensor};

/// Rows processed per forward/backward slab. Bounds im2col scratch memory
/// while leaving enough work per GEMM call.
const SLAB_ROWS: usize = 32;

/// Apply `f` to fixed row slabs of `0..n` in parallel and stack the resulting
/// row blocks in order.
fn map_row_slabs(
    n: usize,
    out_cols: usize,
    f: impl Fn(std::ops::Range<usize>) -> Result<Array2<f32>> + Sync + Send,
) -> Result<Array2<f32>> {
    let slabs: Vec<std::ops::Range<usize>> = (0..n.div_ceil(SLAB_ROWS))
        .map(|i| i * SLAB_ROWS..((i + 1) * SLAB_ROWS).min(n))
        .collect();
    let blocks: Vec<Array2<f32>> = slabs.into_par_iter().map(f).collect::<Result<_>>()?;
    let mut out = Array2::<f32>::zeros((n, out_cols));
    let mut row = 0;
    for b in blocks {
        out.slice_mut(s![row..row + b.nrows(), ..]).assign(&b);
        row += b.nrows();
    }
    Ok(out)
}

/// Label space of a classification task: labels are `0..C-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelSpace {
    c: usize,
}

impl LabelSpace {
    pub fn new(c: usize) -> Result<Self> {
        if c < 2 {
            return Err(Error::Domain(format!("label space needs C >= 2, got {c}")));
        }
        Ok(LabelSpace { c })
    }

    pub fn count(&self) -> usize {
        self.c
    }
}

/// Index of the largest entry; ties broken by lowest index.
pub fn argmax_row<F: Elem>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// First and second argmax of a logit row, ties broken by lowest index.
/// The two returned indices are always distinct.
pub fn top2<F: Elem>(row: &[F]) -> Result<(usize, usize)> {
    if row.len() < 2 {
        return Err(Error::Domain(format!(
            "top2 needs at least 2 classes, got {}",
            row.len()
        )));
    }
    let first = argmax_row(row);
    let mut second = if first == 0 { 1 } else { 0 };
    for (i, v) in row.iter().enumerate() {
        if i != first && *v > row[second] {
            second = i;
        }
    }
    Ok((first, second))
}

/// Differentiable objective for input-gradient queries.
#[derive(Debug, Clone, Copy)]
pub enum GradObjective<'a> {
    /// Per-example cross-entropy between softmax(logits) and the true label.
    CrossEntropy { y: &'a [usize] },
    /// Per-example margin `z_y - max_{j != y} z_j`.
    Margin { y: &'a [usize] },
    /// The logit of a fixed class, per example.
    Logit { class: usize },
    /// The logit of each example's own predicted class.
    PredictedLogit,
}

impl<'a> GradObjective<'a> {
    fn slice_rows(&self, r: std::ops::Range<usize>) -> GradObjective<'a> {
        match self {
            GradObjective::CrossEntropy { y } => GradObjective::CrossEntropy { y: &y[r] },
            GradObjective::Margin { y } => GradObjective::Margin { y: &y[r] },
            other => *other,
        }
    }
}

/// Common surface of the target classifier and the augmented model: batch
/// logits plus input gradients of scalar objectives. Batches are flat
/// `[N, d]` matrices with values in `[0, 1]`.
pub trait Model: Send + Sync {
    fn logits(&self, x: &Array2<f32>) -> Result<Array2<f32>>;
    fn n_classes(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// Gradient w.r.t. `x` of the objective summed over the batch. Each row
    /// of the result depends only on the matching input row.
    fn input_gradient(&self, x: &Array2<f32>, obj: GradObjective) -> Result<Array2<f32>>;

    fn predict(&self, x: &Array2<f32>) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok(z.rows()
            .into_iter()
            .map(|r| argmax_row(r.as_slice().expect("contiguous logits")))
            .collect())
    }
}

/// Gradient of the objective w.r.t. the logits, one row per example.
fn objective_logit_grad(logits: &Array2<f32>, obj: &GradObjective) -> Array2<f32> {
    let (n, cdim) = logits.dim();
    let mut d = Array2::<f32>::zeros((n, cdim));
    match obj {
        GradObjective::CrossEntropy { y } => {
            assert_eq!(y.len(), n, "label count mismatch");
            for (i, row) in logits.rows().into_iter().enumerate() {
                let row = row.as_slice().expect("contiguous logits");
                let p = crate::train::softmax_row(row);
                for j in 0..cdim {
                    d[[i, j]] = p[j] - if j == y[i] { 1.0 } else { 0.0 };
                }
            }
        }
        GradObjective::Margin { y } => {
            assert_eq!(y.len(), n, "label count mismatch");
            for (i, row) in logits.rows().into_iter().enumerate() {
                let row = row.as_slice().expect("contiguous logits");
                let mut other = usize::MAX;
                for j in 0..cdim {
                    if j != y[i] && (other == usize::MAX || row[j] > row[other]) {
                        other = j;
                    }
                }
                d[[i, y[i]]] = 1.0;
                d[[i, other]] = -1.0;
            }
        }
        GradObjective::Logit { class } => {
            for i in 0..n {
                d[[i, *class]] = 1.0;
            }
        }
        GradObjective::PredictedLogit => {
            for (i, row) in logits.rows().into_iter().enumerate() {
                let k = argmax_row(row.as_slice().expect("contiguous logits"));
                d[[i, k]] = 1.0;
            }
        }
    }
    d
}

/// A trained (or in-training) classifier `M`.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub net: Network<f32>,
    pub arch_id: String,
    pub n_classes: usize,
    /// Frozen classifiers refuse parameter updates in training loops.
    pub trainable: bool,
}

impl Classifier {
    pub fn new(net: Network<f32>, arch_id: impl Into<String>, n_classes: usize) -> Self {
        Classifier {
            net,
            arch_id: arch_id.into(),
            n_classes,
            trainable: true,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    /// SHA-256 over the little-endian parameter bytes; used to verify that
    /// training procedures leave a frozen model untouched.
    pub fn params_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.net.params_flat_f64() {
            hasher.update((v as f32).to_le_bytes());
        }
        format!("{:x}", hasher.finalize())
    }
}

impl Model for Classifier {
    fn logits(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        map_row_slabs(x.nrows(), self.n_classes, |r| {
            self.net.forward_flat(x.slice(s![r, ..]))
        })
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn input_dim(&self) -> usize {
        self.net.input.dim()
    }

    fn input_gradient(&self, x: &Array2<f32>, obj: GradObjective) -> Result<Array2<f32>> {
        map_row_slabs(x.nrows(), x.ncols(), |r| {
            let xt = self.net.to_input_tensor(x.slice(s![r.clone(), ..]))?;
            let (out, tape) = self.net.forward_tape(xt, false);
            let logits = out.into_d2();
            let d = objective_logit_grad(&logits, &obj.slice_rows(r));
            let dx = self
                .net
                .backward(&tape, Tensor::D2(d), true, None)
                .expect("input gradient requested");
            Ok(dx.into_d2())
        })
    }
}

/// The luring component `P`: an input-to-input network with outputs in `[0,1]`.
#[derive(Debug, Clone)]
pub struct InputMapper {
    pub net: Network<f32>,
    pub arch_id: String,
}

impl InputMapper {
    pub fn new(net: Network<f32>, arch_id: impl Into<String>) -> Self {
        InputMapper {
            net,
            arch_id: arch_id.into(),
        }
    }

    /// Map a flat `[N, d]` batch to a same-shaped batch in `[0,1]`.
    pub fn forward(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        let out = map_row_slabs(x.nrows(), x.ncols(), |r| {
            self.net.forward_flat(x.slice(s![r, ..]))
        })?;
        if out.dim() != x.dim() {
            return Err(Error::Shape(format!(
                "mapper changed shape {:?} -> {:?}",
                x.dim(),
                out.dim()
            )));
        }
        Ok(out)
    }

    /// Sensitivity map of the mapper alone: gradient w.r.t. the input of the
    /// sum of all outputs (Jacobian row-sum), one row per example.
    pub fn sensitivity(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        map_row_slabs(x.nrows(), x.ncols(), |r| {
            let xt = self.net.to_input_tensor(x.slice(s![r, ..]))?;
            let (out, tape) = self.net.forward_tape(xt, false);
            let ones = match &out {
                Tensor::D2(a) => Tensor::D2(Array2::ones(a.raw_dim())),
                Tensor::D4(a) => Tensor::D4(ndarray::Array4::ones(a.raw_dim())),
            };
            let dx = self
                .net
                .backward(&tape, ones, true, None)
                .expect("input gradient requested");
            Ok(dx.into_d2())
        })
    }
}

/// The augmented model `T = M ∘ P` that the adversary can query.
#[derive(Debug, Clone)]
pub struct AugmentedModel {
    pub mapper: InputMapper,
    pub target: Arc<Classifier>,
}

/// Compose a mapper with a frozen target classifier.
pub fn compose(mapper: InputMapper, target: Arc<Classifier>) -> Result<AugmentedModel> {
    if mapper.net.input.dim() != target.net.input.dim() {
        return Err(Error::Shape(format!(
            "mapper dimension {} does not match classifier dimension {}",
            mapper.net.input.dim(),
            target.net.input.dim()
        )));
    }
    Ok(AugmentedModel { mapper, target })
}

impl Model for AugmentedModel {
    fn logits(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        map_row_slabs(x.nrows(), self.target.n_classes, |r| {
            let mapped = self.mapper.net.forward_flat(x.slice(s![r, ..]))?;
            self.target.net.forward_flat(mapped.view())
        })
    }

    fn n_classes(&self) -> usize {
        self.target.n_classes
    }

    fn input_dim(&self) -> usize {
        self.mapper.net.input.dim()
    }

    fn input_gradient(&self, x: &Array2<f32>, obj: GradObjective) -> Result<Array2<f32>> {
        map_row_slabs(x.nrows(), x.ncols(), |r| {
            let xt = self.mapper.net.to_input_tensor(x.slice(s![r.clone(), ..]))?;
            let (mapped, p_tape) = self.mapper.net.forward_tape(xt, false);
            let mapped_dim = match &mapped {
                Tensor::D2(_) => None,
                Tensor::D4(a) => Some(a.raw_dim()),
            };
            let mapped2 = mapped.into_d2();
            let mt = self.target.net.to_input_tensor(mapped2.view())?;
            let (out, m_tape) = self.target.net.forward_tape(mt, false);
            let logits = out.into_d2();
            let d = objective_logit_grad(&logits, &obj.slice_rows(r));
            let d_mapped = self
                .target
                .net
                .backward(&m_tape, Tensor::D2(d), true, None)
                .expect("input gradient requested")
                .into_d2();
            // the gradient fed back into P must match P's output tensor rank
            let d_mapped = match mapped_dim {
                None => Tensor::D2(d_mapped),
                Some(dim) => Tensor::D4(
                    d_mapped
                        .into_shape_with_order(dim)
                        .expect("gradient reshape"),
                ),
            };
            let dx = self
                .mapper
                .net
                .backward(&p_tape, d_mapped, true, None)
                .expect("input gradient requested");
            Ok(dx.into_d2())
        })
    }
}

/// Fraction of rows where both models predict the true label.
pub fn agreement(m: &dyn Model, t: &dyn Model, x: &Array2<f32>, y: &[usize]) -> Result<f64> {
    let pm = m.predict(x)?;
    let pt = t.predict(x)?;
    let hits = pm
        .iter()
        .zip(&pt)
        .zip(y)
        .filter(|((a, b), yy)| a == b && *a == *yy)
        .count();
    Ok(hits as f64 / y.len() as f64)
}

/// Plain accuracy of a model on labeled data.
pub fn accuracy(model: &dyn Model, x: &Array2<f32>, y: &[usize]) -> Result<f64> {
    let p = model.predict(x)?;
    Ok(p.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64)
}

/// Row-wise softmax probabilities of a model's logits.
pub fn softmax_scores(model: &dyn Model, x: &Array2<f32>) -> Result<Array2<f32>> {
    let z = model.logits(x)?;
    let mut out = Array2::<f32>::zeros(z.dim());
    for (i, row) in z.rows().into_iter().enumerate() {
        let p = crate::train::softmax_row(row.as_slice().expect("contiguous logits"));
        out.row_mut(i).assign(&Array1::from_vec(p));
    }
    Ok(out)
}
