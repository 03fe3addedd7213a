//! Loss heads: per-row loss values together with gradients w.r.t. the row.

use crate::error::{Error, Result};
use crate::models::top2;
use crate::nn::{c, Elem};

/// Teacher signal extracted from the frozen target model on a clean input:
/// `first` is `M(x)` and `second` the runner-up class of `M`'s logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TeacherSignal {
    pub first: usize,
    pub second: usize,
}

impl TeacherSignal {
    pub fn new(first: usize, second: usize) -> Result<Self> {
        if first == second {
            return Err(Error::Domain(
                "teacher first and second class must differ".into(),
            ));
        }
        Ok(TeacherSignal { first, second })
    }

    /// Read the signal off a logit row of the frozen model.
    pub fn from_logits<F: Elem>(row: &[F]) -> Result<Self> {
        let (first, second) = top2(row)?;
        TeacherSignal::new(first, second)
    }
}

/// Numerically stable row softmax.
pub fn softmax_row<F: Elem>(row: &[F]) -> Vec<F> {
    let mut mx = F::neg_infinity();
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let exps: Vec<F> = row.iter().map(|&v| (v - mx).exp()).collect();
    let sum = exps.iter().fold(F::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Stable row log-softmax.
pub fn log_softmax_row<F: Elem>(row: &[F]) -> Vec<F> {
    let mut mx = F::neg_infinity();
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let lse = row
        .iter()
        .map(|&v| (v - mx).exp())
        .fold(F::zero(), |a, b| a + b)
        .ln()
        + mx;
    row.iter().map(|&v| v - lse).collect()
}

/// Cross-entropy against a hard label: loss and gradient w.r.t. the logits.
pub fn cross_entropy_row<F: Elem>(row: &[F], y: usize) -> (F, Vec<F>) {
    let logp = log_softmax_row(row);
    let loss = -logp[y];
    let mut grad: Vec<F> = logp.iter().map(|&lp| lp.exp()).collect();
    grad[y] = grad[y] - F::one();
    (loss, grad)
}

/// Cross-entropy between the teacher's softmax scores (treated as constants)
/// and the student's softmax: loss and gradient w.r.t. the student logits.
pub fn distill_ce_row<F: Elem>(student: &[F], teacher: &[F]) -> (F, Vec<F>) {
    let p_t = softmax_row(teacher);
    let logp_s = log_softmax_row(student);
    let loss = -p_t
        .iter()
        .zip(&logp_s)
        .fold(F::zero(), |a, (&pt, &lp)| a + pt * lp);
    let grad: Vec<F> = logp_s
        .iter()
        .zip(&p_t)
        .map(|(&lp, &pt)| lp.exp() - pt)
        .collect();
    (loss, grad)
}

/// The luring loss on one augmented-model logit row:
///
/// ```text
/// L = -λ (h[first] - h[a]) + max(0, h[b] - h[first])
/// ```
///
/// where `first = M(x)`, `a` is `M`'s runner-up (both from the teacher), and
/// `b` is the runner-up of this row, recomputed here each call. Index
/// selections are treated as constants of the forward pass: the gradient only
/// flows through the selected entries, and an exactly-zero hinge contributes
/// no gradient.
pub fn luring_loss_row<F: Elem>(
    h: &[F],
    teacher: TeacherSignal,
    lambda: f64,
) -> Result<(F, Vec<F>)> {
    if h.len() < 2 {
        return Err(Error::Domain(format!(
            "luring loss needs C >= 2 logits, got {}",
            h.len()
        )));
    }
    let lam: F = c(lambda);
    let (_, b) = top2(h)?;
    let first = teacher.first;
    let a = teacher.second;
    let hinge = h[b] - h[first];
    let mut loss = -lam * (h[first] - h[a]);
    let mut grad = vec![F::zero(); h.len()];
    grad[first] = grad[first] - lam;
    grad[a] = grad[a] + lam;
    if hinge > F::zero() {
        loss = loss + hinge;
        grad[b] = grad[b] + F::one();
        grad[first] = grad[first] - F::one();
    }
    Ok((loss, grad))
}

/// Pixelwise binary cross-entropy between a reconstruction `p` in `[0,1]` and
/// the original `x`: summed loss and gradient w.r.t. `p`.
pub fn bce_row<F: Elem>(p: &[F], x: &[F]) -> (F, Vec<F>) {
    let eps: F = c(1e-7);
    let one = F::one();
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(p.len());
    for (&pv, &xv) in p.iter().zip(x) {
        let pc = pv.max(eps).min(one - eps);
        loss = loss - (xv * pc.ln() + (one - xv) * (one - pc).ln());
        grad.push((pc - xv) / (pc * (one - pc)));
    }
    (loss, grad)
}
