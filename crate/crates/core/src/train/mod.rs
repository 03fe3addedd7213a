//! Training procedures for the mapper `P` on top of a frozen target `M`
//! (luring loss), plus the three baselines used for comparison: `Stack`
//! (joint retraining), `Auto` (plain autoencoder) and `C_E` (teacher
//! mimicry), and ordinary supervised training for the target itself.

mod loss;

pub use loss::{
    bce_row, cross_entropy_row, distill_ce_row, log_softmax_row, luring_loss_row, softmax_row,
    TeacherSignal,
};

use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{argmax_row, Classifier, InputMapper};
use crate::nn::{Adam, LrSchedule, Network, ParamGrads, Tensor};

/// Number of batch sub-chunks evaluated in parallel. Fixed (rather than
/// derived from the thread count) so gradient summation order, and therefore
/// every downstream metric, is machine-independent.
pub(crate) const PAR_CHUNKS: usize = 4;

/// Configuration of a luring-loss training run.
#[derive(Debug, Clone)]
pub struct LuringConfig {
    /// Luring coefficient λ > 0 weighting the logit-gap term.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub seed: u64,
}

impl Default for LuringConfig {
    /// The MNIST setup: λ=1, 64 epochs, batch 64, lr 0.001 stepping to
    /// 0.0002 after epoch 45 and 0.0004 after epoch 58.
    fn default() -> Self {
        LuringConfig {
            lambda: 1.0,
            epochs: 64,
            batch_size: 64,
            lr: LrSchedule(vec![(0, 1e-3), (45, 2e-4), (58, 4e-4)]),
            seed: 0,
        }
    }
}

impl LuringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 {
            return Err(Error::Config(format!(
                "luring coefficient must be positive, got {}",
                self.lambda
            )));
        }
        fit_validate(self.epochs, self.batch_size)
    }
}

/// Configuration shared by the non-luring training procedures.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub seed: u64,
}

impl FitConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: LrSchedule, seed: u64) -> Self {
        FitConfig {
            epochs,
            batch_size,
            lr,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fit_validate(self.epochs, self.batch_size)
    }
}

fn fit_validate(epochs: usize, batch_size: usize) -> Result<()> {
    if epochs < 1 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    if batch_size < 1 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    Ok(())
}

/// Metric watched by [`EarlyStop`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopMetric {
    /// Accuracy of the model being trained (the composition, for mappers).
    Accuracy,
    /// Agreement: trained composition and the reference target both predict
    /// the ground-truth label.
    Agreement,
}

/// Stop training once an evaluation metric reaches a target. Used to keep
/// desk-scale runs inside their time budget without weakening thresholds.
#[derive(Debug, Clone, Copy)]
pub struct EarlyStop {
    pub metric: StopMetric,
    pub at_least: f64,
    pub min_epochs: usize,
}

/// Held-out labeled data evaluated after each epoch, for logging and early
/// stopping only; training itself never reads `y`.
pub struct EvalHook<'a> {
    pub x: &'a Array2<f32>,
    pub y: &'a [usize],
    /// Reference target for the agreement column (the original frozen `M`).
    pub target: Option<&'a Classifier>,
}

/// Optional knobs common to all training procedures.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub eval: Option<EvalHook<'a>>,
    pub early_stop: Option<EarlyStop>,
    /// Print a one-line progress message per epoch.
    pub verbose: bool,
}

/// One epoch record of a training run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: Option<f64>,
    pub agreement: Option<f64>,
    pub lr: f64,
}

/// Per-epoch training log, exportable as CSV.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["epoch", "mean_loss", "accuracy", "agreement", "lr"])?;
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                format!("{:.6}", r.mean_loss),
                r.accuracy.map(|v| format!("{v:.4}")).unwrap_or_default(),
                r.agreement.map(|v| format!("{v:.4}")).unwrap_or_default(),
                format!("{}", r.lr),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.mean_loss)
    }
}

pub(crate) fn chunk_ranges(n: usize, chunks: usize) -> Vec<Range<usize>> {
    let chunks = chunks.clamp(1, n.max(1));
    let base = n / chunks;
    let rem = n % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut start = 0;
    for i in 0..chunks {
        let len = base + usize::from(i < rem);
        if len == 0 {
            continue;
        }
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Batched forward returning per-row argmax predictions, chunked to bound
/// im2col memory.
pub fn predict_net(net: &Network<f32>, x: &Array2<f32>) -> Result<Vec<usize>> {
    let outs: Vec<Vec<usize>> = chunk_ranges(x.nrows(), x.nrows().div_ceil(128).max(1))
        .into_par_iter()
        .map(|r| -> Result<Vec<usize>> {
            let z = net.forward_flat(x.slice(s![r, ..]))?;
            Ok(z.rows()
                .into_iter()
                .map(|row| argmax_row(row.as_slice().expect("contiguous logits")))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(outs.concat())
}

/// Forward a batch through `P` then `M`, chunked; returns predictions.
pub fn predict_composed(
    p_net: &Network<f32>,
    m_net: &Network<f32>,
    x: &Array2<f32>,
) -> Result<Vec<usize>> {
    let outs: Vec<Vec<usize>> = chunk_ranges(x.nrows(), x.nrows().div_ceil(128).max(1))
        .into_par_iter()
        .map(|r| -> Result<Vec<usize>> {
            let mapped = p_net.forward_flat(x.slice(s![r, ..]))?;
            let z = m_net.forward_flat(mapped.view())?;
            Ok(z.rows()
                .into_iter()
                .map(|row| argmax_row(row.as_slice().expect("contiguous logits")))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(outs.concat())
}

struct EpochEval {
    accuracy: f64,
    agreement: Option<f64>,
}

fn summarize_eval(hook: &EvalHook, pred_m: Option<&[usize]>, composed: &[usize]) -> EpochEval {
    let acc = composed.iter().zip(hook.y).filter(|(a, b)| a == b).count() as f64
        / hook.y.len() as f64;
    let agreement = pred_m.map(|pm| {
        composed
            .iter()
            .zip(pm)
            .zip(hook.y)
            .filter(|((t, m), y)| t == m && *t == *y)
            .count() as f64
            / hook.y.len() as f64
    });
    EpochEval {
        accuracy: acc,
        agreement,
    }
}

fn should_stop(stop: &Option<EarlyStop>, epoch: usize, ev: &EpochEval) -> bool {
    let Some(stop) = stop else {
        return false;
    };
    if epoch + 1 < stop.min_epochs {
        return false;
    }
    let value = match stop.metric {
        StopMetric::Accuracy => ev.accuracy,
        StopMetric::Agreement => ev.agreement.unwrap_or(ev.accuracy),
    };
    value >= stop.at_least
}

/// One concrete training procedure: how to apply a batch update and how to
/// evaluate between epochs.
trait EpochDriver {
    fn batch_step(&mut self, batch: &[usize], lr: f64) -> Result<f64>;
    fn epoch_eval(&mut self, hook: &EvalHook) -> Result<EpochEval>;
}

fn run_epochs(
    n: usize,
    epochs: usize,
    batch_size: usize,
    lr: &LrSchedule,
    seed: u64,
    opts: &TrainOptions,
    driver: &mut impl EpochDriver,
) -> Result<TrainLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    for epoch in 0..epochs {
        indices.shuffle(&mut rng);
        let cur_lr = lr.at(epoch);
        let mut loss_sum = 0.0f64;
        for batch in indices.chunks(batch_size) {
            let bl = driver.batch_step(batch, cur_lr)?;
            if !bl.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss became non-finite at epoch {epoch}"
                )));
            }
            loss_sum += bl;
        }
        let mean_loss = loss_sum / n as f64;
        let mut row = LogRow {
            epoch,
            mean_loss,
            accuracy: None,
            agreement: None,
            lr: cur_lr,
        };
        let mut stop = false;
        if let Some(hook) = &opts.eval {
            let ev = driver.epoch_eval(hook)?;
            row.accuracy = Some(ev.accuracy);
            row.agreement = ev.agreement;
            stop = should_stop(&opts.early_stop, epoch, &ev);
        }
        if opts.verbose {
            eprintln!(
                "epoch {:>3}  loss {:>10.5}  acc {}  agree {}",
                epoch,
                mean_loss,
                row.accuracy
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into()),
                row.agreement
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into()),
            );
        }
        log.rows.push(row);
        if stop {
            break;
        }
    }
    Ok(log)
}

fn require_frozen(target: &Classifier) -> Result<()> {
    if target.trainable {
        return Err(Error::Domain(
            "target classifier must be frozen for mapper training".into(),
        ));
    }
    Ok(())
}

fn eval_target_preds(opts: &TrainOptions, hookless_ok: bool) -> Result<Option<Vec<usize>>> {
    match &opts.eval {
        Some(hook) => hook
            .target
            .map(|t| predict_net(&t.net, hook.x))
            .transpose(),
        None if hookless_ok => Ok(None),
        None => Ok(None),
    }
}

/// Gradient of a mapper-through-frozen-target step on one chunk of rows.
/// `head` maps (augmented logit row, teacher logit row) to (loss, dlogits).
fn mapper_chunk_step(
    p_net: &Network<f32>,
    m_net: &Network<f32>,
    xc: ArrayView2<f32>,
    head: &(dyn Fn(&[f32], &[f32]) -> Result<(f32, Vec<f32>)> + Sync),
) -> Result<(f64, ParamGrads<f32>)> {
    let teacher_logits = m_net.forward_flat(xc)?;
    let xt = p_net.to_input_tensor(xc)?;
    let (mapped, p_tape) = p_net.forward_tape(xt, true);
    let mapped_dim = match &mapped {
        Tensor::D2(_) => None,
        Tensor::D4(a) => Some(a.raw_dim()),
    };
    let mapped2 = mapped.into_d2();
    let mt = m_net.to_input_tensor(mapped2.view())?;
    let (out, m_tape) = m_net.forward_tape(mt, false);
    let h_t = out.into_d2();

    let mut loss_sum = 0.0f64;
    let mut dh = Array2::<f32>::zeros(h_t.raw_dim());
    for (i, row) in h_t.rows().into_iter().enumerate() {
        let row = row.as_slice().expect("contiguous logits");
        let trow = teacher_logits.row(i);
        let (l, g) = head(row, trow.as_slice().expect("contiguous teacher"))?;
        loss_sum += l as f64;
        dh.row_mut(i).assign(&ndarray::Array1::from_vec(g));
    }

    let d_mapped = m_net
        .backward(&m_tape, Tensor::D2(dh), true, None)
        .expect("input gradient requested")
        .into_d2();
    let d_mapped = match mapped_dim {
        None => Tensor::D2(d_mapped),
        Some(dim) => Tensor::D4(
            d_mapped
                .into_shape_with_order(dim)
                .expect("gradient reshape"),
        ),
    };
    let mut grads = ParamGrads::zeros_like(p_net);
    p_net.backward(&p_tape, d_mapped, false, Some(&mut grads));
    Ok((loss_sum, grads))
}

struct MapperDriver<'a> {
    p_net: &'a mut Network<f32>,
    m_net: &'a Network<f32>,
    data: &'a Array2<f32>,
    adam: Adam<f32>,
    head: Box<dyn Fn(&[f32], &[f32]) -> Result<(f32, Vec<f32>)> + Sync + 'a>,
    pred_m_eval: Option<Vec<usize>>,
}

impl EpochDriver for MapperDriver<'_> {
    fn batch_step(&mut self, batch: &[usize], lr: f64) -> Result<f64> {
        let xb = self.data.select(Axis(0), batch);
        let p_net: &Network<f32> = self.p_net;
        let m_net = self.m_net;
        let head = &*self.head;
        let parts: Vec<(f64, ParamGrads<f32>)> = chunk_ranges(xb.nrows(), PAR_CHUNKS)
            .into_par_iter()
            .map(|r| mapper_chunk_step(p_net, m_net, xb.slice(s![r, ..]), head))
            .collect::<Result<_>>()?;
        let mut grads = ParamGrads::zeros_like(self.p_net);
        let mut loss_sum = 0.0f64;
        for (l, g) in parts {
            loss_sum += l;
            grads.add_assign(&g);
        }
        grads.scale(1.0 / xb.nrows() as f32);
        self.adam.step(self.p_net, &grads, lr);
        Ok(loss_sum)
    }

    fn epoch_eval(&mut self, hook: &EvalHook) -> Result<EpochEval> {
        let preds = predict_composed(self.p_net, self.m_net, hook.x)?;
        Ok(summarize_eval(hook, self.pred_m_eval.as_deref(), &preds))
    }
}

/// Train `P` with the luring loss against the frozen `M`. `data` carries no
/// labels: the teacher signal comes from `M` itself.
pub fn train_luring(
    mapper: &mut InputMapper,
    target: &Classifier,
    data: &Array2<f32>,
    cfg: &LuringConfig,
    opts: &TrainOptions,
) -> Result<TrainLog> {
    cfg.validate()?;
    require_frozen(target)?;
    let lambda = cfg.lambda;
    let pred_m_eval = eval_target_preds(opts, true)?;
    let mut driver = MapperDriver {
        adam: Adam::new(&mapper.net),
        p_net: &mut mapper.net,
        m_net: &target.net,
        data,
        head: Box::new(move |h, teacher_row| {
            let teacher = TeacherSignal::from_logits(teacher_row)?;
            luring_loss_row(h, teacher, lambda)
        }),
        pred_m_eval,
    };
    run_epochs(
        data.nrows(),
        cfg.epochs,
        cfg.batch_size,
        &cfg.lr,
        cfg.seed,
        opts,
        &mut driver,
    )
}

/// Train `P` to mimic the frozen `M` with a softmax cross-entropy between
/// the two confidence vectors. Label-free, like luring training.
pub fn train_ce(
    mapper: &mut InputMapper,
    target: &Classifier,
    data: &Array2<f32>,
    cfg: &FitConfig,
    opts: &TrainOptions,
) -> Result<TrainLog> {
    cfg.validate()?;
    require_frozen(target)?;
    let pred_m_eval = eval_target_preds(opts, true)?;
    let mut driver = MapperDriver {
        adam: Adam::new(&mapper.net),
        p_net: &mut mapper.net,
        m_net: &target.net,
        data,
        head: Box::new(|h, teacher_row| Ok(distill_ce_row(h, teacher_row))),
        pred_m_eval,
    };
    run_epochs(
        data.nrows(),
        cfg.epochs,
        cfg.batch_size,
        &cfg.lr,
        cfg.seed,
        opts,
        &mut driver,
    )
}

struct AutoDriver<'a> {
    p_net: &'a mut Network<f32>,
    eval_m_net: Option<&'a Network<f32>>,
    data: &'a Array2<f32>,
    adam: Adam<f32>,
    pred_m_eval: Option<Vec<usize>>,
}

impl EpochDriver for AutoDriver<'_> {
    fn batch_step(&mut self, batch: &[usize], lr: f64) -> Result<f64> {
        let xb = self.data.select(Axis(0), batch);
        let p_net: &Network<f32> = self.p_net;
        let parts: Vec<(f64, ParamGrads<f32>)> = chunk_ranges(xb.nrows(), PAR_CHUNKS)
            .into_par_iter()
            .map(|r| -> Result<(f64, ParamGrads<f32>)> {
                let xc = xb.slice(s![r, ..]);
                let xt = p_net.to_input_tensor(xc)?;
                let (out, tape) = p_net.forward_tape(xt, true);
                let out_dim = match &out {
                    Tensor::D2(_) => None,
                    Tensor::D4(a) => Some(a.raw_dim()),
                };
                let p = out.into_d2();
                let mut loss_sum = 0.0f64;
                let mut dp = Array2::<f32>::zeros(p.raw_dim());
                for (i, row) in p.rows().into_iter().enumerate() {
                    let (l, g) = bce_row(
                        row.as_slice().expect("contiguous output"),
                        xc.row(i).as_slice().expect("contiguous input"),
                    );
                    // mean over pixels keeps loss scale independent of d
                    let d = row.len() as f32;
                    loss_sum += (l / d) as f64;
                    for (dst, gv) in dp.row_mut(i).iter_mut().zip(g) {
                        *dst = gv / d;
                    }
                }
                let dout = match out_dim {
                    None => Tensor::D2(dp),
                    Some(dim) => {
                        Tensor::D4(dp.into_shape_with_order(dim).expect("gradient reshape"))
                    }
                };
                let mut grads = ParamGrads::zeros_like(p_net);
                p_net.backward(&tape, dout, false, Some(&mut grads));
                Ok((loss_sum, grads))
            })
            .collect::<Result<_>>()?;
        let mut grads = ParamGrads::zeros_like(self.p_net);
        let mut loss_sum = 0.0f64;
        for (l, g) in parts {
            loss_sum += l;
            grads.add_assign(&g);
        }
        grads.scale(1.0 / xb.nrows() as f32);
        self.adam.step(self.p_net, &grads, lr);
        Ok(loss_sum)
    }

    fn epoch_eval(&mut self, hook: &EvalHook) -> Result<EpochEval> {
        let preds = match self.eval_m_net {
            Some(mn) => predict_composed(self.p_net, mn, hook.x)?,
            None => predict_net(self.p_net, hook.x)?,
        };
        Ok(summarize_eval(hook, self.pred_m_eval.as_deref(), &preds))
    }
}

/// Train `P` as a plain autoencoder with pixelwise binary cross-entropy.
/// The target model is never touched.
pub fn train_auto(
    mapper: &mut InputMapper,
    data: &Array2<f32>,
    cfg: &FitConfig,
    opts: &TrainOptions,
) -> Result<TrainLog> {
    cfg.validate()?;
    let pred_m_eval = eval_target_preds(opts, true)?;
    let mut driver = AutoDriver {
        adam: Adam::new(&mapper.net),
        p_net: &mut mapper.net,
        eval_m_net: opts.eval.as_ref().and_then(|h| h.target).map(|t| &t.net),
        data,
        pred_m_eval,
    };
    run_epochs(
        data.nrows(),
        cfg.epochs,
        cfg.batch_size,
        &cfg.lr,
        cfg.seed,
        opts,
        &mut driver,
    )
}

struct StackDriver<'a> {
    p_net: &'a mut Network<f32>,
    m_net: &'a mut Network<f32>,
    data: &'a Array2<f32>,
    labels: &'a [usize],
    adam_p: Adam<f32>,
    adam_m: Adam<f32>,
    pred_m_eval: Option<Vec<usize>>,
}

impl EpochDriver for StackDriver<'_> {
    fn batch_step(&mut self, batch: &[usize], lr: f64) -> Result<f64> {
        let xb = self.data.select(Axis(0), batch);
        let yb: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
        let p_net: &Network<f32> = self.p_net;
        let m_net: &Network<f32> = self.m_net;
        let parts: Vec<(f64, ParamGrads<f32>, ParamGrads<f32>)> =
            chunk_ranges(xb.nrows(), PAR_CHUNKS)
                .into_par_iter()
                .map(|r| -> Result<(f64, ParamGrads<f32>, ParamGrads<f32>)> {
                    let xc = xb.slice(s![r.clone(), ..]);
                    let xt = p_net.to_input_tensor(xc)?;
                    let (mapped, p_tape) = p_net.forward_tape(xt, true);
                    let mapped_dim = match &mapped {
                        Tensor::D2(_) => None,
                        Tensor::D4(a) => Some(a.raw_dim()),
                    };
                    let mapped2 = mapped.into_d2();
                    let mt = m_net.to_input_tensor(mapped2.view())?;
                    let (out, m_tape) = m_net.forward_tape(mt, true);
                    let h = out.into_d2();
                    let mut loss_sum = 0.0f64;
                    let mut dh = Array2::<f32>::zeros(h.raw_dim());
                    for (i, row) in h.rows().into_iter().enumerate() {
                        let (l, g) = cross_entropy_row(
                            row.as_slice().expect("contiguous logits"),
                            yb[r.start + i],
                        );
                        loss_sum += l as f64;
                        dh.row_mut(i).assign(&ndarray::Array1::from_vec(g));
                    }
                    let mut m_grads = ParamGrads::zeros_like(m_net);
                    let d_mapped = m_net
                        .backward(&m_tape, Tensor::D2(dh), true, Some(&mut m_grads))
                        .expect("input gradient requested")
                        .into_d2();
                    let d_mapped = match mapped_dim {
                        None => Tensor::D2(d_mapped),
                        Some(dim) => Tensor::D4(
                            d_mapped
                                .into_shape_with_order(dim)
                                .expect("gradient reshape"),
                        ),
                    };
                    let mut p_grads = ParamGrads::zeros_like(p_net);
                    p_net.backward(&p_tape, d_mapped, false, Some(&mut p_grads));
                    Ok((loss_sum, p_grads, m_grads))
                })
                .collect::<Result<_>>()?;
        let mut p_grads = ParamGrads::zeros_like(self.p_net);
        let mut m_grads = ParamGrads::zeros_like(self.m_net);
        let mut loss_sum = 0.0f64;
        for (l, pg, mg) in parts {
            loss_sum += l;
            p_grads.add_assign(&pg);
            m_grads.add_assign(&mg);
        }
        let scale = 1.0 / xb.nrows() as f32;
        p_grads.scale(scale);
        m_grads.scale(scale);
        self.adam_p.step(self.p_net, &p_grads, lr);
        self.adam_m.step(self.m_net, &m_grads, lr);
        Ok(loss_sum)
    }

    fn epoch_eval(&mut self, hook: &EvalHook) -> Result<EpochEval> {
        let preds = predict_composed(self.p_net, self.m_net, hook.x)?;
        Ok(summarize_eval(hook, self.pred_m_eval.as_deref(), &preds))
    }
}

/// Retrain the whole composition `inner ∘ P` with supervised cross-entropy;
/// both the mapper and the inner classifier receive updates. `inner` is the
/// stack's own trainable copy; pass the original frozen target (if any) via
/// `opts.eval.target` for the agreement column.
pub fn train_stack(
    mapper: &mut InputMapper,
    inner: &mut Classifier,
    data: &Array2<f32>,
    labels: &[usize],
    cfg: &FitConfig,
    opts: &TrainOptions,
) -> Result<TrainLog> {
    cfg.validate()?;
    if !inner.trainable {
        return Err(Error::Domain(
            "stack training requires a trainable inner classifier".into(),
        ));
    }
    if labels.len() != data.nrows() {
        return Err(Error::Shape("label count mismatch".into()));
    }
    let pred_m_eval = eval_target_preds(opts, true)?;
    let mut driver = StackDriver {
        adam_p: Adam::new(&mapper.net),
        adam_m: Adam::new(&inner.net),
        p_net: &mut mapper.net,
        m_net: &mut inner.net,
        data,
        labels,
        pred_m_eval,
    };
    run_epochs(
        data.nrows(),
        cfg.epochs,
        cfg.batch_size,
        &cfg.lr,
        cfg.seed,
        opts,
        &mut driver,
    )
}

struct ClassifierDriver<'a> {
    net: &'a mut Network<f32>,
    data: &'a Array2<f32>,
    labels: &'a [usize],
    adam: Adam<f32>,
}

impl EpochDriver for ClassifierDriver<'_> {
    fn batch_step(&mut self, batch: &[usize], lr: f64) -> Result<f64> {
        let xb = self.data.select(Axis(0), batch);
        let yb: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
        let net: &Network<f32> = self.net;
        let parts: Vec<(f64, ParamGrads<f32>)> = chunk_ranges(xb.nrows(), PAR_CHUNKS)
            .into_par_iter()
            .map(|r| -> Result<(f64, ParamGrads<f32>)> {
                let xc = xb.slice(s![r.clone(), ..]);
                let xt = net.to_input_tensor(xc)?;
                let (out, tape) = net.forward_tape(xt, true);
                let h = out.into_d2();
                let mut loss_sum = 0.0f64;
                let mut dh = Array2::<f32>::zeros(h.raw_dim());
                for (i, row) in h.rows().into_iter().enumerate() {
                    let (l, g) = cross_entropy_row(
                        row.as_slice().expect("contiguous logits"),
                        yb[r.start + i],
                    );
                    loss_sum += l as f64;
                    dh.row_mut(i).assign(&ndarray::Array1::from_vec(g));
                }
                let mut grads = ParamGrads::zeros_like(net);
                net.backward(&tape, Tensor::D2(dh), false, Some(&mut grads));
                Ok((loss_sum, grads))
            })
            .collect::<Result<_>>()?;
        let mut grads = ParamGrads::zeros_like(self.net);
        let mut loss_sum = 0.0f64;
        for (l, g) in parts {
            loss_sum += l;
            grads.add_assign(&g);
        }
        grads.scale(1.0 / xb.nrows() as f32);
        self.adam.step(self.net, &grads, lr);
        Ok(loss_sum)
    }

    fn epoch_eval(&mut self, hook: &EvalHook) -> Result<EpochEval> {
        let preds = predict_net(self.net, hook.x)?;
        Ok(summarize_eval(hook, None, &preds))
    }
}

/// Ordinary supervised training of a classifier with cross-entropy.
pub fn train_classifier(
    model: &mut Classifier,
    data: &Array2<f32>,
    labels: &[usize],
    cfg: &FitConfig,
    opts: &TrainOptions,
) -> Result<TrainLog> {
    cfg.validate()?;
    if !model.trainable {
        return Err(Error::Domain("classifier is frozen".into()));
    }
    if labels.len() != data.nrows() {
        return Err(Error::Shape("label count mismatch".into()));
    }
    let mut driver = ClassifierDriver {
        adam: Adam::new(&model.net),
        net: &mut model.net,
        data,
        labels,
    };
    run_epochs(
        data.nrows(),
        cfg.epochs,
        cfg.batch_size,
        &cfg.lr,
        cfg.seed,
        opts,
        &mut driver,
    )
}
