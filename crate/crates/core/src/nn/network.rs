//! Sequential network container: construction from a spec, forward tapes,
//! backward passes, and parameter access.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{glorot_limit, Conv2d, Dense, Layer, PadMode, Tape};
use super::{Elem, Tensor};
use crate::error::{Error, Result};

/// Shape of a single example at the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputShape {
    Flat(usize),
    Image { h: usize, w: usize, c: usize },
}

impl InputShape {
    pub fn dim(&self) -> usize {
        match self {
            InputShape::Flat(d) => *d,
            InputShape::Image { h, w, c } => h * w * c,
        }
    }
}

/// Architecture description; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d {
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        pad: PadMode,
    },
    MaxPool2,
    Upsample2,
    Dense {
        din: usize,
        dout: usize,
    },
    Relu,
    Sigmoid,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

/// Parameter gradients aligned with the network's parametric layers.
#[derive(Debug, Clone)]
pub struct ParamGrads<F> {
    /// One `(dw, db)` entry per layer; `None` for parameterless layers.
    pub items: Vec<Option<(Array2<F>, Array1<F>)>>,
}

impl<F: Elem> ParamGrads<F> {
    pub fn zeros_like(net: &Network<F>) -> Self {
        let items = net
            .layers
            .iter()
            .map(|l| {
                l.params()
                    .map(|(w, b)| (Array2::zeros(w.raw_dim()), Array1::zeros(b.raw_dim())))
            })
            .collect();
        ParamGrads { items }
    }

    pub fn add_assign(&mut self, other: &ParamGrads<F>) {
        for (a, b) in self.items.iter_mut().zip(other.items.iter()) {
            if let (Some((aw, ab)), Some((bw, bb))) = (a.as_mut(), b.as_ref()) {
                *aw += bw;
                *ab += bb;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for item in self.items.iter_mut().flatten() {
            item.0.mapv_inplace(|v| v * s);
            item.1.mapv_inplace(|v| v * s);
        }
    }

    /// Flatten to `f64` in the same order as [`Network::params_flat_f64`].
    pub fn flat_f64(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for item in self.items.iter().flatten() {
            out.extend(item.0.iter().map(|v| v.to_f64_c()));
            out.extend(item.1.iter().map(|v| v.to_f64_c()));
        }
        out
    }
}

/// A sequential feed-forward network.
#[derive(Debug, Clone)]
pub struct Network<F> {
    pub input: InputShape,
    pub layers: Vec<Layer<F>>,
}

impl<F: Elem> Network<F> {
    /// Build a network with Glorot-uniform weights and zero biases.
    pub fn from_spec<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let layers = spec
            .layers
            .iter()
            .map(|ls| match ls {
                LayerSpec::Conv2d {
                    cin,
                    cout,
                    kh,
                    kw,
                    pad,
                } => {
                    let fan_in = kh * kw * cin;
                    let fan_out = kh * kw * cout;
                    let limit: F = glorot_limit(fan_in, fan_out);
                    let w = Array2::from_shape_fn((fan_in, *cout), |_| {
                        F::from_f64_c(rng.random_range(-1.0..1.0)) * limit
                    });
                    Layer::Conv2d(Conv2d {
                        w,
                        b: Array1::zeros(*cout),
                        kh: *kh,
                        kw: *kw,
                        cin: *cin,
                        cout: *cout,
                        pad: *pad,
                    })
                }
                LayerSpec::Dense { din, dout } => {
                    let limit: F = glorot_limit(*din, *dout);
                    let w = Array2::from_shape_fn((*din, *dout), |_| {
                        F::from_f64_c(rng.random_range(-1.0..1.0)) * limit
                    });
                    Layer::Dense(Dense {
                        w,
                        b: Array1::zeros(*dout),
                    })
                }
                LayerSpec::MaxPool2 => Layer::MaxPool2,
                LayerSpec::Upsample2 => Layer::Upsample2,
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Sigmoid => Layer::Sigmoid,
                LayerSpec::Flatten => Layer::Flatten,
            })
            .collect();
        Network {
            input: spec.input,
            layers,
        }
    }

    /// Recover the architecture description of this network.
    pub fn spec(&self) -> NetworkSpec {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d(cv) => LayerSpec::Conv2d {
                    cin: cv.cin,
                    cout: cv.cout,
                    kh: cv.kh,
                    kw: cv.kw,
                    pad: cv.pad,
                },
                Layer::Dense(d) => LayerSpec::Dense {
                    din: d.w.nrows(),
                    dout: d.w.ncols(),
                },
                Layer::MaxPool2 => LayerSpec::MaxPool2,
                Layer::Upsample2 => LayerSpec::Upsample2,
                Layer::Relu => LayerSpec::Relu,
                Layer::Sigmoid => LayerSpec::Sigmoid,
                Layer::Flatten => LayerSpec::Flatten,
            })
            .collect();
        NetworkSpec {
            input: self.input,
            layers,
        }
    }

    /// View a flat `[N, d]` batch in this network's input shape.
    pub fn to_input_tensor(&self, x: ndarray::ArrayView2<F>) -> Result<Tensor<F>> {
        if x.ncols() != self.input.dim() {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.input.dim()
            )));
        }
        Ok(match self.input {
            InputShape::Flat(_) => Tensor::D2(x.to_owned()),
            InputShape::Image { h, w, c } => Tensor::D4(
                x.to_owned()
                    .into_shape_with_order((x.nrows(), h, w, c))
                    .expect("input reshape"),
            ),
        })
    }

    /// Forward pass recording a tape. `store_params_path` must be true if
    /// parameter gradients will be requested from the tape.
    pub fn forward_tape(&self, x: Tensor<F>, store_params_path: bool) -> (Tensor<F>, Tape<F>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for layer in &self.layers {
            let (out, cache) = layer.forward(cur, store_params_path);
            caches.push(cache);
            cur = out;
        }
        (cur, Tape { caches })
    }

    /// Forward pass without a tape.
    pub fn forward(&self, x: Tensor<F>) -> Tensor<F> {
        let mut cur = x;
        for layer in &self.layers {
            let (out, _) = layer.forward(cur, false);
            cur = out;
        }
        cur
    }

    /// Flat-in/flat-out forward convenience.
    pub fn forward_flat(&self, x: ndarray::ArrayView2<F>) -> Result<Array2<F>> {
        Ok(self.forward(self.to_input_tensor(x)?).into_d2())
    }

    /// Backward pass. Accumulates into `grads` when given (the tape must have
    /// been recorded with `store_params_path`), and returns the gradient
    /// w.r.t. the network input when `want_input_grad`.
    pub fn backward(
        &self,
        tape: &Tape<F>,
        dout: Tensor<F>,
        want_input_grad: bool,
        mut grads: Option<&mut ParamGrads<F>>,
    ) -> Option<Tensor<F>> {
        let mut cur = Some(dout);
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let need_dx = want_input_grad || idx > 0;
            let param_slot = grads
                .as_deref_mut()
                .and_then(|g| g.items[idx].as_mut());
            let d = cur.take().expect("gradient chain broken");
            cur = layer.backward(&tape.caches[idx], d, need_dx, param_slot);
            if cur.is_none() && idx > 0 {
                unreachable!("intermediate layer returned no input gradient");
            }
        }
        cur
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// All parameters flattened to `f64`, in deterministic layer order.
    pub fn params_flat_f64(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.layers.iter().filter_map(|l| l.params()) {
            out.extend(w.iter().map(|v| v.to_f64_c()));
            out.extend(b.iter().map(|v| v.to_f64_c()));
        }
        out
    }

    /// Overwrite all parameters from a flat `f64` vector (inverse of
    /// [`Network::params_flat_f64`]).
    pub fn set_params_flat_f64(&mut self, flat: &[f64]) -> Result<()> {
        let mut it = flat.iter();
        for (w, b) in self.layers.iter_mut().filter_map(|l| l.params_mut()) {
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = F::from_f64_c(*it.next().ok_or_else(|| {
                    Error::Shape("parameter vector too short".into())
                })?);
            }
        }
        if it.next().is_some() {
            return Err(Error::Shape("parameter vector too long".into()));
        }
        Ok(())
    }
}
