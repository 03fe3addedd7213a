//! Layer implementations and their forward/backward rules.

use ndarray::{Array1, Array2, Array4, Axis};

use super::{c, Elem, Tensor};

/// Spatial padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PadMode {
    /// Zero-pad so that the output has the same height/width as the input.
    Same,
    /// No padding; output shrinks by `k - 1`.
    Valid,
}

/// 2-D convolution, stride 1, NHWC. The kernel is stored pre-flattened as
/// `[kh*kw*cin, cout]` with row index `(kh_off * kw + kw_off) * cin + cin_off`,
/// matching the im2col column order.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub pad: PadMode,
}

impl<F: Elem> Conv2d<F> {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize, isize, isize) {
        match self.pad {
            PadMode::Same => (
                h,
                w,
                ((self.kh - 1) / 2) as isize,
                ((self.kw - 1) / 2) as isize,
            ),
            PadMode::Valid => (h - self.kh + 1, w - self.kw + 1, 0, 0),
        }
    }

    fn im2col(&self, x: &Array4<F>) -> Array2<F> {
        let (n, h, w, cin) = dims4(x);
        let (ho, wo, pt, pl) = self.out_hw(h, w);
        let k = self.kh * self.kw * cin;
        let mut cols = Array2::<F>::zeros((n * ho * wo, k));
        let xs = x.as_slice().expect("contiguous input");
        let cs = cols.as_slice_mut().expect("contiguous cols");
        for ni in 0..n {
            for oh in 0..ho {
                for ow in 0..wo {
                    let row = ((ni * ho + oh) * wo + ow) * k;
                    for dkh in 0..self.kh {
                        let ih = oh as isize + dkh as isize - pt;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for dkw in 0..self.kw {
                            let iw = ow as isize + dkw as isize - pl;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let src = ((ni * h + ih as usize) * w + iw as usize) * cin;
                            let dst = row + (dkh * self.kw + dkw) * cin;
                            cs[dst..dst + cin].copy_from_slice(&xs[src..src + cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<F>, n: usize, h: usize, w: usize) -> Array4<F> {
        let cin = self.cin;
        let (ho, wo, pt, pl) = self.out_hw(h, w);
        let k = self.kh * self.kw * cin;
        let mut dx = Array4::<F>::zeros((n, h, w, cin));
        let ds = dcols.as_slice().expect("contiguous dcols");
        let xs = dx.as_slice_mut().expect("contiguous dx");
        for ni in 0..n {
            for oh in 0..ho {
                for ow in 0..wo {
                    let row = ((ni * ho + oh) * wo + ow) * k;
                    for dkh in 0..self.kh {
                        let ih = oh as isize + dkh as isize - pt;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for dkw in 0..self.kw {
                            let iw = ow as isize + dkw as isize - pl;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let dst = ((ni * h + ih as usize) * w + iw as usize) * cin;
                            let src = row + (dkh * self.kw + dkw) * cin;
                            for ci in 0..cin {
                                xs[dst + ci] += ds[src + ci];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer; weights `[din, dout]`.
#[derive(Debug, Clone)]
pub struct Dense<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

/// One layer of a sequential network.
#[derive(Debug, Clone)]
pub enum Layer<F> {
    Conv2d(Conv2d<F>),
    /// 2x2 max pooling with stride 2 and ceil-mode output size (odd inputs
    /// keep a partial trailing window).
    MaxPool2,
    /// 2x nearest-neighbor upsampling.
    Upsample2,
    Dense(Dense<F>),
    Relu,
    Sigmoid,
    Flatten,
}

/// Per-layer state recorded during a forward pass, consumed by backward.
pub enum Cache<F> {
    Conv {
        cols: Option<Array2<F>>,
        n: usize,
        h: usize,
        w: usize,
    },
    Pool {
        argmax: Vec<u32>,
        n: usize,
        h: usize,
        w: usize,
        ch: usize,
    },
    Upsample {
        h: usize,
        w: usize,
    },
    Dense {
        input: Option<Array2<F>>,
    },
    Relu {
        output: Tensor<F>,
    },
    Sigmoid {
        output: Tensor<F>,
    },
    Flatten {
        h: usize,
        w: usize,
        ch: usize,
    },
}

/// Forward tape of a network evaluation: one cache entry per layer.
pub struct Tape<F> {
    pub(super) caches: Vec<Cache<F>>,
}

fn dims4<F>(x: &Array4<F>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

impl<F: Elem> Layer<F> {
    /// Forward one layer. `store_params_path` keeps the extra activations
    /// needed to later compute parameter gradients; pass `false` when only
    /// input gradients will be requested (e.g. a frozen model).
    pub fn forward(&self, x: Tensor<F>, store_params_path: bool) -> (Tensor<F>, Cache<F>) {
        match self {
            Layer::Conv2d(conv) => {
                let x4 = x.as_d4();
                let (n, h, w, _) = dims4(x4);
                let (ho, wo, _, _) = conv.out_hw(h, w);
                let cols = conv.im2col(x4);
                let mut out2 = cols.dot(&conv.w);
                out2 += &conv.b;
                let out = out2
                    .into_shape_with_order((n, ho, wo, conv.cout))
                    .expect("conv output reshape");
                let cache = Cache::Conv {
                    cols: store_params_path.then_some(cols),
                    n,
                    h,
                    w,
                };
                (Tensor::D4(out), cache)
            }
            Layer::MaxPool2 => {
                let x4 = x.as_d4();
                let (n, h, w, ch) = dims4(x4);
                let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
                let mut out = Array4::<F>::zeros((n, ho, wo, ch));
                let mut argmax = vec![0u32; n * ho * wo * ch];
                for ni in 0..n {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            for ci in 0..ch {
                                let mut best = F::neg_infinity();
                                let mut best_idx = 0u32;
                                for ih in 2 * oh..(2 * oh + 2).min(h) {
                                    for iw in 2 * ow..(2 * ow + 2).min(w) {
                                        let v = x4[[ni, ih, iw, ci]];
                                        if v > best {
                                            best = v;
                                            best_idx = (ih * w + iw) as u32;
                                        }
                                    }
                                }
                                out[[ni, oh, ow, ci]] = best;
                                argmax[((ni * ho + oh) * wo + ow) * ch + ci] = best_idx;
                            }
                        }
                    }
                }
                (
                    Tensor::D4(out),
                    Cache::Pool {
                        argmax,
                        n,
                        h,
                        w,
                        ch,
                    },
                )
            }
            Layer::Upsample2 => {
                let x4 = x.as_d4();
                let (n, h, w, ch) = dims4(x4);
                let mut out = Array4::<F>::zeros((n, 2 * h, 2 * w, ch));
                for ni in 0..n {
                    for oh in 0..2 * h {
                        for ow in 0..2 * w {
                            for ci in 0..ch {
                                out[[ni, oh, ow, ci]] = x4[[ni, oh / 2, ow / 2, ci]];
                            }
                        }
                    }
                }
                (Tensor::D4(out), Cache::Upsample { h, w })
            }
            Layer::Dense(dense) => {
                let x2 = x.into_d2();
                let mut out = x2.dot(&dense.w);
                out += &dense.b;
                let cache = Cache::Dense {
                    input: store_params_path.then_some(x2),
                };
                (Tensor::D2(out), cache)
            }
            Layer::Relu => {
                let zero = F::zero();
                let out = match x {
                    Tensor::D2(a) => Tensor::D2(a.mapv(|v| if v > zero { v } else { zero })),
                    Tensor::D4(a) => Tensor::D4(a.mapv(|v| if v > zero { v } else { zero })),
                };
                let cache = Cache::Relu {
                    output: out.clone(),
                };
                (out, cache)
            }
            Layer::Sigmoid => {
                let one = F::one();
                let f = |v: F| one / (one + (-v).exp());
                let out = match x {
                    Tensor::D2(a) => Tensor::D2(a.mapv(f)),
                    Tensor::D4(a) => Tensor::D4(a.mapv(f)),
                };
                let cache = Cache::Sigmoid {
                    output: out.clone(),
                };
                (out, cache)
            }
            Layer::Flatten => {
                let x4 = x.as_d4();
                let (_, h, w, ch) = dims4(x4);
                let out = x.into_d2();
                (Tensor::D2(out), Cache::Flatten { h, w, ch })
            }
        }
    }

    /// Backward one layer: given the upstream gradient, optionally fill
    /// parameter gradients and return the gradient w.r.t. the layer input.
    pub fn backward(
        &self,
        cache: &Cache<F>,
        dout: Tensor<F>,
        want_input_grad: bool,
        mut param_grads: Option<&mut (Array2<F>, Array1<F>)>,
    ) -> Option<Tensor<F>> {
        match (self, cache) {
            (Layer::Conv2d(conv), Cache::Conv { cols, n, h, w }) => {
                let d4 = dout.as_d4();
                let (_, ho, wo, _) = dims4(d4);
                let dout2 = d4
                    .to_owned()
                    .into_shape_with_order((n * ho * wo, conv.cout))
                    .expect("conv dout reshape");
                if let Some((dw, db)) = param_grads.as_deref_mut() {
                    let cols = cols
                        .as_ref()
                        .expect("parameter gradients require a parameter-path tape");
                    *dw += &cols.t().dot(&dout2);
                    *db += &dout2.sum_axis(Axis(0));
                }
                want_input_grad.then(|| {
                    let dcols = dout2.dot(&conv.w.t());
                    Tensor::D4(conv.col2im(&dcols, *n, *h, *w))
                })
            }
            (
                Layer::MaxPool2,
                Cache::Pool {
                    argmax,
                    n,
                    h,
                    w,
                    ch,
                },
            ) => {
                if !want_input_grad {
                    return None;
                }
                let d4 = dout.as_d4();
                let (_, ho, wo, _) = dims4(d4);
                let mut dx = Array4::<F>::zeros((*n, *h, *w, *ch));
                let xs = dx.as_slice_mut().expect("contiguous dx");
                let ds = d4.as_slice().expect("contiguous dout");
                for (i, &src) in argmax.iter().enumerate() {
                    let ci = i % ch;
                    let ni = i / (ho * wo * ch);
                    xs[(ni * h * w + src as usize) * ch + ci] += ds[i];
                }
                Some(Tensor::D4(dx))
            }
            (Layer::Upsample2, Cache::Upsample { h, w }) => {
                if !want_input_grad {
                    return None;
                }
                let d4 = dout.as_d4();
                let (n, _, _, ch) = dims4(d4);
                let mut dx = Array4::<F>::zeros((n, *h, *w, ch));
                for ni in 0..n {
                    for oh in 0..2 * h {
                        for ow in 0..2 * w {
                            for ci in 0..ch {
                                dx[[ni, oh / 2, ow / 2, ci]] += d4[[ni, oh, ow, ci]];
                            }
                        }
                    }
                }
                Some(Tensor::D4(dx))
            }
            (Layer::Dense(dense), Cache::Dense { input }) => {
                let d2 = dout.as_d2();
                if let Some((dw, db)) = param_grads.as_deref_mut() {
                    let x2 = input
                        .as_ref()
                        .expect("parameter gradients require a parameter-path tape");
                    *dw += &x2.t().dot(d2);
                    *db += &d2.sum_axis(Axis(0));
                }
                want_input_grad.then(|| Tensor::D2(d2.dot(&dense.w.t())))
            }
            (Layer::Relu, Cache::Relu { output }) => {
                if !want_input_grad {
                    return None;
                }
                let zero = F::zero();
                let one = F::one();
                Some(match (dout, output) {
                    (Tensor::D2(mut d), Tensor::D2(o)) => {
                        d.zip_mut_with(o, |g, &v| *g *= if v > zero { one } else { zero });
                        Tensor::D2(d)
                    }
                    (Tensor::D4(mut d), Tensor::D4(o)) => {
                        d.zip_mut_with(o, |g, &v| *g *= if v > zero { one } else { zero });
                        Tensor::D4(d)
                    }
                    _ => unreachable!("relu tape rank mismatch"),
                })
            }
            (Layer::Sigmoid, Cache::Sigmoid { output }) => {
                if !want_input_grad {
                    return None;
                }
                let one = F::one();
                Some(match (dout, output) {
                    (Tensor::D2(mut d), Tensor::D2(o)) => {
                        d.zip_mut_with(o, |g, &s| *g *= s * (one - s));
                        Tensor::D2(d)
                    }
                    (Tensor::D4(mut d), Tensor::D4(o)) => {
                        d.zip_mut_with(o, |g, &s| *g *= s * (one - s));
                        Tensor::D4(d)
                    }
                    _ => unreachable!("sigmoid tape rank mismatch"),
                })
            }
            (Layer::Flatten, Cache::Flatten { h, w, ch }) => {
                if !want_input_grad {
                    return None;
                }
                let d2 = dout.into_d2();
                let n = d2.nrows();
                Some(Tensor::D4(
                    d2.into_shape_with_order((n, *h, *w, *ch))
                        .expect("flatten backward reshape"),
                ))
            }
            _ => unreachable!("layer/cache mismatch"),
        }
    }

    pub fn params(&self) -> Option<(&Array2<F>, &Array1<F>)> {
        match self {
            Layer::Conv2d(conv) => Some((&conv.w, &conv.b)),
            Layer::Dense(dense) => Some((&dense.w, &dense.b)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Array2<F>, &mut Array1<F>)> {
        match self {
            Layer::Conv2d(conv) => Some((&mut conv.w, &mut conv.b)),
            Layer::Dense(dense) => Some((&mut dense.w, &mut dense.b)),
            _ => None,
        }
    }
}

/// Glorot-uniform initialization bound for a layer with the given fan sizes.
pub fn glorot_limit<F: Elem>(fan_in: usize, fan_out: usize) -> F {
    c::<F>((6.0 / (fan_in + fan_out) as f64).sqrt())
}
