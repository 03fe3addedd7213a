use approx::assert_relative_eq;
use ndarray::{Array2, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::train::{cross_entropy_row, luring_loss_row, TeacherSignal};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(0.0..1.0))
}

/// Mean cross-entropy of a network on (x, y), as a pure function of params.
fn ce_loss(net: &Network<f64>, x: &Array2<f64>, y: &[usize]) -> f64 {
    let out = net.forward_flat(x.view()).unwrap();
    let mut total = 0.0;
    for (row, &yi) in out.rows().into_iter().zip(y) {
        let (l, _) = cross_entropy_row(row.as_slice().unwrap(), yi);
        total += l;
    }
    total / y.len() as f64
}

/// Analytic parameter gradient of the mean cross-entropy.
fn ce_param_grads(net: &Network<f64>, x: &Array2<f64>, y: &[usize]) -> Vec<f64> {
    let xt = net.to_input_tensor(x.view()).unwrap();
    let (out, tape) = net.forward_tape(xt, true);
    let h = out.into_d2();
    let mut dh = Array2::<f64>::zeros(h.raw_dim());
    for (i, row) in h.rows().into_iter().enumerate() {
        let (_, g) = cross_entropy_row(row.as_slice().unwrap(), y[i]);
        for (j, gv) in g.into_iter().enumerate() {
            dh[[i, j]] = gv / y.len() as f64;
        }
    }
    let mut grads = ParamGrads::zeros_like(net);
    net.backward(&tape, Tensor::D2(dh), false, Some(&mut grads));
    grads.flat_f64()
}

fn fd_param_grads(
    net: &mut Network<f64>,
    mut loss: impl FnMut(&Network<f64>) -> f64,
    h: f64,
) -> Vec<f64> {
    let params = net.params_flat_f64();
    let mut grads = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] = params[i] + h;
        net.set_params_flat_f64(&p).unwrap();
        let up = loss(net);
        p[i] = params[i] - h;
        net.set_params_flat_f64(&p).unwrap();
        let down = loss(net);
        grads.push((up - down) / (2.0 * h));
    }
    net.set_params_flat_f64(&params).unwrap();
    grads
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let denom = a.abs().max(n.abs()).max(1e-8);
            (a - n).abs() / denom
        })
        .fold(0.0, f64::max)
}

#[test]
fn conv_same_matches_naive_loops() {
    let mut r = rng(1);
    let spec = NetworkSpec {
        input: InputShape::Image { h: 5, w: 6, c: 2 },
        layers: vec![LayerSpec::Conv2d {
            cin: 2,
            cout: 3,
            kh: 3,
            kw: 3,
            pad: PadMode::Same,
        }],
    };
    let net = Network::<f64>::from_spec(&spec, &mut r);
    let x = Array4::from_shape_fn((2, 5, 6, 2), |_| r.random_range(-1.0..1.0));
    let out = net.forward(Tensor::D4(x.clone())).into_d2();
    let Layer::Conv2d(conv) = &net.layers[0] else {
        panic!()
    };
    // naive direct convolution
    for n in 0..2 {
        for oh in 0..5usize {
            for ow in 0..6usize {
                for co in 0..3 {
                    let mut acc = conv.b[co];
                    for kh in 0..3usize {
                        for kw in 0..3usize {
                            let ih = oh as isize + kh as isize - 1;
                            let iw = ow as isize + kw as isize - 1;
                            if ih < 0 || ih >= 5 || iw < 0 || iw >= 6 {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += x[[n, ih as usize, iw as usize, ci]]
                                    * conv.w[[(kh * 3 + kw) * 2 + ci, co]];
                            }
                        }
                    }
                    let flat = (oh * 6 + ow) * 3 + co;
                    assert_relative_eq!(out[[n, flat]], acc, max_relative = 1e-12);
                }
            }
        }
    }
}

#[test]
fn cnn_parameter_gradients_match_finite_differences() {
    let mut r = rng(2);
    // exercises same-conv, relu, ceil-mode pooling (5 -> 3), flatten, dense
    let spec = NetworkSpec {
        input: InputShape::Image { h: 5, w: 5, c: 1 },
        layers: vec![
            LayerSpec::Conv2d {
                cin: 1,
                cout: 2,
                kh: 3,
                kw: 3,
                pad: PadMode::Same,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { din: 18, dout: 4 },
        ],
    };
    let mut net = Network::<f64>::from_spec(&spec, &mut r);
    let x = random_batch(&mut r, 3, 25);
    let y = vec![0, 2, 3];
    let analytic = ce_param_grads(&net, &x, &y);
    let numeric = fd_param_grads(&mut net, |n| ce_loss(n, &x, &y), 1e-6);
    assert!(
        max_rel_err(&analytic, &numeric) < 1e-6,
        "max rel err {}",
        max_rel_err(&analytic, &numeric)
    );
}

#[test]
fn autoencoder_shape_gradients_match_finite_differences() {
    let mut r = rng(3);
    // exercises valid conv, upsampling and sigmoid on a 7x7 input
    let spec = NetworkSpec {
        input: InputShape::Image { h: 7, w: 7, c: 1 },
        layers: vec![
            LayerSpec::Conv2d {
                cin: 1,
                cout: 2,
                kh: 3,
                kw: 3,
                pad: PadMode::Same,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2, // 7 -> 4
            LayerSpec::Conv2d {
                cin: 2,
                cout: 2,
                kh: 3,
                kw: 3,
                pad: PadMode::Valid,
            }, // 4 -> 2
            LayerSpec::Upsample2, // 2 -> 4
            LayerSpec::Conv2d {
                cin: 2,
                cout: 1,
                kh: 3,
                kw: 3,
                pad: PadMode::Same,
            },
            LayerSpec::Sigmoid,
            LayerSpec::Flatten,
            LayerSpec::Dense { din: 16, dout: 3 },
        ],
    };
    let mut net = Network::<f64>::from_spec(&spec, &mut r);
    let x = random_batch(&mut r, 2, 49);
    let y = vec![1, 0];
    let analytic = ce_param_grads(&net, &x, &y);
    let numeric = fd_param_grads(&mut net, |n| ce_loss(n, &x, &y), 1e-6);
    assert!(
        max_rel_err(&analytic, &numeric) < 1e-6,
        "max rel err {}",
        max_rel_err(&analytic, &numeric)
    );
}

#[test]
fn input_gradients_match_finite_differences() {
    let mut r = rng(4);
    let spec = NetworkSpec {
        input: InputShape::Image { h: 4, w: 4, c: 1 },
        layers: vec![
            LayerSpec::Conv2d {
                cin: 1,
                cout: 2,
                kh: 3,
                kw: 3,
                pad: PadMode::Same,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { din: 32, dout: 3 },
        ],
    };
    let net = Network::<f64>::from_spec(&spec, &mut r);
    let x = random_batch(&mut r, 2, 16);
    let y = vec![2, 0];

    let xt = net.to_input_tensor(x.view()).unwrap();
    let (out, tape) = net.forward_tape(xt, false);
    let h = out.into_d2();
    let mut dh = Array2::<f64>::zeros(h.raw_dim());
    for (i, row) in h.rows().into_iter().enumerate() {
        let (_, g) = cross_entropy_row(row.as_slice().unwrap(), y[i]);
        for (j, gv) in g.into_iter().enumerate() {
            dh[[i, j]] = gv;
        }
    }
    let dx = net
        .backward(&tape, Tensor::D2(dh), true, None)
        .unwrap()
        .into_d2();

    let h_step = 1e-6;
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let mut xp = x.clone();
            xp[[i, j]] += h_step;
            let up: f64 = {
                let o = net.forward_flat(xp.view()).unwrap();
                cross_entropy_row(o.row(i).as_slice().unwrap(), y[i]).0
            };
            xp[[i, j]] = x[[i, j]] - h_step;
            let down: f64 = {
                let o = net.forward_flat(xp.view()).unwrap();
                cross_entropy_row(o.row(i).as_slice().unwrap(), y[i]).0
            };
            let num = (up - down) / (2.0 * h_step);
            let denom = dx[[i, j]].abs().max(num.abs()).max(1e-8);
            assert!(
                (dx[[i, j]] - num).abs() / denom < 1e-5,
                "input grad mismatch at ({i},{j}): {} vs {}",
                dx[[i, j]],
                num
            );
        }
    }
}

#[test]
fn luring_loss_parameter_gradients_match_finite_differences() {
    let mut r = rng(5);
    let spec = NetworkSpec {
        input: InputShape::Flat(6),
        layers: vec![
            LayerSpec::Dense { din: 6, dout: 8 },
            LayerSpec::Relu,
            LayerSpec::Dense { din: 8, dout: 4 },
        ],
    };
    let mut net = Network::<f64>::from_spec(&spec, &mut r);
    let x = random_batch(&mut r, 3, 6);
    let teachers = vec![
        TeacherSignal::new(0, 2).unwrap(),
        TeacherSignal::new(3, 1).unwrap(),
        TeacherSignal::new(1, 0).unwrap(),
    ];
    let lambda = 0.7;

    let loss_fn = |net: &Network<f64>| -> f64 {
        let out = net.forward_flat(x.view()).unwrap();
        let mut total = 0.0;
        for (row, t) in out.rows().into_iter().zip(&teachers) {
            let (l, _) = luring_loss_row(row.as_slice().unwrap(), *t, lambda).unwrap();
            total += l;
        }
        total / teachers.len() as f64
    };

    let xt = net.to_input_tensor(x.view()).unwrap();
    let (out, tape) = net.forward_tape(xt, true);
    let h = out.into_d2();
    let mut dh = Array2::<f64>::zeros(h.raw_dim());
    for (i, row) in h.rows().into_iter().enumerate() {
        let (_, g) = luring_loss_row(row.as_slice().unwrap(), teachers[i], lambda).unwrap();
        for (j, gv) in g.into_iter().enumerate() {
            dh[[i, j]] = gv / teachers.len() as f64;
        }
    }
    let mut grads = ParamGrads::zeros_like(&net);
    net.backward(&tape, Tensor::D2(dh), false, Some(&mut grads));
    let analytic = grads.flat_f64();
    let numeric = fd_param_grads(&mut net, loss_fn, 1e-6);
    assert!(
        max_rel_err(&analytic, &numeric) < 1e-6,
        "max rel err {}",
        max_rel_err(&analytic, &numeric)
    );
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut r = rng(6);
    let spec = NetworkSpec {
        input: InputShape::Flat(4),
        layers: vec![LayerSpec::Dense { din: 4, dout: 1 }],
    };
    let mut net = Network::<f64>::from_spec(&spec, &mut r);
    let mut adam = Adam::new(&net);
    let x = random_batch(&mut r, 8, 4);
    // drive output toward 3.0 everywhere
    let mut last = f64::INFINITY;
    for step in 0..200 {
        let xt = net.to_input_tensor(x.view()).unwrap();
        let (out, tape) = net.forward_tape(xt, true);
        let o = out.into_d2();
        let diff = o.mapv(|v| v - 3.0);
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / 8.0;
        let mut grads = ParamGrads::zeros_like(&net);
        net.backward(
            &tape,
            Tensor::D2(diff.mapv(|d| 2.0 * d / 8.0)),
            false,
            Some(&mut grads),
        );
        adam.step(&mut net, &grads, 0.05);
        if step % 50 == 0 {
            assert!(loss <= last + 1e-9, "loss increased: {last} -> {loss}");
            last = loss;
        }
    }
    let out = net.forward_flat(x.view()).unwrap();
    for v in out.iter() {
        assert_relative_eq!(*v, 3.0, max_relative = 0.05);
    }
}

#[test]
fn pool_ceil_mode_keeps_partial_windows() {
    let x = Array4::from_shape_fn((1, 3, 3, 1), |(_, i, j, _)| (i * 3 + j) as f64);
    let (out, _) = Layer::<f64>::MaxPool2.forward(Tensor::D4(x), false);
    let o = out.as_d4();
    assert_eq!(o.shape(), &[1, 2, 2, 1]);
    assert_eq!(o[[0, 0, 0, 0]], 4.0); // max of 2x2 block
    assert_eq!(o[[0, 0, 1, 0]], 5.0); // partial column window
    assert_eq!(o[[0, 1, 0, 0]], 7.0); // partial row window
    assert_eq!(o[[0, 1, 1, 0]], 8.0); // single corner cell
}

#[test]
fn lr_schedule_is_piecewise_constant() {
    let s = LrSchedule(vec![(0, 1e-3), (45, 2e-4), (58, 4e-4)]);
    assert_eq!(s.at(0), 1e-3);
    assert_eq!(s.at(44), 1e-3);
    assert_eq!(s.at(45), 2e-4);
    assert_eq!(s.at(57), 2e-4);
    assert_eq!(s.at(58), 4e-4);
    assert_eq!(s.at(63), 4e-4);
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(7);
    let spec = NetworkSpec {
        input: InputShape::Image { h: 6, w: 6, c: 1 },
        layers: vec![
            LayerSpec::Conv2d {
                cin: 1,
                cout: 3,
                kh: 3,
                kw: 3,
                pad: PadMode::Same,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { din: 27, dout: 5 },
        ],
    };
    let net = Network::<f32>::from_spec(&spec, &mut r);
    let x = Array2::from_shape_fn((4, 36), |_| r.random_range(0.0f32..1.0));
    let a = net.forward_flat(x.view()).unwrap();
    let b = net.forward_flat(x.view()).unwrap();
    assert_eq!(a, b);
    // duplicated rows produce identical logit rows
    let mut dup = Array2::zeros((2, 36));
    dup.row_mut(0).assign(&x.row(0));
    dup.row_mut(1).assign(&x.row(0));
    let o = net.forward_flat(dup.view()).unwrap();
    assert_eq!(o.row(0), o.row(1));
}
