//! Central finite-difference checks in f64. Each returns the worst
//! `|analytic − numeric| / max(|analytic| + |numeric|, 1e-4)` over all
//! checked entries.

use frozen_align::contrastive::{infonce_loss, normalize, normalize_backward};
use frozen_align::projection::layers::{batchnorm_backward, batchnorm_train, linear_backward, linear_forward, relu, relu_backward};
use frozen_align::projection::{ProjectionConfig, ProjectionNet};
use ndarray::{Array1, Array2};

use super::{gaussian, rng};

const H: f64 = 1e-6;
const FLOOR: f64 = 1e-4;

pub fn err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(FLOOR)
}

fn numeric(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + H) - f(x - H)) / (2.0 * H)
}

/// Worst error over every entry of `param`, perturbing it in place.
fn check_tensor(param: &mut [f64], analytic: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..param.len() {
        let x0 = param[k];
        let n = numeric(
            |v| {
                param[k] = v;
                loss(param)
            },
            x0,
        );
        param[k] = x0;
        worst = worst.max(err(analytic[k], n));
    }
    worst
}

fn weighted_sum(y: &Array2<f64>, c: &Array2<f64>) -> f64 {
    (y * c).sum()
}

pub fn linear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, i, o) = (4, 5, 3);
    let mut x = gaussian::<f64>(b, i, &mut r);
    let mut w = gaussian::<f64>(i, o, &mut r);
    let mut bias = gaussian::<f64>(1, o, &mut r).row(0).to_owned();
    let c = gaussian::<f64>(b, o, &mut r);
    let (dw, db, dx) = linear_backward(x.view(), w.view(), c.view(), true);
    let dx = dx.unwrap();

    let (w0, b0) = (w.clone(), bias.clone());
    let e_x = check_tensor(x.as_slice_mut().unwrap(), dx.as_slice().unwrap(), |xs| {
        let xm = Array2::from_shape_vec((b, i), xs.to_vec()).unwrap();
        weighted_sum(&linear_forward(xm.view(), w0.view(), b0.view()), &c)
    });
    let x0 = x.clone();
    let e_w = check_tensor(w.as_slice_mut().unwrap(), dw.as_slice().unwrap(), |ws| {
        let wm = Array2::from_shape_vec((i, o), ws.to_vec()).unwrap();
        weighted_sum(&linear_forward(x0.view(), wm.view(), b0.view()), &c)
    });
    let e_b = check_tensor(bias.as_slice_mut().unwrap(), db.as_slice().unwrap(), |bs| {
        let bv = Array1::from(bs.to_vec());
        weighted_sum(&linear_forward(x0.view(), w0.view(), bv.view()), &c)
    });
    e_x.max(e_w).max(e_b)
}

pub fn batchnorm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, d) = (6, 4);
    let eps = 1e-5;
    let mut x = gaussian::<f64>(b, d, &mut r) * 2.0 + 0.5;
    let mut gamma = gaussian::<f64>(1, d, &mut r).row(0).to_owned();
    let mut beta = gaussian::<f64>(1, d, &mut r).row(0).to_owned();
    let c = gaussian::<f64>(b, d, &mut r);
    let (xhat, _, stats) = batchnorm_train(x.view(), gamma.view(), beta.view(), eps);
    let (dx, dg, dbeta) = batchnorm_backward(c.view(), xhat.view(), gamma.view(), stats.inv_std.view());

    let (g0, b0) = (gamma.clone(), beta.clone());
    let e_x = check_tensor(x.as_slice_mut().unwrap(), dx.as_slice().unwrap(), |xs| {
        let xm = Array2::from_shape_vec((b, d), xs.to_vec()).unwrap();
        weighted_sum(&batchnorm_train(xm.view(), g0.view(), b0.view(), eps).1, &c)
    });
    let x0 = x.clone();
    let e_g = check_tensor(gamma.as_slice_mut().unwrap(), dg.as_slice().unwrap(), |gs| {
        let gv = Array1::from(gs.to_vec());
        weighted_sum(&batchnorm_train(x0.view(), gv.view(), b0.view(), eps).1, &c)
    });
    let e_b = check_tensor(beta.as_slice_mut().unwrap(), dbeta.as_slice().unwrap(), |bs| {
        let bv = Array1::from(bs.to_vec());
        weighted_sum(&batchnorm_train(x0.view(), g0.view(), bv.view(), eps).1, &c)
    });
    e_x.max(e_g).max(e_b)
}

pub fn relu_layer(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, d) = (5, 4);
    // keep entries away from the kink
    let mut x = gaussian::<f64>(b, d, &mut r).mapv(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let c = gaussian::<f64>(b, d, &mut r);
    let mut grad = c.clone();
    relu_backward(&mut grad, x.view());
    check_tensor(x.as_slice_mut().unwrap(), grad.as_slice().unwrap(), |xs| {
        let mut xm = Array2::from_shape_vec((b, d), xs.to_vec()).unwrap();
        relu(&mut xm);
        weighted_sum(&xm, &c)
    })
}

pub fn normalization(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, d) = (4, 5);
    let mut x = gaussian::<f64>(b, d, &mut r);
    let c = gaussian::<f64>(b, d, &mut r);
    let analytic = normalize_backward(c.view(), x.view()).unwrap();
    check_tensor(x.as_slice_mut().unwrap(), analytic.as_slice().unwrap(), |xs| {
        let xm = Array2::from_shape_vec((b, d), xs.to_vec()).unwrap();
        weighted_sum(normalize(xm.view()).unwrap().rows(), &c)
    })
}

/// InfoNCE composed with normalization, w.r.t. both raw inputs.
pub fn contrastive(seed: u64, tau: f64) -> f64 {
    let mut r = rng(seed);
    let (b, d) = (6, 5);
    let mut img = gaussian::<f64>(b, d, &mut r);
    let mut txt = gaussian::<f64>(b, d, &mut r);
    let loss = |i: &Array2<f64>, t: &Array2<f64>| {
        infonce_loss(&normalize(i.view()).unwrap(), &normalize(t.view()).unwrap(), tau).unwrap()
    };
    let out = loss(&img, &txt);
    let g_img = normalize_backward(out.grad_z_img.view(), img.view()).unwrap();
    let g_txt = normalize_backward(out.grad_z_txt.view(), txt.view()).unwrap();
    let t0 = txt.clone();
    let e_i = check_tensor(img.as_slice_mut().unwrap(), g_img.as_slice().unwrap(), |v| {
        loss(&Array2::from_shape_vec((b, d), v.to_vec()).unwrap(), &t0).total_loss
    });
    let i0 = img.clone();
    let e_t = check_tensor(txt.as_slice_mut().unwrap(), g_txt.as_slice().unwrap(), |v| {
        loss(&i0, &Array2::from_shape_vec((b, d), v.to_vec()).unwrap()).total_loss
    });
    e_i.max(e_t)
}

/// Text through the projection (train mode, fixed dropout masks), InfoNCE
/// against fixed image features; every parameter tensor is checked.
pub fn full_path(seed: u64, batch_norm: bool, dropout_p: f64) -> f64 {
    let mut r = rng(seed);
    let (b, input, hidden, output) = (8, 6, 8, 5);
    let cfg = ProjectionConfig { batch_norm, dropout_p, seed, ..ProjectionConfig::new(input, hidden, output, 3) };
    let mut net = ProjectionNet::<f64>::init(cfg).unwrap();
    // perturb BN scale/shift away from the identity so their gradients matter
    if batch_norm {
        let kinds = net.param_kinds();
        for (slice, kind) in net.param_slices_mut().into_iter().zip(kinds) {
            if kind != frozen_align::projection::ParamKind::Weight {
                for v in slice.iter_mut() {
                    *v += 0.3 * gaussian::<f64>(1, 1, &mut r)[[0, 0]];
                }
            }
        }
    }
    let text = gaussian::<f64>(b, input, &mut r);
    let z_img = normalize(gaussian::<f64>(b, output, &mut r).view()).unwrap();
    let tau = 0.5;

    let loss_of = |net: &mut ProjectionNet<f64>| {
        net.set_passes(0);
        let (y, cache) = net.forward_train(text.view()).unwrap();
        let z_txt = normalize(y.view()).unwrap();
        let out = infonce_loss(&z_img, &z_txt, tau).unwrap();
        (out, y, cache)
    };
    let (out, y, cache) = loss_of(&mut net);
    let upstream = normalize_backward(out.grad_z_txt.view(), y.view()).unwrap();
    let grads = net.backward(&cache, upstream.view()).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();

    let mut worst = 0.0f64;
    for (t, a) in analytic.iter().enumerate() {
        for k in 0..a.len() {
            let x0 = net.param_slices()[t][k];
            let mut eval = |v: f64| {
                net.param_slices_mut()[t][k] = v;
                loss_of(&mut net).0.total_loss
            };
            let n = (eval(x0 + H) - eval(x0 - H)) / (2.0 * H);
            net.param_slices_mut()[t][k] = x0;
            worst = worst.max(err(a[k], n));
        }
    }
    worst
}
