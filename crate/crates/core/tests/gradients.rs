mod common;

use common::{away_from_zero, rng, uniform};
use metacount::autodiff::check::{check_gradients, numerical_gradient, relative_error, DEFAULT_STEP};
use metacount::autodiff::{ConvGeometry, Graph, Op, Tensor, Var};
use metacount::nn::{self, init_model, NetConfig, Trainable};
use metacount::Result;
use proptest::prelude::*;

const TOL: f64 = 1e-4;

/// Reduces a tensor node to a scalar with a fixed random weighting so every
/// output element carries a distinct adjoint.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let w = uniform(g.shape(x), -1.0, 1.0, &mut r);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn assert_check(name: &str, build: impl Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor]) {
    let report = check_gradients(build, inputs, DEFAULT_STEP).unwrap();
    assert!(
        report.max_relative_error < TOL,
        "{name}: max relative error {:.3e} at {:?}",
        report.max_relative_error,
        report.worst
    );
}

fn geometry(stride: usize, dilation: usize, kernel: usize) -> ConvGeometry {
    ConvGeometry {
        stride,
        dilation,
        padding: dilation * (kernel - 1) / 2,
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut r = rng(1);
    let a = uniform(&[3, 4], -2.0, 2.0, &mut r);
    let b = uniform(&[3, 4], 0.5, 2.0, &mut r);
    let binary: [(&str, fn(&mut Graph, Var, Var) -> Result<Var>); 4] = [
        ("add", |g, x, y| g.add(x, y)),
        ("sub", |g, x, y| g.sub(x, y)),
        ("mul", |g, x, y| g.mul(x, y)),
        ("div", |g, x, y| g.div(x, y)),
    ];
    for (name, op) in binary {
        assert_check(name, |g, v| { let o = op(g, v[0], v[1])?; weighted_sum(g, o, 7) }, &[a.clone(), b.clone()]);
    }
    let unary: [(&str, fn(&mut Graph, Var) -> Result<Var>); 6] = [
        ("scale", |g, x| g.scale(x, -1.7)),
        ("square", |g, x| g.square(x)),
        ("sqrt", |g, x| g.sqrt(x)),
        ("relu", |g, x| g.relu(x)),
        ("transpose", |g, x| g.transpose(x)),
        ("reshape", |g, x| g.reshape(x, &[2, 6])),
    ];
    let positive = uniform(&[3, 4], 0.3, 3.0, &mut r);
    let kinked = away_from_zero(&[3, 4], 0.1, 2.0, &mut r);
    for (name, op) in unary {
        let input = match name {
            "sqrt" => positive.clone(),
            "relu" => kinked.clone(),
            _ => a.clone(),
        };
        assert_check(name, |g, v| { let o = op(g, v[0])?; weighted_sum(g, o, 8) }, &[input]);
    }
}

#[test]
fn reductions_and_broadcasts_match_finite_differences() {
    let mut r = rng(2);
    let x = uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
    assert_check("sum", |g, v| { let s = g.sum(v[0])?; g.square(s).and_then(|q| g.sum(q)) }, &[x.clone()]);
    assert_check("mean", |g, v| { let s = g.mean(v[0])?; g.square(s).and_then(|q| g.sum(q)) }, &[x.clone()]);
    let s = uniform(&[1], 0.5, 1.5, &mut r);
    assert_check("expand", |g, v| { let e = g.expand(v[0], &[2, 5])?; weighted_sum(g, e, 3) }, &[s]);
    let b = uniform(&[2], -1.0, 1.0, &mut r);
    assert_check(
        "add_channel_bias",
        |g, v| { let o = g.add_channel_bias(v[0], v[1])?; weighted_sum(g, o, 4) },
        &[x.clone(), b.clone()],
    );
    assert_check("channel_sum", |g, v| { let o = g.record(Op::ChannelSum, &[v[0]])?; weighted_sum(g, o, 5) }, &[x]);
    assert_check(
        "channel_broadcast",
        |g, v| { let o = g.record(Op::ChannelBroadcast { h: 3, w: 2 }, &[v[0]])?; weighted_sum(g, o, 6) },
        &[b],
    );
}

#[test]
fn matmul_matches_finite_differences() {
    let mut r = rng(3);
    let a = uniform(&[3, 4], -1.0, 1.0, &mut r);
    let b = uniform(&[4, 2], -1.0, 1.0, &mut r);
    assert_check("matmul", |g, v| { let o = g.matmul(v[0], v[1])?; weighted_sum(g, o, 9) }, &[a, b]);
}

#[test]
fn convolutions_match_finite_differences() {
    let mut r = rng(4);
    for &(stride, dilation, kernel) in &[(1, 1, 3), (2, 1, 3), (1, 2, 3), (2, 2, 3), (1, 1, 1)] {
        let geo = geometry(stride, dilation, kernel);
        let x = uniform(&[2, 7, 6], -1.0, 1.0, &mut r);
        let w = uniform(&[3, 2, kernel, kernel], -1.0, 1.0, &mut r);
        let name = format!("conv2d s{stride} d{dilation} k{kernel}");
        assert_check(&name, |g, v| { let o = g.conv2d(v[0], v[1], geo)?; weighted_sum(g, o, 10) }, &[x.clone(), w.clone()]);

        let out_h = geo.output_extent(7, kernel).unwrap();
        let out_w = geo.output_extent(6, kernel).unwrap();
        let gout = uniform(&[3, out_h, out_w], -1.0, 1.0, &mut r);
        let op = Op::Conv2dInputGrad { geometry: geo, in_h: 7, in_w: 6 };
        assert_check(
            &format!("{name} input-adjoint"),
            |g, v| { let o = g.record(op.clone(), &[v[0], v[1]])?; weighted_sum(g, o, 11) },
            &[gout.clone(), w.clone()],
        );
        let op = Op::Conv2dWeightGrad { geometry: geo, kernel };
        assert_check(
            &format!("{name} weight-adjoint"),
            |g, v| { let o = g.record(op.clone(), &[v[0], v[1]])?; weighted_sum(g, o, 12) },
            &[x.clone(), gout.clone()],
        );
    }
}

#[test]
fn three_layer_perceptron_matches_finite_differences() {
    let mut r = rng(5);
    let x = uniform(&[4, 5], -1.0, 1.0, &mut r);
    let w1 = uniform(&[5, 6], -1.0, 1.0, &mut r);
    let w2 = uniform(&[6, 6], -1.0, 1.0, &mut r);
    let w3 = uniform(&[6, 1], -1.0, 1.0, &mut r);
    let xs = x.clone();
    assert_check(
        "mlp",
        move |g, v| {
            let x = g.constant(xs.clone());
            let h = g.matmul(x, v[0])?;
            let h = g.relu(h)?;
            let h = g.matmul(h, v[1])?;
            let h = g.relu(h)?;
            let o = g.matmul(h, v[2])?;
            let sq = g.square(o)?;
            g.mean(sq)
        },
        &[w1, w2, w3],
    );
}

#[test]
fn toy_network_loss_matches_finite_differences() {
    let mut cfg = NetConfig::default();
    cfg.seed = 3;
    // larger estimator weights so the check is not dominated by tiny gradients
    cfg.init_std = 0.2;
    let model = init_model(&cfg).unwrap();
    let mut r = rng(6);
    let images: Vec<Tensor> = (0..2).map(|_| uniform(&[16, 16], 0.0, 1.0, &mut r)).collect();
    let targets: Vec<Tensor> = (0..2).map(|_| uniform(&[4, 4], 0.0, 0.3, &mut r)).collect();
    let params: Vec<Tensor> = model.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let report = check_gradients(
        |g, vars| {
            let m = model.with_all(vars.iter().map(|v| g.value(*v).clone()).collect())?;
            let bound = nn::BoundParams {
                extractor: nn::unflatten(&vars[..2 * m.extractor.len()]),
                estimator: nn::unflatten(&vars[2 * m.extractor.len()..]),
            };
            let batch: Vec<(&Tensor, &Tensor)> = images.iter().zip(&targets).collect();
            nn::episode_loss(g, &m, &bound, &batch, None)
        },
        &params,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_relative_error < TOL, "toy net: {:.3e} at {:?}", report.max_relative_error, report.worst);
}

#[test]
fn backward_is_linear() {
    let mut r = rng(7);
    let x = uniform(&[3, 3], -1.0, 1.0, &mut r);
    let (a, b) = (0.7, -2.3);
    let mut g = Graph::new();
    let v = g.variable(x);
    let sq = g.square(v).unwrap();
    let f = g.sum(sq).unwrap();
    let cube = g.mul(sq, v).unwrap();
    let h = g.mean(cube).unwrap();
    let fa = g.scale(f, a).unwrap();
    let hb = g.scale(h, b).unwrap();
    let combo = g.add(fa, hb).unwrap();
    let gf = g.backward(f, &[v]).unwrap().into_tensors().remove(0);
    let gh = g.backward(h, &[v]).unwrap().into_tensors().remove(0);
    let gc = g.backward(combo, &[v]).unwrap().into_tensors().remove(0);
    for i in 0..9 {
        let expect = a * gf.data()[i] + b * gh.data()[i];
        assert!((gc.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn hessian_vector_product_of_quadratic_is_closed_form() {
    // f(x) = sum((A x)^2), grad = 2 A^T A x, d/dx <v, grad> = 2 A^T A v
    let mut r = rng(8);
    let a = uniform(&[4, 3], -1.0, 1.0, &mut r);
    let x0 = uniform(&[3, 1], -1.0, 1.0, &mut r);
    let v0 = uniform(&[3, 1], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let x = g.variable(x0);
    let av = g.constant(a.clone());
    let ax = g.matmul(av, x).unwrap();
    let sq = g.square(ax).unwrap();
    let f = g.sum(sq).unwrap();
    let grad = g.backward_differentiable(f, &[x]).unwrap()[0];
    let vv = g.constant(v0.clone());
    let dot = g.mul(grad, vv).unwrap();
    let s = g.sum(dot).unwrap();
    let hv = g.backward(s, &[x]).unwrap().into_tensors().remove(0);

    for i in 0..3 {
        let mut expect = 0.0;
        for j in 0..3 {
            let mut ata = 0.0;
            for k in 0..4 {
                ata += a.data()[k * 3 + i] * a.data()[k * 3 + j];
            }
            expect += 2.0 * ata * v0.data()[j];
        }
        assert!(relative_error(hv.data()[i], expect) < 1e-8, "{} vs {expect}", hv.data()[i]);
    }
}

#[test]
fn second_order_through_conv_matches_finite_differences_of_gradient() {
    // d/dw <v, grad_w L(w)> where L = sum(conv(relu(conv(x, w1)), w2)^2)
    let mut r = rng(9);
    let x = uniform(&[1, 6, 6], -1.0, 1.0, &mut r);
    let w1 = away_from_zero(&[2, 1, 3, 3], 0.2, 1.0, &mut r);
    let w2 = uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r);
    let probe: Vec<Tensor> = vec![uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut r), uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r)];
    let geo1 = geometry(1, 1, 3);
    let geo2 = geometry(1, 2, 3);
    let build_loss = |g: &mut Graph, w: &[Var]| -> Result<Var> {
        let xv = g.constant(x.clone());
        let h = g.conv2d(xv, w[0], geo1)?;
        let h = g.relu(h)?;
        let o = g.conv2d(h, w[1], geo2)?;
        let sq = g.square(o)?;
        g.sum(sq)
    };
    // directional derivative of the gradient, via reverse-over-reverse
    let hvp = |g: &mut Graph, w: &[Var]| -> Result<Var> {
        let l = build_loss(g, w)?;
        let grads = g.backward_differentiable(l, w)?;
        let mut acc = None;
        for (gr, p) in grads.iter().zip(&probe) {
            let pv = g.constant(p.clone());
            let d = g.mul(*gr, pv)?;
            let s = g.sum(d)?;
            acc = Some(match acc {
                None => s,
                Some(a) => g.add(a, s)?,
            });
        }
        Ok(acc.unwrap())
    };
    let report = check_gradients(hvp, &[w1, w2], DEFAULT_STEP).unwrap();
    assert!(report.max_relative_error < TOL, "{:.3e}", report.max_relative_error);
}

#[test]
fn meta_gradient_of_linear_model_matches_finite_differences_through_update() {
    // model y = a * x + b, inner loss on (x_tr, y_tr), outer loss on (x_te, y_te)
    let (xs_tr, ys_tr) = ([0.5, -1.0, 2.0], [1.0, 0.0, 3.5]);
    let (xs_te, ys_te) = ([1.5, -0.5], [2.0, 0.2]);
    let alpha = 0.05;
    let loss = |a: f64, b: f64, xs: &[f64], ys: &[f64]| -> f64 {
        xs.iter().zip(ys).map(|(x, y)| (a * x + b - y).powi(2)).sum()
    };
    let inner_grad = |a: f64, b: f64| -> (f64, f64) {
        let mut ga = 0.0;
        let mut gb = 0.0;
        for (x, y) in xs_tr.iter().zip(&ys_tr) {
            let r = a * x + b - y;
            ga += 2.0 * r * x;
            gb += 2.0 * r;
        }
        (ga, gb)
    };
    let meta_loss = |p: &[Tensor]| -> Result<f64> {
        let (a, b) = (p[0].item(), p[1].item());
        let (ga, gb) = inner_grad(a, b);
        Ok(loss(a - alpha * ga, b - alpha * gb, &xs_te, &ys_te))
    };
    let theta = [Tensor::scalar(0.3), Tensor::scalar(-0.2)];

    let mut g = Graph::new();
    let a = g.variable(theta[0].clone());
    let b = g.variable(theta[1].clone());
    let sq_loss = |g: &mut Graph, a: Var, b: Var, xs: &[f64], ys: &[f64]| -> Var {
        let x = g.constant(Tensor::new(vec![xs.len()], xs.to_vec()).unwrap());
        let y = g.constant(Tensor::new(vec![ys.len()], ys.to_vec()).unwrap());
        let ae = g.expand(a, &[xs.len()]).unwrap();
        let be = g.expand(b, &[xs.len()]).unwrap();
        let ax = g.mul(ae, x).unwrap();
        let pred = g.add(ax, be).unwrap();
        let r = g.sub(pred, y).unwrap();
        let sq = g.square(r).unwrap();
        g.sum(sq).unwrap()
    };
    let inner = sq_loss(&mut g, a, b, &xs_tr, &ys_tr);
    let grads = g.backward_differentiable(inner, &[a, b]).unwrap();
    let sa = g.scale(grads[0], alpha).unwrap();
    let sb = g.scale(grads[1], alpha).unwrap();
    let a2 = g.sub(a, sa).unwrap();
    let b2 = g.sub(b, sb).unwrap();
    let outer = sq_loss(&mut g, a2, b2, &xs_te, &ys_te);
    let analytic = g.backward(outer, &[a, b]).unwrap().into_tensors();

    for k in 0..2 {
        let fd = numerical_gradient(&meta_loss, &theta, k, DEFAULT_STEP).unwrap().item();
        assert!(relative_error(analytic[k].item(), fd) < 1e-5, "param {k}: {} vs {fd}", analytic[k].item());
    }
}

#[test]
fn gradients_are_deterministic() {
    let cfg = NetConfig::default();
    let model = init_model(&cfg).unwrap();
    let mut r = rng(10);
    let img = uniform(&[16, 16], 0.0, 1.0, &mut r);
    let gt = uniform(&[4, 4], 0.0, 0.2, &mut r);
    let run = || {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::All);
        let l = nn::episode_loss(&mut g, &model, &bound, &[(&img, &gt)], None).unwrap();
        g.backward(l, &bound.all_vars()).unwrap().into_tensors()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_gradient_is_linear_in_upstream_weights(
        seed in 0u64..1000,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let mut r = rng(seed);
        let x = uniform(&[2, 5, 5], -1.0, 1.0, &mut r);
        let w = uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r);
        let u = uniform(&[2, 5, 5], -1.0, 1.0, &mut r);
        let v = uniform(&[2, 5, 5], -1.0, 1.0, &mut r);
        let grad_for = |weights: &Tensor| {
            let mut g = Graph::new();
            let wv = g.variable(w.clone());
            let xv = g.constant(x.clone());
            let o = g.conv2d(xv, wv, geometry(1, 1, 3)).unwrap();
            let c = g.constant(weights.clone());
            let p = g.mul(o, c).unwrap();
            let s = g.sum(p).unwrap();
            g.backward(s, &[wv]).unwrap().into_tensors().remove(0)
        };
        let combo = u.zip_map(&v, |p, q| a * p + b * q);
        let (gu, gv, gc) = (grad_for(&u), grad_for(&v), grad_for(&combo));
        for i in 0..gc.numel() {
            let expect = a * gu.data()[i] + b * gv.data()[i];
            prop_assert!((gc.data()[i] - expect).abs() < 1e-12 * (1.0 + expect.abs()));
        }
    }
}
