//! Every primitive against central finite differences at 64-bit.

mod common;

use common::{away_from_zero, project, rng, uniform};
use mmvq_autodiff::gradcheck::{compare_gradients, numeric_gradient};
use mmvq_autodiff::{grad_check, Adam, ConvSpec, ParamStore, Tape, Tensor, TensorError};

const TOL: f64 = 1e-5;
const EPS: f64 = 1e-6;

fn check(name: &str, report: mmvq_autodiff::GradCheckReport) {
    assert!(
        report.max_rel_error < TOL,
        "{name}: max rel error {} at {}",
        report.max_rel_error,
        report.worst_index
    );
}

#[test]
fn conv2d_input_and_kernel() {
    let mut r = rng(21);
    let x = uniform::<f64>(&[2, 2, 5, 6], &mut r);
    let k = uniform::<f64>(&[3, 2, 3, 3], &mut r);
    let spec = ConvSpec::new(2, 1);
    let kc = k.clone();
    check(
        "conv2d/x",
        grad_check(
            |t, x| {
                let k = t.constant(kc.clone());
                let y = t.conv2d_with(x, k, spec)?;
                project(t, y, 1)
            },
            &x,
            EPS,
        )
        .unwrap(),
    );
    let xc = x.clone();
    check(
        "conv2d/k",
        grad_check(
            |t, k| {
                let x = t.constant(xc.clone());
                let y = t.conv2d_with(x, k, spec)?;
                project(t, y, 1)
            },
            &k,
            EPS,
        )
        .unwrap(),
    );
}

#[test]
fn conv_transpose_input_and_kernel() {
    let mut r = rng(22);
    let x = uniform::<f64>(&[2, 3, 3, 4], &mut r);
    let k = uniform::<f64>(&[3, 2, 4, 4], &mut r);
    let spec = ConvSpec::new(2, 1).with_output_padding(1, 0);
    let kc = k.clone();
    check(
        "convT/x",
        grad_check(
            |t, x| {
                let k = t.constant(kc.clone());
                let y = t.conv2d_transpose_with(x, k, spec)?;
                project(t, y, 2)
            },
            &x,
            EPS,
        )
        .unwrap(),
    );
    let xc = x.clone();
    check(
        "convT/k",
        grad_check(
            |t, k| {
                let x = t.constant(xc.clone());
                let y = t.conv2d_transpose_with(x, k, spec)?;
                project(t, y, 2)
            },
            &k,
            EPS,
        )
        .unwrap(),
    );
}

#[test]
fn channel_bias_and_linear() {
    let mut r = rng(23);
    let x = uniform::<f64>(&[2, 3, 2, 2], &mut r);
    let b = uniform::<f64>(&[3], &mut r);
    let xc = x.clone();
    check(
        "bias/b",
        grad_check(
            |t, b| {
                let x = t.constant(xc.clone());
                let y = t.channel_bias(x, b)?;
                project(t, y, 3)
            },
            &b,
            EPS,
        )
        .unwrap(),
    );

    let xin = uniform::<f64>(&[4, 5], &mut r);
    let w = uniform::<f64>(&[5, 3], &mut r);
    let bias = uniform::<f64>(&[3], &mut r);
    let (wc, bc) = (w.clone(), bias.clone());
    check(
        "linear/x",
        grad_check(
            |t, x| {
                let w = t.constant(wc.clone());
                let b = t.constant(bc.clone());
                let y = t.linear(x, w, Some(b))?;
                project(t, y, 4)
            },
            &xin,
            EPS,
        )
        .unwrap(),
    );
    let (xc, bc) = (xin.clone(), bias.clone());
    check(
        "linear/w",
        grad_check(
            |t, w| {
                let x = t.constant(xc.clone());
                let b = t.constant(bc.clone());
                let y = t.linear(x, w, Some(b))?;
                project(t, y, 4)
            },
            &w,
            EPS,
        )
        .unwrap(),
    );
    let (xc, wc) = (xin.clone(), w.clone());
    check(
        "linear/b",
        grad_check(
            |t, b| {
                let x = t.constant(xc.clone());
                let w = t.constant(wc.clone());
                let y = t.linear(x, w, Some(b))?;
                project(t, y, 4)
            },
            &bias,
            EPS,
        )
        .unwrap(),
    );
}

#[test]
fn pointwise_ops() {
    let mut r = rng(24);
    let x = away_from_zero::<f64>(&[3, 4], &mut r);
    let other = uniform::<f64>(&[3, 4], &mut r);
    type Build =
        fn(&mut Tape<f64>, mmvq_autodiff::Var, mmvq_autodiff::Var) -> mmvq_autodiff::Result<mmvq_autodiff::Var>;
    let cases: Vec<(&str, Build)> = vec![
        ("relu", |t, x, _| Ok(t.relu(x))),
        ("add", |t, x, o| t.add(x, o)),
        ("sub/lhs", |t, x, o| t.sub(x, o)),
        ("sub/rhs", |t, x, o| t.sub(o, x)),
        ("mul", |t, x, o| t.mul(x, o)),
        ("scale", |t, x, _| Ok(t.scale(x, -1.7))),
        ("square", |t, x, _| Ok(t.square(x))),
        ("exp", |t, x, _| Ok(t.exp(x))),
        ("reshape", |t, x, _| t.reshape(x, &[4, 3])),
        ("signed_sqrt", |t, x, _| Ok(t.signed_sqrt(x, 1e-8))),
        ("l2_normalize", |t, x, _| t.l2_normalize_rows(x)),
    ];
    for (name, build) in cases {
        let oc = other.clone();
        let rep = grad_check(
            |t, x| {
                let o = t.constant(oc.clone());
                let y = build(t, x, o)?;
                project(t, y, 5)
            },
            &x,
            EPS,
        )
        .unwrap();
        check(name, rep);
    }
}

#[test]
fn reductions() {
    let mut r = rng(25);
    let x = uniform::<f64>(&[2, 3, 4], &mut r);
    check("sum", grad_check(|t, x| Ok(t.sum(x)), &x, EPS).unwrap());
    check(
        "mean",
        grad_check(
            |t, x| {
                let s = t.square(x);
                Ok(t.mean(s))
            },
            &x,
            EPS,
        )
        .unwrap(),
    );
    let mask = Tensor::new(&[2, 4], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
    check(
        "masked_mean",
        grad_check(
            |t, x| {
                let y = t.masked_mean(x, &mask)?;
                project(t, y, 6)
            },
            &x,
            EPS,
        )
        .unwrap(),
    );
}

#[test]
fn losses() {
    let mut r = rng(26);
    let p = uniform::<f64>(&[3, 4], &mut r);
    let target = uniform::<f64>(&[3, 4], &mut r);
    let tc = target.clone();
    check(
        "mse/pred",
        grad_check(
            |t, p| {
                let y = t.constant(tc.clone());
                t.mse(p, y)
            },
            &p,
            EPS,
        )
        .unwrap(),
    );
    check(
        "mse/target",
        grad_check(
            |t, y| {
                let p = t.constant(p.clone());
                t.mse(p, y)
            },
            &target,
            EPS,
        )
        .unwrap(),
    );
    let logits = uniform::<f64>(&[4, 3], &mut r);
    check(
        "cross_entropy",
        grad_check(|t, l| t.softmax_cross_entropy(l, &[0, 2, 1, 2]), &logits, EPS).unwrap(),
    );
}

#[test]
fn gather_straight_through_and_block_bilinear() {
    let mut r = rng(27);
    let table = uniform::<f64>(&[5, 3], &mut r);
    check(
        "gather_rows",
        grad_check(
            |t, tab| {
                let g = t.gather_rows(tab, &[4, 1, 4])?;
                project(t, g, 7)
            },
            &table,
            EPS,
        )
        .unwrap(),
    );

    let z = uniform::<f64>(&[2, 3], &mut r);
    // The straight-through node forwards `e`, so its numeric derivative in
    // z is checked through the identity surrogate `e + (z - z0)`.
    let e = uniform::<f64>(&[2, 3], &mut r);
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let ev = tape.constant(e.clone());
    let st = tape.straight_through(zv, ev).unwrap();
    assert_eq!(tape.value(st), &e);
    let l = project(&mut tape, st, 8).unwrap();
    let g = tape.backward(l).unwrap();
    let analytic: Vec<f64> = g.get(zv).unwrap().data().to_vec();
    assert!(g.get(ev).is_none());
    let numeric = numeric_gradient(
        |zp| {
            let mut t = Tape::new();
            let zv = t.constant(zp.clone());
            let z0 = t.constant(z.clone());
            let d = t.sub(zv, z0)?;
            let ev = t.constant(e.clone());
            let s = t.add(ev, d)?;
            let l = project(&mut t, s, 8)?;
            Ok(t.value(l).item())
        },
        &z,
        EPS,
    )
    .unwrap();
    check("straight_through", compare_gradients(&analytic, &numeric, 1e-3));

    let (xr, yr, cr) = (
        uniform::<f64>(&[2, 6], &mut r),
        uniform::<f64>(&[2, 6], &mut r),
        uniform::<f64>(&[2, 3, 3, 2], &mut r),
    );
    let (yc, cc) = (yr.clone(), cr.clone());
    check(
        "block_bilinear/x",
        grad_check(
            |t, x| {
                let y = t.constant(yc.clone());
                let c = t.constant(cc.clone());
                let o = t.block_bilinear(x, y, c)?;
                project(t, o, 9)
            },
            &xr,
            EPS,
        )
        .unwrap(),
    );
    let (xc, cc) = (xr.clone(), cr.clone());
    check(
        "block_bilinear/y",
        grad_check(
            |t, y| {
                let x = t.constant(xc.clone());
                let c = t.constant(cc.clone());
                let o = t.block_bilinear(x, y, c)?;
                project(t, o, 9)
            },
            &yr,
            EPS,
        )
        .unwrap(),
    );
    check(
        "block_bilinear/cores",
        grad_check(
            |t, c| {
                let x = t.constant(xr.clone());
                let y = t.constant(yr.clone());
                let o = t.block_bilinear(x, y, c)?;
                project(t, o, 9)
            },
            &cr,
            EPS,
        )
        .unwrap(),
    );
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[2], vec![1.5, -0.5]).unwrap());
    let s = t.stop_gradient(x);
    assert_eq!(t.value(s), t.value(x));
    let sq = t.square(s);
    let y = t.add(sq, x).unwrap();
    let l = t.sum(y);
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn sum_of_squares_is_exact() {
    let mut r = rng(28);
    let x = uniform::<f64>(&[10], &mut r);
    let rep = grad_check(
        |t, x| {
            let s = t.square(x);
            Ok(t.sum(s))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

#[test]
fn relu_locally_linear() {
    let mut r = rng(29);
    let x = away_from_zero::<f64>(&[12], &mut r);
    let rep = grad_check(
        |t, x| {
            let y = t.relu(x);
            project(t, y, 10)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

#[test]
fn mse_of_linear_at_32_bit() {
    let mut r = rng(30);
    let x = uniform::<f32>(&[4, 3], &mut r);
    let y = uniform::<f32>(&[4, 2], &mut r);
    let w = uniform::<f32>(&[3, 2], &mut r);
    let b = uniform::<f32>(&[2], &mut r);
    let mut store = ParamStore::new();
    let wid = store.add("w", w.clone());
    let bid = store.add("b", b.clone());
    let loss_at = |store: &ParamStore<f32>, t: &mut Tape<f32>| {
        let xv = t.constant(x.clone());
        let yv = t.constant(y.clone());
        let wv = t.param(store, wid);
        let bv = t.param(store, bid);
        let p = t.linear(xv, wv, Some(bv)).unwrap();
        t.mse(p, yv).unwrap()
    };
    let mut tape = Tape::new();
    let l = loss_at(&store, &mut tape);
    tape.backward_into(l, &mut store).unwrap();
    for id in [wid, bid] {
        let analytic: Vec<f64> = store.grad(id).unwrap().data().iter().map(|&v| v as f64).collect();
        let point = store.value(id).clone();
        let numeric = numeric_gradient(
            |p| {
                let mut s = store.clone();
                s.set_value(id, p.clone()).unwrap();
                let mut t = Tape::new();
                let l = loss_at(&s, &mut t);
                Ok(t.value(l).item())
            },
            &point,
            1e-2f32,
        )
        .unwrap();
        let rep = compare_gradients(&analytic, &numeric, 1e-3);
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }
}

#[test]
fn backward_reports_params_and_accumulates() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::scalar(3.0));
    let unused = store.add("unused", Tensor::scalar(1.0));
    let never = store.add("never_on_tape", Tensor::scalar(1.0));
    for round in 1..=2 {
        let mut t = Tape::new();
        let pv = t.param(&store, p);
        let _ = t.param(&store, unused);
        let l = t.square(pv);
        t.backward_into(l, &mut store).unwrap();
        assert_eq!(store.grad(p).unwrap().item(), 6.0 * round as f64);
        assert_eq!(store.grad(unused).unwrap().item(), 0.0);
        assert!(store.grad(never).is_none());
    }
}

#[test]
fn backward_rejects_non_scalar_and_empty() {
    let mut other = Tape::<f64>::new();
    let foreign = other.constant(Tensor::scalar(0.0));
    assert!(Tape::<f64>::new().backward(foreign).is_err());
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn backward_visits_each_reached_node_once() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::scalar(2.0));
    let b = t.square(a);
    let c = t.add(b, b).unwrap();
    let _dead = t.exp(a);
    let g = t.backward(c).unwrap();
    assert_eq!(g.visited(), 3);
    assert_eq!(g.get(a).unwrap().item(), 8.0);
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut r = rng(31);
        let x = uniform::<f32>(&[2, 2, 6, 6], &mut r);
        let k = uniform::<f32>(&[3, 2, 3, 3], &mut r);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let kv = t.constant(k);
        let y = t.conv2d(xv, kv, 2, 1).unwrap();
        let y = t.relu(y);
        let l = project(&mut t, y, 11).unwrap();
        t.backward(l).unwrap().get(kv).unwrap().clone()
    };
    let (a, b) = (run(), run());
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn adam_zero_gradient_is_identity() {
    let mut store = ParamStore::<f32>::new();
    let p = store.add("p", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let before = store.value(p).clone();
    let mut opt = Adam::new(0.1);
    for _ in 0..5 {
        store.param_mut(p).grad = Some(Tensor::zeros(&[3]));
        opt.step(&mut store).unwrap();
    }
    assert_eq!(store.value(p), &before);
    assert_eq!(opt.steps(), 5);
}

#[test]
fn adam_descends_and_converges() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::scalar(1.0));
    let mut opt = Adam::new(0.1);
    let mut t = Tape::new();
    let pv = t.param(&store, p);
    let l = t.square(pv);
    t.backward_into(l, &mut store).unwrap();
    opt.step(&mut store).unwrap();
    assert!(store.value(p).item() < 1.0);

    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::scalar(0.0));
    let mut opt = Adam::new(0.1);
    for _ in 0..200 {
        store.zero_grad();
        let mut t = Tape::new();
        let pv = t.param(&store, p);
        let two = t.constant(Tensor::scalar(2.0));
        let d = t.sub(pv, two).unwrap();
        let l = t.square(d);
        t.backward_into(l, &mut store).unwrap();
        opt.step(&mut store).unwrap();
    }
    assert!((store.value(p).item() - 2.0).abs() < 1e-2);
}

#[test]
fn adam_names_missing_gradient() {
    let mut store = ParamStore::<f32>::new();
    store.add("encoder.conv1.weight", Tensor::zeros(&[2]));
    let mut opt = Adam::new(0.1);
    match opt.step(&mut store) {
        Err(TensorError::MissingGradient(name)) => assert_eq!(name, "encoder.conv1.weight"),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(opt.steps(), 0);
}
