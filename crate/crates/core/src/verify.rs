//! Finite-difference verification of every differentiable primitive and of
//! the two composed training losses, at 64-bit on tiny dimensions.

use std::fmt::Write as _;
use std::time::Instant;

use mmvq_autodiff::gradcheck::{compare_gradients, grad_check_with_floor, numeric_gradient, DEFAULT_REL_FLOOR};
use mmvq_autodiff::{ConvSpec, GradCheckReport, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::downstream::{mtl_loss, stack_session, DownstreamConfig, MtlModel, TaskMode};
use crate::error::Result;
use crate::mrl::{Batch, MrlConfig, MrlModel, QuantMode};
use crate::util::module_rng;

pub const TOLERANCE: f64 = 1e-5;
/// Central-difference step; near the cube root of f64 machine epsilon,
/// which balances truncation against roundoff of the deeper composed losses.
const EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
    pub elapsed_s: f64,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<28} {:>10.3e} {:>6}  {}",
                c.name,
                c.max_rel_error,
                c.coordinates,
                if c.passed { "ok" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "{} checks, worst {:.3e} (tolerance {:.0e}), {:.1}s",
            self.checks.len(),
            self.worst(),
            self.tolerance,
            self.elapsed_s
        );
        s
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.15..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Scalar summary `Σ w·v` with fixed random weights, so that every output
/// coordinate contributes with a distinct weight.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let w = uniform(tape.shape(v), &mut module_rng(seed, "verify.project"));
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

struct Suite {
    checks: Vec<CheckResult>,
}

impl Suite {
    fn push(&mut self, name: &str, r: GradCheckReport) {
        log::debug!("{name}: {:.3e}", r.max_rel_error);
        self.checks.push(CheckResult {
            name: name.into(),
            max_rel_error: r.max_rel_error,
            coordinates: r.coordinates,
            passed: r.max_rel_error < TOLERANCE,
        });
    }

    /// Checks `f` wrt its input at `point`.
    fn unary(
        &mut self,
        name: &str,
        point: &Tensor<f64>,
        seed: u64,
        f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
    ) -> Result<()> {
        let r = grad_check_with_floor(
            |t, x| {
                let y = f(t, x).map_err(to_tensor_err)?;
                project(t, y, seed).map_err(to_tensor_err)
            },
            point,
            EPS,
            DEFAULT_REL_FLOOR,
        )?;
        self.push(name, r);
        Ok(())
    }
}

fn to_tensor_err(e: crate::Error) -> mmvq_autodiff::TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => mmvq_autodiff::TensorError::Invalid {
            op: "verify",
            msg: other.to_string(),
        },
    }
}

/// Zero-initialized biases put ReLU inputs exactly on the kink; random
/// biases move the check point to a generic location.
fn randomize_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".b"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.param_mut(id).value = uniform(&shape, rng);
    }
}

/// Analytic gradient of `analytic` wrt every parameter of `model`, compared
/// with central differences of `value` under in-place perturbation.
fn param_check<M: Clone>(
    model: &M,
    store: fn(&mut M) -> &mut ParamStore<f64>,
    analytic: impl Fn(&M, &mut Tape<f64>) -> Result<Var>,
    value: impl Fn(&M) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut m = model.clone();
    store(&mut m).zero_grad();
    let mut tape = Tape::new();
    let loss = analytic(&m, &mut tape)?;
    tape.backward_into(loss, store(&mut m))?;
    let mut a = Vec::new();
    let ids: Vec<_> = store(&mut m).iter().map(|(id, _)| id).collect();
    for &id in &ids {
        let p = store(&mut m).param(id);
        match &p.grad {
            Some(g) => a.extend(g.data().iter().copied()),
            None => a.extend(std::iter::repeat_n(0.0, p.value.numel())),
        }
    }
    let mut n = Vec::with_capacity(a.len());
    for &id in &ids {
        for i in 0..store(&mut m).param(id).value.numel() {
            let orig = store(&mut m).param(id).value.data()[i];
            store(&mut m).param_mut(id).value.data_mut()[i] = orig + EPS;
            let fp = value(&m)?;
            store(&mut m).param_mut(id).value.data_mut()[i] = orig - EPS;
            let fm = value(&m)?;
            store(&mut m).param_mut(id).value.data_mut()[i] = orig;
            n.push((fp - fm) / (2.0 * EPS));
        }
    }
    Ok(compare_gradients(&a, &n, DEFAULT_REL_FLOOR))
}

fn primitives(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let x = uniform(&[2, 2, 5, 6], rng);
    let k = uniform(&[3, 2, 3, 3], rng);
    let spec = ConvSpec::new(2, 1);
    let kc = k.clone();
    s.unary("conv2d/input", &x, 1, |t, x| {
        let k = t.constant(kc.clone());
        Ok(t.conv2d_with(x, k, spec)?)
    })?;
    let xc = x.clone();
    s.unary("conv2d/kernel", &k, 1, |t, k| {
        let x = t.constant(xc.clone());
        Ok(t.conv2d_with(x, k, spec)?)
    })?;
    let x = uniform(&[2, 3, 3, 4], rng);
    let k = uniform(&[3, 2, 4, 4], rng);
    let spec = ConvSpec::new(2, 1).with_output_padding(1, 0);
    let kc = k.clone();
    s.unary("conv_transpose/input", &x, 2, |t, x| {
        let k = t.constant(kc.clone());
        Ok(t.conv2d_transpose_with(x, k, spec)?)
    })?;
    let xc = x.clone();
    s.unary("conv_transpose/kernel", &k, 2, |t, k| {
        let x = t.constant(xc.clone());
        Ok(t.conv2d_transpose_with(x, k, spec)?)
    })?;

    let x = uniform(&[2, 3, 2, 2], rng);
    let b = uniform(&[3], rng);
    let xc = x.clone();
    s.unary("channel_bias", &b, 3, |t, b| {
        let x = t.constant(xc.clone());
        Ok(t.channel_bias(x, b)?)
    })?;
    let x = uniform(&[4, 5], rng);
    let w = uniform(&[5, 3], rng);
    let b = uniform(&[3], rng);
    let (wc, bc) = (w.clone(), b.clone());
    s.unary("linear/input", &x, 4, |t, x| {
        let (w, b) = (t.constant(wc.clone()), t.constant(bc.clone()));
        Ok(t.linear(x, w, Some(b))?)
    })?;
    let (xc, bc) = (x.clone(), b.clone());
    s.unary("linear/weight", &w, 4, |t, w| {
        let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone()));
        Ok(t.linear(x, w, Some(b))?)
    })?;
    let (xc, wc) = (x.clone(), w.clone());
    s.unary("linear/bias", &b, 4, |t, b| {
        let (x, w) = (t.constant(xc.clone()), t.constant(wc.clone()));
        Ok(t.linear(x, w, Some(b))?)
    })?;

    let x = away_from_zero(&[3, 4], rng);
    let other = uniform(&[3, 4], rng);
    type Build = fn(&mut Tape<f64>, Var, Var) -> mmvq_autodiff::Result<Var>;
    let cases: [(&str, Build); 11] = [
        ("relu", |t, x, _| Ok(t.relu(x))),
        ("add", |t, x, o| t.add(x, o)),
        ("sub", |t, x, o| t.sub(o, x)),
        ("mul", |t, x, o| t.mul(x, o)),
        ("scale", |t, x, _| Ok(t.scale(x, -1.7))),
        ("square", |t, x, _| Ok(t.square(x))),
        ("exp", |t, x, _| Ok(t.exp(x))),
        ("reshape", |t, x, _| t.reshape(x, &[4, 3])),
        ("signed_sqrt", |t, x, _| Ok(t.signed_sqrt(x, 1e-8))),
        ("l2_normalize_rows", |t, x, _| t.l2_normalize_rows(x)),
        ("stop_gradient", |t, x, o| {
            let s = t.stop_gradient(o);
            t.add(x, s)
        }),
    ];
    for (name, build) in cases {
        let oc = other.clone();
        s.unary(name, &x, 5, |t, x| {
            let o = t.constant(oc.clone());
            Ok(build(t, x, o)?)
        })?;
    }

    let x = uniform(&[2, 3, 4], rng);
    s.unary("sum", &x, 6, |t, x| Ok(t.sum(x)))?;
    s.unary("mean", &x, 6, |t, x| {
        let q = t.square(x);
        Ok(t.mean(q))
    })?;
    let mask = Tensor::new(&[2, 4], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0])?;
    s.unary("masked_mean", &x, 6, |t, x| Ok(t.masked_mean(x, &mask)?))?;

    let p = uniform(&[3, 4], rng);
    let y = uniform(&[3, 4], rng);
    s.unary("mse", &p, 7, |t, p| {
        let y = t.constant(y.clone());
        Ok(t.mse(p, y)?)
    })?;
    let logits = uniform(&[4, 3], rng);
    s.unary("softmax_cross_entropy", &logits, 7, |t, l| {
        Ok(t.softmax_cross_entropy(l, &[0, 2, 1, 2])?)
    })?;
    let table = uniform(&[5, 3], rng);
    s.unary("gather_rows", &table, 8, |t, tab| Ok(t.gather_rows(tab, &[4, 1, 4])?))?;

    // The straight-through node forwards `e`; its derivative in z is
    // probed through the identity surrogate `e + (z - z0)`.
    let z = uniform(&[2, 3], rng);
    let e = uniform(&[2, 3], rng);
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let ev = tape.constant(e.clone());
    let st = tape.straight_through(zv, ev)?;
    let l = project(&mut tape, st, 9)?;
    let g = tape.backward(l)?;
    let analytic: Vec<f64> = g.get(zv).map_or(vec![0.0; z.numel()], |g| g.data().to_vec());
    let numeric = numeric_gradient(
        |zp| {
            let mut t = Tape::new();
            let zv = t.constant(zp.clone());
            let z0 = t.constant(z.clone());
            let d = t.sub(zv, z0)?;
            let ev = t.constant(e.clone());
            let sv = t.add(ev, d)?;
            let l = project(&mut t, sv, 9).map_err(to_tensor_err)?;
            Ok(t.value(l).item())
        },
        &z,
        EPS,
    )?;
    s.push(
        "straight_through",
        compare_gradients(&analytic, &numeric, DEFAULT_REL_FLOOR),
    );

    let (xr, yr, cr) = (
        uniform(&[2, 6], rng),
        uniform(&[2, 6], rng),
        uniform(&[2, 3, 3, 2], rng),
    );
    let (yc, cc) = (yr.clone(), cr.clone());
    s.unary("block_bilinear/x", &xr, 10, |t, x| {
        let (y, c) = (t.constant(yc.clone()), t.constant(cc.clone()));
        Ok(t.block_bilinear(x, y, c)?)
    })?;
    let (xc, cc) = (xr.clone(), cr.clone());
    s.unary("block_bilinear/y", &yr, 10, |t, y| {
        let (x, c) = (t.constant(xc.clone()), t.constant(cc.clone()));
        Ok(t.block_bilinear(x, y, c)?)
    })?;
    s.unary("block_bilinear/cores", &cr, 10, |t, c| {
        let (x, y) = (t.constant(xr.clone()), t.constant(yr.clone()));
        Ok(t.block_bilinear(x, y, c)?)
    })?;

    // (L_cls, L_reg, log σ1, log σ2) packed into one vector
    let v = Tensor::new(
        &[4],
        vec![
            rng.random_range(0.1..3.0),
            rng.random_range(0.1..9.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ],
    )?;
    let r = grad_check_with_floor(
        |t, v| {
            let parts: Vec<Var> = (0..4)
                .map(|i| {
                    let sel = Tensor::from_fn(&[4], |j| if i == j { 1.0 } else { 0.0 });
                    let sel = t.constant(sel);
                    let m = t.mul(v, sel)?;
                    Ok(t.sum(m))
                })
                .collect::<mmvq_autodiff::Result<_>>()?;
            mtl_loss(t, parts[0], parts[1], parts[2], parts[3]).map_err(to_tensor_err)
        },
        &v,
        EPS,
        DEFAULT_REL_FLOOR,
    )?;
    s.push("mtl_loss", r);
    Ok(())
}

/// Model-level check of the four-term VQ-VAE loss. Analytic gradients come
/// from the training path; the numeric side evaluates the frozen surrogate
/// so that the straight-through path acts as the identity.
fn composed_mrl(s: &mut Suite, seed: u64) -> Result<()> {
    let cfg = MrlConfig::tiny();
    let mut model = MrlModel::<f32>::new(&cfg, &mut module_rng(seed, "verify.mrl"))?.cast::<f64>();
    let mut rng = module_rng(seed, "verify.mrl.data");
    randomize_biases(&mut model.store, &mut rng);
    let (ha, wa) = model.input_shape(crate::features::Modality::Audio);
    let (hv, wv) = model.input_shape(crate::features::Modality::Video);
    let a: Vec<Tensor<f64>> = (0..2).map(|_| uniform(&[ha, wa], &mut rng)).collect();
    let v: Vec<Tensor<f64>> = (0..2).map(|_| uniform(&[hv, wv], &mut rng)).collect();
    let batch = Batch::stack(&a.iter().collect::<Vec<_>>(), &v.iter().collect::<Vec<_>>())?;

    let mut tape = Tape::new();
    let base = model.loss(&mut tape, &batch, QuantMode::Nearest)?;
    let z0 = tape.value(base.z).clone();
    let e0 = tape.value(base.zq).clone();
    let idx = base.indices.clone();
    let r = param_check(
        &model,
        |m| &mut m.store,
        |m, t| Ok(m.loss(t, &batch, QuantMode::Nearest)?.total),
        |m| {
            let mut t = Tape::new();
            let mode = QuantMode::Frozen {
                indices: &idx,
                z_anchor: &z0,
                e_anchor: &e0,
            };
            let lv = m.loss(&mut t, &batch, mode)?;
            Ok(t.value(lv.total).item())
        },
    )?;
    s.push("mrl_total_loss", r);
    Ok(())
}

fn composed_mtl(s: &mut Suite, seed: u64) -> Result<()> {
    let cfg = DownstreamConfig {
        conv_channels: 3,
        conv_kernel: 3,
        trunk_dim: 4,
        ..Default::default()
    };
    let (l, t_max) = (4, 5);
    let mut model = MtlModel::<f64>::new(&cfg, l, t_max, &mut module_rng(seed, "verify.mtl"))?;
    let (ls1, ls2) = model.log_sigma_ids();
    model.store.set_value(ls1, Tensor::scalar(0.3))?;
    model.store.set_value(ls2, Tensor::scalar(-0.2))?;
    let mut rng = module_rng(seed, "verify.mtl.data");
    randomize_biases(&mut model.store, &mut rng);
    let sessions = [5usize, 3, 2]
        .iter()
        .enumerate()
        .map(|(i, &count)| {
            let e: Vec<Vec<f32>> = (0..count)
                .map(|_| (0..l).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                .collect();
            stack_session(&e, t_max, &format!("s{i}"), "p")
        })
        .collect::<Result<Vec<_>>>()?;
    let (x, mask) = model.inputs(&sessions.iter().collect::<Vec<_>>())?;
    let classes = [0usize, 2, 1];
    let target = [0.4f64, -1.1, 0.7];
    for mode in TaskMode::ALL {
        let r = param_check(
            &model,
            |m| &mut m.store,
            |m, t| Ok(m.loss(t, &x, &mask, &classes, &target, mode)?.0),
            |m| {
                let mut t = Tape::new();
                let (lv, _) = m.loss(&mut t, &x, &mask, &classes, &target, mode)?;
                Ok(t.value(lv).item())
            },
        )?;
        s.push(&format!("downstream_{}_loss", mode.as_str()), r);
    }
    Ok(())
}

/// Runs the whole suite. Deterministic for a given seed.
pub fn run_suite(seed: u64) -> Result<VerifyReport> {
    let start = Instant::now();
    let mut s = Suite { checks: Vec::new() };
    primitives(&mut s, &mut module_rng(seed, "verify.primitives"))?;
    composed_mrl(&mut s, seed)?;
    composed_mtl(&mut s, seed)?;
    Ok(VerifyReport {
        tolerance: TOLERANCE,
        checks: s.checks,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}
