//! Central finite-difference checks of every tape op, in f64.

use difadapt_nn::{Conv2d, GroupNorm, Init, Linear, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

/// Compares the analytic gradient of `f` at `x` with central differences on
/// every coordinate (or a strided subset for large inputs).
fn check(name: &str, x: Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Var) {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let loss = f(&mut tape, v);
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |t: Tensor<f64>| {
        let mut tape = Tape::inference();
        let v = tape.input(t);
        let l = f(&mut tape, v);
        tape.value(l).item()
    };
    let step = (x.numel() / 40).max(1);
    for i in (0..x.numel()).step_by(step) {
        let mut plus = x.clone();
        plus.data_mut()[i] += H;
        let mut minus = x.clone();
        minus.data_mut()[i] -= H;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * H);
        let a = analytic.data()[i];
        let scale = a.abs().max(numeric.abs()).max(1e-3);
        assert!(
            (a - numeric).abs() / scale <= REL_TOL,
            "{name}[{i}]: analytic {a} vs numeric {numeric}"
        );
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

/// Weighted sum so each output element gets a distinct upstream gradient.
fn probe(tape: &mut Tape<f64>, y: Var) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.731).sin() + 0.2).collect()).unwrap();
    let w = tape.input(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum_all(p)
}

#[test]
fn elementwise_ops() {
    let mut r = rng();
    // keep away from kinks at 0 for relu/abs/leaky
    let x = Tensor::<f64>::randn([2, 3, 4, 4], &mut r).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    check("relu", x.clone(), |t, v| {
        let y = t.relu(v);
        probe(t, y)
    });
    check("leaky", x.clone(), |t, v| {
        let y = t.leaky_relu(v, 0.2);
        probe(t, y)
    });
    check("silu", x.clone(), |t, v| {
        let y = t.silu(v);
        probe(t, y)
    });
    check("sigmoid", x.clone(), |t, v| {
        let y = t.sigmoid(v);
        probe(t, y)
    });
    check("abs", x.clone(), |t, v| {
        let y = t.abs(v);
        probe(t, y)
    });
    check("sqr", x.clone(), |t, v| {
        let y = t.sqr(v);
        probe(t, y)
    });
    check("log", x.map(|v| v.abs() + 0.5), |t, v| {
        let y = t.log(v);
        probe(t, y)
    });
    check("clamp", x.clone(), |t, v| {
        let y = t.clamp(v, -0.7, 0.9);
        probe(t, y)
    });
    check("scale_shift_mean", x.clone(), |t, v| {
        let y = t.scale(v, -1.7);
        let y = t.shift(y, 0.3);
        let y = t.sqr(y);
        t.mean_all(y)
    });
    check("add_sub_mul", x, |t, v| {
        let s = t.sigmoid(v);
        let a = t.add(v, s).unwrap();
        let b = t.sub(a, s).unwrap();
        let c = t.mul(b, s).unwrap();
        probe(t, c)
    });
}

#[test]
fn structural_ops() {
    let mut r = rng();
    let x = Tensor::<f64>::randn([2, 3, 4, 6], &mut r);
    check("avg_pool2", x.clone(), |t, v| {
        let y = t.avg_pool2(v).unwrap();
        probe(t, y)
    });
    check("upsample2", x.clone(), |t, v| {
        let y = t.upsample2(v).unwrap();
        probe(t, y)
    });
    check("concat", x.clone(), |t, v| {
        let s = t.sqr(v);
        let y = t.concat_channels(v, s).unwrap();
        probe(t, y)
    });
    check("global_avg_pool", x.clone(), |t, v| {
        let y = t.global_avg_pool(v).unwrap();
        probe(t, y)
    });
    check("reshape", x.clone(), |t, v| {
        let y = t.reshape(v, &[2, 72]).unwrap();
        probe(t, y)
    });
    check("channel_unit_norm", x.clone(), |t, v| {
        let y = t.channel_unit_norm(v, 1e-10).unwrap();
        probe(t, y)
    });
    let b = Tensor::<f64>::randn([2, 3], &mut r);
    check("channel_bias.x", x.clone(), |t, v| {
        let bb = t.input(b.clone());
        let y = t.channel_bias(v, bb).unwrap();
        let y = t.sqr(y);
        probe(t, y)
    });
    check("channel_bias.b", b, |t, bb| {
        let xv = t.input(x.clone());
        let y = t.channel_bias(xv, bb).unwrap();
        let y = t.sqr(y);
        probe(t, y)
    });
}

#[test]
fn conv_linear_groupnorm_inputs_and_params() {
    let mut r = rng();
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (4, 2, 1), (1, 1, 0)] {
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 3, 4, k, stride, pad, Init::FanIn, &mut r);
        let x = Tensor::<f64>::randn([2, 3, 6, 6], &mut r);
        check(&format!("conv{k}s{stride}.x"), x.clone(), |t, v| {
            let y = conv.forward(t, &store.bind(false), v).unwrap();
            probe(t, y)
        });
        // parameter gradients: perturb each stored tensor through a leaf copy
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = conv.forward(&mut tape, &store.bind(true), xv).unwrap();
        let l = probe(&mut tape, y);
        let pg = tape.backward(l).unwrap().for_store(&store);
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for (pi, name) in names.iter().enumerate() {
            let analytic = pg[pi].clone().unwrap();
            let base = store.to_map();
            let eval = |delta: f64, i: usize| {
                let mut m = base.clone();
                m.get_mut(name).unwrap().data_mut()[i] += delta;
                let mut s2 = store.clone();
                s2.load_map(&m).unwrap();
                let mut tape = Tape::inference();
                let xv = tape.input(x.clone());
                let y = conv.forward(&mut tape, &s2.bind(false), xv).unwrap();
                let l = probe(&mut tape, y);
                tape.value(l).item()
            };
            for i in (0..analytic.numel()).step_by(7) {
                let numeric = (eval(H, i) - eval(-H, i)) / (2.0 * H);
                let a = analytic.data()[i];
                let scale = a.abs().max(numeric.abs()).max(1e-3);
                assert!((a - numeric).abs() / scale <= REL_TOL, "{name}[{i}] {a} vs {numeric}");
            }
        }
    }

    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "l", 5, 3, Init::FanIn, &mut r);
    check("linear.x", Tensor::randn([4, 5], &mut r), |t, v| {
        let y = lin.forward(t, &store.bind(false), v).unwrap();
        probe(t, y)
    });

    let mut store = ParamStore::<f64>::new();
    let gn = GroupNorm::new(&mut store, "gn", 4, 2);
    let mut m = store.to_map();
    m.insert("gn.gamma".into(), Tensor::new([4], vec![1.2, -0.4, 0.8, 2.0]).unwrap());
    m.insert("gn.beta".into(), Tensor::new([4], vec![0.1, 0.2, -0.3, 0.0]).unwrap());
    store.load_map(&m).unwrap();
    check("group_norm.x", Tensor::randn([2, 4, 3, 3], &mut r), |t, v| {
        let y = gn.forward(t, &store.bind(false), v).unwrap();
        probe(t, y)
    });
}

#[test]
fn frozen_binding_yields_no_param_grads_but_input_grads() {
    let mut r = rng();
    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::same(&mut store, "c", 2, 2, 3, &mut r);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::randn([1, 2, 4, 4], &mut r));
    let y = conv.forward(&mut tape, &store.bind(false), x).unwrap();
    let l = tape.mean_all(y);
    let g = tape.backward(l).unwrap();
    assert!(g.get(x).is_some());
    assert!(g.for_store(&store).iter().all(Option::is_none));
}

#[test]
fn shared_parameter_gradients_accumulate() {
    let mut r = rng();
    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::same(&mut store, "c", 1, 1, 3, &mut r);
    let x = Tensor::<f64>::randn([1, 1, 4, 4], &mut r);
    let grad_of = |twice: bool| {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let p = store.bind(true);
        let a = conv.forward(&mut tape, &p, xv).unwrap();
        let l = if twice {
            let b = conv.forward(&mut tape, &p, xv).unwrap();
            let s = tape.add(a, b).unwrap();
            tape.sum_all(s)
        } else {
            tape.sum_all(a)
        };
        tape.backward(l).unwrap().for_store(&store)[0].clone().unwrap()
    };
    let once = grad_of(false);
    let twice = grad_of(true);
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn batching_does_not_change_per_sample_outputs() {
    let mut r = rng();
    let mut store = ParamStore::<f32>::new();
    let conv = Conv2d::same(&mut store, "c", 3, 8, 3, &mut r);
    let xs: Vec<Tensor<f32>> = (0..3).map(|_| Tensor::randn([3, 8, 8], &mut r)).collect();
    let run = |batch: Vec<Tensor<f32>>| {
        let mut tape = Tape::inference();
        let x = tape.input(Tensor::stack(&batch).unwrap());
        let y = conv.forward(&mut tape, &store.bind(false), x).unwrap();
        tape.take_value(y).unstack()
    };
    let together = run(xs.clone());
    for (i, x) in xs.into_iter().enumerate() {
        assert_eq!(run(vec![x])[0], together[i]);
    }
}
