//! Every differentiable tape op against central finite differences.

use proptest::prelude::*;
use rpa_core::autodiff::{max_relative_error, numeric_gradient};
use rpa_core::{ParamId, Rng, Tape, Tensor, Var};

const H: f64 = 1e-6;
const RTOL: f64 = 1e-3;
const FLOOR: f64 = 1e-4;

fn weights(shape: &[usize]) -> Tensor {
    let mut rng = Rng::new(shape.iter().product::<usize>() as u64 + 17);
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Random linear read-out so that every output entry matters.
fn readout(tape: &mut Tape, y: Var) -> Var {
    let w = tape.constant(weights(tape.shape(y)));
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

fn rel_err(x: &Tensor, f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let v = tape.param(ParamId::from_index(0), x.clone());
    let y = f(&mut tape, v);
    let y = readout(&mut tape, y);
    let g = tape.backward(y).unwrap();
    let analytic = g.param(ParamId::from_index(0)).unwrap();
    let numeric = numeric_gradient(x, H, |xp| {
        let mut t = Tape::new();
        let v = t.constant(xp.clone());
        let y = f(&mut t, v);
        let y = readout(&mut t, y);
        t.value(y).item()
    });
    max_relative_error(&analytic, &numeric, FLOOR)
}

fn tensor(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    proptest::collection::vec(lo..hi, n).prop_map(move |v| Tensor::new(shape, v).unwrap())
}

/// Entries bounded away from zero in magnitude.
fn away_from_zero(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    proptest::collection::vec((0.2f64..2.0, any::<bool>()), n).prop_map(move |v| {
        Tensor::new(shape, v.into_iter().map(|(m, s)| if s { m } else { -m }).collect()).unwrap()
    })
}

macro_rules! check {
    ($e:expr) => {{
        let e = $e;
        prop_assert!(e < RTOL, "relative error {}", e);
    }};
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_unary(x in tensor(&[2, 3], -2.0, 2.0)) {
        check!(rel_err(&x, |t, v| t.exp(v)));
        check!(rel_err(&x, |t, v| t.tanh(v)));
        check!(rel_err(&x, |t, v| t.sigmoid(v)));
        check!(rel_err(&x, |t, v| t.gelu(v)));
        check!(rel_err(&x, |t, v| t.square(v)));
        check!(rel_err(&x, |t, v| t.neg(v)));
        check!(rel_err(&x, |t, v| t.scale(v, -1.7)));
        check!(rel_err(&x, |t, v| t.add_scalar(v, 0.3)));
        check!(rel_err(&x, |t, v| t.nan_to_num(v, 0.0, 1.0, -1.0)));
    }

    #[test]
    fn positive_domain(x in tensor(&[2, 3], 0.2, 3.0)) {
        check!(rel_err(&x, |t, v| t.ln(v)));
        check!(rel_err(&x, |t, v| t.sqrt(v)));
    }

    #[test]
    fn kinked_ops_away_from_kinks(x in away_from_zero(&[2, 3])) {
        check!(rel_err(&x, |t, v| t.relu(v)));
        check!(rel_err(&x, |t, v| t.clamp_min(v, 0.0)));
        // kinks at +-0.1 are never hit since |x| >= 0.2
        check!(rel_err(&x, |t, v| t.clamp(v, -0.1, 0.1)));
        check!(rel_err(&x, |t, v| t.clamp(v, -5.0, 5.0)));
    }

    #[test]
    fn binary_broadcasting(a in tensor(&[2, 3], -2.0, 2.0), b in away_from_zero(&[3])) {
        let bc = b.clone();
        check!(rel_err(&a, |t, v| { let c = t.constant(bc.clone()); t.add(v, c).unwrap() }));
        check!(rel_err(&a, |t, v| { let c = t.constant(bc.clone()); t.sub(v, c).unwrap() }));
        check!(rel_err(&a, |t, v| { let c = t.constant(bc.clone()); t.mul(v, c).unwrap() }));
        check!(rel_err(&a, |t, v| { let c = t.constant(bc.clone()); t.div(v, c).unwrap() }));
        let ac = a.clone();
        check!(rel_err(&b, |t, v| { let c = t.constant(ac.clone()); t.mul(c, v).unwrap() }));
        check!(rel_err(&b, |t, v| { let c = t.constant(ac.clone()); t.div(c, v).unwrap() }));
        check!(rel_err(&b, |t, v| { let c = t.constant(ac.clone()); t.sub(c, v).unwrap() }));
    }

    #[test]
    fn reductions(x in tensor(&[2, 3, 4], -2.0, 2.0)) {
        check!(rel_err(&x, |t, v| t.sum(v)));
        check!(rel_err(&x, |t, v| t.mean(v)));
        for axis in 0..3 {
            check!(rel_err(&x, |t, v| t.sum_axis(v, axis).unwrap()));
            check!(rel_err(&x, |t, v| t.mean_axis(v, axis).unwrap()));
        }
        check!(rel_err(&x, |t, v| t.mean_std(v).1));
        check!(rel_err(&x, |t, v| {
            let (m, s) = t.mean_std(v);
            let c = t.sub(v, m).unwrap();
            t.div(c, s).unwrap()
        }));
    }

    #[test]
    fn softmax_and_mask(x in tensor(&[2, 3, 3], -3.0, 3.0)) {
        check!(rel_err(&x, |t, v| t.softmax(v)));
        check!(rel_err(&x, |t, v| { let m = t.causal_mask(v).unwrap(); t.softmax(m) }));
    }

    #[test]
    fn layout_ops(x in tensor(&[2, 3, 4], -2.0, 2.0)) {
        check!(rel_err(&x, |t, v| t.permute(v, &[2, 0, 1]).unwrap()));
        check!(rel_err(&x, |t, v| t.transpose(v).unwrap()));
        check!(rel_err(&x, |t, v| t.reshape(v, &[6, 4]).unwrap()));
        check!(rel_err(&x, |t, v| t.select_last(v, 2).unwrap()));
    }

    #[test]
    fn products(a in tensor(&[2, 3, 4], -2.0, 2.0), b in tensor(&[4, 5], -2.0, 2.0)) {
        let bc = b.clone();
        check!(rel_err(&a, |t, v| { let c = t.constant(bc.clone()); t.matmul(v, c).unwrap() }));
        let ac = a.clone();
        check!(rel_err(&b, |t, v| { let c = t.constant(ac.clone()); t.matmul(c, v).unwrap() }));
        check!(rel_err(&b, |t, v| { let c = t.constant(ac.clone()); t.contract(c, v, "btk,kn->bn").unwrap() }));
        check!(rel_err(&a, |t, v| { let c = t.constant(bc.clone()); t.contract(v, c, "btk,kn->tn").unwrap() }));
    }

    #[test]
    fn batched_matmul(a in tensor(&[2, 3, 4], -2.0, 2.0), b in tensor(&[2, 4, 2], -2.0, 2.0)) {
        let bc = b.clone();
        check!(rel_err(&a, |t, v| { let c = t.constant(bc.clone()); t.matmul(v, c).unwrap() }));
        let ac = a.clone();
        check!(rel_err(&b, |t, v| { let c = t.constant(ac.clone()); t.matmul(c, v).unwrap() }));
    }

    #[test]
    fn layer_norm_all_inputs(x in tensor(&[3, 5], -2.0, 2.0), g in tensor(&[5], 0.5, 1.5), b in tensor(&[5], -0.5, 0.5)) {
        let (gc, bc, xc) = (g.clone(), b.clone(), x.clone());
        check!(rel_err(&x, |t, v| {
            let (g, b) = (t.constant(gc.clone()), t.constant(bc.clone()));
            t.layer_norm(v, g, b, 1e-5).unwrap()
        }));
        check!(rel_err(&g, |t, v| {
            let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone()));
            t.layer_norm(x, v, b, 1e-5).unwrap()
        }));
        check!(rel_err(&b, |t, v| {
            let (x, g) = (t.constant(xc.clone()), t.constant(gc.clone()));
            t.layer_norm(x, g, v, 1e-5).unwrap()
        }));
    }

    #[test]
    fn embedding_and_cross_entropy(table in tensor(&[5, 3], -2.0, 2.0), logits in tensor(&[4, 5], -3.0, 3.0), smooth in 0.0f64..0.2) {
        check!(rel_err(&table, |t, v| t.embedding(v, &[0, 3, 3, 1], &[2, 2]).unwrap()));
        check!(rel_err(&logits, |t, v| t.cross_entropy_sum(v, &[0, 4, 2, 2], smooth).unwrap()));
    }
}
