use powerformer::tensor::{self, Adam, AdamConfig, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares tape gradients of every input against central differences.
fn check<F>(inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let loss = tape.sum(out);
        let value = tape.value(loss).item();
        tape.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = vars.iter().map(|v| tape.grad(*v).unwrap().to_vec()).collect();
        (value, grads)
    };
    let (_, analytic) = eval(&inputs);
    let h = 1e-6;
    for (k, x) in inputs.iter().enumerate() {
        for e in 0..x.len() {
            let mut xs = inputs.clone();
            xs[k].data_mut()[e] += h;
            let lp = eval(&xs).0;
            xs[k].data_mut()[e] -= 2.0 * h;
            let lm = eval(&xs).0;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[k][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            assert!(rel < 1e-5, "input {k}[{e}]: tape {a} vs numeric {numeric}");
        }
    }
}

/// Weights the output so every element contributes a distinct gradient.
fn weighted(tape: &mut Tape, out: Var) -> Var {
    let n = tape.value(out).len();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + (i as f64 * 0.37).sin()).collect();
    tape.mul_const(out, w).unwrap()
}

#[test]
fn matmul_and_bias_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check(vec![random(&mut rng, &[2, 3, 4]), random(&mut rng, &[4, 5]), random(&mut rng, &[5])], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        let y = t.add_bias(y, v[2]).unwrap();
        weighted(t, y)
    });
}

#[test]
fn bmm_gradients_both_layouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trans_b in [false, true] {
        let b_shape = if trans_b { [2, 5, 4] } else { [2, 4, 5] };
        check(vec![random(&mut rng, &[2, 3, 4]), random(&mut rng, &b_shape)], |t, v| {
            let y = t.bmm(v[0], v[1], trans_b).unwrap();
            weighted(t, y)
        });
    }
}

#[test]
fn softmax_with_masked_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mask = Tensor::new(
        vec![3, 3],
        vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, -0.5, 0.0, f64::NEG_INFINITY, -1.0, -0.5, 0.0],
    )
    .unwrap();
    check(vec![random(&mut rng, &[2, 3, 3])], |t, v| {
        let m = t.constant(mask.clone());
        let s = t.add_broadcast(v[0], m).unwrap();
        let p = t.softmax(s);
        weighted(t, p)
    });
}

#[test]
fn layer_norm_gelu_and_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check(
        vec![random(&mut rng, &[3, 6]), random(&mut rng, &[6]), random(&mut rng, &[6]), random(&mut rng, &[3, 6])],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let y = t.gelu(y);
            let y = t.mul(y, v[3]).unwrap();
            let y = t.add(y, v[3]).unwrap();
            let y = t.scale(y, 1.7);
            weighted(t, y)
        },
    );
}

#[test]
fn reshape_concat_affine_and_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target = random(&mut rng, &[2, 5]);
    check(vec![random(&mut rng, &[2, 2]), random(&mut rng, &[2, 3])], |t, v| {
        let c = t.concat_last(&[v[0], v[1]]).unwrap();
        let r = t.reshape(c, vec![10]).unwrap();
        let r = t.reshape(r, vec![2, 5]).unwrap();
        let a = t.row_affine(r, vec![2.0, -0.5], vec![1.0, 3.0]).unwrap();
        t.mse(a, &target).unwrap()
    });
}

#[test]
fn parametric_node_chains_to_scalar() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    check(vec![Tensor::scalar(0.7), random(&mut rng, &[4])], |t, v| {
        let a = t.value(v[0]).item();
        let value = Tensor::vector((1..=4).map(|k| (k as f64).powf(-a)).collect());
        let d = (1..=4).map(|k| -(k as f64).ln() * (k as f64).powf(-a)).collect();
        let m = t.parametric(v[0], value, d).unwrap();
        t.mul(m, v[1]).unwrap()
    });
}

#[test]
fn matmul_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[16, 16]);
    let b = random(&mut rng, &[16, 16]);
    let c = tensor::matmul(&a, &b).unwrap();
    for i in 0..16 {
        for j in 0..16 {
            let mut s = 0.0;
            for k in 0..16 {
                s += a.at(i, k) * b.at(k, j);
            }
            assert!((c.at(i, j) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = Tape::new();
        let x = t.param(random(&mut rng, &[4, 8]));
        let w = t.param(random(&mut rng, &[8, 8]));
        let y = t.matmul(x, w).unwrap();
        let y = t.softmax(y);
        let y = t.gelu(y);
        let l = t.sum(y);
        t.backward(l).unwrap();
        (t.grad(x).unwrap().to_vec(), t.grad(w).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 4]));
    assert!(t.matmul(a, b).is_err());
    assert!(t.add(a, b).is_err());
    assert!(t.bmm(a, b, false).is_err());
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
    let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
    adam.step(&mut p, &[vec![3.0, -0.5]]).unwrap();
    let v = p[0].data();
    assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-6, "{v:?}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..12, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = random(&mut rng, &[rows, cols]);
        x.data_mut().iter_mut().for_each(|v| *v *= 50.0);
        for r in 0..rows {
            for c in r + 1..cols {
                x.data_mut()[r * cols + c] = f64::NEG_INFINITY;
            }
        }
        let p = tensor::softmax_lastdim(&x);
        for row in p.data().chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
