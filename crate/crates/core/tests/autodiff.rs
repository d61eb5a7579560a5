//! Gradient checks against central finite differences, plus the elementary
//! value contracts of each tape operation.

use due::autodiff::{gelu, ParamSet, Tape};
use due::tensor::Tensor;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha20Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-12)
}

/// Central finite-difference gradient of `f` with respect to every entry of
/// every parameter, compared against the tape gradient.
fn check_grads<F>(params: &mut ParamSet, f: F, tol: f64)
where
    F: Fn(&ParamSet) -> f64,
{
    let h = 1e-5;
    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    for name in names {
        let len = params.get(&name).unwrap().len();
        for i in 0..len {
            let orig = params.get(&name).unwrap().data()[i];
            params.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = f(params);
            params.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = f(params);
            params.get_mut(&name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let tape_grad = params.grad_of(&name).unwrap().data()[i];
            assert!(
                rel_err(fd, tape_grad) < tol,
                "{}[{}]: fd {} vs tape {}",
                name,
                i,
                fd,
                tape_grad
            );
        }
    }
}

#[test]
fn matmul_values() {
    let mut tape = Tape::new();
    let i2 = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let v = tape.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let out = tape.matmul(i2, v).unwrap();
    assert_eq!(tape.value(out).data(), &[3.0, 4.0]);

    let a = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = tape.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let d = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(d).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_errors() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 3]));
    let b = tape.leaf(Tensor::zeros(vec![2, 3]));
    assert!(tape.matmul(a, b).is_err());
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut params = ParamSet::new();
    params.insert("a", rand_tensor(vec![3, 4], &mut rng)).unwrap();
    let b_fixed = rand_tensor(vec![4, 2], &mut rng);

    let loss = |p: &ParamSet| -> f64 {
        p.get("a").unwrap().matmul(&b_fixed).unwrap().data().iter().sum()
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let b = tape.constant(b_fixed.clone());
    let prod = tape.matmul(bound.var("a"), b).unwrap();
    let s = tape.sum(prod).unwrap();
    tape.backward(s).unwrap();
    params.zero_grads();
    params.accumulate_grads(&tape, &bound);
    check_grads(&mut params, loss, 1e-6);
}

#[test]
fn elementwise_values() {
    assert_eq!(gelu(0.0), 0.0);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, -1.0]).unwrap());
    let t = tape.tanh(x);
    assert_eq!(tape.value(t).data()[0], 0.0);
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data()[1], 0.0);
}

#[test]
fn gelu_derivative_matches_finite_difference() {
    // d/dx gelu at 0.7 against a central difference of the same forward.
    let h = 1e-5;
    let fd = (gelu(0.7 + h) - gelu(0.7 - h)) / (2.0 * h);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.7));
    let y = tape.gelu(x);
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap().data()[0];
    assert!(rel_err(fd, g) < 1e-6, "fd {fd} vs tape {g}");
}

#[test]
fn gelu_cdf_accuracy() {
    // The erf rational approximation is quoted at ≤ 1.5e-7 absolute error;
    // spot-check Φ against high-precision values.
    let known = [(0.0, 0.5), (1.0, 0.841344746068543), (-2.0, 0.022750131948179)];
    for (x, phi) in known {
        assert!((due::autodiff::norm_cdf(x) - phi).abs() < 2e-7);
    }
}

#[test]
fn softmax_rows_values_and_invariants() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let s = tape.softmax_rows(x).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

    let x2 = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap());
    let s2 = tape.softmax_rows(x2).unwrap();
    assert!((tape.value(s2).data()[0] - 0.25).abs() < 1e-12);
    assert!((tape.value(s2).data()[1] - 0.75).abs() < 1e-12);

    // Row sums 1; shift invariance.
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let a = rand_tensor(vec![3, 4], &mut rng);
    let mut shifted = a.clone();
    for i in 0..3 {
        for j in 0..4 {
            shifted.set(i, j, shifted.at(i, j) + 17.25);
        }
    }
    let va = tape.leaf(a);
    let vs = tape.leaf(shifted);
    let sa = tape.softmax_rows(va).unwrap();
    let ss = tape.softmax_rows(vs).unwrap();
    for i in 0..3 {
        let sum: f64 = tape.value(sa).row(i).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for j in 0..4 {
            assert!((tape.value(sa).at(i, j) - tape.value(ss).at(i, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_rejects_non_finite() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
    assert!(tape.softmax_rows(x).is_err());
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let mut params = ParamSet::new();
    params.insert("x", rand_tensor(vec![3, 4], &mut rng)).unwrap();
    let w = rand_tensor(vec![3, 4], &mut rng); // weights so the seed mixes rows

    let loss = |p: &ParamSet| -> f64 {
        let x = p.get("x").unwrap();
        let mut acc = 0.0;
        for i in 0..3 {
            let row = x.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..4 {
                acc += w.at(i, j) * (row[j] - mx).exp() / denom;
            }
        }
        acc
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let s = tape.softmax_rows(bound.var("x")).unwrap();
    let wv = tape.constant(w.clone());
    let prod = tape.mul(s, wv).unwrap();
    let total = tape.sum(prod).unwrap();
    tape.backward(total).unwrap();
    params.zero_grads();
    params.accumulate_grads(&tape, &bound);
    check_grads(&mut params, loss, 1e-6);
}

#[test]
fn reduces() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let ss = tape.sum_squares(x).unwrap();
    assert_eq!(tape.value(ss).data()[0], 25.0);
    let y = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let m = tape.mean(y).unwrap();
    assert_eq!(tape.value(m).data()[0], 2.0);

    tape.backward(ss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[6.0, 8.0]);
}

#[test]
fn reduce_of_empty_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(vec![0]));
    assert!(tape.sum(x).is_err());
    assert!(tape.mean(x).is_err());
    assert!(tape.sum_squares(x).is_err());
}

#[test]
fn concat_cols_and_gradient_split() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
    let b = tape.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
    let c = tape.concat_cols(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0]);

    let p = tape.leaf(Tensor::zeros(vec![2, 3]));
    let q = tape.leaf(Tensor::zeros(vec![2, 1]));
    let pq = tape.concat_cols(p, q).unwrap();
    assert_eq!(tape.value(pq).shape(), &[2, 4]);
    let s = tape.sum(pq).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(p).unwrap().data().iter().all(|&g| g == 1.0));
    assert!(tape.grad(q).unwrap().data().iter().all(|&g| g == 1.0));

    let r = tape.leaf(Tensor::zeros(vec![3, 1]));
    assert!(tape.concat_cols(p, r).is_err());
}

#[test]
fn backward_identity_and_linear() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.5));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0]);

    // f(W) = sum(W·x) → dW = outer(ones, x)
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::zeros(vec![2, 3]));
    let xfix = tape.constant(Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap());
    let prod = tape.matmul(w, xfix).unwrap();
    let total = tape.sum(prod).unwrap();
    tape.backward(total).unwrap();
    let g = tape.grad(w).unwrap();
    for i in 0..2 {
        assert_eq!(g.row(i), &[1.0, -2.0, 0.5]);
    }
}

#[test]
fn backward_rejects_non_scalar_seed() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(vec![2, 2]));
    assert!(tape.backward(x).is_err());
}

fn mlp_loss_value(params: &ParamSet, x: &Tensor, target: &Tensor) -> f64 {
    // Straight-line re-evaluation without the tape: 2 hidden tanh layers.
    let mut h = x.clone();
    for l in 1..=3 {
        let w = params.get(&format!("w{l}")).unwrap();
        let b = params.get(&format!("b{l}")).unwrap();
        let mut z = h.matmul(w).unwrap();
        for i in 0..z.rows() {
            for j in 0..z.cols() {
                let v = z.at(i, j) + b.data()[j];
                z.set(i, j, if l < 3 { v.tanh() } else { v });
            }
        }
        h = z;
    }
    h.data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / x.rows() as f64
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let widths = [3usize, 6, 6, 2];
    let mut params = ParamSet::new();
    for l in 1..=3 {
        params
            .insert(&format!("w{l}"), rand_tensor(vec![widths[l - 1], widths[l]], &mut rng))
            .unwrap();
        params
            .insert(&format!("b{l}"), rand_tensor(vec![1, widths[l]], &mut rng))
            .unwrap();
    }
    let x = rand_tensor(vec![4, 3], &mut rng);
    let target = rand_tensor(vec![4, 2], &mut rng);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let mut h = xv;
    for l in 1..=3 {
        h = tape.matmul(h, bound.var(&format!("w{l}"))).unwrap();
        h = tape.add_bias(h, bound.var(&format!("b{l}"))).unwrap();
        if l < 3 {
            h = tape.tanh(h);
        }
    }
    let tv = tape.constant(target.clone());
    let d = tape.sub(h, tv).unwrap();
    let ss = tape.sum_squares(d).unwrap();
    let loss = tape.scale(ss, 1.0 / 4.0);
    tape.backward(loss).unwrap();
    params.zero_grads();
    params.accumulate_grads(&tape, &bound);

    check_grads(&mut params, |p| mlp_loss_value(p, &x, &target), 1e-6);
}

#[test]
fn backward_is_additive() {
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let xval = rand_tensor(vec![2, 2], &mut rng);

    let grad_of = |which: u8| -> Tensor {
        let mut tape = Tape::new();
        let x = tape.leaf(xval.clone());
        let f = tape.sum_squares(x).unwrap();
        let e = tape.exp(x);
        let g = tape.sum(e).unwrap();
        let seed = match which {
            0 => f,
            1 => g,
            _ => tape.add(f, g).unwrap(),
        };
        tape.backward(seed).unwrap();
        tape.grad(x).unwrap().clone()
    };
    let gf = grad_of(0);
    let gg = grad_of(1);
    let gsum = grad_of(2);
    for i in 0..4 {
        assert!((gsum.data()[i] - gf.data()[i] - gg.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn forward_and_gradients_deterministic() {
    let run = || -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let xval = rand_tensor(vec![3, 3], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(xval);
        let t = tape.gelu(x);
        let s = tape.sum_squares(t).unwrap();
        tape.backward(s).unwrap();
        (
            tape.value(s).data().to_vec(),
            tape.grad(x).unwrap().data().to_vec(),
        )
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1, v2);
    assert_eq!(g1, g2);
}
