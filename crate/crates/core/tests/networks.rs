//! Architecture contracts: initialization, residual decompositions, the
//! affine prior, OSG identities, attention kernels, and model persistence.

use due::autodiff::{ParamSet, Tape};
use due::datasets::{NormStats, PairSet};
use due::networks::*;
use due::tensor::Tensor;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha20Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()).unwrap()
}

#[test]
fn glorot_bound_value() {
    let b = glorot_bound(4, 6);
    assert!((b - (6.0f64 / 10.0).sqrt()).abs() < 1e-15);
}

#[test]
fn fnn_spec_contracts() {
    assert!(FnnSpec::new(vec![3], Activation::Tanh).is_err());
    assert!(FnnSpec::new(vec![3, 0, 2], Activation::Tanh).is_err());
    let s = FnnSpec::uniform(2, 3, 10, 2, Activation::Gelu).unwrap();
    assert_eq!(s.widths, vec![2, 10, 10, 10, 2]);
    assert_eq!(s.input_width(), 2);
    assert_eq!(s.output_width(), 2);
    assert_eq!(s.layers(), 4);
}

#[test]
fn fnn_init_deterministic_bounded_zero_bias() {
    let spec = FnnSpec::uniform(3, 2, 8, 3, Activation::Tanh).unwrap();
    let p1 = fnn_init(&spec, 42).unwrap();
    let p2 = fnn_init(&spec, 42).unwrap();
    let p3 = fnn_init(&spec, 43).unwrap();
    let mut any_differs = false;
    for name in p1.names() {
        assert_eq!(p1.get(name).unwrap().data(), p2.get(name).unwrap().data());
        if p1.get(name).unwrap().data() != p3.get(name).unwrap().data() {
            any_differs = true;
        }
        if name.starts_with('b') {
            assert!(p1.get(name).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }
    assert!(any_differs, "different seeds must give different weights");

    // Glorot bounds per layer.
    let widths = &spec.widths;
    for l in 1..widths.len() {
        let bound = glorot_bound(widths[l - 1], widths[l]);
        let w = p1.get(&format!("w{l}")).unwrap();
        assert!(w.data().iter().all(|&v| v.abs() <= bound));
        // Not degenerate: weights actually spread out.
        let maxabs = w.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(maxabs > 0.1 * bound);
    }
}

/// Independent forward pass: plain loops over x·W + b with tanh.
fn fnn_eval(params: &ParamSet, spec: &FnnSpec, x: &Tensor) -> Tensor {
    let mut h = x.clone();
    for l in 1..=spec.layers() {
        let w = params.get(&format!("w{l}")).unwrap();
        let b = params.get(&format!("b{l}")).unwrap();
        let mut z = h.matmul(w).unwrap();
        for i in 0..z.rows() {
            for j in 0..z.cols() {
                let mut v = z.at(i, j) + b.data()[j];
                if l < spec.layers() {
                    v = match spec.activation {
                        Activation::Tanh => v.tanh(),
                        Activation::Relu => v.max(0.0),
                        Activation::Gelu => due::autodiff::gelu(v),
                    };
                }
                z.set(i, j, v);
            }
        }
        h = z;
    }
    h
}

#[test]
fn fnn_forward_matches_independent_evaluation() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for act in [Activation::Tanh, Activation::Relu, Activation::Gelu] {
        let spec = FnnSpec::uniform(3, 2, 7, 2, act).unwrap();
        let params = fnn_init(&spec, 1).unwrap();
        let x = rand_tensor(vec![4, 3], &mut rng);
        let expect = fnn_eval(&params, &spec, &x);

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xv = tape.constant(x);
        let y = fnn_forward(&mut tape, &bound, "", &spec, xv).unwrap();
        let got = tape.value(y);
        assert_eq!(got.shape(), expect.shape());
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn resnet_is_identity_plus_core() {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let spec = FnnSpec::uniform(3, 2, 5, 3, Activation::Tanh).unwrap();
    let params = fnn_init(&spec, 2).unwrap();
    let u = rand_tensor(vec![2, 3], &mut rng);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let uv = tape.constant(u.clone());
    let core = fnn_forward(&mut tape, &bound, "", &spec, uv).unwrap();
    let res = resnet_forward(&mut tape, &bound, "", &spec, uv).unwrap();
    for i in 0..u.rows() {
        for j in 0..u.cols() {
            let lhs = tape.value(res).at(i, j);
            let rhs = u.at(i, j) + tape.value(core).at(i, j);
            assert_eq!(lhs, rhs);
        }
    }
}

#[test]
fn memory_resnet_adds_to_latest_state() {
    let m = 2usize; // memory steps, so 3 history states of width 2
    let spec = FnnSpec::uniform((m + 1) * 2, 2, 5, 2, Activation::Tanh).unwrap();
    let params = fnn_init(&spec, 3).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let hist: Vec<Tensor> = (0..=m).map(|_| rand_tensor(vec![3, 2], &mut rng)).collect();

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let hv: Vec<_> = hist.iter().map(|h| tape.constant(h.clone())).collect();
    let out = memory_resnet_forward(&mut tape, &bound, "", &spec, &hv).unwrap();

    // Independent check: concat oldest-first, run the core, add the latest.
    let mut x = Tensor::zeros(vec![3, 6]);
    for i in 0..3 {
        for (s, h) in hist.iter().enumerate() {
            for j in 0..2 {
                x.set(i, s * 2 + j, h.at(i, j));
            }
        }
    }
    let core = fnn_eval(&params, &spec, &x);
    for i in 0..3 {
        for j in 0..2 {
            assert_eq!(tape.value(out).at(i, j), hist[m].at(i, j) + core.at(i, j));
        }
    }
}

/// Pairs exactly generated by u' = A·u + b (no model error).
fn affine_pairs(a: &Tensor, b: &[f64], count: usize, seed: u64) -> PairSet {
    let n = b.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let inputs = rand_tensor(vec![count, n], &mut rng);
    let mut outputs = Tensor::zeros(vec![count, n]);
    for i in 0..count {
        for j in 0..n {
            let mut v = b[j];
            for k in 0..n {
                v += a.at(j, k) * inputs.at(i, k);
            }
            outputs.set(i, j, v);
        }
    }
    PairSet { inputs, outputs, lag: 0.1 }
}

#[test]
fn affine_fit_recovers_exact_map() {
    // u' = A·u + b sampled at random states; least squares must recover the
    // coefficients to machine precision since the system is consistent.
    let a = Tensor::new(vec![2, 2], vec![0.9, -0.2, 0.15, 1.1]).unwrap();
    let b = vec![0.3, -0.7];
    let pairs = affine_pairs(&a, &b, 50, 17);
    let prior = affine_fit(&pairs).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            assert!((prior.a.at(i, j) - a.at(i, j)).abs() < 1e-10);
        }
        assert!((prior.b[i] - b[i]).abs() < 1e-10);
    }
    assert!(prior.residual(&pairs).unwrap() < 1e-20);
}

#[test]
fn affine_fit_needs_enough_pairs() {
    let a = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let pairs = affine_pairs(&a, &[0.0, 0.0], 2, 1); // J=2 < n+1=3
    assert!(affine_fit(&pairs).is_err());
}

#[test]
fn affine_prior_identity_and_apply() {
    let p = AffinePrior::identity(3);
    let u = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let out = p.apply(&u).unwrap();
    assert_eq!(out.data(), u.data());
}

#[test]
fn gresnet_is_prior_plus_core() {
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let spec = FnnSpec::uniform(2, 2, 5, 2, Activation::Tanh).unwrap();
    let params = fnn_init(&spec, 4).unwrap();
    let prior = AffinePrior {
        a: Tensor::new(vec![2, 2], vec![0.8, 0.1, -0.1, 0.9]).unwrap(),
        b: vec![0.05, -0.02],
    };
    let u = rand_tensor(vec![3, 2], &mut rng);
    let base = prior.apply(&u).unwrap();

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let uv = tape.constant(u.clone());
    let core = fnn_forward(&mut tape, &bound, "", &spec, uv).unwrap();
    let g = gresnet_forward(&mut tape, &prior, &bound, "", &spec, uv).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            assert_eq!(tape.value(g).at(i, j), base.at(i, j) + tape.value(core).at(i, j));
        }
    }
}

#[test]
fn osgnet_identity_at_zero_lag() {
    let net = OsgNet::new(FnnSpec::uniform(4, 3, 10, 3, Activation::Gelu).unwrap()).unwrap();
    let params = fnn_init(&net.core, 7).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let u = rand_tensor(vec![4, 3], &mut rng);
    let zero = Tensor::zeros(vec![4, 1]);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let uv = tape.constant(u.clone());
    let dv = tape.constant(zero);
    let out = osgnet_forward(&mut tape, &bound, "", &net, uv, dv).unwrap();
    assert_eq!(tape.value(out).data(), u.data());
}

#[test]
fn osgnet_rejects_negative_lag_and_bad_core() {
    assert!(OsgNet::new(FnnSpec::uniform(3, 1, 4, 3, Activation::Tanh).unwrap()).is_err());
    let net = OsgNet::new(FnnSpec::uniform(3, 1, 4, 2, Activation::Tanh).unwrap()).unwrap();
    let params = fnn_init(&net.core, 0).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let u = tape.constant(Tensor::zeros(vec![1, 2]));
    let d = tape.constant(Tensor::new(vec![1, 1], vec![-0.5]).unwrap());
    assert!(osgnet_forward(&mut tape, &bound, "", &net, u, d).is_err());
}

#[test]
fn osgnet_increment_scales_linearly_in_lag_for_fixed_feature() {
    // With the lag feature held fixed, the increment is exactly Δ·N(u, δ).
    let net = OsgNet::new(FnnSpec::uniform(3, 2, 6, 2, Activation::Tanh).unwrap()).unwrap();
    let params = fnn_init(&net.core, 9).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let u = rand_tensor(vec![1, 2], &mut rng);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let uv = tape.constant(u.clone());
    let feat = tape.constant(Tensor::new(vec![1, 1], vec![0.3]).unwrap());
    let d1 = tape.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
    let d2 = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
    let y1 = osgnet_forward_feat(&mut tape, &bound, "", &net, uv, d1, feat).unwrap();
    let y2 = osgnet_forward_feat(&mut tape, &bound, "", &net, uv, d2, feat).unwrap();
    for j in 0..2 {
        let inc1 = tape.value(y1).at(0, j) - u.at(0, j);
        let inc2 = tape.value(y2).at(0, j) - u.at(0, j);
        assert!((inc2 - 2.0 * inc1).abs() < 1e-14);
    }
}

#[test]
fn dual_osgnet_gate_is_convex_combination() {
    let branch = OsgNet::new(FnnSpec::uniform(3, 2, 8, 2, Activation::Gelu).unwrap()).unwrap();
    let gate = FnnSpec::uniform(1, 1, 20, 2, Activation::Gelu).unwrap();
    let net = DualOsgNet::new(branch, gate).unwrap();
    let params = net.init(21).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let u = rand_tensor(vec![5, 2], &mut rng);
    let lags = Tensor::new(vec![5, 1], vec![1e-4, 1e-2, 1.0, 10.0, 100.0]).unwrap();

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let uv = tape.constant(u.clone());
    let dv = tape.constant(lags.clone());
    let w = dual_osgnet_gate(&mut tape, &bound, &net, dv).unwrap();
    for i in 0..5 {
        let (wa, wb) = (tape.value(w).at(i, 0), tape.value(w).at(i, 1));
        assert!(wa > 0.0 && wb > 0.0);
        assert!((wa + wb - 1.0).abs() < 1e-12);
    }

    // Forward equals w_a·branch_a + w_b·branch_b row-wise.
    let ya = osgnet_forward_feat(&mut tape, &bound, "a.", &net.branch, uv, dv, dv).unwrap();
    let yb = osgnet_forward_feat(&mut tape, &bound, "b.", &net.branch, uv, dv, dv).unwrap();
    let y = dual_osgnet_forward(&mut tape, &bound, &net, uv, dv).unwrap();
    for i in 0..5 {
        for j in 0..2 {
            let expect = tape.value(w).at(i, 0) * tape.value(ya).at(i, j)
                + tape.value(w).at(i, 1) * tape.value(yb).at(i, j);
            assert!((tape.value(y).at(i, j) - expect).abs() < 1e-13);
        }
    }
}

#[test]
fn dual_osgnet_identity_at_zero_lag() {
    let branch = OsgNet::new(FnnSpec::uniform(3, 2, 8, 2, Activation::Gelu).unwrap()).unwrap();
    let gate = FnnSpec::uniform(1, 1, 20, 2, Activation::Gelu).unwrap();
    let net = DualOsgNet::new(branch, gate).unwrap();
    let params = net.init(22).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(15);
    let u = rand_tensor(vec![2, 2], &mut rng);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let uv = tape.constant(u.clone());
    let dv = tape.constant(Tensor::zeros(vec![2, 1]));
    let y = dual_osgnet_forward(&mut tape, &bound, &net, uv, dv).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            // Convex combination of two copies of u is u.
            assert!((tape.value(y).at(i, j) - u.at(i, j)).abs() < 1e-15);
        }
    }
}

#[test]
fn pairwise_sq_dist_hand_values() {
    let from = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
    let to = Tensor::new(vec![3, 1], vec![0.0, 1.0, 5.0]).unwrap();
    let d = pairwise_sq_dist(&from, &to).unwrap();
    assert_eq!(d.shape(), &[3, 2]);
    assert_eq!(d.row(0), &[0.0, 4.0]);
    assert_eq!(d.row(1), &[1.0, 1.0]);
    assert_eq!(d.row(2), &[25.0, 9.0]);
}

#[test]
fn attention_kernel_rows_sum_to_one_and_uniform_at_zero_bandwidth() {
    let mut rng = ChaCha20Rng::seed_from_u64(16);
    let from = rand_tensor(vec![7, 2], &mut rng);
    let to = rand_tensor(vec![4, 2], &mut rng);
    let a = pit_attention_kernel(2.5, &from, &to).unwrap();
    assert_eq!(a.shape(), &[4, 7]);
    for i in 0..4 {
        let sum: f64 = a.row(i).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(a.row(i).iter().all(|&v| v > 0.0));
    }

    // λ = 0 ⇒ every weight 1/p regardless of geometry.
    let a0 = pit_attention_kernel(0.0, &from, &to).unwrap();
    for v in a0.data() {
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    assert!(pit_attention_kernel(-1.0, &from, &to).is_err());
}

#[test]
fn attention_kernel_translation_invariant() {
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let from = rand_tensor(vec![5, 2], &mut rng);
    let to = rand_tensor(vec![5, 2], &mut rng);
    let mut from_shift = from.clone();
    let mut to_shift = to.clone();
    for i in 0..5 {
        for k in 0..2 {
            from_shift.set(i, k, from_shift.at(i, k) + 3.5);
            to_shift.set(i, k, to_shift.at(i, k) + 3.5);
        }
    }
    let a = pit_attention_kernel(1.7, &from, &to).unwrap();
    let b = pit_attention_kernel(1.7, &from_shift, &to_shift).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-13);
    }
}

#[test]
fn latent_coarsen_line_case() {
    // Centroid of {0,1,2,3} is 1.5; nearest (lowest index on the tie) is 1.0,
    // then the farthest remaining point is 3.0.
    let mesh = Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let lat = latent_mesh_coarsen(&mesh, 2).unwrap();
    let mut got: Vec<f64> = lat.data().to_vec();
    got.sort_by(f64::total_cmp);
    assert_eq!(got, vec![1.0, 3.0]);
}

#[test]
fn latent_coarsen_full_and_invalid() {
    let mesh = Tensor::new(vec![3, 1], vec![0.0, 0.5, 2.0]).unwrap();
    let lat = latent_mesh_coarsen(&mesh, 3).unwrap();
    let mut got: Vec<f64> = lat.data().to_vec();
    got.sort_by(f64::total_cmp);
    assert_eq!(got, vec![0.0, 0.5, 2.0]);
    assert!(latent_mesh_coarsen(&mesh, 0).is_err());
    assert!(latent_mesh_coarsen(&mesh, 4).is_err());
}

fn uniform_mesh(n: usize) -> Tensor {
    let xs: Vec<f64> = (1..=n)
        .map(|i| 2.0 * std::f64::consts::PI * i as f64 / (n + 1) as f64)
        .collect();
    Tensor::new(vec![n, 1], xs).unwrap()
}

#[test]
fn pit_init_bandwidth_matches_latent_spacing() {
    let mesh = uniform_mesh(16);
    let latent = latent_mesh_coarsen(&mesh, 8).unwrap();
    let spec = PitSpec::new(mesh, latent, 2, 12, 1, Activation::Gelu).unwrap();
    let params = pit_init(&spec, 0).unwrap();
    let h = spec.latent_spacing();
    let lambda0 = 1.0 / (h * h);
    for l in 1..=2 {
        let rho = params.get(&format!("rho{l}")).unwrap().data()[0];
        let softplus = (1.0f64 + rho.exp()).ln();
        assert!((softplus - lambda0).abs() / lambda0 < 1e-9);
    }
    // Weight-only: no bias parameters anywhere.
    assert!(params.names().all(|n| !n.starts_with('b')));
}

#[test]
fn pit_forward_shapes_and_mesh_argument() {
    let mesh = uniform_mesh(12);
    let latent = latent_mesh_coarsen(&mesh, 6).unwrap();
    let spec = PitSpec::new(mesh.clone(), latent, 2, 8, 1, Activation::Gelu).unwrap();
    let params = pit_init(&spec, 1).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(18);
    let field = rand_tensor(vec![12, 1], &mut rng);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fv = tape.constant(field.clone());
    let out = pit_forward(&mut tape, &bound, &spec, fv).unwrap();
    assert_eq!(tape.value(out).shape(), &[12, 1]);

    // Evaluating on a finer mesh produces values on that mesh.
    let fine = uniform_mesh(20);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let ffine = rand_tensor(vec![20, 1], &mut rng);
    let fv = tape.constant(ffine);
    let out = pit_forward_batch_on_mesh(&mut tape, &bound, &spec, &fine, &[fv]).unwrap();
    assert_eq!(tape.value(out[0]).shape(), &[20, 1]);
}

#[test]
fn pit_resnet_is_identity_plus_block() {
    let mesh = uniform_mesh(10);
    let latent = latent_mesh_coarsen(&mesh, 5).unwrap();
    let spec = PitSpec::new(mesh.clone(), latent, 2, 8, 1, Activation::Gelu).unwrap();
    let params = pit_init(&spec, 2).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(19);
    let field = rand_tensor(vec![10, 1], &mut rng);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fv = tape.constant(field.clone());
    let block = pit_forward(&mut tape, &bound, &spec, fv).unwrap();
    let res =
        pit_resnet_forward_on_mesh(&mut tape, &bound, &spec, &spec.mesh.clone(), &[fv]).unwrap();
    for i in 0..10 {
        assert_eq!(
            tape.value(res[0]).at(i, 0),
            field.at(i, 0) + tape.value(block).at(i, 0)
        );
    }
}

#[test]
fn model_kind_name_parse_round_trip() {
    for k in [
        ModelKind::ResNet,
        ModelKind::GResNet,
        ModelKind::OsgNet,
        ModelKind::DualOsgNet,
        ModelKind::PitResNet,
    ] {
        assert_eq!(ModelKind::parse(k.name()).unwrap(), k);
    }
    assert!(ModelKind::parse("mlp").is_err());
}

fn roundtrip(bundle: &ModelBundle) -> ModelBundle {
    let text = save_model(bundle).unwrap();
    let back = load_model(&text).unwrap();
    // Saving the loaded bundle must reproduce the text byte for byte.
    assert_eq!(save_model(&back).unwrap(), text);
    back
}

fn assert_params_equal(a: &ParamSet, b: &ParamSet) {
    let mut na: Vec<&str> = a.names().collect();
    let mut nb: Vec<&str> = b.names().collect();
    na.sort();
    nb.sort();
    assert_eq!(na, nb);
    for n in na {
        assert_eq!(a.get(n).unwrap().shape(), b.get(n).unwrap().shape());
        assert_eq!(a.get(n).unwrap().data(), b.get(n).unwrap().data(), "param {n}");
    }
}

#[test]
fn save_load_round_trip_resnet() {
    let spec = FnnSpec::uniform(2, 3, 10, 2, Activation::Gelu).unwrap();
    let params = fnn_init(&spec, 0).unwrap();
    let bundle = ModelBundle {
        kind: ModelKind::ResNet,
        spec: Some(spec),
        gate_spec: None,
        pit: None,
        params,
        prior: None,
        norm: NormStats {
            mean: vec![0.25, -1.5],
            std: vec![1.75, 0.5],
            field: false,
            lag: None,
        },
        memory: 0,
        lag: LagInfo::Fixed(0.02),
        seed: 7,
    };
    let back = roundtrip(&bundle);
    assert_eq!(back.kind, ModelKind::ResNet);
    assert_eq!(back.spec, bundle.spec);
    assert_eq!(back.norm, bundle.norm);
    assert_eq!(back.memory, 0);
    assert_eq!(back.lag, LagInfo::Fixed(0.02));
    assert_eq!(back.seed, 7);
    assert_params_equal(&bundle.params, &back.params);
}

#[test]
fn save_load_round_trip_gresnet_memory() {
    let m = 2usize;
    let spec = FnnSpec::uniform(2, 2, 6, 2, Activation::Tanh).unwrap();
    // gResNet with memory zero here; memory round-trips through metadata.
    let params = fnn_init(&spec, 1).unwrap();
    let prior = AffinePrior {
        a: Tensor::new(vec![2, 2], vec![0.9, 0.1, -0.1, 1.05]).unwrap(),
        b: vec![1e-3, -2e-3],
    };
    let bundle = ModelBundle {
        kind: ModelKind::GResNet,
        spec: Some(spec),
        gate_spec: None,
        pit: None,
        params,
        prior: Some(prior.clone()),
        norm: NormStats {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
            field: false,
            lag: None,
        },
        memory: m,
        lag: LagInfo::Fixed(0.01),
        seed: 0,
    };
    let back = roundtrip(&bundle);
    assert_eq!(back.prior.as_ref().unwrap(), &prior);
    assert_eq!(back.memory, m);
}

#[test]
fn save_load_round_trip_dual_osgnet() {
    let branch = OsgNet::new(FnnSpec::uniform(4, 3, 60, 3, Activation::Gelu).unwrap()).unwrap();
    let gate = FnnSpec::uniform(1, 1, 20, 2, Activation::Gelu).unwrap();
    let net = DualOsgNet::new(branch.clone(), gate.clone()).unwrap();
    let params = net.init(3).unwrap();
    let bundle = ModelBundle {
        kind: ModelKind::DualOsgNet,
        spec: Some(branch.core),
        gate_spec: Some(gate),
        pit: None,
        params,
        prior: None,
        norm: NormStats {
            mean: vec![0.3, 0.0, 0.7],
            std: vec![0.2, 1e-4, 0.2],
            field: false,
            lag: Some((-4.5, 2.5)),
        },
        memory: 0,
        lag: LagInfo::Range(10f64.powf(-4.5), 10f64.powf(2.5)),
        seed: 3,
    };
    let back = roundtrip(&bundle);
    assert_eq!(back.gate_spec, bundle.gate_spec);
    assert_eq!(back.norm.lag, bundle.norm.lag);
    assert_eq!(back.lag, bundle.lag);
    assert_params_equal(&bundle.params, &back.params);
}

#[test]
fn save_load_round_trip_pit() {
    let mesh = uniform_mesh(16);
    let latent = latent_mesh_coarsen(&mesh, 8).unwrap();
    let spec = PitSpec::new(mesh, latent, 3, 16, 1, Activation::Gelu).unwrap();
    let params = pit_init(&spec, 5).unwrap();
    let bundle = ModelBundle {
        kind: ModelKind::PitResNet,
        spec: None,
        gate_spec: None,
        pit: Some(spec.clone()),
        params,
        prior: None,
        norm: NormStats {
            mean: vec![0.1],
            std: vec![0.9],
            field: true,
            lag: None,
        },
        memory: 0,
        lag: LagInfo::Fixed(0.05),
        seed: 5,
    };
    let back = roundtrip(&bundle);
    let bp = back.pit.as_ref().unwrap();
    assert_eq!(bp.mesh.data(), spec.mesh.data());
    assert_eq!(bp.latent_mesh.data(), spec.latent_mesh.data());
    assert_eq!(bp.depth, 3);
    assert_eq!(bp.width, 16);
    assert!(back.norm.field);
    assert_params_equal(&bundle.params, &back.params);
}

#[test]
fn load_rejects_garbage() {
    assert!(load_model("not a model").is_err());
    assert!(load_model("DUE-MODEL v2\nkind = resnet\n").is_err());
}

#[test]
fn bundle_validate_contracts() {
    let spec = FnnSpec::uniform(2, 1, 4, 2, Activation::Tanh).unwrap();
    let params = fnn_init(&spec, 0).unwrap();
    let bad = ModelBundle {
        kind: ModelKind::ResNet,
        spec: Some(spec),
        gate_spec: None,
        pit: None,
        params,
        prior: Some(AffinePrior::identity(2)), // prior on a plain ResNet
        norm: NormStats::identity(2),
        memory: 0,
        lag: LagInfo::Fixed(0.1),
        seed: 0,
    };
    assert!(bad.validate().is_err());
}
