use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Direct six-loop cross-correlation used as the conv2d oracle.
fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, pad: usize, stride: usize) -> Tensor<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += k.data()[((co * cin + ci) * kh + ky) * kw + kx]
                                * x.data()[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = s;
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out).unwrap()
}

const TOL64: f64 = 1e-5;
const EPS64: f64 = 1e-5;

fn check64(f: impl Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var>, params: &[Tensor<f64>]) -> f64 {
    finite_difference_check(f, params, EPS64).unwrap().max_rel_err
}

/// Reduces an arbitrary tensor to a scalar with non-uniform weights so that
/// every output element carries a distinct gradient.
fn probe(g: &mut Graph<f64>, v: Var) -> crate::Result<Var> {
    let n = g.value(v).numel();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 7.0).collect();
    let y = g.mul_const(v, w)?;
    Ok(g.sum(y))
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape(msg)) => {
            assert!(msg.contains("[2, 3]"), "{msg}");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = [rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])];
    let err = check64(
        |g, p| {
            let c = g.matmul(p[0], p[1])?;
            probe(g, c)
        },
        &params,
    );
    assert!(err < TOL64, "{err}");
}

#[test]
fn batched_matmul_broadcasts_and_differentiates() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[2, 3, 2, 4]);
    let b = rand_tensor(&mut rng, &[4, 3]);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    assert_eq!(g.shape(c), &[2, 3, 2, 3]);
    // batch element (1, 2), row 1, col 2
    let mut expect = 0.0;
    for p in 0..4 {
        expect += a.data()[((1 * 3 + 2) * 2 + 1) * 4 + p] * b.data()[p * 3 + 2];
    }
    assert!((g.value(c).data()[((1 * 3 + 2) * 2 + 1) * 3 + 2] - expect).abs() < 1e-12);
    let err = check64(
        |g, p| {
            let c = g.matmul(p[0], p[1])?;
            probe(g, c)
        },
        &[a, b],
    );
    assert!(err < TOL64, "{err}");
}

#[test]
fn conv2d_identity_and_full_support() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn([1, 3, 3], |i| i as f64));
    let k = g.constant(Tensor::ones([1, 1, 1, 1]));
    let y = g.conv2d(x, k, None, 0, 1).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let ones = g.constant(Tensor::ones([1, 3, 3]));
    let k3 = g.constant(Tensor::ones([1, 1, 3, 3]));
    let s = g.conv2d(ones, k3, None, 1, 1).unwrap();
    assert_eq!(g.shape(s), &[1, 3, 3]);
    assert_eq!(g.value(s).data()[4], 9.0);
    assert_eq!(g.value(s).data()[0], 4.0);
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 5, 5]);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    for (pad, stride) in [(1, 1), (0, 1), (1, 2), (2, 3)] {
        let mut g = Graph::new();
        let (vx, vk) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(vx, vk, None, pad, stride).unwrap();
        let expect = naive_conv(&x, &k, pad, stride);
        assert_eq!(g.shape(y), expect.shape());
        assert!(g.value(y).max_abs_diff(&expect).unwrap() < 1e-12);
    }
}

#[test]
fn conv2d_rejects_empty_output() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([1, 2, 2]));
    let k = g.constant(Tensor::zeros([1, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, k, None, 0, 1), Err(Error::Shape(_))));
    let k2 = g.constant(Tensor::zeros([1, 2, 1, 1]));
    assert!(matches!(g.conv2d(x, k2, None, 0, 1), Err(Error::Shape(_))));
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (pad, stride) in [(1, 1), (0, 2)] {
        let params = [
            rand_tensor(&mut rng, &[2, 5, 5]),
            rand_tensor(&mut rng, &[3, 2, 3, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        let err = check64(
            |g, p| {
                let y = g.conv2d(p[0], p[1], Some(p[2]), pad, stride)?;
                probe(g, y)
            },
            &params,
        );
        assert!(err < TOL64, "pad {pad} stride {stride}: {err}");
    }
}

#[test]
fn elementwise_definitions() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = g.constant(Tensor::zeros([3]));
    let s = g.softmax(z, 0).unwrap();
    for v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!(matches!(g.softmax(z, 1), Err(Error::Shape(_))));
}

#[test]
fn layernorm_normalizes_each_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn([3, 16], |_| rng.random_range(-5.0..9.0));
    let mut g = Graph::<f64>::new();
    let vx = g.constant(x);
    let gamma = g.constant(Tensor::ones([16]));
    let beta = g.constant(Tensor::zeros([16]));
    let y = g.layernorm(vx, gamma, beta, 1e-12).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn dropout_is_identity_at_inference_and_inverted_in_training() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones([1000]));
    let same = g.dropout::<ChaCha8Rng>(x, 0.1, None).unwrap();
    assert_eq!(same, x);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = g.dropout(x, 0.25, Some(&mut rng)).unwrap();
    let vals = g.value(d).data();
    assert!(vals.iter().all(|v| *v == 0.0 || (*v - 1.0 / 0.75).abs() < 1e-12));
    let dropped = vals.iter().filter(|v| **v == 0.0).count();
    assert!((150..350).contains(&dropped), "{dropped}");
    assert!(g.dropout(x, 1.0, Some(&mut rng)).is_err());
}

#[test]
fn bilinear_resize_same_size_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[2, 5, 3]);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.bilinear_resize(v, 5, 3).unwrap();
    assert!(g.value(y).max_abs_diff(&x).unwrap() < 1e-6);
}

#[test]
fn bilinear_upsample_of_constant_is_constant() {
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::full([1, 2, 2], 3.5));
    let y = g.bilinear_resize(v, 8, 4).unwrap();
    assert!(g.value(y).data().iter().all(|v| (*v - 3.5).abs() < 1e-12));
}

#[test]
fn concat_then_narrow_recovers_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 5, 4]);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.concat(&[va, vb], 1).unwrap();
    assert_eq!(g.shape(c), &[2, 8, 4]);
    let ra = g.narrow(c, 1, 0, 3).unwrap();
    let rb = g.narrow(c, 1, 3, 5).unwrap();
    assert_eq!(g.value(ra), &a);
    assert_eq!(g.value(rb), &b);
    assert!(matches!(g.concat(&[va, vb], 0), Err(Error::Shape(_))));
    assert!(matches!(g.concat(&[va], 3), Err(Error::Shape(_))));
}

#[test]
fn backward_of_sum_and_square() {
    let x = t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]);
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let s = g.sum(v);
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap().data(), &[1.0; 4]);

    let mut g = Graph::new();
    let v = g.param(x.clone());
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    let expect: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.grad(v).unwrap().data(), expect.as_slice());
}

#[test]
fn backward_contract_errors() {
    let mut g = Graph::<f64>::new();
    let v = g.param(Tensor::ones([3]));
    assert!(matches!(g.backward(v), Err(Error::Contract(_))));
    let s = g.sum(v);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Contract(_))));
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap().data(), &[1.0; 3]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let p = g.param(Tensor::ones([2]));
    let c = g.constant(Tensor::full([2], 2.0));
    let m = g.mul(p, c).unwrap();
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(p).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn composite_chain_gradient() {
    // conv -> relu -> matmul -> softmax
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = [
        rand_tensor(&mut rng, &[2, 4, 4]),
        rand_tensor(&mut rng, &[3, 2, 3, 3]),
        rand_tensor(&mut rng, &[4, 5]),
    ];
    let err = check64(
        |g, p| {
            let c = g.conv2d(p[0], p[1], None, 1, 1)?;
            let r = g.relu(c);
            let m = g.reshape(r, &[12, 4])?;
            let y = g.matmul(m, p[2])?;
            let s = g.softmax(y, 1)?;
            probe(g, s)
        },
        &params,
    );
    assert!(err < TOL64, "{err}");
}

#[test]
fn every_op_gradient_in_64_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    type F = fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, F)> = vec![
        ("add", vec![vec![3, 2], vec![3, 2]], |g, p| { let y = g.add(p[0], p[1])?; probe(g, y) }),
        ("sub", vec![vec![3, 2], vec![3, 2]], |g, p| { let y = g.sub(p[0], p[1])?; probe(g, y) }),
        ("mul", vec![vec![3, 2], vec![3, 2]], |g, p| { let y = g.mul(p[0], p[1])?; probe(g, y) }),
        ("linear", vec![vec![5, 3], vec![3, 4], vec![4]], |g, p| { let y = g.linear(p[0], p[1], Some(p[2]))?; probe(g, y) }),
        ("scale", vec![vec![4]], |g, p| { let y = g.scale(p[0], -1.7); probe(g, y) }),
        ("sqrt", vec![vec![4]], |g, p| { let sq = g.mul(p[0], p[0])?; let y = g.sqrt(sq); probe(g, y) }),
        ("mean", vec![vec![6]], |g, p| { let y = g.mean(p[0]); Ok(y) }),
        ("relu", vec![vec![10]], |g, p| { let y = g.relu(p[0]); probe(g, y) }),
        ("layernorm", vec![vec![3, 6], vec![6], vec![6]], |g, p| { let y = g.layernorm(p[0], p[1], p[2], 1e-5)?; probe(g, y) }),
        ("softmax0", vec![vec![4, 3]], |g, p| { let y = g.softmax(p[0], 0)?; probe(g, y) }),
        ("softmax1", vec![vec![4, 3]], |g, p| { let y = g.softmax(p[0], 1)?; probe(g, y) }),
        ("maxpool", vec![vec![2, 4, 6]], |g, p| { let y = g.maxpool2d(p[0])?; probe(g, y) }),
        ("avgpool", vec![vec![2, 4, 6]], |g, p| { let y = g.avgpool2d(p[0], 2)?; probe(g, y) }),
        ("bilinear_up", vec![vec![2, 3, 4]], |g, p| { let y = g.bilinear_resize(p[0], 6, 8)?; probe(g, y) }),
        ("bilinear_odd", vec![vec![1, 5, 3]], |g, p| { let y = g.bilinear_resize(p[0], 2, 7)?; probe(g, y) }),
        ("concat", vec![vec![2, 3], vec![2, 2]], |g, p| { let y = g.concat(&[p[0], p[1]], 1)?; probe(g, y) }),
        ("narrow", vec![vec![3, 5]], |g, p| { let y = g.narrow(p[0], 1, 1, 3)?; probe(g, y) }),
        ("permute", vec![vec![2, 3, 4]], |g, p| { let y = g.permute(p[0], &[2, 0, 1])?; probe(g, y) }),
        ("transpose", vec![vec![2, 3, 4]], |g, p| { let y = g.transpose(p[0])?; probe(g, y) }),
        ("reshape", vec![vec![2, 6]], |g, p| { let y = g.reshape(p[0], &[3, 4])?; probe(g, y) }),
        ("gather", vec![vec![4, 3]], |g, p| { let y = g.gather(p[0], vec![3, 0, 0, 2])?; probe(g, y) }),
        ("row_bias", vec![vec![2, 3, 4], vec![4]], |g, p| { let y = g.add_row_bias(p[0], p[1])?; probe(g, y) }),
    ];
    for (name, shapes, f) in cases {
        let params: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let err = check64(f, &params);
        assert!(err < TOL64, "{name}: {err}");
    }
}

#[test]
fn dropout_gradient_uses_the_same_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[20]);
    let err = check64(
        |g, p| {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            let y = g.dropout(p[0], 0.3, Some(&mut r))?;
            probe(g, y)
        },
        &[x],
    );
    assert!(err < TOL64, "{err}");
}

struct Chain;
impl ScalarFn for Chain {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: &[Var]) -> crate::Result<Var> {
        let c = g.conv2d(p[0], p[1], None, 1, 1)?;
        let r = g.relu(c);
        let m = g.reshape(r, &[12, 4])?;
        let y = g.matmul(m, p[2])?;
        let s = g.softmax(y, 1)?;
        let w: Vec<T> = (0..60).map(|i| T::lit(0.5 + (i % 7) as f64 / 3.0)).collect();
        let s = g.mul_const(s, w)?;
        Ok(g.sum(s))
    }
}

#[test]
fn gradients_in_32_bit_match_64_bit_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = [
        rand_tensor(&mut rng, &[2, 4, 4]),
        rand_tensor(&mut rng, &[3, 2, 3, 3]),
        rand_tensor(&mut rng, &[4, 5]),
    ];
    let r = check_at_precision::<f32>(&Chain, &params, 1e-4).unwrap();
    assert!(r.max_rel_err < 1e-3, "{r:?}");
}

#[test]
fn finite_difference_check_of_quadratic_and_linear_layer() {
    let p = [t(&[3], &[0.3, -1.2, 2.0])];
    let r = finite_difference_check(
        |g: &mut Graph<f64>, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        },
        &p,
        1e-4,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-9, "{r:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let lp = [rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[3, 2]), rand_tensor(&mut rng, &[2])];
    let r = finite_difference_check(
        |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            probe(g, y)
        },
        &lp,
        1e-4,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn finite_difference_check_reports_nan() {
    let p = [t(&[1], &[-1.0])];
    let r = finite_difference_check(
        |g: &mut Graph<f64>, v: &[Var]| {
            let s = g.sqrt(v[0]);
            Ok(g.sum(s))
        },
        &p,
        1e-4,
    );
    assert!(matches!(r, Err(Error::Numerical { .. })));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([3, 4], vals).unwrap());
        for axis in 0..2 {
            let s = g.softmax(x, axis).unwrap();
            let y = g.value(s).data().to_vec();
            prop_assert!(y.iter().all(|v| *v >= 0.0));
            if axis == 1 {
                for row in y.chunks(4) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            } else {
                for c in 0..4 {
                    let s: f64 = (0..3).map(|r| y[r * 4 + c]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn conv2d_agrees_with_naive_reference(
        cin in 1usize..=4, cout in 1usize..=3, h in 1usize..=8, w in 1usize..=8,
        k in prop_oneof![Just(1usize), Just(3usize)], seed in 0u64..1000,
    ) {
        let pad = k / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[cin, h, w]);
        let kern = rand_tensor(&mut rng, &[cout, cin, k, k]);
        let mut g = Graph::new();
        let (vx, vk) = (g.constant(x.clone()), g.constant(kern.clone()));
        let y = g.conv2d(vx, vk, None, pad, 1).unwrap();
        let expect = naive_conv(&x, &kern, pad, 1);
        prop_assert!(g.value(y).max_abs_diff(&expect).unwrap() < 1e-6);
    }

    #[test]
    fn concat_split_round_trip(a in 1usize..4, b in 1usize..4, rows in 1usize..4, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[rows, a]);
        let y = rand_tensor(&mut rng, &[rows, b]);
        let mut g = Graph::new();
        let (vx, vy) = (g.constant(x.clone()), g.constant(y.clone()));
        let c = g.concat(&[vx, vy], 1).unwrap();
        let rx = g.narrow(c, 1, 0, a).unwrap();
        let ry = g.narrow(c, 1, a, b).unwrap();
        prop_assert_eq!(g.value(rx), &x);
        prop_assert_eq!(g.value(ry), &y);
    }
}
