use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar readout `Σ w_i y_i` with fixed random weights, so every output
/// contributes an O(1) gradient.
fn readout(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = tape.constant(Tensor::new(vec![1, n], (0..n).map(|_| rng.gen_range(0.5..1.5)).collect())?);
    let flat = tape.reshape(y, &[n, 1])?;
    let s = tape.matmul(w, flat)?;
    tape.reshape(s, &[1])
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::eye(2));
    let b = tape.constant(Tensor::from_rows(&[vec![1.5, -2.0, 3.0], vec![0.25, 4.0, -1.0]]));
    let out = tape.matmul(i2, b).unwrap();
    assert_eq!(tape.value(out), tape.value(b));

    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let ones = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]));
    let out = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let bb = b.clone();
    let err_a = grad_check(
        |t, x| {
            let bv = t.constant(bb.clone());
            let y = t.matmul(x, bv)?;
            readout(t, y, 1)
        },
        &a,
        1e-5,
    )
    .unwrap();
    let aa = a.clone();
    let err_b = grad_check(
        |t, x| {
            let av = t.constant(aa.clone());
            let y = t.matmul(av, x)?;
            readout(t, y, 2)
        },
        &b,
        1e-5,
    )
    .unwrap();
    assert!(err_a < 1e-6, "{err_a}");
    assert!(err_b < 1e-6, "{err_b}");
}

#[test]
fn conv1x1_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[3, 2, 2]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let k = tape.constant(Tensor::eye(3));
    let out = tape.conv1x1(xv, k).unwrap();
    assert_eq!(tape.value(out), &x);

    let ones = tape.constant(Tensor::full(&[2, 2, 2], 1.0));
    let k = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]));
    let out = tape.conv1x1(ones, k).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 2, 2]);
    assert!(tape.value(out).data().iter().all(|&v| v == 2.0));

    let bad = tape.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(tape.conv1x1(ones, bad), Err(Error::Dimension { .. })));
}

#[test]
fn conv1x1_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 4, 4]);
    let k = random(&mut rng, &[3, 2]);
    let kk = k.clone();
    let ex = grad_check(
        |t, v| {
            let kv = t.constant(kk.clone());
            let y = t.conv1x1(v, kv)?;
            readout(t, y, 3)
        },
        &x,
        1e-5,
    )
    .unwrap();
    let xx = x.clone();
    let ek = grad_check(
        |t, v| {
            let xv = t.constant(xx.clone());
            let y = t.conv1x1(xv, v)?;
            readout(t, y, 4)
        },
        &k,
        1e-5,
    )
    .unwrap();
    assert!(ex < 1e-6 && ek < 1e-6, "{ex} {ek}");
}

/// Direct 3×3 same-padding convolution, written independently of the tape.
fn conv3x3_reference(x: &Tensor, w: &Tensor) -> Vec<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = w.shape()[0];
    let mut out = vec![0.0; co * h * wd];
    for o in 0..co {
        for y in 0..h as isize {
            for xx in 0..wd as isize {
                let mut acc = 0.0;
                for c in 0..ci {
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (sy, sx) = (y + dy, xx + dx);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            let wv = w.data()[((o * ci + c) * 3 + (dy + 1) as usize) * 3 + (dx + 1) as usize];
                            acc += wv * x.data()[(c * h + sy as usize) * wd + sx as usize];
                        }
                    }
                }
                out[(o * h + y as usize) * wd + xx as usize] = acc;
            }
        }
    }
    out
}

#[test]
fn conv3x3_matches_direct_reference_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[2, 5, 4]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let out = tape.conv3x3(xv, wv).unwrap();
    let reference = conv3x3_reference(&x, &w);
    for (a, b) in tape.value(out).data().iter().zip(&reference) {
        assert!((a - b).abs() < 1e-12);
    }

    let ww = w.clone();
    let ex = grad_check(
        |t, v| {
            let wv = t.constant(ww.clone());
            let y = t.conv3x3(v, wv)?;
            readout(t, y, 5)
        },
        &x,
        1e-5,
    )
    .unwrap();
    let xx = x.clone();
    let ew = grad_check(
        |t, v| {
            let xv = t.constant(xx.clone());
            let y = t.conv3x3(xv, v)?;
            readout(t, y, 6)
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(ex < 1e-6 && ew < 1e-6, "{ex} {ew}");
}

#[test]
fn avg_pool_spatial_cases() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[2, 3, 3], 1.75));
    let out = tape.avg_pool_spatial(c).unwrap();
    assert_eq!(tape.value(out).data(), &[1.75, 1.75]);
    let m = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let out = tape.avg_pool_spatial(m).unwrap();
    assert_eq!(tape.value(out).data(), &[2.5]);

    let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![0.3, -0.1, 0.7, 2.0]).unwrap(), true);
    let p = tape.avg_pool_spatial(x).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap().get(x).unwrap();
    assert!(g.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[3, 3, 4]);
    let e = grad_check(
        |t, v| {
            let y = t.avg_pool_spatial(v)?;
            readout(t, y, 7)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-6);
}

#[test]
fn avg_pool2x2_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&mut rng, &[2, 4, 6]);
    let e = grad_check(
        |t, v| {
            let y = t.avg_pool2x2(v)?;
            readout(t, y, 8)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-6);
    let mut tape = Tape::new();
    let odd = tape.constant(Tensor::zeros(&[1, 3, 4]));
    assert!(tape.avg_pool2x2(odd).is_err());
}

#[test]
fn max_pool_spatial_cases() {
    let mut tape = Tape::new();
    let m = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 9.0, 3.0, 4.0]).unwrap(), true);
    let out = tape.max_pool_spatial(m).unwrap();
    assert_eq!(tape.value(out).data(), &[9.0]);

    let c = tape.leaf(Tensor::full(&[1, 2, 2], 3.0), true);
    let out = tape.max_pool_spatial(c).unwrap();
    assert_eq!(tape.value(out).data(), &[3.0]);
    let s = tape.sum(out);
    let g = tape.backward(s).unwrap().get(c).unwrap();
    assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn max_pool_gradient_mask_has_one_nonzero_per_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let x = random(&mut rng, &[4, 3, 5]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let y = tape.max_pool_spatial(v).unwrap();
        let l = readout(&mut tape, y, 1).unwrap();
        let g = tape.backward(l).unwrap().get(v).unwrap();
        for (k, slice) in g.data().chunks(15).enumerate() {
            assert_eq!(slice.iter().filter(|&&v| v != 0.0).count(), 1);
            // brute force: the nonzero sits on the true maximum
            let xs = &x.data()[k * 15..(k + 1) * 15];
            let best = (0..15).fold(0, |b, i| if xs[i] > xs[b] { i } else { b });
            assert!(slice[best] != 0.0);
        }
    }
}

#[test]
fn softmax_cases() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
    let p = tape.softmax(z).unwrap();
    assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
    let big = tape.constant(Tensor::from_vec(vec![1000.0, 1000.0]));
    let p = tape.softmax(big).unwrap();
    assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[5]);
    let e = grad_check(
        |t, v| {
            let y = t.softmax(v)?;
            readout(t, y, 9)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-6, "{e}");
}

#[test]
fn entropy_cases() {
    let mut tape = Tape::new();
    let u = tape.constant(Tensor::full(&[6], 1.0 / 6.0));
    let h = tape.entropy(u, ENTROPY_FLOOR).unwrap();
    assert!((tape.value(h).item() - 6f64.ln()).abs() < 1e-12);
    let one_hot = tape.constant(Tensor::from_vec(vec![0.0, 1.0, 0.0]));
    let h = tape.entropy(one_hot, ENTROPY_FLOOR).unwrap();
    assert_eq!(tape.value(h).item(), 0.0);
    let half = tape.constant(Tensor::from_vec(vec![0.5, 0.5]));
    let h = tape.entropy(half, ENTROPY_FLOOR).unwrap();
    assert!((tape.value(h).item() - std::f64::consts::LN_2).abs() < 1e-12);

    let bad = tape.constant(Tensor::from_vec(vec![0.5, 0.6]));
    assert!(matches!(tape.entropy(bad, ENTROPY_FLOOR), Err(Error::Contract { .. })));
}

#[test]
fn backward_on_simple_losses() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 0.5]), true);
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap().get(x).unwrap();
    assert_eq!(g.data(), &[1.0, 1.0, 1.0]);

    let sq = tape.sum_squares(x);
    let g = tape.backward(sq).unwrap().get(x).unwrap();
    assert_eq!(g.data(), &[2.0, -4.0, 1.0]);

    let nonscalar = tape.scale(x, 2.0);
    assert!(matches!(tape.backward(nonscalar), Err(Error::Contract { .. })));
}

#[test]
fn grad_check_on_sum_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[7]);
    let e = grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
    assert!(e < 1e-10, "{e}");
}

#[test]
fn grad_check_softmax_cross_entropy_and_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..10 {
        let x = random(&mut rng, &[6]);
        let target = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let e = grad_check(|t, v| t.cross_entropy(v, &target), &x, 1e-5).unwrap();
        assert!(e < 1e-5, "{e}");
        let e = grad_check(
            |t, v| {
                let p = t.softmax(v)?;
                t.entropy(p, ENTROPY_FLOOR)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-5, "{e}");
    }
}

#[test]
fn spatial_softmax_gradients_and_spatial_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[3, 2, 3]);
    let e = grad_check(
        |t, v| {
            let p = t.spatial_softmax(v)?;
            readout(t, p, 10)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-6);
    let e = grad_check(
        |t, v| {
            let p = t.spatial_softmax(v)?;
            t.entropy(p, ENTROPY_FLOOR)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-5);
}

#[test]
fn soft_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&mut rng, &[4]);
    let target = [0.3, 0.7, 0.0, 0.0];
    let e = grad_check(|t, v| t.cross_entropy(v, &target), &x, 1e-5).unwrap();
    assert!(e < 1e-6);
}

#[test]
fn relu_and_elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&mut rng, &[8]);
    let other = random(&mut rng, &[8]);
    let e = grad_check(
        |t, v| {
            let o = t.constant(other.clone());
            let r = t.relu(v);
            let a = t.add(r, o)?;
            let s = t.sub(a, v)?;
            let sc = t.scale(s, 0.7);
            let q = t.sum_squares(sc);
            let l = t.sum(v);
            t.add(q, l)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_on_simplex_and_shift_invariant(
        logits in proptest::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(logits.clone()));
        let b = tape.constant(Tensor::from_vec(logits.iter().map(|v| v + shift).collect()));
        let pa = tape.softmax(a).unwrap();
        let pb = tape.softmax(b).unwrap();
        let sum: f64 = tape.value(pa).sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(tape.value(pa).data().iter().all(|&v| v >= 0.0));
        prop_assert!(tape.value(pa).max_abs_diff(tape.value(pb)) < 1e-12);
    }

    #[test]
    fn backward_is_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(&mut rng, &[5]);
        let grad_of = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), true);
            let p = tape.softmax(x).unwrap();
            let l1 = tape.entropy(p, ENTROPY_FLOOR).unwrap();
            let l2 = tape.sum_squares(x);
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => {
                    let a = tape.scale(l1, alpha);
                    let b = tape.scale(l2, beta);
                    tape.add(a, b).unwrap()
                }
            };
            tape.backward(loss).unwrap().get(x).unwrap()
        };
        let (g1, g2, g) = (grad_of(1), grad_of(2), grad_of(0));
        for i in 0..5 {
            let expect = alpha * g1.data()[i] + beta * g2.data()[i];
            prop_assert!((g.data()[i] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn registered_ops_pass_grad_check_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for trial in 0..10u64 {
        let x = random(&mut rng, &[2, 4, 4]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let k = random(&mut rng, &[3, 2]);
        let (w2, k2) = (w.clone(), k.clone());
        worst = worst.max(
            grad_check(
                |t, v| {
                    let wv = t.constant(w2.clone());
                    let kv = t.constant(k2.clone());
                    let c = t.conv3x3(v, wv)?;
                    let r = t.relu(c);
                    let d = t.avg_pool2x2(r)?;
                    let a = t.conv1x1(d, kv)?;
                    let m = t.max_pool_spatial(a)?;
                    let s = t.spatial_softmax(a)?;
                    let h = t.entropy(s, ENTROPY_FLOOR)?;
                    let mr = readout(t, m, trial)?;
                    t.add(mr, h)
                },
                &x,
                1e-5,
            )
            .unwrap(),
        );
    }
    assert!(worst < 1e-5, "{worst}");
}
