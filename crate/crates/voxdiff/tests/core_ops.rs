//! Edge cases and identities for the tensor ops and the backward pass.

use voxdiff::optim::ParamStore;
use voxdiff::rng::CounterRng;
use voxdiff::tape::Tape;
use voxdiff::tensor::Tensor;

#[test]
fn conv3d_identity_kernel_sums_channels() {
    // 1x1x1 kernel of value 1 sums the input channels per output channel.
    let mut tape = Tape::new();
    let mut rng = CounterRng::new(1);
    let x = Tensor::randn(&[1, 2, 3, 3, 3], &mut rng);
    let xid = tape.leaf(x.clone());
    let w = tape.leaf(Tensor::full(&[1, 2, 1, 1, 1], 1.0));
    let y = tape.conv3d(xid, w, 1, 0).unwrap();
    let out = tape.value(y);
    let sp = 27;
    for i in 0..sp {
        let expect = x.data()[i] + x.data()[sp + i];
        assert!((out.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn conv3d_zero_input_gives_zero_output() {
    let mut tape = Tape::new();
    let mut rng = CounterRng::new(2);
    let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4, 4]));
    let w = tape.leaf(Tensor::randn(&[3, 2, 3, 3, 3], &mut rng));
    let y = tape.conv3d(x, w, 1, 1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv3d_matches_nested_loop_reference() {
    // 3x3x3 kernel on a 1x1x4x4x4 input against the 7-loop oracle in kernels.
    let mut rng = CounterRng::new(3);
    let x = Tensor::randn(&[1, 1, 4, 4, 4], &mut rng);
    let w = Tensor::randn(&[1, 1, 3, 3, 3], &mut rng);
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let wid = tape.leaf(w.clone());
    let y = tape.conv3d(xid, wid, 1, 0).unwrap();
    // Independent brute force: no padding, stride 1, 2^3 output.
    let mut expect = vec![0.0; 8];
    for z in 0..2 {
        for yy in 0..2 {
            for xx in 0..2 {
                let mut acc = 0.0;
                for kd in 0..3 {
                    for kh in 0..3 {
                        for kw in 0..3 {
                            acc += x.data()[((z + kd) * 4 + (yy + kh)) * 4 + xx + kw]
                                * w.data()[(kd * 3 + kh) * 3 + kw];
                        }
                    }
                }
                expect[(z * 2 + yy) * 2 + xx] = acc;
            }
        }
    }
    for (a, b) in tape.value(y).data().iter().zip(expect.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn conv3d_shape_mismatch_names_axis() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4, 4]));
    let w = tape.leaf(Tensor::zeros(&[3, 5, 3, 3, 3]));
    let err = tape.conv3d(x, w, 1, 1).unwrap_err().to_string();
    assert!(err.contains("channel"), "diagnostic should name the axis: {err}");
}

#[test]
fn linear_identity_and_constant() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let eye = tape.leaf(Tensor::from_fn(&[3, 3], |i| {
        if i / 3 == i % 3 {
            1.0
        } else {
            0.0
        }
    }));
    let zero_b = tape.leaf(Tensor::zeros(&[3]));
    let y = tape.linear(x, eye, zero_b).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());

    let zeros_w = tape.leaf(Tensor::zeros(&[3, 2]));
    let b = tape.leaf(Tensor::new(&[2], vec![0.5, -1.5]).unwrap());
    let y2 = tape.linear(x, zeros_w, b).unwrap();
    assert_eq!(tape.value(y2).data(), &[0.5, -1.5, 0.5, -1.5]);
}

#[test]
fn linear_matches_hand_matrix_multiply() {
    let mut rng = CounterRng::new(4);
    let x = Tensor::randn(&[2, 3], &mut rng);
    let w = Tensor::randn(&[3, 2], &mut rng);
    let b = Tensor::randn(&[2], &mut rng);
    let mut tape = Tape::new();
    let (xi, wi, bi) = (
        tape.leaf(x.clone()),
        tape.leaf(w.clone()),
        tape.leaf(b.clone()),
    );
    let y = tape.linear(xi, wi, bi).unwrap();
    for r in 0..2 {
        for c in 0..2 {
            let mut acc = b.data()[c];
            for k in 0..3 {
                acc += x.data()[r * 3 + k] * w.data()[k * 2 + c];
            }
            assert!((tape.value(y).data()[r * 2 + c] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_constant_input_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2, 6], 3.7));
    let g = tape.leaf(Tensor::full(&[6], 1.0));
    let s = tape.leaf(Tensor::zeros(&[6]));
    let y = tape.layer_norm(x, g, s, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn layer_norm_already_normalized_pair() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
    let g = tape.leaf(Tensor::full(&[2], 1.0));
    let s = tape.leaf(Tensor::zeros(&[2]));
    let y = tape.layer_norm(x, g, s, 1e-12).unwrap();
    assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-6);
    assert!((tape.value(y).data()[1] + 1.0).abs() < 1e-6);
}

#[test]
fn layer_norm_statistics_on_random_input() {
    let mut rng = CounterRng::new(5);
    let f = 64;
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::randn(&[8, f], &mut rng));
    let g = tape.leaf(Tensor::full(&[f], 1.0));
    let s = tape.leaf(Tensor::zeros(&[f]));
    let y = tape.layer_norm(x, g, s, 1e-10).unwrap();
    let out = tape.value(y).data();
    for r in 0..8 {
        let row = &out[r * f..(r + 1) * f];
        let mean = row.iter().sum::<f64>() / f as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
        assert!(mean.abs() < 1e-10, "post-norm mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "post-norm var {var}");
    }
}

#[test]
fn attention_single_key_returns_value_row() {
    let mut rng = CounterRng::new(6);
    let mut tape = Tape::new();
    let q = tape.leaf(Tensor::randn(&[1, 3, 4], &mut rng));
    let k = tape.leaf(Tensor::randn(&[1, 1, 4], &mut rng));
    let v = Tensor::randn(&[1, 1, 4], &mut rng);
    let vid = tape.leaf(v.clone());
    let y = tape.attention(q, k, vid).unwrap();
    for row in 0..3 {
        for t in 0..4 {
            assert_eq!(tape.value(y).data()[row * 4 + t], v.data()[t]);
        }
    }
}

#[test]
fn attention_saturated_softmax_selects_matching_value() {
    // Orthogonal one-hot keys; query = key 1 scaled large.
    let mut tape = Tape::new();
    let k = tape.leaf(Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let v = tape.leaf(Tensor::new(&[1, 2, 2], vec![5.0, -1.0, 2.0, 7.0]).unwrap());
    let q = tape.leaf(Tensor::new(&[1, 1, 2], vec![0.0, 1000.0]).unwrap());
    let y = tape.attention(q, k, v).unwrap();
    assert!((tape.value(y).data()[0] - 2.0).abs() < 1e-9);
    assert!((tape.value(y).data()[1] - 7.0).abs() < 1e-9);
}

#[test]
fn attention_matches_hand_computed_2x2() {
    let q = vec![0.3, -0.2, 0.5, 0.1];
    let k = vec![0.4, 0.9, -0.7, 0.2];
    let v = vec![1.0, 2.0, 3.0, 4.0];
    let mut tape = Tape::new();
    let qi = tape.leaf(Tensor::new(&[1, 2, 2], q.clone()).unwrap());
    let ki = tape.leaf(Tensor::new(&[1, 2, 2], k.clone()).unwrap());
    let vi = tape.leaf(Tensor::new(&[1, 2, 2], v.clone()).unwrap());
    let y = tape.attention(qi, ki, vi).unwrap();
    let scale = 1.0 / 2f64.sqrt();
    for i in 0..2 {
        let s0 = (q[i * 2] * k[0] + q[i * 2 + 1] * k[1]) * scale;
        let s1 = (q[i * 2] * k[2] + q[i * 2 + 1] * k[3]) * scale;
        let m = s0.max(s1);
        let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
        let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        for t in 0..2 {
            let expect = p0 * v[t] + p1 * v[2 + t];
            assert!((tape.value(y).data()[i * 2 + t] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rows_are_convex_combinations() {
    let mut rng = CounterRng::new(7);
    let mut tape = Tape::new();
    let q = tape.leaf(Tensor::randn(&[1, 4, 3], &mut rng));
    let k = tape.leaf(Tensor::randn(&[1, 5, 3], &mut rng));
    // Constant value rows: any convex combination must reproduce the constant.
    let v = tape.leaf(Tensor::from_fn(&[1, 5, 3], |i| (i / 3) as f64));
    let y = tape.attention(q, k, v).unwrap();
    let out = tape.value(y).data();
    for row in 0..4 {
        let val = out[row * 3];
        assert!((0.0..=4.0).contains(&val));
        assert!((out[row * 3 + 1] - val).abs() < 1e-12);
    }
}

#[test]
fn dropout_rate_zero_and_inference_are_identity() {
    let mut rng = CounterRng::new(8);
    let x = Tensor::randn(&[50], &mut rng);
    for (rate, training) in [(0.0, true), (0.0, false), (0.7, false)] {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let mut r = CounterRng::new(9);
        let y = tape.dropout(xid, rate, &mut r, training).unwrap();
        assert!(tape.value(y).bit_eq(&x));
    }
}

#[test]
fn dropout_preserves_mean_at_large_n() {
    let n = 1_000_000;
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[n], 1.0));
    let mut rng = CounterRng::new(10);
    let y = tape.dropout(x, 0.5, &mut rng, true).unwrap();
    let mean = tape.value(y).mean();
    assert!((mean - 1.0).abs() < 0.01, "survivor-scaled mean {mean}");
}

#[test]
fn dropout_rejects_rate_one() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[4]));
    let mut rng = CounterRng::new(11);
    assert!(tape.dropout(x, 1.0, &mut rng, true).is_err());
}

#[test]
fn backward_sum_gives_ones() {
    let mut params = ParamStore::new();
    params.insert("w", Tensor::new(&[3], vec![5.0, -2.0, 0.1]).unwrap());
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = tape.sum(bound.id("w"));
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(bound.id("w"), &tape).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_half_sum_squares_gives_w() {
    let mut params = ParamStore::new();
    params.insert("w", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let w = bound.id("w");
    let sq = tape.mul(w, w).unwrap();
    let half = tape.scale(sq, 0.5);
    let loss = tape.sum(half);
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(w, &tape);
    for (a, b) in g.data().iter().zip([1.0, 2.0, 3.0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[3]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn unused_parameter_gets_exact_zero_gradient() {
    let mut params = ParamStore::new();
    params.insert("used", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    params.insert("unused", Tensor::new(&[4], vec![1.0; 4]).unwrap());
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = tape.sum(bound.id("used"));
    let grads = tape.backward(loss).unwrap();
    let gu = grads.get(bound.id("unused"), &tape);
    assert!(gu.data().iter().all(|&v| v == 0.0));
    assert!(!grads.has(bound.id("unused")));
}

#[test]
fn conv_and_linear_are_linear_in_input() {
    let mut rng = CounterRng::new(12);
    let x = Tensor::randn(&[1, 2, 4, 4, 4], &mut rng);
    let y = Tensor::randn(&[1, 2, 4, 4, 4], &mut rng);
    let w = Tensor::randn(&[3, 2, 3, 3, 3], &mut rng);
    let (a, b) = (0.7, -1.3);

    let conv = |input: &Tensor| {
        let mut tape = Tape::new();
        let xi = tape.leaf(input.clone());
        let wi = tape.leaf(w.clone());
        let o = tape.conv3d(xi, wi, 1, 1).unwrap();
        tape.value(o).clone()
    };
    let combined = conv(&x.affine(a, &y, b).unwrap());
    let separate = conv(&x).affine(a, &conv(&y), b).unwrap();
    assert!(combined.max_abs_diff(&separate) < 1e-10);

    let lx = Tensor::randn(&[4, 5], &mut rng);
    let ly = Tensor::randn(&[4, 5], &mut rng);
    let lw = Tensor::randn(&[5, 3], &mut rng);
    let lin = |input: &Tensor| {
        let mut tape = Tape::new();
        let xi = tape.leaf(input.clone());
        let wi = tape.leaf(lw.clone());
        let bi = tape.leaf(Tensor::zeros(&[3]));
        let o = tape.linear(xi, wi, bi).unwrap();
        tape.value(o).clone()
    };
    let combined = lin(&lx.affine(a, &ly, b).unwrap());
    let separate = lin(&lx).affine(a, &lin(&ly), b).unwrap();
    assert!(combined.max_abs_diff(&separate) < 1e-10);
}

#[test]
fn identical_seed_and_op_sequence_is_bit_identical() {
    let run = || {
        let mut rng = CounterRng::new(0xFEED);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[1, 2, 4, 4, 4], &mut rng));
        let w = tape.param(Tensor::randn(&[2, 2, 3, 3, 3], &mut rng));
        let h = tape.conv3d(x, w, 1, 1).unwrap();
        let h = tape.silu(h);
        let d = tape.dropout(h, 0.25, &mut rng, true).unwrap();
        let loss = tape.mean(d);
        let grads = tape.backward(loss).unwrap();
        (
            tape.value(loss).item(),
            grads.get(w, &tape).data().to_vec(),
        )
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert!(g1
        .iter()
        .zip(g2.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}
