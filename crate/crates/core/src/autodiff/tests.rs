use super::*;
use crate::gradcheck::{max_rel_error, random_tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn identity_pointwise_kernel() {
    let x = random_tensor(&[1, 1, 5, 4], 1);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let w = g.input(t(&[1, 1, 1, 1], &[1.0]));
    let b = g.input(t(&[1], &[0.0]));
    let y = g.conv2d(xv, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn all_ones_kernel_center_sum() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
    let w = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    // Hand sum of all nine entries.
    assert_eq!(g.value(y).data()[4], 45.0);
    // Corner: 1+2+4+5.
    assert_eq!(g.value(y).data()[0], 12.0);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.input(Tensor::zeros(&[3, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Dimension { .. })));
}

#[test]
fn same_geometry_output_sizes() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 2, 7, 8]));
    let w3 = g.input(Tensor::zeros(&[4, 2, 3, 3]));
    let w1 = g.input(Tensor::zeros(&[4, 2, 1, 1]));
    let a = g.conv2d(x, w3, None, 2, 1).unwrap();
    let b = g.conv2d(x, w1, None, 2, 0).unwrap();
    assert_eq!(g.value(a).shape(), &[1, 4, 4, 4]);
    assert_eq!(g.value(b).shape(), &[1, 4, 4, 4]);
}

#[test]
fn conv2d_gradient_matches_finite_differences() {
    let x = random_tensor(&[1, 2, 5, 5], 2);
    let w = random_tensor(&[3, 2, 3, 3], 3);
    let b = random_tensor(&[3], 4);
    for stride in [1, 2] {
        let err = max_rel_error(&[x.clone(), w.clone(), b.clone()], 60, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, 1).unwrap();
            let sq = g.sum_squares(&[y]);
            g.scale(sq, 0.5)
        });
        assert!(err < 1e-4, "stride {stride}: {err}");
    }
    // Probe: sum(output) w.r.t. every kernel weight.
    let err = max_rel_error(&[x, w], 100, |g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, 1).unwrap();
        g.sum(y)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn transpose_single_pixel_expands_to_patch() {
    let v = 1.5;
    let w = 0.25;
    let mut g = Graph::new();
    let x = g.input(t(&[1, 1, 1, 1], &[v]));
    let k = g.input(Tensor::full(&[1, 1, 4, 4], w));
    let y = g.conv_transpose2d(x, k, None, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
    assert!(g.value(y).data().iter().all(|&o| o == v * w));
}

#[test]
fn transpose_then_strided_conv_is_identity_on_deltas() {
    for stride in [2usize, 4] {
        let k = 2 * stride;
        let mut delta_t = Tensor::zeros(&[1, 1, k, k]);
        let off = stride / 2;
        delta_t.data_mut()[off * k + off] = 1.0;
        for pos in 0..9 {
            let mut x = Tensor::zeros(&[1, 1, 3, 3]);
            x.data_mut()[pos] = 1.0;
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let kt = g.input(delta_t.clone());
            let up = g.conv_transpose2d(xv, kt, None, stride).unwrap();
            let kc = g.input(t(&[1, 1, 1, 1], &[1.0]));
            let down = g.conv2d(up, kc, None, stride, 0).unwrap();
            assert_eq!(g.value(down), &x, "stride {stride} pos {pos}");
        }
    }
}

#[test]
fn transpose_rejects_bad_stride() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 1, 2, 2]));
    let k = g.input(Tensor::zeros(&[1, 1, 6, 6]));
    assert!(matches!(g.conv_transpose2d(x, k, None, 3), Err(Error::Config(_))));
}

#[test]
fn transpose_gradient_matches_finite_differences() {
    for stride in [2usize, 4] {
        let x = random_tensor(&[2, 2, 3, 3], 5);
        let w = random_tensor(&[2, 3, 2 * stride, 2 * stride], 6);
        let b = random_tensor(&[3], 7);
        let err = max_rel_error(&[x, w, b], 60, |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), stride).unwrap();
            let sq = g.sum_squares(&[y]);
            g.scale(sq, 0.5)
        });
        assert!(err < 1e-4, "stride {stride}: {err}");
    }
}

#[test]
fn batch_norm_constant_channel_gives_shift() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[2, 1, 3, 3], 4.2));
    let gamma = g.input(t(&[1], &[1.7]));
    let beta = g.input(t(&[1], &[-0.3]));
    let (y, _) = g.batch_norm(x, gamma, beta, BatchNormMode::Train).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == -0.3));
}

#[test]
fn batch_norm_standardizes() {
    let mut g = Graph::new();
    let mut xt = random_tensor(&[3, 2, 4, 4], 8);
    xt.data_mut().iter_mut().for_each(|v| *v *= 10.0);
    let x = g.input(xt);
    let gamma = g.input(Tensor::full(&[2], 1.0));
    let beta = g.input(Tensor::zeros(&[2]));
    let (y, stats) = g.batch_norm(x, gamma, beta, BatchNormMode::Train).unwrap();
    let yd = g.value(y).data();
    for ch in 0..2 {
        let vals: Vec<f64> = (0..3).flat_map(|b| yd[(b * 2 + ch) * 16..(b * 2 + ch + 1) * 16].to_vec()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        // epsilon shrinks the variance by var/(var+eps); inputs have var ~33.
        assert!((var - 1.0).abs() < 1e-6, "{var}");
    }
    assert!(stats.is_some());
}

#[test]
fn batch_norm_needs_two_values() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 1, 1, 1]));
    let gamma = g.input(Tensor::full(&[1], 1.0));
    let beta = g.input(Tensor::zeros(&[1]));
    assert!(g.batch_norm(x, gamma, beta, BatchNormMode::Train).is_err());
}

#[test]
fn running_stats_momentum() {
    let mut rs = RunningStats::new(1);
    rs.update(&BatchStats {
        mean: vec![1.0],
        var: vec![3.0],
    });
    assert!((rs.mean[0] - 0.1).abs() < 1e-15);
    assert!((rs.var[0] - 1.2).abs() < 1e-15);
}

#[test]
fn batch_norm_gradient_matches_finite_differences() {
    let x = random_tensor(&[2, 2, 2, 2], 9);
    let gamma = random_tensor(&[2], 10);
    let beta = random_tensor(&[2], 11);
    let probe = random_tensor(&[2, 2, 2, 2], 12);
    let err = max_rel_error(&[x.clone(), gamma.clone(), beta.clone()], 20, |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train).unwrap();
        // Weighted sum: the plain sum has identically zero gradient w.r.t. x.
        let p = g.input(probe.clone());
        let s = g.add(y, p).unwrap();
        g.sum_squares(&[s])
    });
    assert!(err < 1e-4, "train: {err}");

    let rs = RunningStats {
        mean: vec![0.2, -0.1],
        var: vec![0.5, 2.0],
    };
    let err = max_rel_error(&[x, gamma, beta], 20, |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Eval(&rs)).unwrap();
        g.sum_squares(&[y])
    });
    assert!(err < 1e-4, "eval: {err}");
}

#[test]
fn relu_forward_and_zero_subgradient() {
    let mut g = Graph::new();
    let x = g.param(t(&[1, 1, 1, 3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn relu_all_negative() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[1, 1, 2, 2], -0.5));
    let y = g.relu(x);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut x = random_tensor(&[1, 2, 3, 3], 13);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    let err = max_rel_error(&[x], 100, |g, v| {
        let y = g.relu(v[0]);
        g.sum_squares(&[y])
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_symmetry_and_stability() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 2, 1, 2], &[0.0, 1000.0, 0.0, 0.0]));
    let y = g.softmax_channels(x).unwrap();
    let d = g.value(y).data();
    assert_eq!((d[0], d[2]), (0.5, 0.5));
    assert_eq!((d[1], d[3]), (1.0, 0.0));
    assert!(g.value(y).is_finite());
}

#[test]
fn softmax_sums_to_one() {
    let mut g = Graph::new();
    let mut x = random_tensor(&[2, 5, 3, 3], 14);
    x.data_mut().iter_mut().for_each(|v| *v *= 30.0);
    let xv = g.input(x);
    let y = g.softmax_channels(xv).unwrap();
    let d = g.value(y).data();
    for b in 0..2 {
        for p in 0..9 {
            let s: f64 = (0..5).map(|c| d[(b * 5 + c) * 9 + p]).sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!((0..5).all(|c| d[(b * 5 + c) * 9 + p] >= 0.0));
        }
    }
}

#[test]
fn softmax_needs_two_channels() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(g.softmax_channels(x).is_err());
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let x = random_tensor(&[1, 5, 2, 3], 15);
    let probe = random_tensor(&[1, 5, 2, 3], 16);
    let err = max_rel_error(&[x], 30, |g, v| {
        let y = g.softmax_channels(v[0]).unwrap();
        let p = g.input(probe.clone());
        let s = g.add(y, p).unwrap();
        g.sum_squares(&[s])
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn add_semantics() {
    let a = random_tensor(&[1, 2, 3, 3], 17);
    let b = random_tensor(&[1, 2, 3, 3], 18);
    let mut g = Graph::new();
    let (av, bv) = (g.param(a.clone()), g.input(b));
    let z = g.input(Tensor::zeros(&[1, 2, 3, 3]));
    let a0 = g.add(av, z).unwrap();
    assert_eq!(g.value(a0).data(), a.data());
    let ab = g.add(av, bv).unwrap();
    let ba = g.add(bv, av).unwrap();
    assert_eq!(g.value(ab).data(), g.value(ba).data());
    let s = g.sum(ab);
    g.backward(s).unwrap();
    assert!(g.grad(av).unwrap().iter().all(|&v| v == 1.0));

    let c = g.input(Tensor::zeros(&[1, 2, 3, 2]));
    assert!(g.add(av, c).is_err());
}

#[test]
fn backward_twice_is_stale() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[1, 1, 1, 1], 2.0));
    let s = g.sum_squares(&[x]);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::StaleGraph)));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[1, 1, 2, 2]));
    let y = g.relu(x);
    assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn scalar_weight_gradient_is_input() {
    // loss = sum(w * x) with a scalar weight realised as a 1x1 kernel.
    let x = t(&[1, 1, 1, 3], &[0.5, -2.0, 3.0]);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let w = g.param(t(&[1, 1, 1, 1], &[0.7]));
    let y = g.conv2d(xv, w, None, 1, 0).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!((g.grad(w).unwrap()[0] - x.sum()).abs() < 1e-15);
}

#[test]
fn shared_tensor_accumulates_both_consumers() {
    let x = random_tensor(&[1, 2, 4, 4], 19);
    let w = random_tensor(&[2, 2, 3, 3], 20);
    let wa = random_tensor(&[1, 2, 1, 1], 21);
    let wb = random_tensor(&[3, 2, 1, 1], 22);

    let branch = |use_a: bool, use_b: bool| -> Vec<f64> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.param(w.clone());
        let trunk = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let mut terms = Vec::new();
        if use_a {
            let k = g.input(wa.clone());
            let a = g.conv2d(trunk, k, None, 1, 0).unwrap();
            terms.push(g.sum_squares(&[a]));
        }
        if use_b {
            let k = g.input(wb.clone());
            let b = g.conv2d(trunk, k, None, 1, 0).unwrap();
            let sm = g.softmax_channels(b).unwrap();
            terms.push(g.sum_squares(&[sm]));
        }
        let loss = terms.iter().skip(1).fold(terms[0], |acc, &t| g.add(acc, t).unwrap());
        g.backward(loss).unwrap();
        g.grad(wv).unwrap().to_vec()
    };
    let both = branch(true, true);
    let a = branch(true, false);
    let b = branch(false, true);
    for i in 0..both.len() {
        assert!((both[i] - (a[i] + b[i])).abs() < 1e-12);
    }
}

#[test]
fn frozen_inputs_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.input(random_tensor(&[1, 1, 3, 3], 23));
    let w = g.input(random_tensor(&[1, 1, 3, 3], 24));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    let s = g.sum_squares(&[y]);
    g.backward(s).unwrap();
    assert!(g.grad(w).is_none());
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.input(random_tensor(&[2, 3, 8, 8], 25));
        let w = g.input(random_tensor(&[4, 3, 3, 3], 26));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        let k = g.input(random_tensor(&[4, 2, 4, 4], 27));
        let z = g.conv_transpose2d(y, k, None, 2).unwrap();
        g.value(z).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn weighted_nll_values() {
    // One pixel, label 0, p_bkg = 0.5.
    let mut g = Graph::new();
    let p = g.input(t(&[1, 2, 1, 1], &[0.5, 0.5]));
    let l = g.weighted_nll(p, &[0], &[true], &[1.0, 1.0], 1.0).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

    // Empty gate.
    let l = g.weighted_nll(p, &[0], &[false], &[1.0, 1.0], 0.0).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn weighted_nll_and_product_gradients() {
    let logits = random_tensor(&[2, 3, 2, 2], 28);
    let obj = random_tensor(&[2, 2, 2, 2], 29);
    let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let include: Vec<bool> = (0..8).map(|i| i % 4 != 1).collect();
    let err = max_rel_error(&[logits, obj], 40, |g, v| {
        let cond = g.softmax_channels(v[0]).unwrap();
        let det = g.softmax_channels(v[1]).unwrap();
        let p_obj = g.select_channel(det, 1).unwrap();
        let joint = g.scale_by_map(p_obj, cond).unwrap();
        g.weighted_nll(joint, &labels, &include, &[0.5, 1.0, 2.0], 6.0).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}
