mod common;

use afm_core::nn::{softmax_cross_entropy, Network, OptimizerState};
use afm_core::sparsify::{
    draw_noise, extract_neuron_mask, kl_term, train_sparse, vd_forward_train, SparsifyConfig, VariationalLayer,
    VariationalNet, K1, ZERO_VARIANCE_LOG_SIGMA2,
};
use afm_core::{rng, AfmError, Matrix2D, NeuronMask};
use common::{blobs, rel_err};
use proptest::prelude::*;
use rand::Rng;

fn random_vd_net(inp: usize, hidden: usize, out: usize, seed: u64) -> VariationalNet {
    let mut r = rng::stream(seed, 0);
    let dense = Network::mlp(&[inp, hidden, out], &mut r).unwrap();
    let mut net = VariationalNet::from_dense(&dense, -3.0).unwrap();
    for v in net.hidden.log_sigma2.as_mut_slice() {
        *v = r.random_range(-4.0..-1.0);
    }
    net
}

#[test]
fn monte_carlo_moments_match_analytic_gaussian() {
    let theta = Matrix2D::from_rows(&[[0.5, -1.0], [2.0, 0.3], [-0.7, 0.8]]).unwrap();
    let ls2 = Matrix2D::from_rows(&[[-1.0, 0.2], [-2.0, -0.5], [0.0, -3.0]]).unwrap();
    let layer = VariationalLayer::new(theta.clone(), ls2.clone(), vec![-2.0, 1.5]).unwrap();
    let xrow = [0.9, -0.4, 1.3];
    let draws = 100_000;
    let x = Matrix2D::from_rows(&vec![xrow; draws]).unwrap();
    let mut r = rng::stream(21, 0);
    let out = vd_forward_train(&layer, &x, &mut r).unwrap();
    for j in 0..2 {
        let mean_ref: f64 = (0..3).map(|i| xrow[i] * theta.get(i, j)).sum::<f64>() + layer.bias[j];
        let var_ref: f64 = (0..3).map(|i| xrow[i] * xrow[i] * ls2.get(i, j).exp()).sum();
        let samples: Vec<f64> = (0..draws).map(|r| out.pre.get(r, j)).collect();
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        assert!(rel_err(mean, mean_ref, 1e-12) < 0.01, "unit {j}: mean {mean} vs {mean_ref}");
        assert!(rel_err(var, var_ref, 1e-12) < 0.01, "unit {j}: var {var} vs {var_ref}");
    }
}

#[test]
fn kl_grid_is_monotone_and_bounded() {
    let mut prev = f64::NEG_INFINITY;
    let mut sup = f64::NEG_INFINITY;
    for k in 0..=2000 {
        let la = -10.0 + 0.01 * k as f64;
        let v = kl_term(la);
        assert!(v >= prev, "not monotone at log alpha {la}");
        prev = v;
        sup = sup.max(v);
    }
    assert!(sup <= K1 + 1e-9);
    assert!((kl_term(0.0) - 0.2045).abs() <= 1e-4);
    assert!((kl_term(1e3) - K1).abs() < 1e-12);
}

#[test]
fn degenerate_variational_layer_is_plain_cross_entropy() {
    let mut net = random_vd_net(5, 4, 3, 2);
    for v in net.hidden.log_sigma2.as_mut_slice() {
        *v = ZERO_VARIANCE_LOG_SIGMA2;
    }
    let x = Matrix2D::from_rows(&[[0.1, 0.5, -0.3, 0.9, 0.0], [1.0, -1.0, 0.2, 0.3, 0.4]]).unwrap();
    let labels = [2, 0];
    let noise = draw_noise(2, 4, &mut rng::stream(2, 1));
    let (loss, _) = net.sgvb_objective(&x, &labels, 100, 0.0, &noise, None).unwrap();
    let dense = net.to_dense().unwrap();
    let (ce, _) = softmax_cross_entropy(&dense.predict(&x, &[]).unwrap(), &labels).unwrap();
    // (N/M)·Σ NLL = N·mean CE
    assert!((loss.loss - 100.0 * ce).abs() <= 1e-8);
}

#[test]
fn likelihood_scales_with_dataset_size_and_kl_does_not() {
    let net = random_vd_net(4, 3, 2, 8);
    let x = Matrix2D::from_rows(&[[0.3, 0.1, -0.2, 0.5], [0.0, 0.4, 0.6, -0.1]]).unwrap();
    let noise = draw_noise(2, 3, &mut rng::stream(8, 1));
    let (a, _) = net.sgvb_objective(&x, &[0, 1], 50, 0.5, &noise, None).unwrap();
    let (b, _) = net.sgvb_objective(&x, &[0, 1], 100, 0.5, &noise, None).unwrap();
    assert!((b.likelihood - 2.0 * a.likelihood).abs() <= 1e-9 * a.likelihood.abs());
    assert_eq!(a.kl, b.kl);
}

#[test]
fn objective_input_errors() {
    let net = random_vd_net(4, 3, 2, 8);
    let empty = Matrix2D::zeros(0, 4);
    let err = net.sgvb_objective(&empty, &[], 10, 0.5, &Matrix2D::zeros(0, 3), None).unwrap_err();
    assert!(matches!(err, AfmError::Input(_)));
    let x = Matrix2D::zeros(3, 4);
    let err = net.sgvb_objective(&x, &[0, 0, 0], 2, 0.5, &Matrix2D::zeros(3, 3), None).unwrap_err();
    assert!(matches!(err, AfmError::Input(_)));
}

fn check_sgvb_gradients(seed: u64, inp: usize, hidden: usize, out: usize) -> Result<(), TestCaseError> {
    let net = random_vd_net(inp, hidden, out, seed);
    let mut r = rng::stream(seed, 5);
    let rows = 3;
    let x = Matrix2D::from_vec(rows, inp, (0..rows * inp).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..rows).map(|i| i % out).collect();
    let noise = draw_noise(rows, hidden, &mut r);
    let fwd = afm_core::sparsify::vd_forward_with_noise(&net.hidden, &x, &noise).unwrap();
    prop_assume!(fwd.pre.as_slice().iter().all(|z| z.abs() > 1e-3));
    let clip_edge = (0..inp).any(|i| (0..hidden).any(|j| (net.hidden.log_alpha(i, j).abs() - 10.0).abs() < 0.1));
    prop_assume!(!clip_edge);
    let objective = |n: &VariationalNet| n.sgvb_objective(&x, &labels, 20, 0.7, &noise, None).unwrap().0.loss;
    let (_, grads) = net.sgvb_objective(&x, &labels, 20, 0.7, &noise, None).unwrap();
    let analytic = grads.slices();
    let h = 1e-5;
    for (t, g) in analytic.iter().enumerate() {
        for k in 0..g.len() {
            let mut plus = net.clone();
            plus.param_slices_mut()[t][k] += h;
            let mut minus = net.clone();
            minus.param_slices_mut()[t][k] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            prop_assert!(rel_err(g[k], fd, 1e-5) <= 1e-3, "tensor {} entry {}: {} vs {}", t, k, g[k], fd);
        }
    }
    Ok(())
}

#[test]
fn sgvb_gradients_on_4x3_layer() {
    check_sgvb_gradients(4, 4, 3, 2).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn sgvb_gradients_match_finite_differences(seed in 0u64..10_000, inp in 1usize..8, hidden in 1usize..8, out in 2usize..5) {
        check_sgvb_gradients(seed, inp, hidden, out)?;
    }

    #[test]
    fn mask_extraction_is_deterministic(seed in 0u64..1000) {
        let net = random_vd_net(6, 5, 2, seed);
        let cfg = SparsifyConfig { neuron_drop_fraction: 0.5, ..Default::default() };
        prop_assert_eq!(extract_neuron_mask(&net.hidden, &cfg), extract_neuron_mask(&net.hidden, &cfg));
    }
}

#[test]
fn zero_variance_training_tracks_plain_training() {
    let data = blobs(256, 6, 3, 0.2, 1);
    let mut init_rng = rng::stream(1, 0);
    let init = Network::mlp(&[6, 8, 3], &mut init_rng).unwrap();
    let cfg = SparsifyConfig {
        epochs: 3,
        batch_size: 32,
        learning_rate: 0.01,
        max_kl_weight: 0.0,
        init_log_sigma2: ZERO_VARIANCE_LOG_SIGMA2,
        freeze_log_sigma2: true,
        ..Default::default()
    };
    let outcome = train_sparse(&data, &init, &cfg, None, &mut rng::stream(1, 2), &mut rng::stream(1, 3)).unwrap();

    let mut plain = init.clone();
    let mut opt = OptimizerState::adam(0.01);
    let mut shuffle = rng::stream(1, 2);
    let mut plain_losses = Vec::new();
    for _ in 0..3 {
        let order = afm_core::nn::batch_order(data.len(), &mut shuffle);
        for chunk in order.chunks(32) {
            let xb = data.images.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let cache = plain.forward(&xb, &[]).unwrap();
            let (loss, grad) = softmax_cross_entropy(cache.output(), &yb).unwrap();
            let g = plain.backward(&cache, &grad).unwrap();
            opt.step(&mut plain.param_slices_mut(), &g.slices()).unwrap();
            plain_losses.push(loss);
        }
    }
    assert_eq!(plain_losses.len(), outcome.step_losses.len());
    for (a, b) in plain_losses.iter().zip(&outcome.step_losses) {
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
}

#[test]
fn fully_frozen_candidates_is_degenerate() {
    let data = blobs(32, 4, 2, 0.1, 3);
    let init = Network::mlp(&[4, 5, 2], &mut rng::stream(3, 0)).unwrap();
    let err = train_sparse(
        &data,
        &init,
        &SparsifyConfig::default(),
        Some(&NeuronMask::ones(5)),
        &mut rng::stream(3, 1),
        &mut rng::stream(3, 2),
    )
    .unwrap_err();
    assert!(matches!(err, AfmError::DegenerateMask(_)));
}

#[test]
fn result_is_disjoint_from_frozen_mask() {
    let data = blobs(400, 8, 3, 0.15, 4);
    let init = Network::mlp(&[8, 12, 3], &mut rng::stream(4, 0)).unwrap();
    let frozen = NeuronMask::from_bits(&[1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
    let cfg = SparsifyConfig {
        epochs: 5,
        batch_size: 32,
        learning_rate: 0.01,
        ..Default::default()
    };
    let out = train_sparse(&data, &init, &cfg, Some(&frozen), &mut rng::stream(4, 1), &mut rng::stream(4, 2)).unwrap();
    assert_eq!(out.mask.overlap(&frozen).unwrap(), 0);
    assert!(out.mask.count_active() >= 1);
}

#[test]
fn pruning_dropped_weights_does_not_change_masked_output() {
    let data = blobs(400, 8, 3, 0.15, 6);
    let init = Network::mlp(&[8, 12, 3], &mut rng::stream(6, 0)).unwrap();
    let cfg = SparsifyConfig {
        epochs: 5,
        batch_size: 32,
        learning_rate: 0.01,
        neuron_drop_fraction: 0.5,
        ..Default::default()
    };
    let out = train_sparse(&data, &init, &cfg, None, &mut rng::stream(6, 1), &mut rng::stream(6, 2)).unwrap();
    let dense = out.net.to_dense().unwrap();
    let mut zeroed = dense.clone();
    for j in (0..12).filter(|&j| !out.mask.get(j)) {
        for i in 0..8 {
            if out.net.hidden.alpha(i, j) >= cfg.alpha_keep_threshold {
                zeroed.layers[0].weights.set(i, j, 0.0);
            }
        }
    }
    let masks = [Some(&out.mask), None];
    let a = dense.predict(&data.images, &masks).unwrap();
    let b = zeroed.predict(&data.images, &masks).unwrap();
    assert_eq!(a, b);
}
