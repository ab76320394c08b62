mod common;

use afm_core::evo::{evaluate_fitness, evolve, initialize_population, EvoConfig, Genome};
use afm_core::nn::{accuracy, Network};
use afm_core::{rng, NeuronMask};
use common::blobs;
use proptest::prelude::*;

fn count_active(m: &NeuronMask) -> afm_core::Result<f64> {
    Ok(m.count_active() as f64)
}

#[test]
fn count_fitness_converges_to_all_ones() {
    let cfg = EvoConfig {
        overlap_penalty: 0.0,
        ..Default::default()
    };
    let out = evolve(20, &count_active, &[], &cfg, &mut rng::stream(5, 0)).unwrap();
    assert!(out.best.is_all_ones(), "best {}", out.best);
    assert!(out.generations_run <= 100);
}

#[test]
fn distance_fitness_finds_exactly_five() {
    let target = |m: &NeuronMask| Ok(-(m.count_active() as f64 - 5.0).abs());
    let out = evolve(20, &target, &[], &EvoConfig::default(), &mut rng::stream(6, 0)).unwrap();
    assert_eq!(out.best.count_active(), 5);
}

#[test]
fn same_seed_same_best_mask() {
    let f = |m: &NeuronMask| Ok(m.bits().iter().enumerate().map(|(i, &b)| if b { (i % 3) as f64 - 1.0 } else { 0.0 }).sum());
    let cfg = EvoConfig::default();
    let a = evolve(16, &f, &[], &cfg, &mut rng::stream(7, 0)).unwrap();
    let b = evolve(16, &f, &[], &cfg, &mut rng::stream(7, 0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn all_ones_fitness_is_unmasked_accuracy_and_all_zero_is_bias_only() {
    let data = blobs(120, 5, 3, 0.2, 9);
    let net = Network::mlp(&[5, 6, 3], &mut rng::stream(9, 0)).unwrap();
    let score = |m: &NeuronMask| accuracy(&net, &data.images, &data.labels, &[Some(m), None]);
    let cfg = EvoConfig {
        overlap_penalty: 3.7,
        ..Default::default()
    };
    let mut ones = Genome::new(NeuronMask::ones(6));
    let f = evaluate_fitness(&mut ones, &score, &NeuronMask::zeros(6), &cfg).unwrap();
    assert_eq!(f, accuracy(&net, &data.images, &data.labels, &[]).unwrap());

    // gated hidden layer: logits are the head bias for every row
    let bias = &net.layers[1].bias;
    let bias_class = afm_core::matrix::argmax(bias);
    let expected = data.labels.iter().filter(|&&l| l == bias_class).count() as f64 / data.len() as f64;
    let mut zeros = Genome::new(NeuronMask::zeros(6));
    assert_eq!(evaluate_fitness(&mut zeros, &score, &NeuronMask::zeros(6), &cfg).unwrap(), expected);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn best_fitness_never_decreases(seed in 0u64..1000, width in 4usize..24) {
        let weights: Vec<f64> = (0..width).map(|i| ((i as f64 + seed as f64) * 1.7).sin()).collect();
        let f = move |m: &NeuronMask| Ok(m.bits().iter().zip(&weights).map(|(&b, w)| if b { *w } else { 0.0 }).sum::<f64>() + 10.0);
        let cfg = EvoConfig { population_size: 20, generations: 30, ..Default::default() };
        let out = evolve(width, &f, &[], &cfg, &mut rng::stream(seed, 0)).unwrap();
        prop_assert!(out.trace.windows(2).all(|w| w[1] >= w[0]));
        prop_assert_eq!(out.trace.last().copied(), Some(out.best_fitness));
    }

    #[test]
    fn hard_exclusion_never_uses_owned_neurons(seed in 0u64..1000, owned_bits in prop::collection::vec(any::<bool>(), 12)) {
        prop_assume!(owned_bits.iter().any(|b| !b));
        let owned = NeuronMask::from_bools(owned_bits);
        let cfg = EvoConfig { population_size: 16, generations: 15, hard_exclusion: true, overlap_penalty: 0.0, ..Default::default() };
        let pop = initialize_population(12, &cfg, std::slice::from_ref(&owned), &mut rng::stream(seed, 1)).unwrap();
        for g in &pop {
            prop_assert_eq!(g.bits.overlap(&owned).unwrap(), 0);
        }
        let out = evolve(12, &count_active, std::slice::from_ref(&owned), &cfg, &mut rng::stream(seed, 0)).unwrap();
        prop_assert_eq!(out.best.overlap(&owned).unwrap(), 0);
    }
}
