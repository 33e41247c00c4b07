mod common;

use common::*;
use seqhtc::neural::{model_rng, ModelConfig, ModelParams};

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 100..110 {
        let inst = grad_instance(seed);
        let (err, n) = max_gradient_error(&inst, STEP, FLOOR, None);
        assert!(err < 1e-4, "seed {seed}: max relative error {err:e} over {n} entries");
    }
}

#[test]
fn fixed_dropout_masks_keep_gradients_exact() {
    for seed in 200..205 {
        let mut inst = grad_instance(seed);
        inst.params.config.dropout = 0.3;
        let (err, _) = max_gradient_error(&inst, STEP, FLOOR, Some(seed));
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn forced_choice_has_zero_loss_and_gradient() {
    let taxonomy = shaped(&[1, 1]);
    let config = ModelConfig::new(3, 4, 2).with_dropout(0.0);
    let params = ModelParams::init(config, &mut model_rng(1));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let words = random_vectors(&mut rng, 3, 3, 1.0);
    let masks: Vec<Vec<bool>> = (0..2)
        .map(|j| taxonomy.level_mask(j, seqhtc::taxonomy::Direction::Forward).unwrap())
        .collect();
    let (loss, cache) = params.forward_loss(&words, &[0, 1], &masks, None, None).unwrap();
    assert!(loss.abs() < 1e-9);
    let mut grads = params.zeros_like();
    params.backward(&cache, &mut grads);
    assert!(grads.l2_norm() < 1e-9);
}

#[test]
fn backward_is_deterministic() {
    let inst = grad_instance(7);
    let run = || {
        let (_, cache) = inst
            .params
            .forward_loss(&inst.words, &inst.targets, &inst.masks, Some(&inst.cdv), None)
            .unwrap();
        let mut g = inst.params.zeros_like();
        inst.params.backward(&cache, &mut g);
        g
    };
    assert_eq!(run(), run());
}

use rand::SeedableRng;
