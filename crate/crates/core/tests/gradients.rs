mod common;

use common::{max_fd_error, random_pairs, random_window, tiny_model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sv_core::network::{contrastive_loss_grad, softmax_loss_grad, LstmModel};
use sv_core::{ContrastiveConfig, Mode};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn softmax_check(seed: u64, batchnorm: bool) {
    let mut model = tiny_model(seed, 3, 4, batchnorm, Some(3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let xs: Vec<_> = (0..4).map(|_| random_window(&mut rng, 5, 3)).collect();
    let refs: Vec<_> = xs.iter().collect();
    let ys = [0, 2, 1, 2];
    let analytic = softmax_loss_grad(&model, &refs, &ys, Mode::Train)
        .unwrap()
        .grads
        .flatten();
    let loss = |m: &LstmModel<f64>| softmax_loss_grad(m, &refs, &ys, Mode::Train).unwrap().loss;
    let (err, n) = max_fd_error(&mut model, &analytic, STEP, loss);
    assert_eq!(n, model.num_params());
    assert!(err < TOL, "seed {seed} bn {batchnorm}: relative error {err}");
}

fn contrastive_check(seed: u64, batchnorm: bool, lambda: f64) {
    let mut model = tiny_model(seed, 3, 4, batchnorm, None);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    let batch = random_pairs(&mut rng, 4, 5, 3);
    // margin well above typical distances keeps every impostor active
    let cfg = ContrastiveConfig { margin: 3.0, lambda };
    let analytic = contrastive_loss_grad(&model, &batch, &cfg, Mode::Train)
        .unwrap()
        .grads
        .flatten();
    let loss = |m: &LstmModel<f64>| contrastive_loss_grad(m, &batch, &cfg, Mode::Train).unwrap().loss;
    let (err, _) = max_fd_error(&mut model, &analytic, STEP, loss);
    assert!(err < TOL, "seed {seed} bn {batchnorm}: relative error {err}");
}

#[test]
fn softmax_gradients_match_finite_differences() {
    for seed in 0..3 {
        softmax_check(seed, false);
        softmax_check(seed, true);
    }
}

#[test]
fn contrastive_gradients_match_finite_differences() {
    for seed in 0..3 {
        contrastive_check(seed, false, 1e-4);
        contrastive_check(seed, true, 1e-4);
        contrastive_check(seed, true, 0.0);
    }
}

#[test]
fn contrastive_gradients_with_inactive_impostors() {
    // small margin: some impostors sit beyond it and contribute nothing
    let mut model = tiny_model(9, 3, 4, false, None);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = random_pairs(&mut rng, 6, 5, 3);
    let cfg = ContrastiveConfig {
        margin: 0.05,
        lambda: 1e-3,
    };
    let out = contrastive_loss_grad(&model, &batch, &cfg, Mode::Train).unwrap();
    assert!(out
        .distances
        .iter()
        .zip(&batch)
        .any(|(&d, p)| !p.genuine && d > 0.05 + 1e-3));
    let analytic = out.grads.flatten();
    let loss = |m: &LstmModel<f64>| contrastive_loss_grad(m, &batch, &cfg, Mode::Train).unwrap().loss;
    let (err, _) = max_fd_error(&mut model, &analytic, STEP, loss);
    assert!(err < TOL, "relative error {err}");
}
