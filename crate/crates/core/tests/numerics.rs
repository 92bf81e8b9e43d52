use lsr_core::nn::{adam_step, gaussian_tanh_logprob, log_softmax, polyak_update, Activation, AdamState, Grad, MlpParams};
use lsr_core::oracle::{gradient_check, random_gradient_checks};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn backprop_matches_central_differences_on_random_nets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let worst = random_gradient_checks(100, 1e-6, &mut rng).unwrap();
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn relu_nets_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = MlpParams::new(&[3, 6, 6, 2], Activation::Relu, &mut rng);
    let x = [0.3, -1.2, 0.8, 1.1, 0.05, -0.4];
    let c = [1.0, -0.5, 0.25, 2.0];
    assert!(gradient_check(&net, &x, 2, &c, 1e-6).unwrap() <= 1e-4);
}

fn small_net(seed: u64) -> MlpParams {
    MlpParams::new(&[2, 4, 3], Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_check_holds_for_any_seed(seed in any::<u64>(), x0 in -3.0..3.0f64, x1 in -3.0..3.0f64) {
        let net = small_net(seed);
        let worst = gradient_check(&net, &[x0, x1], 1, &[0.7, -1.3, 0.2], 1e-6).unwrap();
        prop_assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn log_softmax_normalizes(logits in prop::collection::vec(-50.0..50.0f64, 1..8)) {
        let lp = log_softmax(&logits).unwrap();
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(lp.iter().all(|v| *v <= 1e-12));
    }

    #[test]
    fn polyak_moves_target_towards_online(seed in any::<u64>(), tau in 0.0..=1.0f64) {
        let online = small_net(seed);
        let mut target = small_net(seed.wrapping_add(1));
        let before = target.clone();
        polyak_update(&mut target, &online, tau).unwrap();
        for ((t, b), o) in target.layers().iter().zip(before.layers()).zip(online.layers()) {
            for ((tv, bv), ov) in t.weight.iter().zip(&b.weight).zip(&o.weight) {
                prop_assert!((tv - (tau * ov + (1.0 - tau) * bv)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_first_step_is_bounded_by_learning_rate(seed in any::<u64>(), lr in 1e-5..1e-1f64, g in -10.0..10.0f64) {
        let mut net = small_net(seed);
        let before = net.clone();
        let mut grad = Grad::zeros_like(&net);
        for l in &mut grad.layers {
            l.weight.iter_mut().for_each(|w| *w = g);
        }
        let mut state = AdamState::new(&net);
        adam_step(&mut net, &mut state, &grad, lr).unwrap();
        for (a, b) in net.layers().iter().zip(before.layers()) {
            for (x, y) in a.weight.iter().zip(&b.weight) {
                prop_assert!((x - y).abs() <= lr * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn squashed_logprob_matches_change_of_variables(mean in -2.0..2.0f64, log_std in -2.0..1.0f64, u in -3.0..3.0f64) {
        let sd = log_std.exp();
        let z = (u - mean) / sd;
        let base = -0.5 * z * z - log_std - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let t = u.tanh();
        let expected = base - (1.0 - t * t + 1e-6).ln();
        let got = gaussian_tanh_logprob(&[mean], &[log_std], &[u]);
        prop_assert!((got - expected).abs() < 1e-10);
    }
}
