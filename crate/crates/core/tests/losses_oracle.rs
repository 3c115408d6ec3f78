use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sifa_core::losses::*;
use sifa_core::LossWeights;

const LN2: f64 = core::f64::consts::LN_2;

#[test]
fn adversarial_at_chance() {
    // score 0 means sigmoid 0.5 for every patch
    let zeros = vec![0.0f64; 30];
    let pair = adv_loss(&zeros, &zeros, AdvVariant::Log).unwrap();
    assert!((pair.discriminator_loss - 2.0 * LN2).abs() < 1e-6);
    assert!((pair.generator_loss - LN2).abs() < 1e-6);
}

#[test]
fn cross_entropy_at_uniform_logits() {
    let logits = vec![0.25f64; 5 * 16];
    let labels: Vec<u8> = (0..16).map(|i| (i % 5) as u8).collect();
    let loss = seg_loss(&logits, &labels, 1, 5, 1.0).unwrap();
    assert!((loss.cross_entropy - 5f64.ln()).abs() < 1e-6);
}

#[test]
fn perfect_reconstruction_has_zero_cycle_loss() {
    let xs: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
    let xt: Vec<f64> = (0..64).map(|i| (i as f64 * 0.11).cos()).collect();
    assert_eq!(cycle_loss(&xs, &xs, &xt, &xt).unwrap(), 0.0);
}

#[test]
fn total_loss_matches_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let mut draw = || rng.random_range(0.0..10.0);
        let parts = LossComponents { adv_t: draw(), adv_s: draw(), cyc: draw(), seg: draw(), adv_p: draw(), adv_s_tilde: draw() };
        let w = LossWeights {
            lambda_adv_s: draw(),
            lambda_cyc: draw(),
            lambda_seg: draw() + 0.1,
            lambda_adv_p: draw(),
            lambda_adv_s_tilde: draw(),
            alpha: draw(),
        };
        let terms = [
            parts.adv_t,
            w.lambda_adv_s * parts.adv_s,
            w.lambda_cyc * parts.cyc,
            w.lambda_seg * parts.seg,
            w.lambda_adv_p * parts.adv_p,
            w.lambda_adv_s_tilde * parts.adv_s_tilde,
        ];
        let oracle: f64 = terms.iter().sum();
        assert!((total_loss(&parts, &w).unwrap() - oracle).abs() < 1e-9);
    }
}

#[test]
fn nonfinite_component_is_named() {
    let parts = LossComponents { cyc: f64::NAN, ..Default::default() };
    let err = total_loss(&parts, &LossWeights::default()).unwrap_err();
    assert!(err.to_string().contains("cyc"), "{err}");
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

fn check_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
    let h = 1e-5;
    for i in 0..x.len() {
        let mut up = x.to_vec();
        let mut down = x.to_vec();
        up[i] += h;
        down[i] -= h;
        let numeric = (f(&up) - f(&down)) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        assert!(err < 1e-4, "component {i}: analytic {} numeric {numeric} (rel err {err})", analytic[i]);
    }
}

#[test]
fn seg_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (batch, classes, pixels) = (2, 5, 16);
    for alpha in [0.0, 1.0, 2.5] {
        let logits: Vec<f64> = (0..batch * classes * pixels).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<u8> = (0..batch * pixels).map(|_| rng.random_range(0..classes as u8)).collect();
        let (_, grad) = seg_loss_grad(&logits, &labels, batch, classes, alpha).unwrap();
        check_gradient(|z| seg_loss(z, &labels, batch, classes, alpha).unwrap().total, &logits, &grad);
    }
}

#[test]
fn cycle_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x_s: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x_t: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    // keep reconstructions away from the kink of |x - r|
    let away = |x: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        x.iter().map(|&v| v + rng.random_range(0.05..0.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
    };
    let rec_s = away(&x_s, &mut rng);
    let rec_t = away(&x_t, &mut rng);
    let (_, gs) = l1_mean(&x_s, &rec_s).unwrap();
    let (_, gt) = l1_mean(&x_t, &rec_t).unwrap();
    check_gradient(|r| cycle_loss(&x_s, r, &x_t, &rec_t).unwrap(), &rec_s, &gs);
    check_gradient(|r| cycle_loss(&x_s, &rec_s, &x_t, r).unwrap(), &rec_t, &gt);
}

#[test]
fn adversarial_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let real: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
    let fake: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
    for variant in [AdvVariant::Log, AdvVariant::LeastSquares] {
        let (_, gr, gf) = adv_discriminator(&real, &fake, variant).unwrap();
        check_gradient(|r| adv_discriminator(r, &fake, variant).unwrap().0, &real, &gr);
        check_gradient(|f| adv_discriminator(&real, f, variant).unwrap().0, &fake, &gf);
        let (_, gg) = adv_generator(&fake, variant).unwrap();
        check_gradient(|f| adv_generator(f, variant).unwrap().0, &fake, &gg);
    }
}

proptest! {
    #[test]
    fn seg_loss_nonnegative_and_finite(
        logits in prop::collection::vec(-20.0f64..20.0, 5 * 16),
        labels in prop::collection::vec(0u8..5, 16),
        alpha in 0.0f64..4.0,
    ) {
        let loss = seg_loss(&logits, &labels, 1, 5, alpha).unwrap();
        prop_assert!(loss.total.is_finite());
        prop_assert!(loss.cross_entropy >= 0.0);
        prop_assert!(loss.dice_loss >= -1e-12 && loss.dice_loss <= 1.0 + 1e-12);
    }

    #[test]
    fn csv_roundtrip(step in 0u64..1_000_000, v in prop::collection::vec(0.0f64..100.0, 6)) {
        let parts = LossComponents { adv_t: v[0], adv_s: v[1], cyc: v[2], seg: v[3], adv_p: v[4], adv_s_tilde: v[5] };
        let report = LossReport::new(step, parts, &LossWeights::default()).unwrap();
        prop_assert_eq!(LossReport::parse_csv_line(&report.csv_line()).unwrap(), report);
    }
}
