use forge_core::critic::{CriticConfig, RealismCritic};
use forge_core::image::{ImageGrid, RegionMask};
use forge_core::objective::*;
use forge_core::saliency::*;
use proptest::prelude::*;

const SIDE: usize = 16;

fn map(values: Vec<f64>) -> SaliencyMap {
    SaliencyMap { height: SIDE, width: SIDE, values }
}

fn tiny_critic(seed: u64) -> RealismCritic {
    RealismCritic::init(CriticConfig {
        resolution: SIDE,
        encoder_channels: [4, 4, 4],
        mlp_hidden: 4,
        seed,
        ..CriticConfig::default()
    })
    .unwrap()
}

proptest! {
    #[test]
    fn relative_change_ignores_uniform_rescaling(
        p in prop::collection::vec(0.05f64..1.0, SIDE * SIDE),
        q in prop::collection::vec(0.05f64..1.0, SIDE * SIDE),
        w in prop::collection::vec(0.0f64..1.0, SIDE * SIDE),
        c in 0.5f64..20.0,
    ) {
        prop_assume!(w.iter().sum::<f64>() > 1.0);
        let m = RegionMask::new(SIDE, SIDE, w, false).unwrap();
        let s = relative_change(&map(p.clone()), &map(q.clone()), &m).unwrap();
        let scaled = relative_change(
            &map(p.iter().map(|v| c * v).collect()),
            &map(q.iter().map(|v| c * v).collect()),
            &m,
        ).unwrap();
        // Exact only without the stabilising epsilon; with P >= 0.05 the gap stays tiny.
        prop_assert!((s - scaled).abs() <= 1e-4 * (1.0 + s.abs()));
    }

    #[test]
    fn saliency_loss_is_positive_and_monotone(s in -2.0f64..2.0, d in 1e-3f64..1.0) {
        for dir in [Direction::Attenuate, Direction::Amplify] {
            prop_assert!(saliency_loss(s, dir) > 0.0);
        }
        prop_assert!(saliency_loss(s + d, Direction::Attenuate) < saliency_loss(s, Direction::Attenuate));
        prop_assert!(saliency_loss(s - d, Direction::Amplify) < saliency_loss(s, Direction::Amplify));
    }

    #[test]
    fn saliency_loss_gradient_matches_difference(s in -1.0f64..1.0, w in prop_oneof![Just(-1.0), Just(5.0), -6.0f64..6.0]) {
        let h = 1e-4;
        let numeric = (saliency_loss_weighted(s + h, w) - saliency_loss_weighted(s - h, w)) / (2.0 * h);
        let analytic = saliency_loss_grad(s, w);
        prop_assert!((analytic - numeric).abs() <= 1e-6 * analytic.abs().max(1e-12));
    }

    #[test]
    fn realism_loss_is_convex_hinge(a in -1.0f64..1.0, b in -1.0f64..1.0, t in 0.0f64..1.0, margin in 0.0f64..0.3) {
        let f = |x: f64| realism_loss(x, margin);
        prop_assert!(f(a) >= 0.0);
        prop_assert!(f(t * a + (1.0 - t) * b) <= t * f(a) + (1.0 - t) * f(b) + 1e-12);
        let g = realism_loss_grad(a, margin);
        prop_assert!(g == 0.0 || g == -1.0);
        prop_assert_eq!(g == -1.0, a < -margin);
    }

    #[test]
    fn loss_grows_with_realism_penalty_past_margin(l_sal in 0.01f64..10.0, lr in 0.0f64..2.0, d in 1e-3f64..1.0) {
        prop_assert!(combined_loss(lr + d, l_sal) > combined_loss(lr, l_sal));
    }
}

#[test]
fn realism_gradient_at_kink_is_zero() {
    assert_eq!(realism_loss_grad(-0.1, 0.1), 0.0);
    assert_eq!(realism_loss(-0.1, 0.1), 0.0);
}

#[test]
fn identity_edit_has_unit_loss_for_every_direction() {
    let critic = tiny_critic(2);
    let backend = AnalyticSaliency::default();
    let img = ImageGrid::from_fn(SIDE, SIDE, |y, x| [0.1 + 0.05 * (x % 7) as f64, 0.2 + 0.04 * y as f64, 0.6]).unwrap();
    let m = RegionMask::from_fn(SIDE, SIDE, false, |y, x| if y > 4 && x > 6 { 1.0 } else { 0.3 }).unwrap();
    for dir in [Direction::Attenuate, Direction::Amplify] {
        for mode in [ObjectiveMode::FixedCritic, ObjectiveMode::Adversarial] {
            let cfg = ObjectiveConfig { mode, ..ObjectiveConfig::default() };
            let (v, _) = full_objective(&img, &img, &m, dir, &critic, &backend, &cfg).unwrap();
            assert_eq!(v.loss, 1.0);
            assert_eq!(v.delta_r, 0.0);
            assert_eq!(v.s, 0.0);
        }
    }
}

#[test]
fn empty_mask_is_rejected() {
    let err = RegionMask::new(SIDE, SIDE, vec![0.0; SIDE * SIDE], false).unwrap_err();
    assert_eq!(err.code(), "precondition");
}

#[test]
fn fixed_mode_refuses_adversarial_updates() {
    let critic = tiny_critic(4);
    let img = ImageGrid::filled(SIDE, SIDE, [0.4; 3]).unwrap();
    let m = RegionMask::full(SIDE, SIDE).unwrap();
    let mut state = CriticState::new(critic, 1e-3);
    let cfg = ObjectiveConfig::default();
    assert!(adversarial_step(&[img.clone()], &[img], &[m], &mut state, &cfg).is_err());
}

#[test]
fn config_rejects_bad_values() {
    let cfg = ObjectiveConfig { w_amplify: f64::NAN, ..ObjectiveConfig::default() };
    assert!(cfg.validate().is_err());
    let cfg = ObjectiveConfig { b_r: -0.1, ..ObjectiveConfig::default() };
    assert!(cfg.validate().is_err());
    let cfg = ObjectiveConfig { mode: ObjectiveMode::Adversarial, critic_updates_per_step: 0, ..ObjectiveConfig::default() };
    assert!(cfg.validate().is_err());
    assert!(ObjectiveConfig::default().validate().is_ok());
}
