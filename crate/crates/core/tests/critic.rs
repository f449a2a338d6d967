use forge_core::critic::*;
use forge_core::edit_ops::{apply_op, EditOp};
use forge_core::image::{ImageGrid, RegionMask};
use forge_core::nn::Params;
use forge_core::sample_generator::generate_dataset;
use forge_core::synth::{synth_scene, write_synthetic_corpus};
use proptest::prelude::*;

fn tiny(seed: u64) -> RealismCritic {
    RealismCritic::init(CriticConfig {
        resolution: 32,
        encoder_channels: [4, 6, 6],
        mlp_hidden: 6,
        seed,
        ..CriticConfig::default()
    })
    .unwrap()
}

fn scene(i: u64) -> (ImageGrid, RegionMask) {
    let s = synth_scene(31, i, 32).unwrap();
    let mask = s.masks.into_iter().next().unwrap_or_else(|| RegionMask::full(32, 32).unwrap());
    (s.image, mask)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unedited_image_has_zero_delta(i in 0u64..200, seed in 0u64..4) {
        let (img, mask) = scene(i);
        prop_assert_eq!(delta_realism(&img, &img, &mask, &tiny(seed)).unwrap(), 0.0);
    }
}

#[test]
fn sweep_is_zero_at_identity_and_has_one_row_per_value() {
    let critic = tiny(1);
    let (img, mask) = scene(3);
    let dir = tempfile::tempdir().unwrap();
    for op in EditOp::ALL {
        let spec = if op == EditOp::WhiteBalance { "0.6:1.6667:7" } else { "0.25:4:9" };
        let mut grid = parse_grid(spec).unwrap();
        grid.push(1.0);
        let pts = realism_sweep(&img, &mask, op, &grid, &critic).unwrap();
        assert_eq!(pts.last().unwrap().delta_r, 0.0);
        let path = dir.path().join(format!("{op}.csv"));
        write_sweep_csv(&pts, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), grid.len() + 1);
        assert_eq!(text.lines().next().unwrap(), "value,delta_r");
        write_sweep_plot(&pts, dir.path().join(format!("{op}.png"))).unwrap();
    }
}

#[test]
fn symmetric_log_grid_hits_identity_exactly() {
    let g = parse_grid("0.25:4:9").unwrap();
    assert_eq!(g.len(), 9);
    assert_eq!(g[4], 1.0);
    assert_eq!((g[0], g[8]), (0.25, 4.0));
    assert_eq!(parse_grid("0.5, 1, 2").unwrap(), vec![0.5, 1.0, 2.0]);
    assert!(parse_grid("1:2").is_err());
    assert!(parse_grid("0:2:5").is_err());
}

#[test]
fn one_gradient_step_lowers_the_least_squares_loss() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_synthetic_corpus(dir.path(), 8, 32, 6).unwrap();
    let samples: Vec<_> = generate_dataset(&corpus, 8, 2).unwrap().collect::<Result<_, _>>().unwrap();
    let mut model = tiny(7);
    let inputs: Vec<_> = samples
        .iter()
        .map(|s| (model.prepare(&s.edited, &s.mask).unwrap(), s.label.target()))
        .collect();
    let batch_loss = |m: &RealismCritic| {
        let mut sink = m.zeros_like();
        inputs.iter().map(|(x, t)| m.ls_loss_and_grad(x, *t, &mut sink)).sum::<f64>()
    };
    let mut grads = model.zeros_like();
    let before: f64 = inputs.iter().map(|(x, t)| model.ls_loss_and_grad(x, *t, &mut grads)).sum();
    assert_eq!(before, batch_loss(&model));
    let mut flat = Vec::new();
    grads.visit(&mut |g| flat.extend_from_slice(g));
    let mut k = 0;
    model.visit_mut(&mut |p| {
        for v in p.iter_mut() {
            *v -= 1e-3 * flat[k];
            k += 1;
        }
    });
    assert!(batch_loss(&model) < before);
}

#[test]
fn critic_objective_matches_least_squares_form() {
    let v = critic_objective(&[0.2, 0.4], &[0.9, 1.1]);
    let want = 0.5 * (0.04 + 0.16) + 0.5 * (0.01 + 0.01);
    assert!((v - want).abs() < 1e-12, "{v} vs {want}");
}

#[test]
fn moving_the_mask_changes_the_score() {
    let critic = tiny(2);
    let mut changed = 0;
    for i in 0..20 {
        let (img, _) = scene(i);
        let left = RegionMask::from_fn(32, 32, false, |y, x| f64::from(u8::from((8..20).contains(&y) && (2..14).contains(&x)))).unwrap();
        let right = RegionMask::from_fn(32, 32, false, |y, x| f64::from(u8::from((8..20).contains(&y) && (18..30).contains(&x)))).unwrap();
        let edited = apply_op(&img, EditOp::Exposure, 1.8, &left).unwrap();
        let a = critic.score(&edited, &left).unwrap().0;
        let b = critic.score(&edited, &right).unwrap().0;
        if (a - b).abs() > 1e-6 {
            changed += 1;
        }
    }
    assert!(changed >= 18, "mask changed the score on {changed}/20 images");
}

#[test]
fn checkpoint_roundtrip_preserves_scores() {
    let critic = tiny(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("critic.ckpt");
    critic.save(&path).unwrap();
    let back = RealismCritic::load(&path).unwrap();
    let (img, mask) = scene(1);
    assert_eq!(critic.score(&img, &mask).unwrap(), back.score(&img, &mask).unwrap());
    assert_eq!(back.config(), critic.config());
}

#[test]
fn short_training_run_reports_auc() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_synthetic_corpus(dir.path(), 16, 32, 8).unwrap();
    let (train, held) = corpus.split(12);
    let tr: Vec<_> = generate_dataset(&train, 24, 1).unwrap().collect::<Result<_, _>>().unwrap();
    let he: Vec<_> = generate_dataset(&held, 8, 2).unwrap().collect::<Result<_, _>>().unwrap();
    let cfg = CriticConfig { resolution: 32, encoder_channels: [4, 6, 6], mlp_hidden: 6, epochs: 2, learning_rate: 1e-3, ..CriticConfig::default() };
    let mut seen = 0;
    let (_, report) = train_critic(&tr, Some(&he), cfg, |_| seen += 1).unwrap();
    assert_eq!(seen, 2);
    assert!(report.epochs.iter().all(|e| e.loss.is_finite()));
    let auc = report.final_auc.unwrap();
    assert!((0.0..=1.0).contains(&auc));
}
