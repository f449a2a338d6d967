use std::collections::HashSet;

use forge_core::critic::{CriticConfig, RealismCritic};
use forge_core::edit_ops::{EditOp, EditPermutation};
use forge_core::estimator::*;
use forge_core::image::{ImageGrid, RegionMask};
use forge_core::objective::ObjectiveConfig;
use forge_core::saliency::{AnalyticSaliency, Direction};
use forge_core::synth::write_synthetic_corpus;
use proptest::prelude::*;

fn small(direction: Direction, seed: u64) -> ParamEstimator {
    ParamEstimator::init(EstimatorConfig {
        resolution: 32,
        backbone_channels: [4, 6, 8, 8],
        feature_dim: 12,
        decoder_hidden: 8,
        direction,
        seed,
        ..EstimatorConfig::default()
    })
    .unwrap()
}

fn critic() -> RealismCritic {
    RealismCritic::init(CriticConfig { resolution: 32, encoder_channels: [4, 6, 6], mlp_hidden: 6, ..CriticConfig::default() }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn outputs_stay_within_bounds(
        px in prop::collection::vec(0.0f64..=1.0, 32 * 32 * 3),
        perm_index in 0usize..24,
        seed in 0u64..1000,
        amplify in any::<bool>(),
    ) {
        let dir = if amplify { Direction::Amplify } else { Direction::Attenuate };
        let model = small(dir, seed);
        let img = ImageGrid::new(32, 32, px).unwrap();
        let mask = RegionMask::from_fn(32, 32, false, |y, x| f64::from(u8::from(y > 8 && x > 10))).unwrap();
        let perm = &EditPermutation::all_full()[perm_index];
        let params = model.estimate(&img, &mask, perm).unwrap();
        let bounds = model.config().bounds;
        for op in EditOp::ALL {
            let v = params.get(op).unwrap();
            prop_assert!(bounds.get(op).contains(v), "{} = {} outside bounds", op, v);
        }
    }
}

#[test]
fn permutation_encodings_are_distinct() {
    let codes: HashSet<Vec<u64>> = EditPermutation::all_full()
        .iter()
        .map(|p| encode_permutation(p).0.iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(codes.len(), 24);
}

#[test]
fn directions_are_separate_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let att = small(Direction::Attenuate, 1);
    let path = dir.path().join("att.ckpt");
    att.save(&path).unwrap();
    let loaded = ParamEstimator::load(&path).unwrap();
    assert_eq!(loaded.direction(), Direction::Attenuate);
    let img = ImageGrid::filled(32, 32, [0.4, 0.5, 0.6]).unwrap();
    let mask = RegionMask::full(32, 32).unwrap();
    let perm = EditPermutation::canonical();
    assert_eq!(
        estimate_params(&img, &mask, &perm, &loaded, Direction::Attenuate).unwrap(),
        att.estimate(&img, &mask, &perm).unwrap()
    );
    let err = estimate_params(&img, &mask, &perm, &loaded, Direction::Amplify).unwrap_err();
    assert_eq!(err.code(), "model_state");
    assert!(RealismCritic::load(&path).is_err());
}

#[test]
fn short_run_lowers_training_loss_and_exports_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_synthetic_corpus(dir.path().join("c"), 24, 32, 3).unwrap();
    let (train, held) = corpus.split(20);
    let items = train.region_items(1).unwrap();
    let held = held.region_items(2).unwrap();
    let cfg = EstimatorConfig {
        resolution: 32,
        backbone_channels: [4, 6, 8, 8],
        feature_dim: 12,
        decoder_hidden: 8,
        epochs: 4,
        batch_size: 4,
        learning_rate: 3e-3,
        ..EstimatorConfig::default()
    };
    let mut logged = Vec::new();
    let run = train_estimator(&items, &held, &critic(), &AnalyticSaliency::default(), cfg, &ObjectiveConfig::default(), |e| {
        logged.push(e.clone())
    })
    .unwrap();
    assert_eq!(logged.len(), 4);
    assert_eq!(run.report.epochs, logged);
    assert!(run.report.diverged.is_none());
    assert!(run.critic.is_none());
    let first = logged.first().unwrap().loss;
    let last = logged.last().unwrap().loss;
    assert!(last < first, "loss went from {first} to {last}");
    assert!(logged.iter().all(|e| e.heldout.as_ref().is_some_and(|h| h.items == held.len())));

    let dist = export_param_distribution(&run.model, &items, 10, 0).unwrap();
    assert_eq!(dist.histograms.len(), 4);
    assert!(dist.histograms.iter().all(|h| h.std > 0.0 && h.counts.iter().sum::<usize>() == items.len()));
    let csv = dir.path().join("dist.csv");
    dist.write_csv(&csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 40);
    let blocks: Vec<&str> = rows.chunks(10).map(|c| c[0].split(',').next().unwrap()).collect();
    assert_eq!(blocks, ["exposure", "saturation", "color_curve", "white_balance"]);
    assert!(export_param_distribution(&run.model, &[], 10, 0).is_err());
}

#[test]
fn config_rejects_bad_resolution_and_bounds() {
    let cfg = EstimatorConfig { resolution: 40, ..EstimatorConfig::default() };
    assert!(ParamEstimator::init(cfg).is_err());
    let mut cfg = EstimatorConfig::default();
    cfg.bounds.white_balance = Bounds { lo: 0.5, hi: 2.5 };
    assert!(ParamEstimator::init(cfg).is_err());
}
