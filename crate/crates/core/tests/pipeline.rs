mod common;

use std::sync::Arc;

use common::*;
use diffseg_core::benchmark::{ablation_arms, run_ablation, run_benchmark};
use diffseg_core::cache::{FeatureCache, FeatureExtractor};
use diffseg_core::data::{generate_dataset, tensor_digest, Dataset, DomainSpec, IGNORE_INDEX};
use diffseg_core::features::TrajectoryConfig;
use diffseg_core::metrics::ConfusionMatrix;
use diffseg_core::path_control::decompose_annotation;
use diffseg_core::trainer::{IpklTrainer, Objective, TrainerConfig};

fn small_trainer_config() -> TrainerConfig {
    TrainerConfig {
        fusion_width: 8,
        head_width: 8,
        batch_size: 2,
        ..TrainerConfig::default()
    }
}

#[test]
fn generated_dataset_round_trips_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate_dataset(dir.path(), &DomainSpec::target_noise(), 5, 24, 3).unwrap();
    let loaded = Dataset::load(dir.path()).unwrap();
    assert_eq!(loaded.len(), 5);
    assert_eq!(a.count, 5);
    let direct = Dataset::synthetic(&DomainSpec::target_noise(), 5, 24, 3).unwrap();
    for (x, y) in loaded.samples.iter().zip(&direct.samples) {
        assert_eq!(x.labels, y.labels);
        assert_eq!(
            tensor_digest(&x.image).unwrap(),
            tensor_digest(&y.image).unwrap()
        );
    }
    let flat = Dataset::synthetic(&DomainSpec::source_flat(), 5, 24, 3).unwrap();
    for (x, y) in flat.samples.iter().zip(&direct.samples) {
        assert_eq!(x.labels, y.labels);
        assert_ne!(
            tensor_digest(&x.image).unwrap(),
            tensor_digest(&y.image).unwrap()
        );
    }
}

#[test]
fn decomposition_masks_partition_labelled_pixels() {
    let d = Dataset::synthetic(&DomainSpec::source_flat(), 4, 16, 1).unwrap();
    for s in &d.samples {
        let m = decompose_annotation(&s.labels, &d.classes).unwrap();
        let cov = m.coverage();
        for (p, &l) in s.labels.data.iter().enumerate() {
            let expect = if l == IGNORE_INDEX { 0.0 } else { 1.0 };
            assert_eq!(cov[p], expect);
            if l != IGNORE_INDEX {
                assert_eq!(m.mask(l as usize)[p], 1.0);
            }
        }
    }
}

#[test]
fn disk_cache_serves_identical_bundles() {
    let dir = tempfile::tempdir().unwrap();
    let model = Arc::new(tiny_model(1));
    let d = Dataset::synthetic(&DomainSpec::source_flat(), 2, 16, 1).unwrap();
    let img = &d.samples[0].image;
    let masks = decompose_annotation(&d.samples[0].labels, &d.classes).unwrap();
    let first = FeatureExtractor::new(model.clone(), TrajectoryConfig::default())
        .unwrap()
        .with_disk_cache(Some(FeatureCache::open(dir.path()).unwrap()));
    let a = first.bundle(img, Some(&masks)).unwrap();
    let second = FeatureExtractor::new(model.clone(), TrajectoryConfig::default())
        .unwrap()
        .with_disk_cache(Some(FeatureCache::open(dir.path()).unwrap()));
    let passes = model.denoiser_passes();
    let b = second.bundle(img, Some(&masks)).unwrap();
    assert_eq!(model.denoiser_passes(), passes);
    assert_eq!(a.len(), b.len());
    for ((ka, pa), (kb, pb)) in a.iter().zip(b.iter()) {
        assert_eq!(ka, kb);
        assert_eq!(values(&pa.inter), values(&pb.inter));
        assert_eq!(values(&pa.cross), values(&pb.cross));
    }
    assert_ne!(
        first.key(img, None).unwrap(),
        first.key(img, Some(&masks)).unwrap()
    );
}

#[test]
fn untrained_head_scores_near_chance() {
    let ex = Arc::new(
        FeatureExtractor::new(Arc::new(tiny_model(2)), TrajectoryConfig::default()).unwrap(),
    );
    let d = Dataset::synthetic(&DomainSpec::target_restyle(), 4, 16, 5).unwrap();
    let mut accs = Vec::new();
    for seed in 0..3 {
        let tr = IpklTrainer::new(
            ex.clone(),
            classes(),
            TrainerConfig {
                seed,
                ..small_trainer_config()
            },
        )
        .unwrap();
        let mut cm = ConfusionMatrix::new(4);
        for s in &d.samples {
            cm.accumulate(&tr.predict(&s.image).unwrap(), &s.labels)
                .unwrap();
        }
        accs.push(cm.pixel_accuracy().unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.25).abs() < 0.15, "{accs:?}");
}

#[test]
fn benchmark_report_is_stamped_and_reproducible() {
    let ex = Arc::new(
        FeatureExtractor::new(Arc::new(tiny_model(3)), TrajectoryConfig::default())
            .unwrap()
            .with_memo(),
    );
    let train = Dataset::synthetic(&DomainSpec::source_flat(), 4, 16, 1).unwrap();
    let targets = vec![
        Dataset::synthetic(&DomainSpec::target_noise(), 2, 16, 9).unwrap(),
        Dataset::synthetic(&DomainSpec::target_restyle(), 2, 16, 9).unwrap(),
    ];
    let run = || {
        let mut tr = IpklTrainer::new(ex.clone(), classes(), small_trainer_config()).unwrap();
        tr.fit(&train.samples, 3, |_, _| {}).unwrap();
        run_benchmark(&tr, Some(&train), &targets, true, "abc").unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.config_hash, "abc");
    assert_eq!(a.targets.len(), 2);
    assert!(a.targets.iter().all(|r| r.reference_miou.is_some()));
    let mean = a.targets.iter().map(|r| r.miou).sum::<f64>() / 2.0;
    assert!((a.average_miou - mean).abs() < 1e-12);
    let csv = a.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().last().unwrap().starts_with("average"));
}

#[test]
fn ablation_grid_has_five_reproducible_arms() {
    let ex = Arc::new(
        FeatureExtractor::new(Arc::new(tiny_model(4)), TrajectoryConfig::default())
            .unwrap()
            .with_memo(),
    );
    let train = Dataset::synthetic(&DomainSpec::source_flat(), 4, 16, 1).unwrap();
    let targets = vec![Dataset::synthetic(&DomainSpec::target_noise(), 2, 16, 9).unwrap()];
    let base = small_trainer_config();
    let arms = ablation_arms(&base);
    let objectives: Vec<Objective> = arms.iter().map(|a| a.3.objective).collect();
    assert_eq!(
        objectives,
        [
            Objective::Baseline,
            Objective::UnconditionalOnly,
            Objective::Ipkl,
            Objective::Ipkl,
            Objective::Ipkl
        ]
    );
    assert_eq!(arms[2].3.lambda2, 0.0);
    let run = || {
        run_ablation(
            ex.clone(),
            &classes(),
            &base,
            &train.samples,
            Some(&train),
            &targets,
            2,
            "h",
        )
        .unwrap()
    };
    let a = run();
    assert_eq!(a.arms.len(), 5);
    assert_eq!(a, run());
    assert!(a.ordering.contains("hold"));
    assert_eq!(a.to_csv().lines().count(), 6);
}
