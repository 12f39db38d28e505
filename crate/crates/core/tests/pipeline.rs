//! Refinement pipeline and leave-one-subject-out harness.

use eeg_refine::dataset::{
    ems_standardize_dataset, generate_synthetic, inject_label_noise, split_loso, Dataset,
    EmsConfig, SyntheticSpec,
};
use eeg_refine::influence::InfluenceConfig;
use eeg_refine::model::Arch;
use eeg_refine::refine::{
    grid_search, mean_std, random_dropout, run_fold, Metric, ModelConfig, PipelineConfig,
};
use eeg_refine::report::raw_csv;
use eeg_refine::trainer::{evaluate, train, TrainConfig};
use eeg_refine::uncertainty::McConfig;
use eeg_refine::Error;

fn small_data(subjects: usize) -> Dataset {
    let d = generate_synthetic(&SyntheticSpec {
        n_subjects: subjects,
        trials_per_subject: 24,
        n_channels: 2,
        n_timepoints: 16,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    inject_label_noise(&d, 0.2, 3).unwrap()
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        warmup_epochs: 3,
        lr_peak: 1e-2,
        batch_size: 32,
        ..Default::default()
    }
}

fn quick_cfg(metric: Metric) -> PipelineConfig {
    PipelineConfig {
        model: ModelConfig {
            arch: Arch::MlpDropout,
            hidden_dim: 6,
            ..Default::default()
        },
        train: quick_train(),
        metric,
        ratios: vec![0.0, 0.25],
        seeds: vec![0, 1],
        ems: Some(EmsConfig::default()),
    }
}

#[test]
fn ratio_zero_is_the_baseline_trainer() {
    let d = small_data(3);
    let cfg = quick_cfg(Metric::McDropout(McConfig::default()));
    let (train_d, test_d) = split_loso(&d, 1).unwrap();
    let out = run_fold(&train_d, &test_d, &cfg, 0.0, 5).unwrap();
    let spec = cfg.model.spec_for(d.input_dim(), d.n_classes);
    let report = train(&spec, &train_d, &TrainConfig { seed: 5, ..cfg.train }).unwrap();
    assert_eq!(out.accuracy, evaluate(&spec, &report.theta, &test_d).unwrap());
    assert_eq!(out.n_removed, 0);
}

#[test]
fn run_fold_is_deterministic_and_counts_removals() {
    let d = small_data(3);
    let (train_d, test_d) = split_loso(&d, 2).unwrap();
    for metric in [
        Metric::McDropout(McConfig::default()),
        Metric::Random,
    ] {
        let cfg = quick_cfg(metric);
        let a = run_fold(&train_d, &test_d, &cfg, 0.25, 1).unwrap();
        let b = run_fold(&train_d, &test_d, &cfg, 0.25, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_removed, 12);
        assert!((0.0..=1.0).contains(&a.accuracy));
    }
}

#[test]
fn grid_rows_and_summary_are_consistent() {
    let d = small_data(3);
    let r = grid_search(&quick_cfg(Metric::Random), &d).unwrap();
    assert_eq!(r.cells.len(), 3 * 2 * 2);
    let keys: Vec<(u32, f64, u64)> = r.cells.iter().map(|c| (c.fold, c.ratio, c.seed)).collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    assert_eq!(keys, sorted);
    for s in &r.summary {
        let acc: Vec<f64> = r.cells.iter().filter(|c| c.ratio == s.ratio).map(|c| c.accuracy).collect();
        let n = acc.len() as f64;
        let mean = acc.iter().sum::<f64>() / n;
        let std = (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - s.mean).abs() <= 1e-12);
        assert!((std - s.std).abs() <= 1e-12);
    }
    let best = r.best_ratio.unwrap();
    let best_mean = r.summary_for(best).unwrap().mean;
    assert!(r.summary.iter().all(|s| s.mean <= best_mean));
}

#[test]
fn single_ratio_single_seed_is_plain_loso() {
    let d = small_data(3);
    let cfg = PipelineConfig {
        ratios: vec![0.0],
        seeds: vec![4],
        ..quick_cfg(Metric::Influence(InfluenceConfig::default()))
    };
    let r = grid_search(&cfg, &d).unwrap();
    let pre = ems_standardize_dataset(&d, &EmsConfig::default()).unwrap();
    let spec = cfg.model.spec_for(d.input_dim(), d.n_classes);
    let mut accs = Vec::new();
    for s in d.subjects() {
        let (tr, te) = split_loso(&pre, s).unwrap();
        let theta = train(&spec, &tr, &TrainConfig { seed: 4, ..cfg.train }).unwrap().theta;
        accs.push(evaluate(&spec, &theta, &te).unwrap());
    }
    let got: Vec<f64> = r.cells.iter().map(|c| c.accuracy).collect();
    assert_eq!(got, accs);
    assert_eq!(r.summary[0].mean, mean_std(&accs).0);
}

#[test]
fn grid_is_thread_count_independent() {
    let d = small_data(3);
    let cfg = quick_cfg(Metric::McDropout(McConfig::default()));
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| grid_search(&cfg, &d).unwrap())
    };
    // NaN precision cells defeat PartialEq, so compare the serialized rows.
    let (a, b) = (run(1), run(3));
    assert_eq!(raw_csv(&a), raw_csv(&b));
    assert_eq!(a.summary, b.summary);
}

#[test]
fn single_subject_is_rejected() {
    let d = small_data(1);
    assert!(matches!(
        grid_search(&quick_cfg(Metric::Random), &d),
        Err(Error::InvalidArgument(_))
    ));
    let (train_d, test_d) = split_loso(&d, 0).unwrap();
    assert!(train_d.is_empty());
    assert!(run_fold(&train_d, &test_d, &quick_cfg(Metric::Random), 0.0, 0).is_err());
}

#[test]
fn random_dropout_is_uniform() {
    let d = small_data(1);
    let n = d.len();
    let mut hits = vec![0usize; n];
    for seed in 0..1000 {
        let (_, plan) = random_dropout(&d, 0.25, seed).unwrap();
        assert_eq!(plan.removed.len(), 6);
        plan.removed.iter().for_each(|&i| hits[i] += 1);
    }
    for h in hits {
        let f = h as f64 / 1000.0;
        assert!((f - 0.25).abs() <= 0.05, "frequency {f}");
    }
}

#[test]
fn recall_and_precision_reported_with_noise_mask() {
    let d = small_data(3);
    let r = grid_search(&quick_cfg(Metric::Random), &d).unwrap();
    for c in &r.cells {
        if c.ratio > 0.0 {
            assert!(c.recall.is_finite() && c.precision.is_finite());
        } else {
            assert_eq!(c.recall, 0.0);
            assert!(c.precision.is_nan());
        }
    }
}

#[test]
fn no_class_signal_gives_chance_accuracy() {
    let d = generate_synthetic(&SyntheticSpec {
        class_separation: 0.0,
        seed: 7,
        ..Default::default()
    })
    .unwrap();
    let cfg = PipelineConfig {
        model: ModelConfig {
            arch: Arch::LinearSoftmax,
            weight_decay: 0.1,
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 60,
            ..Default::default()
        },
        metric: Metric::Random,
        ratios: vec![0.0],
        seeds: vec![0],
        ems: Some(EmsConfig::default()),
    };
    let r = grid_search(&cfg, &d).unwrap();
    let acc = r.summary[0].mean;
    assert!((acc - 0.5).abs() <= 0.1, "accuracy {acc}");
}

#[test]
fn mc_dropout_pipeline_needs_dropout_model() {
    let cfg = PipelineConfig {
        model: ModelConfig::default(),
        ..quick_cfg(Metric::McDropout(McConfig::default()))
    };
    assert!(matches!(
        grid_search(&cfg, &small_data(2)),
        Err(Error::UnsupportedArchitecture(_))
    ));
}
