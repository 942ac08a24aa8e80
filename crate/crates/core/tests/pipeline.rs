use boda::datagen::{generate, Dataset, DatasetSpec, DomainClassKey, LabelProfile};
use boda::eval::{accuracy_report, feature_discrepancy, spearman, ShotThresholds};
use boda::model::{ModelDims, ModelParams};
use boda::numerics::Mat;
use boda::trainer::{retrain_classifier, train, TrainConfig};

/// Encoder that returns its input unchanged.
fn identity_model(dim: usize, classes: usize) -> ModelParams {
    let mut p = ModelParams::init(&ModelDims::new(dim, vec![], dim, classes), 0).unwrap();
    p.layers[0] = Mat::identity(dim);
    p.biases[0].fill(0.0);
    p
}

/// Two identical domains with 1000 training samples per pair, except pair
/// (0, 0) which keeps only its first 5.
fn minority_dataset(seed: u64) -> Dataset {
    let mut spec = DatasetSpec::two_domain(LabelProfile::uniform(1000), LabelProfile::uniform(1000), seed);
    spec.num_classes = 3;
    spec.domain_shift[1] = spec.domain_shift[0].clone();
    let mut ds = generate(&spec).unwrap();
    let minority = DomainClassKey::new(0, 0);
    let mut kept = 0;
    ds.train.retain(|s| {
        if s.key != minority {
            return true;
        }
        kept += 1;
        kept <= 5
    });
    ds.counts.insert(minority, 5);
    ds
}

#[test]
fn small_pairs_drift_further_from_their_test_mean() {
    let seeds = 20;
    let (mut minority, mut majority) = (0.0, 0.0);
    for seed in 0..seeds {
        let ds = minority_dataset(seed);
        let p = identity_model(ds.input_dim, ds.num_classes);
        let r = feature_discrepancy(&p, &ds).unwrap();
        let within = |k: DomainClassKey| r.pairs.iter().find(|d| d.key == k).unwrap().within_dist.unwrap();
        minority += within(DomainClassKey::new(0, 0)) / seeds as f64;
        majority += within(DomainClassKey::new(1, 0)) / seeds as f64;
        assert!((-1.0..=1.0).contains(&r.ratio_correlation));
    }
    // sampling error of a mean shrinks like 1/sqrt(N): expect roughly sqrt(1000/5) times larger
    assert!(minority > 3.0 * majority, "minority {minority} vs majority {majority}");
}

#[test]
fn retraining_on_balanced_data_changes_little() {
    let ds = generate(&DatasetSpec::balanced(11)).unwrap();
    let cfg = TrainConfig::erm(1);
    let (p, mut log) = train(&ds, &cfg).unwrap();
    let before = accuracy_report(&p, &ds, ShotThresholds::default()).unwrap().average;
    let q = retrain_classifier(&p, &ds, &cfg, &mut log).unwrap();
    let after = accuracy_report(&q, &ds, ShotThresholds::default()).unwrap().average;
    assert_eq!(p.encoder_hash(), q.encoder_hash());
    assert!((after - before).abs() <= 1.0, "before {before}, after {after}");
}

#[test]
fn joint_loss_trends_down() {
    let ds = generate(&DatasetSpec::divergent(3)).unwrap();
    let cfg = TrainConfig { seed: 3, ..Default::default() };
    let (_, log) = train(&ds, &cfg).unwrap();
    assert_eq!(log.trace.len(), cfg.steps);
    let window = 100;
    let smoothed: Vec<f64> = log.trace.chunks(window).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let first = smoothed[0];
    let last = *smoothed.last().unwrap();
    assert!(last < 0.5 * first, "first {first}, last {last}");
    let idx: Vec<f64> = (0..smoothed.len()).map(|i| i as f64).collect();
    let trend = spearman(&idx, &smoothed).unwrap();
    assert!(trend < -0.8, "rank trend {trend}");
}
