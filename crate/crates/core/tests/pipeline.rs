use lrds_core::data::{gen_blobs, load_csv, round_half_up, BlobSpec};
use lrds_core::influence::{rank_and_split, score_dataset, InfluenceConfig, SelectionOrder};
use lrds_core::model::{Checkpoint, MlpModel, ModelSpec};
use lrds_core::trainer::{distill, evaluate, train_teacher, DistillConfig};

fn blobs(seed: u64, noise: f64) -> lrds_core::data::Dataset {
    gen_blobs(&BlobSpec {
        class_count: 3,
        samples_per_class: 40,
        centers: vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![1.5, 2.5]],
        spread: vec![0.5; 3],
        label_noise_rate: noise,
        seed,
    })
    .unwrap()
}

#[test]
fn teach_score_split_distill() {
    let train = blobs(1, 0.05);
    let test = blobs(2, 0.0);
    let cfg = DistillConfig {
        epochs: 40,
        batch_size: 16,
        lr_decay_epochs: vec![30],
        ..DistillConfig::default()
    };
    let (teacher, log) = train_teacher(&ModelSpec::new(vec![2, 16, 3], 0), &train, &cfg, Some(&test)).unwrap();
    assert_eq!(log.records.len(), 40);
    assert!(evaluate(&teacher, &test).unwrap() > 0.9);

    let report = score_dataset(&teacher, &train, &InfluenceConfig { damping: 0.01, ..InfluenceConfig::default() }).unwrap();
    assert_eq!(report.scores.len(), train.len());
    let plan = rank_and_split(&report.scores, cfg.pct, SelectionOrder::HighestFirst, 0).unwrap();
    assert_eq!(plan.dt_indices.len(), round_half_up(0.8, train.len()));

    let (student, slog) = distill(&teacher, &ModelSpec::new(vec![2, 4, 3], 1), &train, &plan, &cfg, Some(&test)).unwrap();
    assert!(slog.records.iter().all(|r| r.loss.total.is_finite()));
    assert!(evaluate(&student, &test).unwrap() > 0.8);

    let ck = Checkpoint::from_json(&student.to_checkpoint().to_json().unwrap()).unwrap();
    assert_eq!(MlpModel::from_checkpoint(&ck).unwrap().params(), student.params());
}

#[test]
fn csv_round_trip_preserves_checksum() {
    let data = blobs(5, 0.1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    data.save_csv(&path).unwrap();
    let back = load_csv(&path, None).unwrap();
    assert_eq!(back.features(), data.features());
    assert_eq!(back.labels(), data.labels());
    assert_eq!(back.checksum(), data.checksum());
}
