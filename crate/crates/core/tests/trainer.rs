use factormix::dataset::{generate_synthetic, Dataset, Sample};
use factormix::harness::evaluate;
use factormix::mixture::SoftTarget;
use factormix::models::{build_models, ArchProfile, ModelSet, Module};
use factormix::rng;
use factormix::trainer::{reconstruct, train_step1, train_step2, TrainConfig};
use factormix::Tensor;
use rand::Rng;

/// Two classes that differ only in which half of the frame is bright.
fn halves(per_class: usize, seed: u64) -> Dataset {
    let mut r = rng::stream(seed, &[]);
    let mut samples = Vec::new();
    for i in 0..2 * per_class {
        let label = i % 2;
        let px: Vec<f32> = (0..32 * 32)
            .map(|p| {
                let left = p % 32 < 16;
                let base = if left == (label == 0) { 0.7 } else { 0.2 };
                base + r.random_range(-0.1..0.1)
            })
            .collect();
        samples.push(Sample {
            id: i as u64,
            label,
            target: SoftTarget::one_hot(label, 2),
            image: Tensor::new([1, 32, 32], px).unwrap(),
        });
    }
    Dataset::new(samples, vec!["left".into(), "right".into()], [1, 32, 32]).unwrap()
}

fn split(ds: &Dataset, n_train: usize) -> (Dataset, Dataset) {
    let idx: Vec<usize> = (0..ds.len()).collect();
    (ds.subset(&idx[..n_train]), ds.subset(&idx[n_train..]))
}

fn models(seed: u64, classes: usize) -> ModelSet<f32> {
    let profile = ArchProfile { class_count: classes, ..ArchProfile::desk() };
    build_models(&profile, &mut rng::stream(seed, &[])).unwrap()
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs_step1: 20,
        epochs_step2: 8,
        views_per_epoch: 2,
        step2_batch_size: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_toy_is_learned() {
    let (train, val) = split(&halves(20, 1), 28);
    let mut m = models(2, 2);
    let log = train_step1(&train, &val, &mut m.encoder_c, &mut m.classifier, &quick(3)).unwrap();
    assert!(log.len() <= 20);
    let eval = evaluate(&m.encoder_c, &mut m.classifier, &val).unwrap();
    assert!(eval.accuracy >= 0.95, "validation accuracy {}", eval.accuracy);
}

#[test]
fn zero_epochs_change_nothing() {
    let (train, val) = split(&halves(6, 1), 8);
    let mut m = models(2, 2);
    let before = m.clone();
    let cfg = TrainConfig { epochs_step1: 0, ..quick(3) };
    let log = train_step1(&train, &val, &mut m.encoder_c, &mut m.classifier, &cfg).unwrap();
    assert!(log.is_empty());
    assert_eq!(m.state_dict(), before.state_dict());
}

#[test]
fn equal_seeds_give_equal_parameters_and_logs() {
    let ds = generate_synthetic(&[8, 8, 8, 8], 32, 4).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (train, val) = (ds.subset(&idx[..24]), ds.subset(&idx[24..]));
    let cfg = TrainConfig { epochs_step1: 3, epochs_step2: 2, ..quick(5) };
    let run = || {
        let mut m = models(1, 4);
        let l1 = train_step1(&train, &val, &mut m.encoder_c, &mut m.classifier, &cfg).unwrap();
        let ModelSet { encoder_c, encoder_r, decoder, adversary, .. } = &mut m;
        let out = train_step2(&train, &val, encoder_c, encoder_r, decoder, adversary, &cfg).unwrap();
        (m.state_dict(), l1.to_jsonl().unwrap(), out.log.to_jsonl().unwrap())
    };
    let a = run();
    assert_eq!(a, run());
    assert!(!a.1.is_empty() && !a.2.is_empty());
}

#[test]
fn step2_freezes_the_specified_encoder_and_learns_to_reconstruct() {
    let ds = generate_synthetic(&[12, 12, 12, 12], 32, 6).unwrap();
    let idx: Vec<usize> = (0..ds.len()).filter(|i| i % 4 != 3).collect();
    let held: Vec<usize> = (0..ds.len()).filter(|i| i % 4 == 3).collect();
    let (train, val) = (ds.subset(&idx), ds.subset(&held));
    let mut m = models(7, 4);
    let cfg = quick(8);
    train_step1(&train, &val, &mut m.encoder_c, &mut m.classifier, &TrainConfig { epochs_step1: 2, ..cfg.clone() }).unwrap();
    let frozen = m.encoder_c.state_dict();

    let ModelSet { encoder_c, encoder_r, decoder, adversary, .. } = &mut m;
    let out = train_step2(&train, &val, encoder_c, encoder_r, decoder, adversary, &cfg).unwrap();
    assert_eq!(m.encoder_c.state_dict(), frozen);
    assert!(out.best_val_rec < out.initial_val_rec, "{} vs {}", out.best_val_rec, out.initial_val_rec);
    assert!(out.log.records.iter().all(|r| r.stage == "step2" && r.total.is_some_and(f64::is_finite)));

    let mut abs = 0.0;
    let mut n = 0;
    for s in &val.samples {
        let rec = reconstruct(&m.encoder_c, &m.encoder_r, &m.decoder, &s.image).unwrap();
        assert_eq!(rec.shape(), s.image.shape());
        let again = reconstruct(&m.encoder_c, &m.encoder_r, &m.decoder, &s.image).unwrap();
        assert_eq!(rec, again);
        abs += rec.data().iter().zip(s.image.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
        n += rec.len();
    }
    let mae = abs / n as f64;
    assert!(mae < 0.15, "validation reconstruction MAE {mae}");
}

#[test]
fn nonnegative_lambda_is_rejected_before_training() {
    let (train, val) = split(&halves(4, 1), 6);
    let mut m = models(2, 2);
    let cfg = TrainConfig { lambda: 0.1, ..quick(3) };
    let ModelSet { encoder_c, encoder_r, decoder, adversary, .. } = &mut m;
    let err = train_step2(&train, &val, encoder_c, encoder_r, decoder, adversary, &cfg).unwrap_err();
    assert!(err.to_string().contains("lambda"), "{err}");
}
