use gmn_core::evaluator::{domain_gap_diagnostic, DomainGapConfig};
use gmn_core::linalg::Dense;
use gmn_core::losses::cross_entropy;
use gmn_core::rng::{stream, StreamId};
use gmn_core::trainer::{load_checkpoint, pk_batch, save_checkpoint, train, PkSampler};
use gmn_core::{
    generate_synthetic, Ablation, Checkpoint, Dataset, ModelConfig, Role, SampleRecord, SyntheticSpec, TrainConfig,
    TrainState, Trainer,
};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_domains: 3,
        identities_per_domain: 4,
        records_per_identity: 5,
        d_in: 6,
        seed,
        ..SyntheticSpec::default()
    }
}

fn small_configs() -> (ModelConfig, TrainConfig) {
    (
        ModelConfig {
            encoder_widths: vec![8, 6],
            ..ModelConfig::default()
        },
        TrainConfig {
            epochs: 5,
            dp_activation_epoch: 2,
            lr_decay_epochs: vec![4],
            identities_per_domain: 2,
            samples_per_identity: 2,
            base_lr: 3.5e-3,
            ..TrainConfig::default()
        },
    )
}

fn state_bytes(state: &TrainState) -> Vec<u8> {
    Checkpoint::Train {
        state: state.clone(),
        config_text: String::new(),
    }
    .to_bytes()
}

#[test]
fn checkpoint_at_epoch_three_resumes_bit_for_bit() {
    let ds = generate_synthetic(&small_spec(1)).unwrap();
    let (m, c) = small_configs();
    let (uninterrupted, full_logs) = train(&m, &c, Ablation::FULL, &ds).unwrap();

    let trainer = Trainer::new(&c, Ablation::FULL, &ds).unwrap();
    let mut state = TrainState::init(&m, &c, Ablation::FULL, &ds).unwrap();
    trainer.run_until(&mut state, 3, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.gmnc");
    save_checkpoint(
        &Checkpoint::Train {
            state,
            config_text: "seed = 0".into(),
        },
        &path,
    )
    .unwrap();
    let Checkpoint::Train { mut state, config_text } = load_checkpoint(&path).unwrap() else {
        panic!("expected training state");
    };
    assert_eq!(config_text, "seed = 0");
    let tail = trainer.run_until(&mut state, 5, |_| Ok(())).unwrap();

    assert_eq!(state_bytes(&state), state_bytes(&uninterrupted));
    let full: Vec<_> = full_logs.iter().map(|l| l.record).collect();
    assert_eq!(state.history, full);
    assert_eq!(tail.len(), 2);
}

#[test]
fn restore_then_one_epoch_equals_one_epoch() {
    let ds = generate_synthetic(&small_spec(2)).unwrap();
    let (m, c) = small_configs();
    let trainer = Trainer::new(&c, Ablation::FULL, &ds).unwrap();
    let mut direct = TrainState::init(&m, &c, Ablation::FULL, &ds).unwrap();
    trainer.run_until(&mut direct, 2, |_| Ok(())).unwrap();
    let bytes = state_bytes(&direct);
    let Checkpoint::Train { state: mut restored, .. } = Checkpoint::from_bytes(&bytes).unwrap() else {
        panic!("expected training state");
    };
    trainer.run_epoch(&mut direct).unwrap();
    trainer.run_epoch(&mut restored).unwrap();
    assert_eq!(state_bytes(&direct), state_bytes(&restored));
}

#[test]
fn baseline_logs_zero_pair_losses_and_full_logs_all() {
    let ds = generate_synthetic(&small_spec(3)).unwrap();
    let (m, mut c) = small_configs();
    c.epochs = 2;
    c.dp_activation_epoch = 1;
    c.lr_decay_epochs.clear();
    let (_, base) = train(&m, &c, Ablation::BASELINE, &ds).unwrap();
    for log in &base {
        let l = log.record.losses;
        assert_eq!((l.l_gmn, l.l_pic_pos, l.l_pic_neg), (0.0, 0.0, 0.0));
    }
    let (_, full) = train(&m, &c, Ablation::FULL, &ds).unwrap();
    let l = full[0].record.losses;
    for v in [l.l_cls, l.l_tri, l.l_gmn, l.l_pic_pos, l.l_pic_neg, l.total] {
        assert!(v > 0.0 && v.is_finite());
    }
}

fn toy_two_identities() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = Normal::new(0.0, 0.2).unwrap();
    let records = (0..40)
        .map(|i| {
            let id = (i % 2) as u32;
            let sign = if id == 0 { 1.0 } else { -1.0 };
            SampleRecord {
                sample_id: i as u64,
                identity: id,
                domain: 0,
                camera: (i % 3) as u32,
                embedding: (0..4).map(|k| sign * (1.0 + 0.25 * k as f64) + noise.sample(&mut rng)).collect(),
            }
        })
        .collect();
    Dataset::new(records, 4, Role::Train).unwrap()
}

/// Softmax regression on the raw inputs reaches full training accuracy,
/// so the toy set is separable.
fn logistic_oracle_accuracy(ds: &Dataset) -> f64 {
    let x = ds.embedding_matrix();
    let labels: Vec<usize> = ds.records().iter().map(|r| r.identity as usize).collect();
    let mut layer = Dense::zeros(4, 2);
    for _ in 0..200 {
        let z = layer.forward(&x).unwrap();
        let (_, g) = cross_entropy(&z, &labels).unwrap();
        let mut grad = Dense::zeros(4, 2);
        layer.backward(&x, &g, &mut grad);
        for (w, d) in layer.weights.iter_mut().zip(&grad.weights) {
            *w -= 0.5 * d;
        }
        for (b, d) in layer.bias.iter_mut().zip(&grad.bias) {
            *b -= 0.5 * d;
        }
    }
    let z = layer.forward(&x).unwrap();
    let correct = (0..x.rows)
        .filter(|&i| (z.get(i, 1) > z.get(i, 0)) as usize == labels[i])
        .count();
    correct as f64 / x.rows as f64
}

#[test]
fn toy_set_converges() {
    let ds = toy_two_identities();
    assert_eq!(logistic_oracle_accuracy(&ds), 1.0);
    let m = ModelConfig {
        encoder_widths: vec![8, 8],
        ..ModelConfig::default()
    };
    let c = TrainConfig {
        epochs: 50,
        dp_activation_epoch: 50,
        lr_decay_epochs: vec![],
        identities_per_domain: 2,
        samples_per_identity: 4,
        base_lr: 3.5e-3,
        ..TrainConfig::default()
    };
    let (_, logs) = train(&m, &c, Ablation::MNET, &ds).unwrap();
    let last = logs.last().unwrap().record.losses;
    assert!(last.l_cls < 0.1, "l_cls {}", last.l_cls);
    assert!(last.l_gmn < 0.3, "l_gmn {}", last.l_gmn);
}

#[test]
fn pk_batch_matches_reference_sampler() {
    let ds = generate_synthetic(&SyntheticSpec {
        num_domains: 3,
        identities_per_domain: 5,
        records_per_identity: 3,
        d_in: 2,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let (p, k) = (3, 4);
    let got = pk_batch(&ds, p, k, &mut stream(7, StreamId::Batch)).unwrap();

    let mut rng = stream(7, StreamId::Batch);
    let mut expected = Vec::new();
    for domain in ds.domains() {
        let mut ids: Vec<u32> = ds.records().iter().filter(|r| r.domain == domain).map(|r| r.identity).collect();
        ids.dedup();
        for pick in index::sample(&mut rng, ids.len(), p) {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.records()[i].identity == ids[pick]).collect();
            if rows.len() >= k {
                expected.extend(index::sample(&mut rng, rows.len(), k).into_iter().map(|j| rows[j]));
            } else {
                expected.extend((0..k).map(|_| rows[rng.random_range(0..rows.len())]));
            }
        }
    }
    assert_eq!(got, expected);
    assert_eq!(got.len(), PkSampler::new(&ds, p, k).unwrap().batch_size());
    for domain in ds.domains() {
        let mut ids: Vec<u32> = got
            .iter()
            .map(|&i| &ds.records()[i])
            .filter(|r| r.domain == domain)
            .map(|r| r.identity)
            .collect();
        assert_eq!(ids.len(), p * k);
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), p);
    }
}

#[test]
fn pk_batch_rejects_small_domains() {
    let ds = generate_synthetic(&small_spec(0)).unwrap();
    assert!(pk_batch(&ds, 5, 2, &mut stream(0, StreamId::Batch)).is_err());
}

#[test]
fn domain_gap_is_at_chance_without_shift() {
    let ds = generate_synthetic(&SyntheticSpec {
        domain_shift_scale: 0.0,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let r = domain_gap_diagnostic(&ds, &DomainGapConfig::default()).unwrap();
    assert!((r.instance_space_accuracy - r.chance_level).abs() <= 0.1, "{r:?}");
    assert!((r.pair_space_accuracy - r.chance_level).abs() <= 0.1, "{r:?}");
}

#[test]
fn domain_gap_fits_its_training_split_at_least_as_well() {
    let mut train_sum = 0.0;
    let mut held_sum = 0.0;
    for seed in 0..5 {
        let ds = generate_synthetic(&SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let r = domain_gap_diagnostic(
            &ds,
            &DomainGapConfig {
                seed,
                ..DomainGapConfig::default()
            },
        )
        .unwrap();
        assert!(r.instance_space_accuracy > r.pair_space_accuracy);
        train_sum += r.instance_train_accuracy + r.pair_train_accuracy;
        held_sum += r.instance_space_accuracy + r.pair_space_accuracy;
    }
    assert!(train_sum >= held_sum);
}

#[test]
fn zero_learning_rate_training_is_a_no_op() {
    let ds = generate_synthetic(&small_spec(4)).unwrap();
    let (m, mut c) = small_configs();
    c.epochs = 1;
    c.dp_activation_epoch = 1;
    c.lr_decay_epochs.clear();
    c.base_lr = 0.0;
    let init = TrainState::init(&m, &c, Ablation::FULL, &ds).unwrap();
    let (done, _) = train(&m, &c, Ablation::FULL, &ds).unwrap();
    assert_eq!(done.model, init.model);
}
