use super::*;
use crate::encoder::EncoderConfig;
use crate::featio::{gen_synthetic, Channel, ChannelDims, SyntheticSpec};

const DIMS: ChannelDims = ChannelDims([6, 6, 6, 4]);

fn encoder(positional: bool) -> Encoder<f32> {
    let cfg = EncoderConfig {
        positional,
        init_std: 0.2,
        ..EncoderConfig::tiny(DIMS, 8, 2, 2, 4)
    };
    Encoder::new(cfg, 3).unwrap()
}

fn clips(n: usize, seed: u64) -> (Vec<FeatureSequence>, Vec<u32>) {
    let data = gen_synthetic(&SyntheticSpec {
        num_seqs: n,
        t_range: (6, 10),
        num_latent_gestures: 3,
        isolated: true,
        dims: DIMS,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let labels = (0..n).map(|i| data.clip_label(i)).collect();
    (data.sequences, labels)
}

fn quick() -> DownstreamConfig {
    DownstreamConfig {
        epochs: 3,
        batch_size: 8,
        lr: 1e-2,
        ..DownstreamConfig::default()
    }
}

fn bank(enc: &Encoder<f32>, mode: AdaptMode, classes: usize) -> TaskBank {
    TaskBank::new(
        &[TaskSpec { name: "sign".into(), n_classes: classes }],
        feature_dim(enc, mode),
        0.1,
        0,
    )
    .unwrap()
}

#[test]
fn frozen_modes_leave_the_encoder_untouched() {
    let enc = encoder(true);
    let (seqs, labels) = clips(20, 1);
    let train = LabeledSet::single(seqs[..14].to_vec(), labels[..14].to_vec());
    let val = LabeledSet::single(seqs[14..].to_vec(), labels[14..].to_vec());
    for mode in AdaptMode::ALL {
        let out = train_downstream(&enc, bank(&enc, mode, 3), &train, &val, mode, &quick()).unwrap();
        let m = &out.model;
        match mode {
            AdaptMode::Finetune => assert_ne!(m.encoder.params, enc.params),
            _ => assert_eq!(m.encoder.params, enc.params, "{mode:?}"),
        }
        if mode == AdaptMode::Lora {
            let lora = m.lora.as_ref().unwrap();
            assert!(lora.b.iter().flatten().any(|&x| x != 0.0));
        }
        if matches!(mode, AdaptMode::Raw | AdaptMode::FrozenLast) {
            assert_eq!(m.layer_weights, LayerWeights::uniform(enc.n_layers()));
        }
        let w = m.layer_weights.normalized();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12 && w.iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn finetune_redraws_only_the_last_block() {
    let enc = encoder(true);
    let (seqs, labels) = clips(10, 2);
    let train = LabeledSet::single(seqs[..6].to_vec(), labels[..6].to_vec());
    let val = LabeledSet::single(seqs[6..].to_vec(), labels[6..].to_vec());
    let cfg = DownstreamConfig { lr: 1e-30, ..quick() };
    let out = train_downstream(&enc, bank(&enc, AdaptMode::Finetune, 3), &train, &val, AdaptMode::Finetune, &cfg).unwrap();
    // A 1e-30 step cannot move weights of order 0.1, so only the redraw shows.
    let p = &out.model.encoder.params;
    assert_eq!(p.blocks[0].fc1.weight, enc.params.blocks[0].fc1.weight);
    assert_eq!(p.fusion.weight, enc.params.fusion.weight);
    assert_ne!(p.blocks[1].fc1.weight, enc.params.blocks[1].fc1.weight);
}

#[test]
fn zero_adapters_match_frozen_weighted() {
    let enc = encoder(true);
    let (seqs, _) = clips(3, 3);
    let head = ClassifierHead::new(8, 3, 0.1, 4).unwrap();
    let lw = LayerWeights { raw: vec![0.2, -0.1, 0.4] };
    let lora = LoraSet::new(&enc.cfg, 9);
    for s in &seqs {
        let a = classify(&enc, &head, s, AdaptMode::Lora, &lw, Some(&lora)).unwrap();
        let b = classify(&enc, &head, s, AdaptMode::FrozenWeighted, &lw, None).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn one_hot_mixture_reduces_to_the_last_layer() {
    let enc = encoder(true);
    let (seqs, _) = clips(3, 4);
    let head = ClassifierHead::new(8, 3, 0.0, 5).unwrap();
    let lw = LayerWeights::one_hot(3, 2);
    for s in &seqs {
        let a = classify(&enc, &head, s, AdaptMode::FrozenWeighted, &lw, None).unwrap();
        let b = classify(&enc, &head, s, AdaptMode::FrozenLast, &LayerWeights::uniform(3), None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn adapter_and_mode_must_agree() {
    let enc = encoder(true);
    let (seqs, _) = clips(1, 5);
    let head = ClassifierHead::new(8, 3, 0.0, 5).unwrap();
    let lw = LayerWeights::uniform(3);
    let lora = LoraSet::new(&enc.cfg, 0);
    let err = |r: Result<Vec<f32>>| matches!(r, Err(Error::Config(_)));
    assert!(err(classify(&enc, &head, &seqs[0], AdaptMode::Lora, &lw, None)));
    assert!(err(classify(&enc, &head, &seqs[0], AdaptMode::FrozenLast, &lw, Some(&lora))));
}

#[test]
fn pooling_ignores_frame_order_without_positions() {
    let enc = encoder(false);
    let (seqs, _) = clips(1, 6);
    let seq = &seqs[0];
    let len = seq.len();
    let mut rev = seq.clone();
    for t in 0..len {
        for ch in Channel::ALL {
            let v = seq.channel(len - 1 - t, ch).to_vec();
            rev.channel_mut(t, ch).copy_from_slice(&v);
        }
    }
    let head = ClassifierHead::new(8, 3, 0.0, 1).unwrap();
    for mode in [AdaptMode::FrozenLast, AdaptMode::FrozenWeighted] {
        let a = classify(&enc, &head, seq, mode, &LayerWeights::uniform(3), None).unwrap();
        let b = classify(&enc, &head, &rev, mode, &LayerWeights::uniform(3), None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5, "{mode:?}: {x} vs {y}");
        }
    }
}

#[test]
fn single_task_joint_equals_plain() {
    let enc = encoder(true);
    let (seqs, labels) = clips(16, 7);
    let plain_train = LabeledSet::single(seqs[..10].to_vec(), labels[..10].to_vec());
    let val = LabeledSet::single(seqs[10..].to_vec(), labels[10..].to_vec());
    let mode = AdaptMode::FrozenWeighted;
    let plain = train_downstream(&enc, bank(&enc, mode, 3), &plain_train, &val, mode, &quick()).unwrap();

    // The same task inside a two-task bank whose second task has no labels and no weight.
    let specs = [
        TaskSpec { name: "sign".into(), n_classes: 3 },
        TaskSpec { name: "unused".into(), n_classes: 2 },
    ];
    let joint_bank = TaskBank::new(&specs, 8, 0.1, 0).unwrap().with_weights(vec![1.0, 0.0]).unwrap();
    let widen = |s: &LabeledSet| LabeledSet {
        sequences: s.sequences.clone(),
        labels: s.labels.iter().map(|l| vec![l[0], Some(0)]).collect(),
    };
    let mut joint = train_downstream(&enc, joint_bank, &widen(&plain_train), &widen(&val), mode, &quick()).unwrap();
    assert_eq!(joint.model.bank.tasks[0], plain.model.bank.tasks[0]);
    assert_eq!(joint.model.layer_weights, plain.model.layer_weights);
    joint.model.bank.tasks.truncate(1);
    joint.model.bank.loss_weights.truncate(1);
    assert_eq!(joint.model.evaluate(&val).unwrap().tasks, plain.model.evaluate(&val).unwrap().tasks);
}

#[test]
fn sixteen_heads_share_one_forward_per_example() {
    let enc = encoder(true);
    let (seqs, _) = clips(12, 8);
    let specs = phonological_tasks(PhonoDataset::SemLex);
    let labels: Vec<Vec<Option<u32>>> = (0..12)
        .map(|i| specs.iter().map(|s| Some((i as u32 * 7 + 1) % s.n_classes as u32)).collect())
        .collect();
    let data = LabeledSet {
        sequences: seqs,
        labels,
    };
    let train = LabeledSet { sequences: data.sequences[..8].to_vec(), labels: data.labels[..8].to_vec() };
    let val = LabeledSet { sequences: data.sequences[8..].to_vec(), labels: data.labels[8..].to_vec() };
    let bank = TaskBank::new(&specs, 8, 0.1, 0).unwrap();
    let cfg = DownstreamConfig { epochs: 1, batch_size: 4, ..DownstreamConfig::phonological() };
    let out = train_downstream(&enc, bank, &train, &val, AdaptMode::Finetune, &cfg).unwrap();
    assert_eq!(out.model.bank.len(), 16);
    // One pass over the 8 training clips plus one validation pass over 4.
    assert_eq!(out.model.bank.forward_calls(), 8 + 4);
}

#[test]
fn input_errors() {
    let enc = encoder(true);
    let (seqs, labels) = clips(6, 9);
    let train = LabeledSet::single(seqs[..4].to_vec(), labels[..4].to_vec());
    let val = LabeledSet::single(seqs[4..].to_vec(), labels[4..].to_vec());
    let empty = LabeledSet::single(Vec::new(), Vec::new());
    let mode = AdaptMode::FrozenLast;
    assert!(matches!(
        train_downstream(&enc, bank(&enc, mode, 3), &train, &empty, mode, &quick()),
        Err(Error::Config(_))
    ));
    let bad = LabeledSet::single(seqs[..4].to_vec(), vec![0, 1, 2, 3]);
    assert!(matches!(
        train_downstream(&enc, bank(&enc, mode, 3), &bad, &val, mode, &quick()),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        DownstreamModel::new(enc.clone(), AdaptMode::Raw, bank(&enc, mode, 3), 0),
        Err(Error::Schema(_))
    ));
}

#[test]
fn raw_probe_learns_a_separable_task() {
    // Class is the sign of the first face coordinate, shifted well away from zero.
    let enc = encoder(true);
    let (mut seqs, _) = clips(60, 10);
    let mut labels = Vec::new();
    for (i, s) in seqs.iter_mut().enumerate() {
        let class = (i % 2) as u32;
        for t in 0..s.len() {
            s.channel_mut(t, Channel::Face)[0] = if class == 1 { 3.0 } else { -3.0 };
        }
        labels.push(class);
    }
    let train = LabeledSet::single(seqs[..40].to_vec(), labels[..40].to_vec());
    let val = LabeledSet::single(seqs[40..].to_vec(), labels[40..].to_vec());
    let cfg = DownstreamConfig { epochs: 30, ..quick() };
    let out = train_downstream(&enc, bank(&enc, AdaptMode::Raw, 2), &train, &val, AdaptMode::Raw, &cfg).unwrap();
    assert_eq!(out.model.evaluate(&val).unwrap().mean_recall_at_1, 1.0);
    assert_eq!(out.model.bank.forward_calls(), 0);
}

#[test]
fn training_is_deterministic() {
    let enc = encoder(true);
    let (seqs, labels) = clips(12, 11);
    let train = LabeledSet::single(seqs[..8].to_vec(), labels[..8].to_vec());
    let val = LabeledSet::single(seqs[8..].to_vec(), labels[8..].to_vec());
    for mode in [AdaptMode::Finetune, AdaptMode::Lora] {
        let a = train_downstream(&enc, bank(&enc, mode, 3), &train, &val, mode, &quick()).unwrap();
        let b = train_downstream(&enc, bank(&enc, mode, 3), &train, &val, mode, &quick()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn saved_models_reload_with_identical_logits() {
    let enc = encoder(true);
    let (seqs, labels) = clips(12, 9);
    let train = LabeledSet::single(seqs[..8].to_vec(), labels[..8].to_vec());
    let val = LabeledSet::single(seqs[8..].to_vec(), labels[8..].to_vec());
    let dir = tempfile::tempdir().unwrap();
    for mode in [AdaptMode::Lora, AdaptMode::FrozenWeighted] {
        let out = train_downstream(&enc, bank(&enc, mode, 3), &train, &val, mode, &quick()).unwrap();
        let path = dir.path().join(mode.name());
        out.model.save(&path).unwrap();
        let back = DownstreamModel::load(&path).unwrap();
        assert_eq!(back, out.model);
        assert_eq!(back.logits(&seqs[0]).unwrap(), out.model.logits(&seqs[0]).unwrap());
    }
    std::fs::write(dir.path().join("lora/adapter.json"), b"{}").unwrap();
    assert!(DownstreamModel::load(dir.path().join("lora")).is_err());
}
