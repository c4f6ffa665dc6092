use cwm_core::net::{build_toynet, EligibilityOverrides, Layer, Network, ToyNetConfig};
use cwm_core::synth::{generate_in_memory, SequenceSample, SynthConfig};
use cwm_core::train::{
    sample_frames, sequence_gradients, sub_sequence_offsets, train, train_bisequence_step,
    train_sequence_step, Sgd, TrainConfig,
};
use cwm_core::{Error, LabelMap};

fn data(count: usize) -> Vec<SequenceSample> {
    let cfg = SynthConfig {
        height: 16,
        width: 16,
        min_size: 2,
        max_size: 3,
        train_count: count,
        val_count: 0,
        seed: 5,
        ..Default::default()
    };
    generate_in_memory(&cfg).unwrap().train
}

fn net(rho: Option<f64>) -> Network<f32> {
    let cfg = ToyNetConfig {
        num_classes: 5,
        base_width: 8,
        alpha: 1.0,
        rho,
        overrides: EligibilityOverrides::default(),
    };
    build_toynet(&cfg, 11).unwrap()
}

fn weights(net: &Network<f32>) -> Vec<Vec<f32>> {
    net.convs()
        .flat_map(|c| {
            [
                c.kernel.data().to_vec(),
                c.bias.as_ref().unwrap().data().to_vec(),
            ]
        })
        .collect()
}

fn config(j: usize, sps: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        j,
        sequences_per_sample: sps,
        lr: 0.003,
        epochs,
        seed: 2,
        ..Default::default()
    }
}

#[test]
fn full_masks_train_exactly_like_the_stateless_network() {
    let seqs = data(4);
    for j in [1, 7] {
        let mut streamed = net(Some(1.0));
        let mut plain = streamed.to_stateless();
        let cfg = config(j, 1, 2);
        let a = train(&mut streamed, &seqs, &[], &cfg, None, |_| {}).unwrap();
        let b = train(&mut plain, &seqs, &[], &cfg, None, |_| {}).unwrap();
        assert_eq!(weights(&streamed), weights(&plain), "j = {j}");
        let losses =
            |r: &cwm_core::TrainReport| r.epochs.iter().map(|e| e.loss).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
    }
}

#[test]
fn stateless_trainer_matches_hand_written_loop() {
    let seqs = data(3);
    let mut trained = net(None);
    let mut manual = trained.clone();
    let cfg = TrainConfig {
        epochs: 1,
        ..config(1, 1, 1)
    };
    train(&mut trained, &seqs[..1], &[], &cfg, None, |_| {}).unwrap();

    let frame = seqs[0]
        .frame_batch::<f32>(seqs[0].annotated_index - 1)
        .unwrap();
    let mut session = manual.session();
    let (logits, trace) = session.forward_traced(&frame).unwrap();
    let (_, grad) =
        cwm_core::ops::softmax_ce_loss(&logits, std::slice::from_ref(seqs[0].annotated_label()))
            .unwrap();
    let grads = manual.backward(&trace, &grad).unwrap();
    drop(session);
    let mut opt = Sgd::from_config(&cfg);
    opt.step(&mut manual, &grads).unwrap();
    assert_eq!(weights(&trained), weights(&manual));
}

#[test]
fn overfits_a_small_set() {
    let seqs = data(10);
    for rho in [None, Some(0.0), Some(0.25)] {
        let mut n = net(rho);
        let cfg = config(4, 1, 5);
        let report = train(&mut n, &seqs, &[], &cfg, None, |_| {}).unwrap();
        assert_eq!(report.updates, 50);
        let first = report.epochs[0].loss;
        let last = report.final_loss().unwrap();
        assert!(last < first, "rho {rho:?}: {first} -> {last}");
        assert!(report.epochs.iter().all(|e| e.loss.is_finite()));
    }
}

#[test]
fn inactive_rows_only_see_weight_decay() {
    let seqs = data(1);
    let frames = sample_frames::<f32>(&seqs[0], 4).unwrap();
    for wd in [0.0, 1e-2] {
        let mut n = net(Some(0.25));
        let before = n.clone();
        let (_, grads) = sequence_gradients(&n, &frames, seqs[0].annotated_label()).unwrap();
        let mut opt = Sgd::<f32>::new(0.003, 0.9, wd);
        opt.step(&mut n, &grads).unwrap();
        let mut checked = 0;
        for ((old, new), layer) in before
            .convs()
            .zip(n.convs())
            .zip(before.layers().iter().filter(|l| l.conv().is_some()))
        {
            let Layer::Cwm(cwm) = layer else { continue };
            let mask = cwm.mask_at(3).unwrap().unwrap();
            let row = old.kernel.numel() / old.out_channels();
            for r in (0..old.out_channels()).filter(|r| !mask.contains(*r)) {
                let span = r * row..(r + 1) * row;
                for (&p, &q) in old.kernel.data()[span.clone()]
                    .iter()
                    .zip(&new.kernel.data()[span])
                {
                    let decayed = p - 0.003f32 * wd as f32 * p;
                    assert_eq!(
                        q.to_bits(),
                        if wd == 0.0 {
                            p.to_bits()
                        } else {
                            decayed.to_bits()
                        }
                    );
                }
                checked += 1;
            }
            let active_changed = (mask.start()..mask.end()).any(|r| {
                old.kernel.data()[r * row..(r + 1) * row]
                    != new.kernel.data()[r * row..(r + 1) * row]
            });
            assert!(active_changed || old.kernel == new.kernel);
        }
        assert!(checked > 0);
        assert!(grads
            .active_rows
            .iter()
            .any(|m| m.is_some_and(|m| !m.is_full())));
    }
}

#[test]
fn sub_sequences_per_sample() {
    assert_eq!(sub_sequence_offsets(7, 1).unwrap(), [7]);
    assert_eq!(sub_sequence_offsets(7, 2).unwrap(), [7, 6]);
    assert_eq!(sub_sequence_offsets(7, 3).unwrap(), [7, 6, 5]);
    assert_eq!(sub_sequence_offsets(7, 4).unwrap(), [7, 6, 5, 4]);
    let seqs = data(2);
    let frames = sample_frames::<f32>(&seqs[0], 7).unwrap();
    for sps in 1..=4 {
        let mut n = net(Some(0.25));
        let mut opt = Sgd::new(0.003, 0.9, 1e-4);
        let losses =
            train_bisequence_step(&mut n, &frames, seqs[0].annotated_label(), &mut opt, sps)
                .unwrap();
        assert_eq!(opt.updates(), sps);
        let offsets: Vec<usize> = losses.iter().map(|l| l.offset).collect();
        assert_eq!(offsets, sub_sequence_offsets(7, sps).unwrap());

        let report = train(
            &mut net(Some(0.25)),
            &seqs,
            &[],
            &config(7, sps, 2),
            None,
            |_| {},
        )
        .unwrap();
        assert_eq!(report.updates, 2 * seqs.len() * sps);
    }
}

#[test]
fn one_sub_sequence_equals_a_sequence_step() {
    let seqs = data(1);
    let frames = sample_frames::<f32>(&seqs[0], 5).unwrap();
    let target = seqs[0].annotated_label();
    let mut a = net(Some(0.0));
    let mut b = a.clone();
    let mut oa = Sgd::new(0.003, 0.9, 1e-4);
    let mut ob = Sgd::new(0.003, 0.9, 1e-4);
    let la = train_bisequence_step(&mut a, &frames, target, &mut oa, 1).unwrap();
    let lb = train_sequence_step(&mut b, &frames, target, &mut ob).unwrap();
    assert_eq!(la[0].loss, lb);
    assert_eq!(weights(&a), weights(&b));
}

#[test]
fn training_is_deterministic() {
    let seqs = data(4);
    let run = || {
        let mut n = net(Some(0.25));
        let r = train(&mut n, &seqs, &[], &config(5, 2, 2), None, |_| {}).unwrap();
        (
            r.epochs.iter().map(|e| e.loss).collect::<Vec<_>>(),
            weights(&n),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn step_errors() {
    let seqs = data(1);
    let mut n = net(Some(0.25));
    let mut opt = Sgd::new(0.003, 0.9, 1e-4);
    let target = seqs[0].annotated_label();
    assert!(matches!(
        train_sequence_step(&mut n, &[], target, &mut opt),
        Err(Error::Empty(_))
    ));
    let frames = sample_frames::<f32>(&seqs[0], 2).unwrap();
    let wrong = LabelMap::filled(8, 8, 0);
    assert!(matches!(
        train_sequence_step(&mut n, &frames, &wrong, &mut opt),
        Err(Error::ShapeMismatch { .. })
    ));
    assert!(train_bisequence_step(&mut n, &frames, target, &mut opt, 3).is_err());
    assert_eq!(opt.updates(), 0);
    assert!(config(2, 3, 1).validate().is_err());
    assert!(config(0, 1, 1).validate().is_err());
    assert!(config(7, 5, 1).validate().is_err());
}
