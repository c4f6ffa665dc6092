use cwm_core::metrics::{abt_eval, abt_sweep, predict_future, sweep_csv, AbtConfig};
use cwm_core::net::{build_toynet, EligibilityOverrides, Network, ToyNetConfig};
use cwm_core::synth::{generate_in_memory, SequenceSample, SynthConfig};
use cwm_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data() -> Vec<SequenceSample> {
    let cfg = SynthConfig {
        height: 16,
        width: 16,
        min_size: 2,
        max_size: 3,
        train_count: 0,
        val_count: 6,
        seed: 21,
        ..Default::default()
    };
    generate_in_memory(&cfg).unwrap().val
}

/// Random weights so that every channel matters.
fn net(rho: Option<f64>) -> Network<f32> {
    let cfg = ToyNetConfig {
        num_classes: 5,
        base_width: 8,
        alpha: 1.0,
        rho,
        overrides: EligibilityOverrides::default(),
    };
    let mut n = build_toynet::<f32>(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for conv in n.convs_mut() {
        let fan_in = conv.kernel.numel() / conv.out_channels();
        let bound = (3.0 / fan_in as f32).sqrt();
        for v in conv.kernel.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        for v in conv.bias.as_mut().unwrap().data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    n
}

#[test]
fn stateless_curve_is_flat() {
    let seqs = data();
    for rho in [None, Some(1.0)] {
        let rows = abt_sweep(&net(rho), &seqs, 1..=19).unwrap();
        assert!(rows.iter().all(|r| r.1 == rows[0].1), "{rho:?}: {rows:?}");
    }
}

#[test]
fn bistep_curve_has_period_two_in_steady_state() {
    let seqs = data();
    for rho in [0.0, 0.25, 0.5] {
        let n = net(Some(rho));
        let depth = n.spec().cwm_depth();
        let start = depth + 2;
        assert!(start + 2 <= 19);
        for seq in &seqs {
            for k in start..=17 {
                assert_eq!(
                    predict_future(&n, seq, k).unwrap(),
                    predict_future(&n, seq, k + 2).unwrap()
                );
            }
        }
        let rows = abt_sweep(&n, &seqs, start..=19).unwrap();
        for w in rows.windows(3) {
            assert_eq!(w[0].1, w[2].1, "rho {rho}: {rows:?}");
        }
    }
}

#[test]
fn paired_score_is_the_mean_of_both_offsets() {
    let seqs = data();
    let n = net(Some(0.25));
    let rows = abt_sweep(&n, &seqs, [18, 19]).unwrap();
    let paired = abt_eval(
        &n,
        &seqs,
        &AbtConfig {
            k: 19,
            average_pair: true,
        },
    )
    .unwrap();
    assert_eq!(paired, (rows[0].1 + rows[1].1) / 2.0);
    assert!(sweep_csv(&rows).starts_with("k,miou\n18,"));
}

#[test]
fn evaluation_errors() {
    let seqs = data();
    let n = net(Some(0.25));
    assert!(matches!(
        abt_eval(
            &n,
            &[],
            &AbtConfig {
                k: 3,
                average_pair: false
            }
        ),
        Err(Error::Empty(_))
    ));
    assert!(abt_eval(
        &n,
        &seqs,
        &AbtConfig {
            k: 20,
            average_pair: false
        }
    )
    .is_err());
    assert!(abt_eval(
        &n,
        &seqs,
        &AbtConfig {
            k: 1,
            average_pair: true
        }
    )
    .is_err());
    assert!(abt_eval(
        &n,
        &seqs,
        &AbtConfig {
            k: 0,
            average_pair: false
        }
    )
    .is_err());
}
