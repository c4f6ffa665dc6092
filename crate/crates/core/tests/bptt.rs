use cwm_core::net::{build_toynet, EligibilityOverrides, Network, ToyNetConfig};
use cwm_core::ops::softmax_ce_loss;
use cwm_core::train::{sequence_gradients, sequence_gradients_with};
use cwm_core::{LabelMap, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dense_net(rho: Option<f64>, seed: u64) -> Network<f64> {
    let cfg = ToyNetConfig {
        num_classes: 5,
        base_width: 8,
        alpha: 0.25,
        rho,
        overrides: EligibilityOverrides::default(),
    };
    let mut net = build_toynet(&cfg, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
    for c in net.convs_mut() {
        let bound = (3.0 / (c.kernel.numel() / c.out_channels()) as f64).sqrt();
        c.kernel = Tensor::uniform(c.kernel.shape(), -bound, bound, &mut r);
        c.bias = Some(Tensor::uniform(&[c.out_channels()], -0.1, 0.1, &mut r));
    }
    net
}

fn slot(net: &mut Network<f64>, mut index: usize) -> &mut f64 {
    for c in net.convs_mut() {
        if index < c.kernel.numel() {
            return &mut c.kernel.data_mut()[index];
        }
        index -= c.kernel.numel();
        let b = c.bias.as_mut().unwrap();
        if index < b.numel() {
            return &mut b.data_mut()[index];
        }
        index -= b.numel();
    }
    panic!("index out of range")
}

fn episode(j: usize, seed: u64) -> (Vec<Tensor<f64>>, LabelMap) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..j)
        .map(|_| Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut r))
        .collect();
    let label = LabelMap::from_vec(8, 8, (0..64).map(|_| r.random_range(0..5)).collect()).unwrap();
    (frames, label)
}

fn replayed_loss(net: &Network<f64>, frames: &[Tensor<f64>], label: &LabelMap) -> f64 {
    let mut s = net.session();
    let mut out = None;
    for f in frames {
        out = Some(s.forward(f).unwrap());
    }
    softmax_ce_loss(&out.unwrap(), std::slice::from_ref(label))
        .unwrap()
        .0
}

#[test]
fn through_time_gradients_match_finite_differences_of_the_whole_episode() {
    for (case, (rho, j)) in [(0.0, 4), (0.25, 5), (0.5, 3)].into_iter().enumerate() {
        let mut net = dense_net(Some(rho), 20 + case as u64);
        let (frames, label) = episode(j, 30 + case as u64);
        let (loss, grads) = sequence_gradients_with(&net, &frames, &label, true).unwrap();
        assert!((loss - replayed_loss(&net, &frames, &label)).abs() < 1e-12);
        assert!(grads.active_rows.iter().all(Option::is_none));
        let analytic: Vec<f64> = grads
            .convs
            .iter()
            .flat_map(|(k, b)| k.data().iter().chain(b.data()).copied().collect::<Vec<_>>())
            .collect();
        let eps = 1e-6;
        for (i, &a) in analytic.iter().enumerate() {
            let base = *slot(&mut net, i);
            *slot(&mut net, i) = base + eps;
            let up = replayed_loss(&net, &frames, &label);
            *slot(&mut net, i) = base - eps;
            let down = replayed_loss(&net, &frames, &label);
            *slot(&mut net, i) = base;
            let numeric = (up - down) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            assert!(
                rel <= 1e-4,
                "rho {rho}, j {j}, parameter {i}: {a:e} vs {numeric:e}"
            );
        }
    }
}

#[test]
fn through_time_matches_truncated_for_single_frames_and_stateless_nets() {
    let (frames, label) = episode(3, 7);
    let net = dense_net(Some(0.25), 3);
    let a = sequence_gradients_with(&net, &frames[..1], &label, true)
        .unwrap()
        .1;
    let b = sequence_gradients(&net, &frames[..1], &label).unwrap().1;
    assert_eq!(a.convs, b.convs);

    let plain = dense_net(None, 3);
    let a = sequence_gradients_with(&plain, &frames, &label, true)
        .unwrap()
        .1;
    let b = sequence_gradients(&plain, &frames, &label).unwrap().1;
    assert_eq!(a.convs, b.convs);
}
