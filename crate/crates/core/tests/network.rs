use backeisnn::network::{
    mse_rate_loss, predict, ActivityStats, DropoutPolicy, LayerSpec, NetworkError, NetworkSpec,
    RateTarget,
};
use backeisnn::{Network, SpikeBatch, Switches, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mnist_like(t: usize) -> NetworkSpec {
    NetworkSpec::new("4C3-P2-8C3-P2-16", [1, 14, 14], 10, t).unwrap()
}

fn random_input(t: usize, b: usize, shape: [usize; 3], seed: u64) -> SpikeBatch<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = t * b * shape.iter().product::<usize>();
    let data = (0..n)
        .map(|_| f64::from(rng.random_bool(0.3) as u8))
        .collect();
    SpikeBatch::new(Tensor::from_vec([t, b, shape[0], shape[1], shape[2]], data).unwrap()).unwrap()
}

#[test]
fn parameter_names_follow_layer_indices() {
    let net: Network<f32> = Network::new(mnist_like(2), 0).unwrap();
    let names: Vec<&str> = net.params().iter().map(|p| p.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "layer0.weight",
            "layer0.bias",
            "layer0.sfb.weight",
            "layer0.sfb.bias",
            "layer0.ei.weight",
            "layer0.ei.bias",
            "layer2.weight",
            "layer2.bias",
            "layer2.sfb.weight",
            "layer2.sfb.bias",
            "layer2.ei.weight",
            "layer2.ei.bias",
            "layer4.weight",
            "layer4.bias",
            "layer5.weight",
            "layer5.bias",
        ]
    );
    assert_eq!(
        net.params().get("layer2.weight").unwrap().shape(),
        &[8, 4, 3, 3]
    );
    assert_eq!(
        net.params().get("layer4.weight").unwrap().shape(),
        &[16, 8 * 2 * 2]
    );
    assert!(net
        .params()
        .get("layer0.sfb.bias")
        .unwrap()
        .data()
        .iter()
        .all(|&b| b == 0.0));
    let bound = 1.0 / 9f32.sqrt();
    assert!(net
        .params()
        .get("layer0.weight")
        .unwrap()
        .data()
        .iter()
        .all(|w| w.abs() <= bound));
}

#[test]
fn quiescent_network_stays_silent() {
    let mut net: Network<f64> = Network::new(mnist_like(4), 1).unwrap();
    net.zero_biases();
    let input = SpikeBatch::new(Tensor::zeros([4, 3, 1, 14, 14])).unwrap();
    let rec = net.simulate(&input).unwrap();
    assert!(rec.mean_rate.data().iter().all(|&r| r == 0.0));
    for l in &rec.layers {
        assert!(
            l.spikes.data().iter().all(|&s| s == 0.0),
            "layer {}",
            l.layer
        );
    }
}

#[test]
fn single_step_identity_layer_fires_on_driven_class() {
    let mut spec = NetworkSpec::new("3", [3, 1, 1], 3, 1).unwrap();
    spec.layers = vec![LayerSpec::Fc { units: 3 }];
    let mut net: Network<f64> = Network::new(spec, 0).unwrap();
    net.zero_biases();
    let eye = Tensor::from_vec([3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    *net.params_mut().get_mut("layer0.weight").unwrap() = eye;
    let input =
        SpikeBatch::new(Tensor::from_vec([1, 1, 3, 1, 1], vec![0.0, 0.8, 0.2]).unwrap()).unwrap();
    let rec = net.simulate(&input).unwrap();
    assert_eq!(rec.mean_rate.data(), &[0.0, 1.0, 0.0]);
    assert_eq!(predict(&rec.mean_rate), vec![1]);
}

#[test]
fn rates_are_binary_without_the_ei_gate() {
    for switches in [Switches::BASELINE, Switches::SFBM] {
        let mut spec = mnist_like(5);
        spec.switches = switches;
        let net: Network<f64> = Network::new(spec, 3).unwrap();
        let rec = net.simulate(&random_input(5, 4, [1, 14, 14], 9)).unwrap();
        assert!(rec
            .mean_rate
            .data()
            .iter()
            .all(|&r| (0.0..=1.0).contains(&r)));
        for l in &rec.layers {
            assert!(l.spikes.data().iter().all(|&s| s == 0.0 || s == 1.0));
        }
    }
}

#[test]
fn rollout_is_deterministic() {
    let input = SpikeBatch::new(random_input(4, 3, [1, 14, 14], 5).tensor().cast::<f32>()).unwrap();
    let a: Network<f32> = Network::new(mnist_like(4), 11).unwrap();
    let b: Network<f32> = Network::new(mnist_like(4), 11).unwrap();
    assert_eq!(a.simulate(&input).unwrap(), b.simulate(&input).unwrap());
    let c: Network<f32> = Network::new(mnist_like(4), 12).unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn wrong_input_shape_is_rejected() {
    let net: Network<f64> = Network::new(mnist_like(2), 0).unwrap();
    let err = net
        .simulate(&random_input(3, 1, [1, 14, 14], 0))
        .unwrap_err();
    assert!(matches!(err, NetworkError::Input(_)), "{err}");
    let err = net
        .simulate(&random_input(2, 1, [1, 12, 14], 0))
        .unwrap_err();
    assert!(matches!(err, NetworkError::Input(_)), "{err}");
}

#[test]
fn odd_pool_extent_names_the_layer() {
    let spec = NetworkSpec::new("4C4-P2", [1, 8, 8], 10, 2).unwrap();
    let err = Network::<f64>::new(spec, 0).unwrap_err();
    assert!(err.to_string().contains("layer 1"), "{err}");
}

/// Hidden layer of 16 units driven to fire every step, dropout, then an
/// identity output layer: output spikes mark exactly the kept units.
fn kept_units(policy: DropoutPolicy, seed: u64) -> Vec<Vec<f64>> {
    let mut spec = NetworkSpec::new("16-16", [1, 2, 2], 16, 6)
        .unwrap()
        .with_dropout(0.5)
        .unwrap();
    assert_eq!(spec.layers[1], LayerSpec::Dropout { p: 0.5 });
    spec.dropout_policy = policy;
    let mut net: Network<f64> = Network::new(spec, 0).unwrap();
    net.zero_biases();
    net.params_mut()
        .get_mut("layer0.weight")
        .unwrap()
        .data_mut()
        .fill(1.0);
    let out = net
        .params_mut()
        .get_mut("layer1.weight")
        .unwrap()
        .data_mut();
    out.fill(0.0);
    for i in 0..16 {
        out[i * 16 + i] = 1.0;
    }
    let input = SpikeBatch::new(Tensor::full([6, 2, 1, 2, 2], 1.0)).unwrap();
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = net
        .rollout(&mut tape, &input, false, Some(&mut rng))
        .unwrap();
    r.outputs
        .iter()
        .map(|&o| tape.value(o).data().to_vec())
        .collect()
}

#[test]
fn dropout_mask_is_fixed_across_the_window() {
    let kept = kept_units(DropoutPolicy::PerWindow, 42);
    assert!(kept.windows(2).all(|w| w[0] == w[1]));
    let dropped = kept[0].iter().filter(|&&x| x == 0.0).count();
    assert!(dropped > 0 && dropped < 32, "{dropped}");
    assert_eq!(kept, kept_units(DropoutPolicy::PerWindow, 42));

    let per_step = kept_units(DropoutPolicy::PerStep, 42);
    assert!(per_step.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn eval_rollout_ignores_dropout() {
    let spec = NetworkSpec::new("8C3-P2-16", [1, 6, 6], 3, 3)
        .unwrap()
        .with_dropout(0.9)
        .unwrap();
    let net: Network<f64> = Network::new(spec, 0).unwrap();
    let input = random_input(3, 2, [1, 6, 6], 1);
    let mut plain = net.spec().clone();
    plain
        .layers
        .retain(|l| !matches!(l, LayerSpec::Dropout { .. }));
    let mut undropped: Network<f64> = Network::new(plain, 0).unwrap();
    undropped.set_params(net.params().clone()).unwrap();
    assert_eq!(
        net.simulate(&input).unwrap().mean_rate,
        undropped.simulate(&input).unwrap().mean_rate
    );
}

#[test]
fn loss_backward_reaches_every_parameter() {
    let net: Network<f64> = Network::new(mnist_like(4), 2).unwrap();
    let input = random_input(4, 2, [1, 14, 14], 3);
    let mut tape = Tape::new();
    let r = net.rollout(&mut tape, &input, true, None).unwrap();
    let loss = mse_rate_loss(
        &mut tape,
        r.mean_rate,
        &RateTarget::one_hot(&[1, 7], 10).unwrap(),
    )
    .unwrap();
    let grads = tape.backward(loss).unwrap();
    for (id, p) in net.params().iter().enumerate() {
        let g = grads
            .param(id)
            .unwrap_or_else(|| panic!("no gradient for {}", p.name));
        assert_eq!(g.shape(), p.value.shape());
    }
    let stats = ActivityStats::from_rollout(&tape, &r);
    assert_eq!(stats.layers.len(), 4);
    assert!(stats.layers[0].sfb_count > 0);
    assert_eq!(stats.layers[3].sfb_count, 0);
}
