use backeisnn::network::{ConvPadding, LayerSpec, NetworkSpec, RolloutRecord};
use backeisnn::reference::{self, ReferenceRecord};
use backeisnn::tensor::PoolKind;
use backeisnn::{Network, ResetMode, SpikeBatch, Switches, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SWITCHES: [Switches; 4] = [
    Switches::BASELINE,
    Switches::SFBM,
    Switches::BEIM,
    Switches::BOTH,
];

fn random_trial(
    rng: &mut ChaCha8Rng,
    switches: Switches,
    reset: ResetMode,
) -> (Network<f64>, SpikeBatch<f64>) {
    let cin = rng.random_range(1..=2);
    let h = 2 * rng.random_range(2..=4);
    let w = 2 * rng.random_range(2..=4);
    let kernel = if rng.random_bool(0.5) { 1 } else { 3 };
    let padding = if rng.random_bool(0.5) {
        ConvPadding::Same
    } else {
        ConvPadding::Valid
    };
    let (oh, ow) = match padding {
        ConvPadding::Same => (h, w),
        _ => (h - kernel + 1, w - kernel + 1),
    };
    let mut layers = vec![LayerSpec::Conv {
        channels: rng.random_range(1..=4),
        kernel,
    }];
    if oh % 2 == 0 && ow % 2 == 0 && rng.random_bool(0.5) {
        layers.push(LayerSpec::Pool2);
    }
    let classes = rng.random_range(2..=5);
    layers.push(LayerSpec::Fc { units: classes });

    let mut spec = NetworkSpec::new("1", [cin, h, w], classes, rng.random_range(1..=6)).unwrap();
    spec.layers = layers;
    spec.switches = switches;
    spec.gate_kernel = if rng.random_bool(0.5) { 1 } else { 3 };
    spec.conv_padding = padding;
    spec.pooling = if rng.random_bool(0.5) {
        PoolKind::Avg
    } else {
        PoolKind::Max
    };
    spec.lif.reset = reset;

    let mut net = Network::new(spec, rng.random()).unwrap();
    let gain = rng.random_range(1.0..4.0);
    for p in net.params_mut().iter_mut() {
        p.value = p.value.scale(gain);
    }

    let t = net.spec().time_steps;
    let b = rng.random_range(1..=3);
    let n = t * b * cin * h * w;
    let bernoulli = rng.random_bool(0.5);
    let data = (0..n)
        .map(|_| {
            if bernoulli {
                f64::from(rng.random_bool(0.4) as u8)
            } else {
                rng.random_range(0.0..1.5)
            }
        })
        .collect();
    let input = SpikeBatch::new(Tensor::from_vec([t, b, cin, h, w], data).unwrap()).unwrap();
    (net, input)
}

fn assert_bit_equal(engine: &RolloutRecord<f64>, oracle: &ReferenceRecord, trial: usize) {
    assert_eq!(engine.layers.len(), oracle.layers.len());
    for (e, o) in engine.layers.iter().zip(&oracle.layers) {
        assert_eq!(e.layer, o.layer);
        let flat = |x: &Vec<Vec<Vec<f64>>>| -> Vec<u64> {
            x.iter().flatten().flatten().map(|v| v.to_bits()).collect()
        };
        let bits = |t: &Tensor<f64>| -> Vec<u64> { t.data().iter().map(|v| v.to_bits()).collect() };
        assert_eq!(
            bits(&e.v),
            flat(&o.v),
            "trial {trial}, layer {} membrane",
            e.layer
        );
        assert_eq!(
            bits(&e.spikes),
            flat(&o.spikes),
            "trial {trial}, layer {} spikes",
            e.layer
        );
    }
    let out: Vec<f64> = oracle.output.iter().flatten().flatten().copied().collect();
    assert_eq!(engine.output.data(), &out[..], "trial {trial} output");
    let rate: Vec<u64> = oracle
        .mean_rate
        .iter()
        .flatten()
        .map(|v| v.to_bits())
        .collect();
    let engine_rate: Vec<u64> = engine
        .mean_rate
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect();
    assert_eq!(engine_rate, rate, "trial {trial} mean rate");
}

#[test]
fn rollout_matches_scalar_reference_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut spikes = 0usize;
    let mut negative = 0usize;
    for trial in 0..100 {
        let switches = SWITCHES[trial % 4];
        let reset = if (trial / 4) % 2 == 0 {
            ResetMode::Magnitude
        } else {
            ResetMode::Literal
        };
        let (net, input) = random_trial(&mut rng, switches, reset);
        let engine = net.simulate(&input).unwrap();
        let oracle = reference::simulate(net.spec(), net.params(), input.tensor());
        assert_bit_equal(&engine, &oracle, trial);
        for l in &engine.layers {
            spikes += l.spikes.data().iter().filter(|&&s| s != 0.0).count();
            negative += l.spikes.data().iter().filter(|&&s| s < 0.0).count();
        }
    }
    assert!(
        spikes > 1000,
        "trials should exercise firing, saw {spikes} spikes"
    );
    assert!(
        negative > 100,
        "trials should exercise inhibitory spikes, saw {negative}"
    );
}

#[test]
fn relaxed_rollout_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..20 {
        let (mut net, input) = random_trial(&mut rng, SWITCHES[trial % 4], ResetMode::Magnitude);
        let mut spec = net.spec().clone();
        spec.lif.spike = spec.lif.spike.relaxed();
        let params = net.params().clone();
        net = Network::new(spec, 0).unwrap();
        net.set_params(params).unwrap();
        let engine = net.simulate(&input).unwrap();
        let oracle = reference::simulate(net.spec(), net.params(), input.tensor());
        assert_bit_equal(&engine, &oracle, trial);
    }
}
