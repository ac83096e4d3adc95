use backeisnn::network::ParamStore;
use backeisnn::optimizer::{AdamConfig, AdamState, LrSchedule, OptimizerError};
use backeisnn::Tensor;

fn vec3(x: [f64; 3]) -> Tensor<f64> {
    Tensor::from_vec([3], x.to_vec()).unwrap()
}

fn assert_close(actual: &[f64], expected: [f64; 3], what: &str) {
    for (a, e) in actual.iter().zip(expected) {
        assert!((a - e).abs() <= 1e-12, "{what}: {a} vs {e}");
    }
}

/// Expected values computed with 60-digit decimal arithmetic.
#[test]
fn three_adam_steps_match_high_precision_trace() {
    let mut params = ParamStore::default();
    params.push("w", vec3([0.5, -1.25, 2.0]));
    let mut adam = AdamState::new(AdamConfig::default(), &params).unwrap();
    let grads = [[0.1, -0.2, 0.3], [-0.05, 0.4, 0.0], [0.2, 0.2, -1.0]];
    let expected_p = [
        [
            4.990_000_001e-1,
            -1.249_000_000_05,
            1.999_000_000_033_333_2,
        ],
        [
            4.987_336_630_940_339e-1,
            -1.249_366_103_565_460_4,
            1.998_329_941_810_791_6,
        ],
        [
            4.980_755_515_435_138e-1,
            -1.249_885_344_363_316_7,
            1.998_793_167_483_399,
        ],
    ];
    let expected_m = [
        [1e-2, -2e-2, 3e-2],
        [4e-3, 2.2e-2, 2.7e-2],
        [2.36e-2, 3.98e-2, -7.57e-2],
    ];
    let expected_v = [
        [1e-5, 4e-5, 9e-5],
        [1.249e-5, 1.9996e-4, 8.991e-5],
        [5.247751e-5, 2.3976004e-4, 1.08982009e-3],
    ];
    for (step, g) in grads.iter().enumerate() {
        adam.step(&mut params, &[Some(vec3(*g))], 0.001).unwrap();
        assert_eq!(adam.t, step as u64 + 1);
        assert_close(params.get("w").unwrap().data(), expected_p[step], "param");
        assert_close(adam.m[0].data(), expected_m[step], "first moment");
        assert_close(adam.v[0].data(), expected_v[step], "second moment");
    }
}

#[test]
fn schedule_table_is_exact() {
    let s = LrSchedule::default();
    for (epoch, lr) in [
        (0, 0.001),
        (39, 0.001),
        (40, 0.0001),
        (79, 0.0001),
        (80, 0.00001),
    ] {
        assert_eq!(s.lr(epoch), lr, "epoch {epoch}");
    }
}

#[test]
fn non_finite_gradient_names_the_parameter_and_changes_nothing() {
    let mut params = ParamStore::default();
    params.push("layer0.weight", vec3([1.0, 2.0, 3.0]));
    params.push("layer0.bias", vec3([0.0; 3]));
    let before = params.clone();
    let mut adam = AdamState::new(AdamConfig::default(), &params).unwrap();
    let err = adam
        .step(
            &mut params,
            &[Some(vec3([0.1; 3])), Some(vec3([0.0, f64::NAN, 0.0]))],
            0.001,
        )
        .unwrap_err();
    assert_eq!(
        err,
        OptimizerError::NonFiniteGradient {
            name: "layer0.bias".into(),
            index: 1
        }
    );
    assert_eq!(params, before);
    assert_eq!(adam.t, 0);
}

#[test]
fn missing_gradient_leaves_parameter_and_moments_alone() {
    let mut params = ParamStore::default();
    params.push("a", vec3([1.0; 3]));
    params.push("b", vec3([1.0; 3]));
    let mut adam = AdamState::new(AdamConfig::default(), &params).unwrap();
    adam.step(&mut params, &[Some(vec3([1.0; 3])), None], 0.01)
        .unwrap();
    assert_eq!(params.get("b").unwrap().data(), &[1.0; 3]);
    assert!(adam.m[1].data().iter().all(|&x| x == 0.0));
    assert!(params.get("a").unwrap().data().iter().all(|&x| x < 1.0));
}

#[test]
fn clipping_bounds_the_joint_norm() {
    let mut params = ParamStore::default();
    params.push("a", vec3([0.0; 3]));
    let cfg = AdamConfig {
        clip_norm: Some(1.0),
        ..Default::default()
    };
    let mut adam = AdamState::new(cfg, &params).unwrap();
    adam.step(&mut params, &[Some(vec3([30.0, 40.0, 0.0]))], 0.1)
        .unwrap();
    assert_close(
        adam.m[0].data(),
        [0.1 * 0.6, 0.1 * 0.8, 0.0],
        "clipped moment",
    );
}
