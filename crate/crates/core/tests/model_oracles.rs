mod common;

use common::{gradient_check_archs, max_gradient_error, random_batch, single_layer, FD_TOLERANCE};
use esmfl_core::{Batch, Model, ModelArch, ParameterSet, Tensor};

fn hand_net() -> (Model, ParameterSet) {
    let model = Model::new(ModelArch::mlp(&[2, 2, 2])).unwrap();
    let params = ParameterSet::new(vec![
        single_layer("fc1", 2, 2, vec![1.0, -1.0, 0.5, 2.0], vec![0.0, 0.1]),
        single_layer("fc2", 2, 2, vec![1.0, 0.0, -1.0, 1.0], vec![0.2, 0.0]),
    ])
    .unwrap();
    (model, params)
}

#[test]
fn hand_computed_loss_of_two_layer_net() {
    let (model, params) = hand_net();
    let batch = Batch::new(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), vec![1]).unwrap();
    let (loss, logits) = model.forward_loss(&params, &batch).unwrap();
    // hidden = relu([-1, 4.6]) = [0, 4.6]; logits = [0.2, 4.6]
    assert!((logits.data()[0] - 0.2).abs() < 1e-12);
    assert!((logits.data()[1] - 4.6).abs() < 1e-12);
    let expected = (1.0 + (-4.4f64).exp()).ln();
    assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
}

#[test]
fn hand_computed_gradient_of_two_layer_net() {
    let (model, params) = hand_net();
    let batch = Batch::new(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), vec![1]).unwrap();
    let grad = model.backward(&params, &batch).unwrap();
    let p0 = 1.0 / (1.0 + 4.4f64.exp());
    let dz = [p0, -p0];
    let fc2 = grad.layer("fc2").unwrap();
    assert!((fc2.bias.data()[0] - dz[0]).abs() < 1e-12);
    assert!((fc2.bias.data()[1] - dz[1]).abs() < 1e-12);
    // dW2 = dz * hidden^T with hidden = [0, 4.6]
    let expect_w2 = [0.0, dz[0] * 4.6, 0.0, dz[1] * 4.6];
    for (g, e) in fc2.weight.data().iter().zip(expect_w2) {
        assert!((g - e).abs() < 1e-12);
    }
    // Only the active hidden unit passes gradient: dh2 = W2[:,1] . dz
    let dh2 = 0.0 * dz[0] + 1.0 * dz[1];
    let fc1 = grad.layer("fc1").unwrap();
    let expect_w1 = [0.0, 0.0, dh2 * 1.0, dh2 * 2.0];
    for (g, e) in fc1.weight.data().iter().zip(expect_w1) {
        assert!((g - e).abs() < 1e-12);
    }
    assert_eq!(fc1.bias.data()[0], 0.0);
    assert!((fc1.bias.data()[1] - dh2).abs() < 1e-12);
}

#[test]
fn output_bias_gradient_is_mean_softmax_minus_onehot() {
    let arch = ModelArch::mlp(&[6, 5, 4]);
    let model = Model::new(arch.clone()).unwrap();
    let params = model.init_params(3);
    let batch = random_batch(&arch, 7, 9);
    let (_, logits) = model.forward_loss(&params, &batch).unwrap();
    let grad = model.backward(&params, &batch).unwrap();
    let mut expected = [0.0; 4];
    for (row, &label) in logits.data().chunks(4).zip(batch.labels()) {
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for c in 0..4 {
            let p = (row[c] - max).exp() / z;
            expected[c] += (p - if c == label { 1.0 } else { 0.0 }) / 7.0;
        }
    }
    for (g, e) in grad.layer("fc2").unwrap().bias.data().iter().zip(expected) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
}

#[test]
fn uniform_logits_give_log_classes_loss() {
    let arch = ModelArch::mlp(&[3, 5]);
    let model = Model::new(arch.clone()).unwrap();
    let params = model.init_params(0).zeros_like();
    let batch = random_batch(&arch, 4, 1);
    let (loss, _) = model.forward_loss(&params, &batch).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn finite_difference_check_per_layer_type() {
    for (name, arch) in gradient_check_archs() {
        for seed in [1, 2, 3] {
            let err = max_gradient_error(arch.clone(), seed, None);
            assert!(err < FD_TOLERANCE, "{name} seed {seed}: max relative error {err:e}");
        }
    }
}

#[test]
fn finite_difference_check_lenet5_sample() {
    let err = max_gradient_error(ModelArch::lenet5(), 7, Some(60));
    assert!(err < FD_TOLERANCE, "lenet5: max relative error {err:e}");
}

#[test]
fn finite_difference_check_small_convnet_sample() {
    let err = max_gradient_error(ModelArch::small_convnet(3, 32, 10), 11, Some(60));
    assert!(err < FD_TOLERANCE, "small-convnet: max relative error {err:e}");
}

#[test]
fn lenet5_has_expected_parameter_count() {
    let model = Model::new(ModelArch::lenet5()).unwrap();
    // 20*1*5*5+20 + 50*20*5*5+50 + 500*800+500 + 10*500+10
    assert_eq!(model.num_params(), 520 + 25_050 + 400_500 + 5_010);
    assert_eq!(model.init_params(0).num_weights(), 430_500);
}
