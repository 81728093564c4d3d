mod common;

use flexgate::model::GateMode;

#[test]
fn gated_gradients_match_finite_differences() {
    for mode in [GateMode::PerPath, GateMode::PerNeuron] {
        for (k, (name, reg)) in common::reg_cases().into_iter().enumerate() {
            let e = common::gated_gradient_error(mode, &reg, 100, 1000 + k as u64);
            assert!(e < 1e-5, "{mode:?} {name}: relative error {e:e}");
        }
    }
}

#[test]
fn two_layer_gradients_match_finite_differences() {
    for (k, (name, reg)) in common::reg_cases().into_iter().enumerate() {
        let e = common::deep_gradient_error(&reg, 100, 2000 + k as u64);
        assert!(e < 1e-5, "{name}: relative error {e:e}");
    }
}
