//! Analytic gradients against central differences in f64.

mod common;

use common::grads::{self, CheckFn, CASES};

fn run(name: &str, f: CheckFn) {
    for case in 0..CASES {
        let report = f(case);
        report.assert_ok(&format!("{name} case {case}"));
    }
}

#[test]
fn swiglu() {
    run("swiglu", grads::check_swiglu);
}

#[test]
fn attention_full() {
    run("attention_full", grads::check_attention_full);
}

#[test]
fn attention_swa() {
    run("attention_swa", grads::check_attention_swa);
}

#[test]
fn rope() {
    run("rope", grads::check_rope);
}

#[test]
fn block() {
    run("block", grads::check_block);
}

#[test]
fn encode() {
    run("encode", grads::check_encode);
}

#[test]
fn decode() {
    run("decode", grads::check_decode);
}

#[test]
fn charbonnier() {
    run("charbonnier", grads::check_charbonnier);
}

#[test]
fn ssim_loss() {
    run("ssim_loss", grads::check_ssim);
}

#[test]
fn perceptual_tile_loss() {
    run("perceptual_tile_loss", grads::check_perceptual);
}

#[test]
fn velocity() {
    run("velocity", grads::check_velocity);
}

/// `y = x^2` with a backward that is off by 1%; the checker must notice.
struct SlightlyWrongSquare;

impl vitok::autodiff::Backward<f64> for SlightlyWrongSquare {
    fn name(&self) -> &'static str {
        "slightly_wrong_square"
    }

    fn backward(&self, inputs: &[&vitok::Tensor<f64>], _output: &vitok::Tensor<f64>, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let g = inputs[0].data().iter().zip(grad).map(|(x, g)| 2.02 * x * g).collect();
        vec![Some(g)]
    }
}

#[test]
fn checker_rejects_wrong_backward() {
    let x = common::randn(&[3, 4], 5, 1.0);
    let report = common::grad_check(&vitok::params::ParameterStore::new(), &[x], 0, |tape, _, v| {
        let value = tape.value(v[0]).map(|a| a * a);
        let y = tape.custom(vec![v[0]], value, || Box::new(SlightlyWrongSquare));
        common::project(tape, y, 1)
    });
    let rel = report.max_rel();
    assert!(rel > 1e-3, "1% error went unnoticed: {rel:e}");
}
