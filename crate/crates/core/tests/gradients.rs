//! Reverse-mode gradients against central finite differences.

mod common;

use common::gradcheck::{self, TOL};

fn assert_small(name: &str, worst: f64) {
    assert!(worst < TOL, "{name}: worst relative error {worst:e} over {} seeds", gradcheck::SEEDS);
}

#[test]
fn conv1d_dilated() {
    assert_small("conv1d_dilated", gradcheck::conv1d_dilated());
}

#[test]
fn conv2d() {
    assert_small("conv2d", gradcheck::conv2d());
}

#[test]
fn matmul() {
    assert_small("matmul", gradcheck::matmul());
}

#[test]
fn sigmoid() {
    assert_small("sigmoid", gradcheck::sigmoid());
}

#[test]
fn leaky_relu() {
    assert_small("leaky_relu", gradcheck::leaky_relu());
}

#[test]
fn mean() {
    assert_small("mean", gradcheck::mean());
}

#[test]
fn concat_and_narrow() {
    assert_small("concat_and_narrow", gradcheck::concat_and_narrow());
}

#[test]
fn upsample() {
    assert_small("upsample", gradcheck::upsample());
}

#[test]
fn warp_bilinear() {
    assert_small("warp_bilinear", gradcheck::warp_bilinear());
}

#[test]
fn charbonnier() {
    assert_small("charbonnier", gradcheck::charbonnier());
}

#[test]
fn cost_volume_and_normalization() {
    assert_small("correlation", gradcheck::cost_volume_and_normalization());
}

#[test]
fn softmax() {
    assert_small("softmax", gradcheck::softmax());
}

#[test]
fn full_representation() {
    assert_small("representation", gradcheck::full_representation());
}

#[test]
fn full_loss() {
    assert_small("loss", gradcheck::full_loss());
}
