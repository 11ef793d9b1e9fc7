//! Reverse-mode gradients against central differences at random points.

use coatnet_core::gradcheck::standard_cases;

const POINTS: usize = 20;

type Group = fn(&str) -> bool;

const ELEMENTWISE: Group = |n| ["add", "sub", "mul", "mul-broadcast", "relu", "gelu"].contains(&n);
const REDUCTIONS: Group = |n| n == "matmul" || n.starts_with("softmax") || n == "mean-reshape-pick";
const CONVOLUTIONS: Group =
    |n| n.starts_with("depthwise") || n.starts_with("conv2d") || n.starts_with("pointwise");
const ATTENTION: Group = |n| n.starts_with("attention");
const NORM_POOL_LINEAR: Group =
    |n| n.ends_with("norm") || n.ends_with("pool") || n == "linear" || n == "cross-entropy";
const BLOCKS: Group = |n| n.ends_with("-block");

fn check(group: Group) {
    let cases: Vec<_> = standard_cases().into_iter().filter(|c| group(&c.name)).collect();
    assert!(!cases.is_empty());
    for case in cases {
        let worst = case.worst_error(POINTS).unwrap();
        assert!(worst <= case.tolerance, "{}: relative error {worst:e} > {:e}", case.name, case.tolerance);
    }
}

#[test]
fn elementwise_and_activations() {
    check(ELEMENTWISE);
}

#[test]
fn matmul_softmax_reductions() {
    check(REDUCTIONS);
}

#[test]
fn convolutions() {
    check(CONVOLUTIONS);
}

#[test]
fn attention() {
    check(ATTENTION);
}

#[test]
fn normalization_pooling_linear_loss() {
    check(NORM_POOL_LINEAR);
}

#[test]
fn blocks() {
    check(BLOCKS);
}

#[test]
fn groups_partition_the_cases() {
    let groups = [ELEMENTWISE, REDUCTIONS, CONVOLUTIONS, ATTENTION, NORM_POOL_LINEAR, BLOCKS];
    for case in standard_cases() {
        let hits = groups.iter().filter(|g| g(&case.name)).count();
        assert_eq!(hits, 1, "{} is in {hits} groups", case.name);
    }
}
