//! Dynamic-programming criteria against exhaustive enumeration.

mod common;

use common::*;
use dbeam_core::align::{asg_loss, asg_normalizer, forward_score, viterbi_align, TargetTokens};

#[test]
fn forward_matches_enumeration() {
    for seed in 0..60 {
        let inst = tiny_instance(seed);
        let y = TargetTokens::new(inst.y.clone()).unwrap();
        let dp = forward_score(&inst.em, &inst.g, &y);
        let brute = exact_forward(&inst.em, &inst.g, &inst.y);
        assert!(
            (dp - brute).abs() < 1e-9,
            "seed {seed}: dp {dp} vs brute {brute}"
        );
    }
}

#[test]
fn asg_normalizer_matches_enumeration() {
    for seed in 0..60 {
        let inst = tiny_instance(seed);
        let dp = asg_normalizer(&inst.em, &inst.g);
        let brute = exact_asg_normalizer(&inst.em, &inst.g);
        assert!(
            (dp - brute).abs() < 1e-9,
            "seed {seed}: dp {dp} vs brute {brute}"
        );
    }
}

#[test]
fn asg_loss_matches_enumeration_and_is_nonnegative() {
    for seed in 0..40 {
        let inst = tiny_instance(seed);
        let y = TargetTokens::new(inst.y.clone()).unwrap();
        let out = asg_loss(&inst.em, &inst.g, &y).unwrap();
        let brute =
            exact_asg_normalizer(&inst.em, &inst.g) - exact_forward(&inst.em, &inst.g, &inst.y);
        assert!((out.loss - brute).abs() < 1e-9, "seed {seed}");
        assert!(out.loss >= -1e-9, "seed {seed}: negative loss {}", out.loss);
    }
}

#[test]
fn viterbi_matches_enumeration_argmax() {
    for seed in 0..40 {
        let inst = tiny_instance(seed);
        let y = TargetTokens::new(inst.y.clone()).unwrap();
        let got = viterbi_align(&inst.em, &inst.g, &y).unwrap();
        let brute = exact_viterbi(&inst.em, &inst.g, &inst.y);
        assert!(
            (got.score - brute).abs() < 1e-9,
            "seed {seed}: viterbi {} vs brute {brute}",
            got.score
        );
        // the reported path really collapses to the target and scores itself
        assert_eq!(collapse(&got.path), inst.y, "seed {seed}");
        assert!(
            (path_score(&inst.em, &inst.g, &got.path) - got.score).abs() < 1e-9,
            "seed {seed}"
        );
        // max ≤ logadd
        let fwd = forward_score(&inst.em, &inst.g, &y);
        assert!(got.score <= fwd + 1e-12, "seed {seed}");
    }
}

#[test]
fn normalizer_dominates_every_target() {
    for seed in 0..40 {
        let inst = tiny_instance(seed);
        let y = TargetTokens::new(inst.y.clone()).unwrap();
        let z = asg_normalizer(&inst.em, &inst.g);
        let f = forward_score(&inst.em, &inst.g, &y);
        assert!(z >= f - 1e-12, "seed {seed}: z {z} < forward {f}");
    }
}
