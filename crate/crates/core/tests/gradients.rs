#[path = "support/gradient_cases.rs"]
mod gradient_cases;

use std::time::Instant;

use gradient_cases::{primitive_names, run_suite, TOLERANCE};

#[test]
fn every_primitive_matches_finite_differences() {
    let start = Instant::now();
    let results = run_suite(0..10).unwrap();
    assert_eq!(results.len(), 10 * primitive_names().len());
    for r in &results {
        assert!(r.report.checked > 0, "{} checked nothing", r.name);
        assert!(
            r.report.max_rel_error < TOLERANCE,
            "{} seed {}: relative error {:.3e}",
            r.name,
            r.seed,
            r.report.max_rel_error
        );
    }
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn suite_covers_the_primitives() {
    let names = primitive_names();
    for op in [
        "matmul", "add_broadcast", "mul_broadcast", "scale", "conv1d", "embedding", "layer_norm", "softmax_last", "relu",
        "cross_entropy_sum", "reshape", "permute", "transpose", "masked_fill", "dropout", "sum",
    ] {
        assert!(names.contains(&op), "{op}");
    }
}

#[test]
fn checker_detects_a_wrong_gradient() {
    use cascade_core::tensor::{grad_check, Tensor};
    // detach-style bug: the second factor is treated as a constant
    let x = Tensor::new(vec![3], vec![0.3, -0.8, 1.1]).unwrap();
    let report = grad_check(
        &[x],
        |g, v| {
            let c = g.constant(g.value(v[0]).clone());
            g.mul(v[0], c)
        },
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error > 0.1);
}
