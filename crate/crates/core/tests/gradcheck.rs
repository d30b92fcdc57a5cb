use dds_core::gradcheck::{
    composition_check, mlp_check, op_suite, relative_error, run_suite, SuiteOptions, TOLERANCE,
};
use dds_core::tensor::OP_NAMES;

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
}

#[test]
fn clean_tape_passes_every_case() {
    let report = run_suite(
        0,
        SuiteOptions {
            seeds: 3,
            param_probes: 32,
        },
        None,
    )
    .unwrap();
    for case in &report.cases {
        assert!(case.passed(TOLERANCE), "{case:?}");
        assert!(case.checked > 0, "{case:?}");
    }
    assert!(report.max_rel_err() <= TOLERANCE);
}

#[test]
fn every_op_appears_in_the_suite() {
    let names: Vec<String> = op_suite(1, None)
        .unwrap()
        .cases
        .into_iter()
        .map(|c| c.name)
        .collect();
    for op in ["add", "sub", "mul", "div", "conv2d"] {
        assert!(
            names.iter().filter(|n| n.starts_with(op)).count() >= 2,
            "{op}: {names:?}"
        );
    }
    for op in OP_NAMES {
        assert!(names.iter().any(|n| n.starts_with(op)), "{op} not covered");
    }
}

#[test]
fn corrupted_rules_are_caught() {
    for op in OP_NAMES {
        let mut report = op_suite(2, Some(op)).unwrap();
        report.cases.push(mlp_check(2, Some(op)).unwrap());
        assert!(report.max_rel_err() > 0.1, "{op}: {}", report.max_rel_err());
    }
}

#[test]
fn detached_composition_has_zero_masked_gradients() {
    for seed in 0..5 {
        let report = composition_check(seed, None, 16).unwrap();
        let detached = report
            .cases
            .iter()
            .find(|c| c.name == "composition/detached")
            .unwrap();
        assert_eq!(detached.zero_grad_violations, 0);
        assert!(detached.checked > 0);
    }
}
