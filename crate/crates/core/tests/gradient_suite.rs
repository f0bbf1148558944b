use saliency_core::autodiff::DIFFERENTIABLE_OPS;
use saliency_core::verify::{run_suite, Kind, SuiteOptions};

#[test]
fn suite_passes_for_several_seeds() {
    for seed in [0, 1, 2] {
        let report = run_suite(&SuiteOptions {
            seed,
            corrupt: None,
            skip_model: false,
        })
        .unwrap();
        assert!(report.uncovered_ops.is_empty());
        assert!(report.passed(), "seed {seed}\n{}", report.table());
        let ops = report.results.iter().filter(|r| r.kind == Kind::Op).count();
        assert!(ops >= DIFFERENTIABLE_OPS.len());
        assert!(report.results.iter().any(|r| r.kind == Kind::Model));
    }
}

#[test]
fn corrupted_backward_rules_are_caught() {
    for op in ["conv2d", "window_attention", "upsample_bilinear", "bce_with_logits"] {
        let report = run_suite(&SuiteOptions {
            seed: 0,
            corrupt: Some(op.to_string()),
            skip_model: true,
        })
        .unwrap();
        assert!(!report.passed(), "{op} corruption went unnoticed");
        let failed: Vec<_> = report.results.iter().filter(|r| !r.passed()).map(|r| r.component.as_str()).collect();
        assert!(failed.contains(&op), "{op}: {failed:?}");
    }
}
