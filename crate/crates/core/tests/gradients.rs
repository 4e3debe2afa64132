mod common;

use common::grad_errors;

#[test]
fn every_op_passes_finite_differences() {
    for seed in 0..10 {
        for (name, err) in grad_errors(seed) {
            eprintln!("{seed} {name} {err:.2e}");
            assert!(err < 1e-3, "{name} at seed {seed}: {err}");
        }
    }
}
