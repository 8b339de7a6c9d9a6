use kalchas::verify::{gradient_suite, GRAD_TOLERANCE};

#[test]
fn all_layers_and_full_chain_over_twenty_seeds() {
    let reports = gradient_suite(0..20u64).unwrap();
    let mut worst = 0.0f64;
    for r in &reports {
        worst = worst.max(r.max_error);
        assert!(r.passed, "{r:?}");
    }
    let skipped: usize = reports.iter().map(|r| r.skipped).sum();
    let checked: usize = reports.iter().map(|r| r.checked).sum();
    println!("worst relative error {worst:.2e} over {checked} coordinates ({skipped} at kinks)");
    assert!(worst <= GRAD_TOLERANCE);
}
