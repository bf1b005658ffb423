use medvsr_core::gradcheck::{layer_suite, CheckOptions, SUITE};

#[test]
fn layer_gradients_match_central_differences_across_seeds() {
    for seed in 0..4 {
        let opts = CheckOptions { seed, ..CheckOptions::default() };
        let reports = layer_suite(seed, opts).unwrap();
        assert_eq!(reports.len(), SUITE.len());
        for (name, r) in reports {
            assert!(r.checked >= 8, "{name}: only {} entries checked", r.checked);
            assert!(r.passed(), "seed {seed}, {name}: worst {:.3e}, {:?}", r.worst, r.failures);
        }
    }
}

#[test]
fn charbonnier_gradient_is_tight() {
    // A small step keeps truncation error below the tolerance where |d| is close to ε.
    let opts = CheckOptions { step: 1e-7, rel: 1e-6, per_tensor: usize::MAX, ..CheckOptions::default() };
    let reports = layer_suite(9, opts).unwrap();
    let (_, r) = reports.iter().find(|(n, _)| *n == "charbonnier").unwrap();
    assert!(r.passed(), "worst {:.3e}", r.worst);
}
