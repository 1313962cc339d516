#[test]
fn probe_worst_component() {
    // which input/component is marginal in the total_loss FD check
    use gvt::numerics::gradcheck::{FdOptions};
    for seed in [4242u64, 11, 99, 1234] {
        let (report, names) = gvt::gradsuite::total_loss_check_with_seed(seed, &FdOptions { tol: 1e-3, ..FdOptions::default() });
        let w = report.worst.as_ref().unwrap();
        println!(
            "seed {seed}: worst rel {:.3e} input {} ({}) comp {} analytic {:.6e} numeric {:.6e} | fails {}",
            w.rel_err, w.input, names[w.input], w.component, w.analytic, w.numeric, report.failures.len()
        );
    }
}
