use docalign_net::gradcheck::{check_block, BLOCKS};

#[test]
fn every_block_matches_finite_differences() {
    for name in BLOCKS {
        let r = check_block(name, 1).unwrap();
        for t in &r.tensors {
            println!("{name:16} {:24} {:>3} {:.2e}", t.name, t.checked, t.rel_err);
        }
        assert!(r.passed, "{name}: {:.3e} >= {:.0e}", r.max_rel_err, r.tolerance);
    }
}
