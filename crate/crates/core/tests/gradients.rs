use densedet::gradcheck::suite::{cases, find, total_loss_check, Tier};
use std::time::Instant;

fn run_tier(tier: Tier) {
    let mut failures = Vec::new();
    for case in cases().into_iter().filter(|c| c.tier == tier) {
        let t0 = Instant::now();
        let rep = case.run().unwrap_or_else(|e| panic!("{}: {e}", case.name));
        println!(
            "{:<22} rel {:.2e} coords {:>4} kinks {:>2} {:?}",
            case.name, rep.max_rel_err, rep.coords_checked, rep.kinks_skipped, t0.elapsed()
        );
        // A handful of stencils may straddle a ReLU; most must be scored.
        let skipped_ok = rep.kinks_skipped * 4 <= rep.coords_checked + rep.kinks_skipped;
        if !(rep.max_rel_err < tier.tolerance()) || !skipped_ok {
            failures.push(format!("{} {rep:?}", case.name));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn primitive_gradients() {
    run_tier(Tier::Primitive);
}

#[test]
fn composed_block_gradients() {
    run_tier(Tier::Composite);
}

#[test]
fn case_names_are_unique_and_findable() {
    let all = cases();
    for c in &all {
        assert_eq!(all.iter().filter(|d| d.name == c.name).count(), 1);
        assert!(find(c.name).is_some());
    }
    assert!(find("nope").is_none());
}

#[test]
fn full_loss_gradients_hold_across_seeds() {
    for seed in [11, 31, 41, 73] {
        let rep = total_loss_check(seed).unwrap();
        println!("seed {seed}: {rep:?}");
        assert!(rep.max_rel_err < Tier::Composite.tolerance(), "seed {seed}: {rep:?}");
        assert!(rep.kinks_skipped * 4 <= rep.coords_checked + rep.kinks_skipped);
    }
}
