//! Run the randomized invariant and gradient suites, then repeat the
//! Kabsch suite with the reflection correction disabled to show it fails.

use rigidsim::selftest::{kabsch_suite, run_all, Mutations, SelftestOptions};

fn main() {
    let opts = SelftestOptions {
        trials: 10,
        gradient_seeds: 2,
        ..SelftestOptions::default()
    };
    for r in run_all(&opts) {
        println!("{}", r.line());
    }
    let broken = Mutations {
        skip_det_correction: true,
        ..Mutations::default()
    };
    println!("with the reflection fix disabled:\n{}", kabsch_suite(200, broken, 0).line());
}
