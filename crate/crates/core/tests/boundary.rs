//! Sampling behavior of the variance-component estimator at the
//! tau = 0 boundary: under the global null the fitted components must
//! pin to exactly zero rather than wander in the interior.

use kmdhoi::mixed_model::fit_reml;
use kmdhoi::simgen::{gen_replicate, SimConfig};
use nalgebra::DMatrix;
use rayon::prelude::*;

/// Over 200 null replicates of the simulation views (7 kernels each):
/// at least 90% of replicates have tau estimates on the zero
/// boundary, and pooled across replicates at least 75% of all tau
/// estimates are exactly zero (the pooled rate for these views
/// measures ~0.83 and is construction-dependent, so the floor is
/// deliberately below it).
#[test]
fn tau_boundary_rate_under_global_null() {
    let config = SimConfig { n: 60, seed: 11, ..SimConfig::default() };
    let reps = 200usize;
    let counts: Vec<(usize, usize)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let rep = gen_replicate(&config, r, (0.0, 0.0, 0.0)).unwrap();
            let krefs: Vec<&DMatrix<f64>> = rep.kernels.iter().map(|g| &g.values).collect();
            let fit = fit_reml(&rep.y, &rep.x, &krefs, &config.reml).unwrap();
            let zeros = fit.theta.tau.iter().filter(|t| **t == 0.0).count();
            (zeros, fit.theta.tau.len())
        })
        .collect();
    let replicates_hit = counts.iter().filter(|(z, _)| *z > 0).count();
    let hit_frac = replicates_hit as f64 / reps as f64;
    let zeros: usize = counts.iter().map(|(z, _)| z).sum();
    let total: usize = counts.iter().map(|(_, t)| t).sum();
    let pooled = zeros as f64 / total as f64;
    println!(
        "boundary: {replicates_hit}/{reps} replicates with tau-hat at zero ({hit_frac:.3}), \
         pooled rate {zeros}/{total} = {pooled:.3}"
    );
    assert!(
        hit_frac >= 0.90,
        "expected the boundary to be hit in >= 90% of replicates, got {hit_frac:.3}"
    );
    assert!(pooled >= 0.75, "expected pooled boundary rate >= 0.75, got {pooled:.3}");
}
