//! Probability of leaving the good event as the step count grows.

use sde_lab::analysis::fit_ols;
use sde_lab::brownian::{good_event_indicator, BrownianLattice};

fn main() -> sde_lab::Result<()> {
    let kappa = 0.85;
    let m = 20_000;
    let levels: Vec<u32> = (3..=7).collect();
    let mut bad = vec![0usize; levels.len()];
    for p in 0..m {
        let lattice = BrownianLattice::generate(1, 12, 9, p)?;
        for (count, &l) in bad.iter_mut().zip(&levels) {
            *count += !good_event_indicator(&lattice, l, kappa)? as usize;
        }
    }
    let mut points = Vec::new();
    for (&l, &b) in levels.iter().zip(&bad) {
        let prob = b as f64 / m as f64;
        println!("n = {:>3}: P(leave) = {prob:.5}", 1 << l);
        if b > 0 {
            points.push(((1u64 << l) as f64, prob.ln()));
        }
    }
    let fit = fit_ols(&points)?;
    println!(
        "log P ≈ {:.3} + {:.4}·n  (r² {:.3})",
        fit.intercept, fit.slope, fit.r_squared
    );
    Ok(())
}
