//! A fine dyadic Brownian lattice, its coarse views, sub-summed iterated
//! integrals and the good event.

use sde_lab::brownian::{good_event_indicator, iterated_integrals, BrownianLattice};

fn main() -> sde_lab::Result<()> {
    let lattice = BrownianLattice::generate(2, 12, 42, 0)?;
    println!("W_1 = {:?}", lattice.endpoint());
    for level in [0, 2, 4] {
        let inc = lattice.coarse_increments(level)?;
        println!("level {level}: first increment {:?}", &inc[..2]);
    }

    let j = iterated_integrals(&lattice, 4)?;
    let (dw, q, jk) = (j.increment(0), j.quadratic(0), j.step(0));
    println!("step 0 J = {jk:?}");
    // J + Jᵀ = ΔW ΔWᵀ - Q
    for a in 0..2 {
        for b in 0..2 {
            let lhs = jk[a * 2 + b] + jk[b * 2 + a];
            let rhs = dw[a] * dw[b] - q[a * 2 + b];
            println!("  ({a},{b}) symmetric part {lhs:+.3e} vs {rhs:+.3e}");
        }
    }

    for kappa in [0.5, 1.0, 2.0] {
        let good: Vec<bool> = (2..=6)
            .map(|l| good_event_indicator(&lattice, l, kappa))
            .collect::<Result<_, _>>()?;
        println!("kappa {kappa}: good event at n = 4..64: {good:?}");
    }
    Ok(())
}
