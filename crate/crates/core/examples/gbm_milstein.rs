//! Milstein and Euler on geometric Brownian motion `dX = X dW`.
//!
//! Against the lattice reference (the same scheme at the lattice level) the
//! Milstein error falls like `1/n`. Against the closed form
//! `x0·exp(-t/2 + W_t)` it levels off near `2^{-L/2}`: the sub-summed
//! iterated integral uses the lattice's quadratic variation instead of `h`.

use sde_lab::brownian::BrownianLattice;
use sde_lab::coefficients::{CoefficientField, DiffusionPart, DriftPart};
use sde_lab::functionals::sup_distance;
use sde_lab::schemes::{simulate, SchemeConfig, SchemeKind};

fn main() -> sde_lab::Result<()> {
    let field = CoefficientField::new(DriftPart::zero(1), DiffusionPart::geometric())?;
    let paths = 200;
    let lattice_level = 14;
    println!("level   euler vs ref   milstein vs ref   milstein vs exact");
    for level in 4..=9 {
        let mut sums = [0.0; 3];
        for p in 0..paths {
            let lattice = BrownianLattice::generate(1, lattice_level, 3, p)?;
            let reference = simulate(
                &field,
                &SchemeConfig::new(SchemeKind::Euler, lattice_level, vec![1.0]),
                &lattice,
                false,
            )?;
            let euler = simulate(
                &field,
                &SchemeConfig::new(SchemeKind::Euler, level, vec![1.0]),
                &lattice,
                false,
            )?;
            let milstein = simulate(
                &field,
                &SchemeConfig::new(SchemeKind::Milstein, level, vec![1.0]),
                &lattice,
                false,
            )?;
            sums[0] += sup_distance(&reference, &euler)?.powi(2);
            sums[1] += sup_distance(&reference, &milstein)?.powi(2);

            let w = lattice.path_values();
            let stride = 1 << (lattice_level - level);
            let exact = (0..=(1usize << level))
                .map(|k| {
                    let t = k as f64 / (1u64 << level) as f64;
                    (milstein.grid_value(k)[0] - (-t / 2.0 + w[k * stride]).exp()).abs()
                })
                .fold(0.0, f64::max);
            sums[2] += exact * exact;
        }
        let [e, m, x] = sums.map(|s| (s / paths as f64).sqrt());
        println!("{level:>5}   {e:.3e}      {m:.3e}         {x:.3e}");
    }
    Ok(())
}
