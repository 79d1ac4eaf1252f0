//! Girsanov weights of the driftless truncated scheme: positive, mean one.

use sde_lab::brownian::BrownianLattice;
use sde_lab::coefficients::{elliptic_diffusion_family, holder_drift_family, make_cutoff, CoefficientField};
use sde_lab::functionals::girsanov_weight;
use sde_lab::schemes::{simulate, SchemeConfig, SchemeKind};

fn main() -> sde_lab::Result<()> {
    let field = CoefficientField::new(
        holder_drift_family(0.5, 1.0, 10.0, 1)?,
        elliptic_diffusion_family(1.0, 0.4, 1, 1)?,
    )?;
    let cutoff = make_cutoff(field.lambda(), field.k_bound(), 1)?;
    let level = 5;
    let config = SchemeConfig::new(SchemeKind::MilsteinTruncated, level, vec![0.0]).with_cutoff(cutoff);
    let m = 5_000;
    let weights = (0..m)
        .map(|p| {
            let lattice = BrownianLattice::generate(1, 10, 5, p)?;
            let path = simulate(&field, &config, &lattice, true)?;
            girsanov_weight(&field, &cutoff, &path, &lattice, level)
        })
        .collect::<sde_lab::Result<Vec<f64>>>()?;
    let mean = weights.iter().sum::<f64>() / m as f64;
    let var = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    let min = weights.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "E[rho] = {mean:.4} ± {:.4}, min rho = {min:.3e}",
        (var / m as f64).sqrt()
    );
    Ok(())
}
