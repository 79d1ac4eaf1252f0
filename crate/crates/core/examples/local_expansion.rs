//! First-order local expansion residual of `f = σ` along Milstein paths:
//! the per-time `L^4` norm decays like `1/n`.

use sde_lab::brownian::BrownianLattice;
use sde_lab::coefficients::{elliptic_diffusion_family, holder_drift_family, CoefficientField};
use sde_lab::functionals::local_expansion_residual;
use sde_lab::schemes::{simulate, SchemeConfig, SchemeKind};

fn main() -> sde_lab::Result<()> {
    let field = CoefficientField::new(
        holder_drift_family(0.5, 1.0, 10.0, 1)?,
        elliptic_diffusion_family(1.0, 0.4, 1, 1)?,
    )?;
    let f = |x: &[f64]| 1.0 + 0.4 * x[0].sin();
    let grad_f = |x: &[f64], g: &mut [f64]| g[0] = 0.4 * x[0].cos();
    let (lattice_level, m) = (11, 1_000);
    for level in 3..=7 {
        let config = SchemeConfig::new(SchemeKind::Milstein, level, vec![0.0]);
        let mut fourth = vec![0.0; (1 << lattice_level) + 1];
        for p in 0..m {
            let lattice = BrownianLattice::generate(1, lattice_level, 8, p)?;
            let path = simulate(&field, &config, &lattice, true)?;
            let r = local_expansion_residual(&field, f, grad_f, &path, &lattice, level)?;
            for (acc, v) in fourth.iter_mut().zip(r) {
                *acc += v.powi(4);
            }
        }
        let sup = fourth.iter().map(|s| (s / m as f64).powf(0.25)).fold(0.0, f64::max);
        println!("n = {:>3}: sup_t ||R_t||_L4 = {sup:.3e}", 1 << level);
    }
    Ok(())
}
