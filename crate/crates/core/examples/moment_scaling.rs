//! Increment norms `‖X_t - X_s‖_{L^4}` of the Milstein scheme scale like
//! `(t - s)^{1/2}`.

use sde_lab::analysis::moment_scaling;
use sde_lab::coefficients::{elliptic_diffusion_family, holder_drift_family, CoefficientField};
use sde_lab::schemes::{simulate_ensemble, SchemeConfig, SchemeKind};

fn main() -> sde_lab::Result<()> {
    let field = CoefficientField::new(
        holder_drift_family(0.5, 1.0, 10.0, 1)?,
        elliptic_diffusion_family(1.0, 0.4, 1, 1)?,
    )?;
    let config = SchemeConfig::new(SchemeKind::Milstein, 6, vec![0.0]);
    let ensemble = simulate_ensemble(&field, &config, 10, 3, 2_000, true)?;
    let separations: Vec<f64> = (4..=10).map(|k| 2f64.powi(-k)).collect();
    let fit = moment_scaling(&ensemble, 4.0, &separations)?;
    for (x, y) in &fit.points {
        println!("t - s = 2^{x:.0}: log2 norm = {y:.3}");
    }
    println!("slope {:.4} ± {:.4}", fit.slope, fit.slope_stderr);
    Ok(())
}
