//! Additive functional `sup_t |∫ h(X)(f(X) - f(X_{k_n}))|` of the Milstein
//! scheme for a Hölder drift, across step counts.

use sde_lab::analysis::{fit_rate, ErrorReport};
use sde_lab::coefficients::{elliptic_diffusion_family, holder_drift_family, CoefficientField};
use sde_lab::functionals::additive_functional_ensemble;
use sde_lab::schemes::{simulate_ensemble, SchemeConfig, SchemeKind};

fn main() -> sde_lab::Result<()> {
    let field = CoefficientField::new(
        holder_drift_family(0.5, 1.0, 10.0, 1)?,
        elliptic_diffusion_family(1.0, 0.4, 1, 1)?,
    )?;
    let drift = |x: &[f64]| {
        let mut b = [0.0];
        field.drift(x, &mut b);
        b[0]
    };
    let mut reports = Vec::new();
    for level in 3..=7 {
        let config = SchemeConfig::new(SchemeKind::Milstein, level, vec![0.0]);
        let ensemble = simulate_ensemble(&field, &config, 12, 21, 500, true)?;
        let samples = additive_functional_ensemble(|x: &[f64]| x[0].cos(), drift, &ensemble, level)?;
        let values: Vec<f64> = samples.iter().map(|s| s.value).collect();
        let report = ErrorReport::from_distances(SchemeKind::Milstein, level, 2.0, &values, 21)?;
        println!(
            "n = {:>3}: L2 = {:.3e} ± {:.1e}",
            report.n, report.error, report.std_error
        );
        reports.push(report);
    }
    let fit = fit_rate(&reports)?;
    println!("slope {:.3} ± {:.3}", fit.slope, fit.slope_stderr);
    Ok(())
}
