//! Build the shipped Hölder/elliptic model, check its standing assumptions
//! and inspect the certified cutoff.

use sde_lab::coefficients::{
    elliptic_diffusion_family, holder_drift_family, make_cutoff, validate_assumptions, CoefficientField,
};

fn main() -> sde_lab::Result<()> {
    let field = CoefficientField::new(
        holder_drift_family(0.5, 1.0, 10.0, 2)?,
        elliptic_diffusion_family(1.0, 0.4, 2, 2)?,
    )?;
    println!(
        "alpha = {}, lambda = {:.4}, K = {}",
        field.alpha(),
        field.lambda(),
        field.k_bound()
    );

    let report = validate_assumptions(&field, 10_000, 7)?;
    println!("{}", serde_json::to_string_pretty(&report)?);

    let chi = make_cutoff(field.lambda(), field.k_bound(), field.dim_state())?;
    println!("kappa = {:.5}", chi.kappa());
    for x in [0.0, 0.25, 0.5, 0.75, 1.0, 1.25].map(|t| t * chi.kappa()) {
        println!(
            "chi({x:+.5}) = {:+.5}   chi'({x:+.5}) = {:+.5}",
            chi.evaluate(x),
            chi.derivative(x)
        );
    }

    // a declared ellipticity constant that the diffusion does not honour
    let bad = field.with_lambda(0.9);
    match validate_assumptions(&bad, 1_000, 7) {
        Err(e) => println!("lambda = 0.9 rejected: {e}"),
        Ok(_) => println!("lambda = 0.9 unexpectedly accepted"),
    }
    Ok(())
}
