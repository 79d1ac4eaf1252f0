//! A small Euler vs Milstein rate experiment through the harness, written to
//! a temporary directory.

use sde_lab::harness::{run, ExperimentConfig};

fn main() -> sde_lab::Result<()> {
    let out = std::env::temp_dir().join("sde-lab-rate-example");
    let config = ExperimentConfig::parse(&format!(
        "experiment_id = rate-example
         mode = rate
         model = holder-elliptic
         alpha = 0.5
         amplitude = 1
         frequency = 10
         s0 = 1
         s1 = 0.4
         schemes = euler, milstein
         levels = 3..7
         level_ref = 13
         p = 1, 2
         paths = 400
         seed = 11
         output = {}",
        out.display()
    ))?;
    let outcome = run(&config)?;
    print!("{}", outcome.csv());
    for (name, fit) in &outcome.fits {
        println!(
            "{name}: slope {:.3} ± {:.3} (r² {:.3})",
            fit.slope, fit.slope_stderr, fit.r_squared
        );
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
