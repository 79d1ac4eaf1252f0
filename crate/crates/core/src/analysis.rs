//! Statistical reduction of coupled ensembles: strong errors with bootstrap
//! error bars, log–log rate fits and increment-moment scaling.

use serde::Serialize;

use crate::brownian::CounterRng;
use crate::error::{Error, Result};
use crate::functionals::sup_distance;
use crate::schemes::{PathEnsemble, SchemeKind, SimulatedPath};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Fits with `r²` below this drop their two coarsest points.
pub const TRANSIENT_R2_THRESHOLD: f64 = 0.98;

const BOOTSTRAP_STREAM: u64 = 0xb007_57a9;

/// `‖sup_t |X^ref_t - X^n_t|‖_{L^p}` for one scheme and level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorReport {
    pub scheme: SchemeKind,
    pub level: u32,
    pub n: u64,
    pub p: f64,
    pub error: f64,
    /// Standard deviation of the bootstrap replicates.
    pub std_error: f64,
    /// 2.5% and 97.5% bootstrap percentiles.
    pub ci_low: f64,
    pub ci_high: f64,
    pub path_count: usize,
}

impl ErrorReport {
    /// Reduce per-path distances to an `L^p` estimate with a bootstrap over
    /// [`BOOTSTRAP_RESAMPLES`] resamples. Distances are sorted first, so the
    /// report does not depend on path order.
    pub fn from_distances(scheme: SchemeKind, level: u32, p: f64, distances: &[f64], seed: u64) -> Result<Self> {
        if !(p >= 1.0) || !p.is_finite() {
            return Err(Error::invalid("p", format!("{p} must be a finite order >= 1")));
        }
        if distances.is_empty() {
            return Err(Error::invalid("distances", "no paths to reduce"));
        }
        let powered: Vec<f64> = distances.iter().map(|d| d.powf(p)).collect();
        let b = bootstrap_power_mean(&powered, p, seed);
        Ok(ErrorReport {
            scheme,
            level,
            n: 1 << level,
            p,
            error: b.estimate,
            std_error: b.std_error,
            ci_low: b.ci_low,
            ci_high: b.ci_high,
            path_count: distances.len(),
        })
    }
}

/// `(mean of samples)^{1/p}` with its bootstrap spread.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BootstrapSummary {
    pub estimate: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Bootstrap `(mean of powered)^{1/p}` over [`BOOTSTRAP_RESAMPLES`]
/// resamples drawn from a stream keyed by `seed`. The samples are sorted
/// first, so the result does not depend on their order. `p = 1` gives a
/// plain mean.
pub fn bootstrap_power_mean(powered: &[f64], p: f64, seed: u64) -> BootstrapSummary {
    let mut sorted = powered.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let estimate = |sum: f64| (sum / m as f64).powf(1.0 / p);
    let value = estimate(sorted.iter().sum());
    let mut rng = CounterRng::new(seed, BOOTSTRAP_STREAM);
    let mut replicates: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| estimate((0..m).map(|_| sorted[rng.below(m)]).sum()))
        .collect();
    let mean = replicates.iter().sum::<f64>() / replicates.len() as f64;
    let var = replicates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (replicates.len() - 1) as f64;
    replicates.sort_by(f64::total_cmp);
    let last = replicates.len() - 1;
    let pick = |q: f64| replicates[((q * last as f64).round() as usize).min(last)];
    BootstrapSummary {
        estimate: value,
        std_error: var.sqrt(),
        ci_low: pick(0.025),
        ci_high: pick(0.975),
    }
}

fn check_coupling(reference: &PathEnsemble, approx: &PathEnsemble) -> Result<()> {
    if reference.seed != approx.seed {
        return Err(Error::CouplingViolation(format!(
            "seeds differ ({} vs {})",
            reference.seed, approx.seed
        )));
    }
    if reference.lattice_level != approx.lattice_level || reference.dim_noise != approx.dim_noise {
        return Err(Error::CouplingViolation("ensembles use different lattices".into()));
    }
    if reference.paths.len() != approx.paths.len()
        || reference
            .paths
            .iter()
            .zip(&approx.paths)
            .any(|(a, b)| a.path_index != b.path_index)
    {
        return Err(Error::CouplingViolation("path indices differ".into()));
    }
    Ok(())
}

/// Strong `L^p` error of `approx` against a `reference` ensemble simulated
/// on the same lattices.
pub fn strong_error(reference: &PathEnsemble, approx: &PathEnsemble, p: f64) -> Result<ErrorReport> {
    check_coupling(reference, approx)?;
    let distances = reference
        .paths
        .iter()
        .zip(&approx.paths)
        .map(|(r, a)| sup_distance(r, a))
        .collect::<Result<Vec<_>>>()?;
    ErrorReport::from_distances(approx.config.kind, approx.config.level, p, &distances, approx.seed)
}

/// Ordinary least-squares fit in log–log coordinates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateFit {
    /// `(log2 x, log2 y)` pairs used by the fit.
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub r_squared: f64,
    /// `log2 x` of points dropped as pre-asymptotic.
    pub excluded: Vec<f64>,
}

/// OLS of `y` against `x`; at least three points. Rate fits pass log2
/// coordinates.
pub fn fit_ols(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "{} points, need at least 3",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::DegenerateFit("non-finite coordinates".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all abscissae coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (1.0 - ssr / syy).clamp(0.0, 1.0)
    };
    Ok(RateFit {
        points: points.to_vec(),
        slope,
        intercept,
        slope_stderr: (ssr / (n - 2.0) / sxx).sqrt(),
        r_squared,
        excluded: Vec::new(),
    })
}

fn rate_points(reports: &[ErrorReport]) -> Result<Vec<(f64, f64)>> {
    if reports.len() < 4 {
        return Err(Error::DegenerateFit(format!(
            "{} levels, need at least 4",
            reports.len()
        )));
    }
    let first = &reports[0];
    if reports.iter().any(|r| r.scheme != first.scheme || r.p != first.p) {
        return Err(Error::DegenerateFit("reports mix schemes or moment orders".into()));
    }
    if let Some(r) = reports.iter().find(|r| !(r.error > 0.0)) {
        return Err(Error::DegenerateFit(format!("zero error at level {}", r.level)));
    }
    let mut pts: Vec<(f64, f64)> = reports.iter().map(|r| (r.level as f64, r.error.log2())).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(pts)
}

/// OLS fit of `log2 error` against `log2 n`.
pub fn fit_rate(reports: &[ErrorReport]) -> Result<RateFit> {
    fit_ols(&rate_points(reports)?)
}

/// [`fit_rate`], refitting without the two coarsest levels when the full fit
/// has `r² <` [`TRANSIENT_R2_THRESHOLD`] and at least four levels remain.
pub fn fit_rate_excluding_transient(reports: &[ErrorReport]) -> Result<RateFit> {
    let pts = rate_points(reports)?;
    let full = fit_ols(&pts)?;
    if full.r_squared >= TRANSIENT_R2_THRESHOLD || pts.len() < 6 {
        return Ok(full);
    }
    let mut trimmed = fit_ols(&pts[2..])?;
    trimmed.excluded = pts[..2].iter().map(|p| p.0).collect();
    Ok(trimmed)
}

/// Running sums of `|X_{t+s} - X_t|^m` over all fine translates `t`, for a
/// set of separations `s` given in fine steps.
#[derive(Clone, Debug)]
pub struct MomentAccumulator {
    pub order: f64,
    pub fine_level: u32,
    pub separations: Vec<usize>,
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl MomentAccumulator {
    /// `separations` are times in `[2^{-fine_level}, 1]`, each a dyadic
    /// multiple of the fine step.
    pub fn new(order: f64, fine_level: u32, separations: &[f64]) -> Result<Self> {
        if !(order >= 1.0) {
            return Err(Error::invalid("order", "moment order must be >= 1"));
        }
        let steps = (1u64 << fine_level) as f64;
        let seps = separations
            .iter()
            .map(|&s| {
                let k = s * steps;
                if !(s > 0.0 && s <= 1.0) || k.fract() != 0.0 || k < 1.0 || !(k as u64).is_power_of_two() {
                    Err(Error::invalid(
                        "separations",
                        format!("{s} is not a dyadic time in [2^-{fine_level}, 1]"),
                    ))
                } else {
                    Ok(k as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MomentAccumulator {
            order,
            fine_level,
            sums: vec![0.0; seps.len()],
            counts: vec![0; seps.len()],
            separations: seps,
        })
    }

    /// Accumulate one dense trajectory of dimension `d`.
    pub fn add(&mut self, dense: &[f64], d: usize) {
        let points = dense.len() / d;
        for (s, &sep) in self.separations.iter().enumerate() {
            let count = points.saturating_sub(sep);
            self.sums[s] += increment_moment(dense, d, sep, self.order) * count as f64;
            self.counts[s] += count as u64;
        }
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `(separation time, ‖X_{t+s} - X_t‖_{L^m})` per separation.
    pub fn norms(&self) -> Vec<(f64, f64)> {
        let dt = 1.0 / (1u64 << self.fine_level) as f64;
        self.separations
            .iter()
            .zip(self.sums.iter().zip(&self.counts))
            .map(|(&sep, (&sum, &count))| (sep as f64 * dt, (sum / count as f64).powf(1.0 / self.order)))
            .collect()
    }

    /// Log–log fit of the increment norm against the separation.
    pub fn fit(&self) -> Result<RateFit> {
        let pts: Vec<(f64, f64)> = self.norms().into_iter().map(|(s, v)| (s.log2(), v.log2())).collect();
        fit_ols(&pts)
    }
}

/// Mean of `|X_{t+sep} - X_t|^order` over all translates of one dense
/// trajectory, `sep` in fine steps.
pub fn increment_moment(dense: &[f64], d: usize, sep: usize, order: f64) -> f64 {
    let points = dense.len() / d;
    let count = points.saturating_sub(sep);
    if count == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for t in 0..count {
        let a = &dense[t * d..(t + 1) * d];
        let b = &dense[(t + sep) * d..(t + sep + 1) * d];
        let dist = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        acc += if order == 4.0 {
            (dist * dist).powi(2)
        } else {
            dist.powf(order)
        };
    }
    acc / count as f64
}

/// Increment-norm scaling `‖X_t - X_s‖_{L^m}` against `t - s` over a dense
/// ensemble, averaged over all fine-grid translates.
pub fn moment_scaling(ensemble: &PathEnsemble, m: f64, separations: &[f64]) -> Result<RateFit> {
    let mut acc = MomentAccumulator::new(m, ensemble.lattice_level, separations)?;
    for path in &ensemble.paths {
        acc.add(dense_of(path)?, path.dim_state);
    }
    acc.fit()
}

fn dense_of(path: &SimulatedPath) -> Result<&[f64]> {
    path.dense_values()
        .ok_or_else(|| Error::Configuration("moment scaling needs dense paths".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CoefficientField, DiffusionPart, DriftPart};
    use crate::schemes::{simulate_ensemble, SchemeConfig};

    fn report(level: u32, error: f64) -> ErrorReport {
        ErrorReport {
            scheme: SchemeKind::Milstein,
            level,
            n: 1 << level,
            p: 2.0,
            error,
            std_error: 0.0,
            ci_low: error,
            ci_high: error,
            path_count: 1,
        }
    }

    #[test]
    fn exact_power_law_fit() {
        let reports: Vec<_> = (4..10).map(|l| report(l, ((1u64 << l) as f64).powf(-0.75))).collect();
        let fit = fit_rate(&reports).unwrap();
        assert!((fit.slope + 0.75).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!(fit.slope_stderr < 1e-12);
    }

    #[test]
    fn fit_rejects_degenerate_input() {
        let few: Vec<_> = (4..7).map(|l| report(l, 0.1)).collect();
        assert!(matches!(fit_rate(&few), Err(Error::DegenerateFit(_))));
        let mut zero: Vec<_> = (4..9).map(|l| report(l, 0.1)).collect();
        zero[2].error = 0.0;
        assert!(matches!(fit_rate(&zero), Err(Error::DegenerateFit(_))));
        let mut mixed: Vec<_> = (4..9).map(|l| report(l, 0.1)).collect();
        mixed[1].scheme = SchemeKind::Euler;
        assert!(fit_rate(&mixed).is_err());
    }

    #[test]
    fn transient_exclusion() {
        // two coarse points far off the n^{-1} line
        let mut reports: Vec<_> = (4..10).map(|l| report(l, 1.0 / (1u64 << l) as f64)).collect();
        reports[0].error = 0.001;
        reports[1].error = 0.002;
        let fit = fit_rate_excluding_transient(&reports).unwrap();
        assert_eq!(fit.excluded, vec![4.0, 5.0]);
        assert!((fit.slope + 1.0).abs() < 1e-12);
        let clean: Vec<_> = (4..10).map(|l| report(l, 1.0 / (1u64 << l) as f64)).collect();
        assert!(fit_rate_excluding_transient(&clean).unwrap().excluded.is_empty());
    }

    #[test]
    fn bootstrap_report_basics() {
        let d = [0.0; 10];
        let r = ErrorReport::from_distances(SchemeKind::Euler, 3, 2.0, &d, 0).unwrap();
        assert_eq!(r.error, 0.0);
        assert_eq!(r.std_error, 0.0);
        let d: Vec<f64> = (0..500).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let r1 = ErrorReport::from_distances(SchemeKind::Euler, 3, 1.0, &d, 0).unwrap();
        let r2 = ErrorReport::from_distances(SchemeKind::Euler, 3, 2.0, &d, 0).unwrap();
        assert!(r2.error >= r1.error);
        assert!(r1.ci_low <= r1.error && r1.error <= r1.ci_high);
        assert!(ErrorReport::from_distances(SchemeKind::Euler, 3, 0.5, &d, 0).is_err());
    }

    #[test]
    fn moment_accumulator_rejects_non_dyadic() {
        assert!(MomentAccumulator::new(4.0, 6, &[0.3]).is_err());
        assert!(MomentAccumulator::new(4.0, 6, &[3.0 / 64.0]).is_err());
        assert!(MomentAccumulator::new(4.0, 6, &[1.0 / 128.0]).is_err());
        assert!(MomentAccumulator::new(4.0, 6, &[1.0 / 64.0, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn deterministic_path_scales_linearly() {
        let field =
            CoefficientField::new(DriftPart::constant(vec![0.5]), DiffusionPart::constant(1, 1, vec![0.0])).unwrap();
        let ens = simulate_ensemble(
            &field,
            &SchemeConfig::new(SchemeKind::Euler, 4, vec![0.0]),
            8,
            1,
            4,
            true,
        )
        .unwrap();
        let seps: Vec<f64> = (1..=6).map(|k| 2f64.powi(-k)).collect();
        let fit = moment_scaling(&ens, 4.0, &seps).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-9);
    }

    #[test]
    fn coupling_checks() {
        let field = CoefficientField::new(DriftPart::zero(1), DiffusionPart::identity(1, 1)).unwrap();
        let cfg = SchemeConfig::new(SchemeKind::Euler, 3, vec![0.0]);
        let a = simulate_ensemble(&field, &cfg, 8, 1, 5, false).unwrap();
        let b = simulate_ensemble(&field, &cfg, 8, 2, 5, false).unwrap();
        assert!(matches!(strong_error(&a, &b, 2.0), Err(Error::CouplingViolation(_))));
        let c = simulate_ensemble(&field, &cfg, 8, 1, 4, false).unwrap();
        assert!(matches!(strong_error(&a, &c, 2.0), Err(Error::CouplingViolation(_))));
        let same = strong_error(&a, &a, 2.0).unwrap();
        assert_eq!(same.error, 0.0);
    }
}
