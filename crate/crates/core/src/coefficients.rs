//! Drift and diffusion coefficient fields.
//!
//! A [`CoefficientField`] bundles a drift `b: R^d -> R^d`, a diffusion
//! `sigma: R^d -> R^{d x d1}` and its analytic gradient, together with the
//! constants the convergence theory is stated in: the Hölder exponent of the
//! drift, the ellipticity constant of `sigma sigma^*` and a bound on the C¹
//! norm of `sigma`.
//!
//! Matrix layouts are row-major throughout:
//!
//! * `sigma[i * d1 + j]` is `sigma^{ij}`,
//! * `gradient[(i * d1 + j) * d + m]` is `∂_m sigma^{ij}`,
//! * `milstein[(i * d1 + j) * d1 + k]` is `(∇σσ)^{ijk} = Σ_m ∂_m σ^{ij} σ^{mk}`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::brownian::CounterRng;
use crate::error::{Error, Result};

/// A map `R^d -> R^k` writing its value into a caller-provided buffer.
pub type VectorMap = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// The drift half of a coefficient field, with its certified constants.
#[derive(Clone)]
pub struct DriftPart {
    pub name: String,
    pub dim_state: usize,
    pub map: VectorMap,
    /// Hölder exponent the constants below refer to.
    pub alpha: f64,
    /// Bound on `sup |b|`.
    pub sup_norm: f64,
    /// Bound on the Hölder seminorm `sup |b(x) - b(y)| / |x - y|^alpha`.
    pub holder_seminorm: f64,
}

impl DriftPart {
    pub fn zero(dim_state: usize) -> Self {
        DriftPart {
            name: "zero".into(),
            dim_state,
            map: Arc::new(|_, out: &mut [f64]| out.fill(0.0)),
            alpha: 1.0,
            sup_norm: 0.0,
            holder_seminorm: 0.0,
        }
    }

    pub fn constant(value: Vec<f64>) -> Self {
        let sup = value.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dim_state = value.len();
        DriftPart {
            name: "constant".into(),
            dim_state,
            map: Arc::new(move |_, out: &mut [f64]| out.copy_from_slice(&value)),
            alpha: 1.0,
            sup_norm: sup,
            holder_seminorm: 0.0,
        }
    }

    /// Drift `b(x) = A·sgn(sin(ωx))·|sin(ωx)|^α` applied componentwise; see
    /// [`holder_drift_family`].
    pub fn holder_sine(alpha: f64, amplitude: f64, frequency: f64, dim_state: usize) -> Result<Self> {
        holder_drift_family(alpha, amplitude, frequency, dim_state)
    }

    /// Norm `‖b‖_{C^α} = sup|b| + [b]_α` as declared by the constructor.
    pub fn holder_norm(&self) -> f64 {
        self.sup_norm + self.holder_seminorm
    }
}

impl fmt::Debug for DriftPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftPart")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("alpha", &self.alpha)
            .field("sup_norm", &self.sup_norm)
            .field("holder_seminorm", &self.holder_seminorm)
            .finish()
    }
}

/// The diffusion half of a coefficient field.
#[derive(Clone)]
pub struct DiffusionPart {
    pub name: String,
    pub dim_state: usize,
    pub dim_noise: usize,
    pub sigma: VectorMap,
    pub gradient: VectorMap,
    pub lambda: f64,
    pub k_bound: f64,
}

impl DiffusionPart {
    /// Constant diffusion `sigma(x) = I` embedded in the `d x d1` rectangle.
    pub fn identity(dim_state: usize, dim_noise: usize) -> Self {
        let mut matrix = vec![0.0; dim_state * dim_noise];
        for i in 0..dim_state.min(dim_noise) {
            matrix[i * dim_noise + i] = 1.0;
        }
        let mut part = Self::constant(dim_state, dim_noise, matrix);
        part.name = "identity".into();
        part.lambda = 1.0;
        part.k_bound = 1.0;
        part
    }

    /// Constant diffusion matrix (row-major). Ellipticity and the C¹ bound are
    /// not computed here; `lambda` defaults to 1 and `k_bound` to the largest
    /// entry, so call [`DiffusionPart::with_constants`] for anything sharper.
    pub fn constant(dim_state: usize, dim_noise: usize, matrix: Vec<f64>) -> Self {
        assert_eq!(matrix.len(), dim_state * dim_noise);
        let k = matrix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        DiffusionPart {
            name: "constant".into(),
            dim_state,
            dim_noise,
            sigma: Arc::new(move |_, out: &mut [f64]| out.copy_from_slice(&matrix)),
            gradient: Arc::new(|_, out: &mut [f64]| out.fill(0.0)),
            lambda: 1.0,
            k_bound: k,
        }
    }

    /// Scalar geometric diffusion `sigma(x) = x` (d = d1 = 1).
    ///
    /// Not elliptic; it exists because the Milstein scheme is exact to first
    /// order against the closed-form geometric Brownian motion.
    pub fn geometric() -> Self {
        DiffusionPart {
            name: "geometric".into(),
            dim_state: 1,
            dim_noise: 1,
            sigma: Arc::new(|x: &[f64], out: &mut [f64]| out[0] = x[0]),
            gradient: Arc::new(|_, out: &mut [f64]| out[0] = 1.0),
            lambda: 1.0,
            k_bound: 1.0,
        }
    }

    pub fn custom(
        name: impl Into<String>,
        dim_state: usize,
        dim_noise: usize,
        sigma: VectorMap,
        gradient: VectorMap,
        lambda: f64,
        k_bound: f64,
    ) -> Self {
        DiffusionPart {
            name: name.into(),
            dim_state,
            dim_noise,
            sigma,
            gradient,
            lambda,
            k_bound,
        }
    }

    pub fn with_constants(mut self, lambda: f64, k_bound: f64) -> Self {
        self.lambda = lambda;
        self.k_bound = k_bound;
        self
    }
}

impl fmt::Debug for DiffusionPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionPart")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("lambda", &self.lambda)
            .field("k_bound", &self.k_bound)
            .finish()
    }
}

/// Drift, diffusion and analytic diffusion gradient together with the
/// constants `alpha`, `lambda` and `K`.
#[derive(Clone, Debug)]
pub struct CoefficientField {
    drift: DriftPart,
    diffusion: DiffusionPart,
}

impl CoefficientField {
    pub fn new(drift: DriftPart, diffusion: DiffusionPart) -> Result<Self> {
        if drift.dim_state == 0 || diffusion.dim_state == 0 {
            return Err(Error::invalid("dim_state", "must be positive"));
        }
        if drift.dim_state != diffusion.dim_state {
            return Err(Error::invalid(
                "dim_state",
                format!(
                    "drift has d = {}, diffusion has d = {}",
                    drift.dim_state, diffusion.dim_state
                ),
            ));
        }
        if diffusion.dim_noise < diffusion.dim_state {
            return Err(Error::invalid("dim_noise", "must satisfy d1 >= d"));
        }
        if !(drift.alpha > 0.0 && drift.alpha <= 1.0) {
            return Err(Error::invalid("alpha", format!("{} not in (0, 1]", drift.alpha)));
        }
        if !(diffusion.lambda > 0.0 && diffusion.lambda <= 1.0) {
            return Err(Error::invalid("lambda", format!("{} not in (0, 1]", diffusion.lambda)));
        }
        if !(diffusion.k_bound >= 0.0) {
            return Err(Error::invalid("k_bound", "must be non-negative"));
        }
        Ok(CoefficientField { drift, diffusion })
    }

    pub fn dim_state(&self) -> usize {
        self.diffusion.dim_state
    }

    pub fn dim_noise(&self) -> usize {
        self.diffusion.dim_noise
    }

    pub fn alpha(&self) -> f64 {
        self.drift.alpha
    }

    pub fn lambda(&self) -> f64 {
        self.diffusion.lambda
    }

    pub fn k_bound(&self) -> f64 {
        self.diffusion.k_bound
    }

    pub fn drift_part(&self) -> &DriftPart {
        &self.drift
    }

    pub fn diffusion_part(&self) -> &DiffusionPart {
        &self.diffusion
    }

    /// Replace the declared ellipticity constant (validation then checks
    /// against the new value).
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.diffusion.lambda = lambda;
        self
    }

    #[inline]
    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift.map)(x, out)
    }

    #[inline]
    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion.sigma)(x, out)
    }

    #[inline]
    pub fn diffusion_gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion.gradient)(x, out)
    }

    /// `(∇σσ)^{ijk} = Σ_m ∂_m σ^{ij} σ^{mk}` from already evaluated `sigma`
    /// and `gradient` buffers.
    pub fn milstein_tensor(&self, sigma: &[f64], gradient: &[f64], out: &mut [f64]) {
        let d = self.dim_state();
        let d1 = self.dim_noise();
        for i in 0..d {
            for j in 0..d1 {
                let grad = &gradient[(i * d1 + j) * d..(i * d1 + j + 1) * d];
                for k in 0..d1 {
                    let mut acc = 0.0;
                    for (m, g) in grad.iter().enumerate() {
                        acc += g * sigma[m * d1 + k];
                    }
                    out[(i * d1 + j) * d1 + k] = acc;
                }
            }
        }
    }
}

/// Componentwise Hölder drift `b_i(x) = A·sgn(sin(ωx_i))·|sin(ωx_i)|^α`.
///
/// Bounded by `A` per component and exactly `C^α` at the zeros of `sin`. The
/// declared seminorm is `A·2^{1-α}·ω^α·d^{(1-α)/2}`, which reduces to the
/// Lipschitz constant `A·ω` at `α = 1`.
pub fn holder_drift_family(alpha: f64, amplitude: f64, frequency: f64, dim_state: usize) -> Result<DriftPart> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid("alpha", format!("{alpha} not in (0, 1]")));
    }
    if !(amplitude >= 0.0) || !amplitude.is_finite() {
        return Err(Error::invalid("amplitude", "must be finite and non-negative"));
    }
    if !(frequency > 0.0) || !frequency.is_finite() {
        return Err(Error::invalid("frequency", "must be finite and positive"));
    }
    if dim_state == 0 {
        return Err(Error::invalid("dim_state", "must be positive"));
    }
    let d = dim_state as f64;
    let map: VectorMap = if alpha == 1.0 {
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            for (o, xi) in out.iter_mut().zip(x) {
                *o = amplitude * (frequency * xi).sin();
            }
        })
    } else if alpha == 0.5 {
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            for (o, xi) in out.iter_mut().zip(x) {
                let s = (frequency * xi).sin();
                *o = amplitude * s.signum() * s.abs().sqrt();
            }
        })
    } else {
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            for (o, xi) in out.iter_mut().zip(x) {
                let s = (frequency * xi).sin();
                *o = amplitude * s.signum() * s.abs().powf(alpha);
            }
        })
    };
    Ok(DriftPart {
        name: "holder-sine".into(),
        dim_state,
        map,
        alpha,
        sup_norm: amplitude * d.sqrt(),
        holder_seminorm: amplitude * 2f64.powf(1.0 - alpha) * frequency.powf(alpha) * d.powf((1.0 - alpha) / 2.0),
    })
}

/// Diagonal diffusion `σ^{ii}(x) = s0 + s1·sin(x_i)` embedded in `d x d1`.
///
/// Certified constants: `λ = min((s0 - s1)², 1 / (s0 + s1)²)` so both sides
/// of the ellipticity bound hold, and `K = s0 + 2·s1 ≥ sup|σ| + sup|∇σ|`.
pub fn elliptic_diffusion_family(s0: f64, s1: f64, dim_state: usize, dim_noise: usize) -> Result<DiffusionPart> {
    if !(s1 >= 0.0) || !s0.is_finite() || !s1.is_finite() {
        return Err(Error::invalid("s1", "must be finite and non-negative"));
    }
    if s0 <= s1 {
        return Err(Error::EllipticityViolation(format!(
            "base s0 = {s0} must exceed modulation s1 = {s1}"
        )));
    }
    if dim_state == 0 {
        return Err(Error::invalid("dim_state", "must be positive"));
    }
    if dim_noise < dim_state {
        return Err(Error::invalid("dim_noise", "must satisfy d1 >= d"));
    }
    let d1 = dim_noise;
    let d = dim_state;
    let sigma: VectorMap = Arc::new(move |x: &[f64], out: &mut [f64]| {
        out.fill(0.0);
        for i in 0..d {
            out[i * d1 + i] = s0 + s1 * x[i].sin();
        }
    });
    let gradient: VectorMap = Arc::new(move |x: &[f64], out: &mut [f64]| {
        out.fill(0.0);
        for i in 0..d {
            out[(i * d1 + i) * d + i] = s1 * x[i].cos();
        }
    });
    let lower = (s0 - s1) * (s0 - s1);
    let upper = (s0 + s1) * (s0 + s1);
    let lambda = lower.min(1.0 / upper).min(1.0);
    Ok(DiffusionPart {
        name: "diagonal-sine".into(),
        dim_state,
        dim_noise,
        sigma,
        gradient,
        lambda,
        k_bound: s0 + 2.0 * s1,
    })
}

/// Smooth odd truncation `χ` with `χ(x) = x` on `|x| ≤ κ/2` and `χ(x) = 0`
/// on `|x| ≥ κ`.
///
/// On the transition band `χ(x) = x·(1 - S(t))` with `t = (|x| - κ/2)/(κ/2)`
/// and `S` the septic smoothstep, so `χ` is C³ and `|χ(x)| ≤ |x|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cutoff {
    kappa: f64,
}

impl Cutoff {
    pub fn new(kappa: f64) -> Result<Self> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(Error::invalid("kappa", format!("{kappa} must be finite and positive")));
        }
        Ok(Cutoff { kappa })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    #[inline]
    pub fn evaluate(&self, x: f64) -> f64 {
        let half = 0.5 * self.kappa;
        let a = x.abs();
        if a <= half {
            x
        } else if a >= self.kappa {
            0.0
        } else {
            let t = (a - half) / half;
            x * (1.0 - smoothstep7(t))
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let half = 0.5 * self.kappa;
        let a = x.abs();
        if a <= half {
            1.0
        } else if a >= self.kappa {
            0.0
        } else {
            let t = (a - half) / half;
            (1.0 - smoothstep7(t)) - a * smoothstep7_derivative(t) / half
        }
    }
}

#[inline]
fn smoothstep7(t: f64) -> f64 {
    let t4 = t * t * t * t;
    t4 * (35.0 + t * (-84.0 + t * (70.0 - 20.0 * t)))
}

#[inline]
fn smoothstep7_derivative(t: f64) -> f64 {
    let u = t * (1.0 - t);
    140.0 * u * u * u
}

/// Cutoff with threshold `κ = λ / (4·K·d²)`.
pub fn make_cutoff(lambda: f64, k_bound: f64, dim_state: usize) -> Result<Cutoff> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::invalid("lambda", format!("{lambda} not in (0, 1]")));
    }
    if !(k_bound > 0.0) || !k_bound.is_finite() {
        return Err(Error::invalid("k_bound", "must be finite and positive"));
    }
    if dim_state == 0 {
        return Err(Error::invalid("dim_state", "must be positive"));
    }
    let d = dim_state as f64;
    Cutoff::new(lambda / (4.0 * k_bound * d * d))
}

/// Knobs for [`validate_assumptions_with`].
#[derive(Clone, Debug)]
pub struct ValidationOptions {
    pub probe_count: usize,
    pub seed: u64,
    /// Probes are drawn uniformly from `[-h, h]^d`.
    pub box_half_width: f64,
    pub holder_pairs: usize,
    /// Near-diagonal pairs drawn at each distance `10^{-k}`, `k = 1..=6`.
    pub near_diagonal_pairs: usize,
    pub gradient_rel_tol: f64,
}

impl ValidationOptions {
    pub fn new(probe_count: usize, seed: u64) -> Self {
        ValidationOptions {
            probe_count,
            seed,
            box_half_width: 2.0 * PI,
            holder_pairs: 100_000,
            near_diagonal_pairs: 1_000,
            gradient_rel_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ValidationReport {
    pub probe_count: usize,
    pub rayleigh_min: f64,
    pub rayleigh_max: f64,
    pub drift_sup: f64,
    pub holder_quotient_max: f64,
    pub gradient_max_rel_error: f64,
}

pub fn validate_assumptions(field: &CoefficientField, probe_count: usize, rng_seed: u64) -> Result<ValidationReport> {
    validate_assumptions_with(field, &ValidationOptions::new(probe_count, rng_seed))
}

/// Empirical check of ellipticity, drift regularity and gradient consistency.
pub fn validate_assumptions_with(field: &CoefficientField, opts: &ValidationOptions) -> Result<ValidationReport> {
    if opts.probe_count < 100 {
        return Err(Error::invalid("probe_count", "at least 100 probes are required"));
    }
    let d = field.dim_state();
    let d1 = field.dim_noise();
    let lambda = field.lambda();
    let mut rng = CounterRng::new(opts.seed, 0x5eed_0f_7e57);
    let h = opts.box_half_width;
    let draw_point = |rng: &mut CounterRng| -> Vec<f64> { (0..d).map(|_| h * (2.0 * rng.uniform() - 1.0)).collect() };

    let mut sigma = vec![0.0; d * d1];
    let mut grad = vec![0.0; d * d1 * d];
    let mut shifted = vec![0.0; d * d1];
    let mut b = vec![0.0; d];
    let mut b2 = vec![0.0; d];

    let mut rayleigh_min = f64::INFINITY;
    let mut rayleigh_max = f64::NEG_INFINITY;
    let mut drift_sup = 0.0f64;
    let mut grad_err = 0.0f64;

    for _ in 0..opts.probe_count {
        let x = draw_point(&mut rng);
        field.diffusion(&x, &mut sigma);

        // Rayleigh quotient of sigma sigma^* along a random unit direction.
        let xi: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm2: f64 = xi.iter().map(|v| v * v).sum();
        let mut quad = 0.0;
        for k in 0..d1 {
            let proj: f64 = (0..d).map(|i| sigma[i * d1 + k] * xi[i]).sum();
            quad += proj * proj;
        }
        let q = quad / norm2;
        rayleigh_min = rayleigh_min.min(q);
        rayleigh_max = rayleigh_max.max(q);
        if q < lambda * (1.0 - 1e-12) || q > (1.0 + 1e-12) / lambda {
            return Err(Error::AssumptionViolation {
                check: "ellipticity",
                witness: x,
                detail: format!("Rayleigh quotient {q} outside [{lambda}, {}]", 1.0 / lambda),
            });
        }

        field.drift(&x, &mut b);
        let bn = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        drift_sup = drift_sup.max(bn);
        if bn > field.drift_part().holder_norm() * (1.0 + 1e-12) {
            return Err(Error::AssumptionViolation {
                check: "drift-bounded",
                witness: x,
                detail: format!("|b| = {bn} exceeds declared norm {}", field.drift_part().holder_norm()),
            });
        }

        field.diffusion_gradient(&x, &mut grad);
        let mut xp = x.clone();
        for m in 0..d {
            let step = 1e-5 * x[m].abs().max(1.0);
            xp[m] = x[m] + step;
            field.diffusion(&xp, &mut shifted);
            let plus = shifted.clone();
            xp[m] = x[m] - step;
            field.diffusion(&xp, &mut shifted);
            xp[m] = x[m];
            for e in 0..d * d1 {
                let fd = (plus[e] - shifted[e]) / (2.0 * step);
                let an = grad[e * d + m];
                let err = (fd - an).abs() / an.abs().max(1.0);
                grad_err = grad_err.max(err);
                if err > opts.gradient_rel_tol {
                    return Err(Error::AssumptionViolation {
                        check: "gradient-consistency",
                        witness: x,
                        detail: format!("∂_{m} entry {e}: analytic {an}, finite difference {fd}"),
                    });
                }
            }
        }
    }

    // Hölder quotient over random pairs and near-diagonal pairs.
    let alpha = field.alpha();
    let seminorm = field.drift_part().holder_seminorm;
    let mut holder_max = 0.0f64;
    let mut check_pair = |x: &[f64], y: &[f64], holder_max: &mut f64| -> Result<()> {
        let dist = x.iter().zip(y).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
        if dist == 0.0 {
            return Ok(());
        }
        field.drift(x, &mut b);
        field.drift(y, &mut b2);
        let diff = b.iter().zip(&b2).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
        let quotient = diff / dist.powf(alpha);
        *holder_max = holder_max.max(quotient);
        if quotient > seminorm * (1.0 + 1e-9) + 1e-12 {
            return Err(Error::AssumptionViolation {
                check: "drift-holder",
                witness: x.to_vec(),
                detail: format!("Hölder quotient {quotient} exceeds declared seminorm {seminorm}"),
            });
        }
        Ok(())
    };
    for _ in 0..opts.holder_pairs {
        let x = draw_point(&mut rng);
        let y = draw_point(&mut rng);
        check_pair(&x, &y, &mut holder_max)?;
    }
    for k in 1..=6 {
        let r = 10f64.powi(-k);
        for _ in 0..opts.near_diagonal_pairs {
            let x = draw_point(&mut rng);
            let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let y: Vec<f64> = x.iter().zip(&dir).map(|(a, u)| a + r * u / n).collect();
            check_pair(&x, &y, &mut holder_max)?;
        }
    }

    Ok(ValidationReport {
        probe_count: opts.probe_count,
        rayleigh_min,
        rayleigh_max,
        drift_sup,
        holder_quotient_max: holder_max,
        gradient_max_rel_error: grad_err,
    })
}
