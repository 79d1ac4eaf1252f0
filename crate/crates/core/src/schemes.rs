//! Time-stepping schemes driven by a shared [`BrownianLattice`].
//!
//! Every scheme freezes its coefficients at the left end `s` of a coarse step
//! and integrates the stochastic term by left-point sub-summation over the
//! fine increments of the lattice. Within a step the plain Milstein scheme is
//!
//! ```text
//! X_t = X_s + b(X_s)(t - s) + σ(X_s)(W_t - W_s) + Σ_{j,k} (∇σσ)^{·jk}(X_s) J^{kj}_{s,t}
//! ```
//!
//! with `J^{kj}_{s,t} = Σ_i (W^k_{u_i} - W^k_s) δW^j_i`, which is the coordinate
//! contraction `Σ_j Σ_m ∂_m σ^{ik} σ^{mj} (W^j - W^j_s) dW^k` integrated over
//! the step. The truncated variants replace `W_u - W_s` inside the correction
//! by `χ(W_u - W_s)` componentwise.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::brownian::{BrownianLattice, MIN_REFINEMENT_GAP};
use crate::coefficients::{CoefficientField, Cutoff};
use crate::error::{Error, Result};

/// Coordinates beyond this magnitude abort the path.
pub const BLOWUP_THRESHOLD: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    /// Euler–Maruyama.
    Euler,
    /// Milstein with drift.
    Milstein,
    /// Driftless Milstein with truncated correction.
    MilsteinTruncated,
    /// Driftless Milstein.
    MilsteinDriftless,
    /// Truncated Milstein with the drift frozen at the left grid point.
    MilsteinTruncatedDrifted,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::Euler,
        SchemeKind::Milstein,
        SchemeKind::MilsteinTruncated,
        SchemeKind::MilsteinDriftless,
        SchemeKind::MilsteinTruncatedDrifted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Euler => "euler",
            SchemeKind::Milstein => "milstein",
            SchemeKind::MilsteinTruncated => "milstein_truncated",
            SchemeKind::MilsteinDriftless => "milstein_driftless",
            SchemeKind::MilsteinTruncatedDrifted => "milstein_truncated_drifted",
        }
    }

    pub fn has_drift(self) -> bool {
        matches!(
            self,
            SchemeKind::Euler | SchemeKind::Milstein | SchemeKind::MilsteinTruncatedDrifted
        )
    }

    pub fn is_truncated(self) -> bool {
        matches!(
            self,
            SchemeKind::MilsteinTruncated | SchemeKind::MilsteinTruncatedDrifted
        )
    }

    pub fn has_correction(self) -> bool {
        self != SchemeKind::Euler
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Configuration(format!("unknown scheme `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemeConfig {
    pub kind: SchemeKind,
    /// Coarse level `ℓ`, `n = 2^ℓ` steps on [0, 1].
    pub level: u32,
    pub initial_state: Vec<f64>,
    pub cutoff: Option<Cutoff>,
}

impl SchemeConfig {
    pub fn new(kind: SchemeKind, level: u32, initial_state: Vec<f64>) -> Self {
        SchemeConfig {
            kind,
            level,
            initial_state,
            cutoff: None,
        }
    }

    pub fn with_cutoff(mut self, cutoff: Cutoff) -> Self {
        self.cutoff = Some(cutoff);
        self
    }

    pub fn at_level(&self, level: u32) -> Self {
        SchemeConfig { level, ..self.clone() }
    }

    pub fn steps(&self) -> usize {
        1 << self.level
    }

    /// Check against a field and a lattice of `lattice_level` with `dim_noise`
    /// components.
    pub fn validate(&self, field: &CoefficientField, lattice_level: u32, dim_noise: usize) -> Result<()> {
        if self.initial_state.len() != field.dim_state() {
            return Err(Error::Configuration(format!(
                "initial state has {} components, field has d = {}",
                self.initial_state.len(),
                field.dim_state()
            )));
        }
        if dim_noise != field.dim_noise() {
            return Err(Error::Configuration(format!(
                "lattice has d1 = {dim_noise}, field has d1 = {}",
                field.dim_noise()
            )));
        }
        if self.level > lattice_level {
            return Err(Error::InvalidLevel {
                level: self.level,
                reason: format!("exceeds lattice level {lattice_level}"),
            });
        }
        if self.kind.is_truncated() {
            if self.cutoff.is_none() {
                return Err(Error::Configuration(format!("scheme {} requires a cutoff", self.kind)));
            }
            if self.level + MIN_REFINEMENT_GAP > lattice_level {
                return Err(Error::InvalidLevel {
                    level: self.level,
                    reason: format!(
                        "truncated schemes need at least {MIN_REFINEMENT_GAP} levels below the lattice ({lattice_level})"
                    ),
                });
            }
        }
        Ok(())
    }
}

/// One simulated trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedPath {
    pub path_index: u64,
    pub level: u32,
    pub fine_level: u32,
    pub dim_state: usize,
    /// Values at the `2^level + 1` coarse grid points, row-major.
    pub coarse: Vec<f64>,
    /// Values at all `2^fine_level + 1` fine grid points when simulated dense.
    pub dense: Option<Vec<f64>>,
}

impl SimulatedPath {
    pub fn grid_value(&self, k: usize) -> &[f64] {
        &self.coarse[k * self.dim_state..(k + 1) * self.dim_state]
    }

    pub fn final_state(&self) -> &[f64] {
        self.grid_value(1 << self.level)
    }

    pub fn is_dense(&self) -> bool {
        self.dense.is_some()
    }

    pub fn dense_values(&self) -> Option<&[f64]> {
        self.dense.as_deref()
    }

    /// The finest observation grid this path carries: `(level, values)`.
    pub fn observations(&self) -> (u32, &[f64]) {
        match &self.dense {
            Some(v) => (self.fine_level, v),
            None => (self.level, &self.coarse),
        }
    }
}

#[inline]
fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite() && v.abs() <= BLOWUP_THRESHOLD) {
        Ok(())
    } else {
        Err(Error::NumericalBlowup {
            step: None,
            path_index: None,
        })
    }
}

/// `x + b(x)·dt + σ(x)·dW`.
pub fn step_euler(field: &CoefficientField, x: &[f64], dt: f64, dw: &[f64]) -> Result<Vec<f64>> {
    check_step(dt)?;
    let (d, d1) = (field.dim_state(), field.dim_noise());
    let mut b = vec![0.0; d];
    let mut sigma = vec![0.0; d * d1];
    field.drift(x, &mut b);
    field.diffusion(x, &mut sigma);
    let out: Vec<f64> = (0..d)
        .map(|i| x[i] + b[i] * dt + dot(&sigma[i * d1..(i + 1) * d1], dw))
        .collect();
    check_finite(&out)?;
    Ok(out)
}

/// `x + b(x)·dt + σ(x)·dW + Σ_{j,k} (∇σσ)^{ijk}(x) J^{kj}` with
/// `J^{kj} = ∫ (W^k - W^k_s) dW^j` given row-major as a `d1 x d1` matrix.
pub fn step_milstein(field: &CoefficientField, x: &[f64], dt: f64, dw: &[f64], j: &[f64]) -> Result<Vec<f64>> {
    check_step(dt)?;
    let (d, d1) = (field.dim_state(), field.dim_noise());
    if j.len() != d1 * d1 {
        return Err(Error::Configuration(format!(
            "iterated-integral matrix has {} entries, expected {}",
            j.len(),
            d1 * d1
        )));
    }
    let mut b = vec![0.0; d];
    let mut sigma = vec![0.0; d * d1];
    let mut grad = vec![0.0; d * d1 * d];
    let mut tensor = vec![0.0; d * d1 * d1];
    field.drift(x, &mut b);
    field.diffusion(x, &mut sigma);
    field.diffusion_gradient(x, &mut grad);
    field.milstein_tensor(&sigma, &grad, &mut tensor);
    let out: Vec<f64> = (0..d)
        .map(|i| x[i] + b[i] * dt + dot(&sigma[i * d1..(i + 1) * d1], dw) + correction(&tensor, i, d1, j))
        .collect();
    check_finite(&out)?;
    Ok(out)
}

/// One driftless truncated step: `x + Σ_i (σ(x) + ∇σσ(x)·χ(W_{u_i} - W_s)) δW_i`
/// over the fine increments of the step (`sub_increments.len() / d1` rows,
/// at least 16).
pub fn step_milstein_truncated(
    field: &CoefficientField,
    cutoff: &Cutoff,
    x: &[f64],
    sub_increments: &[f64],
) -> Result<Vec<f64>> {
    truncated_step(field, cutoff, x, 0.0, sub_increments, false)
}

/// Truncated step with the drift `b(x)·dt` added.
pub fn step_milstein_truncated_drifted(
    field: &CoefficientField,
    cutoff: &Cutoff,
    x: &[f64],
    dt: f64,
    sub_increments: &[f64],
) -> Result<Vec<f64>> {
    check_step(dt)?;
    truncated_step(field, cutoff, x, dt, sub_increments, true)
}

fn truncated_step(
    field: &CoefficientField,
    cutoff: &Cutoff,
    x: &[f64],
    dt: f64,
    sub: &[f64],
    drift: bool,
) -> Result<Vec<f64>> {
    let (d, d1) = (field.dim_state(), field.dim_noise());
    let rows = sub.len() / d1;
    if rows * d1 != sub.len() || rows < (1 << MIN_REFINEMENT_GAP) {
        return Err(Error::Configuration(format!(
            "truncated step needs at least {} sub-increments of dimension {d1}",
            1 << MIN_REFINEMENT_GAP
        )));
    }
    let mut ws = Workspace::new(d, d1);
    ws.load(field, x, SchemeKind::MilsteinTruncated);
    let mut out = x.to_vec();
    if drift {
        field.drift(x, &mut ws.b);
        for i in 0..d {
            out[i] += ws.b[i] * dt;
        }
    }
    ws.running.fill(0.0);
    ws.acc.fill(0.0);
    for delta in sub.chunks_exact(d1) {
        ws.truncated_substep(cutoff, delta);
    }
    for i in 0..d {
        out[i] += ws.acc[i];
    }
    check_finite(&out)?;
    Ok(out)
}

fn check_step(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("dt", format!("{dt} must be positive")))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Σ_{j,k} T^{ijk} J^{kj}`.
#[inline]
fn correction(tensor: &[f64], i: usize, d1: usize, j: &[f64]) -> f64 {
    let mut acc = 0.0;
    for jj in 0..d1 {
        for k in 0..d1 {
            acc += tensor[(i * d1 + jj) * d1 + k] * j[k * d1 + jj];
        }
    }
    acc
}

/// Scratch buffers reused across steps of one path.
struct Workspace {
    d: usize,
    d1: usize,
    b: Vec<f64>,
    sigma: Vec<f64>,
    grad: Vec<f64>,
    tensor: Vec<f64>,
    /// `W_u - W_s` within the current step.
    running: Vec<f64>,
    chi: Vec<f64>,
    /// Sub-summed iterated integrals within the current step.
    jmat: Vec<f64>,
    /// Accumulated stochastic increment of the truncated schemes.
    acc: Vec<f64>,
    next: Vec<f64>,
}

impl Workspace {
    fn new(d: usize, d1: usize) -> Self {
        Workspace {
            d,
            d1,
            b: vec![0.0; d],
            sigma: vec![0.0; d * d1],
            grad: vec![0.0; d * d1 * d],
            tensor: vec![0.0; d * d1 * d1],
            running: vec![0.0; d1],
            chi: vec![0.0; d1],
            jmat: vec![0.0; d1 * d1],
            acc: vec![0.0; d],
            next: vec![0.0; d],
        }
    }

    fn load(&mut self, field: &CoefficientField, x: &[f64], kind: SchemeKind) {
        if kind.has_drift() {
            field.drift(x, &mut self.b);
        } else {
            self.b.fill(0.0);
        }
        field.diffusion(x, &mut self.sigma);
        if kind.has_correction() {
            field.diffusion_gradient(x, &mut self.grad);
            field.milstein_tensor(&self.sigma, &self.grad, &mut self.tensor);
        }
    }

    #[inline]
    fn truncated_substep(&mut self, cutoff: &Cutoff, delta: &[f64]) {
        let (d, d1) = (self.d, self.d1);
        for k in 0..d1 {
            self.chi[k] = cutoff.evaluate(self.running[k]);
        }
        for i in 0..d {
            let mut inc = 0.0;
            for j in 0..d1 {
                let mut coef = self.sigma[i * d1 + j];
                for k in 0..d1 {
                    coef += self.tensor[(i * d1 + j) * d1 + k] * self.chi[k];
                }
                inc += coef * delta[j];
            }
            self.acc[i] += inc;
        }
        for (r, dl) in self.running.iter_mut().zip(delta) {
            *r += dl;
        }
    }

    #[inline]
    fn plain_substep(&mut self, delta: &[f64], correction: bool) {
        let d1 = self.d1;
        if correction {
            for j in 0..d1 {
                let r = self.running[j];
                for l in 0..d1 {
                    self.jmat[j * d1 + l] += r * delta[l];
                }
            }
        }
        for (r, dl) in self.running.iter_mut().zip(delta) {
            *r += dl;
        }
    }

    /// Plain-scheme state at elapsed time `tau` into the step.
    #[inline]
    fn plain_state(&mut self, x: &[f64], tau: f64, correction_on: bool) {
        let d1 = self.d1;
        for i in 0..self.d {
            let mut v = x[i] + self.b[i] * tau + dot(&self.sigma[i * d1..(i + 1) * d1], &self.running);
            if correction_on {
                v += correction(&self.tensor, i, d1, &self.jmat);
            }
            self.next[i] = v;
        }
    }

    #[inline]
    fn truncated_state(&mut self, x: &[f64], tau: f64) {
        for i in 0..self.d {
            self.next[i] = x[i] + self.b[i] * tau + self.acc[i];
        }
    }
}

/// Run `config` over all coarse steps of `lattice`.
///
/// With `dense = true` the scheme's continuous-time interpolation is also
/// recorded at every fine grid point. At `level == lattice.level_ref()` each
/// coarse step has a single sub-step, so the sub-summed correction vanishes.
pub fn simulate(
    field: &CoefficientField,
    config: &SchemeConfig,
    lattice: &BrownianLattice,
    dense: bool,
) -> Result<SimulatedPath> {
    config.validate(field, lattice.level_ref(), lattice.dim_noise())?;
    let (d, d1) = (field.dim_state(), field.dim_noise());
    let kind = config.kind;
    let steps = config.steps();
    let sub = 1usize << (lattice.level_ref() - config.level);
    let fine_dt = lattice.dt();
    let h = 1.0 / steps as f64;
    let correction_on = kind.has_correction();
    let cutoff = config.cutoff;
    let path_index = lattice.path_index();

    let mut coarse = Vec::with_capacity((steps + 1) * d);
    coarse.extend_from_slice(&config.initial_state);
    let mut dense_buf = if dense {
        let mut v = Vec::with_capacity((lattice.steps() + 1) * d);
        v.extend_from_slice(&config.initial_state);
        Some(v)
    } else {
        None
    };

    let mut ws = Workspace::new(d, d1);
    let mut x = config.initial_state.clone();
    for k in 0..steps {
        ws.load(field, &x, kind);
        ws.running.fill(0.0);
        ws.jmat.fill(0.0);
        ws.acc.fill(0.0);
        let fine = &lattice.increments()[k * sub * d1..(k + 1) * sub * d1];
        for (i, delta) in fine.chunks_exact(d1).enumerate() {
            let last = i + 1 == sub;
            match cutoff.filter(|_| kind.is_truncated()) {
                Some(c) => ws.truncated_substep(&c, delta),
                None => ws.plain_substep(delta, correction_on),
            }
            if let Some(buf) = dense_buf.as_mut() {
                if !last {
                    let tau = (i + 1) as f64 * fine_dt;
                    if kind.is_truncated() {
                        ws.truncated_state(&x, tau);
                    } else {
                        ws.plain_state(&x, tau, correction_on);
                    }
                    buf.extend_from_slice(&ws.next);
                }
            }
        }
        if kind.is_truncated() {
            ws.truncated_state(&x, h);
        } else {
            ws.plain_state(&x, h, correction_on);
        }
        check_finite(&ws.next).map_err(|e| e.at(k, path_index))?;
        x.copy_from_slice(&ws.next);
        coarse.extend_from_slice(&x);
        if let Some(buf) = dense_buf.as_mut() {
            buf.extend_from_slice(&x);
        }
    }
    if let Some(buf) = &dense_buf {
        check_finite(buf).map_err(|e| e.at(steps, path_index))?;
    }

    Ok(SimulatedPath {
        path_index,
        level: config.level,
        fine_level: lattice.level_ref(),
        dim_state: d,
        coarse,
        dense: dense_buf,
    })
}

/// `M` coupled paths of one scheme, one lattice per path index.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    pub config: SchemeConfig,
    pub lattice_level: u32,
    pub dim_noise: usize,
    pub seed: u64,
    /// Successful paths in ascending path-index order.
    pub paths: Vec<SimulatedPath>,
    /// Path indices that blew up, with the error text.
    pub failures: Vec<(u64, String)>,
}

impl PathEnsemble {
    pub fn path_count(&self) -> usize {
        self.paths.len()
    }
}

/// Largest tolerated share of blown-up paths.
pub const MAX_FAILURE_FRACTION: f64 = 1e-3;

/// Run [`simulate`] for `path_index ∈ [0, path_count)` on lattices of
/// `lattice_level` keyed by `seed`. Paths run in parallel; results are
/// gathered in index order.
pub fn simulate_ensemble(
    field: &CoefficientField,
    config: &SchemeConfig,
    lattice_level: u32,
    seed: u64,
    path_count: usize,
    dense: bool,
) -> Result<PathEnsemble> {
    if path_count == 0 {
        return Err(Error::invalid("path_count", "must be at least 1"));
    }
    config.validate(field, lattice_level, field.dim_noise())?;
    let d1 = field.dim_noise();
    let results: Vec<Result<SimulatedPath>> = (0..path_count as u64)
        .into_par_iter()
        .map(|p| {
            let lattice = BrownianLattice::generate(d1, lattice_level, seed, p)?;
            simulate(field, config, &lattice, dense)
        })
        .collect();
    let mut paths = Vec::with_capacity(path_count);
    let mut failures = Vec::new();
    let mut first_error = None;
    for (p, r) in results.into_iter().enumerate() {
        match r {
            Ok(path) => paths.push(path),
            Err(e) => {
                failures.push((p as u64, e.to_string()));
                first_error.get_or_insert(e);
            }
        }
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * path_count as f64 {
        return Err(Error::EnsembleFailure {
            failed: failures.len(),
            total: path_count,
            first: Box::new(first_error.expect("failures imply an error")),
        });
    }
    Ok(PathEnsemble {
        config: config.clone(),
        lattice_level,
        dim_noise: d1,
        seed,
        paths,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::{generate_lattice, good_event_indicator, iterated_integrals};
    use crate::coefficients::{holder_drift_family, make_cutoff, DiffusionPart, DriftPart};
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn brownian_field(d: usize) -> CoefficientField {
        CoefficientField::new(DriftPart::zero(d), DiffusionPart::identity(d, d)).unwrap()
    }

    fn gbm_field() -> CoefficientField {
        CoefficientField::new(DriftPart::zero(1), DiffusionPart::geometric()).unwrap()
    }

    #[test]
    fn euler_degenerate_cases() {
        let f = brownian_field(2);
        assert_eq!(step_euler(&f, &[1.0, 2.0], 0.1, &[0.3, -0.2]).unwrap(), vec![1.3, 1.8]);
        let c = CoefficientField::new(DriftPart::constant(vec![2.0]), DiffusionPart::identity(1, 1)).unwrap();
        assert_eq!(step_euler(&c, &[1.0], 0.25, &[0.0]).unwrap(), vec![1.5]);
        assert!(step_euler(&c, &[1.0], 0.0, &[0.0]).is_err());
    }

    #[test]
    fn euler_with_holder_drift() {
        let f = CoefficientField::new(
            holder_drift_family(0.5, 1.0, 1.0, 1).unwrap(),
            DiffusionPart::identity(1, 1),
        )
        .unwrap();
        let out = step_euler(&f, &[PI / 2.0], 0.1, &[0.2]).unwrap();
        assert!((out[0] - (PI / 2.0 + 0.1 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn milstein_reduces_to_euler_for_constant_sigma() {
        let f = CoefficientField::new(
            holder_drift_family(0.5, 1.0, 1.0, 2).unwrap(),
            DiffusionPart::constant(2, 2, vec![1.0, 0.5, 0.0, 2.0]),
        )
        .unwrap();
        let x = [0.3, -0.7];
        let e = step_euler(&f, &x, 0.01, &[0.1, 0.05]).unwrap();
        let m = step_milstein(&f, &x, 0.01, &[0.1, 0.05], &[0.3, 0.2, -0.1, 0.4]).unwrap();
        assert_eq!(e, m);
    }

    #[test]
    fn milstein_scalar_linear_diffusion() {
        // σ(x) = x, b = 0: x + x·dW + x·J
        let f = gbm_field();
        let out = step_milstein(&f, &[2.0], 0.01, &[0.1], &[-0.003]).unwrap();
        assert!((out[0] - (2.0 + 2.0 * 0.1 + 2.0 * -0.003)).abs() < 1e-15);
    }

    #[test]
    fn milstein_index_contraction_two_dims() {
        // σ(x) = [[x0, 0], [0, 1]] with d = d1 = 2. Only ∂_0 σ^{00} = 1, so
        // (∇σσ)^{0jk} = ∂_0σ^{0j} σ^{0k} is non-zero only for j = 0, k = 0:
        // the correction in coordinate 0 is x0·J^{00}.
        let sigma = DiffusionPart::custom(
            "test",
            2,
            2,
            Arc::new(|x: &[f64], o: &mut [f64]| o.copy_from_slice(&[x[0], 0.0, 0.0, 1.0])),
            Arc::new(|_: &[f64], o: &mut [f64]| {
                o.fill(0.0);
                o[0] = 1.0;
            }),
            1.0,
            1.0,
        );
        let f = CoefficientField::new(DriftPart::zero(2), sigma).unwrap();
        let j = [0.5, 0.25, -0.125, 0.0625];
        let out = step_milstein(&f, &[3.0, 0.0], 0.01, &[0.0, 0.0], &j).unwrap();
        assert_eq!(out, vec![3.0 + 3.0 * 0.5, 0.0]);

        // σ(x) = [[1, x0], [0, 1]]: ∂_0 σ^{01} = 1, so (∇σσ)^{01k} = σ^{0k}
        // = (1, x0) and coordinate 0 picks Σ_k σ^{0k} J^{k1}.
        let sigma = DiffusionPart::custom(
            "test",
            2,
            2,
            Arc::new(|x: &[f64], o: &mut [f64]| o.copy_from_slice(&[1.0, x[0], 0.0, 1.0])),
            Arc::new(|_: &[f64], o: &mut [f64]| {
                o.fill(0.0);
                o[2] = 1.0; // ∂_1 σ^{12}
            }),
            1.0,
            1.0,
        );
        let f = CoefficientField::new(DriftPart::zero(2), sigma).unwrap();
        let out = step_milstein(&f, &[2.0, 0.0], 0.01, &[0.0, 0.0], &j).unwrap();
        let expect = 2.0 + 1.0 * j[1] + 2.0 * j[3];
        assert!((out[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn truncated_step_on_plateau_matches_milstein() {
        let f = gbm_field();
        let cutoff = Cutoff::new(10.0).unwrap();
        let lattice = generate_lattice(1, 8, 3, 0).unwrap();
        let ii = iterated_integrals(&lattice, 4).unwrap();
        let sub = &lattice.increments()[..16];
        let a = step_milstein_truncated(&f, &cutoff, &[1.3], sub).unwrap();
        let b = step_milstein(&f, &[1.3], 1.0 / 16.0, ii.increment(0), ii.step(0)).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-14);
    }

    #[test]
    fn truncated_step_constant_sigma_ignores_cutoff() {
        let f = CoefficientField::new(DriftPart::zero(1), DiffusionPart::constant(1, 1, vec![0.7])).unwrap();
        let cutoff = Cutoff::new(1e-3).unwrap();
        let sub: Vec<f64> = (0..16).map(|i| 0.1 * ((i as f64) - 7.5)).collect();
        let total: f64 = sub.iter().sum();
        let out = step_milstein_truncated(&f, &cutoff, &[0.0], &sub).unwrap();
        assert!((out[0] - 0.7 * total).abs() < 1e-14);
    }

    #[test]
    fn truncated_step_excursion_contributes_only_sigma() {
        // σ(x) = x at x = 1; cutoff κ = 0.5. Sub-increments: one large jump
        // first, so every later left point sits at |W - W_s| ≥ κ.
        let f = gbm_field();
        let cutoff = Cutoff::new(0.5).unwrap();
        let mut sub = vec![0.01; 16];
        sub[0] = 1.0;
        let out = step_milstein_truncated(&f, &cutoff, &[1.0], &sub).unwrap();
        // sub-step 0: χ(0) = 0; sub-steps 1..15: χ(≥ 1.0) = 0.
        let expect = 1.0 + 1.0 * (1.0 + 15.0 * 0.01);
        assert!((out[0] - expect).abs() < 1e-14);

        // same increments but small: all on plateau, correction is x·J
        let small = vec![0.01; 16];
        let out = step_milstein_truncated(&f, &cutoff, &[1.0], &small).unwrap();
        let j: f64 = (0..16).map(|i| 0.01 * i as f64 * 0.01).sum();
        assert!((out[0] - (1.0 + 0.16 + j)).abs() < 1e-14);
    }

    #[test]
    fn truncated_step_requires_refinement() {
        let f = gbm_field();
        let c = Cutoff::new(1.0).unwrap();
        assert!(step_milstein_truncated(&f, &c, &[1.0], &[0.1; 8]).is_err());
    }

    #[test]
    fn brownian_path_at_grid_points() {
        let f = brownian_field(1);
        let lattice = generate_lattice(1, 12, 5, 1).unwrap();
        let w = lattice.path_values();
        for level in [0, 3, 8, 12] {
            let path = simulate(
                &f,
                &SchemeConfig::new(SchemeKind::Milstein, level, vec![0.5]),
                &lattice,
                true,
            )
            .unwrap();
            let stride = 1 << (12 - level);
            for k in 0..=(1 << level) {
                assert!((path.grid_value(k)[0] - (0.5 + w[k * stride])).abs() < 1e-12);
            }
            let dense = path.dense_values().unwrap();
            for (i, v) in dense.iter().enumerate() {
                assert!((v - (0.5 + w[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn truncated_requires_cutoff_and_gap() {
        let f = gbm_field();
        let lattice = generate_lattice(1, 8, 5, 1).unwrap();
        let cfg = SchemeConfig::new(SchemeKind::MilsteinTruncated, 3, vec![1.0]);
        assert!(matches!(
            simulate(&f, &cfg, &lattice, false),
            Err(Error::Configuration(_))
        ));
        let cfg = cfg.with_cutoff(Cutoff::new(1.0).unwrap());
        assert!(simulate(&f, &cfg, &lattice, false).is_ok());
        assert!(matches!(
            simulate(&f, &cfg.at_level(5), &lattice, false),
            Err(Error::InvalidLevel { .. })
        ));
        assert!(matches!(
            simulate(&f, &SchemeConfig::new(SchemeKind::Euler, 9, vec![1.0]), &lattice, false),
            Err(Error::InvalidLevel { .. })
        ));
    }

    #[test]
    fn gbm_exact_iterated_integral_error_small() {
        // exact solution x0·exp(-t/2 + W_t), scalar J = (ΔW² - h)/2
        let f = gbm_field();
        let h = 1.0 / 4096.0;
        let total = 200;
        let mut within = 0;
        for p in 0..total {
            let lattice = generate_lattice(1, 12, 77, p).unwrap();
            let (mut x, mut w, mut sup) = (1.0f64, 0.0, 0.0f64);
            for (k, dw) in lattice.increments().iter().enumerate() {
                x = step_milstein(&f, &[x], h, &[*dw], &[(dw * dw - h) / 2.0]).unwrap()[0];
                w += dw;
                sup = sup.max((x - (-((k + 1) as f64) * h / 2.0 + w).exp()).abs());
            }
            if sup < 0.01 {
                within += 1;
            }
        }
        assert!(within as f64 >= 0.99 * total as f64, "{within}/{total}");
    }

    #[test]
    fn gbm_subsummed_error_small() {
        // sub-summed J carries an extra O(2^{-L/2}) bias from the lattice
        // quadratic variation, so the bound is looser than with exact J
        let f = gbm_field();
        let mut within = 0;
        let total = 200;
        for p in 0..total {
            let lattice = generate_lattice(1, 16, 77, p).unwrap();
            let path = simulate(
                &f,
                &SchemeConfig::new(SchemeKind::Milstein, 12, vec![1.0]),
                &lattice,
                false,
            )
            .unwrap();
            let w = lattice.path_values();
            let sup = (0..=(1usize << 12))
                .map(|k| {
                    let t = k as f64 / 4096.0;
                    (path.grid_value(k)[0] - (-t / 2.0 + w[k * 16]).exp()).abs()
                })
                .fold(0.0, f64::max);
            if sup < 0.05 {
                within += 1;
            }
        }
        assert!(within as f64 >= 0.99 * total as f64, "{within}/{total}");
    }

    #[test]
    fn blowup_reports_step_and_path() {
        let f = CoefficientField::new(DriftPart::constant(vec![1e13]), DiffusionPart::identity(1, 1)).unwrap();
        let lattice = generate_lattice(1, 6, 0, 9).unwrap();
        match simulate(&f, &SchemeConfig::new(SchemeKind::Euler, 2, vec![0.0]), &lattice, false) {
            Err(Error::NumericalBlowup { step, path_index }) => {
                assert_eq!(step, Some(0));
                assert_eq!(path_index, Some(9));
            }
            other => panic!("expected blowup, got {other:?}"),
        }
    }

    #[test]
    fn truncated_coincides_with_plain_on_good_event() {
        let sigma = crate::coefficients::elliptic_diffusion_family(1.0, 0.25, 1, 1).unwrap();
        // the certified κ ≈ 0.094 makes Ω̂ rare at level 8; a wider cutoff
        // exercises the same identity on most paths
        assert!(make_cutoff(sigma.lambda, sigma.k_bound, 1).unwrap().kappa() < 0.1);
        let cutoff = Cutoff::new(0.5).unwrap();
        let f = CoefficientField::new(DriftPart::zero(1), sigma).unwrap();
        let plain = SchemeConfig::new(SchemeKind::MilsteinDriftless, 8, vec![0.2]);
        let trunc = SchemeConfig::new(SchemeKind::MilsteinTruncated, 8, vec![0.2]).with_cutoff(cutoff);
        let mut good = 0;
        for p in 0..200 {
            let lattice = generate_lattice(1, 14, 1, p).unwrap();
            if !good_event_indicator(&lattice, 8, cutoff.kappa()).unwrap() {
                continue;
            }
            good += 1;
            let a = simulate(&f, &plain, &lattice, true).unwrap();
            let b = simulate(&f, &trunc, &lattice, true).unwrap();
            for (u, v) in a.dense_values().unwrap().iter().zip(b.dense_values().unwrap()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        assert!(good > 150, "too few good paths: {good}");
    }

    #[test]
    fn ensemble_is_deterministic_and_matches_single() {
        let f = gbm_field();
        let cfg = SchemeConfig::new(SchemeKind::Milstein, 5, vec![1.0]);
        let a = simulate_ensemble(&f, &cfg, 10, 3, 8, true).unwrap();
        let b = simulate_ensemble(&f, &cfg, 10, 3, 8, true).unwrap();
        assert_eq!(a.paths, b.paths);
        let single = simulate(&f, &cfg, &generate_lattice(1, 10, 3, 0).unwrap(), true).unwrap();
        assert_eq!(a.paths[0], single);
        let one = simulate_ensemble(&f, &cfg, 10, 3, 1, true).unwrap();
        assert_eq!(one.paths, vec![single]);
        assert!(simulate_ensemble(&f, &cfg, 10, 3, 0, true).is_err());
    }

    #[test]
    fn ensemble_fails_when_paths_blow_up() {
        let f = CoefficientField::new(DriftPart::constant(vec![1e13]), DiffusionPart::identity(1, 1)).unwrap();
        let cfg = SchemeConfig::new(SchemeKind::Euler, 2, vec![0.0]);
        assert!(matches!(
            simulate_ensemble(&f, &cfg, 6, 0, 4, false),
            Err(Error::EnsembleFailure {
                failed: 4,
                total: 4,
                ..
            })
        ));
    }

    #[test]
    fn scheme_names_round_trip() {
        for k in SchemeKind::ALL {
            assert_eq!(k.name().parse::<SchemeKind>().unwrap(), k);
        }
        assert!("heun".parse::<SchemeKind>().is_err());
    }
}
