//! Path functionals evaluated on simulated trajectories.

use rayon::prelude::*;

use crate::brownian::BrownianLattice;
use crate::coefficients::{CoefficientField, Cutoff};
use crate::error::{Error, Result};
use crate::schemes::{PathEnsemble, SimulatedPath};

/// Value of one functional on one path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FunctionalSample {
    pub path_index: u64,
    pub value: f64,
}

/// Euclidean sup-distance between two trajectories over their shared grid
/// points. Both must come from lattices of the same fine level; the shared
/// grid is the coarser of the two observation grids.
pub fn sup_distance(path_a: &SimulatedPath, path_b: &SimulatedPath) -> Result<f64> {
    if path_a.dim_state != path_b.dim_state {
        return Err(Error::IncompatiblePaths(format!(
            "state dimensions {} and {}",
            path_a.dim_state, path_b.dim_state
        )));
    }
    if path_a.fine_level != path_b.fine_level {
        return Err(Error::IncompatiblePaths(format!(
            "fine levels {} and {}",
            path_a.fine_level, path_b.fine_level
        )));
    }
    let (la, va) = path_a.observations();
    let (lb, vb) = path_b.observations();
    Ok(sup_distance_on_grids(la, va, lb, vb, path_a.dim_state))
}

/// Sup-distance between trajectories observed at dyadic levels `level_a` and
/// `level_b`, compared at the points of the coarser grid.
pub fn sup_distance_on_grids(level_a: u32, a: &[f64], level_b: u32, b: &[f64], d: usize) -> f64 {
    let shared = level_a.min(level_b);
    let stride_a = 1usize << (level_a - shared);
    let stride_b = 1usize << (level_b - shared);
    let mut sup = 0.0f64;
    for k in 0..=(1usize << shared) {
        let xa = &a[k * stride_a * d..k * stride_a * d + d];
        let xb = &b[k * stride_b * d..k * stride_b * d + d];
        let dist2: f64 = xa.iter().zip(xb).map(|(u, v)| (u - v) * (u - v)).sum();
        sup = sup.max(dist2);
    }
    sup.sqrt()
}

fn require_dense(path: &SimulatedPath, level: u32) -> Result<&[f64]> {
    let dense = path
        .dense_values()
        .ok_or_else(|| Error::Configuration("functional needs a dense path (fine-grid observations)".into()))?;
    if level > path.fine_level {
        return Err(Error::InvalidLevel {
            level,
            reason: format!("exceeds the path's fine level {}", path.fine_level),
        });
    }
    Ok(dense)
}

/// `sup_t |∫_0^t h(X_r)(f(X_r) - f(X_{k_n(r)})) dr|` with `n = 2^level`.
///
/// The integrand is sampled at every fine grid point and integrated by the
/// left-point rectangle rule; the supremum runs over fine grid times.
pub fn additive_functional<H, F>(h: H, f: F, path: &SimulatedPath, level: u32) -> Result<f64>
where
    H: Fn(&[f64]) -> f64,
    F: Fn(&[f64]) -> f64,
{
    Ok(additive_integral(h, f, path, level)?
        .into_iter()
        .fold(0.0, |sup, v| sup.max(v.abs())))
}

/// The running integral behind [`additive_functional`] at every fine grid
/// time, starting with 0 at `t = 0`.
pub fn additive_integral<H, F>(h: H, f: F, path: &SimulatedPath, level: u32) -> Result<Vec<f64>>
where
    H: Fn(&[f64]) -> f64,
    F: Fn(&[f64]) -> f64,
{
    let values = require_dense(path, level)?;
    let d = path.dim_state;
    let fine_steps = 1usize << path.fine_level;
    let stride = 1usize << (path.fine_level - level);
    let dt = 1.0 / fine_steps as f64;
    let mut integral = 0.0f64;
    let mut out = Vec::with_capacity(fine_steps + 1);
    out.push(0.0);
    let mut f_anchor = 0.0;
    for i in 0..fine_steps {
        let x = &values[i * d..(i + 1) * d];
        let fx = f(x);
        if i % stride == 0 {
            f_anchor = fx;
        }
        integral += h(x) * (fx - f_anchor) * dt;
        out.push(integral);
    }
    Ok(out)
}

/// Girsanov density turning the driftless truncated scheme into the drifted
/// truncated one:
///
/// ```text
/// ρ = exp(-∫ v_r·dW_r - ½∫ |v_r|² dr),  v_r = (σ + ∇σσ·χ(W_r - W_{k_n(r)}))^{-1} b  at X̂_{k_n(r)}
/// ```
///
/// The stochastic integral is a left-point sum over the fine increments and
/// the time integral a rectangle rule, so each fine factor has conditional
/// mean one.
pub fn girsanov_weight(
    field: &CoefficientField,
    cutoff: &Cutoff,
    driftless_path: &SimulatedPath,
    lattice: &BrownianLattice,
    level: u32,
) -> Result<f64> {
    let d = field.dim_state();
    let d1 = field.dim_noise();
    if d != d1 {
        return Err(Error::Configuration(format!(
            "Girsanov weight needs a square diffusion (d = {d}, d1 = {d1})"
        )));
    }
    if driftless_path.fine_level != lattice.level_ref() || driftless_path.path_index != lattice.path_index() {
        return Err(Error::IncompatiblePaths(
            "path was not simulated on this lattice".into(),
        ));
    }
    if level > lattice.level_ref() {
        return Err(Error::InvalidLevel {
            level,
            reason: format!("exceeds lattice level {}", lattice.level_ref()),
        });
    }
    let (obs_level, obs) = driftless_path.observations();
    if obs_level < level {
        return Err(Error::InvalidLevel {
            level,
            reason: format!("path is only observed at level {obs_level}"),
        });
    }
    let obs_stride = 1usize << (obs_level - level);
    let sub = 1usize << (lattice.level_ref() - level);
    let dt = lattice.dt();

    let mut sigma = vec![0.0; d * d1];
    let mut grad = vec![0.0; d * d1 * d];
    let mut tensor = vec![0.0; d * d1 * d1];
    let mut b = vec![0.0; d];
    let mut running = vec![0.0; d1];
    let mut chi = vec![0.0; d1];
    let mut matrix = vec![0.0; d * d];
    let mut v = vec![0.0; d];
    let mut stochastic = 0.0;
    let mut quadratic = 0.0;

    for k in 0..(1usize << level) {
        let x = &obs[k * obs_stride * d..(k * obs_stride + 1) * d];
        field.drift(x, &mut b);
        field.diffusion(x, &mut sigma);
        field.diffusion_gradient(x, &mut grad);
        field.milstein_tensor(&sigma, &grad, &mut tensor);
        running.fill(0.0);
        for i in 0..sub {
            for l in 0..d1 {
                chi[l] = cutoff.evaluate(running[l]);
            }
            for r in 0..d {
                for c in 0..d1 {
                    let mut m = sigma[r * d1 + c];
                    for l in 0..d1 {
                        m += tensor[(r * d1 + c) * d1 + l] * chi[l];
                    }
                    matrix[r * d1 + c] = m;
                }
            }
            v.copy_from_slice(&b);
            solve_in_place(&mut matrix, &mut v, d).map_err(|_| Error::SingularMatrix { witness: x.to_vec() })?;
            let delta = lattice.increment(k * sub + i);
            for l in 0..d {
                stochastic += v[l] * delta[l];
                quadratic += v[l] * v[l] * dt;
            }
            for (r, dl) in running.iter_mut().zip(delta) {
                *r += dl;
            }
        }
    }
    Ok((-stochastic - 0.5 * quadratic).exp())
}

/// Solve `A x = rhs` for a small dense `n x n` matrix by LU with partial
/// pivoting; `a` is destroyed and `rhs` overwritten with the solution.
pub(crate) fn solve_in_place(a: &mut [f64], rhs: &mut [f64], n: usize) -> std::result::Result<(), ()> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(());
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if a[pivot * n + col].abs() <= 1e-14 * scale {
            return Err(());
        }
        if pivot != col {
            for c in 0..n {
                a.swap(col * n + c, pivot * n + c);
            }
            rhs.swap(col, pivot);
        }
        for r in col + 1..n {
            let factor = a[r * n + col] / a[col * n + col];
            if factor != 0.0 {
                for c in col..n {
                    a[r * n + c] -= factor * a[col * n + c];
                }
                rhs[r] -= factor * rhs[col];
            }
        }
    }
    for r in (0..n).rev() {
        let mut acc = rhs[r];
        for c in r + 1..n {
            acc -= a[r * n + c] * rhs[c];
        }
        rhs[r] = acc / a[r * n + r];
    }
    Ok(())
}

/// Residual of the first-order local expansion at every fine time `t`:
///
/// ```text
/// f(X_t) - f(X_{k_n(t)}) - [∇f σ](X_{k_n(t)})·(W_t - W_{k_n(t)})
/// ```
///
/// Entries at coarse grid points are exactly zero.
pub fn local_expansion_residual<F, G>(
    field: &CoefficientField,
    f: F,
    grad_f: G,
    path: &SimulatedPath,
    lattice: &BrownianLattice,
    level: u32,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64], &mut [f64]),
{
    let values = require_dense(path, level)?;
    if path.fine_level != lattice.level_ref() || path.path_index != lattice.path_index() {
        return Err(Error::IncompatiblePaths(
            "path was not simulated on this lattice".into(),
        ));
    }
    let d = field.dim_state();
    let d1 = field.dim_noise();
    let fine_steps = 1usize << path.fine_level;
    let stride = 1usize << (path.fine_level - level);
    let mut sigma = vec![0.0; d * d1];
    let mut gf = vec![0.0; d];
    let mut loading = vec![0.0; d1];
    let mut running = vec![0.0; d1];
    let mut f_anchor = 0.0;
    let mut out = Vec::with_capacity(fine_steps + 1);
    for i in 0..=fine_steps {
        let x = &values[i * d..(i + 1) * d];
        if i % stride == 0 {
            field.diffusion(x, &mut sigma);
            grad_f(x, &mut gf);
            for (j, l) in loading.iter_mut().enumerate() {
                *l = (0..d).map(|m| gf[m] * sigma[m * d1 + j]).sum();
            }
            running.fill(0.0);
            f_anchor = f(x);
            out.push(0.0);
        } else {
            let lin: f64 = loading.iter().zip(&running).map(|(a, w)| a * w).sum();
            out.push(f(x) - f_anchor - lin);
        }
        if i < fine_steps {
            for (r, dl) in running.iter_mut().zip(lattice.increment(i)) {
                *r += dl;
            }
        }
    }
    Ok(out)
}

/// [`additive_functional`] on every path of a dense ensemble, in path order.
pub fn additive_functional_ensemble<H, F>(
    h: H,
    f: F,
    ensemble: &PathEnsemble,
    level: u32,
) -> Result<Vec<FunctionalSample>>
where
    H: Fn(&[f64]) -> f64 + Sync,
    F: Fn(&[f64]) -> f64 + Sync,
{
    ensemble
        .paths
        .par_iter()
        .map(|p| {
            additive_functional(&h, &f, p, level).map(|value| FunctionalSample {
                path_index: p.path_index,
                value,
            })
        })
        .collect()
}
