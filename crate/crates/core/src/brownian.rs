//! Driving Brownian motion on a dyadic lattice.
//!
//! A [`BrownianLattice`] stores the increments of a `d1`-dimensional Brownian
//! path on the finest grid `t_k = k / 2^L`. Every coarser level is obtained by
//! summing children, so schemes run at different resolutions on the same
//! lattice are strongly coupled.

use std::io::{Read, Write};

use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

pub const MIN_LEVEL_REF: u32 = 1;
pub const MAX_LEVEL_REF: u32 = 24;

/// Smallest number of dyadic levels between a coarse step and the lattice for
/// sub-summed iterated integrals (16 sub-steps).
pub const MIN_REFINEMENT_GAP: u32 = 4;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless counter-based generator: the `i`-th draw of stream `(seed,
/// stream)` is a pure function of `(seed, stream, i)`.
#[derive(Clone, Debug)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        CounterRng {
            key: Self::key(seed, stream),
            counter: 0,
        }
    }

    #[inline]
    pub fn key(seed: u64, stream: u64) -> u64 {
        mix64(mix64(seed ^ 0x6a09_e667_f3bc_c908).wrapping_add(stream.wrapping_mul(GOLDEN)) ^ 0xbb67_ae85_84ca_a73b)
    }

    #[inline]
    pub fn bits_at(key: u64, counter: u64) -> u64 {
        mix64(mix64(counter.wrapping_add(1).wrapping_mul(GOLDEN)) ^ key)
    }

    /// Uniform in the open interval (0, 1) with 53 random bits.
    #[inline]
    pub fn uniform_at(key: u64, counter: u64) -> f64 {
        ((Self::bits_at(key, counter) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal by inverse CDF of [`CounterRng::uniform_at`].
    #[inline]
    pub fn normal_at(key: u64, counter: u64) -> f64 {
        standard_normal_quantile(Self::uniform_at(key, counter))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = Self::bits_at(self.key, self.counter);
        self.counter += 1;
        v
    }

    pub fn uniform(&mut self) -> f64 {
        let v = Self::uniform_at(self.key, self.counter);
        self.counter += 1;
        v
    }

    pub fn normal(&mut self) -> f64 {
        let v = Self::normal_at(self.key, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}

#[inline]
pub fn standard_normal_quantile(u: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
}

/// Brownian increments on the dyadic grid of `2^level_ref` steps over [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianLattice {
    dim_noise: usize,
    level_ref: u32,
    seed: u64,
    path_index: u64,
    /// Step-major, component-minor: `increments[k * d1 + l]`.
    increments: Vec<f64>,
}

pub fn generate_lattice(dim_noise: usize, level_ref: u32, seed: u64, path_index: u64) -> Result<BrownianLattice> {
    BrownianLattice::generate(dim_noise, level_ref, seed, path_index)
}

/// `level_ref` within `[MIN_LEVEL_REF, MAX_LEVEL_REF]`.
pub fn check_level_ref(level_ref: u32) -> Result<()> {
    if !(MIN_LEVEL_REF..=MAX_LEVEL_REF).contains(&level_ref) {
        return Err(Error::ResourceGuard(level_ref));
    }
    Ok(())
}

impl BrownianLattice {
    /// Increments `N(0, 2^{-L})` keyed by `(seed, path_index, step, component)`.
    pub fn generate(dim_noise: usize, level_ref: u32, seed: u64, path_index: u64) -> Result<Self> {
        check_level_ref(level_ref)?;
        if dim_noise == 0 {
            return Err(Error::invalid("dim_noise", "must be positive"));
        }
        let steps = 1usize << level_ref;
        let scale = (1.0 / steps as f64).sqrt();
        let key = CounterRng::key(seed, path_index);
        let increments = (0..(steps * dim_noise) as u64)
            .map(|c| scale * CounterRng::normal_at(key, c))
            .collect();
        Ok(BrownianLattice {
            dim_noise,
            level_ref,
            seed,
            path_index,
            increments,
        })
    }

    /// Lattice with caller-supplied increments (tests and replays).
    pub fn from_increments(
        dim_noise: usize,
        level_ref: u32,
        seed: u64,
        path_index: u64,
        increments: Vec<f64>,
    ) -> Result<Self> {
        check_level_ref(level_ref)?;
        if dim_noise == 0 {
            return Err(Error::invalid("dim_noise", "must be positive"));
        }
        if increments.len() != (1usize << level_ref) * dim_noise {
            return Err(Error::invalid(
                "increments",
                format!(
                    "expected {} values, got {}",
                    (1usize << level_ref) * dim_noise,
                    increments.len()
                ),
            ));
        }
        Ok(BrownianLattice {
            dim_noise,
            level_ref,
            seed,
            path_index,
            increments,
        })
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn level_ref(&self) -> u32 {
        self.level_ref
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    pub fn steps(&self) -> usize {
        1 << self.level_ref
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps() as f64
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    #[inline]
    pub fn increment(&self, step: usize) -> &[f64] {
        &self.increments[step * self.dim_noise..(step + 1) * self.dim_noise]
    }

    /// `W` at every fine grid point, `(2^L + 1) x d1`, starting at zero.
    pub fn path_values(&self) -> Vec<f64> {
        let d1 = self.dim_noise;
        let mut out = Vec::with_capacity((self.steps() + 1) * d1);
        out.extend(std::iter::repeat(0.0).take(d1));
        for k in 0..self.steps() {
            for l in 0..d1 {
                let prev = out[k * d1 + l];
                out.push(prev + self.increments[k * d1 + l]);
            }
        }
        out
    }

    /// `W_1`, i.e. the single level-0 increment.
    pub fn endpoint(&self) -> Vec<f64> {
        self.pairwise_coarsen(0)
    }

    /// Increments at `level`, each the sum of its `2^{L - level}` fine
    /// children. Sums are formed by halving one level at a time, so level
    /// `l - 1` is bitwise the pairwise sum of level `l`.
    pub fn coarse_increments(&self, level: u32) -> Result<Vec<f64>> {
        if level > self.level_ref {
            return Err(Error::InvalidLevel {
                level,
                reason: format!("exceeds lattice level {}", self.level_ref),
            });
        }
        Ok(self.pairwise_coarsen(level))
    }

    fn pairwise_coarsen(&self, level: u32) -> Vec<f64> {
        let d1 = self.dim_noise;
        let mut current = self.increments.clone();
        for _ in level..self.level_ref {
            let half = current.len() / (2 * d1);
            let mut next = Vec::with_capacity(half * d1);
            for k in 0..half {
                for l in 0..d1 {
                    next.push(current[2 * k * d1 + l] + current[(2 * k + 1) * d1 + l]);
                }
            }
            current = next;
        }
        current
    }

    /// Binary dump: header `(dim_noise, level_ref, seed, path_index)` as
    /// little-endian u64, then increments as little-endian f64 in step-major,
    /// component-minor order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for v in [self.dim_noise as u64, self.level_ref as u64, self.seed, self.path_index] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.increments {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut header = [0u64; 4];
        for h in header.iter_mut() {
            r.read_exact(&mut word)?;
            *h = u64::from_le_bytes(word);
        }
        let [dim_noise, level_ref, seed, path_index] = header;
        let level_ref = u32::try_from(level_ref).map_err(|_| Error::ResourceGuard(u32::MAX))?;
        check_level_ref(level_ref)?;
        let dim_noise = dim_noise as usize;
        let len = (1usize << level_ref)
            .checked_mul(dim_noise)
            .ok_or_else(|| Error::invalid("dim_noise", "header dimensions overflow"))?;
        let mut increments = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut word)?;
            increments.push(f64::from_le_bytes(word));
        }
        Self::from_increments(dim_noise, level_ref, seed, path_index, increments)
    }
}

/// Per coarse step `[s, t]`, the sub-summed iterated integrals
/// `J^{jl} = Σ_i (W^j_{u_i} - W^j_s)(W^l_{u_{i+1}} - W^l_{u_i})` together with
/// the step increment `ΔW` and fine quadratic covariation `Q^{jl}`.
#[derive(Clone, Debug)]
pub struct IteratedIntegrals {
    pub level: u32,
    pub dim_noise: usize,
    /// `values[(k * d1 + j) * d1 + l]` is `J^{jl}` on step `k`.
    pub values: Vec<f64>,
    /// Running-sum increments `ΔW` per step.
    pub increments: Vec<f64>,
    /// `Q^{jl} = Σ_i δW^j_i δW^l_i` per step.
    pub quadratic: Vec<f64>,
}

impl IteratedIntegrals {
    pub fn steps(&self) -> usize {
        1 << self.level
    }

    pub fn step(&self, k: usize) -> &[f64] {
        let m = self.dim_noise * self.dim_noise;
        &self.values[k * m..(k + 1) * m]
    }

    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim_noise..(k + 1) * self.dim_noise]
    }

    pub fn quadratic(&self, k: usize) -> &[f64] {
        let m = self.dim_noise * self.dim_noise;
        &self.quadratic[k * m..(k + 1) * m]
    }
}

/// Left-point sub-summation of `∫(W^j - W^j_s) dW^l` over `sub` fine
/// increments (`sub.len() / d1` rows). Writes `J`, returns nothing; `running`
/// ends as `ΔW`.
#[inline]
pub(crate) fn accumulate_iterated(sub: &[f64], d1: usize, running: &mut [f64], j_out: &mut [f64]) {
    running.fill(0.0);
    j_out.fill(0.0);
    for delta in sub.chunks_exact(d1) {
        for j in 0..d1 {
            let r = running[j];
            for l in 0..d1 {
                j_out[j * d1 + l] += r * delta[l];
            }
        }
        for (r, d) in running.iter_mut().zip(delta) {
            *r += d;
        }
    }
}

pub fn iterated_integrals(lattice: &BrownianLattice, level: u32) -> Result<IteratedIntegrals> {
    if level + MIN_REFINEMENT_GAP > lattice.level_ref() {
        return Err(Error::InvalidLevel {
            level,
            reason: format!(
                "iterated integrals need at least {MIN_REFINEMENT_GAP} levels below the lattice (level {})",
                lattice.level_ref()
            ),
        });
    }
    let d1 = lattice.dim_noise();
    let steps = 1usize << level;
    let sub = 1usize << (lattice.level_ref() - level);
    let mut values = vec![0.0; steps * d1 * d1];
    let mut increments = vec![0.0; steps * d1];
    let mut quadratic = vec![0.0; steps * d1 * d1];
    for k in 0..steps {
        let fine = &lattice.increments()[k * sub * d1..(k + 1) * sub * d1];
        let (jv, inc) = (
            &mut values[k * d1 * d1..(k + 1) * d1 * d1],
            &mut increments[k * d1..(k + 1) * d1],
        );
        accumulate_iterated(fine, d1, inc, jv);
        let q = &mut quadratic[k * d1 * d1..(k + 1) * d1 * d1];
        for delta in fine.chunks_exact(d1) {
            for j in 0..d1 {
                for l in 0..d1 {
                    q[j * d1 + l] += delta[j] * delta[l];
                }
            }
        }
    }
    Ok(IteratedIntegrals {
        level,
        dim_noise: d1,
        values,
        increments,
        quadratic,
    })
}

/// Which grid point of a coarse step the good-event oscillation is measured
/// from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Anchor {
    /// `sup_u |W_u - W_s|` from the left end `s = (k-1)/n`. This is the
    /// increment the truncated schemes feed to `χ`, so on the event they
    /// coincide with the plain schemes.
    Left,
    /// `sup_u |W_u - W_t|` from the right end `t = k/n`.
    Right,
}

/// Whether every within-step oscillation `sup_u |W^l_u - W^l_s|` (sampled on
/// the fine grid, `s` the left end of each coarse step) stays within `κ/2`.
pub fn good_event_indicator(lattice: &BrownianLattice, level: u32, kappa: f64) -> Result<bool> {
    good_event_indicator_anchored(lattice, level, kappa, Anchor::Left)
}

pub fn good_event_indicator_anchored(
    lattice: &BrownianLattice,
    level: u32,
    kappa: f64,
    anchor: Anchor,
) -> Result<bool> {
    if level > lattice.level_ref() {
        return Err(Error::InvalidLevel {
            level,
            reason: format!("exceeds lattice level {}", lattice.level_ref()),
        });
    }
    let d1 = lattice.dim_noise();
    let steps = 1usize << level;
    let sub = 1usize << (lattice.level_ref() - level);
    let bound = 0.5 * kappa;
    let mut running = vec![0.0; d1];
    for k in 0..steps {
        running.fill(0.0);
        for i in 0..sub {
            let idx = match anchor {
                Anchor::Left => k * sub + i,
                Anchor::Right => k * sub + (sub - 1 - i),
            };
            let delta = lattice.increment(idx);
            for l in 0..d1 {
                running[l] += delta[l];
                if running[l].abs() > bound {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sequential_sum(values: &[f64]) -> f64 {
        values.iter().sum()
    }

    #[test]
    fn same_key_reproduces_lattice() {
        let a = generate_lattice(2, 10, 42, 7).unwrap();
        let b = generate_lattice(2, 10, 42, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_lattice(2, 10, 42, 8).unwrap();
        assert_ne!(a.increments(), c.increments());
    }

    #[test]
    fn level_ref_guard() {
        assert!(matches!(generate_lattice(1, 0, 0, 0), Err(Error::ResourceGuard(0))));
        assert!(matches!(generate_lattice(1, 25, 0, 0), Err(Error::ResourceGuard(25))));
        assert!(generate_lattice(1, 1, 0, 0).is_ok());
    }

    #[test]
    fn increment_variance_matches_grid() {
        let level = 20;
        let lattice = generate_lattice(1, level, 3, 0).unwrap();
        let n = lattice.increments().len() as f64;
        let mean = lattice.increments().iter().sum::<f64>() / n;
        let var = lattice.increments().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 2f64.powi(-(level as i32));
        assert!((var / target - 1.0).abs() < 0.01, "variance ratio {}", var / target);
    }

    #[test]
    fn coarse_levels() {
        let lattice = generate_lattice(1, 12, 9, 1).unwrap();
        assert_eq!(lattice.coarse_increments(12).unwrap(), lattice.increments());
        let top = lattice.coarse_increments(0).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top, lattice.endpoint());
        let l3 = lattice.coarse_increments(3).unwrap();
        let first = sequential_sum(&lattice.increments()[..1 << 9]);
        assert!((l3[0] - first).abs() < 1e-13);
        assert!(matches!(lattice.coarse_increments(13), Err(Error::InvalidLevel { .. })));
    }

    #[test]
    fn coarse_sums_telescope_to_endpoint() {
        let lattice = generate_lattice(2, 9, 5, 3).unwrap();
        let w1 = lattice.endpoint();
        for level in 0..=9 {
            let inc = lattice.coarse_increments(level).unwrap();
            for l in 0..2 {
                let total: f64 = inc.iter().skip(l).step_by(2).sum();
                assert!((total - w1[l]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn refinement_is_bitwise_pairwise() {
        let lattice = generate_lattice(3, 10, 11, 2).unwrap();
        for level in 1..=10 {
            let fine = lattice.coarse_increments(level).unwrap();
            let coarse = lattice.coarse_increments(level - 1).unwrap();
            for k in 0..coarse.len() / 3 {
                for l in 0..3 {
                    assert_eq!(coarse[k * 3 + l], fine[2 * k * 3 + l] + fine[(2 * k + 1) * 3 + l]);
                }
            }
        }
    }

    #[test]
    fn scalar_iterated_integral_identity() {
        let lattice = generate_lattice(1, 12, 1, 4).unwrap();
        let ii = iterated_integrals(&lattice, 6).unwrap();
        for k in 0..ii.steps() {
            let dw = ii.increment(k)[0];
            let q: f64 = lattice.increments()[k * 64..(k + 1) * 64].iter().map(|v| v * v).sum();
            let expect = (dw * dw - q) / 2.0;
            assert!((ii.step(k)[0] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn symmetric_part_identity_multidim() {
        let lattice = generate_lattice(3, 10, 21, 0).unwrap();
        let ii = iterated_integrals(&lattice, 5).unwrap();
        for k in 0..ii.steps() {
            let (j, dw, q) = (ii.step(k), ii.increment(k), ii.quadratic(k));
            for a in 0..3 {
                for b in 0..3 {
                    let lhs = j[a * 3 + b] + j[b * 3 + a];
                    let rhs = dw[a] * dw[b] - q[a * 3 + b];
                    assert!((lhs - rhs).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn iterated_integrals_need_refinement_gap() {
        let lattice = generate_lattice(1, 8, 0, 0).unwrap();
        assert!(iterated_integrals(&lattice, 4).is_ok());
        assert!(matches!(
            iterated_integrals(&lattice, 5),
            Err(Error::InvalidLevel { .. })
        ));
    }

    #[test]
    fn zero_lattice() {
        let lattice = BrownianLattice::from_increments(2, 8, 0, 0, vec![0.0; 512]).unwrap();
        let ii = iterated_integrals(&lattice, 3).unwrap();
        assert!(ii.values.iter().all(|&v| v == 0.0));
        assert!(good_event_indicator(&lattice, 3, 0.1).unwrap());
    }

    #[test]
    fn large_increment_breaks_good_event() {
        let mut inc = vec![0.0; 256];
        inc[37] = 10.0;
        let lattice = BrownianLattice::from_increments(1, 8, 0, 0, inc).unwrap();
        for kappa in [0.1, 1.0, 19.9] {
            assert!(!good_event_indicator(&lattice, 4, kappa).unwrap());
        }
        // |W_u - W_s| = 10 sits exactly on the κ/2 boundary at κ = 20
        assert!(good_event_indicator(&lattice, 4, 20.0).unwrap());
    }

    #[test]
    fn good_event_anchors() {
        // A jump in the last fine sub-step of a coarse step: seen from every
        // earlier point when anchored right, only at the endpoint when
        // anchored left.
        let mut inc = vec![0.0; 16];
        inc[7] = 0.3;
        let lattice = BrownianLattice::from_increments(1, 4, 0, 0, inc).unwrap();
        for anchor in [Anchor::Left, Anchor::Right] {
            assert!(!good_event_indicator_anchored(&lattice, 1, 0.5, anchor).unwrap());
            assert!(good_event_indicator_anchored(&lattice, 1, 0.7, anchor).unwrap());
        }
        // Up 0.4 then down 0.35 inside one step: |W_u - W_s| peaks at 0.4,
        // |W_u - W_t| peaks at 0.35.
        let mut inc = vec![0.0; 16];
        inc[0] = 0.4;
        inc[1] = -0.35;
        let lattice = BrownianLattice::from_increments(1, 4, 0, 0, inc).unwrap();
        assert!(!good_event_indicator(&lattice, 1, 0.75).unwrap());
        assert!(good_event_indicator_anchored(&lattice, 1, 0.75, Anchor::Right).unwrap());
    }

    #[test]
    fn binary_dump_layout_and_round_trip() {
        let lattice = generate_lattice(2, 3, 0xdead, 5).unwrap();
        let mut buf = Vec::new();
        lattice.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 32 + 16 * 8);
        assert_eq!(&buf[0..8], &2u64.to_le_bytes());
        assert_eq!(&buf[8..16], &3u64.to_le_bytes());
        assert_eq!(&buf[16..24], &0xdeadu64.to_le_bytes());
        assert_eq!(&buf[24..32], &5u64.to_le_bytes());
        assert_eq!(&buf[32..40], &lattice.increment(0)[0].to_le_bytes());
        assert_eq!(&buf[40..48], &lattice.increment(0)[1].to_le_bytes());
        let back = BrownianLattice::read_from(&buf[..]).unwrap();
        assert_eq!(back, lattice);
        assert!(BrownianLattice::read_from(&buf[..40]).is_err());
    }

    #[test]
    fn uniform_in_open_interval() {
        let mut rng = CounterRng::new(1, 2);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!(u > 0.0 && u < 1.0);
        }
        assert!(standard_normal_quantile(0.5).abs() < 1e-15);
        assert!((standard_normal_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
    }
}
