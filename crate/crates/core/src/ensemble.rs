//! Particle population and its (weighted) empirical measure.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

/// One parameter point θ with an optional output amplitude `c` (NN-form
/// models) and a nonnegative weight used by the proximal scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub position: Vec<f64>,
    pub amplitude: Option<f64>,
    pub weight: f64,
    /// Monotone creation counter; lineage only, never used by the dynamics.
    pub birth_id: u64,
}

impl ParticleState {
    pub fn new(position: Vec<f64>) -> Self {
        ParticleState {
            position,
            amplitude: None,
            weight: 1.0,
            birth_id: 0,
        }
    }

    pub fn with_amplitude(mut self, c: f64) -> Self {
        self.amplitude = Some(c);
        self
    }

    /// Amplitude, or 0 for particles without an amplitude channel.
    #[inline]
    pub fn c(&self) -> f64 {
        self.amplitude.unwrap_or(0.0)
    }

    fn is_finite(&self) -> bool {
        self.weight.is_finite()
            && self.amplitude.map_or(true, f64::is_finite)
            && self.position.iter().all(|x| x.is_finite())
    }
}

/// A scalar distribution, used per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Dist1 {
    Gaussian { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
    Point { at: f64 },
}

impl Dist1 {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Dist1::Gaussian { mean, std } => {
                if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
                    return Err(Error::config(format!("gaussian needs finite mean and std > 0, got std = {std}")));
                }
            }
            Dist1::Uniform { lo, hi } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::config(format!("uniform needs lo < hi, got [{lo}, {hi}]")));
                }
            }
            Dist1::Point { at } => {
                if !at.is_finite() {
                    return Err(Error::config("point mass location must be finite"));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut SimRng) -> f64 {
        match *self {
            Dist1::Gaussian { mean, std } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + std * z
            }
            Dist1::Uniform { lo, hi } => rng.random_range(lo..hi),
            Dist1::Point { at } => at,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Dist1::Gaussian { mean, .. } => mean,
            Dist1::Uniform { lo, hi } => 0.5 * (lo + hi),
            Dist1::Point { at } => at,
        }
    }

    pub fn std(&self) -> f64 {
        match *self {
            Dist1::Gaussian { std, .. } => std,
            Dist1::Uniform { lo, hi } => (hi - lo) / 12f64.sqrt(),
            Dist1::Point { .. } => 0.0,
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Dist1::Gaussian { mean, std } => {
                0.5 * (1.0 + statrs::function::erf::erf((x - mean) / (std * std::f64::consts::SQRT_2)))
            }
            Dist1::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            Dist1::Point { at } => {
                if x >= at {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Probability of `[a, b)`.
    pub fn mass(&self, a: f64, b: f64) -> f64 {
        (self.cdf(b) - self.cdf(a)).max(0.0)
    }

    /// Support interval used to size grids: the exact support for uniform and
    /// point laws, ±`width_in_std` standard deviations for the gaussian.
    pub fn support(&self, width_in_std: f64) -> (f64, f64) {
        match *self {
            Dist1::Gaussian { mean, std } => (mean - width_in_std * std, mean + width_in_std * std),
            Dist1::Uniform { lo, hi } => (lo, hi),
            Dist1::Point { at } => (at, at),
        }
    }
}

/// Distribution over positions in R^k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Sampler {
    /// `mean` is either one value broadcast to every coordinate or a full
    /// k-vector.
    IsotropicGaussian { mean: Vec<f64>, std: f64 },
    UniformBox { lo: f64, hi: f64 },
    PointMass { at: Vec<f64> },
    Product { coords: Vec<Dist1> },
}

impl Sampler {
    pub fn gaussian(mean: f64, std: f64) -> Self {
        Sampler::IsotropicGaussian { mean: vec![mean], std }
    }

    pub fn point(at: f64) -> Self {
        Sampler::PointMass { at: vec![at] }
    }

    fn broadcast(v: &[f64], k: usize, what: &str) -> Result<Vec<f64>> {
        match v.len() {
            1 => Ok(vec![v[0]; k]),
            len if len == k => Ok(v.to_vec()),
            len => Err(Error::config(format!("{what} has length {len}, expected 1 or {k}"))),
        }
    }

    /// Per-coordinate marginals; every supported sampler is a product law.
    pub fn marginals(&self, k: usize) -> Result<Vec<Dist1>> {
        let out: Vec<Dist1> = match self {
            Sampler::IsotropicGaussian { mean, std } => Self::broadcast(mean, k, "gaussian mean")?
                .into_iter()
                .map(|mean| Dist1::Gaussian { mean, std: *std })
                .collect(),
            Sampler::UniformBox { lo, hi } => vec![Dist1::Uniform { lo: *lo, hi: *hi }; k],
            Sampler::PointMass { at } => Self::broadcast(at, k, "point mass")?
                .into_iter()
                .map(|at| Dist1::Point { at })
                .collect(),
            Sampler::Product { coords } => {
                if coords.len() != k {
                    return Err(Error::config(format!(
                        "product sampler has {} coordinates, expected {k}",
                        coords.len()
                    )));
                }
                coords.clone()
            }
        };
        for d in &out {
            d.validate()?;
        }
        Ok(out)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        self.marginals(k).map(|_| ())
    }

    /// The law of a one-dimensional sampler.
    pub fn as_dist1(&self) -> Result<Dist1> {
        let mut m = self.marginals(1)?;
        Ok(m.remove(0))
    }

    pub fn sample_with(marginals: &[Dist1], rng: &mut SimRng) -> Vec<f64> {
        marginals.iter().map(|d| d.sample(rng)).collect()
    }
}

/// The particle population realizing the empirical measure
/// `μ⁽ⁿ⁾ = n⁻¹ Σ wᵢ δ_θᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    particles: Vec<ParticleState>,
    dimension: usize,
    pub rng_seed: u64,
    pub step_count: u64,
    next_birth_id: u64,
}

impl Ensemble {
    /// Builds an ensemble from explicit particles. Birth ids are reassigned
    /// in order.
    pub fn from_particles(mut particles: Vec<ParticleState>) -> Result<Self> {
        let dimension = particles
            .first()
            .map(|p| p.position.len())
            .ok_or_else(|| Error::config("ensemble needs at least one particle"))?;
        if dimension == 0 {
            return Err(Error::config("particle dimension must be at least 1"));
        }
        for (i, p) in particles.iter_mut().enumerate() {
            if p.position.len() != dimension {
                return Err(Error::config(format!(
                    "particle {i} has dimension {}, expected {dimension}",
                    p.position.len()
                )));
            }
            if !p.is_finite() || p.weight < 0.0 {
                return Err(Error::Numeric { what: "particle state", index: i });
            }
            p.birth_id = i as u64;
        }
        let next_birth_id = particles.len() as u64;
        Ok(Ensemble {
            particles,
            dimension,
            rng_seed: 0,
            step_count: 0,
            next_birth_id,
        })
    }

    /// Convenience constructor for scalar positions.
    pub fn from_positions_1d(xs: &[f64]) -> Result<Self> {
        Self::from_particles(xs.iter().map(|&x| ParticleState::new(vec![x])).collect())
    }

    /// Draws `n` i.i.d. particles of dimension `k` from `sampler`, unit
    /// weights, using the init stream of `seed`.
    pub fn init_from_sampler(sampler: &Sampler, n: usize, k: usize, seed: u64) -> Result<Self> {
        Self::init(sampler, None, n, k, seed)
    }

    /// Like [`Ensemble::init_from_sampler`], additionally drawing an
    /// amplitude per particle when `amplitude` is given.
    pub fn init(sampler: &Sampler, amplitude: Option<&Dist1>, n: usize, k: usize, seed: u64) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::config(format!("need n >= 1 and k >= 1, got n = {n}, k = {k}")));
        }
        let marginals = sampler.marginals(k)?;
        if let Some(a) = amplitude {
            a.validate()?;
        }
        let mut rng = rng::stream(seed, rng::STREAM_INIT);
        let particles = (0..n)
            .map(|i| {
                let position = Sampler::sample_with(&marginals, &mut rng);
                let amplitude = amplitude.map(|a| a.sample(&mut rng));
                ParticleState {
                    position,
                    amplitude,
                    weight: 1.0,
                    birth_id: i as u64,
                }
            })
            .collect();
        Ok(Ensemble {
            particles,
            dimension: k,
            rng_seed: seed,
            step_count: 0,
            next_birth_id: n as u64,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    #[inline]
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    #[inline]
    pub fn particles(&self) -> &[ParticleState] {
        &self.particles
    }

    #[inline]
    pub fn particles_mut(&mut self) -> &mut [ParticleState] {
        &mut self.particles
    }

    pub fn mean_weight(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum::<f64>() / self.len() as f64
    }

    /// `n⁻¹ Σ wᵢ φ(θᵢ)`.
    pub fn empirical_expectation(&self, phi: impl Fn(&[f64]) -> f64) -> Result<f64> {
        let mut acc = 0.0;
        for (i, p) in self.particles.iter().enumerate() {
            let v = phi(&p.position);
            if !v.is_finite() {
                return Err(Error::Numeric { what: "test function", index: i });
            }
            acc += p.weight * v;
        }
        Ok(acc / self.len() as f64)
    }

    /// Next lineage id; ids are never reused.
    pub(crate) fn fresh_birth_id(&mut self) -> u64 {
        let id = self.next_birth_id;
        self.next_birth_id += 1;
        id
    }

    /// Copy of particle `i` with a fresh birth id.
    pub(crate) fn offspring(&mut self, i: usize) -> ParticleState {
        let mut child = self.particles[i].clone();
        child.birth_id = self.fresh_birth_id();
        child
    }

    /// Appends a copy of particle `i`. With `jitter > 0` the copy's position
    /// gets isotropic gaussian noise of that standard deviation.
    pub fn clone_particle(&mut self, i: usize, jitter: f64, rng: &mut SimRng) -> Result<()> {
        if i >= self.len() {
            return Err(Error::Logic(format!("clone index {i} out of range for n = {}", self.len())));
        }
        if !(jitter >= 0.0) {
            return Err(Error::config(format!("jitter must be nonnegative, got {jitter}")));
        }
        let mut child = self.offspring(i);
        if jitter > 0.0 {
            for x in &mut child.position {
                let z: f64 = rng.sample(StandardNormal);
                *x += jitter * z;
            }
        }
        self.particles.push(child);
        Ok(())
    }

    /// Removes particle `i`, keeping the order of the others.
    pub fn kill_particle(&mut self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::Logic(format!("kill index {i} out of range for n = {}", self.len())));
        }
        if self.len() == 1 {
            return Err(Error::Logic("cannot kill the last particle".into()));
        }
        self.particles.remove(i);
        Ok(())
    }

    pub(crate) fn push(&mut self, mut p: ParticleState) {
        p.birth_id = self.fresh_birth_id();
        self.particles.push(p);
    }

    pub(crate) fn take_particles(&mut self) -> Vec<ParticleState> {
        std::mem::take(&mut self.particles)
    }

    pub(crate) fn replace_particles(&mut self, particles: Vec<ParticleState>) {
        debug_assert!(particles.iter().all(|p| p.position.len() == self.dimension));
        self.particles = particles;
    }

    pub(crate) fn check_finite(&self, what: &'static str) -> Result<()> {
        match self.particles.iter().position(|p| !p.is_finite()) {
            Some(index) => Err(Error::Numeric { what, index }),
            None => Ok(()),
        }
    }

    /// Snapshot as CSV with header `id,birth_id,weight,amplitude,theta_0,...`.
    /// Missing amplitudes are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,birth_id,weight,amplitude");
        for j in 0..self.dimension {
            let _ = write!(out, ",theta_{j}");
        }
        out.push('\n');
        for (i, p) in self.particles.iter().enumerate() {
            let _ = write!(out, "{i},{},{}", p.birth_id, fmt_real(p.weight));
            match p.amplitude {
                Some(c) => {
                    let _ = write!(out, ",{}", fmt_real(c));
                }
                None => out.push(','),
            }
            for x in &p.position {
                let _ = write!(out, ",{}", fmt_real(*x));
            }
            out.push('\n');
        }
        out
    }
}

/// Reals in CSV output: 17 significant digits, `.` decimal separator.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}
