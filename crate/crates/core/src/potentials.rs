//! Potential models: single-particle energy `F`, interaction kernel `K`, and
//! their gradients, behind the [`Potential`] trait.
//!
//! All exact models use the mean-field normalization: the potential felt by
//! particle `i` is `V(θᵢ) = F(θᵢ) + n⁻¹ Σⱼ wⱼ K(θᵢ, θⱼ)` and the ensemble
//! energy is `n⁻¹ Σ wᵢFᵢ + (2n²)⁻¹ ΣΣ wᵢwⱼKᵢⱼ`.

use std::f64::consts::PI;
use std::fmt;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{fmt_real, Ensemble, ParticleState};
use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

/// Gradient with respect to a particle's parameters. `amplitude` is the
/// derivative along the amplitude channel and stays 0 for models without one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    pub amplitude: f64,
    pub position: Vec<f64>,
}

impl Gradient {
    pub fn zeros(k: usize) -> Self {
        Gradient {
            amplitude: 0.0,
            position: vec![0.0; k],
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.amplitude * self.amplitude + self.position.iter().map(|g| g * g).sum::<f64>()
    }

    fn is_finite(&self) -> bool {
        self.amplitude.is_finite() && self.position.iter().all(|g| g.is_finite())
    }
}

/// Potential and its gradient evaluated for every particle of a
/// configuration.
#[derive(Debug, Clone, Default)]
pub struct FieldEval {
    /// `V(θᵢ)`.
    pub potential: Vec<f64>,
    /// `∇V(θᵢ)`; empty when gradients were not requested.
    pub grad: Vec<Gradient>,
}

/// A landscape `F` plus a symmetric interaction kernel `K`.
pub trait Potential: Send + Sync + fmt::Debug {
    fn kind(&self) -> &'static str;

    /// Length of the position vector θ (excluding the amplitude channel).
    fn dimension(&self) -> usize;

    /// Whether particles carry an output amplitude `c` (NN-form models).
    fn has_amplitude(&self) -> bool {
        false
    }

    /// `false` iff `K ≡ 0`.
    fn is_interacting(&self) -> bool;

    /// Exact models evaluate `F` and `K` in closed form; the others only
    /// provide minibatch estimates through [`Potential::batch`].
    fn is_exact(&self) -> bool {
        true
    }

    fn f(&self, p: &ParticleState) -> Result<f64>;

    /// Adds `scale · ∇F(p)` to `out`.
    fn add_grad_f(&self, p: &ParticleState, scale: f64, out: &mut Gradient) -> Result<()>;

    fn k(&self, _a: &ParticleState, _b: &ParticleState) -> f64 {
        0.0
    }

    /// Adds `scale · ∇₁K(a, b)` (gradient in the first slot) to `out` and
    /// returns `K(a, b)`.
    fn add_grad_k(&self, _a: &ParticleState, _b: &ParticleState, _scale: f64, _out: &mut Gradient) -> f64 {
        0.0
    }

    fn batch(&self) -> Option<&dyn BatchPotential> {
        None
    }

    /// Global minimizer and Hessian there, when known in closed form.
    fn minimum(&self) -> Option<(Vec<f64>, DMatrix<f64>)> {
        None
    }

    /// `V` (and optionally `∇V`) for every particle of `particles`, with the
    /// kernel sum normalized by the population size.
    fn evaluate(&self, particles: &[ParticleState], with_grad: bool) -> Result<FieldEval> {
        generic_evaluate(self, particles, with_grad)
    }
}

fn generic_evaluate<P: Potential + ?Sized>(model: &P, particles: &[ParticleState], with_grad: bool) -> Result<FieldEval> {
    let n = particles.len() as f64;
    let k = model.dimension();
    let interacting = model.is_interacting();
    let rows: Vec<Result<(f64, Gradient)>> = particles
        .par_iter()
        .map(|pi| {
            let mut g = Gradient::zeros(k);
            let mut v = model.f(pi)?;
            if with_grad {
                model.add_grad_f(pi, 1.0, &mut g)?;
            }
            if interacting {
                let mut acc = 0.0;
                for pj in particles {
                    let kij = if with_grad {
                        model.add_grad_k(pi, pj, pj.weight / n, &mut g)
                    } else {
                        model.k(pi, pj)
                    };
                    acc += pj.weight * kij;
                }
                v += acc / n;
            }
            Ok((v, g))
        })
        .collect();
    collect_field(rows, with_grad)
}

fn collect_field(rows: Vec<Result<(f64, Gradient)>>, with_grad: bool) -> Result<FieldEval> {
    let mut out = FieldEval {
        potential: Vec::with_capacity(rows.len()),
        grad: Vec::with_capacity(if with_grad { rows.len() } else { 0 }),
    };
    for (i, row) in rows.into_iter().enumerate() {
        let (v, g) = row?;
        if !v.is_finite() {
            return Err(Error::Numeric { what: "potential", index: i });
        }
        if with_grad {
            if !g.is_finite() {
                return Err(Error::Numeric { what: "gradient", index: i });
            }
            out.grad.push(g);
        }
        out.potential.push(v);
    }
    Ok(out)
}

pub fn grad_f(model: &dyn Potential, p: &ParticleState) -> Result<Gradient> {
    let mut g = Gradient::zeros(model.dimension());
    model.add_grad_f(p, 1.0, &mut g)?;
    Ok(g)
}

pub fn grad_k(model: &dyn Potential, a: &ParticleState, b: &ParticleState) -> Gradient {
    let mut g = Gradient::zeros(model.dimension());
    model.add_grad_k(a, b, 1.0, &mut g);
    g
}

/// `V(θᵢ) = F(θᵢ) + n⁻¹ Σⱼ wⱼ K(θᵢ, θⱼ)`.
pub fn particle_potential(model: &dyn Potential, ens: &Ensemble, i: usize) -> Result<f64> {
    let ps = ens.particles();
    let pi = ps
        .get(i)
        .ok_or_else(|| Error::Logic(format!("particle index {i} out of range for n = {}", ps.len())))?;
    let mut v = model.f(pi)?;
    if model.is_interacting() {
        let s: f64 = ps.iter().map(|pj| pj.weight * model.k(pi, pj)).sum();
        v += s / ps.len() as f64;
    }
    Ok(v)
}

fn check_dims(model: &dyn Potential, p: &ParticleState) -> Result<()> {
    if p.position.len() != model.dimension() {
        return Err(Error::config(format!(
            "{} expects dimension {}, got {}",
            model.kind(),
            model.dimension(),
            p.position.len()
        )));
    }
    if model.has_amplitude() && p.amplitude.is_none() {
        return Err(Error::config(format!("{} requires an amplitude channel", model.kind())));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Density of `N(μ, var·Id)` in dimension `d` at squared distance `r2`.
#[inline]
pub fn isotropic_normal_density(r2: f64, var: f64, d: usize) -> f64 {
    (2.0 * PI * var).powf(-0.5 * d as f64) * (-0.5 * r2 / var).exp()
}

// ---------------------------------------------------------------------------
// Quadratic well

/// `F(θ) = ½⟨θ−θ*, H*(θ−θ*)⟩`, non-interacting.
#[derive(Debug, Clone)]
pub struct QuadraticWell {
    minimizer: Vec<f64>,
    hessian: DMatrix<f64>,
}

impl QuadraticWell {
    pub fn new(minimizer: Vec<f64>, hessian: DMatrix<f64>) -> Result<Self> {
        let k = minimizer.len();
        if k == 0 || hessian.nrows() != k || hessian.ncols() != k {
            return Err(Error::config(format!(
                "hessian must be {k}x{k}, got {}x{}",
                hessian.nrows(),
                hessian.ncols()
            )));
        }
        check_spd(&hessian)?;
        Ok(QuadraticWell { minimizer, hessian })
    }

    pub fn isotropic_1d(minimizer: f64, curvature: f64) -> Result<Self> {
        Self::new(vec![minimizer], DMatrix::from_element(1, 1, curvature))
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn minimizer(&self) -> &[f64] {
        &self.minimizer
    }

    fn offset(&self, p: &ParticleState) -> Vec<f64> {
        p.position.iter().zip(&self.minimizer).map(|(x, m)| x - m).collect()
    }
}

pub(crate) fn check_spd(h: &DMatrix<f64>) -> Result<()> {
    let asym = (h - h.transpose()).abs().max();
    if asym > 1e-12 * h.abs().max().max(1.0) {
        return Err(Error::config("hessian is not symmetric"));
    }
    if h.clone().cholesky().is_none() {
        return Err(Error::config("hessian is not positive definite"));
    }
    Ok(())
}

impl Potential for QuadraticWell {
    fn kind(&self) -> &'static str {
        "quadratic-well"
    }

    fn dimension(&self) -> usize {
        self.minimizer.len()
    }

    fn is_interacting(&self) -> bool {
        false
    }

    fn f(&self, p: &ParticleState) -> Result<f64> {
        check_dims(self, p)?;
        let d = self.offset(p);
        let k = d.len();
        let mut acc = 0.0;
        for r in 0..k {
            for c in 0..k {
                acc += d[r] * self.hessian[(r, c)] * d[c];
            }
        }
        Ok(0.5 * acc)
    }

    fn add_grad_f(&self, p: &ParticleState, scale: f64, out: &mut Gradient) -> Result<()> {
        check_dims(self, p)?;
        let d = self.offset(p);
        for (r, g) in out.position.iter_mut().enumerate() {
            let row: f64 = d.iter().enumerate().map(|(c, dc)| self.hessian[(r, c)] * dc).sum();
            *g += scale * row;
        }
        Ok(())
    }

    fn minimum(&self) -> Option<(Vec<f64>, DMatrix<f64>)> {
        Some((self.minimizer.clone(), self.hessian.clone()))
    }
}

// ---------------------------------------------------------------------------
// Tilted double well

/// Separable tilted double well
/// `F(θ) = Σₐ ¼(θₐ² − 1)² + (s/2)(θₐ − 1)²`.
///
/// The global minimum is `F = 0` at `θ = (1, …, 1)` with Hessian `(2 + s)·Id`;
/// each coordinate has a second, higher local minimum near −1 (about `2s`
/// above the global one for small tilt `s`).
#[derive(Debug, Clone)]
pub struct DoubleWell {
    dimension: usize,
    tilt: f64,
}

impl DoubleWell {
    pub fn new(dimension: usize, tilt: f64) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::config("double-well dimension must be >= 1"));
        }
        if !(tilt > 0.0 && tilt < 0.5) {
            return Err(Error::config(format!("double-well tilt must lie in (0, 0.5), got {tilt}")));
        }
        Ok(DoubleWell { dimension, tilt })
    }

    pub fn scalar(&self, x: f64) -> f64 {
        let a = x * x - 1.0;
        0.25 * a * a + 0.5 * self.tilt * (x - 1.0) * (x - 1.0)
    }

    fn scalar_grad(&self, x: f64) -> f64 {
        x * (x * x - 1.0) + self.tilt * (x - 1.0)
    }
}

impl Potential for DoubleWell {
    fn kind(&self) -> &'static str {
        "double-well"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn is_interacting(&self) -> bool {
        false
    }

    fn f(&self, p: &ParticleState) -> Result<f64> {
        check_dims(self, p)?;
        Ok(p.position.iter().map(|&x| self.scalar(x)).sum())
    }

    fn add_grad_f(&self, p: &ParticleState, scale: f64, out: &mut Gradient) -> Result<()> {
        check_dims(self, p)?;
        for (g, &x) in out.position.iter_mut().zip(&p.position) {
            *g += scale * self.scalar_grad(x);
        }
        Ok(())
    }

    fn minimum(&self) -> Option<(Vec<f64>, DMatrix<f64>)> {
        Some((
            vec![1.0; self.dimension],
            DMatrix::identity(self.dimension, self.dimension) * (2.0 + self.tilt),
        ))
    }
}

// ---------------------------------------------------------------------------
// Gaussian mixture target, gaussian RBF student

/// One target component `c̄ · N(x; ȳ, σⱼ²·Id)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub amplitude: f64,
    pub center: Vec<f64>,
    pub std: f64,
}

/// Target `f(x) = m⁻¹ Σⱼ c̄ⱼ N(x; ȳⱼ, σⱼ²)` approximated by units
/// `φ(x; c, y) = c · N(x; y, σ²)` with `σ < minⱼ σⱼ`. All integrals are
/// gaussian:
///
/// * `F(c, y) = −(c/m) Σⱼ c̄ⱼ N(y; ȳⱼ, σ² + σⱼ²)`
/// * `K((c, y), (c′, y′)) = c c′ N(y; y′, 2σ²)`
///
/// With `fixed_amplitude = Some(c)` the amplitude is frozen at `c` and the
/// parameter reduces to the center `y` alone.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dimension: usize,
    sigma: f64,
    components: Vec<MixtureComponent>,
    fixed_amplitude: Option<f64>,
}

impl GaussianMixture {
    pub fn new(dimension: usize, sigma: f64, components: Vec<MixtureComponent>) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::config("mixture input dimension must be >= 1"));
        }
        if components.is_empty() {
            return Err(Error::config("mixture needs at least one component"));
        }
        for (j, c) in components.iter().enumerate() {
            if c.center.len() != dimension {
                return Err(Error::config(format!("component {j} center has wrong dimension")));
            }
            if !(c.std > 0.0) {
                return Err(Error::config(format!("component {j} std must be > 0")));
            }
        }
        let min_std = components.iter().map(|c| c.std).fold(f64::INFINITY, f64::min);
        if !(sigma > 0.0 && sigma < min_std) {
            return Err(Error::config(format!(
                "student bandwidth must satisfy 0 < sigma < min component std = {min_std}, got {sigma}"
            )));
        }
        Ok(GaussianMixture {
            dimension,
            sigma,
            components,
            fixed_amplitude: None,
        })
    }

    pub fn with_fixed_amplitude(mut self, c: f64) -> Result<Self> {
        if !c.is_finite() {
            return Err(Error::config("fixed amplitude must be finite"));
        }
        self.fixed_amplitude = Some(c);
        Ok(self)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    #[inline]
    fn amp(&self, p: &ParticleState) -> f64 {
        self.fixed_amplitude.unwrap_or_else(|| p.c())
    }

    /// Target function value.
    pub fn target(&self, x: &[f64]) -> f64 {
        let m = self.components.len() as f64;
        self.components
            .iter()
            .map(|c| c.amplitude * isotropic_normal_density(sq_dist(x, &c.center), c.std * c.std, self.dimension))
            .sum::<f64>()
            / m
    }

    /// Student unit `φ(x; θ)`.
    pub fn unit(&self, x: &[f64], p: &ParticleState) -> f64 {
        self.amp(p) * isotropic_normal_density(sq_dist(x, &p.position), self.sigma * self.sigma, self.dimension)
    }

    /// Network output `f_n(x) = n⁻¹ Σ wᵢ φ(x; θᵢ)`.
    pub fn network(&self, x: &[f64], ens: &Ensemble) -> f64 {
        ens.particles().iter().map(|p| p.weight * self.unit(x, p)).sum::<f64>() / ens.len() as f64
    }

    /// `C_f = ½ ∫ f²`, in closed form.
    pub fn target_energy(&self) -> f64 {
        let m = self.components.len() as f64;
        let mut acc = 0.0;
        for a in &self.components {
            for b in &self.components {
                acc += a.amplitude
                    * b.amplitude
                    * isotropic_normal_density(sq_dist(&a.center, &b.center), a.std * a.std + b.std * b.std, self.dimension);
            }
        }
        0.5 * acc / (m * m)
    }

    /// `½ ∫ |f − f_n|² dx`, via the closed-form decomposition
    /// `C_f + n⁻¹ Σ wᵢFᵢ + (2n²)⁻¹ ΣΣ wᵢwⱼKᵢⱼ`.
    pub fn exact_loss(&self, ens: &Ensemble) -> Result<f64> {
        Ok(self.target_energy() + mean_field_energy(self, ens)?)
    }

    /// `∂_c F` evaluated at unit amplitude; `F` is linear in `c`.
    fn f_unit(&self, y: &[f64]) -> f64 {
        let m = self.components.len() as f64;
        let s2 = self.sigma * self.sigma;
        -self
            .components
            .iter()
            .map(|c| c.amplitude * isotropic_normal_density(sq_dist(y, &c.center), s2 + c.std * c.std, self.dimension))
            .sum::<f64>()
            / m
    }
}

impl Potential for GaussianMixture {
    fn kind(&self) -> &'static str {
        "gaussian-mixture-rbf"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn has_amplitude(&self) -> bool {
        self.fixed_amplitude.is_none()
    }

    fn is_interacting(&self) -> bool {
        true
    }

    fn f(&self, p: &ParticleState) -> Result<f64> {
        check_dims(self, p)?;
        Ok(self.amp(p) * self.f_unit(&p.position))
    }

    fn add_grad_f(&self, p: &ParticleState, scale: f64, out: &mut Gradient) -> Result<()> {
        check_dims(self, p)?;
        let m = self.components.len() as f64;
        let s2 = self.sigma * self.sigma;
        let c = self.amp(p);
        let mut dc = 0.0;
        for comp in &self.components {
            let var = s2 + comp.std * comp.std;
            let nrm = isotropic_normal_density(sq_dist(&p.position, &comp.center), var, self.dimension);
            let w = -comp.amplitude * nrm / m;
            dc += w;
            // ∂y N(y; ȳ, v) = −N·(y − ȳ)/v
            for (g, (y, yb)) in out.position.iter_mut().zip(p.position.iter().zip(&comp.center)) {
                *g += scale * c * w * (-(y - yb) / var);
            }
        }
        if self.has_amplitude() {
            out.amplitude += scale * dc;
        }
        Ok(())
    }

    fn k(&self, a: &ParticleState, b: &ParticleState) -> f64 {
        let var = 2.0 * self.sigma * self.sigma;
        self.amp(a) * self.amp(b) * isotropic_normal_density(sq_dist(&a.position, &b.position), var, self.dimension)
    }

    fn add_grad_k(&self, a: &ParticleState, b: &ParticleState, scale: f64, out: &mut Gradient) -> f64 {
        let var = 2.0 * self.sigma * self.sigma;
        let nrm = isotropic_normal_density(sq_dist(&a.position, &b.position), var, self.dimension);
        let (ca, cb) = (self.amp(a), self.amp(b));
        if self.has_amplitude() {
            out.amplitude += scale * cb * nrm;
        }
        for (g, (ya, yb)) in out.position.iter_mut().zip(a.position.iter().zip(&b.position)) {
            *g += scale * ca * cb * nrm * (-(ya - yb) / var);
        }
        ca * cb * nrm
    }

    /// Symmetric pair loop: each kernel value is computed once.
    fn evaluate(&self, particles: &[ParticleState], with_grad: bool) -> Result<FieldEval> {
        let n = particles.len();
        let nf = n as f64;
        let d = self.dimension;
        let var = 2.0 * self.sigma * self.sigma;
        let norm0 = (2.0 * PI * var).powf(-0.5 * d as f64);
        let amp_channel = self.has_amplitude();

        let mut potential = Vec::with_capacity(n);
        let mut grad = Vec::with_capacity(if with_grad { n } else { 0 });
        for p in particles {
            check_dims(self, p)?;
            potential.push(self.f(p)?);
            if with_grad {
                let mut g = Gradient::zeros(d);
                self.add_grad_f(p, 1.0, &mut g)?;
                grad.push(g);
            }
        }
        let amps: Vec<f64> = particles.iter().map(|p| self.amp(p)).collect();
        let mut kv = vec![0.0; n];
        let mut kc = vec![0.0; if with_grad && amp_channel { n } else { 0 }];
        let mut ky = vec![0.0; if with_grad { n * d } else { 0 }];
        for i in 0..n {
            let pi = &particles[i];
            // Diagonal: the self term contributes to V but not to ∇y.
            let wi = pi.weight;
            kv[i] += wi * amps[i] * amps[i] * norm0;
            if with_grad && amp_channel {
                kc[i] += wi * amps[i] * norm0;
            }
            for j in (i + 1)..n {
                let pj = &particles[j];
                let r2 = sq_dist(&pi.position, &pj.position);
                let nrm = norm0 * (-0.5 * r2 / var).exp();
                let kij = amps[i] * amps[j] * nrm;
                kv[i] += pj.weight * kij;
                kv[j] += wi * kij;
                if with_grad {
                    if amp_channel {
                        kc[i] += pj.weight * amps[j] * nrm;
                        kc[j] += wi * amps[i] * nrm;
                    }
                    let coef = kij / var;
                    for a in 0..d {
                        let diff = pi.position[a] - pj.position[a];
                        ky[i * d + a] -= pj.weight * coef * diff;
                        ky[j * d + a] += wi * coef * diff;
                    }
                }
            }
        }
        for i in 0..n {
            potential[i] += kv[i] / nf;
            if with_grad {
                if amp_channel {
                    grad[i].amplitude += kc[i] / nf;
                }
                for a in 0..d {
                    grad[i].position[a] += ky[i * d + a] / nf;
                }
            }
        }
        let rows = potential
            .into_iter()
            .zip(grad.into_iter().map(Some).chain(std::iter::repeat(None)))
            .map(|(v, g)| Ok((v, g.unwrap_or_default())))
            .collect();
        collect_field(rows, with_grad)
    }
}

/// `n⁻¹ Σ wᵢFᵢ + (2n²)⁻¹ ΣΣ wᵢwⱼKᵢⱼ`, computed as `n⁻¹ Σ wᵢ (Fᵢ + Vᵢ)/2`.
pub(crate) fn mean_field_energy(model: &dyn Potential, ens: &Ensemble) -> Result<f64> {
    let field = model.evaluate(ens.particles(), false)?;
    let mut acc = 0.0;
    for (p, v) in ens.particles().iter().zip(&field.potential) {
        acc += p.weight * 0.5 * (model.f(p)? + v);
    }
    Ok(acc / ens.len() as f64)
}

// ---------------------------------------------------------------------------
// ReLU student-teacher

/// Minibatch quantities for every particle of a configuration.
#[derive(Debug, Clone)]
pub struct BatchEval {
    /// `V̂_P(yᵢ) = P⁻¹ Σₚ φ(xₚ, yᵢ)(f_n(xₚ) − f(xₚ))`.
    pub vhat: Vec<f64>,
    /// `cᵢ V̂_P(yᵢ)`, the per-particle potential estimate.
    pub potential: Vec<f64>,
    /// `n · ∇_{θᵢ}` of the batch loss.
    pub grad: Vec<Gradient>,
    /// `(2P)⁻¹ Σₚ (f_n(xₚ) − f(xₚ))²`.
    pub loss: f64,
}

/// Models whose potentials are only available as minibatch estimates.
pub trait BatchPotential: Send + Sync {
    fn batch_size(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Flat `count × d` array of inputs drawn from the data distribution.
    fn sample_inputs(&self, count: usize, rng: &mut SimRng) -> Vec<f64>;
    /// One training minibatch of `P` inputs.
    fn sample_batch(&self, rng: &mut SimRng) -> Vec<f64> {
        self.sample_inputs(self.batch_size(), rng)
    }
    fn batch_eval(&self, particles: &[ParticleState], batch: &[f64]) -> Result<BatchEval>;
    /// Fixed teacher parameters as CSV.
    fn teacher_csv(&self) -> String;
}

/// Two-layer ReLU student `f_n(x) = n⁻¹ Σ cᵢ max(0, ⟨yᵢ, x⟩)` fit online to
/// a fixed teacher `f(x) = m⁻¹ Σⱼ c̄ⱼ max(0, ⟨ȳⱼ, x⟩)` on `x ~ N(0, Id)`.
///
/// Teacher amplitudes are `±1` with equal probability and teacher weights
/// are gaussian directions normalized to unit length.
#[derive(Debug, Clone)]
pub struct ReluStudentTeacher {
    input_dim: usize,
    batch_size: usize,
    teacher_amplitudes: Vec<f64>,
    teacher_weights: Vec<Vec<f64>>,
}

#[inline]
fn relu(z: f64) -> f64 {
    z.max(0.0)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ReluStudentTeacher {
    pub fn new(input_dim: usize, teacher_units: usize, batch_size: usize, teacher_rng: &mut SimRng) -> Result<Self> {
        if input_dim == 0 || teacher_units == 0 {
            return Err(Error::config("relu model needs input_dim >= 1 and teacher_units >= 1"));
        }
        if batch_size == 0 {
            return Err(Error::config("relu model batch size must be >= 1"));
        }
        let mut amps = Vec::with_capacity(teacher_units);
        let mut weights = Vec::with_capacity(teacher_units);
        for _ in 0..teacher_units {
            amps.push(if teacher_rng.random::<bool>() { 1.0 } else { -1.0 });
            let mut y: Vec<f64> = (0..input_dim).map(|_| teacher_rng.sample(StandardNormal)).collect();
            let norm = dot(&y, &y).sqrt();
            y.iter_mut().for_each(|v| *v /= norm);
            weights.push(y);
        }
        Ok(ReluStudentTeacher {
            input_dim,
            batch_size,
            teacher_amplitudes: amps,
            teacher_weights: weights,
        })
    }

    /// Builds a model around an explicit teacher.
    pub fn with_teacher(batch_size: usize, amplitudes: Vec<f64>, weights: Vec<Vec<f64>>) -> Result<Self> {
        let input_dim = weights.first().map(Vec::len).unwrap_or(0);
        if input_dim == 0 || amplitudes.len() != weights.len() || weights.iter().any(|w| w.len() != input_dim) {
            return Err(Error::config("inconsistent teacher parameters"));
        }
        if batch_size == 0 {
            return Err(Error::config("relu model batch size must be >= 1"));
        }
        Ok(ReluStudentTeacher {
            input_dim,
            batch_size,
            teacher_amplitudes: amplitudes,
            teacher_weights: weights,
        })
    }

    pub fn teacher(&self) -> (&[f64], &[Vec<f64>]) {
        (&self.teacher_amplitudes, &self.teacher_weights)
    }

    pub fn teacher_output(&self, x: &[f64]) -> f64 {
        let m = self.teacher_amplitudes.len() as f64;
        self.teacher_amplitudes
            .iter()
            .zip(&self.teacher_weights)
            .map(|(c, y)| c * relu(dot(y, x)))
            .sum::<f64>()
            / m
    }

    pub fn student_output(&self, x: &[f64], particles: &[ParticleState]) -> f64 {
        particles.iter().map(|p| p.c() * relu(dot(&p.position, x))).sum::<f64>() / particles.len() as f64
    }
}

impl Potential for ReluStudentTeacher {
    fn kind(&self) -> &'static str {
        "relu-student-teacher"
    }

    fn dimension(&self) -> usize {
        self.input_dim
    }

    fn has_amplitude(&self) -> bool {
        true
    }

    fn is_interacting(&self) -> bool {
        true
    }

    fn is_exact(&self) -> bool {
        false
    }

    fn f(&self, _p: &ParticleState) -> Result<f64> {
        Err(Error::Unsupported(
            "exact F is unavailable for the relu student-teacher model; use minibatch estimates".into(),
        ))
    }

    fn add_grad_f(&self, _p: &ParticleState, _scale: f64, _out: &mut Gradient) -> Result<()> {
        Err(Error::Unsupported(
            "exact gradients are unavailable for the relu student-teacher model; use minibatch estimates".into(),
        ))
    }

    fn evaluate(&self, _particles: &[ParticleState], _with_grad: bool) -> Result<FieldEval> {
        Err(Error::Unsupported(
            "exact potentials are unavailable for the relu student-teacher model".into(),
        ))
    }

    fn batch(&self) -> Option<&dyn BatchPotential> {
        Some(self)
    }
}

impl BatchPotential for ReluStudentTeacher {
    fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn sample_inputs(&self, count: usize, rng: &mut SimRng) -> Vec<f64> {
        (0..count * self.input_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn batch_eval(&self, particles: &[ParticleState], batch: &[f64]) -> Result<BatchEval> {
        let d = self.input_dim;
        if batch.is_empty() || batch.len() % d != 0 {
            return Err(Error::config("minibatch must contain at least one input of the model dimension"));
        }
        for p in particles {
            check_dims(self, p)?;
        }
        let pcount = batch.len() / d;
        let n = particles.len();
        // pre-activations, row p holds ⟨yᵢ, xₚ⟩ for all i
        let mut pre = vec![0.0; pcount * n];
        let mut residual = vec![0.0; pcount];
        for (pi, x) in batch.chunks_exact(d).enumerate() {
            let mut out = 0.0;
            for (i, p) in particles.iter().enumerate() {
                let z = dot(&p.position, x);
                pre[pi * n + i] = z;
                out += p.c() * relu(z);
            }
            residual[pi] = out / n as f64 - self.teacher_output(x);
        }
        let pf = pcount as f64;
        let mut vhat = vec![0.0; n];
        let mut grad: Vec<Gradient> = (0..n).map(|_| Gradient::zeros(d)).collect();
        for (pi, x) in batch.chunks_exact(d).enumerate() {
            let r = residual[pi];
            for i in 0..n {
                let z = pre[pi * n + i];
                if z > 0.0 {
                    vhat[i] += z * r / pf;
                    let s = particles[i].c() * r / pf;
                    for (g, xa) in grad[i].position.iter_mut().zip(x) {
                        *g += s * xa;
                    }
                }
            }
        }
        for (g, v) in grad.iter_mut().zip(&vhat) {
            g.amplitude = *v;
        }
        let potential: Vec<f64> = particles.iter().zip(&vhat).map(|(p, v)| p.c() * v).collect();
        let loss = residual.iter().map(|r| r * r).sum::<f64>() / (2.0 * pf);
        crate::error::ensure_finite(&potential, "batch potential")?;
        Ok(BatchEval {
            vhat,
            potential,
            grad,
            loss,
        })
    }

    fn teacher_csv(&self) -> String {
        let mut out = String::from("unit,amplitude");
        for a in 0..self.input_dim {
            let _ = write!(out, ",w_{a}");
        }
        out.push('\n');
        for (j, (c, y)) in self.teacher_amplitudes.iter().zip(&self.teacher_weights).enumerate() {
            let _ = write!(out, "{j},{}", fmt_real(*c));
            for v in y {
                let _ = write!(out, ",{}", fmt_real(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// `V̂_P(yᵢ)` for every particle of a ReLU student.
pub fn batch_potential_hat(model: &dyn Potential, ens: &Ensemble, batch: &[f64]) -> Result<Vec<f64>> {
    let bm = model
        .batch()
        .ok_or_else(|| Error::Unsupported(format!("{} has no minibatch estimator", model.kind())))?;
    Ok(bm.batch_eval(ens.particles(), batch)?.vhat)
}

// ---------------------------------------------------------------------------
// Config

/// Structured model description, as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    QuadraticWell {
        minimizer: Vec<f64>,
        /// Row-major; defaults to the identity.
        #[serde(default)]
        hessian: Option<Vec<Vec<f64>>>,
    },
    DoubleWell {
        dimension: usize,
        tilt: f64,
    },
    GaussianMixtureRbf {
        dimension: usize,
        sigma: f64,
        components: Vec<MixtureComponent>,
        #[serde(default)]
        fixed_amplitude: Option<f64>,
    },
    ReluStudentTeacher {
        input_dim: usize,
        teacher_units: usize,
        batch_size: usize,
        /// Seed for the teacher draw; defaults to the experiment seed.
        #[serde(default)]
        teacher_seed: Option<u64>,
    },
}

impl ModelSpec {
    pub fn build(&self, experiment_seed: u64) -> Result<Box<dyn Potential>> {
        Ok(match self {
            ModelSpec::QuadraticWell { minimizer, hessian } => {
                let k = minimizer.len();
                let h = match hessian {
                    None => DMatrix::identity(k, k),
                    Some(rows) => {
                        if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                            return Err(Error::config(format!("hessian must be {k}x{k}")));
                        }
                        DMatrix::from_fn(k, k, |r, c| rows[r][c])
                    }
                };
                Box::new(QuadraticWell::new(minimizer.clone(), h)?)
            }
            ModelSpec::DoubleWell { dimension, tilt } => Box::new(DoubleWell::new(*dimension, *tilt)?),
            ModelSpec::GaussianMixtureRbf {
                dimension,
                sigma,
                components,
                fixed_amplitude,
            } => {
                let m = GaussianMixture::new(*dimension, *sigma, components.clone())?;
                match fixed_amplitude {
                    Some(c) => Box::new(m.with_fixed_amplitude(*c)?),
                    None => Box::new(m),
                }
            }
            ModelSpec::ReluStudentTeacher {
                input_dim,
                teacher_units,
                batch_size,
                teacher_seed,
            } => {
                let mut rng = rng::stream(teacher_seed.unwrap_or(experiment_seed), rng::STREAM_TEACHER);
                Box::new(ReluStudentTeacher::new(*input_dim, *teacher_units, *batch_size, &mut rng)?)
            }
        })
    }

    /// The mixture model, when this spec describes one.
    pub fn build_mixture(&self) -> Option<Result<GaussianMixture>> {
        match self {
            ModelSpec::GaussianMixtureRbf {
                dimension,
                sigma,
                components,
                fixed_amplitude,
            } => Some(GaussianMixture::new(*dimension, *sigma, components.clone()).and_then(|m| match fixed_amplitude {
                Some(c) => m.with_fixed_amplitude(*c),
                None => Ok(m),
            })),
            _ => None,
        }
    }
}
