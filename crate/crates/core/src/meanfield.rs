//! Deterministic reference solutions for the mean-field limit: the exact
//! birth-death law without transport, the exponential-rate asymptote with
//! transport, the gaussian solution for quadratic landscapes, and a 1D
//! finite-volume solver for the conserved transport/birth-death equation.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::ensemble::{fmt_real, Dist1, ParticleState};
use crate::error::{Error, Result};
use crate::potentials::{check_spd, Gradient, Potential};

// ---------------------------------------------------------------------------
// Quadrature

/// Composite Simpson rule on `[lo, hi]` with an even number of panels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub lo: f64,
    pub hi: f64,
    pub panels: usize,
}

impl Quadrature {
    pub fn new(lo: f64, hi: f64, panels: usize) -> Result<Self> {
        if !(lo < hi) || panels < 2 {
            return Err(Error::config("quadrature needs lo < hi and at least 2 panels"));
        }
        Ok(Quadrature {
            lo,
            hi,
            panels: panels + panels % 2,
        })
    }

    /// Nodes and weights.
    pub fn rule(&self) -> (Vec<f64>, Vec<f64>) {
        let h = (self.hi - self.lo) / self.panels as f64;
        let mut xs = Vec::with_capacity(self.panels + 1);
        let mut ws = Vec::with_capacity(self.panels + 1);
        for i in 0..=self.panels {
            xs.push(self.lo + h * i as f64);
            let c = if i == 0 || i == self.panels {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            ws.push(c * h / 3.0);
        }
        (xs, ws)
    }

    pub fn integrate(&self, g: impl Fn(f64) -> f64) -> f64 {
        let (xs, ws) = self.rule();
        xs.iter().zip(&ws).map(|(x, w)| w * g(*x)).sum()
    }
}

// ---------------------------------------------------------------------------
// Pure birth-death

/// Exact law of the birth-death equation without transport:
/// `ρ_t ∝ e^{−αtF} ρ₀`.
pub struct PureBirthDeath<'a> {
    f: &'a dyn Fn(f64) -> f64,
    rho0: &'a dyn Fn(f64) -> f64,
    alpha: f64,
    weights: Vec<f64>,
    f_nodes: Vec<f64>,
    rho_nodes: Vec<f64>,
    f_min: f64,
}

impl<'a> PureBirthDeath<'a> {
    pub fn new(f: &'a dyn Fn(f64) -> f64, rho0: &'a dyn Fn(f64) -> f64, alpha: f64, quad: Quadrature) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::config("alpha must be >= 0"));
        }
        let (nodes, weights) = quad.rule();
        let f_nodes: Vec<f64> = nodes.iter().map(|&x| f(x)).collect();
        let rho_nodes: Vec<f64> = nodes.iter().map(|&x| rho0(x)).collect();
        if f_nodes.iter().chain(&rho_nodes).any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure("F or the initial density is not finite on the grid".into()));
        }
        let f_min = f_nodes.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(PureBirthDeath {
            f,
            rho0,
            alpha,
            weights,
            f_nodes,
            rho_nodes,
            f_min,
        })
    }

    fn normalizer(&self, t: f64) -> Result<f64> {
        let z: f64 = self
            .f_nodes
            .iter()
            .zip(&self.rho_nodes)
            .zip(&self.weights)
            .map(|((fv, r), w)| w * r * (-self.alpha * t * (fv - self.f_min)).exp())
            .sum();
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::NumericFailure(format!("normalizer underflow at t = {t}")));
        }
        Ok(z)
    }

    pub fn density(&self, t: f64, theta: f64) -> Result<f64> {
        let z = self.normalizer(t)?;
        Ok((-self.alpha * t * ((self.f)(theta) - self.f_min)).exp() * (self.rho0)(theta) / z)
    }

    /// `F̄(t) = ∫ F ρ_t`.
    pub fn mean_energy(&self, t: f64) -> Result<f64> {
        let z = self.normalizer(t)?;
        let num: f64 = self
            .f_nodes
            .iter()
            .zip(&self.rho_nodes)
            .zip(&self.weights)
            .map(|((fv, r), w)| w * fv * r * (-self.alpha * t * (fv - self.f_min)).exp())
            .sum();
        Ok(num / z)
    }
}

pub fn pure_bd_density(
    f: &dyn Fn(f64) -> f64,
    rho0: &dyn Fn(f64) -> f64,
    alpha: f64,
    t: f64,
    theta: f64,
    quad: Quadrature,
) -> Result<f64> {
    PureBirthDeath::new(f, rho0, alpha, quad)?.density(t, theta)
}

pub fn pure_bd_mean_energy(f: &dyn Fn(f64) -> f64, rho0: &dyn Fn(f64) -> f64, alpha: f64, t: f64, quad: Quadrature) -> Result<f64> {
    PureBirthDeath::new(f, rho0, alpha, quad)?.mean_energy(t)
}

// ---------------------------------------------------------------------------
// Transport + birth-death, quadratic landscapes

/// Curvature data at a nondegenerate minimum.
#[derive(Debug, Clone)]
pub struct RateFormulas {
    eigen: SymmetricEigen<f64, nalgebra::Dyn>,
    alpha: f64,
}

impl RateFormulas {
    pub fn new(hessian: &DMatrix<f64>, alpha: f64) -> Result<Self> {
        check_spd(hessian)?;
        if !(alpha > 0.0) {
            return Err(Error::config("alpha must be > 0"));
        }
        Ok(RateFormulas {
            eigen: hessian.clone().symmetric_eigen(),
            alpha,
        })
    }

    pub fn dimension(&self) -> usize {
        self.eigen.eigenvalues.len()
    }

    /// `α⁻¹ tr(H e^{−2Ht})`.
    pub fn asymptote(&self, t: f64) -> f64 {
        self.eigen
            .eigenvalues
            .iter()
            .map(|l| l * (-2.0 * l * t).exp())
            .sum::<f64>()
            / self.alpha
    }

    /// `(2αt)⁻¹ d`, the decay of `F̄` without transport.
    pub fn pure_bd_asymptote(&self, t: f64) -> f64 {
        self.dimension() as f64 / (2.0 * self.alpha * t)
    }
}

pub fn transport_bd_asymptote(hessian: &DMatrix<f64>, alpha: f64, t: f64) -> Result<f64> {
    Ok(RateFormulas::new(hessian, alpha)?.asymptote(t))
}

/// `e^{sH}` for symmetric `H`.
fn sym_expm(eigen: &SymmetricEigen<f64, nalgebra::Dyn>, s: f64) -> DMatrix<f64> {
    let q = &eigen.eigenvectors;
    let d = DMatrix::from_diagonal(&eigen.eigenvalues.map(|l| (s * l).exp()));
    q * d * q.transpose()
}

/// Gaussian law `N(mean, cov)` in `R^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Smallest variance reported by the gaussian solution.
pub const VARIANCE_FLOOR: f64 = 1e-300;

impl GaussianLaw {
    pub fn density(&self, theta: &[f64]) -> Result<f64> {
        let k = self.mean.len();
        if theta.len() != k {
            return Err(Error::config("point has wrong dimension"));
        }
        let chol = self
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NumericFailure("covariance is not positive definite".into()))?;
        let diff = DVector::from_column_slice(theta) - &self.mean;
        let sol = chol.solve(&diff);
        let quad = diff.dot(&sol);
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        Ok((-0.5 * (quad + log_det + k as f64 * (2.0 * std::f64::consts::PI).ln())).exp())
    }
}

/// Exact solution of transport plus birth-death for
/// `F = ½⟨θ−θ*, H(θ−θ*)⟩` from a gaussian initial law. With `θ̃ = θ − θ*`,
/// the precision is `P_t = (α/2)(e^{2Ht} − I) + e^{Ht} Σ₀⁻¹ e^{Ht}` and the
/// mean of `θ̃` is `P_t⁻¹ e^{Ht} Σ₀⁻¹ (m₀ − θ*)`.
pub fn characteristics_gaussian(hessian: &DMatrix<f64>, minimizer: &[f64], init: &GaussianLaw, alpha: f64, t: f64) -> Result<GaussianLaw> {
    check_spd(hessian)?;
    let k = minimizer.len();
    if hessian.nrows() != k || init.mean.len() != k || init.cov.nrows() != k {
        return Err(Error::config("dimension mismatch between hessian, minimizer and initial law"));
    }
    if !(t >= 0.0) || !(alpha >= 0.0) {
        return Err(Error::config("need t >= 0 and alpha >= 0"));
    }
    let eig = hessian.clone().symmetric_eigen();
    let e = sym_expm(&eig, t);
    let p0 = init
        .cov
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::config("initial covariance is singular"))?;
    let id = DMatrix::<f64>::identity(k, k);
    let e2 = sym_expm(&eig, 2.0 * t);
    let prec = (e2 - &id) * (0.5 * alpha) + &e * &p0 * &e;
    let prec = (&prec + prec.transpose()) * 0.5;
    let pe = prec.symmetric_eigen();
    let cov_eigs = pe.eigenvalues.map(|l| (1.0 / l).max(VARIANCE_FLOOR));
    let cov = &pe.eigenvectors * DMatrix::from_diagonal(&cov_eigs) * pe.eigenvectors.transpose();
    let star = DVector::from_column_slice(minimizer);
    let mean = &star + &cov * (&e * (&p0 * (&init.mean - &star)));
    Ok(GaussianLaw { mean, cov })
}

pub fn characteristics_density_quadratic(
    hessian: &DMatrix<f64>,
    minimizer: &[f64],
    init: &GaussianLaw,
    alpha: f64,
    t: f64,
    theta: &[f64],
) -> Result<f64> {
    characteristics_gaussian(hessian, minimizer, init, alpha, t)?.density(theta)
}

// ---------------------------------------------------------------------------
// 1D finite-volume solver

/// Cell-averaged density on a uniform grid of `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D {
    pub lo: f64,
    pub hi: f64,
    pub density: Vec<f64>,
    pub time: f64,
}

/// Largest initial mass allowed outside the grid.
pub const TRUNCATION_TOL: f64 = 1e-8;

impl Grid1D {
    pub fn new(lo: f64, hi: f64, density: Vec<f64>) -> Result<Self> {
        if !(lo < hi) || density.len() < 2 {
            return Err(Error::config("grid needs lo < hi and at least 2 cells"));
        }
        if density.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::config("grid density must be finite and nonnegative"));
        }
        let mut g = Grid1D {
            lo,
            hi,
            density,
            time: 0.0,
        };
        g.normalize()?;
        Ok(g)
    }

    /// Exact cell averages of `dist` on `[lo, hi]`. Fails if more than
    /// [`TRUNCATION_TOL`] of the mass falls outside.
    pub fn from_dist(dist: &Dist1, lo: f64, hi: f64, cells: usize) -> Result<Self> {
        dist.validate()?;
        if let Dist1::Point { .. } = dist {
            return Err(Error::config("a point mass has no grid density"));
        }
        if !(lo < hi) || cells < 2 {
            return Err(Error::config("grid needs lo < hi and at least 2 cells"));
        }
        let outside = 1.0 - dist.mass(lo, hi);
        if outside > TRUNCATION_TOL {
            return Err(Error::config(format!(
                "grid [{lo}, {hi}] truncates {outside:e} of the initial mass"
            )));
        }
        let dx = (hi - lo) / cells as f64;
        let density = (0..cells)
            .map(|i| {
                let a = lo + dx * i as f64;
                dist.mass(a, a + dx) / dx
            })
            .collect();
        Grid1D::new(lo, hi, density)
    }

    /// Grid over `dist`'s support, or ±`width_in_std` standard deviations for
    /// unbounded laws.
    pub fn around(dist: &Dist1, width_in_std: f64, cells: usize) -> Result<Self> {
        let (lo, hi) = dist.support(width_in_std);
        Self::from_dist(dist, lo, hi, cells)
    }

    pub fn cells(&self) -> usize {
        self.density.len()
    }

    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / self.cells() as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + self.dx() * (i as f64 + 0.5)
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.cells()).map(|i| self.center(i)).collect()
    }

    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.dx()
    }

    pub fn expectation(&self, phi: impl Fn(f64) -> f64) -> f64 {
        let dx = self.dx();
        self.density
            .iter()
            .enumerate()
            .map(|(i, r)| phi(self.center(i)) * r)
            .sum::<f64>()
            * dx
    }

    /// `∫|ρ − g|` with `g` sampled at cell centers.
    pub fn l1_distance(&self, g: impl Fn(f64) -> f64) -> f64 {
        let dx = self.dx();
        self.density
            .iter()
            .enumerate()
            .map(|(i, r)| (r - g(self.center(i))).abs())
            .sum::<f64>()
            * dx
    }

    fn normalize(&mut self) -> Result<()> {
        let m = self.mass();
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::NumericFailure("grid mass vanished".into()));
        }
        self.density.iter_mut().for_each(|r| *r /= m);
        Ok(())
    }

    /// Snapshot as CSV `theta,density`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta,density\n");
        for (i, r) in self.density.iter().enumerate() {
            let _ = writeln!(out, "{},{}", fmt_real(self.center(i)), fmt_real(*r));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dt: f64,
    pub alpha: f64,
    #[serde(default = "yes")]
    pub transport: bool,
    #[serde(default = "yes")]
    pub birth_death: bool,
}

fn yes() -> bool {
    true
}

/// Clip mass above which a step counts as unstable.
pub const CLIP_WARN: f64 = 1e-6;
/// Unstable steps tolerated before the solver gives up.
pub const CLIP_LIMIT: usize = 100;
/// Largest admissible `Δt·max|∂θV|/Δx`.
pub const CFL_MAX: f64 = 0.9;

/// Explicit upwind/Euler stepper for
/// `∂ρ = ∂θ(ρ ∂θV) − α(V − V̄)ρ` on a fixed grid with zero-flux boundaries.
/// `F`, `K` and their derivatives are tabulated once.
pub struct GridSolver<'a> {
    model: &'a dyn Potential,
    pub cfg: GridConfig,
    f_center: Vec<f64>,
    df_face: Vec<f64>,
    k_center: Vec<f64>,
    dk_face: Vec<f64>,
    cells: usize,
    pub clip_events: usize,
    pub clip_mass_total: f64,
}

fn point(x: f64) -> ParticleState {
    ParticleState::new(vec![x])
}

impl<'a> GridSolver<'a> {
    pub fn new(model: &'a dyn Potential, grid: &Grid1D, cfg: GridConfig) -> Result<Self> {
        if model.dimension() != 1 || model.has_amplitude() || !model.is_exact() {
            return Err(Error::config(format!(
                "the grid solver needs an exact 1D model without amplitude channel, got {}",
                model.kind()
            )));
        }
        if !(cfg.dt > 0.0) || !(cfg.alpha >= 0.0) {
            return Err(Error::config("grid solver needs dt > 0 and alpha >= 0"));
        }
        let m = grid.cells();
        let dx = grid.dx();
        let centers = grid.centers();
        let faces: Vec<f64> = (0..=m).map(|i| grid.lo + dx * i as f64).collect();
        let mut f_center = Vec::with_capacity(m);
        for &x in &centers {
            f_center.push(model.f(&point(x))?);
        }
        let mut df_face = Vec::with_capacity(m + 1);
        for &x in &faces {
            let mut g = Gradient::zeros(1);
            model.add_grad_f(&point(x), 1.0, &mut g)?;
            df_face.push(g.position[0]);
        }
        let (mut k_center, mut dk_face) = (Vec::new(), Vec::new());
        if model.is_interacting() {
            let pts: Vec<ParticleState> = centers.iter().map(|&x| point(x)).collect();
            k_center = vec![0.0; m * m];
            for i in 0..m {
                for j in i..m {
                    let v = model.k(&pts[i], &pts[j]);
                    k_center[i * m + j] = v;
                    k_center[j * m + i] = v;
                }
            }
            dk_face = vec![0.0; (m + 1) * m];
            for (f, &x) in faces.iter().enumerate() {
                let pf = point(x);
                for (j, pj) in pts.iter().enumerate() {
                    let mut g = Gradient::zeros(1);
                    model.add_grad_k(&pf, pj, 1.0, &mut g);
                    dk_face[f * m + j] = g.position[0];
                }
            }
        }
        let all_finite = f_center
            .iter()
            .chain(&df_face)
            .chain(&k_center)
            .chain(&dk_face)
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NumericFailure("model tables contain non-finite values".into()));
        }
        Ok(GridSolver {
            model,
            cfg,
            f_center,
            df_face,
            k_center,
            dk_face,
            cells: m,
            clip_events: 0,
            clip_mass_total: 0.0,
        })
    }

    pub fn model(&self) -> &dyn Potential {
        self.model
    }

    fn check_grid(&self, grid: &Grid1D) -> Result<()> {
        if grid.cells() != self.cells {
            return Err(Error::config("grid does not match the solver tables"));
        }
        Ok(())
    }

    /// `V` at cell centers.
    pub fn potential(&self, grid: &Grid1D) -> Vec<f64> {
        let m = self.cells;
        let dx = grid.dx();
        let mut v = self.f_center.clone();
        if !self.k_center.is_empty() {
            for (i, vi) in v.iter_mut().enumerate() {
                let row = &self.k_center[i * m..(i + 1) * m];
                *vi += row.iter().zip(&grid.density).map(|(k, r)| k * r).sum::<f64>() * dx;
            }
        }
        v
    }

    /// `∂θV` at the `M + 1` cell faces.
    pub fn face_slope(&self, grid: &Grid1D) -> Vec<f64> {
        let m = self.cells;
        let dx = grid.dx();
        let mut s = self.df_face.clone();
        if !self.dk_face.is_empty() {
            for (f, sf) in s.iter_mut().enumerate() {
                let row = &self.dk_face[f * m..(f + 1) * m];
                *sf += row.iter().zip(&grid.density).map(|(k, r)| k * r).sum::<f64>() * dx;
            }
        }
        s
    }

    /// `E[ρ] = ∫Fρ + ½∬Kρρ`.
    pub fn energy(&self, grid: &Grid1D) -> Result<f64> {
        self.check_grid(grid)?;
        let dx = grid.dx();
        let lin: f64 = self.f_center.iter().zip(&grid.density).map(|(f, r)| f * r).sum::<f64>() * dx;
        if self.k_center.is_empty() {
            return Ok(lin);
        }
        let v = self.potential(grid);
        // ∫Vρ = ∫Fρ + ∬Kρρ
        let full: f64 = v.iter().zip(&grid.density).map(|(a, r)| a * r).sum::<f64>() * dx;
        Ok(0.5 * (lin + full))
    }

    /// One explicit step; `V` is evaluated once from the incoming density
    /// and used for both the flux and the reaction.
    pub fn step(&mut self, grid: &mut Grid1D) -> Result<()> {
        self.check_grid(grid)?;
        let m = self.cells;
        let dx = grid.dx();
        let dt = self.cfg.dt;
        let v = self.potential(grid);
        let mut next = grid.density.clone();
        if self.cfg.transport {
            let slope = self.face_slope(grid);
            // interior faces only: the boundaries carry no flux
            let max_slope = slope[1..m].iter().fold(0.0f64, |a, s| a.max(s.abs()));
            let cfl = dt * max_slope / dx;
            if cfl > CFL_MAX {
                return Err(Error::StepSize(format!(
                    "CFL number {cfl:.3} exceeds {CFL_MAX}; reduce dt below {:.3e}",
                    CFL_MAX * dx / max_slope
                )));
            }
            let mut flux = vec![0.0; m + 1];
            for f in 1..m {
                let u = -slope[f];
                flux[f] = if u > 0.0 { u * grid.density[f - 1] } else { u * grid.density[f] };
            }
            for i in 0..m {
                next[i] -= dt / dx * (flux[i + 1] - flux[i]);
            }
        }
        if self.cfg.birth_death && self.cfg.alpha > 0.0 {
            let vbar: f64 = v.iter().zip(&grid.density).map(|(a, r)| a * r).sum::<f64>() * dx;
            for (r, vi) in next.iter_mut().zip(&v) {
                *r *= 1.0 - self.cfg.alpha * dt * (vi - vbar);
            }
        }
        let mut clipped = 0.0;
        for r in &mut next {
            if *r < 0.0 {
                clipped -= *r;
                *r = 0.0;
            }
        }
        let clip_mass = clipped * dx;
        self.clip_mass_total += clip_mass;
        if clip_mass > CLIP_WARN {
            self.clip_events += 1;
            log::warn!("grid step clipped {clip_mass:e} of negative mass");
            if self.clip_events > CLIP_LIMIT {
                return Err(Error::NumericFailure(format!(
                    "negative-density clipping exceeded {CLIP_WARN:e} on more than {CLIP_LIMIT} steps"
                )));
            }
        }
        if next.iter().any(|r| !r.is_finite()) {
            return Err(Error::NumericFailure("grid density became non-finite".into()));
        }
        grid.density = next;
        grid.normalize()?;
        grid.time += dt;
        Ok(())
    }

    /// Steps until `grid.time` reaches `t` (to within half a step).
    pub fn advance_to(&mut self, grid: &mut Grid1D, t: f64) -> Result<()> {
        while grid.time + 0.5 * self.cfg.dt < t {
            self.step(grid)?;
        }
        Ok(())
    }
}

/// Advances `grid` by one step of `cfg`.
pub fn grid_solver_1d(model: &dyn Potential, grid: &mut Grid1D, cfg: GridConfig) -> Result<()> {
    GridSolver::new(model, grid, cfg)?.step(grid)
}

pub fn grid_energy(model: &dyn Potential, grid: &Grid1D) -> Result<f64> {
    GridSolver::new(
        model,
        grid,
        GridConfig {
            dt: 1.0,
            alpha: 0.0,
            transport: false,
            birth_death: false,
        },
    )?
    .energy(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::QuadraticWell;

    fn std_normal(x: f64) -> f64 {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn asymptote_diagonal_cases() {
        let t = 0.37;
        let a = transport_bd_asymptote(&DMatrix::identity(2, 2), 1.0, t).unwrap();
        assert!((a - 2.0 * (-2.0 * t).exp()).abs() < 1e-15);
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let b = transport_bd_asymptote(&h, 2.0, t).unwrap();
        assert!((b - 0.5 * ((-2.0 * t).exp() + 4.0 * (-8.0 * t).exp())).abs() < 1e-15);
    }

    #[test]
    fn pure_bd_at_time_zero_is_initial() {
        let q = Quadrature::new(-10.0, 10.0, 4000).unwrap();
        let f = |x: f64| 0.5 * x * x;
        for x in [-1.0, 0.0, 2.5] {
            let d = pure_bd_density(&f, &std_normal, 1.0, 0.0, x, q).unwrap();
            assert!((d - std_normal(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_bd_offset_invariance() {
        let q = Quadrature::new(-10.0, 10.0, 4000).unwrap();
        let f = |x: f64| 0.5 * x * x;
        let g = |x: f64| 0.5 * x * x + 7.0;
        for x in [-1.0, 0.3, 2.0] {
            let a = pure_bd_density(&f, &std_normal, 1.0, 3.0, x, q).unwrap();
            let b = pure_bd_density(&g, &std_normal, 1.0, 3.0, x, q).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }

    #[test]
    fn constant_potential_grid_is_stationary() {
        let q = QuadraticWell::isotropic_1d(0.0, 1e-300).unwrap();
        let mut grid = Grid1D::from_dist(&Dist1::Uniform { lo: -1.0, hi: 1.0 }, -1.0, 1.0, 64).unwrap();
        let before = grid.density.clone();
        let cfg = GridConfig {
            dt: 0.01,
            alpha: 1.0,
            transport: true,
            birth_death: true,
        };
        grid_solver_1d(&q, &mut grid, cfg).unwrap();
        for (a, b) in before.iter().zip(&grid.density) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cfl_violation_is_reported() {
        let q = QuadraticWell::isotropic_1d(0.0, 1.0).unwrap();
        let mut grid = Grid1D::around(&Dist1::Gaussian { mean: 0.0, std: 1.0 }, 8.0, 256).unwrap();
        let cfg = GridConfig {
            dt: 0.1,
            alpha: 1.0,
            transport: true,
            birth_death: true,
        };
        assert!(matches!(grid_solver_1d(&q, &mut grid, cfg), Err(Error::StepSize(_))));
    }

    #[test]
    fn grid_mass_is_one_after_steps() {
        let q = QuadraticWell::isotropic_1d(0.5, 1.0).unwrap();
        let mut grid = Grid1D::around(&Dist1::Gaussian { mean: 0.0, std: 1.0 }, 8.0, 512).unwrap();
        let mut s = GridSolver::new(
            &q,
            &grid,
            GridConfig {
                dt: 0.002,
                alpha: 1.0,
                transport: true,
                birth_death: true,
            },
        )
        .unwrap();
        for _ in 0..50 {
            s.step(&mut grid).unwrap();
            assert!((grid.mass() - 1.0).abs() < 1e-12);
            assert!(grid.density.iter().all(|r| *r >= 0.0));
        }
    }

    #[test]
    fn point_like_grid_at_minimum_has_small_energy() {
        let q = QuadraticWell::isotropic_1d(0.0, 1.0).unwrap();
        let m = 101;
        let mut density = vec![0.0; m];
        density[50] = 1.0;
        let grid = Grid1D::new(-1.0, 1.0, density).unwrap();
        let e = grid_energy(&q, &grid).unwrap();
        let dx = grid.dx();
        assert!(e.abs() <= 0.5 * 0.5 * (dx / 2.0) * (dx / 2.0) + 1e-15);
    }

    #[test]
    fn truncation_is_monitored() {
        assert!(Grid1D::from_dist(&Dist1::Gaussian { mean: 0.0, std: 1.0 }, -3.0, 3.0, 100).is_err());
        assert!(Grid1D::around(&Dist1::Gaussian { mean: 0.0, std: 1.0 }, 8.0, 100).is_ok());
    }

    #[test]
    fn gaussian_solution_at_time_zero() {
        let init = GaussianLaw {
            mean: DVector::from_vec(vec![0.3]),
            cov: DMatrix::from_element(1, 1, 2.0),
        };
        let h = DMatrix::from_element(1, 1, 1.5);
        let law = characteristics_gaussian(&h, &[1.0], &init, 1.0, 0.0).unwrap();
        assert!((law.mean[0] - 0.3).abs() < 1e-14);
        assert!((law.cov[(0, 0)] - 2.0).abs() < 1e-14);
    }
}
