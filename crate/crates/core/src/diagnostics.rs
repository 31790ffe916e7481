//! Observables: energies, energy-decay terms, Euler-Lagrange residuals, rate
//! fits and the finite-n fluctuation study.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{run_step, DynamicsConfig, SchemeRegistry};
use crate::ensemble::{fmt_real, Dist1, Ensemble, ParticleState, Sampler};
use crate::error::{Error, Result};
use crate::meanfield::{characteristics_gaussian, GaussianLaw, Grid1D, GridConfig, GridSolver};
use crate::potentials::{mean_field_energy, Potential};
use crate::rng::{self, SimRng};

/// Header of the trajectory CSV.
pub const TRAJECTORY_HEADER: &str = "step,time,energy,mean_V,var_V,grad_norm_sq,births,deaths,n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: u64,
    pub time: f64,
    pub energy: f64,
    #[serde(rename = "mean_V")]
    pub mean_v: f64,
    #[serde(rename = "var_V")]
    pub var_v: f64,
    pub grad_norm_sq: f64,
    pub births: usize,
    pub deaths: usize,
    pub n: usize,
}

impl TrajectoryRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            fmt_real(self.time),
            fmt_real(self.energy),
            fmt_real(self.mean_v),
            fmt_real(self.var_v),
            fmt_real(self.grad_norm_sq),
            self.births,
            self.deaths,
            self.n
        )
    }
}

/// `E⁽ⁿ⁾ = n⁻¹ Σ wᵢFᵢ + (2n²)⁻¹ ΣΣ wᵢwⱼKᵢⱼ`.
pub fn ensemble_energy(model: &dyn Potential, ens: &Ensemble) -> Result<f64> {
    if !model.is_exact() {
        return Err(Error::Unsupported(format!(
            "{} has no exact energy; use the minibatch loss",
            model.kind()
        )));
    }
    mean_field_energy(model, ens)
}

/// `(∫|∇V|² dμ⁽ⁿ⁾, ∫(V − V̄)² dμ⁽ⁿ⁾)`.
pub fn energy_decay_terms(model: &dyn Potential, ens: &Ensemble) -> Result<(f64, f64)> {
    let ev = model.evaluate(ens.particles(), true)?;
    let n = ens.len() as f64;
    let ws: Vec<f64> = ens.particles().iter().map(|p| p.weight).collect();
    let vbar = ws.iter().zip(&ev.potential).map(|(w, v)| w * v).sum::<f64>() / n;
    let grad = ws.iter().zip(&ev.grad).map(|(w, g)| w * g.norm_sq()).sum::<f64>() / n;
    let var = ws
        .iter()
        .zip(&ev.potential)
        .map(|(w, v)| w * (v - vbar) * (v - vbar))
        .sum::<f64>()
        / n;
    Ok((grad, var))
}

/// Energy and rate statistics of a configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observables {
    pub energy: f64,
    pub mean_v: f64,
    pub var_v: f64,
    pub grad_norm_sq: f64,
}

/// Exact models report exact quantities. Batch models report the loss and
/// potentials on one evaluation batch of `eval_batch` inputs (default: the
/// training batch size) drawn from `eval_rng`.
pub fn observe(model: &dyn Potential, ens: &Ensemble, eval_rng: &mut SimRng, eval_batch: Option<usize>) -> Result<Observables> {
    let n = ens.len() as f64;
    if let Some(bm) = model.batch() {
        let batch = bm.sample_inputs(eval_batch.unwrap_or(bm.batch_size()), eval_rng);
        let ev = bm.batch_eval(ens.particles(), &batch)?;
        let vbar = ev.potential.iter().sum::<f64>() / n;
        return Ok(Observables {
            energy: ev.loss,
            mean_v: vbar,
            var_v: ev.potential.iter().map(|v| (v - vbar) * (v - vbar)).sum::<f64>() / n,
            grad_norm_sq: ev.grad.iter().map(|g| g.norm_sq()).sum::<f64>() / n,
        });
    }
    let ev = model.evaluate(ens.particles(), true)?;
    let ps = ens.particles();
    let mut lin = 0.0;
    let mut vbar = 0.0;
    for (p, v) in ps.iter().zip(&ev.potential) {
        lin += p.weight * model.f(p)?;
        vbar += p.weight * v;
    }
    lin /= n;
    vbar /= n;
    let var_v = ps
        .iter()
        .zip(&ev.potential)
        .map(|(p, v)| p.weight * (v - vbar) * (v - vbar))
        .sum::<f64>()
        / n;
    let grad_norm_sq = ps
        .iter()
        .zip(&ev.grad)
        .map(|(p, g)| p.weight * g.norm_sq())
        .sum::<f64>()
        / n;
    Ok(Observables {
        energy: 0.5 * (lin + vbar),
        mean_v: vbar,
        var_v,
        grad_norm_sq,
    })
}

/// `(maxᵢ |V(θᵢ) − V̄|, max(0, V̄ − min_probes V))` with probe potentials
/// taken against the empirical measure.
pub fn euler_lagrange_residual(model: &dyn Potential, ens: &Ensemble, probes: &[ParticleState]) -> Result<(f64, f64)> {
    if probes.is_empty() {
        return Err(Error::config("euler-lagrange residual needs at least one probe"));
    }
    let ev = model.evaluate(ens.particles(), false)?;
    let n = ens.len() as f64;
    let vbar = ens
        .particles()
        .iter()
        .zip(&ev.potential)
        .map(|(p, v)| p.weight * v)
        .sum::<f64>()
        / n;
    let support = ev.potential.iter().map(|v| (v - vbar).abs()).fold(0.0, f64::max);
    let mut min_probe = f64::INFINITY;
    for q in probes {
        let mut v = model.f(q)?;
        if model.is_interacting() {
            v += ens.particles().iter().map(|p| p.weight * model.k(q, p)).sum::<f64>() / n;
        }
        min_probe = min_probe.min(v);
    }
    Ok((support, (vbar - min_probe).max(0.0)))
}

// ---------------------------------------------------------------------------
// Rate fits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitForm {
    /// `E = a·t^b`.
    PowerLaw,
    /// `E = a·e^{bt}`.
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub coefficient: f64,
    /// Exponent `b` of the power law or rate `b` of the exponential.
    pub exponent: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = a + b x`; returns `(a, b, r²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return Err(Error::Fit("need at least two points".into()));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Fit("abscissae are all equal".into()));
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    Ok((a, b, r2))
}

/// Fits `(t, E)` samples with `t` inside `window`. Needs at least 10 points.
pub fn rate_fit_points(points: &[(f64, f64)], window: (f64, f64), form: FitForm) -> Result<FitResult> {
    let sel: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(t, _)| *t >= window.0 && *t <= window.1)
        .collect();
    if sel.len() < 10 {
        return Err(Error::Fit(format!("only {} records in window {:?}", sel.len(), window)));
    }
    if let Some((t, e)) = sel.iter().find(|(_, e)| !(*e > 0.0)) {
        return Err(Error::Fit(format!("nonpositive energy {e} at t = {t}")));
    }
    let xs: Vec<f64> = match form {
        FitForm::PowerLaw => {
            if sel.iter().any(|(t, _)| !(*t > 0.0)) {
                return Err(Error::Fit("power-law fit needs t > 0".into()));
            }
            sel.iter().map(|(t, _)| t.ln()).collect()
        }
        FitForm::Exponential => sel.iter().map(|(t, _)| *t).collect(),
    };
    let ys: Vec<f64> = sel.iter().map(|(_, e)| e.ln()).collect();
    let (a, b, r2) = linear_fit(&xs, &ys)?;
    Ok(FitResult {
        coefficient: a.exp(),
        exponent: b,
        r2,
    })
}

pub fn rate_fit(records: &[TrajectoryRecord], window: (f64, f64), form: FitForm) -> Result<FitResult> {
    let pts: Vec<(f64, f64)> = records.iter().map(|r| (r.time, r.energy)).collect();
    rate_fit_points(&pts, window, form)
}

// ---------------------------------------------------------------------------
// Fluctuations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestFn {
    Theta,
    ThetaSquared,
    /// Indicator of `θ > 0`.
    Positive,
}

impl TestFn {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            TestFn::Theta => x,
            TestFn::ThetaSquared => x * x,
            TestFn::Positive => f64::from(x > 0.0),
        }
    }

    fn gaussian_expectation(&self, mean: f64, var: f64) -> f64 {
        match self {
            TestFn::Theta => mean,
            TestFn::ThetaSquared => mean * mean + var,
            TestFn::Positive => Dist1::Gaussian {
                mean: 0.0,
                std: var.sqrt(),
            }
            .cdf(mean),
        }
    }
}

/// Source of the mean-field law `μ_t` in a fluctuation study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Reference {
    /// 1D finite-volume solution on `cells` cells (±`width_in_std` around an
    /// unbounded initial law) with step `dt`.
    Grid { cells: usize, dt: f64, width_in_std: f64 },
    /// Exact gaussian law; quadratic landscapes with gaussian initial law.
    Gaussian,
}

pub struct FluctuationStudy<'a> {
    pub model: &'a dyn Potential,
    pub dynamics: DynamicsConfig,
    pub init: Dist1,
    pub n_list: Vec<usize>,
    pub seeds: usize,
    pub base_seed: u64,
    pub test_fns: Vec<TestFn>,
    /// Ascending observation times.
    pub checkpoints: Vec<f64>,
    /// Index into `checkpoints` used for the slope.
    pub slope_checkpoint: usize,
    pub reference: Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluctuationReport {
    /// Mean over test functions of the log-log slope of RMS against n.
    /// `None` for deterministic dynamics.
    pub slope: Option<f64>,
    pub slopes: Vec<f64>,
    /// `rms[n][checkpoint][test_fn]` of `∫φ d(μ⁽ⁿ⁾_t − μ_t)` over seeds.
    pub rms: Vec<Vec<Vec<f64>>>,
    /// `reference[checkpoint][test_fn]`.
    pub reference: Vec<Vec<f64>>,
    /// Largest over test functions of RMS at the last checkpoint over RMS at
    /// the first, at the largest n.
    pub quench_ratio: Option<f64>,
}

impl FluctuationStudy<'_> {
    fn validate(&self) -> Result<()> {
        if self.model.dimension() != 1 || !self.model.is_exact() || self.model.has_amplitude() {
            return Err(Error::config("fluctuation study needs an exact 1D model"));
        }
        if self.n_list.is_empty() || self.seeds == 0 || self.test_fns.is_empty() || self.checkpoints.is_empty() {
            return Err(Error::config("fluctuation study needs n values, seeds, test functions and checkpoints"));
        }
        if self.slope_checkpoint >= self.checkpoints.len() {
            return Err(Error::config("slope checkpoint out of range"));
        }
        if self.checkpoints.windows(2).any(|w| w[1] <= w[0]) || self.checkpoints[0] <= 0.0 {
            return Err(Error::config("checkpoints must be positive and increasing"));
        }
        self.dynamics.validate()?;
        self.init.validate()
    }

    fn reference_values(&self) -> Result<Vec<Vec<f64>>> {
        let transport = !matches!(self.dynamics.variant.as_str(), "bd-only" | "kmc-bd");
        let birth_death = self.dynamics.variant != "gd-only";
        match self.reference {
            Reference::Grid { cells, dt, width_in_std } => {
                let mut grid = Grid1D::around(&self.init, width_in_std, cells)?;
                let mut solver = GridSolver::new(
                    self.model,
                    &grid,
                    GridConfig {
                        dt,
                        alpha: self.dynamics.alpha,
                        transport,
                        birth_death,
                    },
                )?;
                let mut out = Vec::with_capacity(self.checkpoints.len());
                for &t in &self.checkpoints {
                    solver.advance_to(&mut grid, t)?;
                    out.push(self.test_fns.iter().map(|f| grid.expectation(|x| f.apply(x))).collect());
                }
                Ok(out)
            }
            Reference::Gaussian => {
                let (minimizer, hessian) = match (self.model.kind(), self.model.minimum()) {
                    ("quadratic-well", Some(m)) => m,
                    _ => return Err(Error::config("gaussian reference needs a quadratic-well model")),
                };
                let Dist1::Gaussian { mean, std } = self.init else {
                    return Err(Error::config("gaussian reference needs a gaussian initial law"));
                };
                if !transport || !birth_death {
                    return Err(Error::config("gaussian reference covers transport with birth-death only"));
                }
                let init = GaussianLaw {
                    mean: nalgebra::DVector::from_element(1, mean),
                    cov: nalgebra::DMatrix::from_element(1, 1, std * std),
                };
                self.checkpoints
                    .iter()
                    .map(|&t| {
                        let law = characteristics_gaussian(&hessian, &minimizer, &init, self.dynamics.alpha, t)?;
                        Ok(self
                            .test_fns
                            .iter()
                            .map(|f| f.gaussian_expectation(law.mean[0], law.cov[(0, 0)]))
                            .collect())
                    })
                    .collect()
            }
        }
    }

    /// `[checkpoint][test_fn]` empirical averages of one seeded trajectory.
    fn trajectory(&self, registry: &SchemeRegistry, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let scheme = registry.get(&self.dynamics.variant)?;
        let sampler = Sampler::Product {
            coords: vec![self.init.clone()],
        };
        let mut ens = Ensemble::init(&sampler, None, n, 1, seed)?;
        let mut rng = rng::stream(seed, rng::STREAM_DYNAMICS);
        let dt = scheme.step_duration(&self.dynamics);
        let mut out = Vec::with_capacity(self.checkpoints.len());
        for &t in &self.checkpoints {
            let target = (t / dt).round() as u64;
            while ens.step_count < target {
                run_step(scheme, self.model, &mut ens, &self.dynamics, &mut rng)?;
            }
            let mut row = Vec::with_capacity(self.test_fns.len());
            for f in &self.test_fns {
                row.push(ens.empirical_expectation(|x| f.apply(x[0]))?);
            }
            out.push(row);
        }
        Ok(out)
    }

    pub fn run(&self) -> Result<FluctuationReport> {
        self.validate()?;
        let registry = SchemeRegistry::with_builtins();
        registry.get(&self.dynamics.variant)?.check(self.model, &self.dynamics)?;
        let reference = self.reference_values()?;
        let jobs: Vec<(usize, u64)> = self
            .n_list
            .iter()
            .flat_map(|&n| (0..self.seeds as u64).map(move |s| (n, s)))
            .collect();
        let runs: Vec<Result<Vec<Vec<f64>>>> = jobs
            .par_iter()
            .map(|&(n, s)| self.trajectory(&registry, n, self.base_seed.wrapping_add(s)))
            .collect();
        let runs: Vec<Vec<Vec<f64>>> = runs.into_iter().collect::<Result<_>>()?;

        let (nc, nf) = (self.checkpoints.len(), self.test_fns.len());
        let mut rms = Vec::with_capacity(self.n_list.len());
        for (ni, _) in self.n_list.iter().enumerate() {
            let block = &runs[ni * self.seeds..(ni + 1) * self.seeds];
            let mut table = vec![vec![0.0; nf]; nc];
            for (c, row) in table.iter_mut().enumerate() {
                for (f, cell) in row.iter_mut().enumerate() {
                    let ss: f64 = block.iter().map(|r| (r[c][f] - reference[c][f]).powi(2)).sum();
                    *cell = (ss / self.seeds as f64).sqrt();
                }
            }
            rms.push(table);
        }

        let deterministic = self.dynamics.variant == "gd-only";
        let mut slopes = Vec::new();
        let mut slope = None;
        if !deterministic && self.n_list.len() >= 2 {
            let xs: Vec<f64> = self.n_list.iter().map(|&n| (n as f64).ln()).collect();
            for f in 0..nf {
                let ys: Vec<f64> = rms.iter().map(|t| t[self.slope_checkpoint][f].ln()).collect();
                slopes.push(linear_fit(&xs, &ys)?.1);
            }
            slope = Some(slopes.iter().sum::<f64>() / nf as f64);
        }
        let quench_ratio = (nc >= 2 && !deterministic).then(|| {
            let last = rms.last().expect("n_list is nonempty");
            (0..nf)
                .map(|f| last[nc - 1][f] / last[0][f])
                .fold(0.0, f64::max)
        });
        Ok(FluctuationReport {
            slope,
            slopes,
            rms,
            reference,
            quench_ratio,
        })
    }
}

pub fn fluctuation_scaling(study: &FluctuationStudy<'_>) -> Result<FluctuationReport> {
    study.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{GaussianMixture, MixtureComponent, QuadraticWell};

    #[test]
    fn synthetic_power_law() {
        let pts: Vec<(f64, f64)> = (1..=20).map(|i| (i as f64, 3.0 / i as f64)).collect();
        let fit = rate_fit_points(&pts, (0.0, 100.0), FitForm::PowerLaw).unwrap();
        assert!((fit.exponent + 1.0).abs() < 1e-6);
        assert!((fit.coefficient - 3.0).abs() < 1e-6);
        assert!(fit.r2 > 0.999999);
    }

    #[test]
    fn synthetic_exponential() {
        let pts: Vec<(f64, f64)> = (0..20).map(|i| (0.1 * i as f64, 2.0 * (-0.4 * i as f64).exp())).collect();
        let fit = rate_fit_points(&pts, (0.0, 100.0), FitForm::Exponential).unwrap();
        assert!((fit.exponent + 4.0).abs() < 1e-6);
        assert!((fit.coefficient - 2.0).abs() < 1e-6);
    }

    #[test]
    fn fit_rejects_nonpositive_and_short_windows() {
        let mut pts: Vec<(f64, f64)> = (1..=20).map(|i| (i as f64, 1.0)).collect();
        assert!(rate_fit_points(&pts, (1.0, 5.0), FitForm::PowerLaw).is_err());
        pts[3].1 = 0.0;
        assert!(matches!(rate_fit_points(&pts, (0.0, 100.0), FitForm::PowerLaw), Err(Error::Fit(_))));
    }

    #[test]
    fn energy_zero_at_minimum() {
        let q = QuadraticWell::isotropic_1d(2.0, 1.0).unwrap();
        let ens = Ensemble::from_positions_1d(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(ensemble_energy(&q, &ens).unwrap(), 0.0);
    }

    #[test]
    fn decay_terms_symmetric_pair() {
        let q = QuadraticWell::isotropic_1d(0.0, 1.0).unwrap();
        let ens = Ensemble::from_positions_1d(&[1.0, -1.0]).unwrap();
        let (g, v) = energy_decay_terms(&q, &ens).unwrap();
        assert!((g - 1.0).abs() < 1e-15);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn single_particle_mixture_energy() {
        let m = GaussianMixture::new(
            1,
            0.3,
            vec![MixtureComponent {
                amplitude: 1.0,
                center: vec![0.5],
                std: 0.6,
            }],
        )
        .unwrap();
        let p = ParticleState::new(vec![0.1]).with_amplitude(0.8);
        let ens = Ensemble::from_particles(vec![p.clone()]).unwrap();
        let expected = m.f(&p).unwrap() + 0.5 * m.k(&p, &p);
        assert!((ensemble_energy(&m, &ens).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn residual_at_single_particle_probe() {
        let q = QuadraticWell::isotropic_1d(0.0, 1.0).unwrap();
        let ens = Ensemble::from_positions_1d(&[0.7]).unwrap();
        let (s, e) = euler_lagrange_residual(&q, &ens, &[ParticleState::new(vec![0.7])]).unwrap();
        assert_eq!((s, e), (0.0, 0.0));
        assert!(euler_lagrange_residual(&q, &ens, &[]).is_err());
    }

    #[test]
    fn displaced_particle_raises_support_residual() {
        let q = QuadraticWell::isotropic_1d(0.0, 1.0).unwrap();
        let base = Ensemble::from_positions_1d(&[0.0, 0.0, 0.0]).unwrap();
        let moved = Ensemble::from_positions_1d(&[0.0, 0.0, 0.5]).unwrap();
        let probe = [ParticleState::new(vec![1.0])];
        let (a, _) = euler_lagrange_residual(&q, &base, &probe).unwrap();
        let (b, _) = euler_lagrange_residual(&q, &moved, &probe).unwrap();
        assert!(b > a);
    }
}
