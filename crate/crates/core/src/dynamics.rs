//! Time-stepping schemes.
//!
//! Every scheme implements [`Scheme`] and is registered by name in a
//! [`SchemeRegistry`]. The building blocks (`gd_step`, `centered_rate`,
//! `birth_death_step`, `kmc_run`, `proximal_weight_update`, ...) are public
//! so tests and diagnostics can drive them directly.
//!
//! Kill/duplicate convention: a particle whose centered potential `Ṽ` is
//! positive is killed with probability `1 − exp(−αṼΔt)`; one with `Ṽ < 0` is
//! duplicated with probability `1 − exp(−α|Ṽ|Δt)`.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Ensemble, ParticleState, Sampler};
use crate::error::{ensure_finite, Error, Result};
use crate::potentials::{Gradient, Potential};
use crate::rng::SimRng;

/// Odd, nondecreasing map applied to centered rates by the `gd-bd-fvariant`
/// scheme.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RateTransform {
    #[default]
    Identity,
    /// `f(z) = tanh(βz)/β`.
    Saturated { beta: f64 },
}

impl RateTransform {
    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            RateTransform::Identity => z,
            RateTransform::Saturated { beta } => (beta * z).tanh() / beta,
        }
    }

    /// Checks `z·f(z) ≥ 0` on 10³ points of `[-50, 50]`.
    pub fn validate(&self) -> Result<()> {
        if let RateTransform::Saturated { beta } = *self {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::config(format!("saturated rate transform needs beta > 0, got {beta}")));
            }
        }
        for k in 0..1000 {
            let z = -50.0 + 100.0 * k as f64 / 999.0;
            let fz = self.apply(z);
            if !fz.is_finite() || z * fz < 0.0 {
                return Err(Error::config(format!("rate transform violates z·f(z) >= 0 at z = {z}")));
            }
        }
        Ok(())
    }
}

fn default_dt() -> f64 {
    0.01
}
fn default_alpha() -> f64 {
    1.0
}
fn default_variant() -> String {
    "gd-bd".into()
}
fn default_proximal_m() -> usize {
    10
}
fn default_inner_iters() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Intensity of the masked reinjection term in the continuous-time
    /// model. The discrete reinjection scheme does not use it.
    #[serde(default)]
    pub alpha_prime: f64,
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default)]
    pub f_spec: RateTransform,
    /// Proximal step; defaults to `α·m·Δt`.
    #[serde(default)]
    pub tau: Option<f64>,
    /// Gradient steps per proximal cycle.
    #[serde(default = "default_proximal_m")]
    pub proximal_m: usize,
    #[serde(default = "default_inner_iters")]
    pub proximal_inner_iters: usize,
    /// Prior over positions for reinjected particles (their amplitude is 0).
    #[serde(default)]
    pub reinjection_prior: Option<Sampler>,
    /// Std of gaussian noise added to duplicated particles.
    #[serde(default)]
    pub jitter: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            dt: default_dt(),
            alpha: default_alpha(),
            alpha_prime: 0.0,
            variant: default_variant(),
            f_spec: RateTransform::Identity,
            tau: None,
            proximal_m: default_proximal_m(),
            proximal_inner_iters: default_inner_iters(),
            reinjection_prior: None,
            jitter: 0.0,
        }
    }
}

impl DynamicsConfig {
    pub fn with_variant(variant: &str, dt: f64, alpha: f64) -> Self {
        DynamicsConfig {
            dt,
            alpha,
            variant: variant.into(),
            ..Default::default()
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
            .unwrap_or(self.alpha * self.proximal_m as f64 * self.dt)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.alpha_prime >= 0.0) {
            return Err(Error::config("alpha_prime must be >= 0"));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::config("jitter must be >= 0"));
        }
        if let Some(t) = self.tau {
            if !(t > 0.0) {
                return Err(Error::config(format!("tau must be > 0, got {t}")));
            }
        }
        if self.proximal_m == 0 || self.proximal_inner_iters == 0 {
            return Err(Error::config("proximal_m and proximal_inner_iters must be >= 1"));
        }
        self.f_spec.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub births: usize,
    pub deaths: usize,
    /// `maxᵢ α|Ṽᵢ|Δt` over the rates of the step.
    pub max_rate: f64,
    /// Particles added or removed by population control.
    pub population_corrections: usize,
    /// Minibatch loss before the update (batch models only).
    pub batch_loss: Option<f64>,
}

impl StepReport {
    fn absorb(&mut self, other: StepReport) {
        self.births += other.births;
        self.deaths += other.deaths;
        self.max_rate = self.max_rate.max(other.max_rate);
        self.population_corrections += other.population_corrections;
        if other.batch_loss.is_some() {
            self.batch_loss = other.batch_loss;
        }
    }
}

// ---------------------------------------------------------------------------
// Building blocks

/// Potentials and gradients driving one step.
struct Drive {
    potential: Vec<f64>,
    grad: Vec<Gradient>,
    batch_loss: Option<f64>,
}

fn drive(model: &dyn Potential, ens: &Ensemble, rng: &mut SimRng, with_grad: bool) -> Result<Drive> {
    match model.batch() {
        Some(bm) => {
            let batch = bm.sample_batch(rng);
            let ev = bm.batch_eval(ens.particles(), &batch)?;
            Ok(Drive {
                potential: ev.potential,
                grad: ev.grad,
                batch_loss: Some(ev.loss),
            })
        }
        None => {
            let ev = model.evaluate(ens.particles(), with_grad)?;
            Ok(Drive {
                potential: ev.potential,
                grad: ev.grad,
                batch_loss: None,
            })
        }
    }
}

fn apply_gradient(model: &dyn Potential, ens: &mut Ensemble, grad: &[Gradient], dt: f64) -> Result<()> {
    let amp = model.has_amplitude();
    for (i, (p, g)) in ens.particles_mut().iter_mut().zip(grad).enumerate() {
        for (x, gx) in p.position.iter_mut().zip(&g.position) {
            *x -= dt * gx;
        }
        if amp {
            if let Some(c) = p.amplitude.as_mut() {
                *c -= dt * g.amplitude;
            }
        }
        if !p.position.iter().all(|x| x.is_finite()) || !p.c().is_finite() {
            return Err(Error::Numeric { what: "position", index: i });
        }
    }
    Ok(())
}

/// One synchronous forward-Euler step `θᵢ ← θᵢ − Δt ∇V(θᵢ)`. Batch models
/// draw a fresh minibatch from `rng`; exact models do not touch it.
pub fn gd_step(model: &dyn Potential, ens: &mut Ensemble, dt: f64, rng: &mut SimRng) -> Result<()> {
    let d = drive(model, ens, rng, true)?;
    apply_gradient(model, ens, &d.grad, dt)
}

/// `Ṽᵢ = Vᵢ − n⁻¹ Σⱼ Vⱼ`.
pub fn center(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// Centered potential of every particle (exact models).
pub fn centered_rate(model: &dyn Potential, ens: &Ensemble) -> Result<Vec<f64>> {
    let ev = model.evaluate(ens.particles(), false)?;
    Ok(center(&ev.potential))
}

/// `rᵢ = f(Ṽᵢ) − n⁻¹ Σⱼ f(Ṽⱼ)`. The identity returns its input untouched.
pub fn transform_rates(rates: Vec<f64>, f: &RateTransform) -> Result<Vec<f64>> {
    if *f == RateTransform::Identity {
        return Ok(rates);
    }
    let mapped: Vec<f64> = rates.iter().map(|&z| f.apply(z)).collect();
    ensure_finite(&mapped, "transformed rate")?;
    Ok(center(&mapped))
}

pub fn fvariant_rate(model: &dyn Potential, ens: &Ensemble, f: &RateTransform) -> Result<Vec<f64>> {
    transform_rates(centered_rate(model, ens)?, f)
}

/// Probability of an event over one step at centered rate `r`.
#[inline]
pub fn event_probability(alpha: f64, r: f64, dt: f64) -> f64 {
    -(-alpha * r.abs() * dt).exp_m1()
}

/// What happens to particles missing after the Bernoulli phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Refill {
    /// Duplicate uniformly chosen members of the population.
    Clone,
    /// Draw fresh particles from the reinjection prior with amplitude 0.
    Prior,
}

fn jittered(mut p: ParticleState, jitter: f64, rng: &mut SimRng) -> ParticleState {
    if jitter > 0.0 {
        for x in &mut p.position {
            let z: f64 = rng.sample(StandardNormal);
            *x += jitter * z;
        }
    }
    p
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Fate {
    Stay,
    Kill,
    Duplicate,
}

/// Independent kill/duplicate draws at frozen rates. Survivors keep their
/// order; clones are appended in parent order. Returns `(births, deaths)`.
pub fn bernoulli_phase(
    ens: &mut Ensemble,
    rates: &[f64],
    alpha: f64,
    dt: f64,
    jitter: f64,
    rng: &mut SimRng,
) -> Result<(usize, usize)> {
    if rates.len() != ens.len() {
        return Err(Error::Logic(format!("{} rates for {} particles", rates.len(), ens.len())));
    }
    ensure_finite(rates, "rate")?;
    let n = ens.len();
    let mut fate = Vec::with_capacity(n);
    let (mut births, mut deaths) = (0, 0);
    for &r in rates {
        let u: f64 = rng.random();
        let fire = r != 0.0 && u < event_probability(alpha, r, dt);
        fate.push(match (fire, r > 0.0) {
            (false, _) => Fate::Stay,
            (true, true) => {
                deaths += 1;
                Fate::Kill
            }
            (true, false) => {
                births += 1;
                Fate::Duplicate
            }
        });
    }
    if deaths == 0 && births == 0 {
        return Ok((0, 0));
    }
    let mut children = Vec::with_capacity(births);
    for (i, f) in fate.iter().enumerate() {
        if *f == Fate::Duplicate {
            let child = ens.offspring(i);
            children.push(jittered(child, jitter, rng));
        }
    }
    let mut next: Vec<ParticleState> = ens
        .take_particles()
        .into_iter()
        .zip(&fate)
        .filter(|(_, f)| **f != Fate::Kill)
        .map(|(p, _)| p)
        .collect();
    next.extend(children);
    if next.is_empty() {
        return Err(Error::Extinction);
    }
    ens.replace_particles(next);
    Ok((births, deaths))
}

/// Restores the population to `target`: the excess is killed uniformly
/// without replacement, a deficit is filled by duplicating uniformly chosen
/// members (or by prior draws for [`Refill::Prior`]). Returns the number of
/// corrections.
pub fn population_control(
    ens: &mut Ensemble,
    target: usize,
    refill: Refill,
    prior: Option<&Sampler>,
    jitter: f64,
    rng: &mut SimRng,
) -> Result<usize> {
    let n1 = ens.len();
    if n1 == 0 {
        return Err(Error::Extinction);
    }
    if n1 > target {
        let excess = n1 - target;
        let mut dead = vec![false; n1];
        for i in index::sample(rng, n1, excess) {
            dead[i] = true;
        }
        let next = ens
            .particles()
            .iter()
            .zip(&dead)
            .filter(|(_, &d)| !d)
            .map(|(p, _)| p.clone())
            .collect();
        ens.replace_particles(next);
        return Ok(excess);
    }
    let deficit = target - n1;
    match refill {
        Refill::Clone => {
            for _ in 0..deficit {
                let i = rng.random_range(0..ens.len());
                let child = ens.offspring(i);
                let child = jittered(child, jitter, rng);
                ens.push(child);
            }
        }
        Refill::Prior => {
            let prior = prior.ok_or_else(|| Error::config("reinjection needs a reinjection_prior"))?;
            let marginals = prior.marginals(ens.dimension())?;
            for _ in 0..deficit {
                let y = Sampler::sample_with(&marginals, rng);
                ens.push(ParticleState::new(y).with_amplitude(0.0));
            }
        }
    }
    Ok(deficit)
}

/// Bernoulli phase at the given frozen rates followed by population control.
pub fn birth_death_with_rates(
    ens: &mut Ensemble,
    rates: &[f64],
    cfg: &DynamicsConfig,
    refill: Refill,
    rng: &mut SimRng,
) -> Result<StepReport> {
    let n = ens.len();
    let max_rate = rates
        .iter()
        .map(|r| cfg.alpha * r.abs() * cfg.dt)
        .fold(0.0, f64::max);
    let (births, deaths) = bernoulli_phase(ens, rates, cfg.alpha, cfg.dt, cfg.jitter, rng)?;
    let population_corrections =
        population_control(ens, n, refill, cfg.reinjection_prior.as_ref(), cfg.jitter, rng)?;
    Ok(StepReport {
        births,
        deaths,
        max_rate,
        population_corrections,
        batch_loss: None,
    })
}

/// Birth-death pass with rates computed once on the current configuration.
pub fn birth_death_step(model: &dyn Potential, ens: &mut Ensemble, cfg: &DynamicsConfig, rng: &mut SimRng) -> Result<StepReport> {
    let rates = centered_rate(model, ens)?;
    birth_death_with_rates(ens, &rates, cfg, Refill::Clone, rng)
}

/// Like [`birth_death_step`] but a population deficit is filled from the
/// reinjection prior with zero amplitude.
pub fn reinjection_step(model: &dyn Potential, ens: &mut Ensemble, cfg: &DynamicsConfig, rng: &mut SimRng) -> Result<StepReport> {
    check_reinjection(model, cfg)?;
    let rates = centered_rate(model, ens)?;
    birth_death_with_rates(ens, &rates, cfg, Refill::Prior, rng)
}

fn check_reinjection(model: &dyn Potential, cfg: &DynamicsConfig) -> Result<()> {
    if !model.has_amplitude() {
        return Err(Error::config(format!(
            "reinjection needs a model with an amplitude channel, {} has none",
            model.kind()
        )));
    }
    match &cfg.reinjection_prior {
        Some(p) => p.validate(model.dimension()),
        None => Err(Error::config("reinjection needs a reinjection_prior")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KmcEventKind {
    /// The selected particle was killed and `partner` duplicated.
    Kill,
    /// The selected particle was duplicated and `partner` killed.
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KmcEvent {
    pub time: f64,
    pub kind: KmcEventKind,
    pub particle: usize,
    pub partner: usize,
}

/// Exact-in-time birth-death (no transport) for non-interacting models up to
/// `horizon`. Each event pairs a kill with a duplication, so the population
/// is constant; the clone takes the slot of the killed particle.
pub fn kmc_run(
    model: &dyn Potential,
    ens: &mut Ensemble,
    cfg: &DynamicsConfig,
    horizon: f64,
    rng: &mut SimRng,
) -> Result<Vec<KmcEvent>> {
    if model.is_interacting() || !model.is_exact() {
        return Err(Error::Unsupported(
            "kinetic Monte Carlo needs an exact non-interacting model".into(),
        ));
    }
    let n = ens.len();
    let mut f = Vec::with_capacity(n);
    for p in ens.particles() {
        f.push(model.f(p)?);
    }
    ensure_finite(&f, "F")?;
    let mut log = Vec::new();
    if n < 2 || cfg.alpha == 0.0 {
        return Ok(log);
    }
    let mut t = 0.0;
    let mut abs = vec![0.0; n];
    loop {
        let mean = f.iter().sum::<f64>() / n as f64;
        let mut total = 0.0;
        for (a, fi) in abs.iter_mut().zip(&f) {
            *a = (fi - mean).abs();
            total += *a;
        }
        let rate = cfg.alpha * total;
        if !(rate > 0.0) {
            break;
        }
        let u: f64 = rng.random();
        let wait = -(1.0 - u).ln() / rate;
        if t + wait > horizon {
            break;
        }
        t += wait;
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut i = n - 1;
        for (j, a) in abs.iter().enumerate() {
            acc += a;
            if target < acc {
                i = j;
                break;
            }
        }
        // uniform among the others
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let (kind, dead, parent) = if f[i] > mean {
            (KmcEventKind::Kill, i, j)
        } else {
            (KmcEventKind::Duplicate, j, i)
        };
        let child = ens.offspring(parent);
        ens.particles_mut()[dead] = child;
        f[dead] = f[parent];
        log.push(KmcEvent {
            time: t,
            kind,
            particle: i,
            partner: j,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProximalReport {
    pub iterations: usize,
    pub last_change: f64,
}

/// Solves `wᵢ = C⁻¹ wᵢ⁰ exp(−τ Vᵢ(w))`, with `C` fixing `n⁻¹Σw = 1`, by
/// fixed-point iteration started at `w⁰`. `F` and the kernel matrix are
/// computed once.
pub fn proximal_weight_update(model: &dyn Potential, ens: &mut Ensemble, tau: f64, inner_iters: usize) -> Result<ProximalReport> {
    if !model.is_exact() {
        return Err(Error::Unsupported("proximal update needs an exact model".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!("tau must be > 0, got {tau}")));
    }
    let ps = ens.particles();
    let n = ps.len();
    let nf = n as f64;
    let mut f = Vec::with_capacity(n);
    for p in ps {
        f.push(model.f(p)?);
    }
    ensure_finite(&f, "F")?;
    let kmat: Vec<f64> = if model.is_interacting() {
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = model.k(&ps[i], &ps[j]);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        ensure_finite(&k, "kernel")?;
        k
    } else {
        Vec::new()
    };
    let log_w0: Vec<f64> = ps.iter().map(|p| p.weight.ln()).collect();
    if ps.iter().all(|p| p.weight == 0.0) {
        return Err(Error::Extinction);
    }
    let mut w: Vec<f64> = ps.iter().map(|p| p.weight).collect();
    let mut next = vec![0.0; n];
    let mut prev_change = f64::INFINITY;
    let mut growth = 0;
    let mut report = ProximalReport {
        iterations: 0,
        last_change: f64::INFINITY,
    };
    for it in 0..inner_iters {
        for i in 0..n {
            let mut v = f[i];
            if !kmat.is_empty() {
                let row = &kmat[i * n..(i + 1) * n];
                v += row.iter().zip(&w).map(|(k, wj)| k * wj).sum::<f64>() / nf;
            }
            next[i] = log_w0[i] - tau * v;
        }
        let top = next.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        next.iter_mut().for_each(|x| *x = (*x - top).exp());
        let scale = nf / next.iter().sum::<f64>();
        next.iter_mut().for_each(|x| *x *= scale);
        ensure_finite(&next, "proximal weight")?;
        let change = w
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut w, &mut next);
        report = ProximalReport {
            iterations: it + 1,
            last_change: change,
        };
        if change < 1e-10 {
            break;
        }
        if change > prev_change {
            growth += 1;
            if growth >= 3 {
                return Err(Error::StepSize(format!(
                    "proximal fixed-point iteration diverges at tau = {tau}; use a smaller tau"
                )));
            }
        } else {
            growth = 0;
        }
        prev_change = change;
    }
    for (p, wi) in ens.particles_mut().iter_mut().zip(&w) {
        p.weight = *wi;
    }
    Ok(report)
}

/// Per-particle copy counts of systematic resampling at offset `u0 ∈ [0, 1)`.
/// Counts sum to `n` and each lies in `{⌊wᵢ⌋, ⌈wᵢ⌉}` after rescaling the
/// weights to total `n`.
pub fn systematic_counts(weights: &[f64], u0: f64) -> Result<Vec<usize>> {
    let n = weights.len();
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Numeric {
            what: "weight",
            index: weights.iter().position(|w| !(*w >= 0.0) || !w.is_finite()).unwrap_or(0),
        });
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Extinction);
    }
    let scale = n as f64 / total;
    let mut counts = vec![0usize; n];
    let mut cum = 0.0;
    let mut k = 0usize;
    for (i, w) in weights.iter().enumerate() {
        cum += w * scale;
        let upper = if i + 1 == n { n as f64 } else { cum };
        while k < n && u0 + (k as f64) < upper {
            counts[i] += 1;
            k += 1;
        }
    }
    Ok(counts)
}

/// Replaces the weighted ensemble with `n` unit-weight particles by
/// systematic resampling. The first copy of a particle keeps its birth id.
pub fn resample_weights(ens: &mut Ensemble, rng: &mut SimRng) -> Result<Vec<usize>> {
    let weights: Vec<f64> = ens.particles().iter().map(|p| p.weight).collect();
    let u0: f64 = rng.random();
    let counts = systematic_counts(&weights, u0)?;
    let mut next = Vec::with_capacity(ens.len());
    for (i, &c) in counts.iter().enumerate() {
        for copy in 0..c {
            let mut p = if copy == 0 {
                ens.particles()[i].clone()
            } else {
                ens.offspring(i)
            };
            p.weight = 1.0;
            next.push(p);
        }
    }
    ens.replace_particles(next);
    Ok(counts)
}

// ---------------------------------------------------------------------------
// Schemes

/// A time-stepping scheme selectable by name.
pub trait Scheme: Send + Sync {
    fn name(&self) -> &'static str;

    /// Rejects model/config combinations the scheme cannot run.
    fn check(&self, _model: &dyn Potential, cfg: &DynamicsConfig) -> Result<()> {
        cfg.validate()
    }

    /// Physical time covered by one call to [`Scheme::step`].
    fn step_duration(&self, cfg: &DynamicsConfig) -> f64 {
        cfg.dt
    }

    fn step(&self, model: &dyn Potential, ens: &mut Ensemble, cfg: &DynamicsConfig, rng: &mut SimRng) -> Result<StepReport>;
}

impl fmt::Debug for dyn Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Scheme({})", self.name())
    }
}

struct GradientOnly;

impl Scheme for GradientOnly {
    fn name(&self) -> &'static str {
        "gd-only"
    }

    fn step(&self, model: &dyn Potential, ens: &mut Ensemble, cfg: &DynamicsConfig, rng: &mut SimRng) -> Result<StepReport> {
        let d = drive(model, ens, rng, true)?;
        apply_gradient(model, ens, &d.grad, cfg.dt)?;
        Ok(StepReport {
            batch_loss: d.batch_loss,
            ..Default::default()
        })
    }
}

/// Optional transport followed by one birth-death pass.
struct TransportBirthDeath {
    name: &'static str,
    transport: bool,
    transform: bool,
    refill: Refill,
}

impl Scheme for TransportBirthDeath {
    fn name(&self) -> &'static str {
        self.name
    }

    fn check(&self, model: &dyn Potential, cfg: &DynamicsConfig) -> Result<()> {
        cfg.validate()?;
        if self.refill == Refill::Prior {
            check_reinjection(model, cfg)?;
        }
        if !self.transport && model.batch().is_some() {
            return Err(Error::Unsupported(format!("{} needs an exact model", self.name)));
        }
        Ok(())
    }

    fn step(&self, model: &dyn Potential, ens: &mut Ensemble, cfg: &DynamicsConfig, rng: &mut SimRng) -> Result<StepReport> {
        let mut batch_loss = None;
        let rates = if model.batch().is_some() {
            // Rates come from the same minibatch as the gradient step,
            // evaluated before the update.
            let d = drive(model, ens, rng, true)?;
            apply_gradient(model, ens, &d.grad, cfg.dt)?;
            batch_loss = d.batch_loss;
            center(&d.potential)
        } else {
            if self.transport {
                gd_step(model, ens, cfg.dt, rng)?;
            }
            centered_rate(model, ens)?
        };
        let rates = if self.transform {
            transform_rates(rates, &cfg.f_spec)?
        } else {
            rates
        };
        let mut report = birth_death_with_rates(ens, &rates, cfg, self.refill, rng)?;
        report.batch_loss = batch_loss;
        Ok(report)
    }
}

struct KineticMonteCarlo;

impl Scheme for KineticMonteCarlo {
    fn name(&self) -> &'static str {
        "kmc-bd"
    }

    fn check(&self, model: &dyn Potential, cfg: &DynamicsConfig) -> Result<()> {
        cfg.validate()?;
        if model.is_interacting() || !model.is_exact() {
            return Err(Error::Unsupported(format!(
                "kmc-bd needs an exact non-interacting model, got {}",
                model.kind()
            )));
        }
        Ok(())
    }

    fn step(&self, model: &dyn Potential, ens: &mut Ensemble, cfg: &DynamicsConfig, rng: &mut SimRng) -> Result<StepReport> {
        // Each event is one kill paired with one duplication.
        let events = kmc_run(model, ens, cfg, cfg.dt, rng)?;
        Ok(StepReport {
            births: events.len(),
            deaths: events.len(),
            ..Default::default()
        })
    }
}

/// `m` gradient steps, one proximal weight update with step `τ`, then
/// systematic resampling.
struct ProximalScheme;

impl Scheme for ProximalScheme {
    fn name(&self) -> &'static str {
        "proximal"
    }

    fn check(&self, model: &dyn Potential, cfg: &DynamicsConfig) -> Result<()> {
        cfg.validate()?;
        if !model.is_exact() {
            return Err(Error::Unsupported("proximal scheme needs an exact model".into()));
        }
        Ok(())
    }

    fn step_duration(&self, cfg: &DynamicsConfig) -> f64 {
        cfg.dt * cfg.proximal_m as f64
    }

    fn step(&self, model: &dyn Potential, ens: &mut Ensemble, cfg: &DynamicsConfig, rng: &mut SimRng) -> Result<StepReport> {
        for _ in 0..cfg.proximal_m {
            gd_step(model, ens, cfg.dt, rng)?;
        }
        proximal_weight_update(model, ens, cfg.tau(), cfg.proximal_inner_iters)?;
        let max_rate = ens
            .particles()
            .iter()
            .map(|p| (p.weight - 1.0).abs())
            .fold(0.0, f64::max);
        let counts = resample_weights(ens, rng)?;
        let births = counts.iter().map(|&c| c.saturating_sub(1)).sum();
        let deaths = counts.iter().filter(|&&c| c == 0).count();
        Ok(StepReport {
            births,
            deaths,
            max_rate,
            population_corrections: 0,
            batch_loss: None,
        })
    }
}

/// Name-indexed collection of schemes.
pub struct SchemeRegistry {
    schemes: BTreeMap<&'static str, Box<dyn Scheme>>,
}

impl SchemeRegistry {
    pub fn empty() -> Self {
        SchemeRegistry { schemes: BTreeMap::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(GradientOnly));
        for (name, transport, transform, refill) in [
            ("gd-bd", true, false, Refill::Clone),
            ("gd-bd-reinjection", true, false, Refill::Prior),
            ("gd-bd-fvariant", true, true, Refill::Clone),
            ("bd-only", false, false, Refill::Clone),
        ] {
            r.register(Box::new(TransportBirthDeath {
                name,
                transport,
                transform,
                refill,
            }));
        }
        r.register(Box::new(KineticMonteCarlo));
        r.register(Box::new(ProximalScheme));
        r
    }

    /// Adds or replaces a scheme under its own name.
    pub fn register(&mut self, scheme: Box<dyn Scheme>) {
        self.schemes.insert(scheme.name(), scheme);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Scheme> {
        self.schemes.get(name).map(|s| s.as_ref()).ok_or_else(|| {
            Error::config(format!(
                "unknown variant {name:?}; known: {}",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.schemes.keys().copied()
    }
}

impl Default for SchemeRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

/// One full step of `scheme`: dispatches, checks that the population size is
/// unchanged and bumps the step counter.
pub fn run_step(
    scheme: &dyn Scheme,
    model: &dyn Potential,
    ens: &mut Ensemble,
    cfg: &DynamicsConfig,
    rng: &mut SimRng,
) -> Result<StepReport> {
    let n = ens.len();
    let report = scheme.step(model, ens, cfg, rng)?;
    if ens.len() != n {
        return Err(Error::Logic(format!(
            "{} changed the population from {n} to {}",
            scheme.name(),
            ens.len()
        )));
    }
    ens.check_finite("particle")?;
    ens.step_count += 1;
    Ok(report)
}

/// Runs `steps` steps of the scheme named by `cfg.variant`.
pub fn run_steps(
    registry: &SchemeRegistry,
    model: &dyn Potential,
    ens: &mut Ensemble,
    cfg: &DynamicsConfig,
    steps: usize,
    rng: &mut SimRng,
) -> Result<StepReport> {
    let scheme = registry.get(&cfg.variant)?;
    scheme.check(model, cfg)?;
    let mut total = StepReport::default();
    for _ in 0..steps {
        total.absorb(run_step(scheme, model, ens, cfg, rng)?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{GaussianMixture, MixtureComponent, QuadraticWell};
    use crate::rng;

    fn quad() -> QuadraticWell {
        QuadraticWell::isotropic_1d(0.0, 1.0).unwrap()
    }

    #[test]
    fn gd_linear_map() {
        let mut ens = Ensemble::from_positions_1d(&[1.0]).unwrap();
        let mut r = rng::stream(0, 1);
        gd_step(&quad(), &mut ens, 0.1, &mut r).unwrap();
        assert!((ens.particles()[0].position[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn centered_rate_small_cases() {
        let one = Ensemble::from_positions_1d(&[3.0]).unwrap();
        assert_eq!(centered_rate(&quad(), &one).unwrap(), vec![0.0]);
        // F = θ²/2 at θ = 2, 0 gives F = (2, 0).
        let two = Ensemble::from_positions_1d(&[2.0, 0.0]).unwrap();
        assert_eq!(centered_rate(&quad(), &two).unwrap(), vec![1.0, -1.0]);
    }

    #[test]
    fn tanh_transform_of_symmetric_pair() {
        let r = transform_rates(vec![0.7, -0.7], &RateTransform::Saturated { beta: 1.0 }).unwrap();
        assert!((r[0] - 0.7f64.tanh()).abs() < 1e-15);
        assert!((r[1] + 0.7f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn transform_validation() {
        assert!(RateTransform::Saturated { beta: 0.0 }.validate().is_err());
        assert!(RateTransform::Saturated { beta: 2.0 }.validate().is_ok());
        assert!(RateTransform::Identity.validate().is_ok());
    }

    #[test]
    fn zero_rates_no_events() {
        let mut ens = Ensemble::from_positions_1d(&[0.0, 1.0, 2.0]).unwrap();
        let before = ens.particles().to_vec();
        let mut r = rng::stream(1, 1);
        let cfg = DynamicsConfig::default();
        let rep = birth_death_with_rates(&mut ens, &[0.0; 3], &cfg, Refill::Clone, &mut r).unwrap();
        assert_eq!((rep.births, rep.deaths, rep.population_corrections), (0, 0, 0));
        assert_eq!(ens.particles(), &before[..]);
    }

    #[test]
    fn systematic_exact_on_integers() {
        for u0 in [0.0, 0.3, 0.999] {
            assert_eq!(systematic_counts(&[2.0, 0.0, 1.0, 1.0], u0).unwrap(), vec![2, 0, 1, 1]);
            assert_eq!(systematic_counts(&[1.0; 5], u0).unwrap(), vec![1; 5]);
        }
        assert!(matches!(systematic_counts(&[0.0, 0.0], 0.5), Err(Error::Extinction)));
    }

    #[test]
    fn proximal_explicit_when_non_interacting() {
        // F = (1, 0), τ = 1 gives w ∝ (e⁻¹, 1).
        let mut ens = Ensemble::from_positions_1d(&[2f64.sqrt(), 0.0]).unwrap();
        proximal_weight_update(&quad(), &mut ens, 1.0, 50).unwrap();
        let e = (-1f64).exp();
        let w: Vec<f64> = ens.particles().iter().map(|p| p.weight).collect();
        assert!((w[0] - 2.0 * e / (1.0 + e)).abs() < 1e-12);
        assert!((w[1] - 2.0 / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn proximal_constant_potential_keeps_weights() {
        let mut ens = Ensemble::from_positions_1d(&[0.5, -0.5]).unwrap();
        proximal_weight_update(&quad(), &mut ens, 0.3, 50).unwrap();
        for p in ens.particles() {
            assert!((p.weight - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn reinjection_fills_with_zero_amplitude() {
        let mix = GaussianMixture::new(
            1,
            0.2,
            vec![MixtureComponent {
                amplitude: 1.0,
                center: vec![0.0],
                std: 0.5,
            }],
        )
        .unwrap();
        let parts = (0..6)
            .map(|i| ParticleState::new(vec![i as f64]).with_amplitude(1.0))
            .collect();
        let mut ens = Ensemble::from_particles(parts).unwrap();
        let mut cfg = DynamicsConfig::with_variant("gd-bd-reinjection", 0.01, 1.0);
        cfg.reinjection_prior = Some(Sampler::gaussian(0.0, 3.0));
        let mut r = rng::stream(2, 1);
        // Kill three by hand, then let the control loop refill.
        for _ in 0..3 {
            ens.kill_particle(0).unwrap();
        }
        let added = population_control(&mut ens, 6, Refill::Prior, cfg.reinjection_prior.as_ref(), 0.0, &mut r).unwrap();
        assert_eq!(added, 3);
        assert_eq!(ens.len(), 6);
        for p in &ens.particles()[3..] {
            assert_eq!(p.amplitude, Some(0.0));
            assert_eq!(mix.f(p).unwrap(), 0.0);
        }
    }

    #[test]
    fn registry_knows_all_variants() {
        let reg = SchemeRegistry::with_builtins();
        let names: Vec<_> = reg.names().collect();
        for v in ["gd-only", "gd-bd", "gd-bd-reinjection", "gd-bd-fvariant", "bd-only", "kmc-bd", "proximal"] {
            assert!(names.contains(&v), "{v}");
        }
        assert!(matches!(reg.get("gd-bdd"), Err(Error::Config(_))));
    }

    #[test]
    fn kmc_rejects_interacting_models() {
        let mix = GaussianMixture::new(
            1,
            0.2,
            vec![MixtureComponent {
                amplitude: 1.0,
                center: vec![0.0],
                std: 0.5,
            }],
        )
        .unwrap();
        let mut ens = Ensemble::from_particles(vec![ParticleState::new(vec![0.0]).with_amplitude(1.0); 2]).unwrap();
        let mut r = rng::stream(0, 1);
        assert!(kmc_run(&mix, &mut ens, &DynamicsConfig::default(), 1.0, &mut r).is_err());
    }

    #[test]
    fn kmc_constant_f_has_no_events() {
        let mut ens = Ensemble::from_positions_1d(&[1.0, -1.0, 1.0]).unwrap();
        let mut r = rng::stream(0, 1);
        let log = kmc_run(&quad(), &mut ens, &DynamicsConfig::default(), 10.0, &mut r).unwrap();
        assert!(log.is_empty());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let ok: DynamicsConfig = toml::from_str("dt = 0.02\nvariant = \"bd-only\"").unwrap();
        assert_eq!(ok.alpha, 1.0);
        assert!(toml::from_str::<DynamicsConfig>("dt = 0.02\nalpah = 1.0").is_err());
        let sat: DynamicsConfig = toml::from_str("f_spec = { kind = \"saturated\", beta = 2.0 }").unwrap();
        assert_eq!(sat.f_spec, RateTransform::Saturated { beta: 2.0 });
    }
}
