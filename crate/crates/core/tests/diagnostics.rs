use bdflow::diagnostics::{
    energy_decay_terms, ensemble_energy, euler_lagrange_residual, fluctuation_scaling, rate_fit_points, FitForm,
    FluctuationStudy, Reference, TestFn,
};
use bdflow::dynamics::{center, gd_step};
use bdflow::potentials::{GaussianMixture, MixtureComponent, QuadraticWell};
use bdflow::{Dist1, DynamicsConfig, Ensemble, ParticleState, Potential};
use proptest::prelude::*;

fn mixture() -> GaussianMixture {
    let comp = |a: f64, c: f64| MixtureComponent {
        amplitude: a,
        center: vec![c],
        std: 0.5,
    };
    GaussianMixture::new(1, 0.25, vec![comp(1.0, -2.0), comp(-1.0, 0.0), comp(1.0, 2.0)]).unwrap()
}

fn cy(c: f64, y: f64) -> ParticleState {
    ParticleState::new(vec![y]).with_amplitude(c)
}

fn sample_config() -> Ensemble {
    Ensemble::from_particles(vec![cy(0.8, -1.7), cy(-0.3, 0.4), cy(1.2, 2.3), cy(0.5, 0.1), cy(-0.9, -0.6)]).unwrap()
}

/// Gradient step plus the weight update `wᵢ ← wᵢ(1 − αΔt Ṽᵢ)`.
fn continuous_step(m: &dyn Potential, ens: &Ensemble, alpha: f64, dt: f64) -> Ensemble {
    let v = m.evaluate(ens.particles(), false).unwrap().potential;
    let vt = center(&v);
    let mut out = ens.clone();
    gd_step(m, &mut out, dt, &mut bdflow::rng::stream(0, 0)).unwrap();
    for (p, r) in out.particles_mut().iter_mut().zip(&vt) {
        p.weight *= 1.0 - alpha * dt * r;
    }
    out
}

#[test]
fn energy_change_matches_decay_terms_to_second_order() {
    let m = mixture();
    let ens = sample_config();
    let alpha = 1.5;
    let (g, v) = energy_decay_terms(&m, &ens).unwrap();
    assert!(g > 0.0 && v > 0.0);
    let e0 = ensemble_energy(&m, &ens).unwrap();
    let defect = |dt: f64| {
        let e1 = ensemble_energy(&m, &continuous_step(&m, &ens, alpha, dt)).unwrap();
        ((e1 - e0) + (g + alpha * v) * dt).abs()
    };
    let (d1, d2) = (defect(1e-3), defect(5e-4));
    // O(Δt²): halving Δt divides the defect by about 4
    let ratio = d1 / d2;
    assert!((3.5..4.5).contains(&ratio), "defect ratio {ratio} ({d1:e}, {d2:e})");
    assert!(d1 < 1e-2 * (g + alpha * v) * 1e-3);
}

#[test]
fn single_particle_energy_is_f_plus_half_k() {
    let m = mixture();
    let p = cy(0.7, -0.4);
    let ens = Ensemble::from_particles(vec![p.clone()]).unwrap();
    let e = ensemble_energy(&m, &ens).unwrap();
    assert!((e - (m.f(&p).unwrap() + 0.5 * m.k(&p, &p))).abs() < 1e-15);
}

#[test]
fn decay_terms_vanish_at_common_critical_point() {
    let q = QuadraticWell::isotropic_1d(0.0, 1.0).unwrap();
    let ens = Ensemble::from_positions_1d(&[0.0, 0.0, 0.0]).unwrap();
    assert_eq!(energy_decay_terms(&q, &ens).unwrap(), (0.0, 0.0));
}

#[test]
fn empty_probe_set_is_config_error() {
    let ens = sample_config();
    assert!(matches!(
        euler_lagrange_residual(&mixture(), &ens, &[]),
        Err(bdflow::Error::Config(_))
    ));
}

#[test]
fn deterministic_fluctuation_study_has_no_slope() {
    let q = QuadraticWell::isotropic_1d(0.0, 1.0).unwrap();
    let study = FluctuationStudy {
        model: &q,
        dynamics: DynamicsConfig::with_variant("gd-only", 0.05, 1.0),
        init: Dist1::Gaussian { mean: 0.0, std: 1.0 },
        n_list: vec![10, 100],
        seeds: 2,
        base_seed: 0,
        test_fns: vec![TestFn::Theta],
        checkpoints: vec![0.5, 1.0],
        slope_checkpoint: 0,
        reference: Reference::Grid {
            cells: 400,
            dt: 0.002,
            width_in_std: 8.0,
        },
    };
    let r = fluctuation_scaling(&study).unwrap();
    assert_eq!(r.slope, None);
    assert_eq!(r.quench_ratio, None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decay_terms_nonnegative(
        cs in prop::collection::vec(-2.0..2.0f64, 1..8), ys in prop::collection::vec(-4.0..4.0f64, 8),
    ) {
        let ps: Vec<ParticleState> = cs.iter().zip(&ys).map(|(&c, &y)| cy(c, y)).collect();
        let ens = Ensemble::from_particles(ps).unwrap();
        let (g, v) = energy_decay_terms(&mixture(), &ens).unwrap();
        prop_assert!(g >= 0.0 && v >= 0.0);
    }

    #[test]
    fn power_law_fit_recovers_parameters(a in 0.01..100.0f64, b in -3.0..3.0f64) {
        let pts: Vec<(f64, f64)> = (1..=40).map(|k| {
            let t = 0.25 * k as f64;
            (t, a * t.powf(b))
        }).collect();
        let fit = rate_fit_points(&pts, (0.0, 10.0), FitForm::PowerLaw).unwrap();
        prop_assert!((fit.exponent - b).abs() <= 1e-6 * b.abs().max(1.0));
        prop_assert!((fit.coefficient - a).abs() <= 1e-6 * a);
        prop_assert!(fit.r2 > 0.999_999 || b.abs() < 1e-9);
    }

    #[test]
    fn exponential_fit_recovers_parameters(a in 0.01..100.0f64, b in -5.0..2.0f64) {
        let pts: Vec<(f64, f64)> = (0..40).map(|k| {
            let t = 0.1 * k as f64;
            (t, a * (b * t).exp())
        }).collect();
        let fit = rate_fit_points(&pts, (0.0, 4.0), FitForm::Exponential).unwrap();
        prop_assert!((fit.exponent - b).abs() <= 1e-6 * b.abs().max(1.0));
        prop_assert!((fit.coefficient - a).abs() <= 1e-6 * a);
    }
}
