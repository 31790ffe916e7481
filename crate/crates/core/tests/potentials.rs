mod common;

use bdflow::potentials::{
    batch_potential_hat, grad_f, grad_k, particle_potential, BatchPotential, DoubleWell, GaussianMixture,
    MixtureComponent, QuadraticWell, ReluStudentTeacher,
};
use bdflow::{Ensemble, ParticleState, Potential};
use common::{integrate, normal_pdf, rel_err};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn one_component() -> GaussianMixture {
    GaussianMixture::new(
        1,
        0.5,
        vec![MixtureComponent {
            amplitude: 1.0,
            center: vec![0.0],
            std: 1.0,
        }],
    )
    .unwrap()
}

fn three_component() -> GaussianMixture {
    let comp = |a: f64, c: f64, s: f64| MixtureComponent {
        amplitude: a,
        center: vec![c],
        std: s,
    };
    GaussianMixture::new(1, 0.25, vec![comp(1.0, -2.0, 0.5), comp(-1.0, 0.0, 0.5), comp(1.0, 2.0, 0.5)]).unwrap()
}

fn cy(c: f64, y: f64) -> ParticleState {
    ParticleState::new(vec![y]).with_amplitude(c)
}

// Integration range: ±10 bandwidths of the widest gaussian around the origin.
const LO: f64 = -15.0;
const HI: f64 = 15.0;

#[test]
fn mixture_f_matches_quadrature() {
    let m = one_component();
    let p = cy(1.0, 0.0);
    let closed = m.f(&p).unwrap();
    assert!(rel_err(closed, -normal_pdf(0.0, 0.0, 1.25)) < 1e-14);
    // F = -∫ f(x) φ(x; θ) dx
    let quad = -integrate(|x| m.target(&[x]) * m.unit(&[x], &p), LO, HI, 1e-14);
    assert!(rel_err(closed, quad) < 1e-8, "closed {closed} vs quadrature {quad}");
}

#[test]
fn mixture_k_matches_quadrature() {
    let m = one_component();
    let (a, b) = (cy(1.0, 0.0), cy(1.0, 1.0));
    let closed = m.k(&a, &b);
    assert!(rel_err(closed, normal_pdf(0.0, 1.0, 0.5)) < 1e-14);
    let quad = integrate(|x| m.unit(&[x], &a) * m.unit(&[x], &b), LO, HI, 1e-14);
    assert!(rel_err(closed, quad) < 1e-8, "closed {closed} vs quadrature {quad}");
}

#[test]
fn exact_loss_matches_quadrature() {
    let m = three_component();
    let ens = Ensemble::from_particles(vec![
        cy(0.7, -1.9),
        cy(-1.3, 0.2),
        cy(2.1, 1.7),
        cy(0.4, 3.0),
        cy(-0.2, -0.5),
    ])
    .unwrap();
    let closed = m.exact_loss(&ens).unwrap();
    let quad = 0.5
        * integrate(
            |x| {
                let r = m.target(&[x]) - m.network(&[x], &ens);
                r * r
            },
            LO,
            HI,
            1e-14,
        );
    assert!(rel_err(closed, quad) < 1e-6, "closed {closed} vs quadrature {quad}");
}

#[test]
fn zero_amplitudes_give_target_energy() {
    let m = three_component();
    let ens = Ensemble::from_particles(vec![cy(0.0, -1.0), cy(0.0, 1.0)]).unwrap();
    let cf = m.target_energy();
    assert_eq!(m.exact_loss(&ens).unwrap(), cf);
    let quad = 0.5 * integrate(|x| m.target(&[x]).powi(2), LO, HI, 1e-14);
    assert!(rel_err(cf, quad) < 1e-8);
}

#[test]
fn particle_potential_direct_sum() {
    let m = three_component();
    let ps = vec![cy(0.9, -2.2), cy(-0.4, 0.3), cy(1.6, 1.1)];
    let ens = Ensemble::from_particles(ps.clone()).unwrap();
    let s2 = 0.25f64 * 0.25;
    let comps = [(1.0, -2.0), (-1.0, 0.0), (1.0, 2.0)];
    for i in 0..3 {
        let (c, y) = (ps[i].c(), ps[i].position[0]);
        let f: f64 = -c / 3.0 * comps.iter().map(|(a, mu)| a * normal_pdf(y, *mu, s2 + 0.25)).sum::<f64>();
        let k: f64 = ps
            .iter()
            .map(|q| c * q.c() * normal_pdf(y, q.position[0], 2.0 * s2))
            .sum::<f64>()
            / 3.0;
        let got = particle_potential(&m, &ens, i).unwrap();
        assert!(rel_err(got, f + k) < 1e-12, "particle {i}: {got} vs {}", f + k);
    }
}

#[test]
fn relu_single_sample_by_hand() {
    // d = 1, teacher c̄ = 1, ȳ = 1; student c = 2, y = -0.5; input x = -3.
    let m = ReluStudentTeacher::with_teacher(1, vec![1.0], vec![vec![1.0]]).unwrap();
    let ens = Ensemble::from_particles(vec![cy(2.0, -0.5)]).unwrap();
    let batch = [-3.0];
    // φ(x, y) = max(0, -0.5·-3) = 1.5; f_n = 2·1.5 = 3; f = max(0, -3) = 0.
    let vhat = batch_potential_hat(&m, &ens, &batch).unwrap();
    assert!((vhat[0] - 1.5 * 3.0).abs() < 1e-15);
    let ev = m.batch_eval(ens.particles(), &batch).unwrap();
    assert!((ev.potential[0] - 2.0 * 4.5).abs() < 1e-15);
    assert!((ev.loss - 0.5 * 9.0).abs() < 1e-15);
}

#[test]
fn relu_vhat_is_n_times_loss_derivative_in_c() {
    let mut trng = bdflow::rng::stream(5, 0);
    let m = ReluStudentTeacher::new(6, 3, 16, &mut trng).unwrap();
    let n = 7;
    let mut prng = bdflow::rng::stream(6, 0);
    let ps: Vec<ParticleState> = (0..n)
        .map(|_| {
            let y: Vec<f64> = m.sample_inputs(1, &mut prng);
            let c = m.sample_inputs(1, &mut prng)[0];
            ParticleState::new(y).with_amplitude(c)
        })
        .collect();
    let batch = m.sample_batch(&mut prng);
    let vhat = m.batch_eval(&ps, &batch).unwrap().vhat;
    let h = 1e-5;
    for i in 0..n {
        let loss_at = |dc: f64| {
            let mut q = ps.clone();
            *q[i].amplitude.as_mut().unwrap() += dc;
            m.batch_eval(&q, &batch).unwrap().loss
        };
        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h) * n as f64;
        assert!(rel_err(fd, vhat[i]) < 1e-6, "particle {i}: fd {fd} vs {}", vhat[i]);
    }
}

#[test]
fn relu_student_equal_to_teacher_has_zero_vhat() {
    let mut trng = bdflow::rng::stream(9, 0);
    let m = ReluStudentTeacher::new(4, 5, 32, &mut trng).unwrap();
    let (amps, ws) = m.teacher();
    // Same units with the same 1/n scaling reproduce the teacher exactly.
    let ens = Ensemble::from_particles(
        amps.iter()
            .zip(ws)
            .map(|(c, w)| ParticleState::new(w.clone()).with_amplitude(*c))
            .collect(),
    )
    .unwrap();
    let batch = m.sample_batch(&mut trng);
    for v in batch_potential_hat(&m, &ens, &batch).unwrap() {
        assert!(v.abs() < 1e-14);
    }
}

#[test]
fn relu_empty_batch_is_config_error() {
    let m = ReluStudentTeacher::with_teacher(1, vec![1.0], vec![vec![1.0]]).unwrap();
    let ens = Ensemble::from_particles(vec![cy(1.0, 1.0)]).unwrap();
    assert!(matches!(
        batch_potential_hat(&m, &ens, &[]),
        Err(bdflow::Error::Config(_))
    ));
}

// ---------------------------------------------------------------------------
// Properties

fn fd_check(model: &dyn Potential, p: &ParticleState, q: &ParticleState) -> Result<(), TestCaseError> {
    let h = 1e-5;
    let gf = grad_f(model, p).unwrap();
    let gk = grad_k(model, p, q);
    let mut coords: Vec<(Option<usize>, f64, f64)> = (0..p.position.len())
        .map(|a| (Some(a), gf.position[a], gk.position[a]))
        .collect();
    if model.has_amplitude() {
        coords.push((None, gf.amplitude, gk.amplitude));
    }
    for (axis, af, ak) in coords {
        let shift = |d: f64| {
            let mut s = p.clone();
            match axis {
                Some(a) => s.position[a] += d,
                None => *s.amplitude.as_mut().unwrap() += d,
            }
            s
        };
        let (pp, pm) = (shift(h), shift(-h));
        let fd_f = (model.f(&pp).unwrap() - model.f(&pm).unwrap()) / (2.0 * h);
        let fd_k = (model.k(&pp, q) - model.k(&pm, q)) / (2.0 * h);
        // Relative to the gradient scale, so near-zero components do not
        // turn rounding noise into failures.
        let scale_f = gf.norm_sq().sqrt().max(1e-3);
        let scale_k = gk.norm_sq().sqrt().max(1e-3);
        prop_assert!((fd_f - af).abs() / scale_f < 1e-6, "F axis {axis:?}: fd {fd_f} vs {af}");
        prop_assert!((fd_k - ak).abs() / scale_k < 1e-6, "K axis {axis:?}: fd {fd_k} vs {ak}");
    }
    Ok(())
}

fn spd3() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -0.1, 0.3, 1.0, 0.2, -0.1, 0.2, 0.5])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn mixture_gradients_match_finite_differences(
        c1 in -2.0..2.0f64, y1 in -4.0..4.0f64, c2 in -2.0..2.0f64, y2 in -4.0..4.0f64,
    ) {
        fd_check(&three_component(), &cy(c1, y1), &cy(c2, y2))?;
    }

    #[test]
    fn fixed_amplitude_mixture_gradients(y1 in -4.0..4.0f64, y2 in -4.0..4.0f64) {
        let m = three_component().with_fixed_amplitude(1.0).unwrap();
        fd_check(&m, &ParticleState::new(vec![y1]), &ParticleState::new(vec![y2]))?;
    }

    #[test]
    fn quadratic_and_double_well_gradients(x in prop::array::uniform3(-3.0..3.0f64)) {
        let q = QuadraticWell::new(vec![0.5, -1.0, 2.0], spd3()).unwrap();
        let p = ParticleState::new(x.to_vec());
        fd_check(&q, &p, &p)?;
        let d = DoubleWell::new(3, 0.2).unwrap();
        fd_check(&d, &p, &p)?;
    }

    #[test]
    fn two_dim_mixture_kernel_symmetric(
        a in prop::array::uniform3(-3.0..3.0f64), b in prop::array::uniform3(-3.0..3.0f64),
    ) {
        let m = GaussianMixture::new(2, 0.4, vec![MixtureComponent { amplitude: 1.0, center: vec![0.0, 0.0], std: 1.0 }]).unwrap();
        let p = ParticleState::new(vec![a[1], a[2]]).with_amplitude(a[0]);
        let q = ParticleState::new(vec![b[1], b[2]]).with_amplitude(b[0]);
        prop_assert_eq!(m.k(&p, &q), m.k(&q, &p));
        fd_check(&m, &p, &q)?;
    }

    #[test]
    fn gram_matrix_is_psd(ys in prop::collection::vec(-3.0..3.0f64, 1..=8)) {
        let m = three_component();
        let ps: Vec<ParticleState> = ys.iter().map(|&y| cy(1.0, y)).collect();
        let n = ps.len();
        let g = DMatrix::from_fn(n, n, |i, j| m.k(&ps[i], &ps[j]));
        let min = g.symmetric_eigenvalues().min();
        prop_assert!(min >= -1e-10, "min eigenvalue {min}");
    }

    #[test]
    fn loss_decomposes_into_energy_plus_constant(
        cs in prop::collection::vec(-2.0..2.0f64, 1..6), ys in prop::collection::vec(-4.0..4.0f64, 6),
        ws in prop::collection::vec(0.1..2.0f64, 6),
    ) {
        let m = three_component();
        let n = cs.len();
        let mean_w = ws[..n].iter().sum::<f64>() / n as f64;
        let ps: Vec<ParticleState> = (0..n)
            .map(|i| {
                let mut p = cy(cs[i], ys[i]);
                p.weight = ws[i] / mean_w;
                p
            })
            .collect();
        let ens = Ensemble::from_particles(ps).unwrap();
        let loss = m.exact_loss(&ens).unwrap();
        let energy = bdflow::diagnostics::ensemble_energy(&m, &ens).unwrap();
        prop_assert!(loss >= -1e-15);
        let cf = m.target_energy();
        prop_assert!((loss - (cf + energy)).abs() <= 1e-10 * loss.abs().max(cf));
    }
}
