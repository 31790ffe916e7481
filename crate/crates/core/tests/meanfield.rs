mod common;

use bdflow::diagnostics::{rate_fit_points, FitForm};
use bdflow::meanfield::{
    characteristics_gaussian, grid_energy, pure_bd_density, pure_bd_mean_energy, transport_bd_asymptote, GaussianLaw,
    Grid1D, GridConfig, GridSolver, Quadrature,
};
use bdflow::potentials::{DoubleWell, GaussianMixture, MixtureComponent, QuadraticWell};
use bdflow::{Dist1, Potential};
use common::{expm, integrate, normal_pdf, rel_err, trace_product, Mat};
use nalgebra::{DMatrix, DVector};

fn quad() -> QuadraticWell {
    QuadraticWell::isotropic_1d(0.0, 1.0).unwrap()
}

fn half_sq(x: f64) -> f64 {
    0.5 * x * x
}

fn std_normal(x: f64) -> f64 {
    normal_pdf(x, 0.0, 1.0)
}

fn simpson() -> Quadrature {
    Quadrature::new(-12.0, 12.0, 4000).unwrap()
}

#[test]
fn pure_bd_gaussian_product() {
    for &(alpha, t) in &[(1.0, 0.5), (2.0, 3.0), (0.5, 10.0)] {
        let var = 1.0 / (1.0 + alpha * t);
        // independent normalizer
        let z = integrate(|x| (-alpha * t * half_sq(x)).exp() * std_normal(x), -12.0, 12.0, 1e-14);
        for &x in &[-2.0, -0.3, 0.0, 0.7, 1.9] {
            let got = pure_bd_density(&half_sq, &std_normal, alpha, t, x, simpson()).unwrap();
            let by_quad = (-alpha * t * half_sq(x)).exp() * std_normal(x) / z;
            assert!(rel_err(got, by_quad) < 1e-9, "αt = {}: {got} vs {by_quad}", alpha * t);
            assert!(rel_err(got, normal_pdf(x, 0.0, var)) < 1e-9);
        }
    }
}

#[test]
fn pure_bd_mean_energy_asymptote() {
    let alpha = 1.0;
    let t = 100.0;
    let fbar = pure_bd_mean_energy(&half_sq, &std_normal, alpha, t, simpson()).unwrap();
    // exact: ½ var = 1/(2(1 + αt))
    assert!(rel_err(fbar, 0.5 / (1.0 + alpha * t)) < 1e-9);
    assert!(rel_err(fbar, 1.0 / (2.0 * alpha * t)) < 0.05);
    let at0 = pure_bd_mean_energy(&half_sq, &std_normal, alpha, 0.0, simpson()).unwrap();
    assert!(rel_err(at0, 0.5) < 1e-10);
}

#[test]
fn double_well_mass_goes_to_global_minimum() {
    let dw = DoubleWell::new(1, 0.2).unwrap();
    let f = |x: f64| dw.scalar(x);
    let rho0 = |x: f64| normal_pdf(x, -0.5, 1.0);
    let q = Quadrature::new(-8.0, 8.0, 64_000).unwrap();
    let at = 200.0;
    let fbar = pure_bd_mean_energy(&f, &rho0, 1.0, at, q).unwrap();
    let ratio = fbar * 2.0 * at;
    assert!((ratio - 1.0).abs() < 0.1, "F̄·2αt = {ratio}");
}

#[test]
fn asymptote_matches_series_exponential() {
    let rows: Mat = vec![vec![2.0, 0.4, -0.3], vec![0.4, 1.1, 0.2], vec![-0.3, 0.2, 0.6]];
    let h = DMatrix::from_fn(3, 3, |i, j| rows[i][j]);
    for &(alpha, t) in &[(1.0, 0.0), (0.5, 0.7), (3.0, 2.5)] {
        let minus_2ht: Mat = rows.iter().map(|r| r.iter().map(|v| -2.0 * t * v).collect()).collect();
        let oracle = trace_product(&rows, &expm(&minus_2ht)) / alpha;
        let got = transport_bd_asymptote(&h, alpha, t).unwrap();
        assert!((got - oracle).abs() < 1e-10 * oracle.abs().max(1.0), "t = {t}: {got} vs {oracle}");
    }
    let not_spd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(matches!(transport_bd_asymptote(&not_spd, 1.0, 1.0), Err(bdflow::Error::Config(_))));
}

#[test]
fn late_covariance_for_broad_initial_law() {
    // The precision at time t is (α/2)(e^{2Ht} − I) + e^{Ht}Σ₀⁻¹e^{Ht}, so the
    // covariance approaches 2α⁻¹e^{−2Ht} once Σ₀⁻¹ is small next to α/2.
    let rows: Mat = vec![vec![1.0, 0.3], vec![0.3, 0.8]];
    let h = DMatrix::from_fn(2, 2, |i, j| rows[i][j]);
    let alpha = 2.0;
    let t = 8.0;
    let init = GaussianLaw {
        mean: DVector::from_vec(vec![0.5, -0.5]),
        cov: DMatrix::identity(2, 2) * 1e4,
    };
    let law = characteristics_gaussian(&h, &[0.0, 0.0], &init, alpha, t).unwrap();
    let e: Mat = expm(&rows.iter().map(|r| r.iter().map(|v| -2.0 * t * v).collect()).collect());
    for i in 0..2 {
        for j in 0..2 {
            let want = 2.0 / alpha * e[i][j];
            assert!(rel_err(law.cov[(i, j)], want) < 1e-3, "cov[{i}{j}] {} vs {want}", law.cov[(i, j)]);
        }
    }
    let at0 = characteristics_gaussian(&h, &[0.0, 0.0], &init, alpha, 0.0).unwrap();
    assert!((at0.cov.clone() - init.cov.clone()).abs().max() < 1e-9 * 1e4);
}

/// L¹ distance at t = 1 between the grid solution from N(0, 1) on [−6, 6]
/// and the exact gaussian law.
fn l1_vs_characteristics(cells: usize) -> f64 {
    let init = Dist1::Gaussian { mean: 0.0, std: 1.0 };
    let mut grid = Grid1D::from_dist(&init, -6.0, 6.0, cells).unwrap();
    let q = quad();
    // max|V'| = 6 on this domain
    let dt = 0.8 * grid.dx() / 6.0;
    let cfg = GridConfig {
        dt,
        alpha: 1.0,
        transport: true,
        birth_death: true,
    };
    let mut solver = GridSolver::new(&q, &grid, cfg).unwrap();
    solver.advance_to(&mut grid, 1.0).unwrap();
    let init_law = GaussianLaw {
        mean: DVector::from_element(1, 0.0),
        cov: DMatrix::from_element(1, 1, 1.0),
    };
    let law = characteristics_gaussian(&DMatrix::identity(1, 1), &[0.0], &init_law, 1.0, grid.time).unwrap();
    grid.l1_distance(|x| law.density(&[x]).unwrap())
}

#[test]
fn grid_converges_to_characteristics() {
    // First-order upwind: the error is about 11.5/M here, so 1e-3 needs
    // M = 16384 (M = 4096 gives 2.8e-3).
    let e = [1024, 2048, 4096].map(l1_vs_characteristics);
    let order = ((e[0] / e[1]).log2() + (e[1] / e[2]).log2()) / 2.0;
    assert!(order >= 0.8, "observed order {order} ({e:?})");
    let fine = l1_vs_characteristics(16384);
    assert!(fine < 1e-3, "L1 error {fine} at M = 16384");
}

#[test]
fn pure_bd_grid_matches_closed_form() {
    let init = Dist1::Gaussian { mean: 0.0, std: 1.0 };
    let mut grid = Grid1D::around(&init, 8.0, 2048).unwrap();
    let q = quad();
    let mut solver = GridSolver::new(
        &q,
        &grid,
        GridConfig {
            dt: 1e-4,
            alpha: 1.0,
            transport: false,
            birth_death: true,
        },
    )
    .unwrap();
    solver.advance_to(&mut grid, 1.0).unwrap();
    let err = grid.l1_distance(|x| pure_bd_density(&half_sq, &std_normal, 1.0, grid.time, x, simpson()).unwrap());
    assert!(err < 1e-3, "L1 error {err}");
    assert!((grid.mass() - 1.0).abs() < 1e-12);
}

#[test]
fn pure_bd_grid_decays_like_inverse_time() {
    let init = Dist1::Gaussian { mean: 0.0, std: 1.0 };
    let mut grid = Grid1D::around(&init, 8.0, 2048).unwrap();
    let q = quad();
    let mut solver = GridSolver::new(
        &q,
        &grid,
        GridConfig {
            dt: 0.005,
            alpha: 1.0,
            transport: false,
            birth_death: true,
        },
    )
    .unwrap();
    let mut points = Vec::new();
    for k in 1..=20 {
        let t = 5.0 * k as f64;
        solver.advance_to(&mut grid, t).unwrap();
        points.push((grid.time, grid_energy(&q, &grid).unwrap()));
    }
    let fit = rate_fit_points(&points, (20.0, 100.0), FitForm::PowerLaw).unwrap();
    assert!((fit.exponent + 1.0).abs() < 0.1, "exponent {}", fit.exponent);
}

#[test]
fn grid_energy_direct_sum() {
    let comps = [(1.0, -1.5, 0.5), (1.0, 1.0, 0.6)];
    let sigma = 0.3;
    let m = GaussianMixture::new(
        1,
        sigma,
        comps
            .iter()
            .map(|&(a, c, s)| MixtureComponent {
                amplitude: a,
                center: vec![c],
                std: s,
            })
            .collect(),
    )
    .unwrap()
    .with_fixed_amplitude(1.0)
    .unwrap();
    // deterministic "random" density
    let cells = 64;
    let dens: Vec<f64> = (0..cells).map(|i| 1.0 + ((i * 37 % 11) as f64) * 0.3).collect();
    let grid = Grid1D::new(-4.0, 4.0, dens).unwrap();
    let dx = grid.dx();
    let xs = grid.centers();
    let f = |y: f64| -comps.iter().map(|&(a, c, s)| a * normal_pdf(y, c, sigma * sigma + s * s)).sum::<f64>() / 2.0;
    let mut want = 0.0;
    for i in 0..cells {
        want += f(xs[i]) * grid.density[i] * dx;
        for j in 0..cells {
            want += 0.5 * normal_pdf(xs[i], xs[j], 2.0 * sigma * sigma) * grid.density[i] * grid.density[j] * dx * dx;
        }
    }
    let got = grid_energy(&m, &grid).unwrap();
    assert!(rel_err(got, want) < 1e-12, "{got} vs {want}");
}

#[test]
fn grid_energy_never_increases() {
    let dw = DoubleWell::new(1, 0.2).unwrap();
    let init = Dist1::Gaussian { mean: -0.5, std: 0.5 };
    let grid = Grid1D::around(&init, 6.0, 800).unwrap();
    let models: [&dyn Potential; 2] = [&dw, &quad()];
    for model in models {
        let mut g = grid.clone();
        let mut solver = GridSolver::new(
            model,
            &g,
            GridConfig {
                dt: 1e-4,
                alpha: 1.0,
                transport: true,
                birth_death: true,
            },
        )
        .unwrap();
        let mut prev = solver.energy(&g).unwrap();
        for step in 0..1500 {
            solver.step(&mut g).unwrap();
            let e = solver.energy(&g).unwrap();
            assert!(e <= prev + 1e-10, "{} step {step}: {prev} -> {e}", model.kind());
            assert!((g.mass() - 1.0).abs() < 1e-12);
            prev = e;
        }
    }
}
