//! Oracles shared by the integration tests. Nothing here calls into the
//! library, so agreement with it is an independent check.

#![allow(dead_code)]

use std::f64::consts::PI;

// Gauss-Kronrod 7/15 nodes on [-1, 1] (positive half, center last).
const XK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd-indexed Kronrod nodes (1, 3, 5) and the center.
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = WK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let s = f(c - h * XK[j]) + f(c + h * XK[j]);
        kron += WK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Adaptive Gauss-Kronrod on `[a, b]` to absolute tolerance `tol`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (v, err) = gk15(f, a, b);
        if err <= tol || depth > 40 {
            return v;
        }
        let m = 0.5 * (a + b);
        rec(f, a, m, 0.5 * tol, depth + 1) + rec(f, m, b, 0.5 * tol, depth + 1)
    }
    // Pre-split so narrow peaks are not missed by the first panel.
    let pieces = 64;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| rec(&f, a + h * i as f64, a + h * (i + 1) as f64, tol / pieces as f64, 0))
        .sum()
}

pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean) * (x - mean) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Two-sided one-sample Kolmogorov-Smirnov statistic against `cdf`.
pub fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = cdf(x);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at level 1%.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.627_6 / (n as f64).sqrt()
}

pub type Mat = Vec<Vec<f64>>;

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(a: &Mat) -> Mat {
    let n = a.len();
    let norm = a.iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scale = 2f64.powi(-s);
    let x: Mat = a.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
    let mut out: Mat = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
    let mut term = out.clone();
    for k in 1..30 {
        term = matmul(&term, &x);
        term.iter_mut().flatten().for_each(|v| *v /= k as f64);
        for i in 0..n {
            for j in 0..n {
                out[i][j] += term[i][j];
            }
        }
    }
    for _ in 0..s {
        out = matmul(&out, &out);
    }
    out
}

pub fn trace_product(a: &Mat, b: &Mat) -> f64 {
    let n = a.len();
    (0..n).map(|i| (0..n).map(|k| a[i][k] * b[k][i]).sum::<f64>()).sum()
}

/// `|observed - expected|` in units of the binomial standard deviation.
pub fn binomial_z(successes: usize, trials: usize, p: f64) -> f64 {
    let n = trials as f64;
    (successes as f64 - n * p).abs() / (n * p * (1.0 - p)).sqrt()
}
