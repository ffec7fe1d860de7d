//! Quick oracle diagnostics: each denoiser against an independent computation.

use mixamp::denoisers::{GaussianBayes, MlrBayes, SignalDenoiser, SoftThreshold, SparseBayes};
use mixamp::linalg::{psd_factor, Mat, Vector};
use mixamp::oracles::{empirical_vs_se, fd_jacobian, grid_posterior_mean, stein_check};
use mixamp::seed;
use mixamp::Channel;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, value: f64, limit: f64, what: &str) -> Self {
        Check {
            name,
            passed: value <= limit,
            detail: format!("{what} = {value:.3e} (limit {limit:.1e})"),
        }
    }
}

const POINTS: usize = 20;

fn random_vec(rng: &mut impl Rng, l: usize, scale: f64) -> Vector {
    Vector::from_fn(l, |_, _| rng.random_range(-scale..scale))
}

/// Largest |J − FD| relative to max(|J|, |FD|) over the sampled points.
fn worst_fd(mut pairs: impl FnMut(&mut rand_chacha::ChaCha8Rng) -> Option<(Mat, Mat)>, seed: u64) -> f64 {
    let mut rng = seed::rng(seed, 0, 0);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < POINTS {
        if let Some((analytic, numeric)) = pairs(&mut rng) {
            let scale = analytic.amax().max(numeric.amax()).max(1e-9);
            worst = worst.max((analytic - numeric).amax() / scale);
            done += 1;
        }
    }
    worst
}

fn sigma_k() -> Mat {
    Mat::from_row_slice(
        4,
        4,
        &[
            0.50, 0.00, 0.30, 0.02, //
            0.00, 0.50, 0.04, 0.20, //
            0.30, 0.04, 0.35, 0.05, //
            0.02, 0.20, 0.05, 0.25,
        ],
    )
}

pub fn run_all() -> Vec<Check> {
    let mu = Mat::from_row_slice(2, 2, &[1.4, 0.2, -0.1, 1.1]);
    let tau = Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]);
    let h = 1e-5;
    let mut checks = Vec::new();

    let gauss = SignalDenoiser::GaussianBayes(GaussianBayes::new(
        &Vector::from_column_slice(&[0.3, -0.2]),
        &Mat::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.8]),
        &mu,
        &tau,
    ));
    let sparse = SignalDenoiser::SparseBayes(SparseBayes::new(0.3, 2, &mu, &tau));
    for (name, f, s) in [("gaussian f jacobian", &gauss, 1), ("sparse f jacobian", &sparse, 2)] {
        let worst = worst_fd(
            |rng| {
                let x = random_vec(rng, 2, 2.0);
                Some((f.jacobian(&x), fd_jacobian(|v| f.apply(v), &x, h)))
            },
            s,
        );
        checks.push(Check::new(name, worst, 1e-4, "relative error"));
    }

    let st = SoftThreshold::new(&mu, &tau, 1.1402);
    let st_f = SignalDenoiser::SoftThreshold(st.clone());
    let worst = worst_fd(
        |rng| {
            let x = random_vec(rng, 2, 3.0);
            let (ex, _) = st.exceedances(&x);
            let near_kink = ex.iter().zip(st.thresholds.iter()).any(|(e, t)| (e.abs() - t).abs() < 1e-3);
            (!near_kink).then(|| (st_f.jacobian(&x), fd_jacobian(|v| st_f.apply(v), &x, h)))
        },
        3,
    );
    checks.push(Check::new("soft-threshold jacobian", worst, 1e-4, "relative error"));

    let g = MlrBayes::new(&sigma_k(), &[0.7, 0.3], 0.5).expect("valid Σ");
    let worst = worst_fd(
        |rng| {
            let u = random_vec(rng, 2, 1.5);
            let y = rng.random_range(-2.0..2.0);
            Some((g.jacobian(&u, y), fd_jacobian(|v| g.apply(v, y), &u, h)))
        },
        4,
    );
    checks.push(Check::new("mlr g jacobian", worst, 1e-4, "relative error"));

    // sparse f against the nine-point posterior sum
    let unit = SparseBayes::new(0.1, 2, &Mat::identity(2, 2), &(Mat::identity(2, 2) * 0.25));
    let s = Vector::from_column_slice(&[0.8, -0.2]);
    let support = [(-1.0, 0.05), (0.0, 0.9), (1.0, 0.05)];
    let (mut num, mut den) = (Vector::zeros(2), 0.0);
    for (b1, w1) in support {
        for (b2, w2) in support {
            let r2 = (s[0] - b1).powi(2) + (s[1] - b2).powi(2);
            let w = w1 * w2 * (-2.0 * r2).exp();
            num += Vector::from_column_slice(&[b1, b2]) * w;
            den += w;
        }
    }
    let err = (SignalDenoiser::SparseBayes(unit).apply(&s) - num / den).amax();
    checks.push(Check::new("sparse f nine-point sum", err, 1e-12, "max error"));

    let channel = Channel::mlr2(0.7, 0.5);
    let mut rng = seed::rng(5, 0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let u = random_vec(&mut rng, 2, 1.0);
        let y = rng.random_range(-1.5..1.5);
        match grid_posterior_mean(&channel, &sigma_k(), &u, y, 400) {
            Ok(grid) => worst = worst.max((g.posterior_mean(&u, y) - grid.mean).amax()),
            Err(_) => worst = f64::INFINITY,
        }
    }
    checks.push(Check::new("mlr g grid integration", worst, 1e-4, "max error"));

    let tanh = |x: &Vector| {
        let t = x.map(f64::tanh);
        let d = t.map(|v| 1.0 - v * v);
        (t, Mat::from_diagonal(&d))
    };
    let z = stein_check(&tau, tanh, 200_000, 6).map(|c| c.max_z_score()).unwrap_or(f64::INFINITY);
    checks.push(Check::new("stein identity", z, 4.0, "max z-score"));

    let p = 20_000;
    let mut rng = seed::rng(7, 0, 0);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let b = Mat::from_fn(p, 2, |_, _| normal());
    let noise = Mat::from_fn(p, 2, |_, _| normal());
    let z = psd_factor(&tau)
        .and_then(|factor| empirical_vs_se(&(&b * mu.transpose() + noise * factor.transpose()), &b, &mu, &tau))
        .map(|d| d.max_z_score())
        .unwrap_or(f64::INFINITY);
    checks.push(Check::new("gaussian residual law", z, 5.0, "max z-score"));
    checks
}
