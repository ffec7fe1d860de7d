use mixamp::amp::estimate_onsager_c;
use mixamp::linalg::{self, Mat, Vector};
use mixamp::oracles::stein_check;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SAMPLES: usize = 1_000_000;

fn random_pd(rng: &mut ChaCha8Rng, d: usize) -> Mat {
    let a = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + Mat::identity(d, d) * 0.3
}

/// tanh(Ax + b) with its Jacobian diag(1 − tanh²)·A.
fn tanh_map(a: Mat, b: Vector) -> impl Fn(&Vector) -> (Vector, Mat) + Sync {
    move |x| {
        let t = (&a * x + &b).map(f64::tanh);
        let d = t.map(|v| 1.0 - v * v);
        (t, Mat::from_diagonal(&d) * &a)
    }
}

#[test]
fn tanh_scalar_residual_is_within_three_standard_errors() {
    let check = stein_check(&Mat::identity(1, 1), tanh_map(Mat::identity(1, 1), Vector::zeros(1)), SAMPLES, 1)
        .unwrap();
    assert!(check.max_z_score() <= 3.0, "{check:?}");
}

#[test]
fn linear_map_residual_is_small() {
    let a = Mat::from_row_slice(2, 2, &[1.0, -0.5, 0.3, 2.0]);
    let sigma = Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
    let aa = a.clone();
    let check = stein_check(&sigma, move |x| (&aa * x, aa.clone()), SAMPLES, 2).unwrap();
    assert!(check.max_z_score() <= 3.0, "{check:?}");
}

#[test]
fn five_random_smooth_maps_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..5u64 {
        let d = 2 + (trial as usize % 3);
        let sigma = random_pd(&mut rng, d);
        let check = match trial % 3 {
            0 => {
                let a = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
                let b = Vector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));
                stein_check(&sigma, tanh_map(a, b), SAMPLES, 10 + trial)
            }
            1 => {
                // h_i(x) = sin(w_i·x)
                let w = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
                stein_check(
                    &sigma,
                    move |x| {
                        let arg = &w * x;
                        let c = arg.map(f64::cos);
                        (arg.map(f64::sin), Mat::from_diagonal(&c) * &w)
                    },
                    SAMPLES,
                    10 + trial,
                )
            }
            _ => {
                // h_i(x) = x_i·exp(−|x|²/8)
                stein_check(
                    &sigma,
                    move |x| {
                        let e = (-x.norm_squared() / 8.0).exp();
                        let jac = (Mat::identity(x.len(), x.len()) - x * x.transpose() / 4.0) * e;
                        (x * e, jac)
                    },
                    SAMPLES,
                    10 + trial,
                )
            }
        }
        .unwrap();
        assert!(check.max_z_score() <= 3.0, "trial {trial}: {check:?}");
    }
}

#[test]
fn stein_onsager_estimate_matches_jacobian_average() {
    // (Z, Z^k) ~ N(0, Σ) with L = 2; h(z, u) = tanh(Pz + Qu)
    let sigma = Mat::from_row_slice(
        4,
        4,
        &[
            1.0, 0.2, 0.6, 0.1, //
            0.2, 0.8, 0.1, 0.4, //
            0.6, 0.1, 0.7, 0.1, //
            0.1, 0.4, 0.1, 0.6,
        ],
    );
    let p_mat = Mat::from_row_slice(2, 2, &[0.8, -0.3, 0.2, 0.5]);
    let q_mat = Mat::from_row_slice(2, 2, &[-0.6, 0.4, 0.3, -0.9]);
    let factor = sigma.clone().cholesky().unwrap().l();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut theta = Mat::zeros(SAMPLES, 2);
    let mut rhat = Mat::zeros(SAMPLES, 2);
    let mut dz = Mat::zeros(2, 2);
    let mut du = Mat::zeros(2, 2);
    for i in 0..SAMPLES {
        let xi = Vector::from_fn(4, |_, _| rng.sample(StandardNormal));
        let x = &factor * xi;
        let z = x.rows(0, 2).into_owned();
        let u = x.rows(2, 2).into_owned();
        let t = (&p_mat * &z + &q_mat * &u).map(f64::tanh);
        let d = Mat::from_diagonal(&t.map(|v| 1.0 - v * v));
        dz += &d * &p_mat;
        du += &d * &q_mat;
        theta.set_row(i, &u.transpose());
        rhat.set_row(i, &t.transpose());
    }
    dz /= SAMPLES as f64;
    du /= SAMPLES as f64;
    let (c, _) = estimate_onsager_c(&theta, &rhat, &sigma, &dz);
    let rel = (&c - &du).amax() / du.amax();
    assert!(rel <= 0.02, "relative error {rel:.4}\n{c}\n{du}");
    assert!(linalg::is_finite(&c));
}
