use mixamp::denoisers::{ChannelFamily, SignalFamily};
use mixamp::linalg::{psd_factor, Mat, Vector};
use mixamp::oracles::{empirical_vs_se, linear_regression_se};
use mixamp::se::{run_se, SeConfig, SeProblem, SeState};
use mixamp::{Channel, SignalPrior};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn problem(channel: Channel, signal: SignalFamily, delta: f64, samples: usize) -> SeProblem {
    SeProblem {
        prior: SignalPrior::gaussian_corr(0.0),
        channel,
        signal,
        denoiser: ChannelFamily::Bayes,
        delta,
        config: SeConfig { samples, ..SeConfig::default() },
    }
}

/// α = 0.7, ρ = 0, σ = 0.2, δ = 4 with Bayes f and g.
fn standard(samples: usize) -> SeProblem {
    problem(Channel::mlr2(0.7, 0.2), SignalFamily::Bayes, 4.0, samples)
}

fn run(problem: &SeProblem, k: usize) -> Vec<SeState> {
    run_se(problem, k).unwrap()
}

#[test]
fn sigma_one_is_stable_in_the_sample_count() {
    let a = &run(&standard(100_000), 1)[1].sigma;
    let b = &run(&standard(400_000), 1)[1].sigma;
    let change = (a - b).amax();
    assert!(change <= 0.005 * a.amax(), "|ΔΣ¹| = {change:e} at scale {:e}", a.amax());
}

#[test]
fn sigma_is_symmetric_and_sigma11_is_constant() {
    let states = run(&standard(100_000), 6);
    let s11 = states[0].sigma.view((0, 0), (2, 2)).into_owned();
    for s in &states[1..] {
        assert!((&s.sigma - s.sigma.transpose()).amax() <= 1e-10);
        assert_eq!(s.sigma.view((0, 0), (2, 2)).into_owned(), s11);
        let s12 = s.sigma.view((0, 2), (2, 2));
        let s22 = s.sigma.view((2, 2), (2, 2));
        assert!((s12 - s22).amax() <= 1e-12, "k = {}", s.k);
        if let (Some(mu), Some(tau)) = (&s.mu_b, &s.tau_b) {
            assert!((mu - tau).amax() <= 1e-12, "k = {}", s.k);
        }
    }
}

/// tr(N_B) with a first-order standard error from the entries of Τ_B.
/// Under Bayes g, Μ_B = Τ_B so N_B = Τ_B⁻¹ and dN = −N dΤ N.
fn trace_with_error(s: &SeState) -> (f64, f64) {
    let n = s.n_b.as_ref().unwrap();
    let se = s.tau_b_std_error.as_ref().unwrap();
    let sens = n * n;
    let var: f64 = sens.iter().zip(se.iter()).map(|(a, e)| (a * e).powi(2)).sum();
    (n.trace(), var.sqrt())
}

/// Μ_B¹ is rank one (the initializer carries no information), so N_B¹ is a
/// pseudoinverse restricted to one direction; comparisons start at k = 2.
#[test]
fn effective_noise_does_not_grow_over_six_iterations() {
    let states = run(&standard(100_000), 7);
    let mu1 = states[1].mu_b.as_ref().unwrap();
    assert!(mu1.determinant().abs() <= 1e-6 * mu1.norm_squared());
    for w in states[2..].windows(2) {
        let (prev, prev_se) = trace_with_error(&w[0]);
        let (next, next_se) = trace_with_error(&w[1]);
        let slack = 2.0 * (prev_se * prev_se + next_se * next_se).sqrt();
        assert!(next <= prev + slack, "k = {}: {next} > {prev} + {slack}", w[1].k);
    }
}

#[test]
fn mismatched_linear_denoiser_increases_theta_noise() {
    let wrong = SignalPrior::Gaussian { mean: Vector::zeros(2), cov: Mat::identity(2, 2) * 3.0 };
    let bayes = run(&standard(100_000), 2);
    let other = run(&problem(Channel::mlr2(0.7, 0.2), SignalFamily::Assumed(wrong), 4.0, 100_000), 2);
    let a = bayes[2].n_theta.as_ref().unwrap().trace();
    let b = other[2].n_theta.as_ref().unwrap().trace();
    assert!(b > a, "tr N_Θ²: Bayes {a} vs mismatched {b}");
}

#[test]
fn single_active_branch_is_linear_regression_in_the_first_signal() {
    let delta = 3.0;
    let states = run(&problem(Channel::mlr2(1.0, 0.0), SignalFamily::Bayes, delta, 100_000), 6);
    let scalar = linear_regression_se(1.0, delta, 0.0, 6);
    for (s, lr) in states.iter().zip(&scalar).skip(1) {
        let corr = &s.metrics.corr2;
        assert!((corr[0] - lr.corr2).abs() <= 0.01, "k = {}: {} vs {}", s.k, corr[0], lr.corr2);
        assert!(corr[1] <= 1e-6, "k = {}: second signal corr² {}", s.k, corr[1]);
    }
}

#[test]
fn gaussian_residuals_pass_the_discrepancy_check() {
    let p = 100_000;
    let mu = Mat::from_row_slice(2, 2, &[0.9, 0.1, -0.2, 0.7]);
    let tau = Mat::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.4]);
    let factor = psd_factor(&tau).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let b = Mat::from_fn(p, 2, |_, _| normal());
    let g = Mat::from_fn(p, 2, |_, _| normal()) * factor.transpose();
    let bk = &b * mu.transpose() + g;
    let d = empirical_vs_se(&bk, &b, &mu, &tau).unwrap();
    assert!(d.max_z_score() <= 5.0, "{d:?}");
}
