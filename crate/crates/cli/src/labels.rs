//! Label estimates for mixed linear regression.

use mixamp::{Channel, Instance, Mat};

/// ĉ_i = argmin_l (Y_i − ⟨X_i, β̂_l⟩)², ties to the smallest index.
pub fn estimate_labels(instance: &Instance, bhat: &Mat) -> Vec<usize> {
    let fitted = &instance.x * bhat;
    (0..instance.n())
        .map(|i| {
            let y = instance.y[i];
            let mut best = 0;
            let mut best_err = f64::INFINITY;
            for l in 0..fitted.ncols() {
                let err = (y - fitted[(i, l)]).powi(2);
                if err < best_err {
                    best = l;
                    best_err = err;
                }
            }
            best
        })
        .collect()
}

/// True labels of an MLR instance (the one-hot block of Ψ).
pub fn true_labels(instance: &Instance) -> Option<Vec<usize>> {
    let Channel::Mlr { alphas, .. } = &instance.channel else {
        return None;
    };
    let l = alphas.len();
    Some(
        (0..instance.n())
            .map(|i| (0..l).find(|&c| instance.psi[(i, c)] == 1.0).unwrap_or(0))
            .collect(),
    )
}

fn permutations(l: usize) -> Vec<Vec<usize>> {
    if l == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(l - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, l - 1);
            out.push(p);
        }
    }
    out
}

/// Fraction of agreeing labels after the best relabeling of the estimates.
pub fn label_accuracy(estimated: &[usize], truth: &[usize], l: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    permutations(l)
        .iter()
        .map(|perm| estimated.iter().zip(truth).filter(|(e, t)| perm[**e] == **t).count())
        .max()
        .unwrap_or(0) as f64
        / truth.len() as f64
}
