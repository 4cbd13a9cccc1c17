//! Finite-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Relative error `|ga - gn| / max(|ga|, |gn|, 1e-8)`, maximized over the
/// pair lists. Two exact zeros count as error 0.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&ga, &gn)| {
            if ga == 0.0 && gn == 0.0 {
                0.0
            } else {
                (ga - gn).abs() / ga.abs().max(gn.abs()).max(1e-8)
            }
        })
        .fold(0.0, f64::max)
}

/// A deterministic random subset of `count` indices out of `0..n`
/// (all of them when `count >= n`).
pub fn sample_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, n, count).into_vec();
    picks.sort_unstable();
    picks
}

/// Central finite differences over the given parameter indices against the
/// analytic gradient; returns the max relative error.
///
/// `loss` must evaluate the scalar objective at the current parameters.
pub fn grad_check_subset(
    params: &mut [f64],
    analytic: &[f64],
    indices: &[usize],
    step: f64,
    loss: &mut dyn FnMut(&[f64]) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for &i in indices {
        let orig = params[i];
        params[i] = orig + step;
        let lp = loss(params);
        params[i] = orig - step;
        let lm = loss(params);
        params[i] = orig;
        let gn = (lp - lm) / (2.0 * step);
        worst = worst.max(max_rel_error(&[analytic[i]], &[gn]));
    }
    worst
}
