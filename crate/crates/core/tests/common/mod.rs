//! Independent numerical oracles for the acceptance suite.
//!
//! The quadrature route below never touches the library's mixture-posterior
//! algebra: it integrates the clean-latent density directly on a Simpson
//! grid (or sums component point masses when the within-component spread is
//! zero) and divides the moment integral by the normalizer.

use editlab::oracle::{Condition, GmmWorld};
use editlab::toyworld::SemanticTuple;

/// Component means admitted by a condition, resolved from the world's own
/// tables (the data being modeled, not the computation being checked).
fn admitted_means(world: &GmmWorld, cond: &Condition) -> Vec<Vec<f64>> {
    world
        .schema()
        .tuples()
        .into_iter()
        .filter(|t: &SemanticTuple| {
            cond.pins
                .iter()
                .enumerate()
                .all(|(a, pin)| pin.map_or(true, |v| t.values[a] == v))
        })
        .map(|t| world.mean_of(&t).to_vec())
        .collect()
}

fn log_gauss(z: &[f64], mean: &[f64], var: f64) -> f64 {
    let d2: f64 = z.iter().zip(mean).map(|(&a, &b)| (a - b) * (a - b)).sum();
    -d2 / (2.0 * var) - 0.5 * z.len() as f64 * (2.0 * std::f64::consts::PI * var).ln()
}

/// E[z0 | z_t] by brute force. sigma0 = 0 collapses to a weighted sum over
/// the admitted component means; otherwise a tensorized Simpson rule over
/// every latent coordinate (supports 1-D and 2-D worlds).
pub fn quadrature_posterior_mean(
    world: &GmmWorld,
    abar: f64,
    z_t: &[f64],
    cond: &Condition,
    entries: usize,
) -> Vec<f64> {
    let means = admitted_means(world, cond);
    assert!(!means.is_empty(), "condition admits no component");
    let dim = z_t.len();
    let sigma0 = world.sigma0();
    let noise_var = 1.0 - abar;
    let sqrt_abar = abar.sqrt();

    if sigma0 == 0.0 {
        // Point-mass components: E = sum_k w_k mu_k with
        // w_k proportional to N(z_t; sqrt(abar) mu_k, 1 - abar).
        let logs: Vec<f64> = means
            .iter()
            .map(|mu| {
                let scaled: Vec<f64> = mu.iter().map(|&m| sqrt_abar * m).collect();
                log_gauss(z_t, &scaled, noise_var)
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut out = vec![0.0; dim];
        for (w, mu) in weights.iter().zip(&means) {
            for (o, &m) in out.iter_mut().zip(mu) {
                *o += w / total * m;
            }
        }
        return out;
    }

    assert!(dim <= 2, "tensor quadrature supports 1-D and 2-D worlds");
    let lo: f64 = means
        .iter()
        .flat_map(|m| m.iter())
        .cloned()
        .fold(f64::INFINITY, f64::min)
        - 10.0 * sigma0.max(1.0);
    let hi: f64 = means
        .iter()
        .flat_map(|m| m.iter())
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        + 10.0 * sigma0.max(1.0);
    // Simpson weights need an even interval count.
    let n = if entries % 2 == 0 { entries } else { entries + 1 };
    let h = (hi - lo) / n as f64;
    let w1 = |i: usize| -> f64 {
        if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };

    // Unnormalized density of z0 under the admitted mixture, times the
    // forward kernel at z_t.
    let density = |z0: &[f64]| -> f64 {
        let prior: f64 = means
            .iter()
            .map(|mu| log_gauss(z0, mu, sigma0 * sigma0).exp())
            .sum();
        let scaled: Vec<f64> = z0.iter().map(|&v| sqrt_abar * v).collect();
        prior * log_gauss(z_t, &scaled, noise_var).exp()
    };

    let mut normalizer = 0.0;
    let mut moment = vec![0.0; dim];
    if dim == 1 {
        for i in 0..=n {
            let z0 = [lo + i as f64 * h];
            let w = w1(i) * density(&z0);
            normalizer += w;
            moment[0] += w * z0[0];
        }
    } else {
        for i in 0..=n {
            for j in 0..=n {
                let z0 = [lo + i as f64 * h, lo + j as f64 * h];
                let w = w1(i) * w1(j) * density(&z0);
                normalizer += w;
                moment[0] += w * z0[0];
                moment[1] += w * z0[1];
            }
        }
    }
    moment.iter().map(|m| m / normalizer).collect()
}

/// Epsilon implied by the quadrature posterior mean.
pub fn quadrature_eps(
    world: &GmmWorld,
    abar: f64,
    z_t: &[f64],
    cond: &Condition,
    entries: usize,
) -> Vec<f64> {
    let mean = quadrature_posterior_mean(world, abar, z_t, cond, entries);
    let sqrt_abar = abar.sqrt();
    let denom = (1.0 - abar).sqrt();
    z_t.iter().zip(&mean).map(|(&z, &m)| (z - sqrt_abar * m) / denom).collect()
}
