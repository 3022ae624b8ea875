//! Log-domain helpers and seeding utilities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `ln(exp(a) + exp(b))` without overflow.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `ln(sum(exp(x)))`, max-shifted. Empty or all `-inf` input gives `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + values.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln(sum_k weights_k * exp(log_values_k))` for non-negative weights.
/// Zero-weight terms are skipped, so they never produce `0 * inf`.
#[inline]
pub fn weighted_log_sum_exp(weights: &[f64], log_values: &[f64]) -> f64 {
    debug_assert_eq!(weights.len(), log_values.len());
    let mut m = f64::NEG_INFINITY;
    for (&w, &v) in weights.iter().zip(log_values) {
        if w > 0.0 && v > m {
            m = v;
        }
    }
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = weights
        .iter()
        .zip(log_values)
        .filter(|(&w, _)| w > 0.0)
        .map(|(&w, &v)| w * (v - m).exp())
        .sum();
    m + s.ln()
}

/// Natural log that maps 0 to `-inf` instead of warning about it.
#[inline]
pub fn ln_guarded(x: f64) -> f64 {
    if x <= 0.0 {
        f64::NEG_INFINITY
    } else {
        x.ln()
    }
}

/// In-place softmax; returns the log-normalizer.
pub fn softmax_in_place(values: &mut [f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        let lse = log_sum_exp(values);
        values.iter_mut().for_each(|v| *v = (*v - lse).exp());
        return lse;
    }
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    values.iter_mut().for_each(|v| *v /= sum);
    m + sum.ln()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a path of stream identifiers (splitmix64), so that
/// independent sub-generators never share a stream.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut x = base;
    for &p in path {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = splitmix(x);
    }
    splitmix(x)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
