//! Statistical apparatus: exponent histograms, inter-expert Pearson
//! correlation, and the closed-form proportion of similar entries between two
//! independent zero-mean Gaussians, with a Monte Carlo oracle.

use crate::bf16::Bf16Word;
use crate::codec::{EXP_HIGH, EXP_LOW};
use crate::error::{Error, Result};
use crate::merge::similarity_delta;
use crate::tensor::ExpertTensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

#[derive(Clone, Debug)]
pub struct ExponentHistogram {
    /// Count per 8-bit bf16 exponent field value.
    pub counts: [u64; 256],
    /// Fraction of entries whose exponent lies in the packable band.
    pub fraction_in_range: f64,
}

/// Histogram of bf16 exponent fields after rounding each entry to bf16.
pub fn exponent_histogram(t: &ExpertTensor) -> ExponentHistogram {
    let mut counts = [0u64; 256];
    for &v in t.values.values() {
        counts[Bf16Word::from_f32(v).exponent() as usize] += 1;
    }
    let total: u64 = counts.iter().sum();
    let in_range: u64 = counts[EXP_LOW as usize..=EXP_HIGH as usize].iter().sum();
    ExponentHistogram {
        counts,
        fraction_in_range: if total == 0 {
            1.0
        } else {
            in_range as f64 / total as f64
        },
    }
}

/// Pearson correlation over flattened entries, f64 accumulation.
pub fn pearson_pairwise(a: &ExpertTensor, b: &ExpertTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context: "pearson_pairwise",
            a: a.shape(),
            b: b.shape(),
        });
    }
    let n = a.values.values().len();
    if n < 2 {
        return Err(Error::DegenerateVariance("fewer than 2 elements"));
    }
    let mean =
        |t: &ExpertTensor| t.values.values().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let (ma, mb) = (mean(a), mean(b));
    let mut cov = 0.0f64;
    let mut var_a = 0.0f64;
    let mut var_b = 0.0f64;
    for (&x, &y) in a.values.values().iter().zip(b.values.values()) {
        let dx = x as f64 - ma;
        let dy = y as f64 - mb;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::DegenerateVariance("zero variance"));
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

/// Closed-form P(||w1|-|w2|| / (|w1|+|w2|) < tau) for independent zero-mean
/// Gaussians with sigma_ratio = sigma2/sigma1:
///
/// P = (2/pi) * (atan(rho*(1+tau)/(1-tau)) - atan(rho*(1-tau)/(1+tau)))
pub fn similarity_fraction_closed(sigma_ratio: f64, tau: f64) -> Result<f64> {
    if sigma_ratio.is_nan() || sigma_ratio <= 0.0 {
        return Err(Error::DomainError(format!(
            "sigma_ratio {sigma_ratio} must be > 0"
        )));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::DomainError(format!("tau {tau} must be in [0, 1)")));
    }
    let hi = sigma_ratio * (1.0 + tau) / (1.0 - tau);
    let lo = sigma_ratio * (1.0 - tau) / (1.0 + tau);
    Ok((2.0 / std::f64::consts::PI) * (hi.atan() - lo.atan()))
}

const MC_SHARD: u64 = 1 << 16;

/// Monte Carlo oracle for [`similarity_fraction_closed`]: fraction of i.i.d.
/// draws w1 ~ N(0, sigma1^2), w2 ~ N(0, sigma2^2) with
/// ||w1|-|w2||/(|w1|+|w2|) < tau.
///
/// Sampling shards into fixed 2^16-draw blocks on separate seeded streams, so
/// the result is identical at any worker count.
pub fn similarity_fraction_mc(
    sigma1: f64,
    sigma2: f64,
    tau: f64,
    n_samples: u64,
    seed: u64,
) -> f64 {
    assert!(n_samples >= 1 && sigma1 > 0.0 && sigma2 > 0.0);
    let shards = n_samples.div_ceil(MC_SHARD);
    let hits: u64 = (0..shards)
        .into_par_iter()
        .map(|shard| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(shard);
            let lo = shard * MC_SHARD;
            let hi = (lo + MC_SHARD).min(n_samples);
            let mut hits = 0u64;
            for _ in lo..hi {
                let z1: f64 = StandardNormal.sample(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                let a = (sigma1 * z1).abs();
                let b = (sigma2 * z2).abs();
                if (a - b).abs() / (a + b) < tau {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    hits as f64 / n_samples as f64
}

/// Fraction of entries of two equal-shape tensors with delta <= tau — the
/// empirical counterpart of the closed form.
pub fn measured_similarity_fraction(a: &ExpertTensor, b: &ExpertTensor, tau: f64) -> Result<f64> {
    let delta = similarity_delta(a, b)?;
    let n = delta.values().len();
    if n == 0 {
        return Ok(1.0);
    }
    let hits = delta.values().iter().filter(|&&d| d as f64 <= tau).count();
    Ok(hits as f64 / n as f64)
}
