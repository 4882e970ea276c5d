//! Draws from a Gamma(shape, rate) distribution restricted to `[lower, upper]`.

use rand::{Rng, RngExt};
use rand_distr::{Distribution, Gamma};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::ModelError;

/// Untruncated proposals tried before switching to CDF inversion.
const REJECTION_TRIES: usize = 4;
/// Below this interval mass (in either tail) the CDF is not trusted.
const TINY_MASS: f64 = 1e-280;

/// Samples Gamma(`shape`, `rate`) truncated to `[lower, upper]`.
///
/// `rate = 0` with `shape = 1` is the flat density, which is what a bin with
/// no exposure and no events reduces to.
pub fn sample_truncated_gamma<R: Rng + ?Sized>(
    shape: f64,
    rate: f64,
    lower: f64,
    upper: f64,
    rng: &mut R,
) -> Result<f64, ModelError> {
    if lower.partial_cmp(&upper).is_none_or(|o| o.is_gt()) || lower < 0.0 {
        return Err(ModelError::EmptyInterval { lower, upper });
    }
    if lower == upper {
        return Ok(lower);
    }
    if rate == 0.0 {
        if shape != 1.0 {
            return Err(ModelError::Config(format!(
                "improper conditional: shape {shape} with zero rate"
            )));
        }
        return Ok(lower + (upper - lower) * rng.random::<f64>());
    }
    // standard Gamma(shape, 1) on [lo, hi]
    let lo = lower * rate;
    let hi = upper * rate;
    let x = if shape == 1.0 {
        truncated_exponential(lo, hi, 1.0, rng)
    } else {
        let dist = Gamma::new(shape, 1.0)
            .map_err(|e| ModelError::Config(format!("gamma shape {shape}: {e}")))?;
        let mut drawn = None;
        for _ in 0..REJECTION_TRIES {
            let x: f64 = dist.sample(rng);
            if (lo..=hi).contains(&x) {
                drawn = Some(x);
                break;
            }
        }
        match drawn {
            Some(x) => x,
            None => inverse_cdf_draw(shape, lo, hi, rng),
        }
    };
    Ok((x / rate).clamp(lower, upper))
}

/// Exponential(`beta`) truncated to `[lo, hi]`, by inversion.
fn truncated_exponential<R: Rng + ?Sized>(lo: f64, hi: f64, beta: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let width = hi - lo;
    if !width.is_finite() {
        return lo - (1.0 - u).ln() / beta;
    }
    // x = lo - log(1 - u (1 - e^{-beta w})) / beta
    let span = -(-beta * width).exp_m1();
    let x = lo - (-u * span).ln_1p() / beta;
    x.clamp(lo, hi)
}

/// Regularized lower incomplete gamma, extended to `x = 0` and `x = inf`.
fn lower_reg(shape: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else {
        gamma_lr(shape, x)
    }
}

fn upper_reg(shape: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x.is_infinite() {
        0.0
    } else {
        gamma_ur(shape, x)
    }
}

fn log_density(shape: f64, x: f64) -> f64 {
    (shape - 1.0) * x.ln() - x - ln_gamma(shape)
}

/// Inverse-CDF draw of Gamma(shape, 1) restricted to `[lo, hi]`.
fn inverse_cdf_draw<R: Rng + ?Sized>(shape: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
    let mode = (shape - 1.0).max(0.0);
    // work in whichever tail keeps the interval mass representable
    let upper_tail = lo > mode;
    let (a, b) = if upper_tail {
        (upper_reg(shape, lo), upper_reg(shape, hi))
    } else {
        (lower_reg(shape, lo), lower_reg(shape, hi))
    };
    let mass = (a - b).abs();
    if mass < TINY_MASS || !mass.is_finite() || mass <= 1e-12 * a.abs().max(b.abs()) {
        return tangent_rejection(shape, lo, hi, upper_tail, rng);
    }
    let u: f64 = rng.random();
    let target = a + u * (b - a);
    let cdf = |x: f64| {
        if upper_tail {
            upper_reg(shape, x)
        } else {
            lower_reg(shape, x)
        }
    };
    // safeguarded Newton on cdf(x) = target; cdf is decreasing in the upper tail
    let sign = if upper_tail { -1.0 } else { 1.0 };
    let (mut left, mut right) = (lo, hi);
    let mut x = mode.clamp(lo, hi);
    if x == lo || x == hi {
        x = 0.5 * (lo + hi);
    }
    for _ in 0..200 {
        let f = sign * (cdf(x) - target);
        if f > 0.0 {
            right = x;
        } else {
            left = x;
        }
        let dens = log_density(shape, x).exp();
        let mut next = x - f / dens;
        if !next.is_finite() || next <= left || next >= right {
            next = 0.5 * (left + right);
        }
        if (next - x).abs() <= 1e-13 * x.max(1e-300) || right - left <= 1e-14 * right {
            x = next;
            break;
        }
        x = next;
    }
    x.clamp(lo, hi)
}

/// Rejection sampler with an exponential envelope tangent to the log-density
/// at the interval end nearest the mode. Used when the interval sits so far in
/// a tail that its CDF mass underflows.
fn tangent_rejection<R: Rng + ?Sized>(shape: f64, lo: f64, hi: f64, upper_tail: bool, rng: &mut R) -> f64 {
    let anchor = if upper_tail { lo } else { hi };
    let slope = (shape - 1.0) / anchor - 1.0;
    let logf = |x: f64| (shape - 1.0) * x.ln() - x;
    let f_anchor = logf(anchor);
    for _ in 0..10_000 {
        let x = if slope.abs() < 1e-12 {
            lo + (hi - lo) * rng.random::<f64>()
        } else if upper_tail {
            // decreasing envelope from lo
            truncated_exponential(lo, hi, -slope, rng)
        } else {
            // increasing envelope toward hi: reflect
            hi - (truncated_exponential(0.0, hi - lo, slope, rng))
        };
        let log_accept = logf(x) - (f_anchor + slope * (x - anchor));
        if rng.random::<f64>().ln() <= log_accept.min(0.0) {
            return x;
        }
    }
    anchor
}
