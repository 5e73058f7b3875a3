//! Small statistical kernels shared by the matching, effect and diagnostic
//! modules.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};

/// Critical value of the fine-balance inequality and of the normal 95% bands.
pub const Z_95: f64 = 1.96;

/// Mean and standard error of a sample. `se` is `None` below two observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub n: usize,
    pub mean: f64,
    pub se: Option<f64>,
}

pub fn mean_se(xs: &[f64]) -> MeanSe {
    let n = xs.len();
    if n == 0 {
        return MeanSe {
            n,
            mean: f64::NAN,
            se: None,
        };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let se = (n >= 2).then(|| {
        let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
        (ss / (n - 1) as f64 / n as f64).sqrt()
    });
    MeanSe { n, mean, se }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// Two-sided p-value of a t statistic with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Two-sided one-sample t-test of `xs` against mean zero. A zero standard
/// error gives p = 1 when the mean is zero and p = 0 otherwise.
pub fn one_sample_t_p(xs: &[f64]) -> Result<f64> {
    let ms = mean_se(xs);
    let se = ms
        .se
        .ok_or_else(|| Error::invalid("t-test needs at least two observations"))?;
    if se == 0.0 {
        return Ok(if ms.mean == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(t_two_sided_p(ms.mean / se, (ms.n - 1) as f64))
}

fn ln_pmf(n: u64, k: u64, ln_p: f64, ln_q: f64) -> f64 {
    ln_binomial(n, k) + k as f64 * ln_p + (n - k) as f64 * ln_q
}

/// Sums pmf terms from `k` outward (downward for the lower tail, upward for
/// the upper), stopping once past the mode and the terms are negligible.
fn tail(n: u64, k: u64, ln_p: f64, ln_q: f64, lower: bool, mode: u64) -> f64 {
    let mut reference = ln_pmf(n, k, ln_p, ln_q);
    let mut acc = 1.0;
    let mut i = k;
    loop {
        let next = if lower {
            match i.checked_sub(1) {
                Some(j) => j,
                None => break,
            }
        } else if i < n {
            i + 1
        } else {
            break;
        };
        i = next;
        let l = ln_pmf(n, i, ln_p, ln_q);
        if l > reference {
            acc = acc * (reference - l).exp() + 1.0;
            reference = l;
        } else {
            let term = (l - reference).exp();
            acc += term;
            let past_mode = if lower { i < mode } else { i > mode };
            if past_mode && term < acc * 1e-18 {
                break;
            }
        }
    }
    (reference + acc.ln()).exp()
}

/// `(P(X <= k), P(X >= k))` for `X ~ Binomial(n, p)`.
pub fn binomial_tails(n: u64, k: u64, p: f64) -> (f64, f64) {
    assert!(k <= n && p > 0.0 && p < 1.0);
    let (ln_p, ln_q) = (p.ln(), (1.0 - p).ln());
    let mode = (((n + 1) as f64) * p).floor() as u64;
    let lower = tail(n, k, ln_p, ln_q, true, mode);
    let upper = tail(n, k, ln_p, ln_q, false, mode);
    (lower.min(1.0), upper.min(1.0))
}

/// Exact two-sided binomial p-value: the smaller tail doubled, capped at 1.
pub fn binomial_two_sided_p(n: u64, k: u64, p: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let (lower, upper) = binomial_tails(n, k, p);
    (2.0 * lower.min(upper)).min(1.0)
}

/// Smallest minority count `c` such that `n` fair-coin trials with minority
/// count `min(k, n - k) >= c` are not rejected at `alpha`.
pub(crate) fn sign_threshold(n: u64, alpha: f64) -> u64 {
    // the p-value is nondecreasing in the minority count
    let (mut lo, mut hi) = (0, n / 2);
    if binomial_two_sided_p(n, hi, 0.5) < alpha {
        return hi + 1;
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if binomial_two_sided_p(n, mid, 0.5) >= alpha {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// Complementary CDF of the Kolmogorov distribution, `P(K > z)`.
pub fn kolmogorov_q(z: f64) -> f64 {
    if z <= 0.0 {
        return 1.0;
    }
    if z < 1.18 {
        // y = exp(-pi^2 / (8 z^2)); sqrt(-ln y) = pi / (sqrt(8) z)
        let y = (-1.233_700_550_136_17 / (z * z)).exp();
        let root = 1.110_720_734_539_591_5 / z;
        let p = 2.256_758_334_191_025 * root * (y + y.powi(9) + y.powi(25) + y.powi(49));
        (1.0 - p).clamp(0.0, 1.0)
    } else {
        let x = (-2.0 * z * z).exp();
        (2.0 * (x - x.powi(4) + x.powi(9))).clamp(0.0, 1.0)
    }
}

/// Two-sample Kolmogorov-Smirnov test result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample K-S test with the asymptotic p-value, using the effective sample
/// size correction `(sqrt(ne) + 0.12 + 0.11 / sqrt(ne)) * D`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("K-S test needs two nonempty samples"));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(Error::invalid("K-S samples contain NaN"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = na * nb / (na + nb);
    let sq = ne.sqrt();
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q((sq + 0.12 + 0.11 / sq) * d),
    })
}
