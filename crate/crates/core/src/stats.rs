//! Descriptive statistics, goodness-of-fit tests and small regressions used
//! to score simulation output.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Normal};

use crate::error::{invalid, Result};
use crate::linalg::Cholesky;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

pub fn sd(x: &[f64]) -> f64 {
    variance(x).sqrt()
}

pub fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean with a normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanCi {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl MeanCi {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

pub fn mean_ci(x: &[f64]) -> MeanCi {
    let m = mean(x);
    let half = 1.96 * sd(x) / (x.len() as f64).sqrt();
    MeanCi {
        mean: m,
        lo: m - half,
        hi: m + half,
        n: x.len(),
    }
}

/// Clopper–Pearson interval for a binomial proportion.
pub fn binomial_ci(k: usize, n: usize, level: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let a = 0.5 * (1.0 - level);
    let (kf, nf) = (k as f64, n as f64);
    let lo = if k == 0 {
        0.0
    } else {
        Beta::new(kf, nf - kf + 1.0).unwrap().inverse_cdf(a)
    };
    let hi = if k == n {
        1.0
    } else {
        Beta::new(kf + 1.0, nf - kf).unwrap().inverse_cdf(1.0 - a)
    };
    (lo, hi)
}

/// One-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_test<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> (f64, f64) {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d = 0.0_f64;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    (d, kolmogorov_q((sn + 0.12 + 0.11 / sn) * d))
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Pearson χ² test of equal cell probabilities; returns the p-value.
pub fn chisq_uniform(counts: &[usize]) -> f64 {
    use statrs::distribution::ChiSquared;
    let k = counts.len();
    let total: usize = counts.iter().sum();
    let e = total as f64 / k as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    1.0 - ChiSquared::new((k - 1) as f64).unwrap().cdf(stat)
}

pub fn normal_two_sided_p(z: f64) -> f64 {
    2.0 * (1.0 - Normal::standard().cdf(z.abs()))
}

/// Logistic regression of a response in `[0, 1]` on one covariate, fitted by
/// iteratively reweighted least squares. Each observation carries a binomial
/// weight (the trial count for proportions, 1 for fractional responses).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub intercept: f64,
    pub slope: f64,
    pub se_intercept: f64,
    pub se_slope: f64,
    pub converged: bool,
}

impl LogisticFit {
    pub fn predict(&self, x: f64) -> f64 {
        1.0 / (1.0 + (-(self.intercept + self.slope * x)).exp())
    }

    pub fn z_slope(&self) -> f64 {
        self.slope / self.se_slope
    }
}

pub fn logistic_fit(x: &[f64], y: &[f64], w: &[f64]) -> Result<LogisticFit> {
    if x.len() != y.len() || x.len() != w.len() || x.len() < 2 {
        return invalid("logistic_fit needs matching inputs of length >= 2");
    }
    if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return invalid("logistic responses must lie in [0, 1]");
    }
    let mut b = [0.0_f64, 0.0];
    let ybar = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>();
    let ybar = ybar.clamp(1e-6, 1.0 - 1e-6);
    b[0] = (ybar / (1.0 - ybar)).ln();
    let mut converged = false;
    let mut info = [0.0; 4];
    for _ in 0..100 {
        let mut g = [0.0; 2];
        info = [0.0; 4];
        for i in 0..x.len() {
            let eta = b[0] + b[1] * x[i];
            let p = 1.0 / (1.0 + (-eta).exp());
            let r = w[i] * (y[i] - p);
            let v = w[i] * (p * (1.0 - p)).max(1e-12);
            g[0] += r;
            g[1] += r * x[i];
            info[0] += v;
            info[1] += v * x[i];
            info[3] += v * x[i] * x[i];
        }
        info[2] = info[1];
        let det = info[0] * info[3] - info[1] * info[2];
        if !(det.abs() > 1e-300) {
            return Err(crate::Error::RankDeficient("logistic information matrix".into()));
        }
        let d0 = (info[3] * g[0] - info[1] * g[1]) / det;
        let d1 = (-info[2] * g[0] + info[0] * g[1]) / det;
        b[0] += d0;
        b[1] += d1;
        if d0.abs() + d1.abs() < 1e-10 {
            converged = true;
            break;
        }
    }
    let chol = Cholesky::new(info.to_vec(), 2)?;
    let cov = chol.inverse();
    Ok(LogisticFit {
        intercept: b[0],
        slope: b[1],
        se_intercept: cov[(0, 0)].sqrt(),
        se_slope: cov[(1, 1)].sqrt(),
        converged,
    })
}
