//! Numerical building blocks: log-space arithmetic, adaptive quadrature and a
//! derivative-free simplex minimiser.

use std::collections::BinaryHeap;

use crate::error::{Error, Result};

pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Running log-sum-exp accumulator.
#[derive(Debug, Clone, Copy)]
pub struct LogSumExp {
    max: f64,
    sum: f64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }
}

impl LogSumExp {
    pub fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x <= self.max {
            self.sum += (x - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    pub fn value(&self) -> f64 {
        if self.sum == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    let k = kronrod * h;
    let g = gauss * h;
    (k, (k - g).abs())
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// Result of an adaptive quadrature.
#[derive(Debug, Clone, Copy)]
pub struct Quadrature {
    pub value: f64,
    pub abs_error: f64,
    pub evaluations: usize,
}

/// Globally adaptive Gauss–Kronrod (7/15) quadrature on a finite interval.
pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<Quadrature> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidArgument("integration bounds must be finite".into()));
    }
    if a == b {
        return Ok(Quadrature {
            value: 0.0,
            abs_error: 0.0,
            evaluations: 0,
        });
    }
    let (v, e) = gk15(&mut f, a, b);
    let mut evaluations = 15;
    let mut heap = BinaryHeap::new();
    heap.push(Segment { a, b, value: v, err: e });
    let mut total = v;
    let mut total_err = e;
    const MAX_SEGMENTS: usize = 2000;
    while total_err > abs_tol.max(rel_tol * total.abs()) && heap.len() < MAX_SEGMENTS {
        let seg = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (seg.a + seg.b);
        let (v1, e1) = gk15(&mut f, seg.a, mid);
        let (v2, e2) = gk15(&mut f, mid, seg.b);
        evaluations += 30;
        total += v1 + v2 - seg.value;
        total_err += e1 + e2 - seg.err;
        heap.push(Segment { a: seg.a, b: mid, value: v1, err: e1 });
        heap.push(Segment { a: mid, b: seg.b, value: v2, err: e2 });
    }
    // Re-sum to shed accumulated rounding from the running updates.
    let value: f64 = heap.iter().map(|s| s.value).sum();
    let abs_error: f64 = heap.iter().map(|s| s.err).sum();
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite quadrature result".into()));
    }
    Ok(Quadrature {
        value,
        abs_error,
        evaluations,
    })
}

/// `log ∫ exp(log_f(t)) dt` over the whole real line for a unimodal-ish
/// log-integrand. The support is bracketed around the maximiser out to where
/// the integrand has dropped by `e^-40`.
pub fn log_integrate_real_line<F: FnMut(f64) -> f64>(mut log_f: F, start: f64) -> Result<f64> {
    let (mode, log_max) = maximise_1d(&mut log_f, start)?;
    let drop = 40.0;
    let mut find_edge = |dir: f64| -> f64 {
        let mut step = 0.5;
        let mut t = mode;
        for _ in 0..200 {
            let next = t + dir * step;
            let v = log_f(next);
            t = next;
            if !(v > log_max - drop) {
                return t;
            }
            step *= 1.5;
        }
        t
    };
    let lo = find_edge(-1.0);
    let hi = find_edge(1.0);
    let q = integrate(
        |t| {
            let v = log_f(t) - log_max;
            if v.is_nan() {
                0.0
            } else {
                v.exp()
            }
        },
        lo,
        hi,
        1e-13,
        1e-10,
    )?;
    if !(q.value > 0.0) {
        return Err(Error::Numerical("integrand vanished on its bracket".into()));
    }
    Ok(log_max + q.value.ln())
}

/// Locates a maximiser of a smooth 1-D function by expanding a bracket and
/// golden-section refinement. Returns `(argmax, max)`.
pub fn maximise_1d<F: FnMut(f64) -> f64>(f: &mut F, start: f64) -> Result<(f64, f64)> {
    let eval = |f: &mut F, x: f64| {
        let v = f(x);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    let mut x0 = start;
    let mut f0 = eval(f, x0);
    if !f0.is_finite() {
        // Scan for a finite starting point.
        let found = (1..60)
            .flat_map(|k| [start + k as f64 * 0.5, start - k as f64 * 0.5])
            .find_map(|x| {
                let v = eval(f, x);
                v.is_finite().then_some((x, v))
            });
        match found {
            Some((x, v)) => {
                x0 = x;
                f0 = v;
            }
            None => return Err(Error::Numerical("no finite point found for maximisation".into())),
        }
    }
    // Uphill walk to bracket the maximum.
    let mut step = 0.5;
    let mut dir = 1.0;
    let mut f1 = eval(f, x0 + step);
    if f1 < f0 {
        dir = -1.0;
        f1 = eval(f, x0 - step);
        if f1 < f0 {
            // Already bracketed.
            return golden(f, x0 - step, x0 + step);
        }
    }
    let mut a = x0;
    let mut b = x0 + dir * step;
    let mut fb = f1;
    for _ in 0..200 {
        step *= 1.6;
        let c = b + dir * step;
        let fc = eval(f, c);
        if fc < fb {
            let (lo, hi) = if a < c { (a, c) } else { (c, a) };
            return golden(f, lo, hi);
        }
        a = b;
        b = c;
        fb = fc;
    }
    Err(Error::Numerical("function increases without bound".into()))
}

fn golden<F: FnMut(f64) -> f64>(f: &mut F, mut a: f64, mut b: f64) -> Result<(f64, f64)> {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > 1e-9 * (1.0 + a.abs() + b.abs()) {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    Ok((x, f(x)))
}

/// Outcome of a Nelder–Mead minimisation.
#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Nelder–Mead simplex minimiser with dimension-adaptive coefficients.
/// Non-finite objective values are treated as `+∞`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    step: f64,
    tol: f64,
    max_iter: usize,
) -> Minimum {
    let d = start.len();
    let mut obj = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    if d == 0 {
        let v = obj(start);
        return Minimum {
            x: vec![],
            value: v,
            iterations: 0,
            converged: true,
        };
    }
    let df = d as f64;
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / df, 0.75 - 1.0 / (2.0 * df), 1.0 - 1.0 / df);
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(d + 1);
    simplex.push(start.to_vec());
    for i in 0..d {
        let mut p = start.to_vec();
        p[i] += step;
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| obj(p)).collect();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = (values[d] - values[0]).abs();
        let size = simplex[1..]
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&simplex[0])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if values[0].is_finite() && spread <= tol * (1.0 + values[0].abs()) && size <= tol.sqrt() {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..d)
            .map(|j| simplex[..d].iter().map(|p| p[j]).sum::<f64>() / df)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[d])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(alpha);
        let fr = obj(&xr);
        if fr < values[0] {
            let xe = along(gamma);
            let fe = obj(&xe);
            if fe < fr {
                simplex[d] = xe;
                values[d] = fe;
            } else {
                simplex[d] = xr;
                values[d] = fr;
            }
        } else if fr < values[d - 1] {
            simplex[d] = xr;
            values[d] = fr;
        } else {
            let (xc, fc) = if fr < values[d] {
                let x = along(rho * alpha);
                let v = obj(&x);
                (x, v)
            } else {
                let x = along(-rho);
                let v = obj(&x);
                (x, v)
            };
            if fc < values[d].min(fr) {
                simplex[d] = xc;
                values[d] = fc;
            } else {
                for i in 1..=d {
                    let p: Vec<f64> = simplex[0]
                        .iter()
                        .zip(&simplex[i])
                        .map(|(b, x)| b + sigma * (x - b))
                        .collect();
                    values[i] = obj(&p);
                    simplex[i] = p;
                }
            }
        }
    }
    let best = (0..=d)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap_or(0);
    Minimum {
        x: simplex[best].clone(),
        value: values[best],
        iterations,
        converged,
    }
}

/// Central finite-difference Hessian.
pub fn hessian<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let d = x.len();
    let mut out = vec![0.0; d * d];
    let f0 = f(x);
    let mut p = x.to_vec();
    for i in 0..d {
        for j in i..d {
            let v = if i == j {
                p[i] = x[i] + h;
                let fp = f(&p);
                p[i] = x[i] - h;
                let fm = f(&p);
                p[i] = x[i];
                (fp - 2.0 * f0 + fm) / (h * h)
            } else {
                let mut at = |di: f64, dj: f64| {
                    p[i] = x[i] + di;
                    p[j] = x[j] + dj;
                    let v = f(&p);
                    p[i] = x[i];
                    p[j] = x[j];
                    v
                };
                (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h)
            };
            out[i * d + j] = v;
            out[j * d + i] = v;
        }
    }
    out
}

/// Deterministic child seed for `(master, keys…)` via splitmix64 mixing.
pub fn derive_seed(master: u64, keys: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    keys.iter().fold(mix(master), |h, &k| mix(h ^ mix(k)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_relative_eq!(log_sum_exp(&[1000.0, 1000.0]), 1000.0 + 2f64.ln());
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        let mut acc = LogSumExp::default();
        for x in [-3.0, 700.0, 1.0, 700.0] {
            acc.push(x);
        }
        assert_relative_eq!(acc.value(), log_sum_exp(&[-3.0, 700.0, 1.0, 700.0]), epsilon = 1e-12);
    }

    #[test]
    fn quadrature_matches_closed_forms() {
        let q = integrate(|x| x.sin(), 0.0, std::f64::consts::PI, 1e-14, 1e-12).unwrap();
        assert_relative_eq!(q.value, 2.0, epsilon = 1e-12);
        let q = integrate(|x| 1.0 / x.sqrt(), 1e-12, 1.0, 1e-12, 1e-10).unwrap();
        assert_relative_eq!(q.value, 2.0, epsilon = 1e-5);
        let lg = log_integrate_real_line(|t| -0.5 * t * t, 3.0).unwrap();
        assert_relative_eq!(lg, 0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-9);
    }

    #[test]
    fn nelder_mead_finds_rosenbrock_minimum() {
        let m = nelder_mead(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            0.5,
            1e-14,
            5000,
        );
        assert!(m.converged);
        assert_relative_eq!(m.x[0], 1.0, epsilon = 1e-4);
        assert_relative_eq!(m.x[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn hessian_of_quadratic() {
        let h = hessian(|x| 3.0 * x[0] * x[0] + x[0] * x[1] + 2.0 * x[1] * x[1], &[0.3, -0.2], 1e-4);
        assert_relative_eq!(h[0], 6.0, epsilon = 1e-5);
        assert_relative_eq!(h[1], 1.0, epsilon = 1e-5);
        assert_relative_eq!(h[3], 4.0, epsilon = 1e-5);
    }
}
