//! Penalised least-squares algebra shared by the Bayesian and ML mixed models.
//!
//! Coefficients are ordered as (largest grouping, other groupings, fixed).
//! The leading grouping's block of `I + s·ΛᵀWᵀWΛ` is block diagonal, so it is
//! eliminated level by level and only the Schur complement of the remaining
//! `r` coefficients is factored densely.

use nalgebra::DMatrix;

use crate::design::GroupBlock;
use crate::error::{invalid, Result};
use crate::linalg::{cholesky_in_place, solve_lower_in_place, solve_upper_t_in_place};

#[derive(Debug, Clone)]
struct RestGroup {
    offset: usize,
    n_levels: usize,
    k: usize,
}

/// Cross-products of `W = [Z | X]` with itself and with `y`.
#[derive(Debug, Clone)]
pub struct MixedSystem {
    pub n: usize,
    pub p: usize,
    /// Position of each input grouping in the internal order.
    order: Vec<usize>,
    l0: usize,
    k0: usize,
    rest: Vec<RestGroup>,
    r: usize,
    fixed_offset: usize,
    a00: Vec<f64>,
    a01: Vec<f64>,
    a11: Vec<f64>,
    w0y: Vec<f64>,
    wry: Vec<f64>,
    yty: f64,
}

/// Lower-triangular factor for each grouping (in input order), plus the
/// diagonal scale of the fixed coefficients.
#[derive(Debug, Clone)]
pub struct Lambda<'a> {
    pub groups: &'a [Vec<f64>],
    pub fixed: &'a [f64],
}

/// Factorisation of `diag(pen) + s·ΛᵀWᵀWΛ`.
#[derive(Debug, Clone)]
pub struct Factor {
    l0: Vec<f64>,
    f0: Vec<f64>,
    ls: Vec<f64>,
    pub logdet: f64,
    /// Log-determinant restricted to the random-effect coefficients.
    pub logdet_random: f64,
}

fn apply_right(m: &[f64], rows: usize, r: usize, rest: &[RestGroup], ts: &[&[f64]], fixed_offset: usize, fixed: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * r];
    for (g, t) in rest.iter().zip(ts) {
        let k = g.k;
        for lvl in 0..g.n_levels {
            let o = g.offset + lvl * k;
            for row in 0..rows {
                let src = &m[row * r + o..row * r + o + k];
                let dst = &mut out[row * r + o..row * r + o + k];
                for j in 0..k {
                    let mut s = 0.0;
                    for i in j..k {
                        s += src[i] * t[i * k + j];
                    }
                    dst[j] = s;
                }
            }
        }
    }
    for (j, &d) in fixed.iter().enumerate() {
        let c = fixed_offset + j;
        for row in 0..rows {
            out[row * r + c] = m[row * r + c] * d;
        }
    }
    out
}

impl MixedSystem {
    pub fn new(x: &DMatrix<f64>, groups: &[&GroupBlock], y: &[f64]) -> Result<Self> {
        let n = x.nrows();
        if y.len() != n {
            return invalid("response length does not match design rows");
        }
        for g in groups {
            if g.index.len() != n {
                return invalid(format!("grouping {} has wrong length", g.name));
            }
        }
        let p = x.ncols();
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(groups[i].n_levels * groups[i].k()));
        let (l0, k0) = match order.first() {
            Some(&g) => (groups[g].n_levels, groups[g].k()),
            None => (0, 0),
        };
        let mut rest = Vec::new();
        let mut offset = 0;
        for &g in order.iter().skip(1) {
            rest.push(RestGroup {
                offset,
                n_levels: groups[g].n_levels,
                k: groups[g].k(),
            });
            offset += groups[g].n_levels * groups[g].k();
        }
        let fixed_offset = offset;
        let r = offset + p;

        // Dense rows of the non-leading part of W.
        let mut wrest = vec![0.0; n * r];
        for (rg, &g) in rest.iter().zip(order.iter().skip(1)) {
            let gb = groups[g];
            for i in 0..n {
                let o = rg.offset + gb.index[i] * rg.k;
                for j in 0..rg.k {
                    wrest[i * r + o + j] = gb.z[(i, j)];
                }
            }
        }
        for i in 0..n {
            for j in 0..p {
                wrest[i * r + fixed_offset + j] = x[(i, j)];
            }
        }
        let mut a11 = vec![0.0; r * r];
        let mut wry = vec![0.0; r];
        for i in 0..n {
            let row = &wrest[i * r..(i + 1) * r];
            for a in 0..r {
                let va = row[a];
                if va == 0.0 {
                    continue;
                }
                wry[a] += va * y[i];
                for b in 0..r {
                    a11[a * r + b] += va * row[b];
                }
            }
        }
        let mut a00 = vec![0.0; l0 * k0 * k0];
        let mut a01 = vec![0.0; l0 * k0 * r];
        let mut w0y = vec![0.0; l0 * k0];
        if let Some(&g) = order.first() {
            let gb = groups[g];
            for i in 0..n {
                let lvl = gb.index[i];
                let row = &wrest[i * r..(i + 1) * r];
                for a in 0..k0 {
                    let za = gb.z[(i, a)];
                    w0y[lvl * k0 + a] += za * y[i];
                    for b in 0..k0 {
                        a00[lvl * k0 * k0 + a * k0 + b] += za * gb.z[(i, b)];
                    }
                    let dst = &mut a01[(lvl * k0 + a) * r..(lvl * k0 + a + 1) * r];
                    for c in 0..r {
                        dst[c] += za * row[c];
                    }
                }
            }
        }
        let yty = y.iter().map(|v| v * v).sum();
        Ok(Self {
            n,
            p,
            order,
            l0,
            k0,
            rest,
            r,
            fixed_offset,
            a00,
            a01,
            a11,
            w0y,
            wry,
            yty,
        })
    }

    pub fn q(&self) -> usize {
        self.l0 * self.k0 + self.r
    }

    pub fn yty(&self) -> f64 {
        self.yty
    }

    fn split<'a>(&self, lambda: &Lambda<'a>) -> (&'a [f64], Vec<&'a [f64]>) {
        let t0: &[f64] = match self.order.first() {
            Some(&g) => &lambda.groups[g],
            None => &[],
        };
        let ts = self.order.iter().skip(1).map(|&g| lambda.groups[g].as_slice()).collect();
        (t0, ts)
    }

    /// Factors `diag(pen) + s·ΛᵀWᵀWΛ`; `pen` is 1 on random coefficients and
    /// on fixed coefficients only when `penalize_fixed`.
    pub fn factor(&self, lambda: &Lambda, s: f64, penalize_fixed: bool) -> Result<Factor> {
        let (t0, ts) = self.split(lambda);
        let (r, k0, l0) = (self.r, self.k0, self.l0);
        let al = apply_right(&self.a11, r, r, &self.rest, &ts, self.fixed_offset, lambda.fixed);
        let mut alt = vec![0.0; r * r];
        for i in 0..r {
            for j in 0..r {
                alt[j * r + i] = al[i * r + j];
            }
        }
        let b = apply_right(&alt, r, r, &self.rest, &ts, self.fixed_offset, lambda.fixed);
        let mut sm = vec![0.0; r * r];
        for i in 0..r {
            for j in 0..=i {
                sm[i * r + j] = s * b[i * r + j];
            }
            if i < self.fixed_offset || penalize_fixed {
                sm[i * r + i] += 1.0;
            }
        }

        let mut l0s = vec![0.0; l0 * k0 * k0];
        let mut f0 = vec![0.0; l0 * k0 * r];
        let mut logdet0 = 0.0;
        let mut tmp = vec![0.0; k0 * k0];
        for lvl in 0..l0 {
            let a = &self.a00[lvl * k0 * k0..(lvl + 1) * k0 * k0];
            // tmp = a · T0
            for i in 0..k0 {
                for j in 0..k0 {
                    let mut acc = 0.0;
                    for m in j..k0 {
                        acc += a[i * k0 + m] * t0[m * k0 + j];
                    }
                    tmp[i * k0 + j] = acc;
                }
            }
            let lb = &mut l0s[lvl * k0 * k0..(lvl + 1) * k0 * k0];
            for i in 0..k0 {
                for j in 0..=i {
                    let mut acc = 0.0;
                    for m in i..k0 {
                        acc += t0[m * k0 + i] * tmp[m * k0 + j];
                    }
                    lb[i * k0 + j] = s * acc + if i == j { 1.0 } else { 0.0 };
                }
            }
            cholesky_in_place(lb, k0)?;
            for i in 0..k0 {
                logdet0 += 2.0 * lb[i * k0 + i].ln();
            }
            let e = apply_right(
                &self.a01[lvl * k0 * r..(lvl + 1) * k0 * r],
                k0,
                r,
                &self.rest,
                &ts,
                self.fixed_offset,
                lambda.fixed,
            );
            let fb = &mut f0[lvl * k0 * r..(lvl + 1) * k0 * r];
            for i in 0..k0 {
                for c in 0..r {
                    let mut acc = 0.0;
                    for m in i..k0 {
                        acc += t0[m * k0 + i] * e[m * r + c];
                    }
                    fb[i * r + c] = s * acc;
                }
            }
            // F = L⁻¹ M01, column by column.
            for c in 0..r {
                for i in 0..k0 {
                    let mut acc = fb[i * r + c];
                    for m in 0..i {
                        acc -= lb[i * k0 + m] * fb[m * r + c];
                    }
                    fb[i * r + c] = acc / lb[i * k0 + i];
                }
            }
            for i in 0..k0 {
                let row = &fb[i * r..(i + 1) * r];
                for a in 0..r {
                    let va = row[a];
                    if va == 0.0 {
                        continue;
                    }
                    let dst = &mut sm[a * r..a * r + a + 1];
                    for bcol in 0..=a {
                        dst[bcol] -= va * row[bcol];
                    }
                }
            }
        }
        cholesky_in_place(&mut sm, r)?;
        let mut logdet_rest_random = 0.0;
        let mut logdet_rest = 0.0;
        for i in 0..r {
            let v = 2.0 * sm[i * r + i].ln();
            logdet_rest += v;
            if i < self.fixed_offset {
                logdet_rest_random += v;
            }
        }
        Ok(Factor {
            l0: l0s,
            f0,
            ls: sm,
            logdet: logdet0 + logdet_rest,
            logdet_random: logdet0 + logdet_rest_random,
        })
    }

    /// `Λᵀ v` for a vector in coefficient order.
    pub fn lambda_t(&self, lambda: &Lambda, v: &[f64]) -> Vec<f64> {
        let (t0, ts) = self.split(lambda);
        let (k0, r) = (self.k0, self.r);
        let mut out = vec![0.0; v.len()];
        for lvl in 0..self.l0 {
            for i in 0..k0 {
                let mut acc = 0.0;
                for m in i..k0 {
                    acc += t0[m * k0 + i] * v[lvl * k0 + m];
                }
                out[lvl * k0 + i] = acc;
            }
        }
        let base = self.l0 * k0;
        let rv = &v[base..base + r];
        let ro = apply_right(rv, 1, r, &self.rest, &ts, self.fixed_offset, lambda.fixed);
        out[base..].copy_from_slice(&ro);
        out
    }

    /// `Wᵀ y` in coefficient order.
    pub fn wty(&self) -> Vec<f64> {
        let mut v = self.w0y.clone();
        v.extend_from_slice(&self.wry);
        v
    }

    /// Column `j` of `WᵀW` restricted to a fixed coefficient.
    pub fn gram_fixed_column(&self, j: usize) -> Vec<f64> {
        let c = self.fixed_offset + j;
        let mut v: Vec<f64> = (0..self.l0 * self.k0).map(|row| self.a01[row * self.r + c]).collect();
        v.extend((0..self.r).map(|row| self.a11[row * self.r + c]));
        v
    }

    /// Index of fixed coefficient `j` in coefficient order.
    pub fn fixed_index(&self, j: usize) -> usize {
        self.l0 * self.k0 + self.fixed_offset + j
    }
}

impl Factor {
    /// Returns `z = L⁻¹ v`; `|z|²` is `vᵀ M⁻¹ v`.
    pub fn forward(&self, sys: &MixedSystem, v: &[f64]) -> Vec<f64> {
        let (k0, r) = (sys.k0, sys.r);
        let mut z = v.to_vec();
        let base = sys.l0 * k0;
        for lvl in 0..sys.l0 {
            let lb = &self.l0[lvl * k0 * k0..(lvl + 1) * k0 * k0];
            solve_lower_in_place(lb, k0, &mut z[lvl * k0..(lvl + 1) * k0]);
            let fb = &self.f0[lvl * k0 * r..(lvl + 1) * k0 * r];
            for i in 0..k0 {
                let zi = z[lvl * k0 + i];
                if zi == 0.0 {
                    continue;
                }
                for c in 0..r {
                    z[base + c] -= fb[i * r + c] * zi;
                }
            }
        }
        solve_lower_in_place(&self.ls, r, &mut z[base..]);
        z
    }

    /// Completes `M⁻¹ v` from `z = forward(v)`.
    pub fn backward(&self, sys: &MixedSystem, mut z: Vec<f64>) -> Vec<f64> {
        let (k0, r) = (sys.k0, sys.r);
        let base = sys.l0 * k0;
        solve_upper_t_in_place(&self.ls, r, &mut z[base..]);
        let (head, tail) = z.split_at_mut(base);
        for lvl in 0..sys.l0 {
            let fb = &self.f0[lvl * k0 * r..(lvl + 1) * k0 * r];
            let seg = &mut head[lvl * k0..(lvl + 1) * k0];
            for i in 0..k0 {
                let mut acc = 0.0;
                for c in 0..r {
                    acc += fb[i * r + c] * tail[c];
                }
                seg[i] -= acc;
            }
            let lb = &self.l0[lvl * k0 * k0..(lvl + 1) * k0 * k0];
            solve_upper_t_in_place(lb, k0, seg);
        }
        z
    }

    /// `(M⁻¹)` restricted to the fixed coefficients (the trailing block).
    pub fn fixed_inverse(&self, sys: &MixedSystem) -> DMatrix<f64> {
        let (r, p, fo) = (sys.r, sys.p, sys.fixed_offset);
        // Trailing p×p block of the Schur factor.
        let mut lxx = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                lxx[i * p + j] = self.ls[(fo + i) * r + fo + j];
            }
        }
        let mut inv = DMatrix::zeros(p, p);
        for j in 0..p {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            solve_lower_in_place(&lxx, p, &mut e);
            solve_upper_t_in_place(&lxx, p, &mut e);
            for i in 0..p {
                inv[(i, j)] = e[i];
            }
        }
        inv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::GroupBlock;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Crossed design with subject and item blocks, checked against explicit
    /// dense algebra on `W`.
    #[test]
    fn block_elimination_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (ns, ni) = (5, 4);
        let n = ns * ni * 2;
        let mut x = DMatrix::zeros(n, 2);
        let mut si = Vec::new();
        let mut ii = Vec::new();
        for s in 0..ns {
            for it in 0..ni {
                for c in 0..2 {
                    let row = si.len();
                    x[(row, 0)] = 1.0;
                    x[(row, 1)] = if (c + s + it) % 2 == 0 { 0.5 } else { -0.5 } + rng.random::<f64>() * 0.1;
                    si.push(s);
                    ii.push(it);
                }
            }
        }
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let gs = GroupBlock::new("subj", si, ns, &x, &[0, 1]).unwrap();
        let gi = GroupBlock::new("item", ii, ni, &x, &[0, 1]).unwrap();
        let sys = MixedSystem::new(&x, &[&gs, &gi], &y).unwrap();
        let ts = vec![vec![1.2, 0.0, 0.3, 0.7], vec![0.5, 0.0, -0.2, 0.4]];
        let fixed = [2.0, 3.0];
        let lam = Lambda { groups: &ts, fixed: &fixed };
        let s = 0.8;
        let fac = sys.factor(&lam, s, true).unwrap();

        // Dense W in internal coefficient order: subj (largest), item, fixed.
        let q = sys.q();
        let mut w = DMatrix::zeros(n, q);
        let mut lam_d = DMatrix::zeros(q, q);
        for i in 0..n {
            for j in 0..2 {
                w[(i, gs.index[i] * 2 + j)] = gs.z[(i, j)];
                w[(i, 10 + gi.index[i] * 2 + j)] = gi.z[(i, j)];
                w[(i, 18 + j)] = x[(i, j)];
            }
        }
        for l in 0..ns {
            for a in 0..2 {
                for b in 0..2 {
                    lam_d[(l * 2 + a, l * 2 + b)] = ts[0][a * 2 + b];
                }
            }
        }
        for l in 0..ni {
            for a in 0..2 {
                for b in 0..2 {
                    lam_d[(10 + l * 2 + a, 10 + l * 2 + b)] = ts[1][a * 2 + b];
                }
            }
        }
        lam_d[(18, 18)] = 2.0;
        lam_d[(19, 19)] = 3.0;
        let wl = &w * &lam_d;
        let m = DMatrix::identity(q, q) + wl.tr_mul(&wl) * s;
        assert_relative_eq!(fac.logdet, m.determinant().ln(), epsilon = 1e-9);

        let v: Vec<f64> = (0..q).map(|i| (i as f64 * 0.37).sin()).collect();
        let z = fac.forward(&sys, &v);
        let quad: f64 = z.iter().map(|a| a * a).sum();
        let mi = m.clone().try_inverse().unwrap();
        let vv = nalgebra::DVector::from_vec(v.clone());
        assert_relative_eq!(quad, (vv.transpose() * &mi * &vv)[(0, 0)], epsilon = 1e-9);
        let x_sol = fac.backward(&sys, z);
        let back = &m * nalgebra::DVector::from_vec(x_sol);
        for i in 0..q {
            assert_relative_eq!(back[i], v[i], epsilon = 1e-9);
        }
        let fi = fac.fixed_inverse(&sys);
        assert_relative_eq!(fi[(0, 1)], mi[(18, 19)], epsilon = 1e-9);
        assert_relative_eq!(fi[(1, 1)], mi[(19, 19)], epsilon = 1e-9);

        let lt = sys.lambda_t(&lam, &v);
        let expect = lam_d.transpose() * nalgebra::DVector::from_vec(v);
        for i in 0..q {
            assert_relative_eq!(lt[i], expect[i], epsilon = 1e-12);
        }
        let wty = sys.wty();
        let expect = w.transpose() * nalgebra::DVector::from_vec(y);
        for i in 0..q {
            assert_relative_eq!(wty[i], expect[i], epsilon = 1e-10);
        }
    }
}
