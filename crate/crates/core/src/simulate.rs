//! Response simulation from an LMM, exact fixed effects, and aggregation.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::{DesignMatrixBundle, FactorSpec, GroupBlock, TrialTable};
use crate::error::{invalid, Error, Result};
use crate::linalg::ols;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Normal,
    Lognormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    None,
    BySubject,
    ByItem,
}

/// One concrete parameter set. SD vectors match the random columns of each
/// grouping; correlation matrices have the same dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmParams {
    pub beta: Vec<f64>,
    pub sd_subj: Vec<f64>,
    pub sd_item: Vec<f64>,
    pub rho_subj: DMatrix<f64>,
    pub rho_item: DMatrix<f64>,
    pub sigma: f64,
    pub family: Family,
}

impl LmmParams {
    pub fn validate(&self) -> Result<()> {
        if self.sd_subj.iter().chain(&self.sd_item).any(|&s| !(s >= 0.0)) {
            return invalid("random-effect SDs must be non-negative");
        }
        if !(self.sigma > 0.0) {
            return invalid("residual SD must be positive");
        }
        for (r, k, name) in [
            (&self.rho_subj, self.sd_subj.len(), "subj"),
            (&self.rho_item, self.sd_item.len(), "item"),
        ] {
            if r.nrows() != k || r.ncols() != k {
                return invalid(format!("{name} correlation matrix is not {k}×{k}"));
            }
            if k > 0 && r.clone().cholesky().is_none() {
                return Err(Error::NotPositiveDefinite(format!("{name} correlation matrix")));
            }
        }
        Ok(())
    }

    /// Stable textual digest of the draw.
    pub fn digest(&self) -> String {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6e}")).collect::<Vec<_>>().join(";");
        let corr = |r: &DMatrix<f64>| {
            let mut out = Vec::new();
            for i in 0..r.nrows() {
                for j in 0..i {
                    out.push(r[(i, j)]);
                }
            }
            fmt(&out)
        };
        format!(
            "b=[{}] ss=[{}] si=[{}] rs=[{}] ri=[{}] s={:.6e}",
            fmt(&self.beta),
            fmt(&self.sd_subj),
            fmt(&self.sd_item),
            corr(&self.rho_subj),
            corr(&self.rho_item),
            self.sigma
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trials: TrialTable,
    /// Responses on the observation scale.
    pub y: Vec<f64>,
    pub family: Family,
    pub aggregation: Aggregation,
}

impl Dataset {
    /// Responses on the scale where the model is Gaussian.
    pub fn latent(&self) -> Vec<f64> {
        match self.family {
            Family::Normal => self.y.clone(),
            Family::Lognormal => self.y.iter().map(|v| v.ln()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

fn draw_effects<R: Rng + ?Sized>(block: &GroupBlock, sd: &[f64], rho: &DMatrix<f64>, rng: &mut R) -> Result<Vec<f64>> {
    let k = block.k();
    if sd.len() != k {
        return invalid(format!("{} has {k} random columns but {} SDs", block.name, sd.len()));
    }
    let l = rho
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{} correlation", block.name)))?
        .l();
    let mut b = vec![0.0; block.n_levels * k];
    for lvl in 0..block.n_levels {
        let z: DVector<f64> = DVector::from_fn(k, |_, _| rng.sample(StandardNormal));
        let u = &l * z;
        for j in 0..k {
            b[lvl * k + j] = sd[j] * u[j];
        }
    }
    Ok(b)
}

fn add_effects(y: &mut [f64], block: &GroupBlock, b: &[f64]) {
    let k = block.k();
    for (i, yi) in y.iter_mut().enumerate() {
        let lvl = block.index[i];
        for j in 0..k {
            *yi += block.z[(i, j)] * b[lvl * k + j];
        }
    }
}

/// Simulates one dataset. Random effects for a grouping are drawn only if the
/// design carries a block for it; SD vectors must then match its width.
pub fn simulate<R: Rng + ?Sized>(
    trials: &TrialTable,
    design: &DesignMatrixBundle,
    params: &LmmParams,
    empirical: bool,
    rng: &mut R,
) -> Result<Dataset> {
    params.validate()?;
    if params.beta.len() != design.p() {
        return invalid(format!("{} coefficients for {} design columns", params.beta.len(), design.p()));
    }
    if trials.len() != design.n() {
        return invalid("trial table and design disagree on row count");
    }
    let beta = DVector::from_column_slice(&params.beta);
    let mut y: Vec<f64> = (&design.x * &beta).iter().copied().collect();
    let mut noise = vec![0.0; y.len()];
    if let Some(zs) = &design.z_subj {
        let b = draw_effects(zs, &params.sd_subj, &params.rho_subj, rng)?;
        add_effects(&mut noise, zs, &b);
    }
    if let Some(zi) = &design.z_item {
        let b = draw_effects(zi, &params.sd_item, &params.rho_item, rng)?;
        add_effects(&mut noise, zi, &b);
    }
    for (v, yi) in noise.iter_mut().zip(y.iter_mut()) {
        let e: f64 = rng.sample(StandardNormal);
        *yi += *v + params.sigma * e;
    }
    if empirical {
        y = enforce_empirical(&y, &design.x, &params.beta)?;
    }
    if params.family == Family::Lognormal {
        y.iter_mut().for_each(|v| *v = v.exp());
    }
    Ok(Dataset {
        trials: trials.clone(),
        y,
        family: params.family,
        aggregation: Aggregation::None,
    })
}

/// Shifts `y` along the column space of `X` so that OLS returns `beta_true`.
pub fn enforce_empirical(y: &[f64], x: &DMatrix<f64>, beta_true: &[f64]) -> Result<Vec<f64>> {
    let bhat = ols(x, y)?;
    let delta: Vec<f64> = beta_true.iter().zip(&bhat).map(|(t, h)| t - h).collect();
    let shift = x * DVector::from_vec(delta);
    Ok(y.iter().zip(shift.iter()).map(|(a, b)| a + b).collect())
}

/// Averages raw-scale responses per group and condition cell.
pub fn aggregate(data: &Dataset, by: Aggregation) -> Result<Dataset> {
    if data.aggregation != Aggregation::None {
        return invalid("dataset is already aggregated");
    }
    let t = &data.trials;
    let (keys, n_groups): (&[Option<usize>], usize) = match by {
        Aggregation::BySubject => (&t.subj, t.n_subj),
        Aggregation::ByItem => (&t.item, t.n_item),
        Aggregation::None => return Ok(data.clone()),
    };
    let mut sums: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for (i, key) in keys.iter().enumerate() {
        let g = key.ok_or_else(|| Error::InvalidArgument("row without a grouping level".into()))?;
        let e = sums.entry((g, t.cell[i])).or_insert((0.0, 0));
        e.0 += data.y[i];
        e.1 += 1;
    }
    let cells = t.n_cells();
    let mut out = TrialTable {
        factors: t.factors.clone(),
        subj: Vec::new(),
        item: Vec::new(),
        cell: Vec::new(),
        rep: Vec::new(),
        n_subj: 0,
        n_item: 0,
    };
    let mut y = Vec::with_capacity(n_groups * cells);
    for g in 0..n_groups {
        for c in 0..cells {
            let (s, n) = sums
                .get(&(g, c))
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("group {g} has no observations in cell {c}")))?;
            y.push(s / n as f64);
            match by {
                Aggregation::BySubject => {
                    out.subj.push(Some(g));
                    out.item.push(None);
                }
                _ => {
                    out.subj.push(None);
                    out.item.push(Some(g));
                }
            }
            out.cell.push(c);
            out.rep.push(0);
        }
    }
    match by {
        Aggregation::BySubject => out.n_subj = n_groups,
        _ => out.n_item = n_groups,
    }
    Ok(Dataset {
        trials: out,
        y,
        family: data.family,
        aggregation: by,
    })
}

/// Writes `subj,item,<factor...>,y`; groups are 1-based, blank when absent.
pub fn write_csv<W: Write>(data: &Dataset, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["subj".to_string(), "item".to_string()];
    header.extend(data.trials.factors.iter().map(|f| f.name.clone()));
    header.push("y".into());
    wr.write_record(&header)?;
    let t = &data.trials;
    let opt = |v: Option<usize>| v.map(|x| (x + 1).to_string()).unwrap_or_default();
    for i in 0..t.len() {
        let mut rec = vec![opt(t.subj[i]), opt(t.item[i])];
        for (fi, f) in t.factors.iter().enumerate() {
            rec.push(f.levels[t.level(i, fi)].clone());
        }
        rec.push(format!("{}", data.y[i]));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R, factors: &[FactorSpec], family: Family) -> Result<Dataset> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing column {name}")))
    };
    let (cs, ci, cy) = (col("subj")?, col("item")?, col("y")?);
    let fcols = factors.iter().map(|f| col(&f.name)).collect::<Result<Vec<_>>>()?;
    let mut t = TrialTable {
        factors: factors.to_vec(),
        subj: vec![],
        item: vec![],
        cell: vec![],
        rep: vec![],
        n_subj: 0,
        n_item: 0,
    };
    let mut y = Vec::new();
    let mut counts: BTreeMap<(Option<usize>, Option<usize>, usize), usize> = BTreeMap::new();
    let parse_group = |s: &str| -> Result<Option<usize>> {
        if s.is_empty() {
            return Ok(None);
        }
        let v: usize = s.parse().map_err(|_| Error::InvalidArgument(format!("bad group id {s}")))?;
        if v == 0 {
            return invalid("group ids are 1-based");
        }
        Ok(Some(v - 1))
    };
    for rec in rd.records() {
        let rec = rec?;
        let s = parse_group(&rec[cs])?;
        let i = parse_group(&rec[ci])?;
        let mut cell = 0;
        for (f, &c) in factors.iter().zip(&fcols) {
            let lvl = f
                .levels
                .iter()
                .position(|l| l == &rec[c])
                .ok_or_else(|| Error::InvalidArgument(format!("unknown level {} of {}", &rec[c], f.name)))?;
            cell = cell * f.n_levels() + lvl;
        }
        let v: f64 = rec[cy]
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad response {}", &rec[cy])))?;
        let k = counts.entry((s, i, cell)).or_insert(0);
        t.rep.push(*k);
        *k += 1;
        t.n_subj = t.n_subj.max(s.map_or(0, |v| v + 1));
        t.n_item = t.n_item.max(i.map_or(0, |v| v + 1));
        t.subj.push(s);
        t.item.push(i);
        t.cell.push(cell);
        y.push(v);
    }
    let aggregation = if t.subj.iter().all(Option::is_none) {
        Aggregation::ByItem
    } else if t.item.iter().all(Option::is_none) && counts.values().all(|&c| c == 1) {
        Aggregation::BySubject
    } else {
        Aggregation::None
    };
    Ok(Dataset {
        trials: t,
        y,
        family,
        aggregation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_factor(n_subj: usize, n_rep: usize) -> (TrialTable, DesignMatrixBundle) {
        let spec = DesignSpec {
            factors: vec![FactorSpec::numbered("X", 3)],
            n_subj,
            n_item: 0,
            n_rep,
            assignment: Assignment::FullCrossing,
        };
        let t = build_trial_table(&spec).unwrap();
        let b = expand_design(
            &t,
            &[("X".into(), ContrastScheme::new(ContrastKind::TreatmentGrandMean))],
            &RandomRequest { subj: vec![0, 1, 2], item: vec![] },
        )
        .unwrap();
        (t, b)
    }

    fn params(sd: [f64; 3], sigma: f64) -> LmmParams {
        LmmParams {
            beta: vec![200.0, 20.0, 20.0],
            sd_subj: sd.to_vec(),
            sd_item: vec![],
            rho_subj: DMatrix::identity(3, 3),
            rho_item: DMatrix::zeros(0, 0),
            sigma,
            family: Family::Normal,
        }
    }

    #[test]
    fn empirical_mode_is_exact() {
        let (t, b) = one_factor(20, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = simulate(&t, &b, &params([20.0, 90.0, 10.0], 50.0), true, &mut rng).unwrap();
        let bh = ols(&b.x, &d.y).unwrap();
        for (a, e) in bh.iter().zip([200.0, 20.0, 20.0]) {
            assert!((a - e).abs() < 1e-8);
        }
    }

    #[test]
    fn noise_free_limit() {
        let (t, b) = one_factor(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = simulate(&t, &b, &params([0.0; 3], 1e-12), false, &mut rng).unwrap();
        let xb = &b.x * DVector::from_vec(vec![200.0, 20.0, 20.0]);
        for (a, e) in d.y.iter().zip(xb.iter()) {
            assert_relative_eq!(*a, *e, epsilon = 1e-9);
        }
    }

    #[test]
    fn aggregation_counts_and_identity() {
        let (t, b) = one_factor(20, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = simulate(&t, &b, &params([20.0, 90.0, 10.0], 50.0), false, &mut rng).unwrap();
        let a = aggregate(&d, Aggregation::BySubject).unwrap();
        assert_eq!(a.len(), 60);
        let (t1, b1) = one_factor(4, 1);
        let d1 = simulate(&t1, &b1, &params([1.0; 3], 1.0), false, &mut rng).unwrap();
        let a1 = aggregate(&d1, Aggregation::BySubject).unwrap();
        assert_eq!(a1.y, d1.y);
    }

    #[test]
    fn lognormal_averages_before_log() {
        let factors = vec![FactorSpec::numbered("X", 2)];
        let t = TrialTable {
            factors,
            subj: vec![Some(0); 4],
            item: vec![None; 4],
            cell: vec![0, 0, 1, 1],
            rep: vec![0, 1, 0, 1],
            n_subj: 1,
            n_item: 0,
        };
        let d = Dataset {
            trials: t,
            y: vec![1.0, 100.0, 10.0, 10.0],
            family: Family::Lognormal,
            aggregation: Aggregation::None,
        };
        let a = aggregate(&d, Aggregation::BySubject).unwrap();
        assert_relative_eq!(a.latent()[0], (50.5f64).ln());
        assert!((a.latent()[0] - 0.5 * 100f64.ln()).abs() > 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let (t, b) = one_factor(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = simulate(&t, &b, &params([1.0; 3], 1.0), false, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let back = read_csv(&buf[..], &t.factors, Family::Normal).unwrap();
        assert_eq!(back.trials.cell, d.trials.cell);
        assert_eq!(back.trials.subj, d.trials.subj);
        assert_eq!(back.trials.rep, d.trials.rep);
        for (a, e) in back.y.iter().zip(&d.y) {
            assert_eq!(a, e);
        }
    }
}
