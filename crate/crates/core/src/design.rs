//! Repeated-measures layouts and their numeric design matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub name: String,
    pub levels: Vec<String>,
    #[serde(default = "yes")]
    pub within_subject: bool,
    #[serde(default = "yes")]
    pub within_item: bool,
}

fn yes() -> bool {
    true
}

impl FactorSpec {
    /// Factor with levels named `1..=n`, within subjects and items.
    pub fn numbered(name: &str, n: usize) -> Self {
        Self {
            name: name.to_string(),
            levels: (1..=n).map(|i| i.to_string()).collect(),
            within_subject: true,
            within_item: true,
        }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    fn validate(&self) -> Result<()> {
        if self.levels.len() < 2 {
            return config(format!("factor {} needs at least two levels", self.name));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.levels {
            if !seen.insert(l) {
                return config(format!("factor {} repeats level {l}", self.name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assignment {
    FullCrossing,
    LatinSquare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    pub factors: Vec<FactorSpec>,
    pub n_subj: usize,
    #[serde(default)]
    pub n_item: usize,
    pub n_rep: usize,
    pub assignment: Assignment,
}

impl DesignSpec {
    pub fn n_cells(&self) -> usize {
        self.factors.iter().map(FactorSpec::n_levels).product()
    }

    pub fn expected_rows(&self) -> usize {
        match (self.assignment, self.n_item) {
            (Assignment::FullCrossing, 0) => self.n_subj * self.n_cells() * self.n_rep,
            (Assignment::FullCrossing, k) => self.n_subj * self.n_cells() * k * self.n_rep,
            (Assignment::LatinSquare, k) => self.n_subj * k * self.n_rep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return config("design needs at least one factor");
        }
        for f in &self.factors {
            f.validate()?;
        }
        if self.n_subj == 0 || self.n_rep == 0 {
            return config("n_subj and n_rep must be positive");
        }
        if self.assignment == Assignment::LatinSquare {
            let cells = self.n_cells();
            if self.n_item == 0 || !self.n_item.is_multiple_of(cells) {
                return config(format!(
                    "latin square needs n_item ({}) divisible by the {cells} condition cells",
                    self.n_item
                ));
            }
        }
        Ok(())
    }
}

/// Long-format layout: one row per planned observation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialTable {
    pub factors: Vec<FactorSpec>,
    pub subj: Vec<Option<usize>>,
    pub item: Vec<Option<usize>>,
    pub cell: Vec<usize>,
    pub rep: Vec<usize>,
    pub n_subj: usize,
    pub n_item: usize,
}

impl TrialTable {
    pub fn len(&self) -> usize {
        self.cell.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell.is_empty()
    }

    pub fn n_cells(&self) -> usize {
        self.factors.iter().map(FactorSpec::n_levels).product()
    }

    /// Level index of `factor` in condition cell `cell` (first factor varies slowest).
    pub fn cell_level(&self, cell: usize, factor: usize) -> usize {
        let inner: usize = self.factors[factor + 1..].iter().map(FactorSpec::n_levels).product();
        (cell / inner) % self.factors[factor].n_levels()
    }

    pub fn level(&self, row: usize, factor: usize) -> usize {
        self.cell_level(self.cell[row], factor)
    }
}

pub fn build_trial_table(spec: &DesignSpec) -> Result<TrialTable> {
    spec.validate()?;
    let cells = spec.n_cells();
    let n = spec.expected_rows();
    let mut t = TrialTable {
        factors: spec.factors.clone(),
        subj: Vec::with_capacity(n),
        item: Vec::with_capacity(n),
        cell: Vec::with_capacity(n),
        rep: Vec::with_capacity(n),
        n_subj: spec.n_subj,
        n_item: spec.n_item,
    };
    let mut push = |s: usize, i: Option<usize>, c: usize, r: usize| {
        t.subj.push(Some(s));
        t.item.push(i);
        t.cell.push(c);
        t.rep.push(r);
    };
    match spec.assignment {
        Assignment::FullCrossing => {
            for s in 0..spec.n_subj {
                for c in 0..cells {
                    if spec.n_item == 0 {
                        for r in 0..spec.n_rep {
                            push(s, None, c, r);
                        }
                    } else {
                        for i in 0..spec.n_item {
                            for r in 0..spec.n_rep {
                                push(s, Some(i), c, r);
                            }
                        }
                    }
                }
            }
        }
        Assignment::LatinSquare => {
            let per_group = spec.n_item / cells;
            for s in 0..spec.n_subj {
                for i in 0..spec.n_item {
                    let c = (i / per_group + s) % cells;
                    for r in 0..spec.n_rep {
                        push(s, Some(i), c, r);
                    }
                }
            }
        }
    }
    debug_assert_eq!(t.len(), n);
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastKind {
    HypothesisMatrix,
    Sum,
    TreatmentGrandMean,
    HelmertScaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastScheme {
    pub kind: ContrastKind,
    /// `(α−1) × α` hypothesis weights, one row per contrast.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis_rows: Option<Vec<Vec<f64>>>,
    /// Optional column labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl ContrastScheme {
    pub fn new(kind: ContrastKind) -> Self {
        Self {
            kind,
            hypothesis_rows: None,
            labels: None,
        }
    }

    pub fn hypotheses(rows: Vec<Vec<f64>>) -> Self {
        Self {
            kind: ContrastKind::HypothesisMatrix,
            hypothesis_rows: Some(rows),
            labels: None,
        }
    }

    pub fn with_labels(mut self, labels: &[&str]) -> Self {
        self.labels = Some(labels.iter().map(|s| s.to_string()).collect());
        self
    }
}

/// Orthonormal Helmert basis: `α × (α−1)`, columns orthogonal to the ones
/// vector and spanning the unit-eigenvalue space of `I − J/α`.
pub fn helmert_basis(alpha: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(alpha, alpha - 1);
    for j in 1..alpha {
        let norm = ((j * (j + 1)) as f64).sqrt();
        for i in 0..j {
            q[(i, j - 1)] = 1.0 / norm;
        }
        q[(j, j - 1)] = -(j as f64) / norm;
    }
    q
}

fn augmented_hypothesis(rows: &[Vec<f64>], alpha: usize) -> Result<DMatrix<f64>> {
    if rows.len() != alpha - 1 {
        return invalid(format!(
            "need {} hypothesis rows for {alpha} levels, got {}",
            alpha - 1,
            rows.len()
        ));
    }
    let mut h = DMatrix::zeros(alpha, alpha);
    for j in 0..alpha {
        h[(0, j)] = 1.0 / alpha as f64;
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != alpha {
            return invalid(format!("hypothesis row {i} has {} weights, expected {alpha}", r.len()));
        }
        let s: f64 = r.iter().sum();
        if s.abs() > 1e-12 {
            return invalid(format!("hypothesis row {i} sums to {s}, not 0"));
        }
        for j in 0..alpha {
            h[(i + 1, j)] = r[j];
        }
    }
    Ok(h)
}

/// The `α × (α−1)` contrast matrix for a scheme.
pub fn contrast_matrix(scheme: &ContrastScheme, alpha: usize) -> Result<DMatrix<f64>> {
    if alpha < 2 {
        return invalid("contrast coding needs at least two levels");
    }
    match scheme.kind {
        ContrastKind::Sum => {
            let mut c = DMatrix::zeros(alpha, alpha - 1);
            for j in 0..alpha - 1 {
                c[(j, j)] = 1.0;
                c[(alpha - 1, j)] = -1.0;
            }
            Ok(c)
        }
        ContrastKind::HelmertScaled => Ok(helmert_basis(alpha)),
        ContrastKind::TreatmentGrandMean => {
            let rows = (1..alpha)
                .map(|j| {
                    let mut r = vec![0.0; alpha];
                    r[0] = -1.0;
                    r[j] = 1.0;
                    r
                })
                .collect::<Vec<_>>();
            invert_hypotheses(&rows, alpha)
        }
        ContrastKind::HypothesisMatrix => match &scheme.hypothesis_rows {
            Some(rows) => invert_hypotheses(rows, alpha),
            None => invalid("hypothesis-matrix scheme without hypothesis_rows"),
        },
    }
}

fn invert_hypotheses(rows: &[Vec<f64>], alpha: usize) -> Result<DMatrix<f64>> {
    let h = augmented_hypothesis(rows, alpha)?;
    let lu = h.clone().full_piv_lu();
    let scale = h.amax();
    let min_pivot = (0..alpha).map(|i| lu.u()[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-10 * scale) {
        return Err(Error::RankDeficient("hypothesis matrix is singular".into()));
    }
    let inv = lu.try_inverse().ok_or_else(|| Error::RankDeficient("hypothesis matrix is singular".into()))?;
    Ok(inv.columns(1, alpha - 1).into_owned())
}

/// A named group of fixed-effect columns (a main effect or an interaction).
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub label: String,
    pub factors: Vec<usize>,
    pub columns: Vec<usize>,
}

/// Random-effect block for one grouping factor: a level index per row and the
/// covariate values (a subset of fixed-effect columns) replicated per level.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBlock {
    pub name: String,
    pub n_levels: usize,
    pub index: Vec<usize>,
    /// Fixed-effect column indices replicated in this block.
    pub columns: Vec<usize>,
    /// `n × k` covariates.
    pub z: DMatrix<f64>,
}

impl GroupBlock {
    pub fn new(name: &str, index: Vec<usize>, n_levels: usize, x: &DMatrix<f64>, columns: &[usize]) -> Result<Self> {
        if index.len() != x.nrows() {
            return invalid("group index length does not match design rows");
        }
        if let Some(bad) = index.iter().find(|&&l| l >= n_levels) {
            return invalid(format!("group level {bad} out of range for {name}"));
        }
        if let Some(bad) = columns.iter().find(|&&c| c >= x.ncols()) {
            return invalid(format!("column {bad} out of range for {name}"));
        }
        let z = DMatrix::from_fn(x.nrows(), columns.len(), |i, j| x[(i, columns[j])]);
        Ok(Self {
            name: name.to_string(),
            n_levels,
            index,
            columns: columns.to_vec(),
            z,
        })
    }

    pub fn k(&self) -> usize {
        self.z.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrixBundle {
    /// `n × p` with the intercept in column 0.
    pub x: DMatrix<f64>,
    pub column_names: Vec<String>,
    pub terms: Vec<Term>,
    pub z_subj: Option<GroupBlock>,
    pub z_item: Option<GroupBlock>,
}

impl DesignMatrixBundle {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    pub fn term(&self, label: &str) -> Option<&Term> {
        self.terms.iter().find(|t| t.label == label)
    }
}

/// Which fixed-effect columns each grouping replicates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RandomRequest {
    pub subj: Vec<usize>,
    pub item: Vec<usize>,
}

impl RandomRequest {
    pub fn intercepts() -> Self {
        Self {
            subj: vec![0],
            item: vec![0],
        }
    }

    pub fn all(p: usize) -> Self {
        Self {
            subj: (0..p).collect(),
            item: (0..p).collect(),
        }
    }
}

fn column_labels(factor: &FactorSpec, scheme: &ContrastScheme) -> Result<Vec<String>> {
    let k = factor.n_levels() - 1;
    if let Some(l) = &scheme.labels {
        if l.len() != k {
            return invalid(format!("factor {} needs {k} contrast labels", factor.name));
        }
        return Ok(l.clone());
    }
    Ok(if k == 1 {
        vec![factor.name.clone()]
    } else {
        (1..=k).map(|j| format!("{}{j}", factor.name)).collect()
    })
}

/// Expands a trial table into numeric design matrices. `schemes` is keyed by
/// factor name. Interactions of all orders are products of main-effect columns.
pub fn expand_design(
    trials: &TrialTable,
    schemes: &[(String, ContrastScheme)],
    random: &RandomRequest,
) -> Result<DesignMatrixBundle> {
    for (name, _) in schemes {
        if !trials.factors.iter().any(|f| &f.name == name) {
            return invalid(format!("unknown factor {name}"));
        }
    }
    let n = trials.len();
    let nf = trials.factors.len();
    let mut mains: Vec<(DMatrix<f64>, Vec<String>)> = Vec::with_capacity(nf);
    for f in &trials.factors {
        let scheme = schemes
            .iter()
            .find(|(name, _)| name == &f.name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::InvalidArgument(format!("no contrast scheme for factor {}", f.name)))?;
        mains.push((contrast_matrix(scheme, f.n_levels())?, column_labels(f, scheme)?));
    }

    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let mut names = vec!["(Intercept)".to_string()];
    let mut terms = Vec::new();
    // Subsets of factors in order of size, then lexicographic.
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << nf))
        .map(|mask| (0..nf).filter(|&i| mask & (1 << i) != 0).collect())
        .collect();
    subsets.sort_by(|a: &Vec<usize>, b| a.len().cmp(&b.len()).then(a.cmp(b)));
    for subset in subsets {
        let mut combos: Vec<(Vec<f64>, String)> = vec![(vec![1.0; n], String::new())];
        for &f in &subset {
            let (c, labels) = &mains[f];
            let mut next = Vec::new();
            for (vals, label) in &combos {
                for j in 0..c.ncols() {
                    let col: Vec<f64> = (0..n).map(|r| vals[r] * c[(trials.level(r, f), j)]).collect();
                    let l = if label.is_empty() {
                        labels[j].clone()
                    } else {
                        format!("{label}:{}", labels[j])
                    };
                    next.push((col, l));
                }
            }
            combos = next;
        }
        let start = cols.len();
        for (c, l) in combos {
            cols.push(c);
            names.push(l);
        }
        let label = subset
            .iter()
            .map(|&f| trials.factors[f].name.as_str())
            .collect::<Vec<_>>()
            .join(":");
        terms.push(Term {
            label,
            factors: subset,
            columns: (start..cols.len()).collect(),
        });
    }
    let p = cols.len();
    let x = DMatrix::from_fn(n, p, |i, j| cols[j][i]);

    let grouping = |name: &str, idx: &[Option<usize>], levels: usize, req: &[usize]| -> Result<Option<GroupBlock>> {
        if req.is_empty() || idx.iter().any(Option::is_none) || levels == 0 {
            return Ok(None);
        }
        let index: Vec<usize> = idx.iter().map(|v| v.unwrap()).collect();
        GroupBlock::new(name, index, levels, &x, req).map(Some)
    };
    let z_subj = grouping("subj", &trials.subj, trials.n_subj, &random.subj)?;
    let z_item = grouping("item", &trials.item, trials.n_item, &random.item)?;
    Ok(DesignMatrixBundle {
        x,
        column_names: names,
        terms,
        z_subj,
        z_item,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(levels: &[usize], n_subj: usize, n_item: usize, n_rep: usize, a: Assignment) -> DesignSpec {
        DesignSpec {
            factors: levels
                .iter()
                .enumerate()
                .map(|(i, &l)| FactorSpec::numbered(&format!("F{i}"), l))
                .collect(),
            n_subj,
            n_item,
            n_rep,
            assignment: a,
        }
    }

    #[test]
    fn row_counts() {
        let t = build_trial_table(&spec(&[3], 20, 0, 10, Assignment::FullCrossing)).unwrap();
        assert_eq!(t.len(), 600);
        let t = build_trial_table(&spec(&[2], 42, 16, 1, Assignment::LatinSquare)).unwrap();
        assert_eq!(t.len(), 672);
        let t = build_trial_table(&spec(&[2], 1, 0, 1, Assignment::FullCrossing)).unwrap();
        assert_eq!(t.cell, vec![0, 1]);
    }

    #[test]
    fn latin_square_rejects_indivisible_items() {
        let r = build_trial_table(&spec(&[3], 6, 10, 1, Assignment::LatinSquare));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn sum_and_helmert_two_levels() {
        let c = contrast_matrix(&ContrastScheme::new(ContrastKind::Sum), 2).unwrap();
        assert_eq!(c.as_slice(), &[1.0, -1.0]);
        let h = contrast_matrix(&ContrastScheme::new(ContrastKind::HelmertScaled), 2).unwrap();
        assert_relative_eq!(h[(0, 0)], 0.5f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(h[(1, 0)], -(0.5f64.sqrt()), epsilon = 1e-15);
    }

    #[test]
    fn plus_minus_half_from_hypothesis() {
        let c = contrast_matrix(&ContrastScheme::hypotheses(vec![vec![1.0, -1.0]]), 2).unwrap();
        assert_relative_eq!(c[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(c[(1, 0)], -0.5, epsilon = 1e-14);
    }

    #[test]
    fn singular_hypotheses_rejected() {
        let s = ContrastScheme::hypotheses(vec![vec![1.0, -1.0, 0.0], vec![2.0, -2.0, 0.0]]);
        assert!(matches!(contrast_matrix(&s, 3), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn two_by_two_interaction_column() {
        let t = build_trial_table(&spec(&[2, 2], 2, 0, 1, Assignment::FullCrossing)).unwrap();
        let half = ContrastScheme::hypotheses(vec![vec![1.0, -1.0]]);
        let b = expand_design(
            &t,
            &[("F0".into(), half.clone()), ("F1".into(), half)],
            &RandomRequest::intercepts(),
        )
        .unwrap();
        assert_eq!(b.column_names, vec!["(Intercept)", "F0", "F1", "F0:F1"]);
        for r in 0..t.len() {
            assert_relative_eq!(b.x[(r, 3)].abs(), 0.25);
            assert_relative_eq!(b.x[(r, 3)], b.x[(r, 1)] * b.x[(r, 2)]);
        }
        assert_eq!(b.terms.len(), 3);
        let zs = b.z_subj.unwrap();
        assert_eq!(zs.k(), 1);
        assert!(zs.z.iter().all(|&v| v == 1.0));
        assert!(b.z_item.is_none());
    }

    #[test]
    fn unknown_factor_is_an_error() {
        let t = build_trial_table(&spec(&[2], 2, 0, 1, Assignment::FullCrossing)).unwrap();
        let r = expand_design(
            &t,
            &[("nope".into(), ContrastScheme::new(ContrastKind::Sum))],
            &RandomRequest::default(),
        );
        assert!(r.is_err());
    }
}
