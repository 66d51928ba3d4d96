use calibra_core::{build_trial_table, contrast_matrix, expand_design, Assignment, ContrastKind, ContrastScheme, DesignSpec, FactorSpec, RandomRequest};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn augmented(rows: &[Vec<f64>], alpha: usize) -> DMatrix<f64> {
    let mut h = DMatrix::from_element(alpha, alpha, 1.0 / alpha as f64);
    for (i, r) in rows.iter().enumerate() {
        for j in 0..alpha {
            h[(i + 1, j)] = r[j];
        }
    }
    h
}

fn with_ones(c: &DMatrix<f64>) -> DMatrix<f64> {
    let alpha = c.nrows();
    DMatrix::from_fn(alpha, alpha, |i, j| if j == 0 { 1.0 } else { c[(i, j - 1)] })
}

fn hypothesis_rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..=6).prop_flat_map(|alpha| {
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, alpha), alpha - 1).prop_map(|rows| {
            rows.into_iter()
                .map(|r| {
                    let m = r.iter().sum::<f64>() / r.len() as f64;
                    r.into_iter().map(|v| v - m).collect()
                })
                .collect()
        })
    })
}

proptest! {
    #[test]
    fn contrasts_are_the_pseudoinverse_of_hypotheses(rows in hypothesis_rows()) {
        let alpha = rows[0].len();
        let h = augmented(&rows, alpha);
        let sv = h.clone().svd(false, false).singular_values;
        prop_assume!(sv.min() > 1e-3 * sv.max());
        let c = contrast_matrix(&ContrastScheme::hypotheses(rows), alpha).unwrap();
        let pinv = h.pseudo_inverse(1e-14).unwrap();
        prop_assert!((with_ones(&c) - pinv).amax() < 1e-10);
    }

    #[test]
    fn latin_square_is_balanced(cells in 2usize..=4, groups in 1usize..=3, subj_mult in 1usize..=3, n_rep in 1usize..=2) {
        let spec = DesignSpec {
            factors: vec![FactorSpec::numbered("a", cells)],
            n_subj: cells * subj_mult,
            n_item: cells * groups,
            n_rep,
            assignment: Assignment::LatinSquare,
        };
        let t = build_trial_table(&spec).unwrap();
        prop_assert_eq!(t.len(), spec.expected_rows());
        let mut by_subj = vec![vec![0usize; cells]; spec.n_subj];
        let mut by_item = vec![vec![0usize; cells]; spec.n_item];
        for r in 0..t.len() {
            by_subj[t.subj[r].unwrap()][t.cell[r]] += 1;
            by_item[t.item[r].unwrap()][t.cell[r]] += 1;
        }
        prop_assert!(by_subj.iter().flatten().all(|&n| n == groups * n_rep));
        prop_assert!(by_item.iter().flatten().all(|&n| n == subj_mult * n_rep));
    }

    #[test]
    fn full_crossing_row_count(levels in prop::collection::vec(2usize..=4, 1..=2), n_subj in 1usize..=6, n_item in 0usize..=3, n_rep in 1usize..=3) {
        let spec = DesignSpec {
            factors: levels.iter().enumerate().map(|(i, &l)| FactorSpec::numbered(&format!("f{i}"), l)).collect(),
            n_subj,
            n_item,
            n_rep,
            assignment: Assignment::FullCrossing,
        };
        let t = build_trial_table(&spec).unwrap();
        let cells: usize = levels.iter().product();
        prop_assert_eq!(t.len(), n_subj * cells * n_item.max(1) * n_rep);
    }

    #[test]
    fn expansion_is_deterministic_and_full_rank(levels in prop::collection::vec(2usize..=3, 1..=2), kind_ix in 0usize..3) {
        let kind = [ContrastKind::Sum, ContrastKind::HelmertScaled, ContrastKind::TreatmentGrandMean][kind_ix];
        let spec = DesignSpec {
            factors: levels.iter().enumerate().map(|(i, &l)| FactorSpec::numbered(&format!("f{i}"), l)).collect(),
            n_subj: 3,
            n_item: 0,
            n_rep: 2,
            assignment: Assignment::FullCrossing,
        };
        let t = build_trial_table(&spec).unwrap();
        let schemes: Vec<(String, ContrastScheme)> = spec.factors.iter().map(|f| (f.name.clone(), ContrastScheme::new(kind))).collect();
        let a = expand_design(&t, &schemes, &RandomRequest::all(1)).unwrap();
        let b = expand_design(&t, &schemes, &RandomRequest::all(1)).unwrap();
        prop_assert_eq!(&a.x, &b.x);
        let cells: usize = levels.iter().product();
        prop_assert_eq!(a.x.ncols(), cells);
        let sv = a.x.clone().svd(false, false).singular_values;
        prop_assert!(sv.min() > 1e-8 * sv.max());
        let z = a.z_subj.unwrap();
        prop_assert!(z.index.iter().all(|&g| g < spec.n_subj));
    }
}

#[test]
fn treatment_grand_mean_intercept_is_the_grand_mean() {
    for alpha in 2..=5 {
        let c = contrast_matrix(&ContrastScheme::new(ContrastKind::TreatmentGrandMean), alpha).unwrap();
        let x = with_ones(&c);
        let mu = nalgebra::DVector::from_fn(alpha, |i, _| (i as f64 + 1.0).powi(2));
        let beta = x.clone().lu().solve(&mu).unwrap();
        assert!((beta[0] - mu.mean()).abs() < 1e-12);
        for j in 1..alpha {
            assert!((beta[j] - (mu[j] - mu[0])).abs() < 1e-12);
        }
    }
}
