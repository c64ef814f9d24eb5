//! Metrics checked against a naive oracle that works on expanded label
//! lists rather than on matrix margins.

use proptest::prelude::*;
use qualcode_core::metrics::{cohens_kappa, confusion, f1_scores, multiclass_mcc, score, ConfusionMatrix};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Oracle {
    kappa: f64,
    mcc: f64,
    per_class: Vec<f64>,
    micro: f64,
    macro_avg: f64,
    weighted: f64,
}

fn expand(counts: &[Vec<u64>]) -> (Vec<usize>, Vec<usize>) {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            for _ in 0..c {
                truth.push(i);
                pred.push(j);
            }
        }
    }
    (truth, pred)
}

fn oracle(k: usize, truth: &[usize], pred: &[usize]) -> Oracle {
    let n = truth.len() as f64;
    let agree = truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64;
    let p_o = agree / n;
    let mut p_e = 0.0;
    for c in 0..k {
        let t = truth.iter().filter(|&&x| x == c).count() as f64 / n;
        let p = pred.iter().filter(|&&x| x == c).count() as f64 / n;
        p_e += t * p;
    }
    let kappa = if p_e == 1.0 { 1.0 } else { (p_o - p_e) / (1.0 - p_e) };

    // MCC as the correlation of one-hot indicator matrices
    let onehot = |labels: &[usize]| -> Vec<Vec<f64>> {
        labels
            .iter()
            .map(|&l| (0..k).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
            .collect()
    };
    let x = onehot(truth);
    let y = onehot(pred);
    let cov = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        let mut total = 0.0;
        for c in 0..k {
            let ma = a.iter().map(|r| r[c]).sum::<f64>() / n;
            let mb = b.iter().map(|r| r[c]).sum::<f64>() / n;
            total += a.iter().zip(b).map(|(ra, rb)| (ra[c] - ma) * (rb[c] - mb)).sum::<f64>() / n;
        }
        total
    };
    let denom = (cov(&x, &x) * cov(&y, &y)).sqrt();
    let mcc = if denom == 0.0 { 0.0 } else { cov(&x, &y) / denom };

    let mut per_class = Vec::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0.0, 0.0, 0.0);
    let mut weighted = 0.0;
    for c in 0..k {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fneg = 0.0;
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fneg += 1.0,
                _ => {}
            }
        }
        let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let recall = if tp + fneg == 0.0 { 0.0 } else { tp / (tp + fneg) };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        weighted += f1 * (tp + fneg) / n;
        per_class.push(f1);
        tp_all += tp;
        fp_all += fp;
        fn_all += fneg;
    }
    let p_micro = tp_all / (tp_all + fp_all);
    let r_micro = tp_all / (tp_all + fn_all);
    let micro = if p_micro + r_micro == 0.0 {
        0.0
    } else {
        2.0 * p_micro * r_micro / (p_micro + r_micro)
    };
    let macro_avg = per_class.iter().sum::<f64>() / k as f64;
    Oracle {
        kappa,
        mcc,
        per_class,
        micro,
        macro_avg,
        weighted,
    }
}

fn cats(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("c{i}")).collect()
}

fn random_counts(rng: &mut ChaCha8Rng, k: usize) -> Vec<Vec<u64>> {
    loop {
        // sparse matrices exercise the zero-denominator conventions
        let sparsity = rng.random_range(0.0..0.7);
        let counts: Vec<Vec<u64>> = (0..k)
            .map(|_| {
                (0..k)
                    .map(|_| if rng.random_bool(sparsity) { 0 } else { rng.random_range(0..30) })
                    .collect()
            })
            .collect();
        if counts.iter().flatten().sum::<u64>() > 0 {
            return counts;
        }
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

#[test]
fn thousand_random_matrices_match_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let k = rng.random_range(2..=5);
        let counts = random_counts(&mut rng, k);
        let cm = ConfusionMatrix::from_counts(cats(k), counts.clone()).unwrap();
        let (truth, pred) = expand(&counts);
        let o = oracle(k, &truth, &pred);
        let kappa = cohens_kappa(&cm).unwrap();
        let mcc = multiclass_mcc(&cm).unwrap();
        let f1 = f1_scores(&cm).unwrap();
        assert!(close(kappa, o.kappa), "case {case}: kappa {kappa} vs {} for {counts:?}", o.kappa);
        assert!(close(mcc, o.mcc), "case {case}: mcc {mcc} vs {} for {counts:?}", o.mcc);
        assert!(close(f1.micro, o.micro), "case {case}: micro");
        assert!(close(f1.macro_avg, o.macro_avg), "case {case}: macro");
        assert!(close(f1.weighted, o.weighted), "case {case}: weighted");
        for (got, want) in f1.per_class.values().zip(&o.per_class) {
            assert!(close(*got, *want), "case {case}: per-class");
        }
    }
}

#[test]
fn hand_cases() {
    let cm = ConfusionMatrix::from_counts(cats(2), vec![vec![20, 5], vec![10, 15]]).unwrap();
    assert_eq!(cohens_kappa(&cm).unwrap(), 0.4);
    assert!((multiclass_mcc(&cm).unwrap() - 0.4082).abs() < 1e-3);
    assert!((f1_scores(&cm).unwrap().per_class["c0"] - 0.7273).abs() < 1e-4);

    let flat = ConfusionMatrix::from_counts(cats(2), vec![vec![1, 1], vec![1, 1]]).unwrap();
    assert_eq!(cohens_kappa(&flat).unwrap(), 0.0);

    let constant = ConfusionMatrix::from_counts(cats(3), vec![vec![4, 0, 0], vec![3, 0, 0], vec![2, 0, 0]]).unwrap();
    assert_eq!(multiclass_mcc(&constant).unwrap(), 0.0);

    let cm = confusion(&["L", "L", "P"], &["L", "P", "P"], &["L".to_string(), "P".to_string()]).unwrap();
    assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 1]]);
}

#[test]
fn permutation_null_kappa_is_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let categories = cats(4);
    let truth: Vec<String> = (0..2000)
        .map(|_| categories[rng.random_range(0..4)].clone())
        .collect();
    let mut shuffled = truth.clone();
    shuffled.shuffle(&mut rng);
    let report = score(&truth, &shuffled, &categories).unwrap();
    assert!(report.kappa.abs() < 0.1, "{}", report.kappa);
    assert!(report.mcc.abs() < 0.1, "{}", report.mcc);
}

fn matrix(max_k: usize) -> impl Strategy<Value = Vec<Vec<u64>>> {
    (2..=max_k).prop_flat_map(|k| {
        proptest::collection::vec(proptest::collection::vec(0u64..20, k), k)
            .prop_filter("non-empty", |m| m.iter().flatten().sum::<u64>() > 0)
    })
}

proptest! {
    #[test]
    fn metrics_stay_in_range(counts in matrix(5)) {
        let k = counts.len();
        let cm = ConfusionMatrix::from_counts(cats(k), counts).unwrap();
        let kappa = cohens_kappa(&cm).unwrap();
        let mcc = multiclass_mcc(&cm).unwrap();
        let f1 = f1_scores(&cm).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&kappa));
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&mcc));
        for v in [f1.micro, f1.macro_avg, f1.weighted] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn agreement_is_symmetric_in_raters(counts in matrix(5)) {
        let k = counts.len();
        let transposed: Vec<Vec<u64>> = (0..k).map(|j| (0..k).map(|i| counts[i][j]).collect()).collect();
        let a = ConfusionMatrix::from_counts(cats(k), counts).unwrap();
        let b = ConfusionMatrix::from_counts(cats(k), transposed).unwrap();
        prop_assert!(close(cohens_kappa(&a).unwrap(), cohens_kappa(&b).unwrap()));
        prop_assert!(close(multiclass_mcc(&a).unwrap(), multiclass_mcc(&b).unwrap()));
        prop_assert!(close(f1_scores(&a).unwrap().macro_avg, f1_scores(&b).unwrap().macro_avg));
    }

    #[test]
    fn relabeling_categories_changes_nothing(counts in matrix(5), seed in any::<u64>()) {
        let k = counts.len();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<Vec<u64>> = (0..k)
            .map(|i| (0..k).map(|j| counts[perm[i]][perm[j]]).collect())
            .collect();
        let a = ConfusionMatrix::from_counts(cats(k), counts).unwrap();
        let b = ConfusionMatrix::from_counts(cats(k), permuted).unwrap();
        prop_assert!(close(cohens_kappa(&a).unwrap(), cohens_kappa(&b).unwrap()));
        prop_assert!(close(multiclass_mcc(&a).unwrap(), multiclass_mcc(&b).unwrap()));
        prop_assert!(close(f1_scores(&a).unwrap().weighted, f1_scores(&b).unwrap().weighted));
    }

    #[test]
    fn diagonal_matrices_are_perfect(diag in proptest::collection::vec(1u64..50, 2..=5)) {
        let k = diag.len();
        let counts: Vec<Vec<u64>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j { diag[i] } else { 0 }).collect())
            .collect();
        let cm = ConfusionMatrix::from_counts(cats(k), counts).unwrap();
        prop_assert_eq!(cohens_kappa(&cm).unwrap(), 1.0);
        prop_assert!(close(multiclass_mcc(&cm).unwrap(), 1.0));
        let f1 = f1_scores(&cm).unwrap();
        prop_assert_eq!(f1.micro, 1.0);
        prop_assert_eq!(f1.macro_avg, 1.0);
    }
}
