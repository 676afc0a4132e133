//! Anchor-feature detection from the feature covariance matrix, and checks of
//! the factor-covariance assumptions that make anchors identifiable.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Default relative tolerance of the mutual near-maximum rule.
pub const DEFAULT_DELTA: f64 = 0.1;

/// Empirical covariance of the rows of `x` (divisor `N - 1`).
pub fn empirical_cov(x: &Array2<f64>) -> Result<Array2<f64>> {
    let n = x.nrows();
    if n < 2 {
        return shape_err(format!("covariance needs at least 2 rows, got {n}"));
    }
    let mean = x.mean_axis(Axis(0)).unwrap();
    let centered = x - &mean;
    let mut cov = centered.t().dot(&centered) / (n - 1) as f64;
    // Exact symmetry regardless of summation order.
    let g = cov.nrows();
    for i in 0..g {
        for j in 0..i {
            let v = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    Ok(cov)
}

/// What the pairwise dominance comparisons are made on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairScale {
    /// Absolute covariances.
    #[default]
    Covariance,
    /// Absolute correlations, which makes the result invariant to rescaling features.
    Correlation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorReport {
    /// Feature indices of each detected group, sorted, groups ordered by first member.
    pub groups: Vec<Vec<usize>>,
    /// Per group: set when the group has more than two members. Such a group
    /// cannot be told apart from anchors of distinct factors whose covariance
    /// equals their variance.
    pub ambiguous: Vec<bool>,
    /// Scores compared by the rule, diagonal zeroed.
    #[serde(with = "crate::nd::serde_arrays::matrix")]
    pub pair_scores: Array2<f64>,
    pub tolerance: f64,
    pub scale: PairScale,
}

impl AnchorReport {
    pub fn any_ambiguous(&self) -> bool {
        self.ambiguous.iter().any(|a| *a)
    }
}

fn check_square_symmetric(m: &Array2<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return shape_err(format!("{what} must be square, got {:?}", m.dim()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{what} has non-finite entries")));
    }
    let scale = m.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[[i, j]] - m[[j, i]]).abs() > 1e-9 * scale {
                return Err(Error::Domain(format!("{what} is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Groups of features that are each other's near-largest off-diagonal partner.
///
/// `(j, l)` is a candidate pair when its score is within `delta` (relative) of
/// both the largest score of `j` and the largest score of `l`. Groups are the
/// connected components of candidate pairs with at least two members.
pub fn detect_anchors(cov: &Array2<f64>, delta: f64) -> Result<AnchorReport> {
    detect_anchors_scaled(cov, delta, PairScale::Covariance)
}

pub fn detect_anchors_scaled(cov: &Array2<f64>, delta: f64, scale: PairScale) -> Result<AnchorReport> {
    check_square_symmetric(cov, "covariance")?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("tolerance must lie in (0, 1), got {delta}")));
    }
    let g = cov.nrows();
    let mut scores = cov.mapv(f64::abs);
    if scale == PairScale::Correlation {
        let sd: Vec<f64> = (0..g).map(|j| cov[[j, j]].max(0.0).sqrt()).collect();
        for i in 0..g {
            for j in 0..g {
                scores[[i, j]] = if sd[i] > 0.0 && sd[j] > 0.0 { scores[[i, j]] / (sd[i] * sd[j]) } else { 0.0 };
            }
        }
    }
    for j in 0..g {
        scores[[j, j]] = 0.0;
    }
    let peak = scores.iter().cloned().fold(0.0, f64::max);
    let best: Vec<f64> = scores.rows().into_iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).collect();
    // Scores this small relative to the largest are treated as exact zeros.
    let floor = 1e-12 * peak;

    let mut parent: Vec<usize> = (0..g).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut in_pair = vec![false; g];
    for j in 0..g {
        for l in (j + 1)..g {
            let s = scores[[j, l]];
            if s > floor && s >= (1.0 - delta) * best[j] && s >= (1.0 - delta) * best[l] {
                in_pair[j] = true;
                in_pair[l] = true;
                let (a, b) = (root(&mut parent, j), root(&mut parent, l));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of_root = vec![usize::MAX; g];
    for j in 0..g {
        if !in_pair[j] {
            continue;
        }
        let r = root(&mut parent, j);
        if group_of_root[r] == usize::MAX {
            group_of_root[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[group_of_root[r]].push(j);
    }
    let ambiguous = groups.iter().map(|grp| grp.len() > 2).collect();
    Ok(AnchorReport {
        groups,
        ambiguous,
        pair_scores: scores,
        tolerance: delta,
        scale,
    })
}

/// Variance-dominance check for one pair of factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    pub first: usize,
    pub second: usize,
    /// `min(C_kk, C_ll) - |C_kl|`.
    pub margin: f64,
    pub holds: bool,
}

/// Anchor-dominance check on labeled data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceCheck {
    /// Smallest `|cov(anchor, co-anchor)| - |cov(anchor, non-anchor)|` over all
    /// anchors and non-anchors.
    pub min_margin: f64,
    pub holds: bool,
    /// `(anchor, non-anchor)` pairs where the non-anchor wins.
    pub violations: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub pairs: Vec<PairCheck>,
    pub variance_dominance_holds: bool,
    pub anchor_dominance: Option<DominanceCheck>,
}

/// Checks a factor covariance `c`, and optionally labeled data `x` whose
/// `anchor_of[j]` names the factor feature `j` anchors (`None` for other features).
pub fn check_assumptions(c: &Array2<f64>, labeled: Option<(&Array2<f64>, &[Option<usize>])>) -> Result<AssumptionReport> {
    check_square_symmetric(c, "factor covariance")?;
    let k = c.nrows();
    let mut pairs = Vec::new();
    for a in 0..k {
        for b in (a + 1)..k {
            let margin = c[[a, a]].min(c[[b, b]]) - c[[a, b]].abs();
            pairs.push(PairCheck {
                first: a,
                second: b,
                margin,
                holds: margin > 0.0,
            });
        }
    }
    let variance_dominance_holds = pairs.iter().all(|p| p.holds);
    let anchor_dominance = match labeled {
        None => None,
        Some((x, anchor_of)) => {
            if anchor_of.len() != x.ncols() {
                return shape_err("one anchor label per feature is required");
            }
            let cov = empirical_cov(x)?;
            let g = x.ncols();
            let mut min_margin = f64::INFINITY;
            let mut violations = Vec::new();
            for j in 0..g {
                let Some(f) = anchor_of[j] else { continue };
                let co: Vec<usize> = (0..g).filter(|l| *l != j && anchor_of[*l] == Some(f)).collect();
                if co.is_empty() {
                    return Err(Error::Config(format!("factor {f} has a single anchor (feature {j})")));
                }
                let own = co.iter().map(|l| cov[[j, *l]].abs()).fold(f64::INFINITY, f64::min);
                for m in (0..g).filter(|m| anchor_of[*m].is_none()) {
                    let margin = own - cov[[j, m]].abs();
                    min_margin = min_margin.min(margin);
                    if margin < 0.0 {
                        violations.push((j, m));
                    }
                }
            }
            Some(DominanceCheck {
                min_margin,
                holds: violations.is_empty(),
                violations,
            })
        }
    };
    Ok(AssumptionReport {
        pairs,
        variance_dominance_holds,
        anchor_dominance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_correlated_factors;
    use crate::nd::rng::normal_matrix;
    use crate::nd::{stream, Stream};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn cov_of_constant_and_duplicate_columns() {
        let x = Array2::from_elem((5, 3), 2.5);
        assert_eq!(empirical_cov(&x).unwrap(), Array2::<f64>::zeros((3, 3)));
        let mut rng = stream(1, Stream::Data);
        let z = normal_matrix(&mut rng, 100, 1);
        let mut x = Array2::zeros((100, 2));
        x.column_mut(0).assign(&z.column(0));
        x.column_mut(1).assign(&z.column(0));
        let c = empirical_cov(&x).unwrap();
        assert_eq!(c[[0, 0]], c[[0, 1]]);
        assert_eq!(c[[1, 1]], c[[1, 0]]);
        assert!(empirical_cov(&Array2::zeros((1, 3))).is_err());
    }

    #[test]
    fn cov_converges() {
        let mut rng = stream(2, Stream::Data);
        let z = gen_correlated_factors(100_000, 3, 0.4, &mut rng).unwrap();
        let c = empirical_cov(&z).unwrap();
        let truth = crate::datagen::factor_covariance(3, 0.4);
        let tol = 5.0 / (100_000f64).sqrt();
        assert!((&c - &truth).iter().all(|d| d.abs() < tol));
        let eig_floor = crate::nd::cholesky(&(&c + &(Array2::<f64>::eye(3) * 1e-10)));
        assert!(eig_floor.is_ok());
    }

    #[test]
    fn independent_and_zero_give_nothing() {
        let r = detect_anchors(&(Array2::<f64>::eye(6) * 2.0), 0.1).unwrap();
        assert!(r.groups.is_empty());
        let r = detect_anchors(&Array2::<f64>::zeros((4, 4)), 0.1).unwrap();
        assert!(r.groups.is_empty());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(detect_anchors(&array![[1.0, 0.5], [0.2, 1.0]], 0.1).is_err());
        assert!(detect_anchors(&Array2::<f64>::eye(2), 0.0).is_err());
        assert!(detect_anchors(&Array2::<f64>::zeros((2, 3)), 0.1).is_err());
    }

    #[test]
    fn exact_two_factor_structure() {
        // x1 = x2 = z1, x4 = x5 = z2, fillers mixing both; rho = 0.3, unit noise.
        let load = array![[1.0, 0.0], [1.0, 0.0], [0.6, 0.3], [0.0, 1.0], [0.0, 1.0], [0.3, 0.6]];
        let c = crate::datagen::factor_covariance(2, 0.3);
        let cov = load.dot(&c).dot(&load.t()) + Array2::<f64>::eye(6);
        let r = detect_anchors(&cov, 0.1).unwrap();
        assert_eq!(r.groups, vec![vec![0, 1], vec![3, 4]]);
        assert!(!r.any_ambiguous());
    }

    #[test]
    fn scaling_a_factor_needs_correlation_scores() {
        // The z1 anchors measured in units ten times smaller.
        let load = array![[1.0, 0.0], [1.0, 0.0], [0.6, 0.3], [0.0, 1.0], [0.0, 1.0], [0.3, 0.6]];
        let c = crate::datagen::factor_covariance(2, 0.3);
        let base = load.dot(&c).dot(&load.t()) + Array2::<f64>::eye(6);
        let d = [10.0, 10.0, 1.0, 1.0, 1.0, 1.0];
        let cov = Array2::from_shape_fn((6, 6), |(i, j)| d[i] * d[j] * base[[i, j]]);
        let r = detect_anchors_scaled(&cov, 0.1, PairScale::Correlation).unwrap();
        assert_eq!(r.groups, vec![vec![0, 1], vec![3, 4]]);
        let raw = detect_anchors(&cov, 0.1).unwrap();
        assert_ne!(raw.groups, r.groups);
    }

    #[test]
    fn tied_factors_are_flagged() {
        let load = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let c = array![[1.0, 1.0], [1.0, 1.0]];
        let cov = load.dot(&c).dot(&load.t()) + Array2::<f64>::eye(4) * 0.5;
        let r = detect_anchors(&cov, 0.1).unwrap();
        assert_eq!(r.groups, vec![vec![0, 1, 2, 3]]);
        assert!(r.any_ambiguous());
    }

    proptest! {
        #[test]
        fn invariant_to_feature_order(seed in 0u64..500) {
            let load = array![[1.0, 0.0], [1.0, 0.0], [0.6, 0.3], [0.0, 1.0], [0.0, 1.0], [0.3, 0.6]];
            let c = crate::datagen::factor_covariance(2, 0.3);
            let cov = load.dot(&c).dot(&load.t()) + Array2::<f64>::eye(6);
            let mut perm: Vec<usize> = (0..6).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut stream(seed, Stream::Eval));
            let permuted = Array2::from_shape_fn((6, 6), |(i, j)| cov[[perm[i], perm[j]]]);
            let r = detect_anchors(&permuted, 0.1).unwrap();
            let mut mapped: Vec<Vec<usize>> = r.groups.iter()
                .map(|g| { let mut v: Vec<usize> = g.iter().map(|i| perm[*i]).collect(); v.sort(); v })
                .collect();
            mapped.sort();
            prop_assert_eq!(mapped, vec![vec![0, 1], vec![3, 4]]);
        }

        #[test]
        fn groups_are_disjoint_pairs_or_more(seed in 0u64..500) {
            let mut rng = stream(seed, Stream::Eval);
            let a = normal_matrix(&mut rng, 8, 8);
            let cov = a.t().dot(&a);
            let r = detect_anchors(&cov, 0.1).unwrap();
            let mut seen = std::collections::HashSet::new();
            for g in &r.groups {
                prop_assert!(g.len() >= 2);
                for j in g {
                    prop_assert!(seen.insert(*j));
                }
            }
        }
    }

    #[test]
    fn assumption_margins() {
        let r = check_assumptions(&Array2::<f64>::eye(3), None).unwrap();
        assert!(r.variance_dominance_holds);
        assert!(r.pairs.iter().all(|p| p.margin == 1.0));

        let r = check_assumptions(&array![[1.0, 0.6], [0.6, 1.0]], None).unwrap();
        assert!(r.variance_dominance_holds);
        assert_abs_diff_eq!(r.pairs[0].margin, 0.4, epsilon = 1e-15);

        let r = check_assumptions(&array![[1.0, 1.0], [1.0, 1.0]], None).unwrap();
        assert!(!r.variance_dominance_holds);
        assert_eq!((r.pairs[0].first, r.pairs[0].second, r.pairs[0].holds), (0, 1, false));
    }

    #[test]
    fn anchor_dominance_on_labeled_data() {
        let mut rng = stream(4, Stream::Data);
        let z = gen_correlated_factors(20_000, 2, 0.3, &mut rng).unwrap();
        let noise = normal_matrix(&mut rng, 20_000, 6) * 0.5;
        let load = array![[1.0, 0.0], [1.0, 0.0], [0.6, 0.3], [0.0, 1.0], [0.0, 1.0], [0.3, 0.6]];
        let x = z.dot(&load.t()) + noise;
        let labels = [Some(0), Some(0), None, Some(1), Some(1), None];
        let c = crate::datagen::factor_covariance(2, 0.3);
        let r = check_assumptions(&c, Some((&x, &labels))).unwrap();
        let d = r.anchor_dominance.unwrap();
        assert!(d.holds, "{d:?}");
        assert!(d.min_margin > 0.0);
    }
}
