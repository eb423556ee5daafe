use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignTestResult {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
    /// Every segment tied; `p_value` is 1 by convention.
    pub all_tied: bool,
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
fn upper_tail(k: usize, n: usize) -> f64 {
    let ln2n = n as f64 * std::f64::consts::LN_2;
    (k..=n)
        .map(|i| (ln_binomial(n as u64, i as u64) - ln2n).exp())
        .sum()
}

/// Paired two-sided sign test of system A against system B. Ties are
/// excluded from the binomial.
pub fn sign_test(scores_a: &[f64], scores_b: &[f64]) -> Result<SignTestResult> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::Input(format!(
            "score lists differ in length: {} vs {}",
            scores_a.len(),
            scores_b.len()
        )));
    }
    let wins = scores_a.iter().zip(scores_b).filter(|(a, b)| a > b).count();
    let losses = scores_a.iter().zip(scores_b).filter(|(a, b)| a < b).count();
    let ties = scores_a.len() - wins - losses;
    let n = wins + losses;
    let all_tied = n == 0;
    let p_value = if all_tied {
        1.0
    } else {
        (2.0 * upper_tail(wins.max(losses), n)).min(1.0)
    };
    Ok(SignTestResult {
        wins,
        losses,
        ties,
        p_value,
        all_tied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outcome(w: usize, l: usize, t: usize) -> (Vec<f64>, Vec<f64>) {
        let a = [vec![1.0; w], vec![0.0; l], vec![0.5; t]].concat();
        let b = [vec![0.0; w], vec![1.0; l], vec![0.5; t]].concat();
        (a, b)
    }

    /// Exact rational sum with integer binomials.
    fn oracle(k: u64, n: u64) -> f64 {
        let c =
            |n: u64, k: u64| (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128);
        let num: u128 = (k..=n).map(|i| c(n, i)).sum();
        (2.0 * num as f64 / 2f64.powi(n as i32)).min(1.0)
    }

    #[test]
    fn eight_wins_two_losses() {
        let (a, b) = outcome(8, 2, 3);
        let r = sign_test(&a, &b).unwrap();
        assert_eq!((r.wins, r.losses, r.ties), (8, 2, 3));
        assert!((r.p_value - 112.0 / 1024.0).abs() < 1e-12);
    }

    #[test]
    fn ten_wins() {
        let (a, b) = outcome(10, 0, 0);
        assert!((sign_test(&a, &b).unwrap().p_value - 2.0 / 1024.0).abs() < 1e-12);
    }

    #[test]
    fn balanced_and_tied() {
        let (a, b) = outcome(5, 5, 0);
        assert_eq!(sign_test(&a, &b).unwrap().p_value, 1.0);
        let (a, b) = outcome(0, 0, 4);
        let r = sign_test(&a, &b).unwrap();
        assert!(r.all_tied);
        assert_eq!(r.p_value, 1.0);
        assert!(sign_test(&[1.0], &[]).is_err());
    }

    #[test]
    fn matches_integer_oracle() {
        for n in 1..=40u64 {
            for k in 0..=n {
                let (a, b) = outcome(k as usize, (n - k) as usize, 0);
                let p = sign_test(&a, &b).unwrap().p_value;
                assert!((p - oracle(k.max(n - k), n)).abs() < 1e-12, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn large_n_is_finite() {
        let (a, b) = outcome(3000, 2000, 0);
        let p = sign_test(&a, &b).unwrap().p_value;
        assert!(p.is_finite() && p > 0.0 && p < 1e-40);
    }

    proptest! {
        #[test]
        fn symmetric(pairs in prop::collection::vec((0u8..4, 0u8..4), 0..60)) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            let ab = sign_test(&a, &b).unwrap();
            let ba = sign_test(&b, &a).unwrap();
            prop_assert_eq!(ab.wins, ba.losses);
            prop_assert_eq!(ab.losses, ba.wins);
            prop_assert_eq!(ab.p_value, ba.p_value);
            prop_assert_eq!(ab.wins + ab.losses + ab.ties, pairs.len());
            prop_assert!((0.0..=1.0).contains(&ab.p_value));
        }
    }
}
