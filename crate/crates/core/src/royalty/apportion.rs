use serde::{Deserialize, Serialize};

/// One party's part of a largest-remainder split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareStep {
    pub id: String,
    /// Integer weight of this party.
    pub weight: u128,
    /// `floor(total * weight / sum)`.
    pub floor: u64,
    /// `total * weight mod sum`, the fractional part scaled by `sum`.
    pub remainder: u128,
    /// Leftover cent awarded by remainder order.
    pub bonus: bool,
    pub amount: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Apportionment {
    pub total: u64,
    pub weight_sum: u128,
    /// In input order.
    pub shares: Vec<ShareStep>,
}

impl Apportionment {
    pub fn amounts(&self) -> Vec<u64> {
        self.shares.iter().map(|s| s.amount).collect()
    }
}

/// Splits `total` in proportion to integer weights, exactly.
///
/// Floors are handed out first; the leftover cents go one each to the largest
/// remainders, ties broken by ascending id. Returns `None` when all weights
/// are zero.
pub fn largest_remainder(total: u64, weights: &[(String, u128)]) -> Option<Apportionment> {
    let sum: u128 = weights.iter().map(|w| w.1).sum();
    if sum == 0 {
        return None;
    }
    let t = u128::from(total);
    let mut shares: Vec<ShareStep> = weights
        .iter()
        .map(|(id, w)| {
            let q = t * w;
            let floor = (q / sum) as u64;
            ShareStep {
                id: id.clone(),
                weight: *w,
                floor,
                remainder: q % sum,
                bonus: false,
                amount: floor,
            }
        })
        .collect();
    let handed: u64 = shares.iter().map(|s| s.floor).sum();
    let leftover = (total - handed) as usize;
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        shares[b]
            .remainder
            .cmp(&shares[a].remainder)
            .then_with(|| shares[a].id.cmp(&shares[b].id))
    });
    for &i in order.iter().take(leftover) {
        shares[i].bonus = true;
        shares[i].amount += 1;
    }
    Some(Apportionment {
        total,
        weight_sum: sum,
        shares,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(pairs: &[(&str, u128)]) -> Vec<(String, u128)> {
        pairs.iter().map(|(a, b)| (a.to_string(), *b)).collect()
    }

    #[test]
    fn exact_and_tied_splits() {
        let a = largest_remainder(10000, &w(&[("A", 3), ("B", 1), ("C", 1)])).unwrap();
        assert_eq!(a.amounts(), vec![6000, 2000, 2000]);
        let a = largest_remainder(100, &w(&[("C", 1), ("B", 1), ("A", 1)])).unwrap();
        assert_eq!(a.amounts(), vec![33, 33, 34]);
        assert!(largest_remainder(5, &w(&[("A", 0)])).is_none());
        assert_eq!(largest_remainder(0, &w(&[("A", 2), ("B", 1)])).unwrap().amounts(), vec![0, 0]);
    }

    #[test]
    fn remainders_order_the_bonus() {
        // 10 * (1/6, 2/6, 3/6) = 1.67, 3.33, 5 -> floors 1, 3, 5, leftover to A.
        let a = largest_remainder(10, &w(&[("A", 1), ("B", 2), ("C", 3)])).unwrap();
        assert_eq!(a.amounts(), vec![2, 3, 5]);
        assert!(a.shares[0].bonus);
    }
}
