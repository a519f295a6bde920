use crate::error::{Error, Result};

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Rank-sum form, `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc scores".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the positive rank sum, so tied groups stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean (i + j + 2) / 2.
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum2 += pos_in_group * (i + j + 2) as u128;
        i = j + 1;
    }
    let p = positives as u128;
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * positives * negatives) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongtailReport {
    pub overall_auc: f64,
    /// `None` when the tail examples hold a single class.
    pub tail_auc: Option<f64>,
    /// `tail_auc − overall_auc`.
    pub diff: Option<f64>,
    pub tail_items: usize,
    pub tail_examples: usize,
}

/// Items in the bottom 20% by frequency. Index 0 (padding) is excluded and
/// ties are broken by id.
pub fn tail_items(frequency: &[u64]) -> Result<Vec<bool>> {
    let mut ids: Vec<usize> = (1..frequency.len()).collect();
    ids.sort_by_key(|&i| (frequency[i], i));
    let count = ids.len() / 5;
    if count == 0 {
        return Err(Error::Contract(format!(
            "frequency table with {} items has an empty bottom-20% tail",
            ids.len()
        )));
    }
    let mut tail = vec![false; frequency.len()];
    for &i in &ids[..count] {
        tail[i] = true;
    }
    Ok(tail)
}

/// Share of all occurrences that falls on the tail items.
pub fn tail_share(frequency: &[u64]) -> Result<f64> {
    let tail = tail_items(frequency)?;
    let total: u64 = frequency.iter().skip(1).sum();
    let in_tail: u64 = frequency.iter().zip(&tail).filter(|(_, &t)| t).map(|(f, _)| f).sum();
    Ok(in_tail as f64 / total.max(1) as f64)
}

/// Overall AUC against AUC restricted to candidates whose item is in the
/// frequency tail.
pub fn longtail_report(
    scores: &[f64],
    labels: &[u8],
    item_ids: &[u32],
    frequency: &[u64],
) -> Result<LongtailReport> {
    if item_ids.len() != scores.len() {
        return Err(Error::Contract("one item id per score required".into()));
    }
    if let Some(&bad) = item_ids.iter().find(|&&i| i as usize >= frequency.len()) {
        return Err(Error::Contract(format!("item {bad} outside the frequency table")));
    }
    let overall_auc = auc(scores, labels)?;
    let tail = tail_items(frequency)?;
    let (mut ts, mut tl) = (Vec::new(), Vec::new());
    for ((&s, &l), &i) in scores.iter().zip(labels).zip(item_ids) {
        if tail[i as usize] {
            ts.push(s);
            tl.push(l);
        }
    }
    let tail_auc = match auc(&ts, &tl) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(LongtailReport {
        overall_auc,
        tail_auc,
        diff: tail_auc.map(|t| t - overall_auc),
        tail_items: tail.iter().filter(|&&t| t).count(),
        tail_examples: ts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins2 = 0u64;
        let (mut p, mut n) = (0u64, 0u64);
        for (i, &li) in labels.iter().enumerate() {
            if li == 1 {
                p += 1;
            } else {
                n += 1;
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj == 0 {
                    wins2 += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        wins2 as f64 / (2 * p * n) as f64
    }

    #[test]
    fn hand_cases() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.3, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn matches_pairwise_count_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.random_range(2..300);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64 / 7.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            assert_eq!(auc(&scores, &labels).unwrap(), pairwise(&scores, &labels));
        }
    }

    #[test]
    fn uniform_frequencies_take_lowest_ids() {
        let freq = vec![0, 5, 5, 5, 5, 5, 5, 5, 5, 5, 5];
        let tail = tail_items(&freq).unwrap();
        assert_eq!(tail.iter().filter(|&&t| t).count(), 2);
        assert!(tail[1] && tail[2]);
        let r = longtail_report(&[0.9, 0.2, 0.7, 0.3], &[1, 0, 1, 0], &[1, 2, 5, 6], &freq).unwrap();
        assert_eq!(r.overall_auc, 1.0);
        assert_eq!(r.tail_auc, Some(1.0));
        assert_eq!(r.diff, Some(0.0));
    }

    #[test]
    fn degenerate_tables() {
        assert!(matches!(tail_items(&[0, 3, 4]), Err(Error::Contract(_))));
        let freq = vec![0, 1, 9, 9, 9, 9];
        let r = longtail_report(&[0.9, 0.2, 0.4], &[1, 0, 1], &[1, 2, 3], &freq).unwrap();
        assert_eq!(r.tail_auc, None);
        assert_eq!(r.diff, None);
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_transforms(
            raw in proptest::collection::vec((-5.0f64..5.0, 0u8..2), 2..120)
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| (r.0 * 4.0).round() / 4.0).collect();
            let labels: Vec<u8> = raw.iter().map(|r| r.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let a = auc(&scores, &labels).unwrap();
            let t1: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let t2: Vec<f64> = scores.iter().map(|s| 3.0 * s.powi(3) - 1.0).collect();
            prop_assert_eq!(a, auc(&t1, &labels).unwrap());
            prop_assert_eq!(a, auc(&t2, &labels).unwrap());
        }
    }
}
