use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::InteractionSequence;
use crate::error::{Error, Result};

/// Disjoint item-mask and behavior-mask positions for one sequence, with the
/// ids the model must recover there.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sorted positions whose item-related embedding is hidden.
    pub item_positions: Vec<usize>,
    /// Sorted positions whose behavior-related embedding is hidden.
    pub behavior_positions: Vec<usize>,
    /// Primary item id at each item-masked position.
    pub item_targets: Vec<u32>,
    /// All N behavior ids at each behavior-masked position.
    pub behavior_targets: Vec<Vec<u32>>,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.item_positions.is_empty() && self.behavior_positions.is_empty()
    }

    fn fill_targets(&mut self, seq: &InteractionSequence) {
        self.item_targets = self
            .item_positions
            .iter()
            .map(|&p| seq.events[p].item_id())
            .collect();
        self.behavior_targets = self
            .behavior_positions
            .iter()
            .map(|&p| seq.events[p].behavior_features.clone())
            .collect();
    }
}

const RESAMPLE_ATTEMPTS: usize = 16;

pub fn sample_mask_plan(
    seq: &InteractionSequence,
    item_ratio: f64,
    behavior_ratio: f64,
    seed: u64,
) -> Result<MaskPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_mask_plan_with(seq, item_ratio, behavior_ratio, &mut rng)
}

/// Each position is item-masked with probability `item_ratio`, otherwise
/// behavior-masked with probability `behavior_ratio`. Draws with an empty
/// mask set are retried; after a bounded number of retries the missing set
/// receives one uniformly chosen position.
pub fn sample_mask_plan_with<G: Rng + ?Sized>(
    seq: &InteractionSequence,
    item_ratio: f64,
    behavior_ratio: f64,
    rng: &mut G,
) -> Result<MaskPlan> {
    for (name, r) in [("item", item_ratio), ("behavior", behavior_ratio)] {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::RatioConflict(format!(
                "{name} ratio {r} must lie strictly inside (0, 1) so both mask sets can be non-empty"
            )));
        }
    }
    let n = seq.true_length();
    if n < 2 {
        return Err(Error::SequenceTooShort(n));
    }

    let mut plan = MaskPlan::default();
    for _ in 0..RESAMPLE_ATTEMPTS {
        plan.item_positions.clear();
        plan.behavior_positions.clear();
        for p in 0..n {
            if rng.random::<f64>() < item_ratio {
                plan.item_positions.push(p);
            } else if rng.random::<f64>() < behavior_ratio {
                plan.behavior_positions.push(p);
            }
        }
        if !plan.item_positions.is_empty() && !plan.behavior_positions.is_empty() {
            plan.fill_targets(seq);
            return Ok(plan);
        }
    }

    if plan.item_positions.is_empty() {
        let free: Vec<usize> = (0..n).filter(|p| !plan.behavior_positions.contains(p)).collect();
        let p = if free.is_empty() {
            let k = rng.random_range(0..plan.behavior_positions.len());
            plan.behavior_positions.remove(k)
        } else {
            free[rng.random_range(0..free.len())]
        };
        plan.item_positions.push(p);
    }
    if plan.behavior_positions.is_empty() {
        let free: Vec<usize> = (0..n).filter(|p| !plan.item_positions.contains(p)).collect();
        let p = if free.is_empty() {
            let k = rng.random_range(0..plan.item_positions.len());
            plan.item_positions.remove(k)
        } else {
            free[rng.random_range(0..free.len())]
        };
        plan.behavior_positions.push(p);
    }
    plan.item_positions.sort_unstable();
    plan.behavior_positions.sort_unstable();
    plan.fill_targets(seq);
    Ok(plan)
}
