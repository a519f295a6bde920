//! Synthetic interaction logs with planted user preferences.
//!
//! Items live in a latent space around category centroids; each user owns a
//! few preference prototypes. Histories are drawn from popularity-weighted
//! preference sampling (with re-consumption and exploration events), behavior
//! features encode how well an item matches the user, and click labels come
//! from a logistic model on the user-item affinity.

use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Corpus, CtrExample, FeatureSchema, InteractionEvent, InteractionSequence};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_categories: usize,
    pub price_buckets: usize,
    /// Maximum history length L.
    pub max_seq_len: usize,
    pub min_seq_len: usize,
    pub latent_dim: usize,
    pub prototypes_per_user: usize,
    pub zipf_exponent: f64,
    /// Inverse temperature of preference-driven item choice.
    pub preference_sharpness: f64,
    pub repeat_prob: f64,
    pub explore_prob: f64,
    pub candidates_per_user: usize,
    pub positive_rate: f64,
    /// Logistic scale of label noise; 0 makes labels a hard threshold.
    pub label_noise: f64,
    pub rating_levels: usize,
    pub click_buckets: usize,
    pub genders: usize,
    pub age_buckets: usize,
    pub hours: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_users: 2000,
            num_items: 500,
            num_categories: 20,
            price_buckets: 5,
            max_seq_len: 50,
            min_seq_len: 20,
            latent_dim: 16,
            prototypes_per_user: 1,
            zipf_exponent: 1.0,
            preference_sharpness: 20.0,
            repeat_prob: 0.3,
            explore_prob: 0.05,
            candidates_per_user: 10,
            positive_rate: 0.3,
            label_noise: 0.1,
            rating_levels: 5,
            click_buckets: 4,
            genders: 2,
            age_buckets: 5,
            hours: 24,
        }
    }
}

impl SyntheticConfig {
    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema {
            item_vocab: vec![self.num_items + 1, self.num_categories + 1, self.price_buckets + 1],
            behavior_vocab: vec![self.rating_levels + 1, self.click_buckets + 1],
            context_vocab: vec![self.genders + 1, self.age_buckets + 1, self.hours + 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_items == 0 || self.num_users == 0 {
            return err("need at least one user and one item");
        }
        if self.num_categories == 0 || self.num_categories > self.num_items {
            return err("num_categories must lie in 1..=num_items");
        }
        if self.price_buckets == 0 || self.price_buckets > self.num_items {
            return err("price_buckets must lie in 1..=num_items");
        }
        if self.min_seq_len < 2 || self.min_seq_len > self.max_seq_len {
            return err("need 2 <= min_seq_len <= max_seq_len");
        }
        if self.prototypes_per_user == 0 || self.prototypes_per_user > self.num_categories {
            return err("prototypes_per_user must lie in 1..=num_categories");
        }
        if self.latent_dim == 0 || self.candidates_per_user == 0 {
            return err("latent_dim and candidates_per_user must be positive");
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return err("positive_rate must lie in (0, 1)");
        }
        for (name, p) in [("repeat_prob", self.repeat_prob), ("explore_prob", self.explore_prob)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.label_noise < 0.0 || self.zipf_exponent < 0.0 {
            return err("label_noise and zipf_exponent must be non-negative");
        }
        if self.rating_levels < 2 || self.click_buckets < 1 {
            return err("need >= 2 rating levels and >= 1 click bucket");
        }
        if self.genders == 0 || self.age_buckets == 0 || self.hours == 0 {
            return err("context vocabularies must be non-empty");
        }
        Ok(())
    }
}

struct Item {
    latent: Vec<f64>,
    category: u32,
    price: u32,
}

struct User {
    prototypes: Vec<Vec<f64>>,
    gender: u32,
    age: u32,
}

fn unit<G: Rng + ?Sized>(rng: &mut G, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    normalize(v)
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Ground-truth generator state. Kept private; only the corpus leaves.
struct World {
    cfg: SyntheticConfig,
    items: Vec<Item>,
    popularity: Vec<f64>,
    users: Vec<User>,
}

impl World {
    fn build(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Self {
        let centroids: Vec<Vec<f64>> = (0..cfg.num_categories).map(|_| unit(rng, cfg.latent_dim)).collect();
        let mut items = Vec::with_capacity(cfg.num_items);
        let mut prices = Vec::with_capacity(cfg.num_items);
        for i in 0..cfg.num_items {
            let c = if i < cfg.num_categories { i } else { rng.random_range(0..cfg.num_categories) };
            let latent = normalize(
                centroids[c]
                    .iter()
                    .map(|&x| x + 0.35 * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            // category-dependent price level plus noise, bucketed by rank below
            let price = (c as f64 / cfg.num_categories as f64) + 0.5 * rng.random::<f64>();
            prices.push(price);
            items.push(Item {
                latent,
                category: c as u32 + 1,
                price: 0,
            });
        }
        let mut order: Vec<usize> = (0..cfg.num_items).collect();
        order.sort_by(|&a, &b| prices[a].total_cmp(&prices[b]).then(a.cmp(&b)));
        for (rank, &i) in order.iter().enumerate() {
            items[i].price = (rank * cfg.price_buckets / cfg.num_items) as u32 + 1;
        }

        let mut ranks: Vec<usize> = (1..=cfg.num_items).collect();
        ranks.shuffle(rng);
        let popularity = ranks
            .iter()
            .map(|&r| (r as f64).powf(-cfg.zipf_exponent))
            .collect();

        let users = (0..cfg.num_users)
            .map(|_| {
                let mut cats: Vec<usize> = (0..cfg.num_categories).collect();
                cats.shuffle(rng);
                let prototypes = cats[..cfg.prototypes_per_user]
                    .iter()
                    .map(|&c| {
                        normalize(
                            centroids[c]
                                .iter()
                                .map(|&x| x + 0.2 * rng.sample::<f64, _>(StandardNormal))
                                .collect(),
                        )
                    })
                    .collect();
                User {
                    prototypes,
                    gender: rng.random_range(1..=cfg.genders as u32),
                    age: rng.random_range(1..=cfg.age_buckets as u32),
                }
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            items,
            popularity,
            users,
        }
    }

    fn affinity(&self, u: &User, item: usize) -> f64 {
        u.prototypes
            .iter()
            .map(|p| dot(p, &self.items[item].latent))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Older users lean towards pricier items.
    fn context_effect(&self, u: &User, item: usize) -> f64 {
        let age = if self.cfg.age_buckets > 1 {
            (u.age - 1) as f64 / (self.cfg.age_buckets - 1) as f64
        } else {
            0.5
        };
        let price = if self.cfg.price_buckets > 1 {
            (self.items[item].price - 1) as f64 / (self.cfg.price_buckets - 1) as f64
        } else {
            0.5
        };
        0.15 * (2.0 * age - 1.0) * (2.0 * price - 1.0)
    }

    fn preference_samplers(&self, u: &User) -> Vec<WeightedIndex<f64>> {
        u.prototypes
            .iter()
            .map(|p| {
                let w: Vec<f64> = self
                    .items
                    .iter()
                    .zip(&self.popularity)
                    .map(|(it, &pop)| pop * (self.cfg.preference_sharpness * dot(p, &it.latent)).exp())
                    .collect();
                WeightedIndex::new(w).expect("positive weights")
            })
            .collect()
    }

    fn event(&self, u: &User, item: usize, rng: &mut ChaCha8Rng) -> InteractionEvent {
        let a = self.affinity(u, item);
        let levels = self.cfg.rating_levels as f64;
        let noisy = (a + 1.0) / 2.0 * levels + 0.6 * rng.sample::<f64, _>(StandardNormal);
        let rating = noisy.floor().clamp(0.0, levels - 1.0) as u32 + 1;
        let buckets = self.cfg.click_buckets as f64;
        let clicks = (a.max(0.0) * buckets + rng.random::<f64>() - 0.5)
            .floor()
            .clamp(0.0, buckets - 1.0) as u32
            + 1;
        let it = &self.items[item];
        InteractionEvent::new(vec![item as u32 + 1, it.category, it.price], vec![rating, clicks])
    }

    fn item_features(&self, item: usize) -> Vec<u32> {
        let it = &self.items[item];
        vec![item as u32 + 1, it.category, it.price]
    }
}

/// Generates `(pre-training sequences, labelled fine-tuning examples)`.
/// Fully determined by `(config, seed)`.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = World::build(cfg, &mut rng);
    let pop_sampler = WeightedIndex::new(&world.popularity).expect("positive popularity");

    let mut sequences = Vec::with_capacity(cfg.num_users);
    let mut pending = Vec::with_capacity(cfg.num_users * cfg.candidates_per_user);
    for (uid, user) in world.users.iter().enumerate() {
        let samplers = world.preference_samplers(user);
        let len = rng.random_range(cfg.min_seq_len..=cfg.max_seq_len);
        let mut history: Vec<usize> = Vec::with_capacity(len);
        let mut events = Vec::with_capacity(len);
        for _ in 0..len {
            let item = if !history.is_empty() && rng.random::<f64>() < cfg.repeat_prob {
                history[rng.random_range(0..history.len())]
            } else if rng.random::<f64>() < cfg.explore_prob {
                pop_sampler.sample(&mut rng)
            } else {
                let p = rng.random_range(0..samplers.len());
                samplers[p].sample(&mut rng)
            };
            history.push(item);
            events.push(world.event(user, item, &mut rng));
        }
        let seq = Arc::new(InteractionSequence {
            user_id: uid as u32 + 1,
            events,
        });
        // One request per user: the hour is shared by all its candidates.
        let hour = rng.random_range(1..=cfg.hours as u32);
        for c in 0..cfg.candidates_per_user {
            let item = if c % 2 == 0 {
                let p = rng.random_range(0..samplers.len());
                samplers[p].sample(&mut rng)
            } else {
                pop_sampler.sample(&mut rng)
            };
            let score = world.affinity(user, item) + world.context_effect(user, item);
            pending.push((seq.clone(), item, vec![user.gender, user.age, hour], score));
        }
        sequences.push((*seq).clone());
    }

    let scores: Vec<f64> = pending.iter().map(|p| p.3).collect();
    let mut examples = Vec::with_capacity(pending.len());
    if cfg.label_noise == 0.0 {
        let threshold = quantile(&scores, 1.0 - cfg.positive_rate);
        for (seq, item, ctx, s) in pending {
            examples.push(CtrExample {
                sequence: seq,
                target_item: world.item_features(item),
                context_features: ctx,
                label: u8::from(s > threshold),
            });
        }
    } else {
        let bias = calibrate_bias(&scores, cfg.label_noise, cfg.positive_rate);
        for (seq, item, ctx, s) in pending {
            let p = sigmoid((s - bias) / cfg.label_noise);
            examples.push(CtrExample {
                sequence: seq,
                target_item: world.item_features(item),
                context_features: ctx,
                label: u8::from(rng.random::<f64>() < p),
            });
        }
    }
    Ok(Corpus {
        sequences,
        examples,
    })
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((q * v.len() as f64).floor() as usize).min(v.len() - 1);
    if idx == 0 {
        v[0] - 1.0
    } else {
        v[idx - 1]
    }
}

/// Bias `b` such that the mean of `sigmoid((s - b) / noise)` equals `rate`.
fn calibrate_bias(scores: &[f64], noise: f64, rate: f64) -> f64 {
    let mean_p = |b: f64| scores.iter().map(|&s| sigmoid((s - b) / noise)).sum::<f64>() / scores.len() as f64;
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) > rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}


#[cfg(test)]
/// Cross-entropy of the true generating distribution of each history item,
/// given the user's hidden prototypes and the preceding events.
mod predictability {
    use super::*;

    fn floor(cfg: &SyntheticConfig, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let world = World::build(cfg, &mut rng);
        let pop_total: f64 = world.popularity.iter().sum();
        let pop_sampler = WeightedIndex::new(&world.popularity).unwrap();
        let mut total = 0.0;
        let mut count = 0usize;
        for user in world.users.iter().take(300) {
            let probs: Vec<Vec<f64>> = user.prototypes.iter().map(|p| {
                let w: Vec<f64> = world.items.iter().zip(&world.popularity)
                    .map(|(it, &pop)| pop * (cfg.preference_sharpness * dot(p, &it.latent)).exp()).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            }).collect();
            let samplers = world.preference_samplers(user);
            let len = rng.random_range(cfg.min_seq_len..=cfg.max_seq_len);
            let mut history: Vec<usize> = Vec::new();
            for _ in 0..len {
                let item = if !history.is_empty() && rng.random::<f64>() < cfg.repeat_prob {
                    history[rng.random_range(0..history.len())]
                } else if rng.random::<f64>() < cfg.explore_prob {
                    pop_sampler.sample(&mut rng)
                } else {
                    samplers[rng.random_range(0..samplers.len())].sample(&mut rng)
                };
                let fresh = cfg.explore_prob * world.popularity[item] / pop_total
                    + (1.0 - cfg.explore_prob) * probs.iter().map(|p| p[item]).sum::<f64>() / probs.len() as f64;
                let p = if history.is_empty() { fresh } else {
                    let rep = history.iter().filter(|&&h| h == item).count() as f64 / history.len() as f64;
                    cfg.repeat_prob * rep + (1.0 - cfg.repeat_prob) * fresh
                };
                total -= p.ln();
                count += 1;
                history.push(item);
            }
        }
        total / count as f64
    }

    #[test]
    fn reference_world_is_predictable() {
        let cfg = SyntheticConfig::default();
        let uniform = ((cfg.num_items + 1) as f64).ln();
        let f = floor(&cfg, 42);
        assert!(f < 0.4 * uniform, "floor {f} vs uniform {uniform}");
    }
}
