use std::sync::Arc;

use crate::error::{Error, Result};

/// Vocabulary sizes per categorical feature. Every vocabulary reserves id 0
/// for padding, so a size `V` admits real ids `1..V`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureSchema {
    pub item_vocab: Vec<usize>,
    pub behavior_vocab: Vec<usize>,
    pub context_vocab: Vec<usize>,
}

impl FeatureSchema {
    /// M
    pub fn num_item_features(&self) -> usize {
        self.item_vocab.len()
    }

    /// N
    pub fn num_behavior_features(&self) -> usize {
        self.behavior_vocab.len()
    }

    pub fn num_context_features(&self) -> usize {
        self.context_vocab.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.item_vocab.is_empty() || self.behavior_vocab.is_empty() {
            return Err(Error::Config(
                "need at least one item feature and one behavior feature".into(),
            ));
        }
        let all = self
            .item_vocab
            .iter()
            .chain(&self.behavior_vocab)
            .chain(&self.context_vocab);
        if all.into_iter().any(|&v| v < 2) {
            return Err(Error::Config("every vocabulary needs padding plus one real id".into()));
        }
        Ok(())
    }

    fn check_ids(ids: &[u32], vocab: &[usize], what: &str) -> std::result::Result<(), String> {
        if ids.len() != vocab.len() {
            return Err(format!("{what}: expected {} ids, got {}", vocab.len(), ids.len()));
        }
        for (k, (&id, &v)) in ids.iter().zip(vocab).enumerate() {
            if id == 0 || id as usize >= v {
                return Err(format!("{what} feature {k}: id {id} outside 1..{v}"));
            }
        }
        Ok(())
    }

    pub fn check_event(&self, e: &InteractionEvent) -> std::result::Result<(), String> {
        Self::check_ids(&e.item_features, &self.item_vocab, "item")?;
        Self::check_ids(&e.behavior_features, &self.behavior_vocab, "behavior")
    }

    pub fn check_example(&self, ex: &CtrExample) -> std::result::Result<(), String> {
        for e in &ex.sequence.events {
            self.check_event(e)?;
        }
        Self::check_ids(&ex.target_item, &self.item_vocab, "target")?;
        Self::check_ids(&ex.context_features, &self.context_vocab, "context")?;
        if ex.label > 1 {
            return Err(format!("label {} not in {{0,1}}", ex.label));
        }
        Ok(())
    }
}

/// One sequence element: M item-related ids and N behavior-related ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InteractionEvent {
    pub item_features: Vec<u32>,
    pub behavior_features: Vec<u32>,
}

impl InteractionEvent {
    pub fn new(item_features: Vec<u32>, behavior_features: Vec<u32>) -> Self {
        Self {
            item_features,
            behavior_features,
        }
    }

    /// The primary item id (first item-related feature).
    pub fn item_id(&self) -> u32 {
        self.item_features[0]
    }
}

/// A user's interactions, oldest first. Positions past `events.len()` up to
/// the configured maximum length are padding and never materialized.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InteractionSequence {
    pub user_id: u32,
    pub events: Vec<InteractionEvent>,
}

impl InteractionSequence {
    pub fn true_length(&self) -> usize {
        self.events.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CtrExample {
    pub sequence: Arc<InteractionSequence>,
    pub target_item: Vec<u32>,
    pub context_features: Vec<u32>,
    pub label: u8,
}

impl CtrExample {
    pub fn user_id(&self) -> u32 {
        self.sequence.user_id
    }
}

/// Candidates of one user sharing a single history.
#[derive(Clone, Debug)]
pub struct UserGroup {
    pub sequence: Arc<InteractionSequence>,
    pub context_features: Vec<u32>,
    pub targets: Vec<Vec<u32>>,
    pub labels: Vec<u8>,
}

/// Groups consecutive examples that share a history and context.
pub fn group_by_user(examples: &[CtrExample]) -> Vec<UserGroup> {
    let mut out: Vec<UserGroup> = Vec::new();
    for ex in examples {
        match out.last_mut() {
            Some(g)
                if g.context_features == ex.context_features
                    && (Arc::ptr_eq(&g.sequence, &ex.sequence) || *g.sequence == *ex.sequence) =>
            {
                g.targets.push(ex.target_item.clone());
                g.labels.push(ex.label);
            }
            _ => out.push(UserGroup {
                sequence: ex.sequence.clone(),
                context_features: ex.context_features.clone(),
                targets: vec![ex.target_item.clone()],
                labels: vec![ex.label],
            }),
        }
    }
    out
}

/// Pre-training sequences plus labelled fine-tuning examples.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub sequences: Vec<InteractionSequence>,
    pub examples: Vec<CtrExample>,
}

impl Corpus {
    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty() && self.examples.is_empty()
    }

    /// Occurrences of each primary item id across the pre-training sequences.
    pub fn item_frequency(&self, item_vocab: usize) -> Vec<u64> {
        let mut freq = vec![0u64; item_vocab];
        for s in &self.sequences {
            for e in &s.events {
                freq[e.item_id() as usize] += 1;
            }
        }
        freq
    }
}
