//! Training loops, evaluation and run directories.
//!
//! Every source of randomness in a run is derived from `(seed, step)`, so a
//! trainer restored from a checkpoint continues exactly as an uninterrupted
//! one would.

pub mod metrics;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{
    group_by_user, sample_mask_plan_with, Corpus, InteractionSequence, MaskPlan, UserGroup,
};
use crate::encoder::{PretrainHeads, PretrainLossBreakdown, PretrainModel};
use crate::error::{Error, Result};
use crate::finetune::{CtrModel, ModelConfig};
use crate::numerics::{checkpoint, kernels, Adam, AdamConfig, Graph, ParamStore, Tensor};

pub use metrics::{auc, longtail_report, tail_items, tail_share, LongtailReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSettings {
    pub item_ratio: f64,
    pub behavior_ratio: f64,
    /// λ in `item_loss + λ·behavior_loss`.
    pub behavior_weight: f64,
}

impl Default for MaskSettings {
    fn default() -> Self {
        Self {
            item_ratio: 0.2,
            behavior_ratio: 0.2,
            behavior_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunSpec {
    pub phase: Phase,
    pub steps: usize,
    /// Sequences per pre-training step; users (with all their candidates)
    /// per fine-tuning step.
    pub batch: usize,
    pub optimizer: AdamConfig,
    pub eval_every: usize,
    pub seed: u64,
    /// `runs/<name>` directory receiving `metrics.tsv` and `checkpoints/`.
    pub run_dir: Option<PathBuf>,
    /// Pre-trained encoder for fine-tuning; ignored when `from_scratch`.
    pub init_checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub masks: MaskSettings,
    /// Share of users held out for validation during fine-tuning.
    pub val_fraction: f64,
}

impl TrainRunSpec {
    pub fn new(phase: Phase, model: ModelConfig) -> Self {
        let steps = match phase {
            Phase::Pretrain => 5000,
            Phase::Finetune => 2000,
        };
        Self {
            phase,
            steps,
            batch: 64,
            optimizer: AdamConfig {
                total_steps: steps,
                ..AdamConfig::default()
            },
            eval_every: 200,
            seed: 42,
            run_dir: None,
            init_checkpoint: None,
            model,
            masks: MaskSettings::default(),
            val_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        self.optimizer.validate()?;
        match self.phase {
            Phase::Pretrain => {
                self.model.encoder.validate()?;
                self.model.schema.validate()?;
                for r in [self.masks.item_ratio, self.masks.behavior_ratio] {
                    if !(r > 0.0 && r < 1.0) {
                        return Err(Error::RatioConflict(format!("mask ratio {r} outside (0, 1)")));
                    }
                }
                if !(self.masks.behavior_weight >= 0.0) {
                    return Err(Error::Config("behavior_weight must be non-negative".into()));
                }
            }
            Phase::Finetune => {
                self.model.validate()?;
                if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
                    return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
                }
            }
        }
        Ok(())
    }

    /// Whether step `step` (1-based count of completed steps) is evaluated.
    pub fn is_eval_step(&self, step: usize) -> bool {
        step % self.eval_every == 0 || step == self.steps
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

/// `step<TAB>metric<TAB>value` lines.
pub fn format_metrics(rows: &[MetricRow]) -> String {
    let mut out = String::new();
    for r in rows {
        writeln!(out, "{}\t{}\t{}", r.step, r.metric, r.value).unwrap();
    }
    out
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricRow>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let mut f = l.split('\t');
            let (Some(s), Some(m), Some(v), None) = (f.next(), f.next(), f.next(), f.next()) else {
                return Err(bad("expected step<TAB>metric<TAB>value"));
            };
            Ok(MetricRow {
                step: s.parse().map_err(|_| bad("bad step"))?,
                metric: m.to_string(),
                value: v.parse().map_err(|_| bad("bad value"))?,
            })
        })
        .collect()
}

const PERMUTATION_SALT: u64 = 0x5eed_0f_5a1e;
const EVAL_SALT: u64 = 0xe7a1_0f_91a5;

/// Example indices for one step: consecutive slices of per-epoch shuffles.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for j in 0..batch {
        let p = step * batch + j;
        if p / n != epoch {
            epoch = p / n;
            perm = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PERMUTATION_SALT);
            rng.set_stream(epoch as u64);
            perm.shuffle(&mut rng);
        }
        out.push(perm[p % n]);
    }
    out
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged {
            step,
            detail: format!("non-finite {what}"),
        },
        other => other,
    }
}

pub fn write_checkpoint(path: &Path, store: &ParamStore<f32>, adam: &Adam<f32>) -> Result<()> {
    let mut tensors = store.to_named_f32();
    tensors.extend(adam.to_named_f32(store));
    checkpoint::save(path, &tensors)
}

fn restore(store: &mut ParamStore<f32>, adam: &mut Adam<f32>, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    store.load_prefix(tensors, "")?;
    adam.load_named(store, tensors)
}

fn write_run_file(dir: &Option<PathBuf>, rel: &str, text: &str) -> Result<()> {
    if let Some(d) = dir {
        crate::datamodel::io::write_file(&d.join(rel), text)?;
    }
    Ok(())
}

fn mean_breakdown(parts: &[PretrainLossBreakdown]) -> PretrainLossBreakdown {
    let n = parts.len().max(1) as f64;
    PretrainLossBreakdown {
        item_loss: parts.iter().map(|b| b.item_loss).sum::<f64>() / n,
        behavior_loss: parts.iter().map(|b| b.behavior_loss).sum::<f64>() / n,
        total: parts.iter().map(|b| b.total).sum::<f64>() / n,
    }
}

/// Pre-training state for one run.
pub struct Pretrainer {
    pub spec: TrainRunSpec,
    pub model: PretrainModel,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    sequences: Vec<InteractionSequence>,
    eval_set: Vec<(usize, MaskPlan)>,
}

/// Size of the fixed evaluation set of masked sequences.
pub const PRETRAIN_EVAL_SEQUENCES: usize = 256;

impl Pretrainer {
    pub fn new(spec: &TrainRunSpec, corpus: &Corpus) -> Result<Self> {
        spec.validate()?;
        let sequences: Vec<InteractionSequence> = corpus
            .sequences
            .iter()
            .filter(|s| s.true_length() >= 2)
            .cloned()
            .collect();
        if sequences.is_empty() {
            return Err(Error::Contract(
                "pre-training needs at least one sequence with two or more events".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let model = PretrainModel::new(
            &mut store,
            &spec.model.encoder,
            &spec.model.schema,
            spec.masks.behavior_weight,
            &mut rng,
        )?;
        let mut eval_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ EVAL_SALT);
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut eval_rng);
        order.truncate(PRETRAIN_EVAL_SEQUENCES);
        let eval_set = order
            .into_iter()
            .map(|i| {
                let plan = sample_mask_plan_with(
                    &sequences[i],
                    spec.masks.item_ratio,
                    spec.masks.behavior_ratio,
                    &mut eval_rng,
                )?;
                Ok((i, plan))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            model,
            store,
            adam: Adam::new(spec.optimizer.clone()),
            sequences,
            eval_set,
        })
    }

    pub fn step_count(&self) -> usize {
        self.adam.step_count()
    }

    /// One optimizer step; returns the batch-mean loss.
    pub fn step(&mut self) -> Result<PretrainLossBreakdown> {
        let step = self.step_count();
        let idx = batch_indices(self.spec.seed, step, self.spec.batch, self.sequences.len());
        let mut rng = step_rng(self.spec.seed, step);
        let seed_grad = 1.0 / idx.len() as f32;
        let mut parts = Vec::with_capacity(idx.len());
        for i in idx {
            let seq = &self.sequences[i];
            let plan = sample_mask_plan_with(
                seq,
                self.spec.masks.item_ratio,
                self.spec.masks.behavior_ratio,
                &mut rng,
            )?;
            let grads = {
                let mut g = Graph::new(&self.store);
                let loss = self.model.forward(&mut g, seq, &plan)?;
                parts.push(PretrainHeads::breakdown(&g, &loss));
                g.backward_seeded(loss.total, seed_grad)
                    .map_err(|e| diverged(step, e))?
            };
            grads.apply(&mut self.store);
        }
        self.adam.step(&mut self.store);
        Ok(mean_breakdown(&parts))
    }

    /// Mean loss over the fixed evaluation set.
    pub fn evaluate(&self) -> Result<PretrainLossBreakdown> {
        let mut parts = Vec::with_capacity(self.eval_set.len());
        for (i, plan) in &self.eval_set {
            let mut g = Graph::inference(&self.store);
            let loss = self.model.forward(&mut g, &self.sequences[*i], plan)?;
            parts.push(PretrainHeads::breakdown(&g, &loss));
        }
        Ok(mean_breakdown(&parts))
    }

    /// Top-1 accuracy of the item head over the evaluation set.
    pub fn masked_item_accuracy(&self) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for (i, plan) in &self.eval_set {
            let pred = self
                .model
                .predict_masked_items(&self.store, &self.sequences[*i], plan)?;
            hit += pred.iter().zip(&plan.item_targets).filter(|(a, b)| a == b).count();
            total += pred.len();
        }
        Ok(hit as f64 / total as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.store, &self.adam)
    }

    pub fn restore(&mut self, path: &Path) -> Result<()> {
        restore(&mut self.store, &mut self.adam, &checkpoint::load(path)?)
    }
}

pub struct PretrainOutcome {
    pub trainer: Pretrainer,
    pub metrics: Vec<MetricRow>,
    /// Evaluation-set loss before the first step.
    pub initial: PretrainLossBreakdown,
    pub last: PretrainLossBreakdown,
    pub checkpoint: Option<PathBuf>,
}

fn breakdown_rows(step: usize, prefix: &str, b: &PretrainLossBreakdown, rows: &mut Vec<MetricRow>) {
    for (name, v) in [
        ("item_loss", b.item_loss),
        ("behavior_loss", b.behavior_loss),
        ("total_loss", b.total),
    ] {
        rows.push(MetricRow {
            step,
            metric: format!("{prefix}{name}"),
            value: v,
        });
    }
}

pub fn run_pretrain(spec: &TrainRunSpec, corpus: &Corpus) -> Result<PretrainOutcome> {
    if spec.phase != Phase::Pretrain {
        return Err(Error::Config("run_pretrain needs a pretrain spec".into()));
    }
    let mut trainer = Pretrainer::new(spec, corpus)?;
    let mut rows = Vec::new();
    let initial = trainer.evaluate()?;
    breakdown_rows(0, "eval_", &initial, &mut rows);
    let mut last = initial;
    let mut window = Vec::new();
    for step in 1..=spec.steps {
        window.push(trainer.step()?);
        if spec.is_eval_step(step) {
            breakdown_rows(step, "train_", &mean_breakdown(&window), &mut rows);
            window.clear();
            last = trainer.evaluate()?;
            breakdown_rows(step, "eval_", &last, &mut rows);
            write_run_file(&spec.run_dir, "metrics.tsv", &format_metrics(&rows))?;
        }
    }
    let checkpoint = match &spec.run_dir {
        Some(d) => {
            let p = d.join("checkpoints").join("final.srpc");
            trainer.save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(PretrainOutcome {
        trainer,
        metrics: rows,
        initial,
        last,
        checkpoint,
    })
}

/// Splits user groups into training and validation by a seeded shuffle of
/// user ids; validation receives `ceil(fraction · users)` users.
pub fn split_users(groups: Vec<UserGroup>, fraction: f64, seed: u64) -> (Vec<UserGroup>, Vec<UserGroup>) {
    let users: BTreeSet<u32> = groups.iter().map(|g| g.sequence.user_id).collect();
    let mut users: Vec<u32> = users.into_iter().collect();
    users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ EVAL_SALT));
    let n_val = ((users.len() as f64 * fraction).ceil() as usize).min(users.len());
    let val: BTreeSet<u32> = users[..n_val].iter().copied().collect();
    groups
        .into_iter()
        .partition(|g| !val.contains(&g.sequence.user_id))
}

/// Validation scores with the matching labels and candidate item ids.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub items: Vec<u32>,
}

impl Evaluation {
    pub fn auc(&self) -> Result<f64> {
        auc(&self.scores, &self.labels)
    }
}

/// Folded scoring of every candidate in `groups`.
pub fn evaluate_groups(model: &CtrModel, store: &ParamStore<f32>, groups: &[UserGroup]) -> Result<Evaluation> {
    let mut ev = Evaluation {
        scores: Vec::new(),
        labels: Vec::new(),
        items: Vec::new(),
    };
    for grp in groups {
        let mut g = Graph::inference(store);
        let user = model.encode_user(&mut g, &grp.sequence, &grp.context_features)?;
        let targets: Vec<&[u32]> = grp.targets.iter().map(Vec::as_slice).collect();
        let z = model.score(&mut g, &user, &targets)?;
        ev.scores
            .extend(g.value(z).data().iter().map(|&v| kernels::sigmoid(v) as f64));
        ev.labels.extend(&grp.labels);
        ev.items.extend(grp.targets.iter().map(|t| t[0]));
    }
    Ok(ev)
}

/// A CTR model initialised from `seed`, with every tensor replaced from
/// `checkpoint` when one is given.
pub fn load_ctr_model(
    config: &ModelConfig,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<(ParamStore<f32>, CtrModel)> {
    let mut store = ParamStore::new();
    let model = CtrModel::new(&mut store, config, &mut ChaCha8Rng::seed_from_u64(seed))?;
    if let Some(p) = checkpoint {
        store.load_prefix(&checkpoint::load(p)?, "")?;
    }
    Ok((store, model))
}

/// Fine-tuning state for one run.
pub struct Finetuner {
    pub spec: TrainRunSpec,
    pub model: CtrModel,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub train: Vec<UserGroup>,
    pub val: Vec<UserGroup>,
}

impl Finetuner {
    pub fn new(spec: &TrainRunSpec, corpus: &Corpus) -> Result<Self> {
        spec.validate()?;
        let groups = group_by_user(&corpus.examples);
        let (train, val) = split_users(groups, spec.val_fraction, spec.seed);
        if train.is_empty() || val.is_empty() {
            return Err(Error::Contract(
                "fine-tuning needs labelled examples from at least two users".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let model = CtrModel::new(&mut store, &spec.model, &mut rng)?;
        if !spec.model.finetune.from_scratch {
            let path = spec.init_checkpoint.as_ref().ok_or_else(|| {
                Error::Config("fine-tuning needs a pre-trained checkpoint unless from_scratch".into())
            })?;
            store.load_prefix(&checkpoint::load(path)?, "encoder.")?;
        }
        model.apply_freeze(&mut store);
        Ok(Self {
            spec: spec.clone(),
            model,
            store,
            adam: Adam::new(spec.optimizer.clone()),
            train,
            val,
        })
    }

    pub fn step_count(&self) -> usize {
        self.adam.step_count()
    }

    /// One optimizer step over `batch` users; returns the mean loss.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.step_count();
        let idx = batch_indices(self.spec.seed, step, self.spec.batch, self.train.len());
        let seed_grad = 1.0 / idx.len() as f32;
        let mut total = 0.0;
        for &i in &idx {
            let grp = &self.train[i];
            let targets: Vec<&[u32]> = grp.targets.iter().map(Vec::as_slice).collect();
            let labels: Vec<f32> = grp.labels.iter().map(|&l| l as f32).collect();
            let grads = {
                let mut g = Graph::new(&self.store);
                let z = self
                    .model
                    .forward(&mut g, &grp.sequence, &grp.context_features, &targets)?;
                let loss = g.bce_with_logits(z, &labels)?;
                total += g.value(loss).data()[0] as f64;
                g.backward_seeded(loss, seed_grad).map_err(|e| diverged(step, e))?
            };
            grads.apply(&mut self.store);
        }
        self.adam.step(&mut self.store);
        Ok(total / idx.len() as f64)
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        evaluate_groups(&self.model, &self.store, &self.val)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.store, &self.adam)
    }

    pub fn restore(&mut self, path: &Path) -> Result<()> {
        restore(&mut self.store, &mut self.adam, &checkpoint::load(path)?)
    }
}

pub struct FinetuneOutcome {
    pub trainer: Finetuner,
    /// Parameters at the best validation AUC.
    pub best_store: ParamStore<f32>,
    pub best_auc: f64,
    pub best_step: usize,
    pub final_auc: f64,
    pub metrics: Vec<MetricRow>,
    pub checkpoint: Option<PathBuf>,
}

impl FinetuneOutcome {
    /// Validation scores of the best checkpoint.
    pub fn best_evaluation(&self) -> Result<Evaluation> {
        evaluate_groups(&self.trainer.model, &self.best_store, &self.trainer.val)
    }
}

pub fn run_finetune(spec: &TrainRunSpec, corpus: &Corpus) -> Result<FinetuneOutcome> {
    if spec.phase != Phase::Finetune {
        return Err(Error::Config("run_finetune needs a finetune spec".into()));
    }
    let mut trainer = Finetuner::new(spec, corpus)?;
    let mut rows = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut final_auc = f64::NAN;
    let mut window = Vec::new();
    for step in 1..=spec.steps {
        window.push(trainer.step()?);
        if spec.is_eval_step(step) {
            let loss = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            let a = trainer.evaluate()?.auc()?;
            final_auc = a;
            rows.push(MetricRow {
                step,
                metric: "train_loss".into(),
                value: loss,
            });
            rows.push(MetricRow {
                step,
                metric: "val_auc".into(),
                value: a,
            });
            if best.as_ref().is_none_or(|b| a > b.0) {
                best = Some((a, step, trainer.store.clone()));
                if let Some(d) = &spec.run_dir {
                    trainer.save(&d.join("checkpoints").join("best.srpc"))?;
                }
            }
            write_run_file(&spec.run_dir, "metrics.tsv", &format_metrics(&rows))?;
        }
    }
    let (best_auc, best_step, best_store) = best.expect("the final step is always evaluated");
    let checkpoint = spec.run_dir.as_ref().map(|d| d.join("checkpoints").join("best.srpc"));
    if let Some(d) = &spec.run_dir {
        trainer.save(&d.join("checkpoints").join("final.srpc"))?;
    }
    Ok(FinetuneOutcome {
        trainer,
        best_store,
        best_auc,
        best_step,
        final_auc,
        metrics: rows,
        checkpoint,
    })
}

#[cfg(test)]
mod tests;
