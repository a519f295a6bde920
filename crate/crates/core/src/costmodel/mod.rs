//! Matmul FLOPs per architecture stage and a folded-serving simulator.
//!
//! Convention: an `[m, k] · [k, n]` product costs `2·m·k·n`. Element-wise
//! operations, softmax, layer norms and embedding lookups are free. The
//! closed forms below follow exactly the products the model executes, which
//! the simulator re-measures through the graph's operation counter.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::datamodel::InteractionSequence;
use crate::error::{Error, Result};
use crate::finetune::{CtrModel, ModelConfig};
use crate::numerics::{kernels, FlopCounter, Graph, ParamStore, Stage};

/// Stages in report order.
pub const STAGES: [Stage; 4] = [
    Stage::SequenceEncoder,
    Stage::UniCrossAttn,
    Stage::QFormer,
    Stage::Head,
];

/// Whether a stage's work is shared by all candidates of a request.
pub fn is_foldable(stage: Stage) -> bool {
    matches!(stage, Stage::SequenceEncoder | Stage::QFormer)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageCost {
    pub stage: Stage,
    /// FLOPs for one user and one candidate.
    pub flops: u64,
    pub foldable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub stages: Vec<StageCost>,
    pub batch: usize,
    /// Every stage at batch size one.
    pub efficiency_flops: u64,
    /// Foldable stages once plus non-foldable stages per candidate.
    pub inference_flops: u64,
    pub ratio: f64,
}

impl CostReport {
    pub fn from_stages(stages: Vec<StageCost>, batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Contract("batch must be at least 1".into()));
        }
        let efficiency_flops: u64 = stages.iter().map(|s| s.flops).sum();
        let inference_flops: u64 = stages
            .iter()
            .map(|s| if s.foldable { s.flops } else { batch as u64 * s.flops })
            .sum();
        Ok(Self {
            ratio: metric_ratio(efficiency_flops as f64, inference_flops as f64)?,
            stages,
            batch,
            efficiency_flops,
            inference_flops,
        })
    }

    pub fn stage(&self, stage: Stage) -> u64 {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .map_or(0, |s| s.flops)
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<18} {:>16} {:>9}", "stage", "flops", "foldable").unwrap();
        for s in &self.stages {
            writeln!(out, "{:<18} {:>16} {:>9}", s.stage.name(), s.flops, s.foldable).unwrap();
        }
        writeln!(out, "{:<18} {:>16}", "efficiency_flops", self.efficiency_flops).unwrap();
        writeln!(out, "{:<18} {:>16}", "inference_flops", self.inference_flops).unwrap();
        writeln!(out, "{:<18} {:>16}", "batch", self.batch).unwrap();
        writeln!(out, "{:<18} {:>16.2}", "ratio", self.ratio).unwrap();
        out
    }

    /// `stage<TAB>flops<TAB>foldable` lines.
    pub fn to_tsv(&self) -> String {
        self.stages
            .iter()
            .map(|s| format!("{}\t{}\t{}\n", s.stage.name(), s.flops, s.foldable))
            .collect()
    }
}

/// Inference over efficiency FLOPs.
pub fn metric_ratio(efficiency: f64, inference: f64) -> Result<f64> {
    if efficiency <= 0.0 || !efficiency.is_finite() {
        return Err(Error::Contract(format!("efficiency FLOPs must be positive, got {efficiency}")));
    }
    Ok(inference / efficiency)
}

/// Closed-form stage costs for a history of `seq_len` events.
pub fn stage_flops(config: &ModelConfig, seq_len: usize) -> Vec<StageCost> {
    let e = &config.encoder;
    let f = &config.finetune;
    let (n, d, ff) = (seq_len as u64, e.d_model as u64, e.ffn_hidden() as u64);
    let layers = e.num_layers as u64;
    let k = f.num_queries as u64;

    // Per layer: four d×d projections, scores and weighted values, FFN.
    let encoder = layers * (8 * n * d * d + 4 * n * n * d + 4 * n * d * ff);
    let uni = if f.use_uni_attn {
        layers * (4 * d * d + 4 * n * d + 4 * d * ff)
    } else {
        0
    };
    let qformer = if f.use_qformer {
        let context = if config.has_context_queries() { 2 * d * k * d } else { 0 };
        context + 4 * n * d * d + 4 * k * d * d + 4 * k * n * d + 4 * k * d * ff
    } else {
        0
    };
    let h = f.head_hidden as u64;
    let head = 2 * config.head_width() as u64 * h + 2 * h;
    [encoder, uni, qformer, head]
        .into_iter()
        .zip(STAGES)
        .map(|(flops, stage)| StageCost {
            stage,
            flops,
            foldable: is_foldable(stage),
        })
        .collect()
}

/// Cost report at the maximum sequence length and serving batch `batch`.
pub fn count_flops(config: &ModelConfig, batch: usize) -> Result<CostReport> {
    config.validate()?;
    CostReport::from_stages(stage_flops(config, config.encoder.max_seq_len), batch)
}

/// One user history with its context and `B` candidates.
#[derive(Clone, Debug)]
pub struct ServingRequest {
    pub sequence: Arc<InteractionSequence>,
    pub context: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
}

#[derive(Clone, Debug)]
pub struct ServeOutcome {
    pub scores: Vec<f64>,
    pub flops: FlopCounter,
}

fn check_request(req: &ServingRequest) -> Result<()> {
    if req.candidates.is_empty() {
        return Err(Error::Contract("a request needs at least one candidate".into()));
    }
    Ok(())
}

/// Encodes the user once and scores all candidates against the cached states.
pub fn serve_folded(req: &ServingRequest, model: &CtrModel, store: &ParamStore<f32>) -> Result<ServeOutcome> {
    check_request(req)?;
    let mut g = Graph::inference(store);
    let user = model.encode_user(&mut g, &req.sequence, &req.context)?;
    let targets: Vec<&[u32]> = req.candidates.iter().map(Vec::as_slice).collect();
    let z = model.score(&mut g, &user, &targets)?;
    Ok(ServeOutcome {
        scores: g.value(z).data().iter().map(|&v| kernels::sigmoid(v) as f64).collect(),
        flops: g.flops().clone(),
    })
}

/// Runs the whole model independently for every candidate.
pub fn serve_naive(req: &ServingRequest, model: &CtrModel, store: &ParamStore<f32>) -> Result<ServeOutcome> {
    check_request(req)?;
    let mut flops = FlopCounter::default();
    let mut scores = Vec::with_capacity(req.candidates.len());
    for c in &req.candidates {
        let mut g = Graph::inference(store);
        let z = model.forward(&mut g, &req.sequence, &req.context, &[c])?;
        scores.push(kernels::sigmoid(g.value(z).data()[0]) as f64);
        flops.merge(g.flops());
    }
    Ok(ServeOutcome { scores, flops })
}

/// Largest absolute score difference between two outcomes.
pub fn max_deviation(a: &ServeOutcome, b: &ServeOutcome) -> f64 {
    a.scores
        .iter()
        .zip(&b.scores)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests;
