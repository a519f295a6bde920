//! CTR prediction on top of the pre-trained sequence encoder.
//!
//! Scoring splits into a user part that never sees the candidate (the
//! encoder, mean pooling and the query transformer) and a candidate part
//! (uni cross-attention and the head). The user part is computed once per
//! request and reused for every candidate.

use rand::Rng;

use crate::datamodel::{CtrExample, FeatureSchema, InteractionSequence};
use crate::encoder::{sum_embeddings, EncoderConfig, EncoderStates, SequenceEncoder};
use crate::error::{Error, Result};
use crate::numerics::{
    attention, Attention, AttnMask, FeedForward, Graph, LayerNorm, Linear, ParamId, ParamStore,
    Real, Stage, Var,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FinetuneConfig {
    pub use_uni_attn: bool,
    pub use_qformer: bool,
    /// Reuse the encoder's query and output projections in uni cross-attention.
    pub tie_uni_attn: bool,
    /// Start from random encoder weights instead of a checkpoint.
    pub from_scratch: bool,
    pub freeze_encoder: bool,
    /// Frozen encoder, pooled state plus adapter vector, concat head.
    pub baseline_mp: bool,
    /// K
    pub num_queries: usize,
    pub context_queries: bool,
    pub head_hidden: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            use_uni_attn: true,
            use_qformer: true,
            tie_uni_attn: false,
            from_scratch: false,
            freeze_encoder: false,
            baseline_mp: false,
            num_queries: 4,
            context_queries: true,
            head_hidden: 64,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.baseline_mp && (self.use_uni_attn || self.use_qformer) {
            return Err(Error::Config(
                "baseline_mp excludes use_uni_attn and use_qformer".into(),
            ));
        }
        if self.baseline_mp && !self.freeze_encoder {
            return Err(Error::Config("baseline_mp requires freeze_encoder = true".into()));
        }
        if self.tie_uni_attn && !self.use_uni_attn {
            return Err(Error::Config("tie_uni_attn needs use_uni_attn".into()));
        }
        if self.use_qformer && (self.num_queries == 0 || self.num_queries >= encoder.max_seq_len) {
            return Err(Error::Config(format!(
                "num_queries {} must satisfy 0 < K < max_seq_len {}",
                self.num_queries, encoder.max_seq_len
            )));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Architecture of a complete CTR model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub finetune: FinetuneConfig,
    pub schema: FeatureSchema,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            finetune: FinetuneConfig::default(),
            schema: crate::datamodel::SyntheticConfig::default().schema(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.schema.validate()?;
        self.finetune.validate(&self.encoder)
    }

    /// Whether the query transformer gets a context offset.
    pub fn has_context_queries(&self) -> bool {
        self.finetune.use_qformer
            && self.finetune.context_queries
            && !self.finetune.baseline_mp
            && !self.schema.context_vocab.is_empty()
    }

    /// Width of the feature vector entering the head.
    pub fn head_width(&self) -> usize {
        let d = self.encoder.d_model;
        let f = &self.finetune;
        let mut width = 2 * d;
        if f.use_uni_attn {
            width += d;
        }
        if f.use_qformer {
            width += f.num_queries * d;
        }
        if !f.baseline_mp && !self.schema.context_vocab.is_empty() {
            width += d;
        }
        width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UniCrossLayer {
    pub norm1: LayerNorm,
    pub query: Linear,
    pub output: Linear,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

/// The candidate queries each encoder layer's keys and values; sequence
/// states are only read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UniCrossAttention {
    pub layers: Vec<UniCrossLayer>,
    pub target_position: ParamId,
    pub heads: usize,
}

impl UniCrossAttention {
    fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        encoder: &SequenceEncoder,
        tie: bool,
        rng: &mut G,
    ) -> Self {
        let cfg = &encoder.config;
        let d = cfg.d_model;
        let layers = encoder
            .layers
            .iter()
            .enumerate()
            .map(|(i, enc)| {
                let p = format!("ctr.uni.layer{i}");
                let norm1 = LayerNorm::new(store, &format!("{p}.norm1"), d);
                let (query, output) = if tie {
                    (enc.attn.query, enc.attn.output)
                } else {
                    (
                        Linear::new(store, &format!("{p}.query"), d, d, rng),
                        Linear::new(store, &format!("{p}.output"), d, d, rng),
                    )
                };
                UniCrossLayer {
                    norm1,
                    query,
                    output,
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, cfg.ffn_hidden(), rng),
                }
            })
            .collect();
        Self {
            layers,
            target_position: store.add_normal("ctr.uni.target_position", &[d], rng),
            heads: cfg.num_heads,
        }
    }

    /// Final candidate states `[B, d]` for candidate embeddings `targets: [B, d]`.
    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        targets: Var,
        states: &EncoderStates,
    ) -> Result<Var> {
        if states.keys.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "encoder produced {} layers, uni cross-attention has {}",
                states.keys.len(),
                self.layers.len()
            )));
        }
        let prev = g.set_stage(Stage::UniCrossAttn);
        let pos = g.param(self.target_position);
        let mut t = g.add_row(targets, pos)?;
        for (layer, (&k, &v)) in self.layers.iter().zip(states.keys.iter().zip(&states.values)) {
            let h = layer.norm1.forward(g, t)?;
            let q = layer.query.forward(g, h)?;
            let a = attention(g, q, k, v, self.heads, None)?;
            let o = layer.output.forward(g, a)?;
            t = g.add(t, o)?;
            let h = layer.norm2.forward(g, t)?;
            let f = layer.ffn.forward(g, h)?;
            t = g.add(t, f)?;
        }
        g.set_stage(prev);
        Ok(t)
    }
}

/// K learned queries cross-attending over the encoder's final states.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QFormer {
    pub queries: ParamId,
    /// `[d, K·d]` map from the context embedding to per-query offsets.
    pub context_map: Option<ParamId>,
    pub memory_norm: LayerNorm,
    pub query_norm: LayerNorm,
    pub attn: Attention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub num_queries: usize,
}

impl QFormer {
    fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        cfg: &EncoderConfig,
        num_queries: usize,
        context_queries: bool,
        rng: &mut G,
    ) -> Self {
        let d = cfg.d_model;
        Self {
            queries: store.add_normal("ctr.qformer.queries", &[num_queries, d], rng),
            context_map: context_queries
                .then(|| store.add_normal("ctr.qformer.context_map", &[d, num_queries * d], rng)),
            memory_norm: LayerNorm::new(store, "ctr.qformer.memory_norm", d),
            query_norm: LayerNorm::new(store, "ctr.qformer.query_norm", d),
            attn: Attention::new(store, "ctr.qformer.attn", d, cfg.num_heads, rng),
            ffn_norm: LayerNorm::new(store, "ctr.qformer.ffn_norm", d),
            ffn: FeedForward::new(store, "ctr.qformer.ffn", d, cfg.ffn_hidden(), rng),
            num_queries,
        }
    }

    /// `[K, d]` summary of `memory: [n, d]`. A context embedding `[1, d]`
    /// shifts the queries by a linear map of it, so a zero context is the
    /// same as none.
    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        memory: Var,
        context: Option<Var>,
        key_mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let prev = g.set_stage(Stage::QFormer);
        let mut q0 = g.param(self.queries);
        if let (Some(map), Some(c)) = (self.context_map, context) {
            let w = g.param(map);
            let offset = g.matmul(c, w)?;
            let d = g.value(q0).cols();
            let offset = g.reshape(offset, &[self.num_queries, d])?;
            q0 = g.add(q0, offset)?;
        }
        let m = self.memory_norm.forward(g, memory)?;
        let k = self.attn.key.forward(g, m)?;
        let v = self.attn.value.forward(g, m)?;
        let h = self.query_norm.forward(g, q0)?;
        let q = self.attn.query.forward(g, h)?;
        let a = attention(g, q, k, v, self.attn.heads, key_mask)?;
        let o = self.attn.output.forward(g, a)?;
        let x = g.add(q0, o)?;
        let h = self.ffn_norm.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        let out = g.add(x, f);
        g.set_stage(prev);
        out
    }
}

/// Two-layer MLP producing one logit per row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CtrHead {
    pub hidden: Linear,
    pub output: Linear,
}

impl CtrHead {
    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, features: Var) -> Result<Var> {
        let prev = g.set_stage(Stage::Head);
        let h = self.hidden.forward(g, features)?;
        let h = g.gelu(h);
        let z = self.output.forward(g, h);
        g.set_stage(prev);
        z
    }
}

/// Everything about one user that candidate scoring reads.
#[derive(Clone, Debug)]
pub struct UserState {
    pub states: EncoderStates,
    /// Mean of the final sequence states, `[1, d]`.
    pub pooled: Var,
    /// Flattened query outputs, `[1, K·d]`.
    pub queries: Option<Var>,
    /// Sum of the context feature embeddings, `[1, d]`.
    pub context: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct CtrModel {
    pub config: FinetuneConfig,
    pub encoder: SequenceEncoder,
    pub uni: Option<UniCrossAttention>,
    pub qformer: Option<QFormer>,
    pub context_tables: Vec<ParamId>,
    pub adapter: Option<ParamId>,
    pub head: CtrHead,
}

impl CtrModel {
    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        model: &ModelConfig,
        rng: &mut G,
    ) -> Result<Self> {
        model.validate()?;
        let cfg = &model.finetune;
        let schema = &model.schema;
        let encoder = SequenceEncoder::new(store, &model.encoder, schema, rng)?;
        let d = model.encoder.d_model;
        let context_tables: Vec<ParamId> = if cfg.baseline_mp {
            Vec::new()
        } else {
            schema
                .context_vocab
                .iter()
                .enumerate()
                .map(|(k, &v)| store.add_normal(format!("ctr.context_emb.{k}"), &[v, d], rng))
                .collect()
        };
        let uni = cfg
            .use_uni_attn
            .then(|| UniCrossAttention::new(store, &encoder, cfg.tie_uni_attn, rng));
        let qformer = cfg.use_qformer.then(|| {
            QFormer::new(
                store,
                &model.encoder,
                cfg.num_queries,
                model.has_context_queries(),
                rng,
            )
        });
        let adapter = cfg.baseline_mp.then(|| store.add_zeros("ctr.adapter", &[d]));
        let width = model.head_width();
        let head = CtrHead {
            hidden: Linear::new(store, "ctr.head.hidden", width, cfg.head_hidden, rng),
            output: Linear::new(store, "ctr.head.output", cfg.head_hidden, 1, rng),
        };
        let model = Self {
            config: cfg.clone(),
            encoder,
            uni,
            qformer,
            context_tables,
            adapter,
            head,
        };
        model.apply_freeze(store);
        Ok(model)
    }

    /// Marks encoder parameters frozen or trainable per the configuration.
    pub fn apply_freeze<R: Real>(&self, store: &mut ParamStore<R>) {
        store.set_frozen_prefix("encoder.", self.config.freeze_encoder);
    }

    fn context_embedding<R: Real>(&self, g: &mut Graph<'_, R>, context: &[u32]) -> Result<Option<Var>> {
        if self.context_tables.is_empty() {
            return Ok(None);
        }
        sum_embeddings(g, &self.context_tables, &[context]).map(Some)
    }

    /// Candidate-independent part: encoder, pooling, query transformer.
    pub fn encode_user<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        seq: &InteractionSequence,
        context: &[u32],
    ) -> Result<UserState> {
        let x = self.encoder.embed_sequence(g, seq, None)?;
        let states = self.encoder.encode(g, x, None)?;
        self.summarize(g, states, context)
    }

    fn summarize<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        states: EncoderStates,
        context: &[u32],
    ) -> Result<UserState> {
        let last = states.final_state();
        let prev = g.set_stage(Stage::SequenceEncoder);
        let mut pooled = g.mean_rows(last, states.len)?;
        if let Some(a) = self.adapter {
            let a = g.param(a);
            pooled = g.add_row(pooled, a)?;
        }
        g.set_stage(prev);
        let context = self.context_embedding(g, context)?;
        let queries = match &self.qformer {
            Some(qf) => {
                let out = qf.forward(g, last, context, None)?;
                let d = g.value(out).cols();
                Some(g.reshape(out, &[1, qf.num_queries * d])?)
            }
            None => None,
        };
        Ok(UserState {
            states,
            pooled,
            queries,
            context,
        })
    }

    /// Logits `[B, 1]` for `targets` (each `M` item ids) against a cached user.
    pub fn score<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        user: &UserState,
        targets: &[&[u32]],
    ) -> Result<Var> {
        let b = targets.len();
        if b == 0 {
            return Err(Error::Contract("no candidates to score".into()));
        }
        let prev = g.set_stage(Stage::UniCrossAttn);
        let target = self.encoder.item_embedding(g, targets)?;
        g.set_stage(prev);
        let uni = match &self.uni {
            Some(u) => Some(u.forward(g, target, &user.states)?),
            None => None,
        };
        self.head_logits(g, user, target, uni, b)
    }

    fn head_logits<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        user: &UserState,
        target: Var,
        uni: Option<Var>,
        b: usize,
    ) -> Result<Var> {
        let prev = g.set_stage(Stage::Head);
        let mut parts = Vec::with_capacity(5);
        parts.extend(uni);
        if let Some(q) = user.queries {
            parts.push(g.repeat_rows(q, b)?);
        }
        parts.push(g.repeat_rows(user.pooled, b)?);
        parts.push(target);
        if let Some(c) = user.context {
            parts.push(g.repeat_rows(c, b)?);
        }
        let features = g.concat_cols(&parts)?;
        g.set_stage(prev);
        self.head.forward(g, features)
    }

    /// Logits for several candidates of one user; the user part runs once.
    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        seq: &InteractionSequence,
        context: &[u32],
        targets: &[&[u32]],
    ) -> Result<Var> {
        let user = self.encode_user(g, seq, context)?;
        self.score(g, &user, targets)
    }

    /// Click probability for one example.
    pub fn predict(&self, store: &ParamStore<f32>, ex: &CtrExample) -> Result<f64> {
        let mut g = Graph::inference(store);
        let z = self.forward(&mut g, &ex.sequence, &ex.context_features, &[&ex.target_item])?;
        Ok(crate::numerics::kernels::sigmoid(g.value(z).data()[0]) as f64)
    }

    /// Baseline scoring; refuses to run unless every encoder parameter is frozen.
    pub fn mp_baseline_forward(&self, store: &ParamStore<f32>, ex: &CtrExample) -> Result<f64> {
        if !self.config.baseline_mp {
            return Err(Error::Config("model was not built as the MP baseline".into()));
        }
        let unfrozen = store
            .iter()
            .find(|(_, p)| p.name.starts_with("encoder.") && !p.frozen);
        if let Some((_, p)) = unfrozen {
            return Err(Error::Config(format!(
                "MP baseline needs a frozen encoder, `{}` is trainable",
                p.name
            )));
        }
        self.predict(store, ex)
    }

    /// Scores one candidate by appending it to the sequence as an extra
    /// position that may read every event while no event may read it. The
    /// result equals [`CtrModel::forward`]; it exists to check that folding
    /// the user part out changes nothing.
    pub fn joint_forward<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        seq: &InteractionSequence,
        context: &[u32],
        target: &[u32],
    ) -> Result<JointOutput> {
        let Some(uni) = &self.uni else {
            let user = self.encode_user(g, seq, context)?;
            let logit = self.score(g, &user, &[target])?;
            return Ok(JointOutput {
                logit,
                sequence_states: user.states.layer_outputs,
            });
        };
        let n = seq.true_length();
        let seq_in = self.encoder.embed_sequence(g, seq, None)?;
        let t_emb = self.encoder.item_embedding(g, &[target])?;
        let pos = g.param(uni.target_position);
        let t_in = g.add_row(t_emb, pos)?;
        let mut x = g.concat_rows(&[seq_in, t_in])?;
        let mut allowed = vec![false; (n + 1) * (n + 1)];
        for r in 0..=n {
            for c in 0..n {
                allowed[r * (n + 1) + c] = true;
            }
        }
        let mask = AttnMask::Full {
            cols: n + 1,
            allowed,
        };
        let seq_rows: Vec<usize> = (0..n).collect();
        let split = |g: &mut Graph<'_, R>, x: Var| -> Result<(Var, Var)> {
            Ok((g.select_rows(x, &seq_rows)?, g.select_rows(x, &[n])?))
        };

        let mut layer_outputs = vec![seq_in];
        for (enc, u) in self.encoder.layers.iter().zip(&uni.layers) {
            let (xs, xt) = split(g, x)?;
            let hs = enc.norm1.forward(g, xs)?;
            let ht = u.norm1.forward(g, xt)?;
            let h = g.concat_rows(&[hs, ht])?;
            let k = enc.attn.key.forward(g, h)?;
            let v = enc.attn.value.forward(g, h)?;
            let qs = enc.attn.query.forward(g, hs)?;
            let qt = u.query.forward(g, ht)?;
            let q = g.concat_rows(&[qs, qt])?;
            let a = attention(g, q, k, v, self.encoder.config.num_heads, Some(&mask))?;
            let (as_, at) = split(g, a)?;
            let os = enc.attn.output.forward(g, as_)?;
            let ot = u.output.forward(g, at)?;
            let o = g.concat_rows(&[os, ot])?;
            x = g.add(x, o)?;
            let (xs, xt) = split(g, x)?;
            let hs = enc.norm2.forward(g, xs)?;
            let fs = enc.ffn.forward(g, hs)?;
            let ht = u.norm2.forward(g, xt)?;
            let ft = u.ffn.forward(g, ht)?;
            let f = g.concat_rows(&[fs, ft])?;
            x = g.add(x, f)?;
            layer_outputs.push(g.select_rows(x, &seq_rows)?);
        }
        let (_, target_state) = split(g, x)?;
        let states = EncoderStates {
            layer_outputs,
            keys: Vec::new(),
            values: Vec::new(),
            len: n,
        };
        let user = self.summarize(g, states, context)?;
        let logit = self.head_logits(g, &user, t_emb, Some(target_state), 1)?;
        Ok(JointOutput {
            logit,
            sequence_states: user.states.layer_outputs,
        })
    }
}

#[derive(Clone, Debug)]
pub struct JointOutput {
    /// `[1, 1]`.
    pub logit: Var,
    /// Embedded input and every layer's output for the sequence rows only.
    pub sequence_states: Vec<Var>,
}

/// `−y·ln p − (1−y)·ln(1−p)` evaluated through the clamped logit of `p`.
pub fn binary_ce_loss(p: f64, label: u8) -> f64 {
    let z = (p.ln() - (-p).ln_1p()).clamp(-40.0, 40.0);
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    if label == 1 {
        softplus(-z)
    } else {
        softplus(z)
    }
}

#[cfg(test)]
mod tests;
