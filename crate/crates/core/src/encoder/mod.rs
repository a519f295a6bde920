//! Bidirectional sequence encoder with separate item and behavior masks.
//!
//! Each event embeds as `x_i + s_i + p_i`: the sum of its item-feature
//! embeddings, the sum of its behavior-feature embeddings, and a learned
//! position. Masking swaps `x_i` (or `s_i`) for a learned mask vector while
//! the complementary part stays visible. Two heads recover the primary item
//! id and every behavior attribute at masked positions.

use rand::Rng;

use crate::datamodel::{FeatureSchema, InteractionSequence, MaskPlan};
use crate::error::{Error, Result};
use crate::numerics::{
    attention, Attention, AttnMask, FeedForward, Graph, LayerNorm, Linear, ParamId, ParamStore,
    Real, Stage, Var,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_multiplier: usize,
    /// Maximum sequence length L.
    pub max_seq_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_model: 64,
            num_heads: 2,
            ffn_multiplier: 4,
            max_seq_len: 50,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model < 2 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be >= 2 and divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.ffn_multiplier == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("ffn_multiplier and max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        self.d_model * self.ffn_multiplier
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

/// Parameter handles of the encoder. Values live in a [`ParamStore`] under
/// the `encoder.` prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceEncoder {
    pub config: EncoderConfig,
    pub schema: FeatureSchema,
    pub item_tables: Vec<ParamId>,
    pub behavior_tables: Vec<ParamId>,
    pub position: ParamId,
    pub mask_item: ParamId,
    pub mask_behavior: ParamId,
    pub layers: Vec<EncoderLayer>,
}

/// Per-layer outputs of one [`SequenceEncoder::encode`] call.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    /// `layer_outputs[0]` is the embedded input, `layer_outputs[i + 1]` the
    /// output of layer `i`.
    pub layer_outputs: Vec<Var>,
    /// Key projection computed inside each layer.
    pub keys: Vec<Var>,
    /// Value projection computed inside each layer.
    pub values: Vec<Var>,
    pub len: usize,
}

impl EncoderStates {
    pub fn final_state(&self) -> Var {
        *self.layer_outputs.last().expect("at least the embedding")
    }
}

impl SequenceEncoder {
    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        config: &EncoderConfig,
        schema: &FeatureSchema,
        rng: &mut G,
    ) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        let d = config.d_model;
        let item_tables = schema
            .item_vocab
            .iter()
            .enumerate()
            .map(|(k, &v)| store.add_normal(format!("encoder.item_emb.{k}"), &[v, d], rng))
            .collect();
        let behavior_tables = schema
            .behavior_vocab
            .iter()
            .enumerate()
            .map(|(k, &v)| store.add_normal(format!("encoder.behavior_emb.{k}"), &[v, d], rng))
            .collect();
        let position = store.add_normal("encoder.position", &[config.max_seq_len, d], rng);
        let mask_item = store.add_normal("encoder.mask_item", &[d], rng);
        let mask_behavior = store.add_normal("encoder.mask_behavior", &[d], rng);
        let layers = (0..config.num_layers)
            .map(|i| {
                let p = format!("encoder.layer{i}");
                EncoderLayer {
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d),
                    attn: Attention::new(store, &format!("{p}.attn"), d, config.num_heads, rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, config.ffn_hidden(), rng),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            schema: schema.clone(),
            item_tables,
            behavior_tables,
            position,
            mask_item,
            mask_behavior,
            layers,
        })
    }

    /// Sum of the item-feature embeddings for each row of `ids` (`[rows][M]`).
    pub fn item_embedding<R: Real>(&self, g: &mut Graph<'_, R>, ids: &[&[u32]]) -> Result<Var> {
        sum_embeddings(g, &self.item_tables, ids)
    }

    /// Fused input rows `[n, d]` for a sequence's `n` real events.
    pub fn embed_sequence<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        seq: &InteractionSequence,
        plan: Option<&MaskPlan>,
    ) -> Result<Var> {
        let n = seq.true_length();
        if n == 0 {
            return Err(Error::Contract("cannot embed an empty sequence".into()));
        }
        if n > self.config.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {n} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(p) = plan {
            if p.item_positions.iter().chain(&p.behavior_positions).any(|&i| i >= n) {
                return Err(Error::Contract("mask position beyond true length".into()));
            }
        }
        let prev = g.set_stage(Stage::SequenceEncoder);
        let items: Vec<&[u32]> = seq.events.iter().map(|e| e.item_features.as_slice()).collect();
        let behaviors: Vec<&[u32]> = seq
            .events
            .iter()
            .map(|e| e.behavior_features.as_slice())
            .collect();
        let mut x = sum_embeddings(g, &self.item_tables, &items)?;
        let mut s = sum_embeddings(g, &self.behavior_tables, &behaviors)?;
        if let Some(p) = plan {
            if !p.item_positions.is_empty() {
                let m = g.param(self.mask_item);
                x = g.replace_rows(x, m, &p.item_positions)?;
            }
            if !p.behavior_positions.is_empty() {
                let m = g.param(self.mask_behavior);
                s = g.replace_rows(s, m, &p.behavior_positions)?;
            }
        }
        let pos_table = g.param(self.position);
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather(pos_table, &positions)?;
        let xs = g.add(x, s)?;
        let out = g.add(xs, pos);
        g.set_stage(prev);
        out
    }

    /// Right-pads embedded rows `[n, d]` with zero rows up to `max_seq_len`
    /// and returns the key mask that hides the padding.
    pub fn pad<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<(Var, AttnMask)> {
        let n = g.value(x).rows();
        let l = self.config.max_seq_len;
        let keys: Vec<bool> = (0..l).map(|i| i < n).collect();
        if n == l {
            return Ok((x, AttnMask::Keys(keys)));
        }
        let zeros = g.input(crate::numerics::Tensor::zeros(&[l - n, self.config.d_model]));
        Ok((g.concat_rows(&[x, zeros])?, AttnMask::Keys(keys)))
    }

    /// Runs every pre-norm layer over `inputs: [n, d]`. `key_mask` hides
    /// padded key positions when the caller passes padded rows.
    pub fn encode<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        inputs: Var,
        key_mask: Option<&AttnMask>,
    ) -> Result<EncoderStates> {
        let prev = g.set_stage(Stage::SequenceEncoder);
        let len = g.value(inputs).rows();
        let mut states = EncoderStates {
            layer_outputs: vec![inputs],
            keys: Vec::with_capacity(self.layers.len()),
            values: Vec::with_capacity(self.layers.len()),
            len,
        };
        let mut x = inputs;
        for layer in &self.layers {
            let h = layer.norm1.forward(g, x)?;
            let q = layer.attn.query.forward(g, h)?;
            let k = layer.attn.key.forward(g, h)?;
            let v = layer.attn.value.forward(g, h)?;
            let a = attention(g, q, k, v, layer.attn.heads, key_mask)?;
            let o = layer.attn.output.forward(g, a)?;
            x = g.add(x, o)?;
            let h = layer.norm2.forward(g, x)?;
            let f = layer.ffn.forward(g, h)?;
            x = g.add(x, f)?;
            states.keys.push(k);
            states.values.push(v);
            states.layer_outputs.push(x);
        }
        g.set_stage(prev);
        Ok(states)
    }
}

pub(crate) fn sum_embeddings<R: Real>(
    g: &mut Graph<'_, R>,
    tables: &[ParamId],
    ids: &[&[u32]],
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (k, &table) in tables.iter().enumerate() {
        let col: Vec<usize> = ids
            .iter()
            .map(|row| {
                row.get(k)
                    .map(|&v| v as usize)
                    .ok_or_else(|| Error::Contract(format!("missing feature {k}")))
            })
            .collect::<Result<_>>()?;
        let t = g.param(table);
        let e = g.gather(t, &col)?;
        acc = Some(match acc {
            None => e,
            Some(a) => g.add(a, e)?,
        });
    }
    acc.ok_or_else(|| Error::Contract("no feature tables".into()))
}

/// Mask-prediction heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PretrainHeads {
    pub item: Linear,
    pub behavior: Vec<Linear>,
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainLoss {
    pub item: Var,
    pub behavior: Var,
    pub total: Var,
}

/// Scalar values of a [`PretrainLoss`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PretrainLossBreakdown {
    pub item_loss: f64,
    pub behavior_loss: f64,
    pub total: f64,
}

impl PretrainHeads {
    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        config: &EncoderConfig,
        schema: &FeatureSchema,
        rng: &mut G,
    ) -> Self {
        let d = config.d_model;
        Self {
            item: Linear::new(store, "pretrain.item_head", d, schema.item_vocab[0], rng),
            behavior: schema
                .behavior_vocab
                .iter()
                .enumerate()
                .map(|(k, &v)| Linear::new(store, &format!("pretrain.behavior_head.{k}"), d, v, rng))
                .collect(),
        }
    }

    /// Mean cross-entropy over item-masked positions plus `behavior_weight`
    /// times the mean over every behavior attribute of behavior-masked positions.
    pub fn loss<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        hidden: Var,
        plan: &MaskPlan,
        behavior_weight: f64,
    ) -> Result<PretrainLoss> {
        if plan.item_positions.is_empty() || plan.behavior_positions.is_empty() {
            return Err(Error::Contract("pretraining loss needs both mask sets non-empty".into()));
        }
        let prev = g.set_stage(Stage::Pretrain);
        let item_rows = g.select_rows(hidden, &plan.item_positions)?;
        let logits = self.item.forward(g, item_rows)?;
        let targets: Vec<usize> = plan.item_targets.iter().map(|&t| t as usize).collect();
        let item = g.cross_entropy(logits, &targets)?;

        let behavior_rows = g.select_rows(hidden, &plan.behavior_positions)?;
        let mut parts = Vec::with_capacity(self.behavior.len());
        for (k, head) in self.behavior.iter().enumerate() {
            let logits = head.forward(g, behavior_rows)?;
            let targets: Vec<usize> = plan.behavior_targets.iter().map(|b| b[k] as usize).collect();
            parts.push(g.cross_entropy(logits, &targets)?);
        }
        let mut behavior = parts[0];
        for &p in &parts[1..] {
            behavior = g.add(behavior, p)?;
        }
        let behavior = g.scale(behavior, R::of(1.0 / parts.len() as f64));
        let weighted = g.scale(behavior, R::of(behavior_weight));
        let total = g.add(item, weighted)?;
        g.set_stage(prev);
        Ok(PretrainLoss {
            item,
            behavior,
            total,
        })
    }

    pub fn breakdown<R: Real>(g: &Graph<'_, R>, loss: &PretrainLoss) -> PretrainLossBreakdown {
        let v = |x: Var| g.value(x).data()[0].as_f64();
        PretrainLossBreakdown {
            item_loss: v(loss.item),
            behavior_loss: v(loss.behavior),
            total: v(loss.total),
        }
    }
}

/// Encoder plus mask-prediction heads.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub encoder: SequenceEncoder,
    pub heads: PretrainHeads,
    pub behavior_weight: f64,
}

impl PretrainModel {
    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        config: &EncoderConfig,
        schema: &FeatureSchema,
        behavior_weight: f64,
        rng: &mut G,
    ) -> Result<Self> {
        let encoder = SequenceEncoder::new(store, config, schema, rng)?;
        let heads = PretrainHeads::new(store, config, schema, rng);
        Ok(Self {
            encoder,
            heads,
            behavior_weight,
        })
    }

    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        seq: &InteractionSequence,
        plan: &MaskPlan,
    ) -> Result<PretrainLoss> {
        let x = self.encoder.embed_sequence(g, seq, Some(plan))?;
        let states = self.encoder.encode(g, x, None)?;
        self.heads
            .loss(g, states.final_state(), plan, self.behavior_weight)
    }

    /// Arg-max item id predicted at each item-masked position.
    pub fn predict_masked_items(
        &self,
        store: &ParamStore<f32>,
        seq: &InteractionSequence,
        plan: &MaskPlan,
    ) -> Result<Vec<u32>> {
        let mut g = Graph::inference(store);
        let x = self.encoder.embed_sequence(&mut g, seq, Some(plan))?;
        let states = self.encoder.encode(&mut g, x, None)?;
        let rows = g.select_rows(states.final_state(), &plan.item_positions)?;
        let logits = self.heads.item.forward(&mut g, rows)?;
        let t = g.value(logits);
        Ok((0..t.rows())
            .map(|r| {
                let row = t.row(r);
                (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .unwrap_or(0) as u32
            })
            .collect())
    }
}
