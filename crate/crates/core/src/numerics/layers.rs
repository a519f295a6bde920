use rand::Rng;

use super::{AttnMask, Graph, ParamId, ParamStore, Real, Var};
use crate::error::{Error, Result};

/// `y = x · W + b` with `W: [in, out]`; `b` is optional.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut G,
    ) -> Self {
        Self {
            weight: store.add_normal(format!("{name}.weight"), &[in_dim, out_dim], rng),
            bias: Some(store.add_zeros(format!("{name}.bias"), &[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn without_bias<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut G,
    ) -> Self {
        Self {
            weight: store.add_normal(format!("{name}.weight"), &[in_dim, out_dim], rng),
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_ones(format!("{name}.gain"), &[dim]),
            bias: store.add_zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut G,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Query/key/value/output projections of one multi-head attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut G,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            // A key bias shifts every score of a row equally; softmax ignores it.
            key: Linear::without_bias(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
            heads,
        }
    }
}

/// Scaled dot-product attention over `heads` equal column groups.
/// `q: [nq, d]`, `k, v: [nk, d]`; returns the concatenated heads `[nq, d]`
/// before any output projection.
pub fn attention<R: Real>(
    g: &mut Graph<'_, R>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&AttnMask>,
) -> Result<Var> {
    let d = g.value(q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{d} features not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let scale = R::of(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.columns(q, h * dh, dh)?,
                g.columns(k, h * dh, dh)?,
                g.columns(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let probs = g.softmax(scores, mask)?;
        outs.push(g.matmul(probs, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}
