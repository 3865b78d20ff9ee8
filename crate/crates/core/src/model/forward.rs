use std::borrow::Cow;

use ndarray::{s, Array1, Array2, ArrayView1};

use super::config::{LoraTarget, BOS};
use super::params::{LoraAdapter, ParameterSet};
use crate::error::{Error, Result};

/// Numerically stable softmax.
pub(crate) fn softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut e = x.mapv(|v| (v - max).exp());
    let z = e.sum();
    e /= z;
    e
}

/// Effective weights of a backbone, with an optional adapter folded in.
///
/// Targets without an adapter are borrowed; adapted targets hold
/// `W + (α/r)·B·A`.
#[derive(Clone, Debug)]
pub struct ModelView<'a> {
    pub(crate) w_enc: Cow<'a, Array2<f64>>,
    pub(crate) embedding: &'a Array2<f64>,
    pub(crate) w_q: Cow<'a, Array2<f64>>,
    pub(crate) w_h: Cow<'a, Array2<f64>>,
    pub(crate) b_h: &'a Array1<f64>,
    pub(crate) w_o: Cow<'a, Array2<f64>>,
    pub(crate) b_o: &'a Array1<f64>,
}

/// Encoder states for one source sequence, `S × d_h`.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub states: Array2<f64>,
}

/// Everything computed at one decoder step.
#[derive(Clone, Debug)]
pub struct Step {
    pub query: Array1<f64>,
    /// Attention weights over source positions.
    pub attention: Array1<f64>,
    pub context: Array1<f64>,
    /// The context representation `h_t`; also the datastore key.
    pub hidden: Array1<f64>,
    pub logits: Array1<f64>,
}

/// Teacher-forced outputs, one entry per decoder step.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub hidden: Vec<Array1<f64>>,
    pub logits: Vec<Array1<f64>>,
}

impl<'a> ModelView<'a> {
    pub fn new(params: &'a ParameterSet, adapter: Option<&LoraAdapter>) -> Result<Self> {
        let effective = |t: LoraTarget| -> Result<Cow<'a, Array2<f64>>> {
            let base = params.target(t);
            match adapter.and_then(|a| a.delta(t)) {
                None => Ok(Cow::Borrowed(base)),
                Some(delta) if delta.dim() == base.dim() => Ok(Cow::Owned(base + &delta)),
                Some(delta) => Err(Error::Shape(format!(
                    "adapter for {} has shape {:?}, target is {:?}",
                    t.name(),
                    delta.dim(),
                    base.dim()
                ))),
            }
        };
        Ok(ModelView {
            w_enc: effective(LoraTarget::Enc)?,
            embedding: &params.embedding,
            w_q: effective(LoraTarget::Query)?,
            w_h: effective(LoraTarget::Hidden)?,
            b_h: &params.b_h,
            w_o: effective(LoraTarget::Output)?,
            b_o: &params.b_o,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.nrows()
    }

    /// `enc_s = tanh(W_enc · frame_s)` for every source position.
    pub fn encode(&self, frames: &Array2<f64>) -> Result<Encoded> {
        if frames.nrows() == 0 {
            return Err(Error::Empty("source frames"));
        }
        if frames.ncols() != self.feature_dim() {
            return Err(Error::FrameDim {
                expected: self.feature_dim(),
                got: frames.ncols(),
            });
        }
        let states = frames.dot(&self.w_enc.t()).mapv(f64::tanh);
        Ok(Encoded { states })
    }

    /// One decoder step given the previous token.
    pub fn step(&self, enc: &Encoded, prev: u32) -> Result<Step> {
        if prev as usize >= self.vocab_size() {
            return Err(Error::TokenOutOfRange {
                id: prev,
                vocab: self.vocab_size(),
            });
        }
        let dh = self.hidden_dim();
        let emb = self.embedding.row(prev as usize);
        let query = self.w_q.dot(&emb);
        let attention = softmax(enc.states.dot(&query).view());
        let context = enc.states.t().dot(&attention);
        let pre = self.w_h.slice(s![.., ..dh]).dot(&emb)
            + self.w_h.slice(s![.., dh..]).dot(&context)
            + self.b_h;
        let hidden = pre.mapv(f64::tanh);
        let logits = self.w_o.dot(&hidden) + self.b_o;
        Ok(Step {
            query,
            attention,
            context,
            hidden,
            logits,
        })
    }
}

/// Teacher-forced pass over `prev_tokens` (which must start with BOS).
pub fn forward(
    params: &ParameterSet,
    adapter: Option<&LoraAdapter>,
    frames: &Array2<f64>,
    prev_tokens: &[u32],
) -> Result<ForwardOutput> {
    if prev_tokens.first() != Some(&BOS) {
        return Err(Error::Input("decoder input must begin with BOS".into()));
    }
    let view = ModelView::new(params, adapter)?;
    let enc = view.encode(frames)?;
    let mut out = ForwardOutput {
        hidden: Vec::with_capacity(prev_tokens.len()),
        logits: Vec::with_capacity(prev_tokens.len()),
    };
    for &prev in prev_tokens {
        let step = view.step(&enc, prev)?;
        out.hidden.push(step.hidden);
        out.logits.push(step.logits);
    }
    Ok(out)
}
