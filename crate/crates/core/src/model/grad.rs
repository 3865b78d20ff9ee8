use ndarray::{s, Array1, Array2, ArrayView1};

use super::config::{BOS, EOS};
use super::forward::{softmax, ModelView};
use super::params::{LoraAdapter, LoraFactors, ParameterSet, Tensors};
use crate::data::Example;
use crate::error::{Error, Result};

/// Gradient of the mean token NLL with respect to the trainable set.
///
/// Without an adapter every backbone weight is trainable; with one, only the
/// LoRA factors are, and the container has no entries for backbone weights.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Gradients {
    Full(ParameterSet),
    Lora(LoraAdapter),
}

impl Gradients {
    pub fn full(&self) -> Option<&ParameterSet> {
        match self {
            Gradients::Full(p) => Some(p),
            Gradients::Lora(_) => None,
        }
    }

    pub fn lora(&self) -> Option<&LoraAdapter> {
        match self {
            Gradients::Lora(a) => Some(a),
            Gradients::Full(_) => None,
        }
    }
}

impl Tensors for Gradients {
    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Gradients::Full(p) => p.tensors(),
            Gradients::Lora(a) => a.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Gradients::Full(p) => p.tensors_mut(),
            Gradients::Lora(a) => a.tensors_mut(),
        }
    }
}

fn add_outer(m: &mut Array2<f64>, left: ArrayView1<f64>, right: ArrayView1<f64>) {
    for (mut row, &l) in m.outer_iter_mut().zip(left.iter()) {
        if l != 0.0 {
            row.scaled_add(l, &right);
        }
    }
}

fn log_softmax_at(logits: &Array1<f64>, i: usize) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let z: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    logits[i] - max - z.ln()
}

/// Backpropagates one example into `g` (gradients w.r.t. the effective
/// weights); returns the summed NLL of its target positions.
fn backprop_example(
    view: &ModelView,
    example: &Example,
    scale: f64,
    g: &mut ParameterSet,
) -> Result<f64> {
    let dh = view.hidden_dim();
    let enc = view.encode(&example.frames)?;
    let mut d_enc = Array2::<f64>::zeros(enc.states.dim());
    let mut nll = 0.0;

    let prevs = std::iter::once(BOS).chain(example.tokens.iter().copied());
    let targets = example.tokens.iter().copied().chain(std::iter::once(EOS));
    for (prev, target) in prevs.zip(targets) {
        let step = view.step(&enc, prev)?;
        let tgt = target as usize;
        if tgt >= view.vocab_size() {
            return Err(Error::TokenOutOfRange {
                id: target,
                vocab: view.vocab_size(),
            });
        }
        nll -= log_softmax_at(&step.logits, tgt);

        let mut d_logits = softmax(step.logits.view());
        d_logits[tgt] -= 1.0;
        d_logits *= scale;

        add_outer(&mut g.w_o, d_logits.view(), step.hidden.view());
        g.b_o += &d_logits;
        let d_hidden = view.w_o.t().dot(&d_logits);
        let d_pre = &d_hidden * &step.hidden.mapv(|h| 1.0 - h * h);

        let emb = view.embedding.row(prev as usize);
        for (mut row, &l) in g.w_h.outer_iter_mut().zip(d_pre.iter()) {
            row.slice_mut(s![..dh]).scaled_add(l, &emb);
            row.slice_mut(s![dh..]).scaled_add(l, &step.context);
        }
        g.b_h += &d_pre;
        let d_cat = view.w_h.t().dot(&d_pre);
        let mut d_emb = d_cat.slice(s![..dh]).to_owned();
        let d_context = d_cat.slice(s![dh..]);

        // context = Σ_s a_s · enc_s
        add_outer(&mut d_enc, step.attention.view(), d_context);
        let d_att = enc.states.dot(&d_context);
        let mean = step.attention.dot(&d_att);
        let d_score = &step.attention * &d_att.mapv(|x| x - mean);

        // score_s = enc_s · query
        add_outer(&mut d_enc, d_score.view(), step.query.view());
        let d_query = enc.states.t().dot(&d_score);
        add_outer(&mut g.w_q, d_query.view(), emb);
        d_emb += &view.w_q.t().dot(&d_query);

        g.embedding.row_mut(prev as usize).scaled_add(1.0, &d_emb);
    }

    // enc = tanh(frames · W_encᵀ)
    let d_pre_enc = &d_enc * &enc.states.mapv(|e| 1.0 - e * e);
    g.w_enc += &d_pre_enc.t().dot(&example.frames);
    Ok(nll)
}

/// Mean negative log-likelihood over every target position of the batch
/// (EOS included), with its analytic gradient.
pub fn loss_and_grads(
    params: &ParameterSet,
    adapter: Option<&LoraAdapter>,
    batch: &[Example],
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let positions: usize = batch.iter().map(|e| e.tokens.len() + 1).sum();
    let scale = 1.0 / positions as f64;
    let view = ModelView::new(params, adapter)?;

    let mut g = ParameterSet {
        w_enc: Array2::zeros(view.w_enc.dim()),
        embedding: Array2::zeros(view.embedding.dim()),
        w_q: Array2::zeros(view.w_q.dim()),
        w_h: Array2::zeros(view.w_h.dim()),
        b_h: Array1::zeros(view.b_h.dim()),
        w_o: Array2::zeros(view.w_o.dim()),
        b_o: Array1::zeros(view.b_o.dim()),
    };
    let mut nll = 0.0;
    for example in batch {
        nll += backprop_example(&view, example, scale, &mut g)?;
    }
    let nll = nll * scale;

    let grads = match adapter {
        None => Gradients::Full(g),
        Some(adapter) => {
            // W' = W + s·B·A  ⇒  ∂B = s·G·Aᵀ, ∂A = s·Bᵀ·G
            let s = adapter.scale();
            let factors = adapter
                .factors
                .iter()
                .map(|(t, f)| {
                    let gw = g.target(*t);
                    let b = gw.dot(&f.a.t()) * s;
                    let a = f.b.t().dot(gw) * s;
                    (*t, LoraFactors { a, b })
                })
                .collect();
            Gradients::Lora(LoraAdapter {
                rank: adapter.rank,
                alpha: adapter.alpha,
                factors,
            })
        }
    };
    Ok((nll, grads))
}
