//! Readout heads on encoder contexts: a linear layer for CTC, or a small
//! recurrent prediction network plus joint network for the transducer.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ModelParams, Partition, Real, Tensor, Var};

use super::{ctc_loss, rnnt_loss, LabelSeq, Vocab, BLANK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Ctc,
    Rnnt,
}

/// One output head. Parameter names are prefixed with `name`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub name: String,
    pub vocab: Vocab,
    /// Including the blank.
    pub vocab_size: usize,
    pub objective: Objective,
    /// Hidden width of the transducer prediction and joint networks.
    pub joint_dim: usize,
}

fn init_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<f32> {
    Tensor::randn(&[rows, cols], (1.0 / rows as f64).sqrt(), rng)
}

impl HeadSpec {
    fn p(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.name)
    }

    pub fn init_params<R: Rng + ?Sized>(
        &self,
        d_model: usize,
        partition: Partition,
        params: &mut ModelParams,
        rng: &mut R,
    ) -> Result<()> {
        let (v, h) = (self.vocab_size, self.joint_dim);
        match self.objective {
            Objective::Ctc => {
                params.insert(&self.p("w"), init_matrix(d_model, v, rng), partition)?;
                params.insert(&self.p("b"), Tensor::zeros(&[v]), partition)?;
            }
            Objective::Rnnt => {
                params.insert(&self.p("enc_w"), init_matrix(d_model, h, rng), partition)?;
                params.insert(&self.p("enc_b"), Tensor::zeros(&[h]), partition)?;
                params.insert(&self.p("emb"), Tensor::randn(&[v, h], 0.5, rng), partition)?;
                params.insert(&self.p("rnn_w"), init_matrix(h, h, rng), partition)?;
                params.insert(&self.p("rnn_b"), Tensor::zeros(&[h]), partition)?;
                params.insert(&self.p("pred_w"), init_matrix(h, h, rng), partition)?;
                params.insert(&self.p("out_w"), init_matrix(h, v, rng), partition)?;
                params.insert(&self.p("out_b"), Tensor::zeros(&[v]), partition)?;
            }
        }
        Ok(())
    }

    /// Frame logits `[T×V]` of a CTC head.
    pub fn ctc_logits<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ModelParams,
        contexts: Var,
    ) -> Result<Var> {
        if self.objective != Objective::Ctc {
            return Err(Error::arg(format!("head {} is not a CTC head", self.name)));
        }
        let w = g.param(params, &self.p("w"))?;
        let b = g.param(params, &self.p("b"))?;
        g.linear(contexts, w, Some(b))
    }

    /// Prediction-network states `[(U+1)×h]` for the label history `ids`.
    fn prediction<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ModelParams,
        ids: &[usize],
    ) -> Result<Var> {
        let emb = g.param(params, &self.p("emb"))?;
        let rnn_w = g.param(params, &self.p("rnn_w"))?;
        let rnn_b = g.param(params, &self.p("rnn_b"))?;
        let mut states = Vec::with_capacity(ids.len() + 1);
        let mut prev: Option<Var> = None;
        for &y in std::iter::once(&BLANK).chain(ids) {
            let mut x = g.gather_rows(emb, &[y])?;
            if let Some(h) = prev {
                let r = g.matmul(h, rnn_w)?;
                x = g.add(x, r)?;
            }
            let x = g.add_row(x, rnn_b)?;
            let h = g.tanh(x);
            states.push(h);
            prev = Some(h);
        }
        g.concat_rows(&states)
    }

    /// Joint logits `[T×(U+1)×V]` of a transducer head.
    pub fn joint_logits<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ModelParams,
        contexts: Var,
        ids: &[usize],
    ) -> Result<Var> {
        if self.objective != Objective::Rnnt {
            return Err(Error::arg(format!(
                "head {} is not a transducer head",
                self.name
            )));
        }
        let enc_w = g.param(params, &self.p("enc_w"))?;
        let enc_b = g.param(params, &self.p("enc_b"))?;
        let pred_w = g.param(params, &self.p("pred_w"))?;
        let out_w = g.param(params, &self.p("out_w"))?;
        let out_b = g.param(params, &self.p("out_b"))?;
        let enc = g.linear(contexts, enc_w, Some(enc_b))?;
        let pred = self.prediction(g, params, ids)?;
        let pred = g.matmul(pred, pred_w)?;
        let joint = g.outer_add(enc, pred)?;
        let joint = g.tanh(joint);
        g.linear(joint, out_w, Some(out_b))
    }

    pub fn loss<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ModelParams,
        contexts: Var,
        target: &LabelSeq,
    ) -> Result<Var> {
        if target.vocab != self.vocab {
            return Err(Error::arg(format!(
                "head {} expects {} labels",
                self.name,
                self.vocab.as_str()
            )));
        }
        target.validate(self.vocab_size)?;
        match self.objective {
            Objective::Ctc => {
                let logits = self.ctc_logits(g, params, contexts)?;
                ctc_loss(g, logits, target)
            }
            Objective::Rnnt => {
                let joint = self.joint_logits(g, params, contexts, &target.ids)?;
                rnnt_loss(g, joint, target)
            }
        }
    }

    /// Greedy transducer decoding, at most `max_per_frame` labels per frame.
    pub fn rnnt_greedy(
        &self,
        params: &ModelParams,
        contexts: &Tensor<f32>,
        max_per_frame: usize,
    ) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let t_len = contexts.shape()[0];
        for t in 0..t_len {
            for _ in 0..max_per_frame {
                let mut g = Graph::<f32>::new();
                let row = g.constant(Tensor::from_parts(
                    vec![1, contexts.shape()[1]],
                    contexts.row(t).to_vec(),
                ));
                let joint = self.joint_logits(&mut g, params, row, &out)?;
                let (_, u1, v) = (1, out.len() + 1, self.vocab_size);
                let last = &g.value(joint).data()[(u1 - 1) * v..u1 * v];
                let best = argmax(last);
                if best == BLANK {
                    break;
                }
                out.push(best);
            }
        }
        Ok(out)
    }
}

pub(crate) fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Sum of the losses of every head. Heads absent from `heads` contribute
/// nothing; an enabled head without a target is an error.
pub fn aux_loss<F: Real>(
    g: &mut Graph<F>,
    params: &ModelParams,
    contexts: Var,
    heads: &[HeadSpec],
    targets: &BTreeMap<Vocab, LabelSeq>,
) -> Result<Vec<(Vocab, Var)>> {
    heads
        .iter()
        .map(|h| {
            let target = targets.get(&h.vocab).ok_or_else(|| {
                Error::arg(format!(
                    "missing {} target for head {}",
                    h.vocab.as_str(),
                    h.name
                ))
            })?;
            Ok((h.vocab, h.loss(g, params, contexts, target)?))
        })
        .collect()
}
