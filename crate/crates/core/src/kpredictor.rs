//! Session-count prediction from a conversation's representations.
//!
//! `d_U` is an attention-pooled summary of the `v_i`; it is joined with the
//! speaker and utterance counts (each divided by the window length) and fed
//! through `relu(W3 x + b3)` and `W2` to give one logit per `K` in `1..=M`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Tape, Tensor, Var};
use crate::corpus::WINDOW;
use crate::error::{Error, Result};
use crate::nn::{attention_pool, uniform_init, Attention, Span};

pub const DEFAULT_K_HIDDEN: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct KPredictorParams<T = Tensor> {
    pub attention: Attention<T>,
    /// `W3`, `[D + 2, hidden]`
    pub hidden_w: T,
    pub hidden_b: T,
    /// `W2`, `[hidden, M]`
    pub out_w: T,
}

impl KPredictorParams<Tensor> {
    pub fn init(input_dim: usize, attention_dim: usize, hidden: usize, max_sessions: usize, rng: &mut impl Rng) -> Self {
        KPredictorParams {
            attention: Attention::init(input_dim, attention_dim, rng),
            hidden_w: uniform_init(input_dim + 2, hidden, input_dim + 2, rng),
            hidden_b: Tensor::zeros(&[1, hidden]),
            out_w: uniform_init(hidden, max_sessions, hidden, rng),
        }
    }

    pub fn max_sessions(&self) -> usize {
        self.out_w.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.attention.proj.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> KPredictorParams<Var> {
        self.map(&mut |t| tape.param(t.clone()))
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> KPredictorParams<Var> {
        self.map(&mut |t| tape.constant(t.clone()))
    }
}

impl<T> KPredictorParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> KPredictorParams<U> {
        KPredictorParams {
            attention: self.attention.map(f),
            hidden_w: f(&self.hidden_w),
            hidden_b: f(&self.hidden_b),
            out_w: f(&self.out_w),
        }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.attention.named(&format!("{prefix}.attention"), out);
        out.push((format!("{prefix}.hidden_w"), &self.hidden_w));
        out.push((format!("{prefix}.hidden_b"), &self.hidden_b));
        out.push((format!("{prefix}.out_w"), &self.out_w));
    }

    pub fn slots_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.attention.slots_mut(out);
        out.push(&mut self.hidden_w);
        out.push(&mut self.hidden_b);
        out.push(&mut self.out_w);
    }
}

/// Probabilities of `K = 1..=M`, index `k - 1` holding `P(K = k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KDistribution(pub Vec<f64>);

impl KDistribution {
    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }
}

/// `[1, M]` logits for the conversation whose representations are `v`
/// (`[n, D]`). With `outer_activation` the logits pass through a relu.
pub fn k_logits(
    tape: &mut Tape,
    p: &KPredictorParams<Var>,
    v: Var,
    speakers: usize,
    outer_activation: bool,
) -> Result<Var> {
    let n = tape.shape(v)[0];
    if n == 0 || speakers == 0 {
        return Err(Error::domain("k_logits", "needs at least one utterance and one speaker"));
    }
    let (pooled, _) = attention_pool(tape, &p.attention, v, &[Span { start: 0, len: n }])?;
    let meta = tape.constant(Tensor::from_parts(
        vec![1, 2],
        vec![speakers as f64 / WINDOW as f64, n as f64 / WINDOW as f64],
    ));
    let x = tape.concat(&[pooled, meta], 1)?;
    let hidden = tape.matmul(x, p.hidden_w)?;
    let hidden = tape.add(hidden, p.hidden_b)?;
    let hidden = tape.relu(hidden)?;
    let q = tape.matmul(hidden, p.out_w)?;
    if outer_activation {
        tape.relu(q)
    } else {
        Ok(q)
    }
}

/// `-log P(K = gold_k)` on the tape.
pub fn k_loss_on_tape(tape: &mut Tape, logits: Var, gold_k: usize) -> Result<Var> {
    let m = tape.shape(logits)[1];
    check_gold(gold_k, m)?;
    let probs = tape.softmax(logits)?;
    let logp = tape.log(probs)?;
    let mut onehot = vec![0.0; m];
    onehot[gold_k - 1] = 1.0;
    let mask = tape.constant(Tensor::from_parts(vec![1, m], onehot));
    let picked = tape.dot(logp, mask)?;
    tape.scale(picked, -1.0)
}

fn check_gold(gold_k: usize, m: usize) -> Result<()> {
    if gold_k == 0 || gold_k > m {
        return Err(Error::domain(
            "k_loss",
            format!("gold K = {gold_k} outside 1..={m}; raise max_sessions"),
        ));
    }
    Ok(())
}

pub fn predict_k_distribution(
    v: &[Vec<f64>],
    speakers: usize,
    params: &KPredictorParams,
    outer_activation: bool,
) -> Result<KDistribution> {
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let v = tape.constant(Tensor::from_rows(v)?);
    let q = k_logits(&mut tape, &p, v, speakers, outer_activation)?;
    let mut probs = tape.value(q).data().to_vec();
    softmax_in_place(&mut probs);
    Ok(KDistribution(probs))
}

/// Most likely `K` not exceeding `n`; ties go to the smaller `K`.
pub fn predict_k(distribution: &KDistribution, n: usize) -> usize {
    let limit = n.max(1).min(distribution.0.len());
    let mut best = 0;
    for k in 1..limit {
        if distribution.0[k] > distribution.0[best] {
            best = k;
        }
    }
    best + 1
}

pub fn k_loss(distribution: &KDistribution, gold_k: usize) -> Result<f64> {
    check_gold(gold_k, distribution.0.len())?;
    let p = distribution.0[gold_k - 1];
    if p <= 0.0 {
        return Err(Error::domain("k_loss", "gold class has zero probability"));
    }
    Ok(-p.ln())
}
