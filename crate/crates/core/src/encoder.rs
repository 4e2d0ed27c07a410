//! Hierarchical utterance/context encoder.
//!
//! Tokens are embedded, run through a token-level BiLSTM whose two
//! directions are merged by `relu(W1 [fwd; bwd] + b1)`, and attention-pooled
//! into one vector per utterance. A context-level BiLSTM then runs over the
//! utterance vectors of each conversation, a linear map brings the
//! `[fwd; bwd]` state back to the hidden width, and the result is joined
//! with the utterance's mention vector and scaled to unit length.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::{build_mention_vector, Conversation, EmbeddingTable, MENTION_DIM};
use crate::error::{Error, Result};
use crate::nn::{attention_pool, bilstm, uniform_init, Attention, Lstm, Span};

/// Layer widths of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub embedding_dim: usize,
    pub hidden: usize,
    pub attention: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            embedding_dim: 300,
            hidden: 300,
            attention: 300,
        }
    }
}

impl EncoderDims {
    /// Width of the final representation: contextual part plus mention slots.
    pub fn output_dim(&self) -> usize {
        self.hidden + MENTION_DIM
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = Tensor> {
    pub token_fwd: Lstm<T>,
    pub token_bwd: Lstm<T>,
    /// `W1`, `[2H, H]`
    pub merge: T,
    pub merge_bias: T,
    pub token_attention: Attention<T>,
    pub context_fwd: Lstm<T>,
    pub context_bwd: Lstm<T>,
    /// `[2H, H]`, no bias
    pub context_proj: T,
}

impl EncoderParams<Tensor> {
    pub fn init(dims: EncoderDims, rng: &mut impl Rng) -> Self {
        let h = dims.hidden;
        EncoderParams {
            token_fwd: Lstm::init(dims.embedding_dim, h, rng),
            token_bwd: Lstm::init(dims.embedding_dim, h, rng),
            merge: uniform_init(2 * h, h, 2 * h, rng),
            merge_bias: Tensor::zeros(&[1, h]),
            token_attention: Attention::init(h, dims.attention, rng),
            context_fwd: Lstm::init(h, h, rng),
            context_bwd: Lstm::init(h, h, rng),
            context_proj: uniform_init(2 * h, h, 2 * h, rng),
        }
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            embedding_dim: self.token_fwd.input.rows(),
            hidden: self.token_fwd.hidden(),
            attention: self.token_attention.proj.cols(),
        }
    }

    /// Binds every weight as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> EncoderParams<Var> {
        self.map(&mut |t| tape.param(t.clone()))
    }

    /// Binds every weight as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> EncoderParams<Var> {
        self.map(&mut |t| tape.constant(t.clone()))
    }
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            token_fwd: self.token_fwd.map(f),
            token_bwd: self.token_bwd.map(f),
            merge: f(&self.merge),
            merge_bias: f(&self.merge_bias),
            token_attention: self.token_attention.map(f),
            context_fwd: self.context_fwd.map(f),
            context_bwd: self.context_bwd.map(f),
            context_proj: f(&self.context_proj),
        }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.token_fwd.named(&format!("{prefix}.token_fwd"), out);
        self.token_bwd.named(&format!("{prefix}.token_bwd"), out);
        out.push((format!("{prefix}.merge"), &self.merge));
        out.push((format!("{prefix}.merge_bias"), &self.merge_bias));
        self.token_attention.named(&format!("{prefix}.token_attention"), out);
        self.context_fwd.named(&format!("{prefix}.context_fwd"), out);
        self.context_bwd.named(&format!("{prefix}.context_bwd"), out);
        out.push((format!("{prefix}.context_proj"), &self.context_proj));
    }

    pub fn slots_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.token_fwd.slots_mut(out);
        self.token_bwd.slots_mut(out);
        out.push(&mut self.merge);
        out.push(&mut self.merge_bias);
        self.token_attention.slots_mut(out);
        self.context_fwd.slots_mut(out);
        self.context_bwd.slots_mut(out);
        out.push(&mut self.context_proj);
    }
}

/// Final unit-length representation of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRepresentation {
    pub v: Vec<f64>,
    pub unit_normalized: bool,
}

fn token_matrix(utterances: &[&[String]], table: &EmbeddingTable, dims: EncoderDims) -> Result<(Tensor, Vec<Span>)> {
    if table.dimension() != dims.embedding_dim {
        return Err(Error::Config(format!(
            "embedding table has dimension {}, encoder expects {}",
            table.dimension(),
            dims.embedding_dim
        )));
    }
    let mut data = Vec::new();
    let mut spans = Vec::with_capacity(utterances.len());
    let mut start = 0;
    for tokens in utterances {
        if tokens.is_empty() {
            return Err(Error::domain("encode_utterance", "empty token list"));
        }
        for tok in tokens.iter() {
            data.extend(table.lookup(tok));
        }
        spans.push(Span {
            start,
            len: tokens.len(),
        });
        start += tokens.len();
    }
    Ok((Tensor::from_parts(vec![start, dims.embedding_dim], data), spans))
}

/// Utterance vectors `u_i`, `[utterances, H]`, plus the attention weight row
/// of each utterance.
pub fn utterance_vectors(
    tape: &mut Tape,
    p: &EncoderParams<Var>,
    utterances: &[&[String]],
    table: &EmbeddingTable,
) -> Result<(Var, Vec<Var>)> {
    let dims = EncoderDims {
        embedding_dim: tape.shape(p.token_fwd.input)[0],
        hidden: tape.shape(p.token_fwd.recurrent)[0],
        attention: tape.shape(p.token_attention.proj)[1],
    };
    let (x, spans) = token_matrix(utterances, table, dims)?;
    let x = tape.constant(x);
    let states = bilstm(tape, &p.token_fwd, &p.token_bwd, x, &spans)?;
    let merged = tape.matmul(states, p.merge)?;
    let merged = tape.add(merged, p.merge_bias)?;
    let merged = tape.relu(merged)?;
    attention_pool(tape, &p.token_attention, merged, &spans)
}

/// Contextual vectors `h'_i`, `[utterances, H]`, for consecutive
/// conversations laid out as `spans` over the rows of `u`.
pub fn context_vectors(tape: &mut Tape, p: &EncoderParams<Var>, u: Var, spans: &[Span]) -> Result<Var> {
    let states = bilstm(tape, &p.context_fwd, &p.context_bwd, u, spans)?;
    tape.matmul(states, p.context_proj)
}

/// Encodes a batch of conversations into one `[total utterances, H + 50]`
/// matrix of unit rows, conversations stacked in order.
pub fn encode_batch(
    tape: &mut Tape,
    p: &EncoderParams<Var>,
    conversations: &[&Conversation],
    table: &EmbeddingTable,
) -> Result<Var> {
    let mut token_lists: Vec<&[String]> = Vec::new();
    let mut spans = Vec::with_capacity(conversations.len());
    let mut mentions = Vec::new();
    for conv in conversations {
        if conv.is_empty() {
            return Err(Error::Data(format!("conversation {:?} is empty", conv.id)));
        }
        if conv.len() > MENTION_DIM {
            return Err(Error::Data(format!(
                "conversation {:?} has {} utterances; segment to {MENTION_DIM} first",
                conv.id,
                conv.len()
            )));
        }
        spans.push(Span {
            start: token_lists.len(),
            len: conv.len(),
        });
        for (i, u) in conv.utterances.iter().enumerate() {
            token_lists.push(&u.tokens);
            mentions.extend_from_slice(build_mention_vector(conv, i)?.as_slice());
        }
    }
    let (u, _) = utterance_vectors(tape, p, &token_lists, table)?;
    let ctx = context_vectors(tape, p, u, &spans)?;
    let m = tape.constant(Tensor::from_parts(vec![token_lists.len(), MENTION_DIM], mentions));
    let joined = tape.concat(&[ctx, m], 1)?;
    tape.l2_normalize(joined)
}

/// Encodes one tokenized utterance into `u_i` and returns it with its
/// attention weights.
pub fn encode_utterance(tokens: &[String], table: &EmbeddingTable, params: &EncoderParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let (u, weights) = utterance_vectors(&mut tape, &p, &[tokens], table)?;
    Ok((tape.value(u).data().to_vec(), tape.value(weights[0]).data().to_vec()))
}

/// Runs the context layer over a sequence of utterance vectors.
pub fn encode_context(u_list: &[Vec<f64>], params: &EncoderParams) -> Result<Vec<Vec<f64>>> {
    if u_list.is_empty() {
        return Err(Error::domain("encode_context", "empty sequence"));
    }
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let u = tape.constant(Tensor::from_rows(u_list)?);
    let spans = [Span {
        start: 0,
        len: u_list.len(),
    }];
    let h = context_vectors(&mut tape, &p, u, &spans)?;
    Ok(tape.value(h).to_rows())
}

/// Final representations `v_i` for every utterance of a conversation.
pub fn represent(conversation: &Conversation, table: &EmbeddingTable, params: &EncoderParams) -> Result<Vec<UtteranceRepresentation>> {
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let v = encode_batch(&mut tape, &p, &[conversation], table)?;
    Ok(tape
        .value(v)
        .to_rows()
        .into_iter()
        .map(|v| UtteranceRepresentation {
            v,
            unit_normalized: true,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Utterance, MAX_TOKENS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DIMS: EncoderDims = EncoderDims {
        embedding_dim: 8,
        hidden: 6,
        attention: 5,
    };

    fn setup() -> (EmbeddingTable, EncoderParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        (EmbeddingTable::hashed(8, 1), EncoderParams::init(DIMS, &mut rng))
    }

    fn toks(s: &str) -> Vec<String> {
        tokenize(s, MAX_TOKENS)
    }

    #[test]
    fn single_token_attention_is_one() {
        let (table, params) = setup();
        let (u, w) = encode_utterance(&toks("hello"), &table, &params).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(u.len(), 6);
    }

    #[test]
    fn zero_score_vector_gives_uniform_attention() {
        let (table, mut params) = setup();
        params.token_attention.score = Tensor::zeros(&[5, 1]);
        let (_, w) = encode_utterance(&toks("ok ok ok ok"), &table, &params).unwrap();
        assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn utterance_encoding_is_deterministic() {
        let (table, params) = setup();
        let t = toks("one two three four five");
        assert_eq!(encode_utterance(&t, &table, &params).unwrap(), encode_utterance(&t, &table, &params).unwrap());
    }

    #[test]
    fn empty_token_list_rejected() {
        let (table, params) = setup();
        assert!(encode_utterance(&[], &table, &params).is_err());
    }

    #[test]
    fn context_shape_and_bidirectionality() {
        let (_, params) = setup();
        let one = encode_context(&[vec![0.1; 6]], &params).unwrap();
        assert_eq!((one.len(), one[0].len()), (1, 6));

        let seq: Vec<Vec<f64>> = (0..4).map(|i| vec![0.1 * i as f64; 6]).collect();
        let mut perturbed = seq.clone();
        perturbed[3][0] += 0.5;
        let a = encode_context(&seq, &params).unwrap();
        let b = encode_context(&perturbed, &params).unwrap();
        assert!(a[0].iter().zip(&b[0]).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn zero_inputs_with_zero_biases_are_finite() {
        let (_, mut params) = setup();
        for l in [&mut params.context_fwd, &mut params.context_bwd] {
            l.bias = Tensor::zeros(l.bias.shape());
        }
        let out = encode_context(&vec![vec![0.0; 6]; 3], &params).unwrap();
        assert!(out.iter().flatten().all(|v| v.is_finite()));
        // with zero input and zero bias every gate sits at sigmoid(0)/tanh(0)
        assert!(out.iter().flatten().all(|v| *v == 0.0));
    }

    fn conversation(speakers: &[&str]) -> Conversation {
        let texts = ["my wifi drops", "try the driver", "which kernel", "reboot worked"];
        let utts = speakers
            .iter()
            .enumerate()
            .map(|(i, s)| Utterance::new(i, *s, texts[i % texts.len()]))
            .collect();
        Conversation::new("r", utts)
    }

    #[test]
    fn representations_are_unit_and_sized() {
        let (table, params) = setup();
        let reps = represent(&conversation(&["a", "b", "a", "c"]), &table, &params).unwrap();
        assert_eq!(reps.len(), 4);
        for r in reps {
            assert_eq!(r.v.len(), DIMS.output_dim());
            let n: f64 = r.v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            assert!(r.unit_normalized);
        }
    }

    #[test]
    fn speaker_names_only_touch_mention_slots() {
        let (table, params) = setup();
        let a = represent(&conversation(&["a", "b", "c", "d"]), &table, &params).unwrap();
        let b = represent(&conversation(&["w", "x", "y", "z"]), &table, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mention_bits_follow_speaker_swap() {
        let (table, params) = setup();
        let a = represent(&conversation(&["a", "b", "a", "c"]), &table, &params).unwrap();
        let b = represent(&conversation(&["b", "a", "b", "c"]), &table, &params).unwrap();
        // same token path, and the multi-hot layout is identical under a handle swap
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.v.iter().zip(&y.v) {
                assert!((p - q).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn embedding_dimension_mismatch_rejected() {
        let (_, params) = setup();
        let table = EmbeddingTable::hashed(5, 1);
        assert!(matches!(encode_utterance(&toks("x"), &table, &params), Err(Error::Config(_))));
    }

    #[test]
    fn over_long_conversation_rejected() {
        let (table, params) = setup();
        let speakers: Vec<String> = (0..51).map(|i| format!("s{i}")).collect();
        let refs: Vec<&str> = speakers.iter().map(String::as_str).collect();
        assert!(represent(&conversation(&refs), &table, &params).is_err());
    }
}
