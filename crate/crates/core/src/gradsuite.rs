//! Finite-difference checks of every training loss and of the full encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Tape, Tensor, Var};
use crate::clustering::kmeans;
use crate::corpus::{Conversation, EmbeddingTable, Utterance};
use crate::encoder::{encode_batch, EncoderDims, EncoderParams};
use crate::error::Result;
use crate::kpredictor::{k_logits, k_loss_on_tape, KPredictorParams};
use crate::losses::{
    averaging_matrix, centroid_matching, prototypical_em_loss, session_contrastive, session_prototypes,
    speaker_contrastive, utterance_contrastive, EmTarget,
};

pub const GRAD_TOLERANCE: f64 = 1e-4;
const EPSILON: f64 = 1e-5;
const ENCODER_EPSILON: f64 = 1e-4;
const RELU_MARGIN: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub max_relative_error: f64,
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

fn unit_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_rows()
        .into_iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn tiny_conversations() -> Vec<Conversation> {
    let a = vec![
        Utterance::new(0, "ann", "the build fails on arm").with_session(0),
        Utterance::new(1, "bob", "anyone seen the new release?").with_session(1),
        Utterance::new(2, "cid", "ann: which compiler").with_session(0),
    ];
    let b = vec![
        Utterance::new(0, "dee", "my wifi drops").with_session(0),
        Utterance::new(1, "eve", "try another driver dee").with_session(0),
        Utterance::new(2, "dee", "ok").with_session(0),
    ];
    vec![Conversation::new("g0", a), Conversation::new("g1", b)]
}

/// Runs every check and returns one row per check.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut push = |name: &str, err: f64| {
        rows.push(GradCheckRow {
            name: name.to_string(),
            max_relative_error: err,
        })
    };

    let raw = random_matrix(6, 5, &mut rng);
    let labels = [0usize, 0, 1, 1, 2, 1];

    push(
        "l_u",
        grad_check(
            |t, x| {
                let v = t.l2_normalize(x)?;
                utterance_contrastive(t, v, &labels, 0.5, None, &mut ChaCha8Rng::seed_from_u64(0))
            },
            &raw,
            EPSILON,
        )?,
    );

    push(
        "l_s",
        grad_check(
            |t, x| {
                let v = t.l2_normalize(x)?;
                let p = session_prototypes(t, v, &labels)?;
                session_contrastive(t, v, &p, &labels, 0.5)
            },
            &raw,
            EPSILON,
        )?,
    );

    // assignment and matching are held fixed while the input moves
    let points = unit_rows(&raw);
    let clustering = kmeans(&points, 3, seed)?;
    let pairs = [(0, 2), (1, 0), (2, 1)];
    push(
        "l_m",
        grad_check(
            |t, x| {
                let v = t.l2_normalize(x)?;
                let p = session_prototypes(t, v, &labels)?;
                let avg = t.constant(averaging_matrix(&clustering.assignment, 3));
                let means = t.matmul(avg, v)?;
                let c = t.l2_normalize(means)?;
                centroid_matching(t, p.prototypes, c, &pairs)
            },
            &raw,
            EPSILON,
        )?,
    );

    let kp = KPredictorParams::init(5, 4, 6, 4, &mut rng);
    let l_k = |t: &mut Tape, v: Var, p: &KPredictorParams<Var>| -> Result<Var> {
        let q = k_logits(t, p, v, 2, false)?;
        k_loss_on_tape(t, q, 3)
    };
    let mut worst = grad_check(
        |t, x| {
            let p = kp.bind_frozen(t);
            let v = t.l2_normalize(x)?;
            l_k(t, v, &p)
        },
        &raw,
        EPSILON,
    )?;
    let mut named = Vec::new();
    kp.named("k", &mut named);
    for target in 0..named.len() {
        let point = named[target].1.clone();
        let err = grad_check(
            |t, x| {
                let mut idx = 0;
                let p = kp.map(&mut |w| {
                    let out = if idx == target { x } else { t.constant(w.clone()) };
                    idx += 1;
                    out
                });
                let v = t.constant(Tensor::from_rows(&points)?);
                l_k(t, v, &p)
            },
            &point,
            EPSILON,
        )?;
        worst = worst.max(err);
    }
    push("l_k", worst);

    let conversation_of = [0usize, 0, 0, 1, 1, 1];
    let speakers: Vec<String> = ["a", "b", "a", "c", "c", "d"].iter().map(|s| s.to_string()).collect();
    push(
        "l_u_prime",
        grad_check(
            |t, x| {
                let v = t.l2_normalize(x)?;
                speaker_contrastive(t, v, &conversation_of, &speakers, 0.5, None, &mut ChaCha8Rng::seed_from_u64(0))
            },
            &raw,
            EPSILON,
        )?,
    );

    let targets: Vec<EmTarget> = [2usize, 3]
        .iter()
        .map(|&k| {
            let c = kmeans(&points, k, seed).expect("k <= n");
            EmTarget {
                assignment: c.assignment,
                centroids: Tensor::from_rows(&unit_rows(&Tensor::from_rows(&c.centroids).expect("rows"))).expect("rows"),
            }
        })
        .collect();
    push(
        "l_s_prime",
        grad_check(
            |t, x| {
                let v = t.l2_normalize(x)?;
                prototypical_em_loss(t, v, &targets, 0.1)
            },
            &raw,
            EPSILON,
        )?,
    );

    push("encoder", encoder_check(&mut rng)?);
    Ok(rows)
}

/// Word vectors of unit scale for every word of the toy conversations.
fn toy_table(dim: usize, rng: &mut impl Rng) -> Result<EmbeddingTable> {
    let mut words: Vec<String> = tiny_conversations()
        .iter()
        .flat_map(|c| c.utterances.iter().flat_map(|u| u.tokens.clone()))
        .collect();
    words.sort();
    words.dedup();
    let mut text = String::new();
    for w in words {
        text.push_str(&w);
        for _ in 0..dim {
            text.push_str(&format!(" {}", rng.gen_range(-1.0..1.0f64)));
        }
        text.push('\n');
    }
    EmbeddingTable::parse(text.as_bytes(), "toy", 0)
}

/// Gradient of `L_u + L_s` on two 3-utterance conversations with respect
/// to every encoder weight tensor. Inputs and weights are scaled up so the
/// contextual part of `v` is not swamped by the mention slots; otherwise
/// most coordinates sit near the finite-difference noise floor.
fn encoder_check(rng: &mut impl Rng) -> Result<f64> {
    let dims = EncoderDims {
        embedding_dim: 4,
        hidden: 4,
        attention: 3,
    };
    let convs = tiny_conversations();
    let refs: Vec<&Conversation> = convs.iter().collect();
    // Redraw until no relu input sits within reach of the finite-difference step.
    let (params, table) = loop {
        let mut params = EncoderParams::init(dims, rng);
        let mut slots = Vec::new();
        params.slots_mut(&mut slots);
        for s in slots {
            s.data_mut().iter_mut().for_each(|x| *x *= 3.0);
        }
        let table = toy_table(dims.embedding_dim, rng)?;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        encode_batch(&mut tape, &p, &refs, &table)?;
        if tape.relu_margin() > RELU_MARGIN {
            break (params, table);
        }
    };
    let labels = [0usize, 1, 0, 2, 2, 2];
    let mut named = Vec::new();
    params.named("encoder", &mut named);
    let mut worst = 0.0f64;
    for target in 0..named.len() {
        let point = named[target].1.clone();
        let err = grad_check(
            |t, x| {
                let mut idx = 0;
                let p = params.map(&mut |w| {
                    let out = if idx == target { x } else { t.constant(w.clone()) };
                    idx += 1;
                    out
                });
                let v = encode_batch(t, &p, &refs, &table)?;
                let lu = utterance_contrastive(t, v, &labels, 0.5, None, &mut ChaCha8Rng::seed_from_u64(0))?;
                let pr = session_prototypes(t, v, &labels)?;
                let ls = session_contrastive(t, v, &pr, &labels, 0.5)?;
                t.add(lu, ls)
            },
            &point,
            ENCODER_EPSILON,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}
