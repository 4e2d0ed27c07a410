use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, clip_gradients, AdamState};
use super::config::{Mode, TrainConfig};
use super::model::{Checkpoint, Model, RngState};
use crate::autodiff::{Tape, Tensor, Var};
use crate::clustering::{kmeans, match_rectangular};
use crate::corpus::{Conversation, EmbeddingTable, MENTION_DIM};
use crate::encoder::encode_batch;
use crate::error::{Error, Result};
use crate::kpredictor::{k_logits, k_loss_on_tape};
use crate::losses::{
    averaging_matrix, centroid_matching, prototypical_em_loss, session_contrastive, session_prototypes,
    speaker_contrastive, supervised_objective, unsupervised_objective, utterance_contrastive, EmTarget,
    LossBreakdown,
};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
}

/// Offset separating the model-initialisation stream from the training stream.
const TRAIN_STREAM: u64 = 0x5eed;

pub fn train(corpus: &[Conversation], config: &TrainConfig, table: &EmbeddingTable) -> Result<TrainOutcome> {
    match config.mode {
        Mode::Supervised => train_supervised(corpus, config, table),
        Mode::Unsupervised => train_unsupervised(corpus, config, table),
    }
}

fn check_corpus(corpus: &[Conversation]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    for c in corpus {
        if c.is_empty() || c.len() > MENTION_DIM {
            return Err(Error::Data(format!(
                "conversation {:?} has {} utterances; segments must hold 1..={MENTION_DIM}",
                c.id,
                c.len()
            )));
        }
    }
    Ok(())
}

struct Run {
    model: Model,
    adam: AdamState,
    rng: ChaCha8Rng,
    rng_seed: u64,
    log: Vec<LogEntry>,
}

impl Run {
    fn new(config: &TrainConfig) -> Self {
        let model = Model::init(config, config.seed);
        let shapes = model.shapes();
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let rng_seed = config.seed.wrapping_add(TRAIN_STREAM);
        Run {
            adam: AdamState::new(&refs),
            model,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            rng_seed,
            log: Vec::new(),
        }
    }

    /// Back-propagates `total` and applies one optimizer step.
    fn update(&mut self, tape: &Tape, bound: &Model<Var>, total: Var, config: &TrainConfig) -> Result<()> {
        let grads = tape.backward(total)?;
        let mut g: Vec<Tensor> = bound.named().into_iter().map(|(_, v)| grads.get(tape, *v)).collect();
        if let Some(max) = config.clip_norm {
            clip_gradients(&mut g, max);
        }
        let names = self.model.names();
        let mut slots = self.model.slots_mut();
        adam_step(&mut slots, &names, &g, &mut self.adam, config.learning_rate)
    }

    fn finish(self, config: &TrainConfig) -> TrainOutcome {
        TrainOutcome {
            checkpoint: Checkpoint {
                config: config.clone(),
                epoch: config.epochs,
                rng: RngState::capture(self.rng_seed, &self.rng),
                model: self.model,
                adam: self.adam,
            },
            log: self.log,
        }
    }
}

fn add_scaled(tape: &mut Tape, acc: Option<Var>, term: Var, weight: f64) -> Result<Option<Var>> {
    let term = if weight == 1.0 { term } else { tape.scale(term, weight)? };
    Ok(Some(match acc {
        Some(a) => tape.add(a, term)?,
        None => term,
    }))
}

fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Result<Option<Var>> {
    let mut acc = None;
    for &t in terms {
        acc = add_scaled(tape, acc, t, 1.0)?;
    }
    Ok(acc)
}

fn shuffled_batches(n: usize, batch_size: usize, min_batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().map_or(false, |b| b.len() < min_batch) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

fn value(tape: &Tape, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| tape.value(v).item())
}

/// Supervised training: `L_u + alpha L_s + beta L_k + gamma L_m` per batch.
pub fn train_supervised(corpus: &[Conversation], config: &TrainConfig, table: &EmbeddingTable) -> Result<TrainOutcome> {
    config.validate()?;
    check_corpus(corpus)?;
    for c in corpus {
        let k = c
            .gold_k()
            .ok_or_else(|| Error::Data(format!("conversation {:?} lacks gold session ids", c.id)))?;
        if k > config.max_sessions {
            return Err(Error::Data(format!(
                "conversation {:?} has {k} sessions; raise max_sessions above {}",
                c.id, config.max_sessions
            )));
        }
    }
    let mut run = Run::new(config);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        for batch in shuffled_batches(corpus.len(), config.batch_size, 1, &mut run.rng) {
            let convs: Vec<&Conversation> = batch.iter().map(|&i| &corpus[i]).collect();
            step += 1;
            let losses = supervised_step(&mut run, &convs, config, table)?;
            run.log.push(LogEntry { epoch, step, losses });
        }
    }
    Ok(run.finish(config))
}

fn supervised_step(run: &mut Run, batch: &[&Conversation], config: &TrainConfig, table: &EmbeddingTable) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = run.model.bind(&mut tape);
    let v = encode_batch(&mut tape, &p.encoder, batch, table)?;

    let mut ids = BTreeMap::new();
    let mut labels = Vec::new();
    for (ci, conv) in batch.iter().enumerate() {
        for s in conv.gold_labels().expect("checked") {
            let next = ids.len();
            labels.push(*ids.entry((ci, s)).or_insert(next));
        }
    }
    let l_u = if config.enabled("l_u") {
        Some(utterance_contrastive(&mut tape, v, &labels, config.tau1, config.negative_cap(), &mut run.rng)?)
    } else {
        None
    };

    let (mut l_s, mut l_k, mut l_m) = (Vec::new(), Vec::new(), Vec::new());
    let mut start = 0;
    for conv in batch {
        let gold = conv.gold_labels().expect("checked");
        let gold_k = conv.gold_k().expect("checked");
        let vc = tape.slice_rows(v, start, start + conv.len())?;
        start += conv.len();
        let protos = session_prototypes(&mut tape, vc, &gold)?;
        if config.enabled("l_s") {
            l_s.push(session_contrastive(&mut tape, vc, &protos, &gold, config.tau2)?);
        }
        if config.enabled("l_k") {
            let q = k_logits(&mut tape, &p.kpredictor, vc, conv.speaker_count(), config.k_logit_activation)?;
            l_k.push(k_loss_on_tape(&mut tape, q, gold_k)?);
        }
        if config.enabled("l_m") {
            let points = tape.value(vc).to_rows();
            let clustering = kmeans(&points, gold_k, config.seed)?;
            let avg = tape.constant(averaging_matrix(&clustering.assignment, gold_k));
            let means = tape.matmul(avg, vc)?;
            let centroids = tape.l2_normalize(means)?;
            let (pv, cv) = (tape.value(protos.prototypes).clone(), tape.value(centroids).clone());
            let cost: Vec<Vec<f64>> = (0..pv.rows())
                .map(|i| {
                    (0..cv.rows())
                        .map(|j| pv.row(i).iter().zip(cv.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                        .collect()
                })
                .collect();
            let pairs = match_rectangular(&cost)?;
            l_m.push(centroid_matching(&mut tape, protos.prototypes, centroids, &pairs)?);
        }
    }
    let l_s = sum_terms(&mut tape, &l_s)?;
    let l_k = sum_terms(&mut tape, &l_k)?;
    let l_m = sum_terms(&mut tape, &l_m)?;

    let mut total = None;
    for (term, weight) in [(l_u, 1.0), (l_s, config.alpha), (l_k, config.beta), (l_m, config.gamma)] {
        if let Some(t) = term {
            total = add_scaled(&mut tape, total, t, weight)?;
        }
    }
    let mut losses = supervised_objective(
        value(&tape, l_u),
        value(&tape, l_s),
        value(&tape, l_k),
        value(&tape, l_m),
        config.alpha,
        config.beta,
        config.gamma,
    );
    losses.l_u = l_u.map(|x| tape.value(x).item());
    losses.l_s = l_s.map(|x| tape.value(x).item());
    losses.l_k = l_k.map(|x| tape.value(x).item());
    losses.l_m = l_m.map(|x| tape.value(x).item());
    if let Some(total) = total {
        run.update(&tape, &p, total, config)?;
    }
    Ok(losses)
}

/// Unit-length rows of `v` for each conversation, computed without gradients.
pub(crate) fn encode_frozen(
    model: &Model,
    corpus: &[&Conversation],
    table: &EmbeddingTable,
    chunk: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::with_capacity(corpus.len());
    for group in corpus.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let enc = model.encoder.bind_frozen(&mut tape);
        let v = encode_batch(&mut tape, &enc, group, table)?;
        let rows = tape.value(v).to_rows();
        let mut it = rows.into_iter();
        for c in group {
            out.push(it.by_ref().take(c.len()).collect());
        }
    }
    Ok(out)
}

fn normalized_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
    let mut t = Tensor::from_rows(rows)?;
    let cols = t.cols();
    for row in t.data_mut().chunks_mut(cols) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < crate::autodiff::MIN_NORM {
            return Err(Error::domain("e_step", "cluster centroid has zero norm"));
        }
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(t)
}

/// Cluster counts used for a conversation of `n` utterances.
pub fn em_ks(kset: &[usize], n: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = kset.iter().map(|&k| k.min(n)).collect();
    ks.sort_unstable();
    ks.dedup();
    ks
}

/// Frozen clusterings of every conversation for each cluster count.
fn e_step(run: &mut Run, corpus: &[Conversation], config: &TrainConfig, table: &EmbeddingTable) -> Result<Vec<Vec<EmTarget>>> {
    let refs: Vec<&Conversation> = corpus.iter().collect();
    let reps = encode_frozen(&run.model, &refs, table, config.batch_size)?;
    let mut targets = Vec::with_capacity(corpus.len());
    for points in &reps {
        let mut per = Vec::new();
        for k in em_ks(&config.em_kset, points.len()) {
            let c = kmeans(points, k, run.rng.gen())?;
            per.push(EmTarget {
                assignment: c.assignment,
                centroids: normalized_rows(&c.centroids)?,
            });
        }
        targets.push(per);
    }
    Ok(targets)
}

/// Unsupervised EM training: per-epoch clustering, then minibatch steps on
/// `L'_u + eta L'_s`.
pub fn train_unsupervised(corpus: &[Conversation], config: &TrainConfig, table: &EmbeddingTable) -> Result<TrainOutcome> {
    config.validate()?;
    check_corpus(corpus)?;
    if corpus.len() < 2 {
        return Err(Error::Data(
            "unsupervised training needs at least two conversations per batch".into(),
        ));
    }
    let mut run = Run::new(config);
    let mut step = 0;
    let mut targets = Vec::new();
    for epoch in 1..=config.epochs {
        if (epoch - 1) % config.recluster_every == 0 {
            targets = e_step(&mut run, corpus, config, table)?;
        }
        for batch in shuffled_batches(corpus.len(), config.batch_size, 2, &mut run.rng) {
            step += 1;
            let losses = unsupervised_step(&mut run, corpus, &batch, &targets, config, table)?;
            run.log.push(LogEntry { epoch, step, losses });
        }
    }
    Ok(run.finish(config))
}

fn unsupervised_step(
    run: &mut Run,
    corpus: &[Conversation],
    batch: &[usize],
    targets: &[Vec<EmTarget>],
    config: &TrainConfig,
    table: &EmbeddingTable,
) -> Result<LossBreakdown> {
    let convs: Vec<&Conversation> = batch.iter().map(|&i| &corpus[i]).collect();
    let mut tape = Tape::new();
    let p = run.model.bind(&mut tape);
    let v = encode_batch(&mut tape, &p.encoder, &convs, table)?;

    let l_u = if config.enabled("l_u_prime") {
        let mut conversation_of = Vec::new();
        let mut speakers = Vec::new();
        for (ci, c) in convs.iter().enumerate() {
            for u in &c.utterances {
                conversation_of.push(ci);
                speakers.push(u.speaker.clone());
            }
        }
        Some(speaker_contrastive(
            &mut tape,
            v,
            &conversation_of,
            &speakers,
            config.tau1_prime,
            config.negative_cap(),
            &mut run.rng,
        )?)
    } else {
        None
    };
    let l_s = if config.enabled("l_s_prime") {
        let mut terms = Vec::new();
        let mut start = 0;
        for (&ci, c) in batch.iter().zip(&convs) {
            let vc = tape.slice_rows(v, start, start + c.len())?;
            start += c.len();
            terms.push(prototypical_em_loss(&mut tape, vc, &targets[ci], config.tau2_prime)?);
        }
        sum_terms(&mut tape, &terms)?
    } else {
        None
    };
    let mut total = None;
    for (term, weight) in [(l_u, 1.0), (l_s, config.eta)] {
        if let Some(t) = term {
            total = add_scaled(&mut tape, total, t, weight)?;
        }
    }
    let mut losses = unsupervised_objective(value(&tape, l_u), value(&tape, l_s), config.eta);
    losses.l_u_prime = l_u.map(|x| tape.value(x).item());
    losses.l_s_prime = l_s.map(|x| tape.value(x).item());
    if let Some(total) = total {
        run.update(&tape, &p, total, config)?;
    }
    Ok(losses)
}
