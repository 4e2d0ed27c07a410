use serde::{Deserialize, Serialize};

use super::config::{KSelector, TrainConfig};
use super::model::Model;
use super::train::encode_frozen;
use crate::clustering::{elbow_k, kmeans, silhouette_k};
use crate::corpus::{Conversation, EmbeddingTable};
use crate::error::{Error, Result};
use crate::kpredictor::{predict_k, predict_k_distribution};
use crate::metrics::{ari, k_report, nmi, shen_f, Partition};

#[derive(Clone, Debug, PartialEq)]
pub struct Disentangled {
    pub partition: Partition,
    pub k: usize,
}

/// Relabels cluster ids in order of first appearance.
fn first_appearance(assignment: &[usize]) -> Vec<usize> {
    let mut map = std::collections::BTreeMap::new();
    assignment
        .iter()
        .map(|a| {
            let next = map.len();
            *map.entry(*a).or_insert(next)
        })
        .collect()
}

fn choose_k(
    conversation: &Conversation,
    points: &[Vec<f64>],
    model: &Model,
    config: &TrainConfig,
    selector: KSelector,
) -> Result<usize> {
    let n = points.len();
    let k_max = config.max_sessions.min(n);
    Ok(match selector {
        KSelector::Gold => conversation.gold_k().ok_or_else(|| {
            Error::Data(format!("conversation {:?} has no gold sessions for k_selector=gold", conversation.id))
        })?,
        KSelector::Predictor => {
            let d = predict_k_distribution(points, conversation.speaker_count(), &model.kpredictor, config.k_logit_activation)?;
            predict_k(&d, n)
        }
        KSelector::Elbow => elbow_k(points, k_max, config.seed)?,
        KSelector::Silhouette if n < 3 || k_max < 2 => 1,
        KSelector::Silhouette => silhouette_k(points, k_max, config.seed)?,
    })
}

fn disentangle_points(
    conversation: &Conversation,
    points: &[Vec<f64>],
    model: &Model,
    config: &TrainConfig,
    selector: KSelector,
) -> Result<Disentangled> {
    let k = choose_k(conversation, points, model, config, selector)?.clamp(1, points.len());
    let c = kmeans(points, k, config.seed)?;
    Ok(Disentangled {
        partition: Partition(first_appearance(&c.assignment)),
        k,
    })
}

/// Encodes a conversation of at most 50 utterances, picks `K` and clusters.
pub fn disentangle(
    conversation: &Conversation,
    model: &Model,
    config: &TrainConfig,
    table: &EmbeddingTable,
    selector: KSelector,
) -> Result<Disentangled> {
    let reps = encode_frozen(model, &[conversation], table, 1)?;
    disentangle_points(conversation, &reps[0], model, config, selector)
}

/// Disentangles many conversations, encoding them in batches.
pub fn disentangle_all(
    corpus: &[Conversation],
    model: &Model,
    config: &TrainConfig,
    table: &EmbeddingTable,
    selector: KSelector,
) -> Result<Vec<Disentangled>> {
    let refs: Vec<&Conversation> = corpus.iter().collect();
    let reps = encode_frozen(model, &refs, table, config.batch_size)?;
    corpus
        .iter()
        .zip(&reps)
        .map(|(c, points)| disentangle_points(c, points, model, config, selector))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversationScore {
    pub id: String,
    pub utterances: usize,
    pub gold_k: usize,
    pub predicted_k: usize,
    pub nmi: f64,
    pub ari: f64,
    pub shen_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub nmi: f64,
    pub ari: f64,
    pub shen_f: f64,
    pub k_acc: f64,
    pub k_mae: f64,
    pub k_selector: KSelector,
    pub per_conversation: Vec<ConversationScore>,
    pub config: TrainConfig,
}

/// Scores predicted partitions against gold ones and macro-averages.
pub fn score(
    corpus: &[Conversation],
    predictions: &[Disentangled],
    config: &TrainConfig,
    selector: KSelector,
) -> Result<EvalReport> {
    if corpus.is_empty() || corpus.len() != predictions.len() {
        return Err(Error::Data("evaluation needs one prediction per conversation".into()));
    }
    let mut per = Vec::with_capacity(corpus.len());
    for (c, d) in corpus.iter().zip(predictions) {
        let gold = Partition(
            c.gold_labels()
                .ok_or_else(|| Error::Data(format!("conversation {:?} lacks gold session ids", c.id)))?,
        );
        // a single utterance has no pairs; its only partition is always right
        let a = if gold.len() < 2 { 1.0 } else { ari(&gold, &d.partition)? };
        per.push(ConversationScore {
            id: c.id.clone(),
            utterances: c.len(),
            gold_k: c.gold_k().expect("labeled"),
            predicted_k: d.k,
            nmi: nmi(&gold, &d.partition)?,
            ari: a,
            shen_f: shen_f(&gold, &d.partition)?,
        });
    }
    let n = per.len() as f64;
    let gold_ks: Vec<usize> = per.iter().map(|p| p.gold_k).collect();
    let pred_ks: Vec<usize> = per.iter().map(|p| p.predicted_k).collect();
    let k = k_report(&gold_ks, &pred_ks)?;
    Ok(EvalReport {
        method: "macro".into(),
        nmi: per.iter().map(|p| p.nmi).sum::<f64>() / n,
        ari: per.iter().map(|p| p.ari).sum::<f64>() / n,
        shen_f: per.iter().map(|p| p.shen_f).sum::<f64>() / n,
        k_acc: k.acc,
        k_mae: k.mae,
        k_selector: selector,
        per_conversation: per,
        config: config.clone(),
    })
}

pub fn evaluate(
    corpus: &[Conversation],
    model: &Model,
    config: &TrainConfig,
    table: &EmbeddingTable,
    selector: KSelector,
) -> Result<EvalReport> {
    if let Some(c) = corpus.iter().find(|c| !c.is_labeled()) {
        return Err(Error::Data(format!("conversation {:?} lacks gold session ids", c.id)));
    }
    let predictions = disentangle_all(corpus, model, config, table, selector)?;
    score(corpus, &predictions, config, selector)
}
