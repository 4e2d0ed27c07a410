//! Conversations, file ingestion, segmentation and synthetic data.

mod embeddings;
mod mention;
mod synthetic;
mod tokenize;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use embeddings::EmbeddingTable;
pub use mention::{build_mention_vector, MentionVector, MENTION_DIM};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use tokenize::{tokenize, EMPTY_TOKEN, MAX_TOKENS};

/// Segment length used for training and evaluation windows.
pub const WINDOW: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub index: usize,
    pub speaker: String,
    pub text: String,
    #[serde(skip)]
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_to: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_session_id: Option<usize>,
}

impl Utterance {
    pub fn new(index: usize, speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Utterance {
            index,
            speaker: speaker.into(),
            text: text.into(),
            tokens: Vec::new(),
            session_id: None,
            reply_to: None,
            predicted_session_id: None,
        }
    }

    pub fn with_session(mut self, session_id: usize) -> Self {
        self.session_id = Some(session_id);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_selector: Option<String>,
}

impl Conversation {
    pub fn new(id: impl Into<String>, utterances: Vec<Utterance>) -> Self {
        let mut conv = Conversation {
            id: id.into(),
            utterances,
            predicted_k: None,
            k_selector: None,
        };
        conv.fill_tokens();
        conv
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Tokenizes every utterance whose token list is still empty.
    pub fn fill_tokens(&mut self) {
        for u in &mut self.utterances {
            if u.tokens.is_empty() {
                u.tokens = tokenize(&u.text, MAX_TOKENS);
            }
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.utterances.iter().all(|u| u.session_id.is_some())
    }

    /// Gold session ids, or `None` when any utterance is unlabeled.
    pub fn gold_labels(&self) -> Option<Vec<usize>> {
        self.utterances.iter().map(|u| u.session_id).collect()
    }

    /// Number of distinct gold sessions.
    pub fn gold_k(&self) -> Option<usize> {
        let mut labels = self.gold_labels()?;
        labels.sort_unstable();
        labels.dedup();
        Some(labels.len())
    }

    pub fn speaker_count(&self) -> usize {
        let mut speakers: Vec<String> = self.utterances.iter().map(|u| u.speaker.to_lowercase()).collect();
        speakers.sort();
        speakers.dedup();
        speakers.len()
    }
}

/// Reads one conversation per JSON line. Blank lines are skipped.
pub fn load_conversations(path: impl AsRef<Path>) -> Result<Vec<Conversation>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_conversations(BufReader::new(file), &path.display().to_string())
}

pub fn parse_conversations(reader: impl BufRead, source: &str) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: source.to_string(),
            line: line_no,
            reason,
        };
        let conv: Conversation = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if conv.utterances.is_empty() {
            return Err(parse_err(format!("conversation {:?} has no utterances", conv.id)));
        }
        for (pos, u) in conv.utterances.iter().enumerate() {
            if u.index != pos {
                return Err(parse_err(format!(
                    "conversation {:?}: utterance indices must be contiguous from 0, found {} at position {pos}",
                    conv.id, u.index
                )));
            }
        }
        out.push(Conversation::new(conv.id, conv.utterances).with_predictions(conv.predicted_k, conv.k_selector));
    }
    Ok(out)
}

impl Conversation {
    fn with_predictions(mut self, k: Option<usize>, selector: Option<String>) -> Self {
        self.predicted_k = k;
        self.k_selector = selector;
        self
    }
}

pub fn save_conversations(path: impl AsRef<Path>, conversations: &[Conversation]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for c in conversations {
        let line = serde_json::to_string(c).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Cuts a conversation into consecutive windows of at most `window`
/// utterances. Inside each window, gold session ids are renumbered in order
/// of first appearance and indices restart at 0.
pub fn segment(conversation: &Conversation, window: usize) -> Vec<Conversation> {
    let window = window.max(1);
    let chunks: Vec<&[Utterance]> = conversation.utterances.chunks(window).collect();
    let single = chunks.len() == 1;
    chunks
        .into_iter()
        .enumerate()
        .map(|(k, chunk)| {
            let base = k * window;
            let mut relabel: HashMap<usize, usize> = HashMap::new();
            let utterances = chunk
                .iter()
                .enumerate()
                .map(|(pos, u)| {
                    let mut u = u.clone();
                    u.index = pos;
                    u.session_id = u.session_id.map(|s| {
                        let next = relabel.len();
                        *relabel.entry(s).or_insert(next)
                    });
                    u.reply_to = u
                        .reply_to
                        .and_then(|r| r.checked_sub(base))
                        .filter(|&r| r < chunk.len());
                    u
                })
                .collect();
            let id = if single {
                conversation.id.clone()
            } else {
                format!("{}#{k}", conversation.id)
            };
            Conversation::new(id, utterances)
        })
        .collect()
}

/// Segments every conversation of a corpus.
pub fn segment_all(conversations: &[Conversation], window: usize) -> Vec<Conversation> {
    conversations.iter().flat_map(|c| segment(c, window)).collect()
}
