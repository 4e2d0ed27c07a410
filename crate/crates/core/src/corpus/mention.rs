use super::{tokenize, Conversation};
use crate::error::{Error, Result};

/// Width of the mention vector; equal to the segment window.
pub const MENTION_DIM: usize = 50;

/// Multi-hot speaker/mention indicator for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct MentionVector(pub [f64; MENTION_DIM]);

impl MentionVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `m[j] = 1` when utterance `j` has the same speaker as utterance `i`
/// (including `j = i`) or when `j`'s speaker handle occurs as a whole token
/// sequence in `i`'s text. Handles compare case-insensitively.
pub fn build_mention_vector(conversation: &Conversation, i: usize) -> Result<MentionVector> {
    let n = conversation.len();
    if n > MENTION_DIM {
        return Err(Error::domain(
            "build_mention_vector",
            format!("conversation has {n} utterances; segment to at most {MENTION_DIM} first"),
        ));
    }
    let Some(anchor) = conversation.utterances.get(i) else {
        return Err(Error::domain(
            "build_mention_vector",
            format!("utterance {i} out of range for length {n}"),
        ));
    };
    let text_tokens = tokenize(&anchor.text, usize::MAX);
    let speaker = anchor.speaker.to_lowercase();
    let mut m = [0.0; MENTION_DIM];
    for (j, other) in conversation.utterances.iter().enumerate() {
        let other_speaker = other.speaker.to_lowercase();
        if other_speaker == speaker || mentions(&text_tokens, &other_speaker) {
            m[j] = 1.0;
        }
    }
    Ok(MentionVector(m))
}

fn mentions(text_tokens: &[String], handle: &str) -> bool {
    let handle_tokens = tokenize(handle, usize::MAX);
    if handle_tokens.is_empty() || handle.trim().is_empty() {
        return false;
    }
    text_tokens
        .windows(handle_tokens.len())
        .any(|w| w == handle_tokens.as_slice())
}
