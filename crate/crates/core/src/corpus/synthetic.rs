use std::collections::HashMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Conversation, Utterance};
use crate::error::{Error, Result};
use crate::kv;

const FILLER: &[&str] = &[
    "the", "a", "is", "it", "to", "and", "of", "i", "you", "that", "in", "for", "on", "with", "this", "so",
];

/// Parameters of the entangled-conversation generator.
///
/// Each session draws its words from a private topic vocabulary (disjoint
/// from the other sessions of the same conversation) mixed with shared
/// filler words; sessions are then interleaved at random while keeping their
/// internal order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_conversations: usize,
    pub sessions_per_conversation: (usize, usize),
    pub session_length: (usize, usize),
    pub vocabulary_size: usize,
    pub topic_words: usize,
    /// Probability that a speaker also posts in one other session.
    pub speaker_overlap: f64,
    pub speakers_per_session: (usize, usize),
    pub utterance_length: (usize, usize),
    /// Probability that a token is drawn from the session topic rather than filler.
    pub topic_ratio: f64,
    /// Probability that an utterance opens by addressing an earlier speaker.
    pub mention_probability: f64,
    /// Size of a fixed topic inventory shared by all conversations: the
    /// vocabulary is cut into this many blocks of `topic_words` and each
    /// session takes a whole block. With 0 every conversation draws fresh
    /// topic words.
    pub topics: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_conversations: 100,
            sessions_per_conversation: (3, 5),
            session_length: (4, 8),
            vocabulary_size: 400,
            topic_words: 8,
            speaker_overlap: 0.2,
            speakers_per_session: (1, 3),
            utterance_length: (5, 10),
            topic_ratio: 0.6,
            mention_probability: 0.3,
            topics: 0,
        }
    }
}

impl SyntheticSpec {
    /// Applies `key = value` overrides on top of the current values.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_conversations" => self.num_conversations = kv::number(key, value)?,
            "sessions_per_conversation" => self.sessions_per_conversation = kv::range(key, value)?,
            "session_length" => self.session_length = kv::range(key, value)?,
            "vocabulary_size" => self.vocabulary_size = kv::number(key, value)?,
            "topic_words" => self.topic_words = kv::number(key, value)?,
            "speaker_overlap" => self.speaker_overlap = kv::number(key, value)?,
            "speakers_per_session" => self.speakers_per_session = kv::range(key, value)?,
            "utterance_length" => self.utterance_length = kv::range(key, value)?,
            "topic_ratio" => self.topic_ratio = kv::number(key, value)?,
            "mention_probability" => self.mention_probability = kv::number(key, value)?,
            "topics" => self.topics = kv::number(key, value)?,
            _ => return Err(Error::Config(format!("unknown generator key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_entries(entries: &[kv::Entry]) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        for e in entries {
            spec.apply(&e.key, &e.value)?;
        }
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.vocabulary_size == 0 || self.topic_words == 0 {
            return bad("vocabulary and topic words must be non-empty");
        }
        if self.sessions_per_conversation.0 == 0 || self.session_length.0 == 0 || self.speakers_per_session.0 == 0 {
            return bad("session counts, lengths and speaker counts must be positive");
        }
        if self.utterance_length.0 == 0 {
            return bad("utterance length must be positive");
        }
        for (name, (lo, hi)) in [
            ("sessions_per_conversation", self.sessions_per_conversation),
            ("session_length", self.session_length),
            ("speakers_per_session", self.speakers_per_session),
            ("utterance_length", self.utterance_length),
        ] {
            if lo > hi {
                return bad(&format!("{name} range is empty"));
            }
        }
        if self.sessions_per_conversation.1 * self.topic_words > self.vocabulary_size {
            return bad("vocabulary too small for disjoint topic words per session");
        }
        if self.topics > 0 {
            if self.topics < self.sessions_per_conversation.1 {
                return bad("fewer topics than sessions in a conversation");
            }
            if self.topics * self.topic_words > self.vocabulary_size {
                return bad("vocabulary too small for the topic inventory");
            }
        }
        for (name, p) in [
            ("speaker_overlap", self.speaker_overlap),
            ("topic_ratio", self.topic_ratio),
            ("mention_probability", self.mention_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

struct DraftUtterance {
    speaker: usize,
    text: String,
    mention_of: Option<usize>,
}

/// Generates a labeled corpus of interleaved sessions. Fully determined by
/// `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Conversation>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.num_conversations)
        .map(|c| generate_one(spec, &mut rng, format!("syn-{c:05}")))
        .collect()
}

fn generate_one(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, id: String) -> Result<Conversation> {
    let k = rng.gen_range(spec.sessions_per_conversation.0..=spec.sessions_per_conversation.1);
    let topic_idx: Vec<usize> = if spec.topics > 0 {
        index::sample(rng, spec.topics, k)
            .into_iter()
            .flat_map(|t| t * spec.topic_words..(t + 1) * spec.topic_words)
            .collect()
    } else {
        index::sample(rng, spec.vocabulary_size, k * spec.topic_words).into_vec()
    };

    // speaker ids are global within the conversation
    let mut next_speaker = 0usize;
    let mut sessions: Vec<Vec<DraftUtterance>> = Vec::with_capacity(k);
    let mut natives: Vec<Vec<usize>> = Vec::with_capacity(k);
    for s in 0..k {
        let len = rng.gen_range(spec.session_length.0..=spec.session_length.1);
        let n_spk = rng
            .gen_range(spec.speakers_per_session.0..=spec.speakers_per_session.1)
            .min(len);
        let speakers: Vec<usize> = (next_speaker..next_speaker + n_spk).collect();
        next_speaker += n_spk;
        let mut order: Vec<usize> = speakers.clone();
        order.shuffle(rng);
        while order.len() < len {
            order.push(speakers[rng.gen_range(0..n_spk)]);
        }
        let topic = &topic_idx[s * spec.topic_words..(s + 1) * spec.topic_words];
        let drafts = order
            .into_iter()
            .map(|speaker| {
                let n_tok = rng.gen_range(spec.utterance_length.0..=spec.utterance_length.1);
                let words: Vec<String> = (0..n_tok)
                    .map(|_| {
                        if rng.gen_bool(spec.topic_ratio) {
                            format!("w{}", topic[rng.gen_range(0..topic.len())])
                        } else {
                            FILLER[rng.gen_range(0..FILLER.len())].to_string()
                        }
                    })
                    .collect();
                DraftUtterance {
                    speaker,
                    text: words.join(" "),
                    mention_of: None,
                }
            })
            .collect();
        sessions.push(drafts);
        natives.push(speakers);
    }

    // a fraction of speakers also posts once in another session, taking over
    // an utterance whose native speaker keeps at least one other turn there
    if k > 1 {
        for home in 0..k {
            for &spk in &natives[home].clone() {
                if !rng.gen_bool(spec.speaker_overlap) {
                    continue;
                }
                let mut target = rng.gen_range(0..k - 1);
                if target >= home {
                    target += 1;
                }
                let mut counts: HashMap<usize, usize> = HashMap::new();
                for d in &sessions[target] {
                    *counts.entry(d.speaker).or_insert(0) += 1;
                }
                let candidates: Vec<usize> = sessions[target]
                    .iter()
                    .enumerate()
                    .filter(|(_, d)| natives[target].contains(&d.speaker) && counts[&d.speaker] >= 2)
                    .map(|(i, _)| i)
                    .collect();
                if let Some(&pos) = candidates.choose(rng) {
                    sessions[target][pos].speaker = spk;
                }
            }
        }
    }

    // address an earlier speaker of the same session
    for drafts in &mut sessions {
        for i in 1..drafts.len() {
            if !rng.gen_bool(spec.mention_probability) {
                continue;
            }
            let earlier: Vec<usize> = (0..i).filter(|&j| drafts[j].speaker != drafts[i].speaker).collect();
            if let Some(&j) = earlier.choose(rng) {
                drafts[i].mention_of = Some(j);
            }
        }
    }

    let handles: Vec<String> = {
        let ids = index::sample(rng, 10_000, next_speaker).into_vec();
        ids.into_iter().map(|n| format!("user{n}")).collect()
    };

    // uniform random merge that keeps each session's order
    let total: usize = sessions.iter().map(Vec::len).sum();
    let mut cursor = vec![0usize; k];
    let mut position: Vec<Vec<usize>> = sessions.iter().map(|s| vec![0; s.len()]).collect();
    let mut merged: Vec<(usize, usize)> = Vec::with_capacity(total);
    for step in 0..total {
        let remaining = total - step;
        let mut pick = rng.gen_range(0..remaining);
        let mut s = 0;
        loop {
            let left = sessions[s].len() - cursor[s];
            if pick < left {
                break;
            }
            pick -= left;
            s += 1;
        }
        position[s][cursor[s]] = merged.len();
        merged.push((s, cursor[s]));
        cursor[s] += 1;
    }

    let mut relabel: HashMap<usize, usize> = HashMap::new();
    let utterances = merged
        .iter()
        .enumerate()
        .map(|(idx, &(s, j))| {
            let d = &sessions[s][j];
            let text = match d.mention_of {
                Some(m) => format!("{}: {}", handles[sessions[s][m].speaker], d.text),
                None => d.text.clone(),
            };
            let next = relabel.len();
            let label = *relabel.entry(s).or_insert(next);
            let mut u = Utterance::new(idx, handles[d.speaker].clone(), text).with_session(label);
            u.reply_to = match d.mention_of {
                Some(m) => Some(position[s][m]),
                None if j > 0 => Some(position[s][j - 1]),
                None => None,
            };
            u
        })
        .collect();
    Ok(Conversation::new(id, utterances))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn single_session_is_unentangled() {
        let spec = SyntheticSpec {
            num_conversations: 10,
            sessions_per_conversation: (1, 1),
            ..SyntheticSpec::default()
        };
        for c in generate_synthetic(&spec, 1).unwrap() {
            assert!(c.utterances.iter().all(|u| u.session_id == Some(0)));
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SyntheticSpec {
            num_conversations: 20,
            ..SyntheticSpec::default()
        };
        assert_eq!(generate_synthetic(&spec, 9).unwrap(), generate_synthetic(&spec, 9).unwrap());
        assert_ne!(generate_synthetic(&spec, 9).unwrap(), generate_synthetic(&spec, 10).unwrap());
    }

    #[test]
    fn empty_vocabulary_rejected() {
        let spec = SyntheticSpec {
            vocabulary_size: 0,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&spec, 0).is_err());
    }

    #[test]
    fn sessions_are_topic_disjoint_and_ordered() {
        let spec = SyntheticSpec {
            num_conversations: 30,
            ..SyntheticSpec::default()
        };
        for c in generate_synthetic(&spec, 5).unwrap() {
            let k = c.gold_k().unwrap();
            assert!((3..=5).contains(&k));
            let labels = c.gold_labels().unwrap();
            // first-appearance labeling
            let mut seen = 0;
            for &l in &labels {
                assert!(l <= seen);
                if l == seen {
                    seen += 1;
                }
            }
            let mut vocab: Vec<HashSet<&str>> = vec![HashSet::new(); k];
            for u in &c.utterances {
                for t in u.text.split_whitespace().filter(|t| t.len() > 1 && t.starts_with('w') && t[1..].bytes().all(|b| b.is_ascii_digit())) {
                    vocab[u.session_id.unwrap()].insert(t);
                }
            }
            for a in 0..k {
                for b in a + 1..k {
                    assert!(vocab[a].is_disjoint(&vocab[b]));
                }
            }
        }
    }

    #[test]
    fn topic_inventory_assigns_whole_blocks() {
        let spec = SyntheticSpec {
            num_conversations: 20,
            topics: 12,
            ..SyntheticSpec::default()
        };
        for c in generate_synthetic(&spec, 3).unwrap() {
            let mut blocks: HashMap<usize, HashSet<usize>> = HashMap::new();
            for u in &c.utterances {
                for t in u.text.split_whitespace().filter_map(|t| t.strip_prefix('w')?.parse::<usize>().ok()) {
                    assert!(t < 12 * spec.topic_words);
                    blocks.entry(u.session_id.unwrap()).or_default().insert(t / spec.topic_words);
                }
            }
            let mut used = HashSet::new();
            for b in blocks.values() {
                assert_eq!(b.len(), 1);
                assert!(used.insert(*b.iter().next().unwrap()));
            }
        }
        let too_few = SyntheticSpec {
            topics: 3,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&too_few, 0).is_err());
    }

    #[test]
    fn kv_overrides() {
        let entries = kv::parse("num_conversations = 3\nsessions_per_conversation = 2-2\n", "s").unwrap();
        let spec = SyntheticSpec::from_entries(&entries).unwrap();
        assert_eq!(spec.num_conversations, 3);
        assert_eq!(spec.sessions_per_conversation, (2, 2));
        assert!(SyntheticSpec::from_entries(&kv::parse("bogus = 1", "s").unwrap()).is_err());
    }
}
