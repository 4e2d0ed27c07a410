use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderDims;
use crate::error::{Error, Result};
use crate::kpredictor::DEFAULT_K_HIDDEN;
use crate::kv::{self, Entry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Supervised,
    Unsupervised,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "unsupervised" => Ok(Mode::Unsupervised),
            _ => Err(Error::Config(format!("mode: expected supervised or unsupervised, got {s:?}"))),
        }
    }
}

/// How the number of sessions is chosen at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KSelector {
    Predictor,
    Elbow,
    Silhouette,
    Gold,
}

impl FromStr for KSelector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predictor" => Ok(KSelector::Predictor),
            "elbow" => Ok(KSelector::Elbow),
            "silhouette" => Ok(KSelector::Silhouette),
            "gold" => Ok(KSelector::Gold),
            _ => Err(Error::Config(format!(
                "k_selector: expected predictor, elbow, silhouette or gold, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for KSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KSelector::Predictor => "predictor",
            KSelector::Elbow => "elbow",
            KSelector::Silhouette => "silhouette",
            KSelector::Gold => "gold",
        })
    }
}

/// Loss components that can be switched off for ablations.
pub const COMPONENTS: [&str; 6] = ["l_u", "l_s", "l_k", "l_m", "l_u_prime", "l_s_prime"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub tau1_prime: f64,
    pub tau2_prime: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_sessions: usize,
    /// `0` keeps every negative.
    pub negative_cap: usize,
    pub em_kset: Vec<usize>,
    pub seed: u64,
    pub k_selector: KSelector,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub k_hidden: usize,
    /// Relu on the K logits before the softmax.
    pub k_logit_activation: bool,
    pub clip_norm: Option<f64>,
    /// Epochs between unsupervised re-clustering passes.
    pub recluster_every: usize,
    pub disable: Vec<String>,
    /// Word-vector file; `None` uses seeded hashed vectors.
    pub embeddings: Option<String>,
    pub embedding_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Supervised,
            alpha: 0.4,
            beta: 0.4,
            gamma: 0.2,
            eta: 0.4,
            tau1: 0.5,
            tau2: 0.5,
            tau1_prime: 0.5,
            tau2_prime: 0.1,
            learning_rate: 5e-5,
            batch_size: 16,
            epochs: 10,
            max_sessions: 14,
            negative_cap: 64,
            em_kset: vec![2, 3, 4, 5],
            seed: 0,
            k_selector: KSelector::Predictor,
            embedding_dim: 300,
            hidden_dim: 300,
            attention_dim: 300,
            k_hidden: DEFAULT_K_HIDDEN,
            k_logit_activation: true,
            clip_norm: None,
            recluster_every: 1,
            disable: Vec::new(),
            embeddings: None,
            embedding_seed: 0,
        }
    }
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| kv::number(key, s))
        .collect()
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = value.parse()?,
            "alpha" => self.alpha = kv::number(key, value)?,
            "beta" => self.beta = kv::number(key, value)?,
            "gamma" => self.gamma = kv::number(key, value)?,
            "eta" => self.eta = kv::number(key, value)?,
            "tau1" => self.tau1 = kv::number(key, value)?,
            "tau2" => self.tau2 = kv::number(key, value)?,
            "tau1_prime" => self.tau1_prime = kv::number(key, value)?,
            "tau2_prime" => self.tau2_prime = kv::number(key, value)?,
            "learning_rate" => self.learning_rate = kv::number(key, value)?,
            "batch_size" => self.batch_size = kv::number(key, value)?,
            "epochs" => self.epochs = kv::number(key, value)?,
            "max_sessions" => self.max_sessions = kv::number(key, value)?,
            "negative_cap" => self.negative_cap = kv::number(key, value)?,
            "em_kset" => self.em_kset = list(key, value)?,
            "seed" => self.seed = kv::number(key, value)?,
            "k_selector" => self.k_selector = value.parse()?,
            "embedding_dim" => self.embedding_dim = kv::number(key, value)?,
            "hidden_dim" => self.hidden_dim = kv::number(key, value)?,
            "attention_dim" => self.attention_dim = kv::number(key, value)?,
            "k_hidden" => self.k_hidden = kv::number(key, value)?,
            "k_logit_activation" => self.k_logit_activation = kv::boolean(key, value)?,
            "clip_norm" => {
                self.clip_norm = match value {
                    "" | "none" => None,
                    v => Some(kv::number(key, v)?),
                }
            }
            "recluster_every" => self.recluster_every = kv::number(key, value)?,
            "disable" => {
                self.disable = value
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            }
            "embeddings" => self.embeddings = (!value.is_empty()).then(|| value.to_string()),
            "embedding_seed" => self.embedding_seed = kv::number(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies entries over the defaults, naming the line of a bad entry.
    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut c = TrainConfig::default();
        for e in entries {
            c.set(&e.key, &e.value)
                .map_err(|err| Error::Config(format!("line {}: {err}", e.line)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("eta", self.eta)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(&format!("{name} must be a finite non-negative weight"));
            }
        }
        for (name, t) in [
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("tau1_prime", self.tau1_prime),
            ("tau2_prime", self.tau2_prime),
            ("learning_rate", self.learning_rate),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.mode == Mode::Unsupervised && self.batch_size < 2 {
            return bad("batch_size must be at least 2 conversations in unsupervised mode");
        }
        if self.max_sessions == 0 {
            return bad("max_sessions must be positive");
        }
        if self.em_kset.is_empty() || self.em_kset.contains(&0) {
            return bad("em_kset must list positive cluster counts");
        }
        if self.embedding_dim == 0 || self.hidden_dim == 0 || self.attention_dim == 0 || self.k_hidden == 0 {
            return bad("layer widths must be positive");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive");
            }
        }
        if self.recluster_every == 0 {
            return bad("recluster_every must be positive");
        }
        if let Some(d) = self.disable.iter().find(|d| !COMPONENTS.contains(&d.as_str())) {
            return bad(&format!("disable: unknown component {d:?}"));
        }
        Ok(())
    }

    pub fn enabled(&self, component: &str) -> bool {
        !self.disable.iter().any(|d| d == component)
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            embedding_dim: self.embedding_dim,
            hidden: self.hidden_dim,
            attention: self.attention_dim,
        }
    }

    pub fn negative_cap(&self) -> Option<usize> {
        (self.negative_cap > 0).then_some(self.negative_cap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.alpha, c.beta, c.gamma, c.eta), (0.4, 0.4, 0.2, 0.4));
        assert_eq!((c.tau1, c.tau2, c.tau1_prime, c.tau2_prime), (0.5, 0.5, 0.5, 0.1));
        assert_eq!((c.learning_rate, c.batch_size, c.epochs), (5e-5, 16, 10));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn parses_entries() {
        let e = kv::parse("mode = unsupervised\nem_kset = 2,3\ndisable = l_u_prime\nclip_norm = 5\n", "c").unwrap();
        let c = TrainConfig::from_entries(&e).unwrap();
        assert_eq!(c.mode, Mode::Unsupervised);
        assert_eq!(c.em_kset, vec![2, 3]);
        assert!(!c.enabled("l_u_prime"));
        assert_eq!(c.clip_norm, Some(5.0));
    }

    #[test]
    fn rejects_bad_values() {
        for text in ["tau1 = 0", "batch_size = 0", "bogus = 1", "disable = l_x", "mode = half", "em_kset = 0,2"] {
            let e = kv::parse(text, "c").unwrap();
            assert!(TrainConfig::from_entries(&e).is_err(), "{text}");
        }
        let e = kv::parse("mode = unsupervised\nbatch_size = 1", "c").unwrap();
        assert!(TrainConfig::from_entries(&e).is_err());
    }
}
