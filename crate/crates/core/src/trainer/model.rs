use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::config::TrainConfig;
use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::EmbeddingTable;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::kpredictor::KPredictorParams;

/// Encoder plus session-count predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = Tensor> {
    pub encoder: EncoderParams<T>,
    pub kpredictor: KPredictorParams<T>,
}

impl Model<Tensor> {
    pub fn init(config: &TrainConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = config.dims();
        let encoder = EncoderParams::init(dims, &mut rng);
        let kpredictor = KPredictorParams::init(
            dims.output_dim(),
            config.attention_dim,
            config.k_hidden,
            config.max_sessions,
            &mut rng,
        );
        Model { encoder, kpredictor }
    }

    pub fn bind(&self, tape: &mut Tape) -> Model<Var> {
        Model {
            encoder: self.encoder.bind(tape),
            kpredictor: self.kpredictor.bind(tape),
        }
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.named().into_iter().map(|(_, t)| t.shape().to_vec()).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }
}

impl<T> Model<T> {
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.encoder.named("encoder", &mut out);
        self.kpredictor.named("kpredictor", &mut out);
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.encoder.slots_mut(&mut out);
        self.kpredictor.slots_mut(&mut out);
        out
    }
}

/// Word vectors for a config: the configured file, or seeded hashed vectors.
pub fn embedding_table(config: &TrainConfig) -> Result<EmbeddingTable> {
    let table = match &config.embeddings {
        Some(path) => EmbeddingTable::load(path, config.embedding_seed)?,
        None => EmbeddingTable::hashed(config.embedding_dim, config.embedding_seed),
    };
    if table.dimension() != config.embedding_dim {
        return Err(Error::Config(format!(
            "embedding file has dimension {}, embedding_dim is {}",
            table.dimension(),
            config.embedding_dim
        )));
    }
    Ok(table)
}

/// Position of the training random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub model: Model,
    pub adam: AdamState,
}

const MAGIC: &[u8; 8] = b"BICLCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RngHeader {
    seed: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    rng: RngHeader,
    adam: AdamHeader,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Layout: magic, version (u32 LE), header length (u64 LE), JSON header,
    /// then every tensor's data as little-endian f64 in header order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.model.named();
        let mut tensors: Vec<(String, &Tensor)> = named.into_iter().collect();
        let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
        for (n, m) in names.iter().zip(&self.adam.m) {
            tensors.push((format!("adam.m.{n}"), m));
        }
        for (n, v) in names.iter().zip(&self.adam.v) {
            tensors.push((format!("adam.v.{n}"), v));
        }
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            rng: RngHeader {
                seed: self.rng.seed,
                word_pos: self.rng.word_pos.to_string(),
            },
            adam: AdamHeader {
                step: self.adam.step,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                epsilon: self.adam.epsilon,
            },
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < len {
            return Err(fail("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..len]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        header.config.validate()?;
        let word_pos: u128 = header
            .rng
            .word_pos
            .parse()
            .map_err(|_| fail("bad rng position"))?;

        let mut blobs = &body[len..];
        let mut read = |entry: &TensorEntry| -> Result<Tensor> {
            let count: usize = entry.shape.iter().product();
            if blobs.len() < count * 8 {
                return Err(Error::Checkpoint(format!("{}: truncated data", entry.name)));
            }
            let data = blobs[..count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blobs = &blobs[count * 8..];
            Tensor::new(entry.shape.clone(), data).map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))
        };

        let mut model = Model::init(&header.config, 0);
        let names = model.names();
        let expected: Vec<String> = names
            .iter()
            .cloned()
            .chain(names.iter().map(|n| format!("adam.m.{n}")))
            .chain(names.iter().map(|n| format!("adam.v.{n}")))
            .collect();
        let got: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
        if got != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(fail("tensor directory does not match the configured model"));
        }
        let mut loaded = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            loaded.push(read(entry)?);
        }
        if !blobs.is_empty() {
            return Err(fail("trailing bytes"));
        }
        let n = names.len();
        let mut v: Vec<Tensor> = loaded.split_off(2 * n);
        let m: Vec<Tensor> = loaded.split_off(n);
        for (slot, t) in model.slots_mut().into_iter().zip(loaded) {
            if slot.shape() != t.shape() {
                return Err(fail("tensor shape does not match the configured model"));
            }
            *slot = t;
        }
        v.truncate(n);
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            rng: RngState {
                seed: header.rng.seed,
                word_pos,
            },
            model,
            adam: AdamState {
                step: header.adam.step,
                beta1: header.adam.beta1,
                beta2: header.adam.beta2,
                epsilon: header.adam.epsilon,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
