use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Word vectors with a deterministic fallback for unknown words.
///
/// Unknown words get a vector drawn uniformly from `[-0.1, 0.1]` by an RNG
/// seeded from a stable hash of the word and the table seed, so the same word
/// always maps to the same vector without storing it.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    dimension: usize,
    vectors: HashMap<String, Vec<f64>>,
    seed: u64,
}

impl EmbeddingTable {
    /// A table with no stored vectors; every word uses the fallback.
    pub fn hashed(dimension: usize, seed: u64) -> Self {
        EmbeddingTable {
            dimension,
            vectors: HashMap::new(),
            seed,
        }
    }

    /// Loads the whitespace-separated text format (`word v1 ... vd` per
    /// line). A leading `count dim` header line is accepted and skipped.
    pub fn load(path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(BufReader::new(file), &path.display().to_string(), seed)
    }

    pub fn parse(reader: impl BufRead, source: &str, seed: u64) -> Result<Self> {
        let mut dimension = None;
        let mut vectors = HashMap::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(source, e))?;
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let rest: Vec<&str> = fields.collect();
            if n == 0 && rest.len() == 1 && word.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
                continue;
            }
            let err = |reason: String| Error::Parse {
                path: source.to_string(),
                line: n + 1,
                reason,
            };
            let values = rest
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| err(format!("bad number {v:?}"))))
                .collect::<Result<Vec<f64>>>()?;
            let d = *dimension.get_or_insert(values.len());
            if d == 0 || values.len() != d {
                return Err(err(format!("expected {d} components, found {}", values.len())));
            }
            vectors.insert(word.to_string(), values);
        }
        let Some(dimension) = dimension else {
            return Err(Error::Data(format!("{source}: no embedding vectors")));
        };
        Ok(EmbeddingTable {
            dimension,
            vectors,
            seed,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocabulary_size(&self) -> usize {
        self.vectors.len()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vectors.contains_key(word)
    }

    /// Vector for `word`, falling back to the hash-seeded generator.
    pub fn lookup(&self, word: &str) -> Vec<f64> {
        if let Some(v) = self.vectors.get(word) {
            return v.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()) ^ self.seed);
        (0..self.dimension).map(|_| rng.gen_range(-0.1..=0.1)).collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_text_format_with_header() {
        let data = "2 3\nthe 0.1 0.2 0.3\ncat -1 0 1e-2\n";
        let t = EmbeddingTable::parse(data.as_bytes(), "mem", 0).unwrap();
        assert_eq!(t.dimension(), 3);
        assert_eq!(t.vocabulary_size(), 2);
        assert_eq!(t.lookup("cat"), vec![-1.0, 0.0, 0.01]);
    }

    #[test]
    fn ragged_line_rejected_with_line_number() {
        let data = "the 0.1 0.2\ncat 1\n";
        let err = EmbeddingTable::parse(data.as_bytes(), "e.txt", 0).unwrap_err().to_string();
        assert!(err.starts_with("e.txt:2"), "{err}");
    }

    #[test]
    fn fallback_is_deterministic_and_bounded() {
        let t = EmbeddingTable::hashed(16, 3);
        let a = t.lookup("zyzzyva");
        assert_eq!(a, t.lookup("zyzzyva"));
        assert_ne!(a, t.lookup("zyzzyvas"));
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|x| (-0.1..=0.1).contains(x)));
        assert_ne!(a, EmbeddingTable::hashed(16, 4).lookup("zyzzyva"));
    }
}
