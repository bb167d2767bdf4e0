//! Frozen text-encoder stand-in.
//!
//! Every category name maps to a fixed unit-norm embedding drawn from a
//! seeded hash of the name bytes, so identical strings collide bitwise and
//! the bank can be regenerated anywhere. No gradient ever flows into these
//! rows; banks enter graphs as constants.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Deterministic stub encoder for category-name strings.
#[derive(Clone, Copy, Debug)]
pub struct TextEncoderStub {
    pub d_t: usize,
}

/// Frozen unit-norm embeddings for a list of names (duplicates kept: one row
/// per name occurrence, as a mini-batch bank requires).
#[derive(Clone, Debug)]
pub struct TextBank {
    names: Vec<String>,
    embeddings: Tensor,
    first_row: HashMap<String, usize>,
}

impl TextEncoderStub {
    pub fn new(d_t: usize) -> Result<Self> {
        if d_t < 8 {
            return Err(Error::Validation(format!("d_t must be >= 8, got {}", d_t)));
        }
        Ok(Self { d_t })
    }

    /// Unit-norm embedding of one name. Identical strings produce bitwise
    /// identical vectors.
    pub fn embed(&self, name: &str) -> Result<Vec<f64>> {
        if name.is_empty() {
            return Err(Error::Validation("empty category name".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(name.as_bytes()));
        let mut v = Tensor::randn(&[self.d_t], 1.0, &mut rng).into_data();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= norm;
        }
        Ok(v)
    }

    /// Bank for a mini-batch's names; duplicates share rows bitwise.
    pub fn bank(&self, names: &[String]) -> Result<TextBank> {
        if names.is_empty() {
            return Err(Error::Validation("empty name list for text bank".into()));
        }
        let mut data = Vec::with_capacity(names.len() * self.d_t);
        let mut first_row = HashMap::new();
        for (i, name) in names.iter().enumerate() {
            data.extend_from_slice(&self.embed(name)?);
            first_row.entry(name.clone()).or_insert(i);
        }
        Ok(TextBank {
            names: names.to_vec(),
            embeddings: Tensor::from_vec(data, &[names.len(), self.d_t]),
            first_row,
        })
    }

    /// Bank for a category vocabulary. Distinct names must stay below the
    /// cosine threshold `tau` so the category mask can separate them.
    pub fn vocab_bank(&self, names: &[String], tau: f64) -> Result<TextBank> {
        let bank = self.bank(names)?;
        let m = bank.len();
        for i in 0..m {
            for j in (i + 1)..m {
                if bank.names[i] == bank.names[j] {
                    continue;
                }
                let cos = dot(bank.embeddings.row(i), bank.embeddings.row(j));
                if cos >= tau {
                    return Err(Error::Validation(format!(
                        "vocabulary collision: cos({:?}, {:?}) = {:.4} >= tau {}",
                        bank.names[i], bank.names[j], cos, tau
                    )));
                }
            }
        }
        Ok(bank)
    }

    /// Cosine similarity of two names' stub embeddings; symmetric, in [-1,1].
    pub fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        Ok(dot(&self.embed(a)?, &self.embed(b)?))
    }
}

impl TextBank {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn d_t(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }

    /// First row holding `name`, if present.
    pub fn row_of(&self, name: &str) -> Option<usize> {
        self.first_row.get(name).copied()
    }

    /// Population standard deviation over every entry of the bank.
    pub fn global_std(&self) -> f64 {
        let data = self.embeddings.data();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    }

    /// Per-dimension standard deviation (column-wise).
    pub fn per_dim_std(&self) -> Vec<f64> {
        let (m, d) = (self.embeddings.rows(), self.embeddings.cols());
        let mut out = vec![0.0; d];
        for c in 0..d {
            let mut mean = 0.0;
            for r in 0..m {
                mean += self.embeddings.at2(r, c);
            }
            mean /= m as f64;
            let mut var = 0.0;
            for r in 0..m {
                let e = self.embeddings.at2(r, c) - mean;
                var += e * e;
            }
            out[c] = (var / m as f64).sqrt();
        }
        out
    }

    /// Pairwise cosine Gram matrix of the bank rows.
    pub fn gram(&self) -> Tensor {
        let m = self.len();
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] = dot(self.row(i), self.row(j));
            }
        }
        Tensor::from_vec(out, &[m, m])
    }

    /// Write the Gram matrix as CSV (header row of names, then one row each).
    pub fn write_gram_csv(&self, path: &Path) -> Result<()> {
        let gram = self.gram();
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "name,{}", self.names.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = (0..self.len())
                .map(|j| format!("{:.6}", gram.at2(i, j)))
                .collect();
            writeln!(f, "{},{}", self.names[i], row.join(","))?;
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    h
}
