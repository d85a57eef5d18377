//! Embedding providers.
//!
//! Downstream code only ever sees [`FeatureBundle`]s. Two providers ship
//! with the crate: [`HashEmbedder`], a deterministic pseudo-random token
//! embedder keyed on `(seed, lowercase token)`, and [`PrecomputedFeatures`],
//! which reads image vectors extracted by an external model.
//!
//! Precomputed-feature file format:
//!
//! ```text
//! dim=4
//! p1 0.1 0.2 0.3 0.4
//! p2 -1 0 0.5 2
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::types::{normalize_gps, FeatureBundle, Package, Presence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    HashTokens,
    PrecomputedFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingProviderConfig {
    pub kind: ProviderKind,
    pub text_dim: usize,
    pub image_dim: usize,
    pub seed: u64,
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        EmbeddingProviderConfig {
            kind: ProviderKind::HashTokens,
            text_dim: 64,
            image_dim: 96,
            seed: 0,
        }
    }
}

pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed_token(&self, token: &str) -> Result<Vec<f64>>;
}

pub trait ImageFeatureSource {
    fn dim(&self) -> usize;
    fn image_features(&self, id: &str) -> Result<Vec<f64>>;
}

/// Deterministic stand-in for a pretrained word-vector table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be > 0".into()));
        }
        Ok(HashEmbedder { dim, seed })
    }

    pub fn from_config(cfg: &EmbeddingProviderConfig) -> Result<Self> {
        HashEmbedder::new(cfg.text_dim, cfg.seed)
    }

    /// Unit-variance entries scaled by `1/sqrt(dim)`, so squared norms are
    /// close to one. The key is case-sensitive; callers lowercase tokens.
    pub fn embed_key(&self, key: &str) -> Vec<f64> {
        hash_vector(self.seed, key, self.dim)
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_token(&self, token: &str) -> Result<Vec<f64>> {
        if token.is_empty() {
            return Err(Error::Invalid("cannot embed an empty token".into()));
        }
        Ok(self.embed_key(&token.to_lowercase()))
    }
}

/// Pseudo-normal vector of length `dim` keyed by `(seed, key)`.
pub fn hash_vector(seed: u64, key: &str, dim: usize) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

/// Row mean of a token matrix. An empty matrix yields zeros and `false`.
pub fn pool_average(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, bool) {
    let mut out = vec![0.0; dim];
    if rows.is_empty() {
        return (out, false);
    }
    for row in rows {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    (out, true)
}

/// Image vectors keyed by package id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrecomputedFeatures {
    dim: usize,
    rows: BTreeMap<String, Vec<f64>>,
}

impl PrecomputedFeatures {
    pub fn new(dim: usize) -> Self {
        PrecomputedFeatures {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!("feature dim {} != {}", v.len(), self.dim)));
        }
        self.rows.insert(id.into(), v);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.rows.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        Self::parse(path, &text)
    }

    fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::format(path, 1, "missing `dim=<D>` header"))?;
        let dim: usize = header
            .trim()
            .strip_prefix("dim=")
            .and_then(|d| d.parse().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::format(path, 1, format!("bad header `{header}`")))?;
        let mut out = PrecomputedFeatures::new(dim);
        for (i, line) in lines {
            let lineno = i + 1;
            let mut fields = line.split_whitespace();
            let Some(id) = fields.next() else { continue };
            let values: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, lineno, e.to_string()))?;
            if values.len() != dim {
                return Err(Error::format(
                    path,
                    lineno,
                    format!("row has {} values, header declares {dim}", values.len()),
                ));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(path, lineno, "non-finite value"));
            }
            out.rows.insert(id.to_owned(), values);
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dim={}\n", self.dim);
        for (id, row) in &self.rows {
            out.push_str(id);
            for v in row {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_text().as_bytes())
    }
}

impl ImageFeatureSource for PrecomputedFeatures {
    fn dim(&self) -> usize {
        self.dim
    }

    fn image_features(&self, id: &str) -> Result<Vec<f64>> {
        self.get(id)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::MissingId(id.to_owned()))
    }
}

/// Loads the vectors for `ids` from a precomputed-feature file.
pub fn load_precomputed<S: AsRef<str>>(path: &Path, ids: &[S]) -> Result<BTreeMap<String, Vec<f64>>> {
    let all = PrecomputedFeatures::load(path)?;
    ids.iter()
        .map(|id| {
            let id = id.as_ref();
            all.image_features(id).map(|v| (id.to_owned(), v))
        })
        .collect()
}

/// Builds the feature bundle of a package from the two providers.
///
/// The image is looked up by `image_ref`, falling back to the package id.
pub fn featurize(
    p: &Package,
    text: &dyn TextEmbedder,
    images: &dyn ImageFeatureSource,
) -> Result<FeatureBundle> {
    let key = p.image_ref.as_deref().unwrap_or(&p.id);
    let image = images.image_features(key)?;
    let text_tokens = p
        .tokens
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| text.embed_token(t))
        .collect::<Result<Vec<_>>>()?;
    let (text_pooled, has_text) = pool_average(&text_tokens, text.dim());
    let gps = normalize_gps(p.gps.lat, p.gps.lon)?;
    Ok(FeatureBundle {
        image,
        text_tokens,
        text_pooled,
        gps,
        present: Presence {
            image: true,
            text: has_text,
            gps: true,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn hash_embedding_is_deterministic_and_seeded() {
        let e1 = HashEmbedder::new(32, 1).unwrap();
        let e2 = HashEmbedder::new(32, 2).unwrap();
        let a = e1.embed_token("london").unwrap();
        assert_eq!(a, e1.embed_token("london").unwrap());
        assert_ne!(a, e2.embed_token("london").unwrap());
        assert_eq!(a, e1.embed_token("London").unwrap());
        assert!(e1.embed_token("").is_err());
        assert!(HashEmbedder::new(0, 1).is_err());
    }

    #[test]
    fn hash_embedding_squared_norm_near_one() {
        let e = HashEmbedder::new(64, 7).unwrap();
        let mean: f64 = (0..1000)
            .map(|i| {
                let v = e.embed_token(&format!("tok{i}")).unwrap();
                v.iter().map(|x| x * x).sum::<f64>()
            })
            .sum::<f64>()
            / 1000.0;
        assert!((mean - 1.0).abs() < 0.1, "mean squared norm {mean}");
    }

    #[test]
    fn hash_embeddings_are_near_orthogonal() {
        let e = HashEmbedder::new(64, 3).unwrap();
        let n = 10_000;
        let mut sum = 0.0;
        for i in 0..n {
            let a = e.embed_token(&format!("a{i}")).unwrap();
            let b = e.embed_token(&format!("b{i}")).unwrap();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            sum += dot / (na * nb);
        }
        assert!((sum / n as f64).abs() < 0.05);
    }

    #[test]
    fn pooling() {
        let v = vec![1.0, -2.0, 3.0];
        assert_eq!(pool_average(&[v.clone()], 3), (v.clone(), true));
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_eq!(pool_average(&[v, neg], 3).0, vec![0.0; 3]);
        assert_eq!(pool_average(&[], 3), (vec![0.0; 3], false));
    }

    #[test]
    fn precomputed_lookup_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.txt");
        fs::write(&path, "dim=3\np1 1 2 3\np2 0.5 -0.5 0\n").unwrap();
        let got = load_precomputed(&path, &["p1"]).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got["p1"], vec![1.0, 2.0, 3.0]);

        match load_precomputed(&path, &["p3"]) {
            Err(Error::MissingId(id)) => assert_eq!(id, "p3"),
            other => panic!("expected missing id, got {other:?}"),
        }

        fs::write(&path, "dim=3\np1 1 2 3\np2 1 2\n").unwrap();
        match load_precomputed(&path, &["p1"]) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn precomputed_text_round_trip() {
        let mut f = PrecomputedFeatures::new(2);
        f.insert("a", vec![0.1, 1.0 / 3.0]).unwrap();
        f.insert("b", vec![-1e-300, 12345.678]).unwrap();
        let back = PrecomputedFeatures::parse(Path::new("mem"), &f.to_text()).unwrap();
        assert_eq!(back, f);
    }
}
