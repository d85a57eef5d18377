//! Exact multimodal nearest-neighbour retrieval over a reference set.
//!
//! A reference package `r` is scored against a query `q` by summing one
//! similarity per modality; the top-ranked package is the arg-max of that
//! sum. Scoring is brute force over every row, in index order.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FeatureBundle, Modality, Presence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpsSimilarity {
    /// Cosine on the normalized coordinate pair.
    #[default]
    Cosine,
    /// Negated euclidean distance on normalized coordinates.
    NegEuclidean,
}

impl FromStr for GpsSimilarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(GpsSimilarity::Cosine),
            "neg_euclidean" => Ok(GpsSimilarity::NegEuclidean),
            other => Err(Error::Config(format!("unknown gps_sim `{other}`"))),
        }
    }
}

impl fmt::Display for GpsSimilarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GpsSimilarity::Cosine => "cosine",
            GpsSimilarity::NegEuclidean => "neg_euclidean",
        })
    }
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

fn cosine_with_norms(u: &[f64], v: &[f64], nu: f64, nv: f64) -> f64 {
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("cosine of dims {} and {}", u.len(), v.len())));
    }
    Ok(cosine_with_norms(u, v, norm(u), norm(v)))
}

fn modality_similarity(m: Modality, u: &[f64], v: &[f64], gps_sim: GpsSimilarity) -> Result<f64> {
    match (m, gps_sim) {
        (Modality::Gps, GpsSimilarity::NegEuclidean) => {
            if u.len() != v.len() {
                return Err(Error::Shape("gps dims differ".into()));
            }
            Ok(-u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        }
        _ => cosine(u, v),
    }
}

/// Sum of per-modality similarities between two bundles.
pub fn score_pair(
    q: &FeatureBundle,
    r: &FeatureBundle,
    modalities: &[Modality],
    gps_sim: GpsSimilarity,
) -> Result<f64> {
    if modalities.is_empty() {
        return Err(Error::Invalid("empty modality set".into()));
    }
    let mut total = 0.0;
    for &m in modalities {
        total += modality_similarity(m, q.modality(m), r.modality(m), gps_sim)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
    pub modalities: Vec<Modality>,
}

impl RetrievalResult {
    pub fn top(&self) -> Option<&Hit> {
        self.hits.first()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.id.as_str()).collect()
    }

    /// Tab-separated `id<TAB>score` lines.
    pub fn to_tsv(&self) -> String {
        self.hits.iter().map(|h| format!("{}\t{}\n", h.id, h.score)).collect()
    }
}

/// One reference package as handed to [`ReferenceIndex::build`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEntry {
    pub id: String,
    pub bundle: FeatureBundle,
    pub cluster_id: Option<u32>,
}

/// Row-major matrix for one modality plus cached row norms.
#[derive(Debug, Clone, PartialEq)]
struct ModalityMatrix {
    dim: usize,
    data: Vec<f64>,
    norms: Vec<f64>,
}

impl ModalityMatrix {
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Immutable feature store over the reference dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceIndex {
    entries: Vec<ReferenceEntry>,
    matrices: [ModalityMatrix; 3],
    mask: Presence,
    gps_sim: GpsSimilarity,
}

impl ReferenceIndex {
    pub fn build(entries: Vec<ReferenceEntry>) -> Result<Self> {
        Self::build_with(entries, GpsSimilarity::default())
    }

    pub fn build_with(entries: Vec<ReferenceEntry>, gps_sim: GpsSimilarity) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let first = &entries[0].bundle;
        let (image_dim, text_dim) = (first.image_dim(), first.text_dim());
        for e in &entries {
            e.bundle.check(image_dim, text_dim)?;
        }
        let matrices = Modality::ALL.map(|m| {
            let dim = first.modality(m).len();
            let mut data = Vec::with_capacity(dim * entries.len());
            let mut norms = Vec::with_capacity(entries.len());
            for e in &entries {
                let row = e.bundle.modality(m);
                data.extend_from_slice(row);
                norms.push(norm(row));
            }
            ModalityMatrix { dim, data, norms }
        });
        Ok(ReferenceIndex {
            entries,
            matrices,
            mask: Presence::ALL,
            gps_sim,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ReferenceEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &ReferenceEntry {
        &self.entries[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    pub fn mask(&self) -> Presence {
        self.mask
    }

    pub fn gps_similarity(&self) -> GpsSimilarity {
        self.gps_sim
    }

    /// Copy of the index in which modality `m` is absent from every package.
    pub fn without_modality(&self, m: Modality) -> ReferenceIndex {
        let entries = self
            .entries
            .iter()
            .map(|e| ReferenceEntry {
                bundle: e.bundle.without(m),
                ..e.clone()
            })
            .collect();
        let mut matrices = self.matrices.clone();
        let mat = &mut matrices[m.index()];
        mat.data.iter_mut().for_each(|v| *v = 0.0);
        mat.norms.iter_mut().for_each(|v| *v = 0.0);
        let mut mask = self.mask;
        mask.set(m, false);
        ReferenceIndex {
            entries,
            matrices,
            mask,
            gps_sim: self.gps_sim,
        }
    }

    /// True when every cached norm matches a fresh computation to 1e-9.
    pub fn norms_consistent(&self) -> bool {
        self.matrices.iter().all(|mat| {
            (0..self.len()).all(|i| (norm(mat.row(i)) - mat.norms[i]).abs() <= 1e-9)
        })
    }

    fn row_score(&self, i: usize, q: &FeatureBundle, q_norms: &[f64; 3], modalities: &[Modality]) -> f64 {
        let mut total = 0.0;
        for &m in modalities {
            let mat = &self.matrices[m.index()];
            let row = mat.row(i);
            let qv = q.modality(m);
            total += match (m, self.gps_sim) {
                (Modality::Gps, GpsSimilarity::NegEuclidean) => {
                    -qv.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                }
                _ => cosine_with_norms(qv, row, q_norms[m.index()], mat.norms[i]),
            };
        }
        total
    }

    /// Scores every reference package; entry `i` is the score of row `i`.
    pub fn score_all(&self, q: &FeatureBundle, modalities: &[Modality]) -> Result<Vec<f64>> {
        if modalities.is_empty() {
            return Err(Error::Invalid("empty modality set".into()));
        }
        for &m in modalities {
            let want = self.matrices[m.index()].dim;
            if q.modality(m).len() != want {
                return Err(Error::Shape(format!(
                    "query {m} dim {} != index dim {want}",
                    q.modality(m).len()
                )));
            }
        }
        let q_norms = Modality::ALL.map(|m| norm(q.modality(m)));
        Ok((0..self.len())
            .map(|i| self.row_score(i, q, &q_norms, modalities))
            .collect())
    }

    /// Row indices of the `k` best-scoring packages, best first.
    pub fn top_k_rows(&self, q: &FeatureBundle, modalities: &[Modality], k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 {
            return Err(Error::Invalid("k must be >= 1".into()));
        }
        let scores = self.score_all(q, modalities)?;
        let mut order: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.entries[a.0].id.cmp(&self.entries[b.0].id))
        };
        let k = k.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_by(cmp);
        Ok(order)
    }

    pub fn retrieve_top_k(&self, q: &FeatureBundle, modalities: &[Modality], k: usize) -> Result<RetrievalResult> {
        let rows = self.top_k_rows(q, modalities, k)?;
        Ok(RetrievalResult {
            hits: rows
                .into_iter()
                .map(|(i, score)| Hit {
                    id: self.entries[i].id.clone(),
                    score,
                })
                .collect(),
            modalities: modalities.to_vec(),
        })
    }

    pub fn retrieve_per_modality(&self, q: &FeatureBundle, m: Modality, k: usize) -> Result<RetrievalResult> {
        self.retrieve_top_k(q, &[m], k)
    }

    /// Row index of the arg-max package.
    pub fn top1(&self, q: &FeatureBundle, modalities: &[Modality]) -> Result<usize> {
        Ok(self.top_k_rows(q, modalities, 1)?[0].0)
    }
}

/// Top-1 cluster accuracy split by query integrity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalAccuracy {
    pub manipulated: f64,
    pub unmanipulated: f64,
    pub overall: f64,
    pub n_manipulated: usize,
    pub n_unmanipulated: usize,
}

/// A query for accuracy measurement.
pub struct LabeledQuery<'a> {
    pub bundle: &'a FeatureBundle,
    pub cluster_id: Option<u32>,
    pub manipulated: bool,
}

/// Fraction of queries whose top-1 package shares their cluster.
pub fn top1_accuracy(
    queries: &[LabeledQuery<'_>],
    index: &ReferenceIndex,
    modalities: &[Modality],
) -> Result<RetrievalAccuracy> {
    let (mut hit_m, mut n_m, mut hit_u, mut n_u) = (0usize, 0usize, 0usize, 0usize);
    for q in queries {
        let top = index.top1(q.bundle, modalities)?;
        let hit = q.cluster_id.is_some() && index.entry(top).cluster_id == q.cluster_id;
        if q.manipulated {
            n_m += 1;
            hit_m += usize::from(hit);
        } else {
            n_u += 1;
            hit_u += usize::from(hit);
        }
    }
    let frac = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(RetrievalAccuracy {
        manipulated: frac(hit_m, n_m),
        unmanipulated: frac(hit_u, n_u),
        overall: frac(hit_m + hit_u, n_m + n_u),
        n_manipulated: n_m,
        n_unmanipulated: n_u,
    })
}
