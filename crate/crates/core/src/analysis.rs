//! Evaluation metrics, the modality-importance experiment and the
//! retrieval-overlap baseline.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Model, QuerySample};
use crate::retrieval::{top1_accuracy, LabeledQuery, ReferenceIndex, RetrievalAccuracy};
use crate::types::{FeatureBundle, Modality};

/// `X R` with `R` a `d x L` matrix of iid `N(0, 1/L)` entries drawn from `seed`.
pub fn random_projection(x: &[Vec<f64>], l: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if l == 0 {
        return Err(Error::Invalid("projection dim must be >= 1".into()));
    }
    let d = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("ragged projection input".into()));
    }
    let r = projection_matrix(d, l, seed);
    Ok(x.iter()
        .map(|row| {
            let mut out = vec![0.0; l];
            for (v, rrow) in row.iter().zip(r.chunks_exact(l)) {
                if *v != 0.0 {
                    for (o, w) in out.iter_mut().zip(rrow) {
                        *o += v * w;
                    }
                }
            }
            out
        })
        .collect())
}

fn projection_matrix(d: usize, l: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (1.0 / l as f64).sqrt()).expect("positive std");
    (0..d * l).map(|_| normal.sample(&mut rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 50,
            max_depth: 8,
            min_samples_split: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Node::Leaf(p) => *p,
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    trees: Vec<Node>,
    /// Mean normalized Gini importance per feature; sums to 1 unless no
    /// tree found a split.
    pub importances: Vec<f64>,
}

impl Forest {
    /// Fraction of trees' leaf probabilities, averaged.
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len().max(1) as f64
    }
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    cfg: ForestConfig,
    n_features_try: usize,
    n_total: usize,
    importance: Vec<f64>,
}

impl TreeBuilder<'_> {
    fn build(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> Node {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        let leaf = Node::Leaf(pos as f64 / n.max(1) as f64);
        if depth >= self.cfg.max_depth || n < self.cfg.min_samples_split || pos == 0 || pos == n {
            return leaf;
        }
        let parent = gini(pos, n);
        let d = self.x[0].len();
        let mut features: Vec<usize> = (0..d).collect();
        features.shuffle(rng);

        let mut best: Option<(f64, usize, f64)> = None;
        let mut values: Vec<(f64, bool)> = Vec::with_capacity(n);
        // Keep drawing past the quota until some feature admits a split.
        for (tried, &f) in features.iter().enumerate() {
            if tried >= self.n_features_try && best.is_some() {
                break;
            }
            values.clear();
            values.extend(idx.iter().map(|&i| (self.x[i][f], self.y[i])));
            values.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
            let mut left_pos = 0usize;
            for k in 1..n {
                left_pos += usize::from(values[k - 1].1);
                if values[k].0 <= values[k - 1].0 {
                    continue;
                }
                let right_pos = pos - left_pos;
                let child = (k as f64 * gini(left_pos, k) + (n - k) as f64 * gini(right_pos, n - k)) / n as f64;
                let gain = parent - child;
                if gain > 1e-15 && best.is_none_or(|b| gain > b.0) {
                    let threshold = values[k - 1].0 + (values[k].0 - values[k - 1].0) / 2.0;
                    best = Some((gain, f, threshold));
                }
            }
        }
        let Some((gain, feature, threshold)) = best else {
            return leaf;
        };
        self.importance[feature] += n as f64 / self.n_total as f64 * gain;
        let mut split = 0;
        for i in 0..n {
            if self.x[idx[i]][feature] <= threshold {
                idx.swap(i, split);
                split += 1;
            }
        }
        let (l, r) = idx.split_at_mut(split);
        let left = self.build(l, depth + 1, rng);
        let right = self.build(r, depth + 1, rng);
        Node::Split {
            feature,
            threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

/// Bagged CART trees with Gini splits and `sqrt(d)` features per split.
pub fn train_forest(x: &[Vec<f64>], y: &[bool], cfg: ForestConfig, seed: u64) -> Result<Forest> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape(format!("{} rows for {} labels", x.len(), y.len())));
    }
    if y.iter().all(|&b| b) || y.iter().all(|&b| !b) {
        return Err(Error::Invalid("forest needs both classes".into()));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("forest rows must share a nonzero width".into()));
    }
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut importances = vec![0.0; d];
    let mut trees = Vec::with_capacity(cfg.trees);
    let mut counted = 0usize;
    for _ in 0..cfg.trees {
        let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let mut builder = TreeBuilder {
            x,
            y,
            cfg,
            n_features_try: ((d as f64).sqrt().floor() as usize).max(1),
            n_total: n,
            importance: vec![0.0; d],
        };
        let tree = builder.build(&mut idx, 0, &mut rng);
        let total: f64 = builder.importance.iter().sum();
        if total > 0.0 {
            counted += 1;
            for (a, b) in importances.iter_mut().zip(&builder.importance) {
                *a += b / total;
            }
        }
        trees.push(tree);
    }
    let total: f64 = importances.iter().sum();
    if counted > 0 && total > 0.0 {
        importances.iter_mut().for_each(|v| *v /= total);
    }
    Ok(Forest { trees, importances })
}

/// Query and retrieved bundles with the query's integrity label.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceSample {
    pub query: FeatureBundle,
    pub retrieved: FeatureBundle,
    pub manipulated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub l: usize,
    pub trials: usize,
    /// Mean importance per modality (image, text, gps) on the query side.
    pub query: [f64; 3],
    pub retrieved: [f64; 3],
    /// Per trial: importance of each modality summed over both sides.
    pub per_trial: Vec<[f64; 3]>,
}

impl ImportanceReport {
    /// Both sides combined, per modality.
    pub fn combined(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.query[i] + self.retrieved[i])
    }

    /// Trials in which modality `m` had the largest combined importance.
    pub fn wins(&self, m: Modality) -> usize {
        let i = m.index();
        self.per_trial
            .iter()
            .filter(|t| (0..3).all(|j| j == i || t[i] > t[j]))
            .count()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "L\t{}", self.l);
        let _ = writeln!(s, "trials\t{}", self.trials);
        for m in Modality::ALL {
            let _ = writeln!(s, "query_{m}\t{}", self.query[m.index()]);
        }
        for m in Modality::ALL {
            let _ = writeln!(s, "retrieved_{m}\t{}", self.retrieved[m.index()]);
        }
        for m in Modality::ALL {
            let _ = writeln!(s, "combined_{m}\t{}", self.combined()[m.index()]);
        }
        s
    }
}

/// Projects every modality of both packages to `L` dims, trains a forest on
/// manipulated-vs-clean and sums importances per modality block. Trial `t`
/// uses seed `seed + t`.
pub fn modality_importance(
    samples: &[ImportanceSample],
    l: usize,
    trials: usize,
    cfg: ForestConfig,
    seed: u64,
) -> Result<ImportanceReport> {
    if trials == 0 {
        return Err(Error::Invalid("trials must be >= 1".into()));
    }
    let labels: Vec<bool> = samples.iter().map(|s| s.manipulated).collect();
    let mut query = [0.0; 3];
    let mut retrieved = [0.0; 3];
    let mut per_trial = Vec::with_capacity(trials);
    for t in 0..trials {
        let trial_seed = seed.wrapping_add(t as u64);
        let mut blocks: Vec<Vec<Vec<f64>>> = Vec::with_capacity(6);
        for (side, pick) in [0u64, 1].into_iter().zip([true, false]) {
            for m in Modality::ALL {
                let raw: Vec<Vec<f64>> = samples
                    .iter()
                    .map(|s| if pick { &s.query } else { &s.retrieved }.modality(m).to_vec())
                    .collect();
                let block_seed = trial_seed.wrapping_mul(31).wrapping_add(side * 3 + m.index() as u64);
                blocks.push(random_projection(&raw, l, block_seed)?);
            }
        }
        let x: Vec<Vec<f64>> = (0..samples.len())
            .map(|i| blocks.iter().flat_map(|b| b[i].iter().copied()).collect())
            .collect();
        let forest = train_forest(&x, &labels, cfg, trial_seed)?;
        let mut trial = [0.0; 3];
        for (b, chunk) in forest.importances.chunks(l).enumerate() {
            let v: f64 = chunk.iter().sum();
            let m = b % 3;
            if b < 3 {
                query[m] += v;
            } else {
                retrieved[m] += v;
            }
            trial[m] += v;
        }
        per_trial.push(trial);
    }
    let n = trials as f64;
    query.iter_mut().chain(retrieved.iter_mut()).for_each(|v| *v /= n);
    Ok(ImportanceReport {
        l,
        trials,
        query,
        retrieved,
        per_trial,
    })
}

/// Pairs of random bundles where only modality `planted` of the query
/// carries the label: manipulated queries are shifted along a fixed
/// direction by `strength` noise standard deviations.
pub fn planted_signal_samples(
    n: usize,
    planted: Modality,
    image_dim: usize,
    text_dim: usize,
    strength: f64,
    seed: u64,
) -> Vec<ImportanceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = |rng: &mut ChaCha8Rng, d: usize| -> Vec<f64> { (0..d).map(|_| rng.sample(StandardNormal)).collect() };
    let dim = match planted {
        Modality::Image => image_dim,
        Modality::Text => text_dim,
        Modality::Gps => 2,
    };
    let mut direction = noise(&mut rng, dim);
    let len = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    direction.iter_mut().for_each(|v| *v /= len);
    let bundle = |rng: &mut ChaCha8Rng| {
        let text_pooled = noise(rng, text_dim);
        FeatureBundle {
            image: noise(rng, image_dim),
            text_tokens: vec![text_pooled.clone()],
            text_pooled,
            gps: [rng.sample(StandardNormal), rng.sample(StandardNormal)],
            present: Default::default(),
        }
    };
    (0..n)
        .map(|i| {
            let manipulated = i % 2 == 1;
            let mut query = bundle(&mut rng);
            let retrieved = bundle(&mut rng);
            if manipulated {
                let shift: Vec<f64> = direction.iter().map(|d| d * strength).collect();
                match planted {
                    Modality::Image => query.image.iter_mut().zip(&shift).for_each(|(v, s)| *v += s),
                    Modality::Text => {
                        query.text_pooled.iter_mut().zip(&shift).for_each(|(v, s)| *v += s);
                        query.text_tokens = vec![query.text_pooled.clone()];
                    }
                    Modality::Gps => query.gps.iter_mut().zip(&shift).for_each(|(v, s)| *v += s),
                }
            }
            ImportanceSample {
                query,
                retrieved,
                manipulated,
            }
        })
        .collect()
}

/// `|A n B| / |A u B|`, and 1 when both are empty.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Mean pairwise Jaccard overlap of the per-modality top-`k` sets.
/// High values mean the modalities agree, which suggests a clean package.
pub fn srs_score(q: &FeatureBundle, index: &ReferenceIndex, k: usize) -> Result<f64> {
    let sets = Modality::ALL
        .iter()
        .map(|&m| {
            Ok(index
                .top_k_rows(q, &[m], k)?
                .into_iter()
                .map(|(i, _)| i)
                .collect::<BTreeSet<usize>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((jaccard(&sets[0], &sets[1]) + jaccard(&sets[0], &sets[2]) + jaccard(&sets[1], &sets[2])) / 3.0)
}

/// Mann-Whitney AUC with average ranks for ties; `true` labels are positives.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&b| b).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 || tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// F1 with tampered as the positive class, then with clean as positive.
/// A score at or above `threshold` predicts tampered.
pub fn f1_scores(labels: &[bool], scores: &[f64], threshold: f64) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&y, &s) in labels.iter().zip(scores) {
        match (y, s >= threshold) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (f1(tp, fp, fn_), f1(tn, fn_, fp))
}

/// Anything that assigns a tampering score in [0, 1] to a query.
pub trait IntegrityScorer {
    fn score(&self, q: &QuerySample, index: Option<&ReferenceIndex>) -> Result<f64>;
}

impl IntegrityScorer for Model {
    fn score(&self, q: &QuerySample, index: Option<&ReferenceIndex>) -> Result<f64> {
        Ok(self.predict(&q.bundle, index)?.integrity_prob)
    }
}

/// The retrieval-overlap baseline; tampering score is `1 - srs`.
#[derive(Debug, Clone, Copy)]
pub struct SrsScorer {
    pub k: usize,
}

impl Default for SrsScorer {
    fn default() -> Self {
        SrsScorer { k: 10 }
    }
}

impl IntegrityScorer for SrsScorer {
    fn score(&self, q: &QuerySample, index: Option<&ReferenceIndex>) -> Result<f64> {
        let index = index.ok_or(Error::EmptyIndex)?;
        Ok(1.0 - srs_score(&q.bundle, index, self.k)?)
    }
}

/// Scores straight from the ground truth (1 for tampered).
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScorer;

impl IntegrityScorer for OracleScorer {
    fn score(&self, q: &QuerySample, _: Option<&ReferenceIndex>) -> Result<f64> {
        Ok(f64::from(u8::from(q.is_manipulated())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub f1_tampered: f64,
    pub f1_clean: f64,
    pub retrieval: RetrievalAccuracy,
    pub n_test: usize,
    pub n_manipulated: usize,
    pub n_clean: usize,
    pub missing: Option<Modality>,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "auc\t{}", self.auc);
        let _ = writeln!(s, "f1_tampered\t{}", self.f1_tampered);
        let _ = writeln!(s, "f1_clean\t{}", self.f1_clean);
        let _ = writeln!(s, "retrieval_top1_manipulated\t{}", self.retrieval.manipulated);
        let _ = writeln!(s, "retrieval_top1_unmanipulated\t{}", self.retrieval.unmanipulated);
        let _ = writeln!(s, "retrieval_top1_overall\t{}", self.retrieval.overall);
        let _ = writeln!(s, "n_test\t{}", self.n_test);
        let _ = writeln!(s, "n_manipulated\t{}", self.n_manipulated);
        let _ = writeln!(s, "n_clean\t{}", self.n_clean);
        let missing = self.missing.map_or_else(|| "none".to_string(), |m| m.to_string());
        let _ = writeln!(s, "missing\t{missing}");
        s
    }
}

/// Scores the test split. With `missing` set, that modality is zeroed in
/// every reference package, so both retrieval and the retrieved input to
/// the scorer lack it.
pub fn evaluate_run(
    scorer: &dyn IntegrityScorer,
    test: &[QuerySample],
    index: Option<&ReferenceIndex>,
    missing: Option<Modality>,
) -> Result<EvalReport> {
    let stripped = match (index, missing) {
        (Some(ix), Some(m)) => Some(ix.without_modality(m)),
        _ => None,
    };
    let index = stripped.as_ref().or(index);
    let labels: Vec<bool> = test.iter().map(QuerySample::is_manipulated).collect();
    let scores = test.iter().map(|q| scorer.score(q, index)).collect::<Result<Vec<_>>>()?;
    let auc = roc_auc(&scores, &labels)?;
    let (f1_tampered, f1_clean) = f1_scores(&labels, &scores, 0.5);
    let retrieval = match index {
        Some(ix) if !ix.is_empty() => {
            let queries: Vec<LabeledQuery<'_>> = test
                .iter()
                .map(|q| LabeledQuery {
                    bundle: &q.bundle,
                    cluster_id: q.cluster_id,
                    manipulated: q.is_manipulated(),
                })
                .collect();
            top1_accuracy(&queries, ix, &Modality::ALL)?
        }
        _ => RetrievalAccuracy::default(),
    };
    let n_manipulated = labels.iter().filter(|&&b| b).count();
    Ok(EvalReport {
        auc,
        f1_tampered,
        f1_clean,
        retrieval,
        n_test: test.len(),
        n_manipulated,
        n_clean: test.len() - n_manipulated,
        missing,
    })
}
