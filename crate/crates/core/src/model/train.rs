use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::roc_auc;
use crate::error::{Error, Result};
use crate::nn::{AdamState, ParamSet};
use crate::retrieval::ReferenceIndex;
use crate::types::{FeatureBundle, IntegrityLabel, Modality};

use super::forward::{multitask_loss_parts, ModelOutput, PairLabels, PairRef};
use super::{Model, ModelConfig};

/// A featurized query package with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySample {
    pub id: String,
    pub bundle: FeatureBundle,
    pub cluster_id: Option<u32>,
    pub label: IntegrityLabel,
}

impl QuerySample {
    pub fn is_manipulated(&self) -> bool {
        self.label == IntegrityLabel::Manipulated
    }
}

/// Indices into the query list and the reference index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingPair {
    pub query: usize,
    /// `None` under single-package assessment.
    pub retrieved: Option<usize>,
    pub labels: PairLabels,
    /// True for pairs added with a random unrelated reference package.
    pub injected: bool,
}

/// Multitask loss for one set of head outputs.
pub fn multitask_loss(out: &ModelOutput, labels: &PairLabels, lambda_rel: f64, lambda_man: f64) -> Result<f64> {
    let related = match (out.relationship_prob, &out.manipulation_probs) {
        (Some(r), Some(m)) => Some((r, &m[..])),
        _ => None,
    };
    multitask_loss_parts(out.integrity_prob, related, labels, lambda_rel, lambda_man)
}

fn related_labels(q: &QuerySample, related: bool) -> PairLabels {
    PairLabels {
        integrity: q.label,
        relationship: related,
        manipulation: if related { q.label } else { IntegrityLabel::Unknown },
    }
}

/// Pairs each query with its top-1 retrieval over all modalities and
/// appends `round(unrelated_rate * n)` pairs with a random reference
/// package from another cluster.
pub fn build_training_pairs(
    queries: &[QuerySample],
    index: Option<&ReferenceIndex>,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    if !cfg.related_branch {
        return Ok(queries
            .iter()
            .enumerate()
            .map(|(i, q)| TrainingPair {
                query: i,
                retrieved: None,
                labels: related_labels(q, false),
                injected: false,
            })
            .collect());
    }
    let index = index.filter(|ix| !ix.is_empty()).ok_or(Error::EmptyIndex)?;
    let mut pairs = Vec::with_capacity(queries.len());
    for (i, q) in queries.iter().enumerate() {
        let top = index.top1(&q.bundle, &Modality::ALL)?;
        let related = q.cluster_id.is_some() && index.entry(top).cluster_id == q.cluster_id;
        pairs.push(TrainingPair {
            query: i,
            retrieved: Some(top),
            labels: related_labels(q, related),
            injected: false,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_inject = (cfg.unrelated_rate * queries.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(n_inject) {
        let q = &queries[i];
        // Rejection sampling; give up on degenerate single-cluster indexes.
        for _ in 0..64 {
            let r = rng.random_range(0..index.len());
            let other = index.entry(r).cluster_id;
            if q.cluster_id.is_none() || other != q.cluster_id {
                pairs.push(TrainingPair {
                    query: i,
                    retrieved: Some(r),
                    labels: related_labels(q, false),
                    injected: true,
                });
                break;
            }
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
    pub pairs: usize,
    /// Retrieved packages with a modality dropped this epoch.
    pub zeroed: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
}

impl TrainingLog {
    pub fn zeroing_rate(&self) -> f64 {
        let pairs: usize = self.epochs.iter().map(|e| e.pairs).sum();
        let zeroed: usize = self.epochs.iter().map(|e| e.zeroed).sum();
        if pairs == 0 {
            0.0
        } else {
            zeroed as f64 / pairs as f64
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_auc\tpairs\tzeroed\n");
        for e in &self.epochs {
            let auc = e.val_auc.map_or_else(|| "nan".to_string(), |a| a.to_string());
            s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.epoch, e.train_loss, auc, e.pairs, e.zeroed));
        }
        s
    }
}

impl Model {
    /// Retrieves the top-1 package (unless SPA) and runs every head.
    pub fn predict(&self, q: &FeatureBundle, index: Option<&ReferenceIndex>) -> Result<ModelOutput> {
        if !self.config.related_branch {
            return self.forward(q, None);
        }
        let index = index.filter(|ix| !ix.is_empty()).ok_or(Error::EmptyIndex)?;
        let top = index.top1(q, &Modality::ALL)?;
        let entry = index.entry(top);
        let mut out = self.forward(q, Some(&entry.bundle))?;
        out.retrieved_id = Some(entry.id.clone());
        Ok(out)
    }

    /// Integrity probabilities for pre-built pairs.
    pub(crate) fn pair_scores(&self, queries: &[QuerySample], pairs: &[TrainingPair], index: Option<&ReferenceIndex>) -> Result<Vec<f64>> {
        pairs
            .iter()
            .map(|p| {
                let r = match (p.retrieved, index) {
                    (Some(i), Some(ix)) => Some(&ix.entry(i).bundle),
                    _ => None,
                };
                Ok(self.forward(&queries[p.query].bundle, r)?.integrity_prob)
            })
            .collect()
    }
}

fn drop_modality(bundle: &FeatureBundle, rng: &mut ChaCha8Rng, rate: f64) -> Option<FeatureBundle> {
    if rate > 0.0 && rng.random_bool(rate) {
        let m = Modality::ALL[rng.random_range(0..Modality::ALL.len())];
        Some(bundle.without(m))
    } else {
        None
    }
}

/// Shuffled minibatch Adam on the multitask loss with early stopping on
/// validation AUC. Returns the parameters of the best validation epoch.
pub fn train(
    train_set: &[QuerySample],
    val_set: &[QuerySample],
    index: Option<&ReferenceIndex>,
    cfg: &ModelConfig,
) -> Result<(Model, TrainingLog)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("empty training split".into()));
    }
    let mut model = Model::new(cfg.clone())?;
    let pairs = build_training_pairs(train_set, index, cfg, cfg.seed.wrapping_add(1))?;
    let val_pairs: Vec<TrainingPair> = build_training_pairs(val_set, index, &ModelConfig { unrelated_rate: 0.0, ..cfg.clone() }, 0)?;
    let val_labels: Vec<bool> = val_pairs.iter().map(|p| val_set[p.query].is_manipulated()).collect();
    let val_usable = val_labels.iter().any(|&b| b) && val_labels.iter().any(|&b| !b);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut adam = AdamState::new(&model.params, cfg.adam());
    let mut log = TrainingLog::default();
    let mut best = (f64::NEG_INFINITY, model.params.clone());
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut zeroed = 0usize;
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let dropped: Vec<Option<FeatureBundle>> = chunk
                .iter()
                .map(|&i| match (pairs[i].retrieved, index) {
                    (Some(r), Some(ix)) => drop_modality(&ix.entry(r).bundle, &mut rng, cfg.missing_rate),
                    _ => None,
                })
                .collect();
            zeroed += dropped.iter().filter(|d| d.is_some()).count();
            let batch: Vec<PairRef<'_>> = chunk
                .iter()
                .zip(&dropped)
                .map(|(&i, d)| {
                    let p = &pairs[i];
                    let retrieved = match (d, p.retrieved, index) {
                        (Some(b), _, _) => Some(b),
                        (None, Some(r), Some(ix)) => Some(&ix.entry(r).bundle),
                        _ => None,
                    };
                    PairRef {
                        query: &train_set[p.query].bundle,
                        retrieved,
                        labels: p.labels,
                    }
                })
                .collect();
            let mut grads = model.params.zeros_like();
            let loss = model.loss_and_grad(&batch, &mut grads)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged(format!("non-finite loss {loss} at epoch {epoch}")));
            }
            total += loss * batch.len() as f64;
            adam.step(&mut model.params, &grads);
        }
        if !model.params.all_finite() {
            return Err(Error::Diverged(format!("non-finite parameters after epoch {epoch}")));
        }
        let train_loss = total / pairs.len() as f64;

        let val_auc = if val_usable {
            let scores = model.pair_scores(val_set, &val_pairs, index)?;
            Some(roc_auc(&scores, &val_labels)?)
        } else {
            None
        };
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_auc,
            pairs: pairs.len(),
            zeroed,
        });
        // Without a usable validation split, lower training loss wins.
        let metric = val_auc.unwrap_or(-train_loss);
        if metric > best.0 {
            best = (metric, model.params.clone());
            log.best_epoch = epoch;
            log.best_val_auc = val_auc;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    model.params = best.1;
    Ok((model, log))
}
