//! Glue between stages: data directories, featurization of splits and the
//! train / evaluate / analyse entry points used by the command-line tool.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::analysis::{evaluate_run, modality_importance, EvalReport, ImportanceReport, ImportanceSample, SrsScorer};
use crate::config::RunConfig;
use crate::embed::{featurize, HashEmbedder, PrecomputedFeatures};
use crate::error::{Error, Result};
use crate::io::{read_packages, read_to_string, write_atomic, write_packages};
use crate::model::{read_checkpoint, train, Checkpoint, Model, QuerySample, TrainingLog};
use crate::retrieval::{top1_accuracy, LabeledQuery, ReferenceEntry, ReferenceIndex, RetrievalAccuracy};
use crate::synth::{synthesize, SynthOutput};
use crate::types::{DatasetManifest, FeatureBundle, Modality, Package, Split};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GAZETTEER_FILE: &str = "gazetteer.tsv";
pub const IMAGE_FEATURES_FILE: &str = "image_features.txt";
pub const PLANS_FILE: &str = "plans.tsv";
pub const CONFIG_FILE: &str = "run.cfg";

pub fn split_file(split: Split) -> String {
    format!("{split}.jsonl")
}

pub const DATA_SPLITS: [Split; 4] = [Split::Reference, Split::Train, Split::Val, Split::Test];

/// Packages of a data directory plus everything needed to featurize them.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub splits: BTreeMap<Split, Vec<Package>>,
    pub images: PrecomputedFeatures,
    pub config: RunConfig,
    pub manifest: DatasetManifest,
}

impl DataSet {
    pub fn from_synth(out: &SynthOutput, config: &RunConfig) -> Self {
        let mut splits: BTreeMap<Split, Vec<Package>> = DATA_SPLITS.iter().map(|s| (*s, Vec::new())).collect();
        for p in &out.dataset.packages {
            splits.entry(p.split).or_default().push(p.clone());
        }
        let mut manifest = out.dataset.manifest.clone();
        manifest.config = config.to_pairs();
        DataSet {
            splits,
            images: out.images.clone(),
            config: config.clone(),
            manifest,
        }
    }

    pub fn split(&self, split: Split) -> &[Package] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }

    pub fn featurize(&self) -> Result<Featurized> {
        let text = HashEmbedder::from_config(&self.config.embed)?;
        let bundle = |p: &Package| -> Result<FeatureBundle> {
            let b = featurize(p, &text, &self.images)?;
            b.check(self.config.model.image_dim, self.config.model.text_dim)?;
            Ok(b)
        };
        let entries = self
            .split(Split::Reference)
            .iter()
            .map(|p| {
                Ok(ReferenceEntry {
                    id: p.id.clone(),
                    bundle: bundle(p)?,
                    cluster_id: p.cluster_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let index = ReferenceIndex::build_with(entries, self.config.analysis.gps_similarity)?;
        let queries = |split: Split| -> Result<Vec<QuerySample>> {
            self.split(split)
                .iter()
                .map(|p| {
                    Ok(QuerySample {
                        id: p.id.clone(),
                        bundle: bundle(p)?,
                        cluster_id: p.cluster_id,
                        label: p.integrity_label,
                    })
                })
                .collect()
        };
        Ok(Featurized {
            index,
            train: queries(Split::Train)?,
            val: queries(Split::Val)?,
            test: queries(Split::Test)?,
        })
    }
}

/// Feature bundles of every split, with the reference split indexed.
#[derive(Debug, Clone)]
pub struct Featurized {
    pub index: ReferenceIndex,
    pub train: Vec<QuerySample>,
    pub val: Vec<QuerySample>,
    pub test: Vec<QuerySample>,
}

impl Featurized {
    /// Every query split, in train / val / test order.
    pub fn all_queries(&self) -> impl Iterator<Item = &QuerySample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Generates a synthetic dataset in memory from a seeded run config.
pub fn synth_dataset(cfg: &RunConfig) -> Result<(SynthOutput, DataSet)> {
    cfg.validate()?;
    let text = HashEmbedder::from_config(&cfg.embed)?;
    let out = synthesize(&cfg.synth, &text, None)?;
    let data = DataSet::from_synth(&out, cfg);
    Ok((out, data))
}

/// Writes a synthesized dataset: one jsonl per split, the gazetteer, image
/// features, swap plans, the run config and the manifest.
pub fn write_data_dir(dir: &Path, out: &SynthOutput, data: &DataSet) -> Result<()> {
    for split in DATA_SPLITS {
        write_packages(&dir.join(split_file(split)), data.split(split))?;
    }
    write_atomic(&dir.join(GAZETTEER_FILE), out.gazetteer.to_tsv().as_bytes())?;
    write_atomic(&dir.join(IMAGE_FEATURES_FILE), data.images.to_text().as_bytes())?;
    write_atomic(&dir.join(PLANS_FILE), out.dataset.plans_tsv().as_bytes())?;
    write_atomic(&dir.join(CONFIG_FILE), data.config.to_text().as_bytes())?;
    let mut manifest = serde_json::to_string_pretty(&data.manifest)?;
    manifest.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest =
        serde_json::from_str(&read_to_string(&path)?).map_err(|e| Error::format(&path, e.line(), e.to_string()))?;
    manifest.check()?;
    Ok(manifest)
}

pub fn load_data_dir(dir: &Path) -> Result<DataSet> {
    let manifest = load_manifest(dir)?;
    let config = RunConfig::from_pairs(&manifest.config)?;
    let mut splits = BTreeMap::new();
    for split in DATA_SPLITS {
        let packages = read_packages(&dir.join(split_file(split)))?;
        if let Some(p) = packages.iter().find(|p| p.split != split) {
            return Err(Error::Validation(format!(
                "package {} in {} is labelled {}",
                p.id,
                split_file(split),
                p.split
            )));
        }
        splits.insert(split, packages);
    }
    let images = PrecomputedFeatures::load(&dir.join(IMAGE_FEATURES_FILE))?;
    let total: usize = splits.values().map(Vec::len).sum();
    if total != manifest.total {
        return Err(Error::Validation(format!(
            "manifest lists {} packages, data files hold {total}",
            manifest.total
        )));
    }
    Ok(DataSet {
        splits,
        images,
        config,
        manifest,
    })
}

/// Trains on the train split with early stopping on val.
pub fn train_model(data: &Featurized, cfg: &crate::model::ModelConfig) -> Result<(Model, TrainingLog)> {
    let index = cfg.related_branch.then_some(&data.index);
    train(&data.train, &data.val, index, cfg)
}

pub fn checkpoint_for(model: Model, data: &DataSet) -> Checkpoint {
    let mut ckpt = Checkpoint::new(model);
    for (k, v) in data.config.to_pairs() {
        if !k.starts_with("model.") {
            ckpt.meta.insert(k, v);
        }
    }
    ckpt
}

pub fn eval_model(model: &Model, data: &Featurized, missing: Option<Modality>) -> Result<EvalReport> {
    let index = model.config.related_branch.then_some(&data.index);
    let mut report = evaluate_run(model, &data.test, index, missing)?;
    if index.is_none() {
        // Retrieval accuracy does not depend on the scorer.
        report.retrieval = retrieval_accuracy(data, &Modality::ALL, missing)?;
    }
    Ok(report)
}

pub fn eval_checkpoint(ckpt_path: &Path, data: &Featurized, missing: Option<Modality>) -> Result<EvalReport> {
    let ckpt = read_checkpoint(ckpt_path)?;
    eval_model(&ckpt.model, data, missing)
}

pub fn eval_srs(data: &Featurized, k: usize, missing: Option<Modality>) -> Result<EvalReport> {
    evaluate_run(&SrsScorer { k }, &data.test, Some(&data.index), missing)
}

/// Top-1 cluster accuracy of the test queries under a modality subset.
pub fn retrieval_accuracy(data: &Featurized, modalities: &[Modality], missing: Option<Modality>) -> Result<RetrievalAccuracy> {
    let stripped = missing.map(|m| data.index.without_modality(m));
    let index = stripped.as_ref().unwrap_or(&data.index);
    let queries: Vec<LabeledQuery<'_>> = data
        .test
        .iter()
        .map(|q| LabeledQuery {
            bundle: &q.bundle,
            cluster_id: q.cluster_id,
            manipulated: q.is_manipulated(),
        })
        .collect();
    top1_accuracy(&queries, index, modalities)
}

/// Retrieval accuracy for all modalities and for each one alone.
pub fn retrieval_table(data: &Featurized) -> Result<Vec<(String, RetrievalAccuracy)>> {
    let mut rows = vec![("all".to_string(), retrieval_accuracy(data, &Modality::ALL, None)?)];
    for m in Modality::ALL {
        rows.push((m.to_string(), retrieval_accuracy(data, &[m], None)?));
    }
    Ok(rows)
}

pub fn retrieval_table_tsv(rows: &[(String, RetrievalAccuracy)]) -> String {
    let mut s = String::from("modalities\tmanipulated\tunmanipulated\toverall\n");
    for (name, acc) in rows {
        let _ = writeln!(s, "{name}\t{}\t{}\t{}", acc.manipulated, acc.unmanipulated, acc.overall);
    }
    s
}

/// Query bundles of every query split paired with their top-1 retrieval.
pub fn importance_samples(data: &Featurized) -> Result<Vec<ImportanceSample>> {
    data.all_queries()
        .map(|q| {
            let top = data.index.top1(&q.bundle, &Modality::ALL)?;
            Ok(ImportanceSample {
                query: q.bundle.clone(),
                retrieved: data.index.entry(top).bundle.clone(),
                manipulated: q.is_manipulated(),
            })
        })
        .collect()
}

pub fn run_importance(data: &Featurized, cfg: &RunConfig, l: usize, trials: usize, seed: u64) -> Result<ImportanceReport> {
    modality_importance(&importance_samples(data)?, l, trials, cfg.analysis.forest, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.synth.clusters = 24;
        cfg.model.epochs = 3;
        cfg.seeded()
    }

    #[test]
    fn data_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (out, data) = synth_dataset(&small()).unwrap();
        write_data_dir(dir.path(), &out, &data).unwrap();
        let back = load_data_dir(dir.path()).unwrap();
        assert_eq!(back.splits, data.splits);
        assert_eq!(back.config, data.config);
        assert_eq!(back.manifest, data.manifest);
        assert_eq!(back.images, data.images);
        let f = back.featurize().unwrap();
        assert_eq!(f.index.len(), data.split(Split::Reference).len());
        assert_eq!(f.test.len(), data.manifest.split_count(Split::Test));
    }

    #[test]
    fn train_and_eval_in_memory() {
        let cfg = small();
        let (_, data) = synth_dataset(&cfg).unwrap();
        let f = data.featurize().unwrap();
        let (model, log) = train_model(&f, &cfg.model).unwrap();
        assert_eq!(log.epochs.len(), 3);
        let report = eval_model(&model, &f, None).unwrap();
        assert_eq!(report.n_test, f.test.len());
        assert!((0.0..=1.0).contains(&report.auc));
        let srs = eval_srs(&f, 10, Some(Modality::Image)).unwrap();
        assert_eq!(srs.missing, Some(Modality::Image));
        assert_eq!(importance_samples(&f).unwrap().len(), f.all_queries().count());
    }

    #[test]
    fn split_file_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (out, data) = synth_dataset(&small()).unwrap();
        write_data_dir(dir.path(), &out, &data).unwrap();
        let mut train = data.split(Split::Train).to_vec();
        train[0].split = Split::Test;
        write_packages(&dir.path().join(split_file(Split::Train)), &train).unwrap();
        assert!(matches!(load_data_dir(dir.path()), Err(Error::Validation(_))));
    }
}
