use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use meir_core::config::RunConfig;
use meir_core::embed::{featurize, HashEmbedder, PrecomputedFeatures};
use meir_core::io::{read_packages, write_atomic, DirLock};
use meir_core::model::{read_checkpoint, write_checkpoint};
use meir_core::pipeline::{
    checkpoint_for, eval_model, eval_srs, load_data_dir, load_manifest, run_importance, split_file, synth_dataset,
    train_model, write_data_dir, IMAGE_FEATURES_FILE,
};
use meir_core::retrieval::{ReferenceEntry, ReferenceIndex};
use meir_core::{Error, FeatureBundle, Modality, Package, Result, Split};

#[derive(Parser)]
#[command(name = "meir", version, about = "Image-repurposing detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Run config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; stage seeds are derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus into a data directory.
    Synth {
        #[command(flatten)]
        run: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a data directory and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        run: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score query packages with a checkpoint.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        query: PathBuf,
        /// Reference packages; required unless the model is single-package.
        #[arg(long)]
        index: Option<PathBuf>,
        /// Image features; defaults to the file next to the index or query.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of a data directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_modality)]
        missing: Option<Modality>,
    },
    /// Rank reference packages for each query package.
    Retrieve {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value = "image,text,gps", value_parser = parse_modalities)]
        modalities: Modalities,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        images: Option<PathBuf>,
        /// Config supplying the text embedder; defaults to the index's manifest.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Random-forest modality importance over query/retrieved pairs.
    Importance {
        #[arg(long)]
        data: PathBuf,
        /// Projection size; a comma list sweeps several.
        #[arg(long = "L", visible_alias = "l", value_delimiter = ',')]
        l: Vec<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Non-learned baselines.
    Baseline {
        #[command(subcommand)]
        which: Baseline,
    },
}

#[derive(Subcommand)]
enum Baseline {
    /// Semantic retrieval score: entity overlap with the top-k retrieved.
    Srs {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_parser = parse_modality)]
        missing: Option<Modality>,
    },
}

#[derive(Clone)]
struct Modalities(Vec<Modality>);

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_modalities(s: &str) -> std::result::Result<Modalities, String> {
    Modality::parse_list(s).map(Modalities).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("meir: error: {e}");
            ExitCode::from(1)
        }
    }
}

fn apply_overrides(mut cfg: RunConfig, run: &Overrides) -> Result<RunConfig> {
    if let Some(path) = &run.config {
        cfg = RunConfig::load(path)?;
    }
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    for kv in &run.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg.seeded())
}

fn print(s: &str) {
    print!("{s}");
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { run, out } => {
            let cfg = apply_overrides(RunConfig::default(), &run)?;
            let _lock = DirLock::acquire(&out)?;
            let (synth, data) = synth_dataset(&cfg)?;
            write_data_dir(&out, &synth, &data)?;
            for split in meir_core::pipeline::DATA_SPLITS {
                println!("{split}\t{}", data.split(split).len());
            }
            Ok(())
        }
        Command::Train { data, run, out } => {
            let mut ds = load_data_dir(&data)?;
            let cfg = apply_overrides(ds.config.clone(), &run)?;
            if cfg.embed != ds.config.embed {
                return Err(Error::Config(format!(
                    "embedding settings differ from those {} was built with",
                    data.display()
                )));
            }
            if cfg.model.related_branch && ds.split(Split::Reference).is_empty() {
                return Err(Error::Invalid(format!(
                    "empty reference index: {} holds no packages",
                    data.join(split_file(Split::Reference)).display()
                )));
            }
            ds.config = cfg.clone();
            let _lock = DirLock::acquire(parent_dir(&out))?;
            let f = ds.featurize()?;
            let (model, log) = train_model(&f, &cfg.model)?;
            write_checkpoint(&out, &checkpoint_for(model, &ds))?;
            write_atomic(&sibling(&out, "log.tsv"), log.to_tsv().as_bytes())?;
            write_atomic(&sibling(&out, "cfg"), cfg.to_text().as_bytes())?;
            println!("best_epoch\t{}", log.best_epoch);
            let auc = log.best_val_auc.map_or_else(|| "nan".into(), |a| a.to_string());
            println!("best_val_auc\t{auc}");
            Ok(())
        }
        Command::Predict {
            ckpt,
            query,
            index,
            images,
        } => {
            let ckpt = read_checkpoint(&ckpt)?;
            let mut cfg = RunConfig::from_pairs(&ckpt.meta)?;
            cfg.model = ckpt.model.config.clone();
            let images = images.unwrap_or_else(|| default_images(index.as_deref().unwrap_or(&query)));
            let feats = Featurizer::new(&cfg, &images)?;
            let ix = match &index {
                Some(path) => Some(feats.index(path, &cfg)?),
                None if cfg.model.related_branch => {
                    return Err(Error::Invalid("--index is required for a model with the related branch".into()))
                }
                None => None,
            };
            let mut s = String::new();
            for (p, b) in feats.queries(&query)? {
                let out = ckpt.model.predict(&b, ix.as_ref())?;
                let rel = out.relationship_prob.map_or_else(|| "-".into(), |v| v.to_string());
                let man = out
                    .manipulation_probs
                    .map_or_else(|| "-".into(), |m| m.map(|v| v.to_string()).join(","));
                let rid = out.retrieved_id.unwrap_or_else(|| "-".into());
                s.push_str(&format!("{}\t{}\t{rel}\t{man}\t{rid}\n", p.id, out.integrity_prob));
            }
            print(&s);
            Ok(())
        }
        Command::Eval { ckpt, data, missing } => {
            let ckpt = read_checkpoint(&ckpt)?;
            let ds = load_data_dir(&data)?;
            let f = ds.featurize()?;
            print(&eval_model(&ckpt.model, &f, missing)?.to_tsv());
            Ok(())
        }
        Command::Retrieve {
            query,
            index,
            modalities,
            k,
            images,
            config,
        } => {
            let cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => match load_manifest(parent_dir(&index)) {
                    Ok(m) => RunConfig::from_pairs(&m.config)?,
                    Err(_) => RunConfig::default(),
                },
            };
            let images = images.unwrap_or_else(|| default_images(&index));
            let feats = Featurizer::new(&cfg, &images)?;
            let ix = feats.index(&index, &cfg)?;
            let mut s = String::new();
            for (p, b) in feats.queries(&query)? {
                let res = ix.retrieve_top_k(&b, &modalities.0, k)?;
                for (rank, hit) in res.hits.iter().enumerate() {
                    s.push_str(&format!("{}\t{}\t{}\t{}\n", p.id, rank + 1, hit.id, hit.score));
                }
            }
            print(&s);
            Ok(())
        }
        Command::Importance { data, l, trials, seed } => {
            let mut ds = load_data_dir(&data)?;
            if let Some(seed) = seed {
                ds.config.seed = seed;
            }
            let cfg = ds.config.clone();
            let f = ds.featurize()?;
            let ls = if l.is_empty() { vec![cfg.analysis.importance_l] } else { l };
            let trials = trials.unwrap_or(cfg.analysis.trials);
            for l in ls {
                print(&run_importance(&f, &cfg, l, trials, cfg.importance_seed())?.to_tsv());
            }
            Ok(())
        }
        Command::Baseline {
            which: Baseline::Srs { data, k, missing },
        } => {
            let ds = load_data_dir(&data)?;
            let k = k.unwrap_or(ds.config.analysis.srs_k);
            let f = ds.featurize()?;
            print(&eval_srs(&f, k, missing)?.to_tsv());
            Ok(())
        }
    }
}

/// `m.ckpt` -> `m.ckpt.<ext>`.
fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn parent_dir(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn default_images(packages: &Path) -> PathBuf {
    parent_dir(packages).join(IMAGE_FEATURES_FILE)
}

struct Featurizer {
    text: HashEmbedder,
    images: PrecomputedFeatures,
}

impl Featurizer {
    fn new(cfg: &RunConfig, images: &Path) -> Result<Self> {
        Ok(Featurizer {
            text: HashEmbedder::from_config(&cfg.embed)?,
            images: PrecomputedFeatures::load(images)?,
        })
    }

    fn queries(&self, path: &Path) -> Result<Vec<(Package, FeatureBundle)>> {
        read_packages(path)?
            .into_iter()
            .map(|p| {
                let b = featurize(&p, &self.text, &self.images)?;
                Ok((p, b))
            })
            .collect()
    }

    fn index(&self, path: &Path, cfg: &RunConfig) -> Result<ReferenceIndex> {
        let entries: Vec<ReferenceEntry> = self
            .queries(path)?
            .into_iter()
            .map(|(p, bundle)| ReferenceEntry {
                id: p.id,
                bundle,
                cluster_id: p.cluster_id,
            })
            .collect();
        if entries.is_empty() {
            return Err(Error::Invalid(format!("empty reference index: {} holds no packages", path.display())));
        }
        ReferenceIndex::build_with(entries, cfg.analysis.gps_similarity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sibling_appends_extension() {
        assert_eq!(sibling(Path::new("out/m.ckpt"), "log.tsv"), PathBuf::from("out/m.ckpt.log.tsv"));
        assert_eq!(default_images(Path::new("ref.jsonl")), PathBuf::from("./image_features.txt"));
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.cfg");
        std::fs::write(&path, "seed = 3\nsynth.clusters = 30\nmodel.epochs = 9\n").unwrap();
        let run = Overrides {
            config: Some(path),
            seed: Some(11),
            set: vec!["model.epochs=2".into()],
        };
        let cfg = apply_overrides(RunConfig::default(), &run).unwrap();
        assert_eq!((cfg.seed, cfg.synth.clusters, cfg.model.epochs), (11, 30, 2));
        assert_eq!(cfg.model.seed, 11 + meir_core::config::MODEL_SEED_OFFSET);
        let bad = Overrides {
            config: None,
            seed: None,
            set: vec!["model.epochs".into()],
        };
        assert!(apply_overrides(RunConfig::default(), &bad).is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
