//! Fully synthetic corpora: clustered packages with invented entities,
//! regional GPS centers and hash-derived image features.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embed::{featurize, hash_vector, PrecomputedFeatures, TextEmbedder};
use crate::error::{Error, Result};
use crate::types::{EntityKind, EntitySpan, FeatureBundle, Gps, LocationNames, Package};

use super::{build_dataset, BuildOptions, BuiltDataset, Gazetteer};

const STOPWORDS: [&str; 16] = [
    "the", "a", "in", "on", "this", "that", "was", "is", "from", "to", "during", "near", "old", "new", "our", "view",
];
const CONNECTORS: [&str; 7] = ["at", "with", "and", "by", "of", "for", "in"];
const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 6] = ["", "n", "r", "l", "s", "m"];

/// Grid pitch of cluster centers in degrees; centers sit mid-cell.
const CENTER_PITCH: f64 = 0.05;
/// Uniform per-package GPS jitter bound in degrees.
const GPS_JITTER: f64 = 0.0035;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub clusters: usize,
    pub per_cluster: usize,
    /// Shared visual scenes; clusters drawing the same scene look alike.
    pub scenes: usize,
    pub image_dim: usize,
    pub scene_weight: f64,
    pub topic_weight: f64,
    pub noise_weight: f64,
    /// Topic words per cluster.
    pub topic_words: usize,
    /// Latitude and longitude ranges of cluster centers.
    pub lat_range: (f64, f64),
    pub lon_range: (f64, f64),
    pub tau_img: f64,
    pub tau_txt: f64,
    pub non_location_jitter: f64,
    pub neighbor_merge: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            clusters: 600,
            per_cluster: 8,
            scenes: 8,
            image_dim: 96,
            scene_weight: 1.0,
            topic_weight: 0.8,
            noise_weight: 0.5,
            topic_words: 4,
            lat_range: (25.0, 50.0),
            lon_range: (-125.0, -70.0),
            tau_img: 0.5,
            tau_txt: 0.5,
            non_location_jitter: 0.0,
            neighbor_merge: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.clusters < 2 {
            return bad("synth.clusters must be >= 2");
        }
        if self.per_cluster == 0 {
            return bad("synth.per_cluster must be > 0");
        }
        if self.scenes == 0 || self.image_dim == 0 || self.topic_words == 0 {
            return bad("synth.scenes, synth.image_dim and synth.topic_words must be > 0");
        }
        for w in [self.scene_weight, self.topic_weight, self.noise_weight, self.non_location_jitter] {
            if !w.is_finite() || w < 0.0 {
                return bad("synth weights must be finite and >= 0");
            }
        }
        if self.non_location_jitter > 1e-5 {
            return bad("synth.non_location_jitter must be <= 1e-5");
        }
        let (a, b) = self.lat_range;
        let (c, d) = self.lon_range;
        if !(-90.0..=90.0).contains(&a) || !(-90.0..=90.0).contains(&b) || a >= b {
            return bad("synth.lat_range must be an increasing range inside [-90, 90]");
        }
        if !(-180.0..=180.0).contains(&c) || !(-180.0..=180.0).contains(&d) || c >= d {
            return bad("synth.lon_range must be an increasing range inside [-180, 180]");
        }
        if a < 0.0 && b > 0.0 || c < 0.0 && d > 0.0 {
            return bad("synth ranges must not straddle zero");
        }
        let cells = (((b - a) / CENTER_PITCH) as usize) * (((d - c) / CENTER_PITCH) as usize);
        if cells < self.clusters {
            return bad("synth ranges too small for the number of clusters");
        }
        Ok(())
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            tau_img: self.tau_img,
            tau_txt: self.tau_txt,
            seed: self.seed,
            non_location_jitter: self.non_location_jitter,
            neighbor_merge: self.neighbor_merge,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for synth.{key}")))
        }
        fn range(key: &str, v: &str) -> Result<(f64, f64)> {
            let (a, b) = v
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("synth.{key} expects `lo,hi`")))?;
            Ok((num(key, a)?, num(key, b)?))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "clusters" => self.clusters = num(key, value)?,
            "per_cluster" => self.per_cluster = num(key, value)?,
            "scenes" => self.scenes = num(key, value)?,
            "image_dim" => self.image_dim = num(key, value)?,
            "scene_weight" => self.scene_weight = num(key, value)?,
            "topic_weight" => self.topic_weight = num(key, value)?,
            "noise_weight" => self.noise_weight = num(key, value)?,
            "topic_words" => self.topic_words = num(key, value)?,
            "lat_range" => self.lat_range = range(key, value)?,
            "lon_range" => self.lon_range = range(key, value)?,
            "tau_img" => self.tau_img = num(key, value)?,
            "tau_txt" => self.tau_txt = num(key, value)?,
            "non_location_jitter" => self.non_location_jitter = num(key, value)?,
            "neighbor_merge" => self.neighbor_merge = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key synth.{key}"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(format!("synth.{k}"), v);
        };
        put("seed", self.seed.to_string());
        put("clusters", self.clusters.to_string());
        put("per_cluster", self.per_cluster.to_string());
        put("scenes", self.scenes.to_string());
        put("image_dim", self.image_dim.to_string());
        put("scene_weight", self.scene_weight.to_string());
        put("topic_weight", self.topic_weight.to_string());
        put("noise_weight", self.noise_weight.to_string());
        put("topic_words", self.topic_words.to_string());
        put("lat_range", format!("{},{}", self.lat_range.0, self.lat_range.1));
        put("lon_range", format!("{},{}", self.lon_range.0, self.lon_range.1));
        put("tau_img", self.tau_img.to_string());
        put("tau_txt", self.tau_txt.to_string());
        put("non_location_jitter", self.non_location_jitter.to_string());
        put("neighbor_merge", self.neighbor_merge.to_string());
        m
    }
}

/// Clean packages before bucketing, plus what generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub packages: Vec<Package>,
    pub gazetteer: Gazetteer,
    pub images: PrecomputedFeatures,
    /// Generator cluster of each package.
    pub truth: BTreeMap<String, u32>,
}

/// A finished synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dataset: BuiltDataset,
    pub gazetteer: Gazetteer,
    pub images: PrecomputedFeatures,
    pub truth: BTreeMap<String, u32>,
}

struct WordMaker {
    used: BTreeSet<String>,
}

impl WordMaker {
    fn new() -> Self {
        let used = STOPWORDS.iter().chain(&CONNECTORS).map(|s| s.to_string()).collect();
        WordMaker { used }
    }

    /// Capitalized pseudo-word, unique after lowercasing.
    fn word(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let syllables = rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(rng).expect("non-empty"));
                w.push_str(VOWELS.choose(rng).expect("non-empty"));
                w.push_str(CODAS.choose(rng).expect("non-empty"));
            }
            if self.used.insert(w.clone()) {
                let mut c = w.chars();
                let first = c.next().expect("non-empty").to_ascii_uppercase();
                return std::iter::once(first).chain(c).collect();
            }
        }
    }

    fn phrase(&mut self, rng: &mut ChaCha8Rng, words: usize) -> String {
        (0..words).map(|_| self.word(rng)).collect::<Vec<_>>().join(" ")
    }
}

struct ClusterSpec {
    gps: Gps,
    scene: usize,
    topic: Vec<String>,
    location: String,
    persons: [String; 2],
    organization: String,
    names: LocationNames,
}

fn centers(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Gps> {
    // Grid over magnitudes so truncation toward zero keeps each cluster in
    // one cell regardless of sign.
    let mag = |(lo, hi): (f64, f64)| if hi <= 0.0 { (-hi, -lo, -1.0) } else { (lo, hi, 1.0) };
    let (lat_lo, lat_hi, lat_sign) = mag(cfg.lat_range);
    let (lon_lo, lon_hi, lon_sign) = mag(cfg.lon_range);
    let rows = ((lat_hi - lat_lo) / CENTER_PITCH) as usize;
    let cols = ((lon_hi - lon_lo) / CENTER_PITCH) as usize;
    rand::seq::index::sample(rng, rows * cols, cfg.clusters)
        .into_iter()
        .map(|cell| {
            let (r, c) = (cell / cols, cell % cols);
            Gps::new(
                lat_sign * (lat_lo + r as f64 * CENTER_PITCH + CENTER_PITCH / 2.0),
                lon_sign * (lon_lo + c as f64 * CENTER_PITCH + CENTER_PITCH / 2.0),
            )
        })
        .collect()
}

fn entity_lists(
    cfg: &SynthConfig,
    lexicon: Option<&Gazetteer>,
    words: &mut WordMaker,
    rng: &mut ChaCha8Rng,
) -> Result<[Vec<String>; 3]> {
    let need = 2 * cfg.clusters;
    let mut out: [Vec<String>; 3] = Default::default();
    for (slot, kind) in out.iter_mut().zip([EntityKind::Location, EntityKind::Person, EntityKind::Organization]) {
        *slot = match lexicon {
            Some(g) => {
                let mut s = g.surfaces(kind);
                if s.len() < need {
                    return Err(Error::Config(format!(
                        "lexicon has {} {kind} entries, need at least {need}",
                        s.len()
                    )));
                }
                for w in s.iter().flat_map(|s| s.split_whitespace()) {
                    words.used.insert(w.to_lowercase());
                }
                s.shuffle(rng);
                s
            }
            None => (0..need).map(|_| words.phrase(rng, 2)).collect(),
        };
    }
    Ok(out)
}

/// Generates `clusters * per_cluster` clean packages. Entities come from
/// `lexicon` when given (at least `2 * clusters` surfaces per kind),
/// otherwise from invented words.
pub fn generate_synthetic_corpus(cfg: &SynthConfig, lexicon: Option<&Gazetteer>) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut words = WordMaker::new();
    let [locations, persons, organizations] = entity_lists(cfg, lexicon, &mut words, &mut rng)?;
    let countries: Vec<String> = (0..3).map(|_| words.word(&mut rng)).collect();
    let regions: Vec<String> = (0..cfg.scenes.max(4)).map(|_| words.word(&mut rng)).collect();

    let specs: Vec<ClusterSpec> = centers(cfg, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(c, gps)| {
            let scene = rng.random_range(0..cfg.scenes);
            ClusterSpec {
                gps,
                scene,
                topic: (0..cfg.topic_words).map(|_| words.word(&mut rng).to_lowercase()).collect(),
                location: locations[2 * c].clone(),
                persons: [persons[2 * c].clone(), persons[2 * c + 1].clone()],
                organization: organizations[2 * c].clone(),
                names: LocationNames {
                    country: countries[c % countries.len()].clone(),
                    county: words.word(&mut rng),
                    region: regions[scene % regions.len()].clone(),
                    locality: locations[2 * c].clone(),
                },
            }
        })
        .collect();

    let mut gazetteer = Gazetteer::new();
    for (list, kind) in [
        (&locations, EntityKind::Location),
        (&persons, EntityKind::Person),
        (&organizations, EntityKind::Organization),
    ] {
        for s in list {
            gazetteer.insert(s, kind);
        }
    }

    let scene_vecs: Vec<Vec<f64>> = (0..cfg.scenes)
        .map(|s| hash_vector(cfg.seed, &format!("scene:{s}"), cfg.image_dim))
        .collect();
    let mut images = PrecomputedFeatures::new(cfg.image_dim);
    let mut packages = Vec::with_capacity(cfg.clusters * cfg.per_cluster);
    let mut truth = BTreeMap::new();
    let noise_scale = cfg.noise_weight / (cfg.image_dim as f64).sqrt();
    for (c, spec) in specs.iter().enumerate() {
        let topic_vec = hash_vector(cfg.seed, &format!("topic:{c}"), cfg.image_dim);
        for m in 0..cfg.per_cluster {
            let id = format!("c{c:04}-{m:02}");
            let (tokens, entities) = caption(spec, &mut rng);
            let gps = Gps::new(
                spec.gps.lat + rng.random_range(-GPS_JITTER..=GPS_JITTER),
                spec.gps.lon + rng.random_range(-GPS_JITTER..=GPS_JITTER),
            );
            let mut p = Package::new(id.clone(), tokens, gps);
            p.entities = entities;
            p.loc_names = spec.names.clone();
            let image: Vec<f64> = scene_vecs[spec.scene]
                .iter()
                .zip(&topic_vec)
                .map(|(s, t)| {
                    cfg.scene_weight * s + cfg.topic_weight * t + noise_scale * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            images.insert(id.clone(), image)?;
            truth.insert(id, c as u32);
            packages.push(p);
        }
    }
    Ok(SyntheticCorpus {
        packages,
        gazetteer,
        images,
        truth,
    })
}

type Group = Vec<(Vec<String>, Option<EntityKind>)>;

/// One caption: topic words, stopwords and connector-led entity mentions,
/// in shuffled order.
fn caption(spec: &ClusterSpec, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<EntitySpan>) {
    let words = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
    let plain = |w: &str| (vec![w.to_string()], None);
    let mut groups: Vec<Group> = Vec::new();
    for t in &spec.topic {
        groups.push(vec![plain(t)]);
    }
    for _ in 0..rng.random_range(1..=3) {
        groups.push(vec![plain(STOPWORDS.choose(rng).expect("non-empty"))]);
    }
    groups.push(vec![plain("at"), (words(&spec.location), Some(EntityKind::Location))]);
    let order = if rng.random_bool(0.5) { [0, 1] } else { [1, 0] };
    let people = vec![
        plain(if rng.random_bool(0.5) { "with" } else { "by" }),
        (words(&spec.persons[order[0]]), Some(EntityKind::Person)),
        plain("and"),
        (words(&spec.persons[order[1]]), Some(EntityKind::Person)),
    ];
    groups.push(people);
    groups.push(vec![
        plain(if rng.random_bool(0.5) { "of" } else { "for" }),
        (words(&spec.organization), Some(EntityKind::Organization)),
    ]);
    groups.shuffle(rng);

    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    for (seg, kind) in groups.into_iter().flatten() {
        let start = tokens.len();
        tokens.extend(seg);
        if let Some(kind) = kind {
            spans.push(EntitySpan {
                start,
                end: tokens.len(),
                kind,
                surface: tokens[start..].join(" "),
            });
        }
    }
    (tokens, spans)
}

/// Generates a corpus and runs the full construction on it. Refinement
/// uses `text` for caption similarity.
pub fn synthesize(cfg: &SynthConfig, text: &dyn TextEmbedder, lexicon: Option<&Gazetteer>) -> Result<SynthOutput> {
    let corpus = generate_synthetic_corpus(cfg, lexicon)?;
    let features: BTreeMap<String, FeatureBundle> = corpus
        .packages
        .iter()
        .map(|p| Ok((p.id.clone(), featurize(p, text, &corpus.images)?)))
        .collect::<Result<_>>()?;
    let dataset = build_dataset(
        corpus.packages,
        &features,
        &corpus.gazetteer,
        cfg.build_options(),
        cfg.to_pairs(),
    )?;
    Ok(SynthOutput {
        dataset,
        gazetteer: corpus.gazetteer,
        images: corpus.images,
        truth: corpus.truth,
    })
}
